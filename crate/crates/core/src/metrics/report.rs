use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::Texture;

pub const CSV_HEADER: &str = "nodule_id,iou,asd_mm,radius_mm,texture,corrected";

/// One evaluated segmentation of one nodule. Each nodule normally has an
/// initial record and, after interaction, a corrected one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub nodule_id: String,
    pub iou: f64,
    /// `None` when the segmentation is empty and no surface exists.
    pub asd_mm: Option<f64>,
    pub radius_mm: f64,
    pub texture: Texture,
    pub corrected: bool,
}

pub fn write_csv(records: &[EvalRecord], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in records {
        let asd = r.asd_mm.map_or_else(|| "nan".to_string(), |a| format!("{a:.6}"));
        writeln!(
            w,
            "{},{:.6},{},{:.6},{},{}",
            r.nodule_id,
            r.iou,
            asd,
            r.radius_mm,
            r.texture.as_str(),
            r.corrected
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub n: usize,
    pub mean_iou_initial: f64,
    pub mean_iou_corrected: f64,
    pub mean_iou_improvement: f64,
    pub pct_improved: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n_nodules: usize,
    /// Final IoU: corrected where a correction exists, initial otherwise.
    pub mean_iou: f64,
    pub mean_asd_mm: f64,
    pub mean_iou_initial: f64,
    pub mean_asd_mm_initial: f64,
    /// Nodules entering the paired ASD means.
    pub n_asd_pairs: usize,
    /// Share (%) of nodules whose corrected IoU is strictly higher.
    pub pct_improved: f64,
    pub per_texture: BTreeMap<String, GroupStats>,
    /// Keyed by the lower edge of 1 mm radius bins.
    pub per_radius_bin: BTreeMap<u32, GroupStats>,
}

struct Pair<'a> {
    initial: &'a EvalRecord,
    last: &'a EvalRecord,
}

impl Pair<'_> {
    fn improved(&self) -> bool {
        self.last.iou > self.initial.iou
    }
}

fn group(pairs: &[&Pair]) -> GroupStats {
    let n = pairs.len();
    if n == 0 {
        return GroupStats::default();
    }
    let nf = n as f64;
    let init = pairs.iter().map(|p| p.initial.iou).sum::<f64>() / nf;
    let corr = pairs.iter().map(|p| p.last.iou).sum::<f64>() / nf;
    GroupStats {
        n,
        mean_iou_initial: init,
        mean_iou_corrected: corr,
        mean_iou_improvement: corr - init,
        pct_improved: 100.0 * pairs.iter().filter(|p| p.improved()).count() as f64 / nf,
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

pub fn summarize(records: &[EvalRecord]) -> EvalSummary {
    let mut by_id: BTreeMap<&str, (Option<&EvalRecord>, Option<&EvalRecord>)> = BTreeMap::new();
    for r in records {
        let e = by_id.entry(&r.nodule_id).or_default();
        if r.corrected {
            e.1 = Some(r);
        } else {
            e.0 = Some(r);
        }
    }
    let pairs: Vec<Pair> = by_id
        .values()
        .filter_map(|(i, c)| {
            let initial = (*i).or(*c)?;
            Some(Pair {
                initial,
                last: c.unwrap_or(initial),
            })
        })
        .collect();
    let refs: Vec<&Pair> = pairs.iter().collect();
    let all = group(&refs);

    let asd_pairs: Vec<(f64, f64)> = pairs
        .iter()
        .filter_map(|p| Some((p.initial.asd_mm?, p.last.asd_mm?)))
        .collect();

    let mut per_texture = BTreeMap::new();
    for t in Texture::ALL {
        let sel: Vec<&Pair> = pairs.iter().filter(|p| p.initial.texture == t).collect();
        if !sel.is_empty() {
            per_texture.insert(t.as_str().to_string(), group(&sel));
        }
    }
    let mut per_radius_bin: BTreeMap<u32, Vec<&Pair>> = BTreeMap::new();
    for p in &pairs {
        per_radius_bin
            .entry(p.initial.radius_mm.max(0.0).floor() as u32)
            .or_default()
            .push(p);
    }

    EvalSummary {
        n_nodules: pairs.len(),
        mean_iou: all.mean_iou_corrected,
        mean_asd_mm: mean(asd_pairs.iter().map(|p| p.1)),
        mean_iou_initial: all.mean_iou_initial,
        mean_asd_mm_initial: mean(asd_pairs.iter().map(|p| p.0)),
        n_asd_pairs: asd_pairs.len(),
        pct_improved: all.pct_improved,
        per_texture,
        per_radius_bin: per_radius_bin
            .into_iter()
            .map(|(k, v)| (k, group(&v)))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, iou: f64, asd: Option<f64>, r: f64, corrected: bool) -> EvalRecord {
        EvalRecord {
            nodule_id: id.into(),
            iou,
            asd_mm: asd,
            radius_mm: r,
            texture: Texture::Solid,
            corrected,
        }
    }

    #[test]
    fn unchanged_corrections_improve_nothing() {
        let recs = vec![
            rec("a", 0.5, Some(1.0), 1.5, false),
            rec("a", 0.5, Some(1.0), 1.5, true),
            rec("b", 0.7, Some(0.5), 3.2, false),
            rec("b", 0.7, Some(0.5), 3.2, true),
        ];
        let s = summarize(&recs);
        assert_eq!(s.n_nodules, 2);
        assert_eq!(s.pct_improved, 0.0);
        assert_eq!(s.mean_iou, s.mean_iou_initial);
        assert_eq!(s.per_radius_bin.keys().copied().collect::<Vec<_>>(), vec![1, 3]);
    }

    #[test]
    fn improvement_and_paired_asd() {
        let recs = vec![
            rec("a", 0.5, Some(2.0), 1.5, false),
            rec("a", 0.8, Some(1.0), 1.5, true),
            rec("b", 0.0, None, 2.5, false),
            rec("b", 0.4, Some(3.0), 2.5, true),
        ];
        let s = summarize(&recs);
        assert_eq!(s.pct_improved, 100.0);
        assert_eq!(s.n_asd_pairs, 1);
        assert_eq!(s.mean_asd_mm_initial, 2.0);
        assert_eq!(s.mean_asd_mm, 1.0);
        assert!((s.mean_iou - 0.6).abs() < 1e-12);

        let mut buf = Vec::new();
        write_csv(&recs, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        assert_eq!(lines.nth(2), Some("b,0.000000,nan,2.500000,solid,false"));
        let json = serde_json::to_value(&s).unwrap();
        assert!(json["per_radius_bin"]["1"]["n"].is_number());
        assert!(json["per_texture"]["solid"].is_object());
    }
}
