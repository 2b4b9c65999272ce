//! Training objective: soft IoU, the attraction term over the high-weight
//! region of the weight map, and their convex blend. Every term returns its
//! gradient with respect to the soft prediction.

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the IoU term; the attraction term gets `1 - lambda1`.
    pub lambda1: f64,
    /// Weight-map level above which a voxel belongs to the attraction region.
    pub gamma: f64,
    /// Decay exponent forwarded to the weight map.
    pub decay_p: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.68,
            gamma: 0.59,
            decay_p: 0.44,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("gamma", self.gamma),
            ("decay_p", self.decay_p),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossValue<T> {
    pub total: T,
    pub iou_term: T,
    pub attraction_term: T,
    pub grad_wrt_pred: Vec<T>,
}

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a} vs {b} voxels")));
    }
    Ok(())
}

/// `1 - sum(t*p) / (sum(t + p) - sum(t*p))` and its gradient.
///
/// Both masks empty leaves the ratio undefined and is reported as
/// [`Error::EmptyUnion`].
pub fn iou_loss<T: Float>(pred: &[T], target: &[u8]) -> Result<(T, Vec<T>)> {
    check_len(pred.len(), target.len(), "iou_loss")?;
    let mut inter = 0.0f64;
    let mut total = 0.0f64;
    for (&p, &t) in pred.iter().zip(target) {
        if t > 1 {
            return Err(Error::InvalidArgument(format!("target value {t} is not binary")));
        }
        let p = p.to_f64().unwrap_or(f64::NAN);
        let t = t as f64;
        inter += t * p;
        total += t + p;
    }
    let union = total - inter;
    if union <= 0.0 {
        return Err(Error::EmptyUnion);
    }
    let loss = 1.0 - inter / union;
    let u2 = union * union;
    let grad = target
        .iter()
        .map(|&t| {
            let t = t as f64;
            T::from(-(t * union - inter * (1.0 - t)) / u2).unwrap()
        })
        .collect();
    Ok((T::from(loss).unwrap(), grad))
}

/// Voxels whose weight exceeds `gamma`.
pub fn attraction_region(weightmap: &[f32], gamma: f64) -> Vec<bool> {
    weightmap.iter().map(|&m| m as f64 > gamma).collect()
}

/// `1 - mean(pred over R)` with `R = {M > gamma}`; an empty region
/// contributes zero loss and zero gradient.
pub fn attraction_loss<T: Float>(pred: &[T], weightmap: &[f32], gamma: f64) -> Result<(T, Vec<T>)> {
    check_len(pred.len(), weightmap.len(), "attraction_loss")?;
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("gamma = {gamma}")));
    }
    let region = attraction_region(weightmap, gamma);
    let size = region.iter().filter(|&&r| r).count();
    if size == 0 {
        return Ok((T::zero(), vec![T::zero(); pred.len()]));
    }
    let covered: f64 = pred
        .iter()
        .zip(&region)
        .filter(|(_, &r)| r)
        .map(|(p, _)| p.to_f64().unwrap_or(f64::NAN))
        .sum();
    let g = T::from(-1.0 / size as f64).unwrap();
    let grad = region.iter().map(|&r| if r { g } else { T::zero() }).collect();
    Ok((T::from(1.0 - covered / size as f64).unwrap(), grad))
}

/// `lambda1 * L_iou + (1 - lambda1) * L_attraction` with blended gradients.
pub fn combined_loss<T: Float>(
    pred: &[T],
    target: &[u8],
    weightmap: &[f32],
    config: &LossConfig,
) -> Result<LossValue<T>> {
    config.validate()?;
    let (iou_term, g_iou) = iou_loss(pred, target)?;
    let (attraction_term, g_att) = attraction_loss(pred, weightmap, config.gamma)?;
    let l1 = T::from(config.lambda1).unwrap();
    let l2 = T::from(1.0 - config.lambda1).unwrap();
    let grad_wrt_pred = g_iou
        .iter()
        .zip(&g_att)
        .map(|(&a, &b)| l1 * a + l2 * b)
        .collect();
    Ok(LossValue {
        total: l1 * iou_term + l2 * attraction_term,
        iou_term,
        attraction_term,
        grad_wrt_pred,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn iou_reference_values() {
        let (l, g) = iou_loss(&[1.0f64, 0.0, 1.0], &[1, 0, 1]).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|v| v.is_finite()));
        let (l, _) = iou_loss(&[0.0f64; 3], &[1, 0, 0]).unwrap();
        assert_eq!(l, 1.0);
        let (l, _) = iou_loss(&[0.5f64, 0.5], &[1, 0]).unwrap();
        assert!((l - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(iou_loss(&[0.0f64; 4], &[0; 4]), Err(Error::EmptyUnion)));
        assert!(iou_loss(&[0.0f64; 4], &[0; 3]).is_err());
    }

    #[test]
    fn attraction_reference_values() {
        let m = [0.9f32, 0.8, 0.7, 0.65, 0.1, 0.0];
        let (l, _) = attraction_loss(&[1.0f64; 6], &m, 0.59).unwrap();
        assert_eq!(l, 0.0);
        let (l, g) = attraction_loss(&[0.25f64; 6], &m, 0.59).unwrap();
        assert!((l - 0.75).abs() < 1e-15);
        assert_eq!(g, vec![-0.25, -0.25, -0.25, -0.25, 0.0, 0.0]);
        let (l, g) = attraction_loss(&[0.3f64; 6], &m, 1.0).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn blend_reference_values() {
        // iou term 0.5 from the first two voxels (I = 1, U = 2); the last
        // four form the attraction region, covered at 0.75 -> term 0.25
        let pred = [1.0f64, 0.0, 0.75, 0.75, 0.75, 0.75];
        let m = [0.0f32, 0.0, 1.0, 1.0, 1.0, 1.0];
        let (iou, _) = iou_loss(&pred[..2], &[1, 1]).unwrap();
        assert_eq!(iou, 0.5);
        let (att, _) = attraction_loss(&pred, &m, 0.59).unwrap();
        assert_eq!(att, 0.25);
        let cfg = LossConfig::default();
        assert!((cfg.lambda1 * iou + (1.0 - cfg.lambda1) * att - 0.42).abs() < 1e-12);

        let target = [1u8, 1, 0, 0, 0, 0];
        let v = combined_loss(&pred, &target, &m, &cfg).unwrap();
        assert!((v.total - (0.68 * v.iou_term + 0.32 * v.attraction_term)).abs() < 1e-12);
    }

    #[test]
    fn degenerate_blends() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pred: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
        let target: Vec<u8> = (0..64).map(|i| u8::from(i % 3 == 0)).collect();
        let m: Vec<f32> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
        let only_iou = combined_loss(&pred, &target, &m, &LossConfig { lambda1: 1.0, ..Default::default() }).unwrap();
        assert_eq!(only_iou.total, only_iou.iou_term);
        let only_att = combined_loss(&pred, &target, &m, &LossConfig { lambda1: 0.0, ..Default::default() }).unwrap();
        assert_eq!(only_att.total, only_att.attraction_term);
    }

    fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
        let mut a = x.to_vec();
        let mut b = x.to_vec();
        a[i] += h;
        b[i] -= h;
        (f(&a) - f(&b)) / (2.0 * h)
    }

    fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
    }

    #[test]
    fn gradients_match_finite_differences_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let n = 216; // 6^3
            let pred: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..0.9)).collect();
            let target: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.3))).collect();
            let m: Vec<f32> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let cfg = LossConfig::default();
            let v = combined_loss(&pred, &target, &m, &cfg).unwrap();
            let f = |p: &[f64]| combined_loss(p, &target, &m, &cfg).unwrap().total;
            for i in (0..n).step_by(7) {
                let num = central_difference(f, &pred, i, 1e-3);
                assert!(rel_err(v.grad_wrt_pred[i], num) < 1e-6, "voxel {i}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 125;
        let pred: Vec<f32> = (0..n).map(|_| rng.random_range(0.1..0.9)).collect();
        let target: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.4))).collect();
        let m: Vec<f32> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let cfg = LossConfig::default();
        let v = combined_loss(&pred, &target, &m, &cfg).unwrap();
        // oracle evaluated in f64 at the same (f32-representable) point
        let wide: Vec<f64> = pred.iter().map(|&p| p as f64).collect();
        let f = |p: &[f64]| combined_loss(p, &target, &m, &cfg).unwrap().total;
        for i in 0..n {
            let num = central_difference(f, &wide, i, 1e-3);
            assert!(rel_err(v.grad_wrt_pred[i] as f64, num) < 1e-3, "voxel {i}");
        }
    }

    proptest! {
        #[test]
        fn terms_in_unit_interval(
            pred in prop::collection::vec(0.0f64..=1.0, 27),
            target in prop::collection::vec(0u8..2, 27),
            m in prop::collection::vec(0.0f32..=1.0, 27),
            lambda1 in 0.0f64..=1.0, gamma in 0.0f64..=1.0,
        ) {
            prop_assume!(target.iter().any(|&t| t == 1));
            let cfg = LossConfig { lambda1, gamma, decay_p: 0.5 };
            let v = combined_loss(&pred, &target, &m, &cfg).unwrap();
            for x in [v.total, v.iou_term, v.attraction_term] {
                prop_assert!((-1e-12..=1.0 + 1e-12).contains(&x));
            }
            prop_assert!((v.total - (lambda1 * v.iou_term + (1.0 - lambda1) * v.attraction_term)).abs() < 1e-6);
        }

        #[test]
        fn iou_symmetric_for_binary_pred(
            a in prop::collection::vec(0u8..2, 20),
            b in prop::collection::vec(0u8..2, 20),
        ) {
            prop_assume!(a.iter().chain(&b).any(|&v| v == 1));
            let pa: Vec<f64> = a.iter().map(|&v| v as f64).collect();
            let pb: Vec<f64> = b.iter().map(|&v| v as f64).collect();
            prop_assert_eq!(iou_loss(&pa, &b).unwrap().0, iou_loss(&pb, &a).unwrap().0);
        }

        #[test]
        fn attraction_monotone_inside_constant_outside(
            pred in prop::collection::vec(0.0f64..0.9, 16),
            m in prop::collection::vec(0.0f32..=1.0, 16),
            i in 0usize..16,
        ) {
            let (base, _) = attraction_loss(&pred, &m, 0.5).unwrap();
            let mut up = pred.clone();
            up[i] += 0.1;
            let (after, _) = attraction_loss(&up, &m, 0.5).unwrap();
            if m[i] as f64 > 0.5 {
                prop_assert!(after <= base);
            } else {
                prop_assert_eq!(after, base);
            }
        }
    }
}
