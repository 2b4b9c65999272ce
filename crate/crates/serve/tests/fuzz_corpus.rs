use std::fs;
use std::path::PathBuf;

use iwnet_core::net::decode_checkpoint;
use iwnet_core::volgrid::decode_iwv1;
use iwnet_serve::fuzzing::{self, split_prefixed};

fn corpus(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

fn seed<'a>(seeds: &'a [(String, Vec<u8>)], name: &str) -> &'a [u8] {
    &seeds.iter().find(|(n, _)| n == name).unwrap().1
}

#[test]
fn iwv1_seeds() {
    let seeds = corpus("iwv1_decode");
    for (_, data) in &seeds {
        fuzzing::iwv1(data);
    }
    let ok = |n: &str| {
        let (h, r) = split_prefixed(seed(&seeds, n));
        decode_iwv1(h, r).is_ok()
    };
    for n in ["scalar", "soft", "mask"] {
        assert!(ok(n), "{n}");
        assert!(!ok(&format!("{n}_truncated")), "{n}");
    }
    for n in ["mask_nonbinary", "kind_dtype_mismatch", "zero_dim"] {
        assert!(!ok(n), "{n}");
    }
}

#[test]
fn checkpoint_seeds() {
    let seeds = corpus("checkpoint_decode");
    for (_, data) in &seeds {
        fuzzing::checkpoint(data);
    }
    let ok = |n: &str| {
        let (m, b) = split_prefixed(seed(&seeds, n));
        decode_checkpoint(std::str::from_utf8(m).unwrap(), b).is_ok()
    };
    assert!(ok("tiny"));
    for n in ["tiny_truncated", "wrong_version", "nan_weight"] {
        assert!(!ok(n), "{n}");
    }
}

#[test]
fn http_and_points_seeds() {
    for (_, data) in corpus("http_request_decode") {
        fuzzing::http_request(&data);
    }
    for (_, data) in corpus("points_arg") {
        fuzzing::points(&data);
    }
}

#[test]
fn mutated_inputs_do_not_panic() {
    // cheap deterministic mutations of every seed
    let mut s = 0x2545f4914f6cdd1du64;
    for target in ["iwv1_decode", "checkpoint_decode", "http_request_decode", "points_arg"] {
        for (_, data) in corpus(target) {
            for _ in 0..20 {
                let mut d = data.clone();
                for _ in 0..4 {
                    s ^= s << 13;
                    s ^= s >> 7;
                    s ^= s << 17;
                    if d.is_empty() {
                        break;
                    }
                    let i = (s as usize) % d.len();
                    match s >> 62 {
                        0 => d[i] ^= (s >> 8) as u8,
                        1 => d.truncate(i),
                        2 => d.insert(i, (s >> 16) as u8),
                        _ => {
                            d.remove(i);
                        }
                    }
                }
                match target {
                    "iwv1_decode" => fuzzing::iwv1(&d),
                    "checkpoint_decode" => fuzzing::checkpoint(&d),
                    "http_request_decode" => fuzzing::http_request(&d),
                    _ => fuzzing::points(&d),
                }
            }
        }
    }
}
