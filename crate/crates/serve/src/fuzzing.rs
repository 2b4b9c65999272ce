//! Entry points shared by the fuzz targets and the corpus replay test. Each
//! takes arbitrary bytes and must return without panicking.

use std::sync::OnceLock;

use iwnet_core::net::{decode_checkpoint, WNetConfig, WNetParams};
use iwnet_core::volgrid::decode_iwv1;

use crate::points::{parse_points, parse_ps};
use crate::service::{Route, ServiceState};

/// Split `data` into two parts at a little-endian `u32` length prefix.
pub fn split_prefixed(data: &[u8]) -> (&[u8], &[u8]) {
    if data.len() < 4 {
        return (data, &[]);
    }
    let n = u32::from_le_bytes([data[0], data[1], data[2], data[3]]) as usize;
    let rest = &data[4..];
    let n = n.min(rest.len());
    rest.split_at(n)
}

/// Inverse of [`split_prefixed`].
pub fn join_prefixed(a: &[u8], b: &[u8]) -> Vec<u8> {
    let mut out = (a.len() as u32).to_le_bytes().to_vec();
    out.extend_from_slice(a);
    out.extend_from_slice(b);
    out
}

pub fn iwv1(data: &[u8]) {
    let (header, raw) = split_prefixed(data);
    if let Ok(v) = decode_iwv1(header, raw) {
        let (h, r) = iwnet_core::volgrid::encode_iwv1(&v);
        assert_eq!(decode_iwv1(&h, &r).ok().as_ref(), Some(&v));
    }
}

pub fn checkpoint(data: &[u8]) {
    let (manifest, blob) = split_prefixed(data);
    let Ok(manifest) = std::str::from_utf8(manifest) else {
        return;
    };
    if let Ok(p) = decode_checkpoint(manifest, blob) {
        assert!(p.all_finite());
    }
}

fn fuzz_state() -> &'static ServiceState {
    static STATE: OnceLock<ServiceState> = OnceLock::new();
    STATE.get_or_init(|| {
        let params = WNetParams::init(WNetConfig::tiny(), 0).expect("tiny config is valid");
        ServiceState::new(params, 0.44).expect("fresh parameters are valid")
    })
}

/// First byte picks the route, the rest is the request body.
pub fn http_request(data: &[u8]) {
    let Some((&sel, body)) = data.split_first() else {
        return;
    };
    let route = match sel % 3 {
        0 => Route::Health,
        1 => Route::Segment,
        _ => Route::Correct,
    };
    let (status, out) = fuzz_state().handle(route, body);
    let v: serde_json::Value = serde_json::from_slice(&out).expect("responses are JSON");
    if status != 200 {
        assert!(v["code"].is_string() && v["message"].is_string());
        assert!((400..600).contains(&status));
    }
}

pub fn points(data: &[u8]) {
    let s = String::from_utf8_lossy(data);
    if let Ok(p) = parse_points(&s) {
        assert!(p.iter().flatten().all(|c| c.is_finite()));
    }
    if let Ok(ps) = parse_ps(&s) {
        assert!(ps.iter().all(|p| p.is_finite() && *p >= 0.0));
    }
}
