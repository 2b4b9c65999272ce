use iwnet_core::{Error, Result};

/// Parse `z0,y0,x0,z1,y1,x1` into two finite points.
pub fn parse_points(s: &str) -> Result<[[f64; 3]; 2]> {
    let v = s
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|e| Error::InvalidArgument(format!("point coordinate {t:?}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if v.len() != 6 {
        return Err(Error::InvalidArgument(format!("expected 6 coordinates, got {}", v.len())));
    }
    if v.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite);
    }
    Ok([[v[0], v[1], v[2]], [v[3], v[4], v[5]]])
}

/// Parse a comma-separated list of finite, non-negative decay exponents.
pub fn parse_ps(s: &str) -> Result<Vec<f64>> {
    let v = s
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|e| Error::InvalidArgument(format!("decay exponent {t:?}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if v.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::InvalidArgument("decay exponents must be finite and non-negative".into()));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points() {
        assert_eq!(parse_points("1,2,3, 4,5,6.5").unwrap(), [[1.0, 2.0, 3.0], [4.0, 5.0, 6.5]]);
        assert!(parse_points("1,2,3,4,5").is_err());
        assert!(parse_points("1,2,3,4,5,x").is_err());
        assert!(matches!(parse_points("1,2,3,4,5,inf"), Err(Error::NonFinite)));
        assert_eq!(parse_ps("0,0.5,1,2").unwrap(), vec![0.0, 0.5, 1.0, 2.0]);
        assert!(parse_ps("-1").is_err());
    }
}
