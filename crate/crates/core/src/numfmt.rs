//! Float formatting for human-readable artifacts.

/// Six significant digits, positional notation for moderate magnitudes and
/// scientific otherwise.
pub fn sig6(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    if x == 0.0 {
        return "0".into();
    }
    let exp = x.abs().log10().floor() as i32;
    if (-5..15).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{x:.5e}")
    }
}

/// Shortest representation that parses back to the same value.
pub fn exact(x: f64) -> String {
    format!("{x:?}")
}
