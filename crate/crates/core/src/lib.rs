//! Stochastic control of a reservoir fed by clustered-jump inflows.

pub mod calibration;
pub mod dynamics;
pub mod error;
pub mod jump_process;
pub mod lq_exact;
pub mod lsmc;

pub use error::{Error, Result};

/// Float rendered with at most 9 significant digits, in plain notation for
/// moderate magnitudes and scientific otherwise.
pub fn format_float(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    let rounded: f64 = format!("{x:.8e}").parse().unwrap_or(x);
    let mag = rounded.abs();
    if rounded == 0.0 || (1e-5..1e16).contains(&mag) {
        rounded.to_string()
    } else {
        format!("{rounded:e}")
    }
}

#[cfg(test)]
mod tests {
    use super::format_float;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(format_float(1.0 / 3.0), "0.333333333");
        assert_eq!(format_float(16666.666666666), "16666.6667");
        assert_eq!(format_float(2.5e-9), "2.5e-9");
        assert_eq!(format_float(0.0), "0");
        assert_eq!(format_float(f64::NEG_INFINITY), "-inf");
        let x = 123456.789123;
        assert!((format_float(x).parse::<f64>().unwrap() - x).abs() <= 1e-9 * x);
    }
}
