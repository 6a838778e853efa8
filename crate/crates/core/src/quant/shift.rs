use crate::error::{Error, Result};

/// `s * (v - (v >> aq))` with an arithmetic (floor) shift.
///
/// Approximates `s * v * (1 - 2^-aq)` with an error below one `s`.
pub fn shift_decay_scalar(v: i64, aq: u32, scale: f64) -> f64 {
    let shifted = v >> aq.min(63);
    scale * (v - shifted) as f64
}

/// Elementwise [`shift_decay_scalar`] over centered hidden-state codes
/// `v = h^q - z` and decay codes `aq`.
pub fn shift_decay(v: &[i64], aq: &[u8], scale: f64) -> Result<Vec<f64>> {
    if v.len() != aq.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} hidden codes vs {} decay codes",
            v.len(),
            aq.len()
        )));
    }
    Ok(v.iter()
        .zip(aq)
        .map(|(&v, &a)| shift_decay_scalar(v, u32::from(a), scale))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn real(v: i64, aq: u32, s: f64) -> f64 {
        s * v as f64 * (1.0 - (-f64::from(aq)).exp2())
    }

    #[test]
    fn examples() {
        assert_eq!(shift_decay_scalar(12, 2, 1.0), 9.0);
        assert_eq!(real(12, 2, 1.0), 9.0);

        assert_eq!(shift_decay_scalar(13, 2, 1.0), 10.0);
        assert!((shift_decay_scalar(13, 2, 1.0) - real(13, 2, 1.0)).abs() < 1.0);

        // floor(-13 / 4) = -4
        assert_eq!(-13i64 >> 2, -4);
        assert_eq!(shift_decay_scalar(-13, 2, 0.5), -4.5);
        let err = (shift_decay_scalar(-13, 2, 0.5) - real(-13, 2, 0.5)).abs();
        assert!((err - 0.375).abs() < 1e-12);
    }

    #[test]
    fn zero_code_clears_state() {
        assert_eq!(shift_decay_scalar(1234, 0, 0.3), 0.0);
    }

    #[test]
    fn huge_codes_do_not_overflow() {
        assert_eq!(shift_decay_scalar(-5, 255, 1.0), -4.0);
        assert_eq!(shift_decay_scalar(5, 255, 1.0), 5.0);
    }

    #[test]
    fn exhaustive_bound_small_range() {
        for b in [2u32, 3, 4] {
            let top = (1u32 << b) - 1;
            for v in -(1i64 << 10)..=(1 << 10) {
                for aq in 0..=top {
                    for s in [1.0, 0.37, 2.5] {
                        let e = (shift_decay_scalar(v, aq, s) - real(v, aq, s)).abs();
                        assert!(e < s, "v={v} aq={aq} s={s} err={e}");
                    }
                }
            }
        }
    }

    #[test]
    fn length_mismatch() {
        assert!(shift_decay(&[1, 2], &[1], 1.0).is_err());
        assert_eq!(shift_decay(&[12, 13], &[2, 2], 1.0).unwrap(), vec![9.0, 10.0]);
    }
}
