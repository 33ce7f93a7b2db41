//! Single-band sinusoidal positional encoding.
//!
//! Level `k` of the pyramid sees coordinates through one frequency band,
//! `(sin(2^(k+k0) x), cos(2^(k+k0) x))` applied per axis, which yields a
//! 6-vector: the three sines first, then the three cosines.

use crate::autodiff::{self, Tape, Var};
use crate::types::Point3;

/// Width of an encoded coordinate.
pub const ENCODED_DIM: usize = 6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EncodingError {
    #[error("coordinate is not finite")]
    NonFinite,
    #[error(transparent)]
    Tape(#[from] autodiff::AutodiffError),
}

/// Encoded coordinate `(sin x, sin y, sin z, cos x, cos y, cos z)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodedCoord(pub [f64; ENCODED_DIM]);

/// Frequency multiplier of level `k`.
pub fn frequency(k: usize, k0: i32) -> f64 {
    2f64.powi(k as i32 + k0)
}

pub fn positional_encode(x: Point3, k: usize, k0: i32) -> Result<EncodedCoord, EncodingError> {
    if !x.iter().all(|c| c.is_finite()) {
        return Err(EncodingError::NonFinite);
    }
    let f = frequency(k, k0);
    let mut out = [0.0; ENCODED_DIM];
    for i in 0..3 {
        let (s, c) = (f * x[i]).sin_cos();
        out[i] = s;
        out[i + 3] = c;
    }
    Ok(EncodedCoord(out))
}

/// Encodes an n x 3 batch recorded on `tape`, giving an n x 6 batch.
pub fn encode_batch(tape: &mut Tape, points: Var, k: usize, k0: i32) -> autodiff::Result<Var> {
    let scaled = tape.mul_scalar(points, frequency(k, k0))?;
    let s = tape.sin(scaled)?;
    let c = tape.cos(scaled)?;
    tape.concat(&[s, c])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradient_check, Tensor};
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn origin_encodes_to_sin0_cos0() {
        for k in 1..10 {
            let e = positional_encode([0.0; 3], k, -8).unwrap();
            assert_eq!(e.0, [0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        }
    }

    #[test]
    fn quarter_turn_at_unit_frequency() {
        // k + k0 = 0.
        let e = positional_encode([FRAC_PI_2, 0.0, 0.0], 3, -3).unwrap();
        let expected = [1.0, 0.0, 0.0, 0.0, 1.0, 1.0];
        for (a, b) in e.0.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn first_level_default_band() {
        // sin/cos of 2^-7, from the Taylor series to 1e-20.
        let t: f64 = 0.0078125;
        let sin_ref = t - t.powi(3) / 6.0 + t.powi(5) / 120.0 - t.powi(7) / 5040.0;
        let cos_ref = 1.0 - t.powi(2) / 2.0 + t.powi(4) / 24.0 - t.powi(6) / 720.0;
        assert!((sin_ref - 0.0078124205).abs() < 1e-9);
        assert!((cos_ref - 0.9999694826).abs() < 1e-9);
        let e = positional_encode([1.0, 1.0, 1.0], 1, -8).unwrap();
        for i in 0..3 {
            assert!((e.0[i] - sin_ref).abs() < 1e-15);
            assert!((e.0[i + 3] - cos_ref).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_rejected() {
        assert_eq!(
            positional_encode([f64::NAN, 0.0, 0.0], 1, 0),
            Err(EncodingError::NonFinite)
        );
    }

    #[test]
    fn batch_matches_scalar() {
        let pts = [[0.3, -0.2, 0.9], [1.5, 2.0, -0.7]];
        let mut tape = Tape::new();
        let p = tape
            .constant(Tensor::from_rows(
                &pts.iter().map(|p| p.to_vec()).collect::<Vec<_>>(),
            ))
            .unwrap();
        let e = encode_batch(&mut tape, p, 5, -3).unwrap();
        let v = tape.value(e);
        assert_eq!(v.shape(), (2, 6));
        for (r, p) in pts.iter().enumerate() {
            let s = positional_encode(*p, 5, -3).unwrap();
            for c in 0..6 {
                assert_eq!(v.get(r, c), s.0[c]);
            }
        }
    }

    #[test]
    fn sine_magnitude_grows_with_level() {
        let x: Point3 = [0.01, -0.02, 0.015];
        let mut prev = [0.0f64; 3];
        for k in 1..=9 {
            let f = frequency(k, -8);
            if x.iter().any(|c| f * c.abs() >= FRAC_PI_2) {
                break;
            }
            let e = positional_encode(x, k, -8).unwrap();
            for i in 0..3 {
                assert!(e.0[i].abs() > prev[i]);
                prev[i] = e.0[i].abs();
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = Tensor::from_rows(&[vec![0.3, -1.2, 0.7], vec![-0.4, 0.1, 2.2]]);
        let report = gradient_check(
            |t, v| {
                let e = encode_batch(t, v[0], 9, -6)?;
                let w = t.mul(e, e)?;
                let w = t.mul(w, e)?;
                t.sum(w)
            },
            &[p],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{:?}", report.worst);
    }

    proptest! {
        #[test]
        fn bounded_and_unit_circle(x in prop::array::uniform3(-1e6f64..1e6), k in 1usize..12, k0 in -10i32..4) {
            let e = positional_encode(x, k, k0).unwrap();
            for i in 0..3 {
                prop_assert!(e.0[i].abs() <= 1.0 && e.0[i + 3].abs() <= 1.0);
                prop_assert!((e.0[i].powi(2) + e.0[i + 3].powi(2) - 1.0).abs() < 1e-12);
            }
        }
    }
}
