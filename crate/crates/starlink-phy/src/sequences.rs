//! Default synchronization sequences.
//!
//! The true downlink PSS/SSS sample values are treated as pluggable inputs
//! (they come from external capture analysis, not from anything this crate
//! derives). For self-contained tests the crate ships deterministic stand-ins
//! with the right structure:
//!
//! * PSS — a full-symbol-length constant-amplitude quadratic-phase (chirp)
//!   sequence with no internal repetition, so its autocorrelation is a clean
//!   single peak;
//! * SSS — one ordinary OFDM symbol of seeded QPSK coefficients across the
//!   live subcarriers.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::constellation::{Constellation, Modulation};
use crate::grid::{self, NS, SYMBOL_LEN};

/// Seed for the default SSS coefficient draw.
const SSS_SEED: u64 = 0x5353_5353;

/// Chirp root for the default PSS; coprime with the symbol length so the
/// quadratic phase never repeats within the sequence.
const PSS_ROOT: u64 = 7;

/// Default PSS: `SYMBOL_LEN` time-domain samples of a constant-amplitude
/// chirp, scaled to the same average power as a fully loaded OFDM symbol.
pub fn default_pss() -> Vec<Complex64> {
    let amplitude = (grid::NUM_LIVE as f64 / NS as f64).sqrt();
    (0..SYMBOL_LEN as u64)
        .map(|n| {
            // Quadratic phase mod 2·SYMBOL_LEN keeps the argument small and
            // the sequence exactly periodic-free over its length.
            let q = (PSS_ROOT * n * n) % (2 * SYMBOL_LEN as u64);
            let phase = -std::f64::consts::PI * q as f64 / SYMBOL_LEN as f64;
            Complex64::from_polar(amplitude, phase)
        })
        .collect()
}

/// Default SSS: `NS` frequency-domain coefficients, seeded QPSK on every
/// live subcarrier, zero on the gutter.
pub fn default_sss() -> Vec<Complex64> {
    let mut rng = ChaCha8Rng::seed_from_u64(SSS_SEED);
    let qpsk = Constellation::new(Modulation::Qpsk);
    (0..NS)
        .map(|k| {
            if grid::is_live(k) {
                qpsk.points()[rng.gen_range(0..4)]
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pss_is_constant_amplitude_and_deterministic() {
        let pss = default_pss();
        assert_eq!(pss.len(), SYMBOL_LEN);
        let amplitude = (grid::NUM_LIVE as f64 / NS as f64).sqrt();
        for &x in &pss {
            assert!((x.norm() - amplitude).abs() < 1e-12);
        }
        assert_eq!(pss, default_pss());
    }

    #[test]
    fn pss_autocorrelation_sidelobes_are_low() {
        let pss = default_pss();
        let energy: f64 = pss.iter().map(Complex64::norm_sqr).sum();
        for lag in [1usize, 2, 5, 33, 528, 1055] {
            let r: Complex64 = pss[lag..]
                .iter()
                .zip(&pss)
                .map(|(a, b)| a * b.conj())
                .sum();
            assert!(
                r.norm() < 0.2 * energy,
                "lag {lag}: sidelobe {:.3} of peak",
                r.norm() / energy
            );
        }
    }

    #[test]
    fn sss_covers_live_subcarriers_with_qpsk() {
        let sss = default_sss();
        assert_eq!(sss.len(), NS);
        assert_eq!(sss, default_sss());
        let qpsk = Constellation::new(Modulation::Qpsk);
        for (k, &x) in sss.iter().enumerate() {
            if grid::is_live(k) {
                let (_, p) = qpsk.nearest(x);
                assert!((x - p).norm() < 1e-15, "k={k}");
            } else {
                assert_eq!(x, Complex64::new(0.0, 0.0), "gutter k={k}");
            }
        }
        // All four points actually occur.
        for point in qpsk.points() {
            assert!(sss.iter().any(|x| (x - point).norm() < 1e-12));
        }
    }
}
