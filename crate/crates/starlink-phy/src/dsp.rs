//! Shared signal-processing primitives: FFT wrappers, tone search,
//! windowed-sinc fractional resampling, block correlation, local polynomial
//! smoothing, and complex Gaussian noise.
//!
//! Everything here is generic machinery with no knowledge of the frame
//! layout; the pipeline modules own all structure-specific logic.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::{Fft, FftPlanner};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan_forward(len: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(len))
}

fn plan_inverse(len: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(len))
}

/// In-place unnormalized forward DFT (`X[b] = Σ_n x[n]·e^{−j2πbn/N}`).
pub fn fft_in_place(buf: &mut [Complex64]) {
    plan_forward(buf.len()).process(buf);
}

/// In-place unnormalized inverse DFT (`x[n] = Σ_b X[b]·e^{+j2πbn/N}`; divide
/// by `N` yourself if you want the true inverse).
pub fn ifft_in_place(buf: &mut [Complex64]) {
    plan_inverse(buf.len()).process(buf);
}

/// Zero-mean circularly symmetric complex Gaussian sample with total
/// variance `variance` (split evenly between the two components).
pub fn awgn(rng: &mut impl Rng, variance: f64) -> Complex64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(s * re, s * im)
}

/// Modified Bessel function of the first kind, order zero, by power series.
pub fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= q / ((k * k) as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(u: f64) -> f64 {
    if u.abs() < 1e-9 {
        1.0
    } else {
        (PI * u).sin() / (PI * u)
    }
}

/// Frequency of the strongest complex tone in irregularly sampled data with
/// integer abscissas: the `ν ∈ [−0.5, 0.5)` (cycles per abscissa unit)
/// maximizing `|Σ_n values[n]·e^{−j2πν·x_n}|`, so that
/// `values[n] ≈ A·e^{+j2πν·x_n}` at the optimum.
///
/// Search is a zero-padded DFT over `pad_len` bins (abscissas folded modulo
/// `pad_len`, which is exact for integer bins) followed by Newton refinement
/// of the continuous objective. `pad_len` must exceed the abscissa span so
/// distinct abscissas stay distinct after folding.
pub fn dominant_tone_frequency(abscissas: &[i64], values: &[Complex64], pad_len: usize) -> f64 {
    assert_eq!(abscissas.len(), values.len());
    assert!(!values.is_empty());
    let span = abscissas.iter().max().unwrap() - abscissas.iter().min().unwrap();
    assert!((span as usize) < pad_len, "pad_len {pad_len} must exceed abscissa span {span}");

    let mut grid = vec![Complex64::new(0.0, 0.0); pad_len];
    for (&x, &v) in abscissas.iter().zip(values) {
        grid[x.rem_euclid(pad_len as i64) as usize] += v;
    }
    fft_in_place(&mut grid);
    let best_bin = grid
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.norm_sqr().total_cmp(&b.1.norm_sqr()))
        .map(|(b, _)| b)
        .unwrap();
    let mut nu = best_bin as f64 / pad_len as f64;
    if nu >= 0.5 {
        nu -= 1.0;
    }

    // Newton steps on J(ν) = |S(ν)|² with S_r(ν) = Σ (−j2πx)^r v e^{−j2πνx}.
    let coarse = nu;
    let max_step = 1.0 / pad_len as f64;
    for _ in 0..12 {
        let mut s0 = Complex64::new(0.0, 0.0);
        let mut s1 = Complex64::new(0.0, 0.0);
        let mut s2 = Complex64::new(0.0, 0.0);
        for (&x, &v) in abscissas.iter().zip(values) {
            let w = -2.0 * PI * x as f64;
            let e = v * Complex64::from_polar(1.0, w * nu);
            s0 += e;
            s1 += Complex64::new(0.0, w) * e;
            s2 += Complex64::new(-w * w, 0.0) * e;
        }
        let j1 = 2.0 * (s1 * s0.conj()).re;
        let j2 = 2.0 * (s2 * s0.conj()).re + 2.0 * s1.norm_sqr();
        if j2 >= 0.0 {
            break; // not locally concave; keep the grid answer
        }
        let step = (-j1 / j2).clamp(-max_step, max_step);
        nu += step;
        if (nu - coarse).abs() > 1.5 * max_step {
            nu = (nu - coarse).clamp(-1.5 * max_step, 1.5 * max_step) + coarse;
        }
        if step.abs() < 1e-13 {
            break;
        }
    }
    if nu >= 0.5 {
        nu -= 1.0;
    } else if nu < -0.5 {
        nu += 1.0;
    }
    nu
}

/// Polyphase windowed-sinc interpolator for fractional-sample evaluation of
/// a uniformly sampled complex signal. Samples outside the input are treated
/// as zero; at integer positions the interpolator is exact.
#[derive(Debug, Clone)]
pub struct SincInterpolator {
    half: usize,
    phases: usize,
    /// `(phases + 1)` rows of `2·half` taps; row `p` holds the kernel for
    /// fractional offset `p / phases`, normalized to unit DC gain.
    table: Vec<f64>,
}

impl SincInterpolator {
    /// The default design used throughout the crate: 64 taps, Kaiser β = 12,
    /// 1024 tabulated phases with linear interpolation between them.
    pub fn new() -> Self {
        Self::with_design(64, 12.0, 1024)
    }

    /// `taps` must be even and ≥ 4.
    pub fn with_design(taps: usize, beta: f64, phases: usize) -> Self {
        assert!(taps >= 4 && taps % 2 == 0);
        let half = taps / 2;
        let i0_beta = bessel_i0(beta);
        let mut table = vec![0.0; (phases + 1) * taps];
        for p in 0..=phases {
            let frac = p as f64 / phases as f64;
            let row = &mut table[p * taps..(p + 1) * taps];
            let mut sum = 0.0;
            for (jj, slot) in row.iter_mut().enumerate() {
                // Tap jj weights x[n + j] with j = jj − (half − 1); the
                // kernel argument is the distance from the evaluation point.
                let u = (jj as f64 - (half - 1) as f64) - frac;
                let v = u / half as f64;
                let w = if v.abs() <= 1.0 {
                    bessel_i0(beta * (1.0 - v * v).sqrt()) / i0_beta
                } else {
                    0.0
                };
                *slot = sinc(u) * w;
                sum += *slot;
            }
            for slot in row.iter_mut() {
                *slot /= sum;
            }
        }
        SincInterpolator { half, phases, table }
    }

    /// Kernel length in taps; the support spans half this many samples on
    /// each side of the evaluation point.
    pub fn taps(&self) -> usize {
        2 * self.half
    }

    /// Value of the signal at fractional position `t` (in samples).
    pub fn sample(&self, x: &[Complex64], t: f64) -> Complex64 {
        let taps = 2 * self.half;
        let n = t.floor();
        let frac = t - n;
        let n = n as i64;

        let pf = frac * self.phases as f64;
        let p0 = (pf.floor() as usize).min(self.phases - 1);
        let w = pf - p0 as f64;
        let row0 = &self.table[p0 * taps..(p0 + 1) * taps];
        let row1 = &self.table[(p0 + 1) * taps..(p0 + 2) * taps];

        let first = n - (self.half as i64 - 1);
        let mut acc = Complex64::new(0.0, 0.0);
        if first >= 0 && (first + taps as i64) <= x.len() as i64 {
            // Fast path: whole kernel support is inside the signal.
            let base = first as usize;
            for jj in 0..taps {
                let tap = row0[jj] + w * (row1[jj] - row0[jj]);
                acc += tap * x[base + jj];
            }
        } else {
            for jj in 0..taps {
                let idx = first + jj as i64;
                if idx >= 0 && (idx as usize) < x.len() {
                    let tap = row0[jj] + w * (row1[jj] - row0[jj]);
                    acc += tap * x[idx as usize];
                }
            }
        }
        acc
    }

    /// Evaluates the signal at `start + m·step` for `m = 0..count`.
    pub fn resample_affine(
        &self,
        x: &[Complex64],
        start: f64,
        step: f64,
        count: usize,
    ) -> Vec<Complex64> {
        (0..count).map(|m| self.sample(x, start + m as f64 * step)).collect()
    }
}

impl Default for SincInterpolator {
    fn default() -> Self {
        Self::new()
    }
}

/// A sample stream segmented and pre-transformed for repeated sliding
/// correlations against different replicas (overlap–save). Paying the
/// forward FFTs once matters when scanning a Doppler grid: every trial
/// replica reuses them.
#[derive(Debug, Clone)]
pub struct SegmentedStream {
    fft_len: usize,
    step: usize,
    max_replica: usize,
    stream_len: usize,
    seg_ffts: Vec<Vec<Complex64>>,
}

impl SegmentedStream {
    /// Prepares `stream` for correlation against replicas of length at most
    /// `max_replica_len` (≥ 1, ≤ `stream.len()`).
    pub fn new(stream: &[Complex64], max_replica_len: usize) -> Self {
        assert!(max_replica_len >= 1 && max_replica_len <= stream.len());
        let fft_len = (2 * max_replica_len).next_power_of_two();
        let step = fft_len - max_replica_len + 1;
        let mut seg_ffts = Vec::new();
        let mut p = 0;
        while p < stream.len() {
            let mut seg = vec![Complex64::new(0.0, 0.0); fft_len];
            let take = (stream.len() - p).min(fft_len);
            seg[..take].copy_from_slice(&stream[p..p + take]);
            fft_in_place(&mut seg);
            seg_ffts.push(seg);
            p += step;
        }
        SegmentedStream {
            fft_len,
            step,
            max_replica: max_replica_len,
            stream_len: stream.len(),
            seg_ffts,
        }
    }

    /// Sliding correlation `out[k] = Σ_n stream[k+n]·conj(replica[n])` for
    /// every fully overlapped lag `k ∈ 0..=len(stream) − len(replica)`.
    pub fn correlate(&self, replica: &[Complex64]) -> Vec<Complex64> {
        assert!(!replica.is_empty() && replica.len() <= self.max_replica);
        let out_len = self.stream_len - replica.len() + 1;

        let mut rf = vec![Complex64::new(0.0, 0.0); self.fft_len];
        rf[..replica.len()].copy_from_slice(replica);
        fft_in_place(&mut rf);

        let mut out = vec![Complex64::new(0.0, 0.0); out_len];
        let scale = 1.0 / self.fft_len as f64;
        let mut work = vec![Complex64::new(0.0, 0.0); self.fft_len];
        for (s, seg) in self.seg_ffts.iter().enumerate() {
            let base = s * self.step;
            if base >= out_len {
                break;
            }
            for (w, (a, b)) in work.iter_mut().zip(seg.iter().zip(&rf)) {
                *w = a * b.conj();
            }
            ifft_in_place(&mut work);
            let take = self.step.min(out_len - base);
            for (j, o) in out[base..base + take].iter_mut().enumerate() {
                *o = work[j] * scale;
            }
        }
        out
    }

    /// Number of fully overlapped lags available for a replica of length
    /// `replica_len`.
    pub fn lags(&self, replica_len: usize) -> usize {
        self.stream_len - replica_len + 1
    }
}

/// Local polynomial smoothing on an irregular abscissa: for each requested
/// output point, fits a least-squares polynomial of degree `order` to the
/// `window` nearest samples and evaluates it there. Exact for polynomial
/// data of degree ≤ `order`; output points may fall anywhere, including
/// gaps in or beyond the sampled axis.
pub fn local_poly_smooth(
    x: &[f64],
    y: &[Complex64],
    order: usize,
    window: usize,
    x_out: &[f64],
) -> Vec<Complex64> {
    assert_eq!(x.len(), y.len());
    assert!(window <= x.len() && window > order);
    debug_assert!(x.windows(2).all(|w| w[0] <= w[1]), "abscissa must be sorted");

    let n_basis = order + 1;
    let mut out = Vec::with_capacity(x_out.len());
    for &xo in x_out {
        // Contiguous window of nearest points (abscissa is sorted).
        let idx = x.partition_point(|&v| v < xo);
        let mut lo = idx.saturating_sub(window / 2).min(x.len() - window);
        loop {
            if lo > 0 && (xo - x[lo - 1]) < (x[lo + window - 1] - xo) {
                lo -= 1;
            } else if lo + window < x.len() && (x[lo + window] - xo) < (xo - x[lo]) {
                lo += 1;
            } else {
                break;
            }
        }

        let xs = &x[lo..lo + window];
        let ys = &y[lo..lo + window];
        let h = xs
            .iter()
            .map(|v| (v - xo).abs())
            .fold(0.0f64, f64::max)
            .max(1e-300);

        // Normal equations in the scaled basis u^p, u = (x − xo)/h; the
        // fitted value at xo is the constant coefficient.
        let mut ata = [[0.0f64; 8]; 8];
        let mut aty = [Complex64::new(0.0, 0.0); 8];
        for (&xv, &yv) in xs.iter().zip(ys) {
            let u = (xv - xo) / h;
            let mut pow = [0.0f64; 8];
            let mut up = 1.0;
            for p in pow.iter_mut().take(n_basis) {
                *p = up;
                up *= u;
            }
            for r in 0..n_basis {
                for c in 0..n_basis {
                    ata[r][c] += pow[r] * pow[c];
                }
                aty[r] += pow[r] * yv;
            }
        }
        out.push(solve_value_at_origin(&mut ata, &mut aty, n_basis));
    }
    out
}

/// Solves the (small, symmetric positive definite) normal equations by
/// Gaussian elimination with partial pivoting and returns the constant
/// coefficient.
fn solve_value_at_origin(
    ata: &mut [[f64; 8]; 8],
    aty: &mut [Complex64; 8],
    n: usize,
) -> Complex64 {
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&a, &b| ata[a][col].abs().total_cmp(&ata[b][col].abs()))
            .unwrap();
        if pivot != col {
            ata.swap(col, pivot);
            aty.swap(col, pivot);
        }
        let d = ata[col][col];
        for row in col + 1..n {
            let f = ata[row][col] / d;
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                ata[row][c] -= f * ata[col][c];
            }
            aty[row] -= f * aty[col];
        }
    }
    // Back substitution; only coefficient 0 is needed but all are cheap.
    let mut coeffs = [Complex64::new(0.0, 0.0); 8];
    for row in (0..n).rev() {
        let mut v = aty[row];
        for c in row + 1..n {
            v -= ata[row][c] * coeffs[c];
        }
        coeffs[row] = v / ata[row][row];
    }
    coeffs[0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn live_axis() -> Vec<i64> {
        // The signed subcarrier offsets of the live set: ±(3..=511) plus ±512
        // side asymmetry, with a 4-wide gap through zero.
        let mut v: Vec<i64> = (-512..=-3).collect();
        v.extend(2..=511);
        v
    }

    #[test]
    fn bessel_i0_reference_values() {
        assert!((bessel_i0(0.0) - 1.0).abs() < 1e-15);
        assert!((bessel_i0(1.0) - 1.2660658777520084).abs() < 1e-12);
        assert!((bessel_i0(2.0) - 2.2795853023360673).abs() < 1e-12);
    }

    #[test]
    fn fft_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let orig: Vec<Complex64> = (0..256).map(|_| awgn(&mut rng, 1.0)).collect();
        let mut buf = orig.clone();
        fft_in_place(&mut buf);
        ifft_in_place(&mut buf);
        for (a, b) in buf.iter().zip(&orig) {
            assert!((a / 256.0 - b).norm() < 1e-12);
        }
    }

    #[test]
    fn tone_frequency_recovered_on_gapped_axis() {
        let axis = live_axis();
        for &nu_true in &[0.017241, -0.231, 0.4995, 0.0] {
            let values: Vec<Complex64> = axis
                .iter()
                .map(|&x| Complex64::from_polar(1.3, 2.0 * PI * nu_true * x as f64 + 0.4))
                .collect();
            let nu = dominant_tone_frequency(&axis, &values, 4096);
            let err = (nu - nu_true).abs();
            assert!(err < 1e-9, "nu_true={nu_true} err={err:.3e}");
        }
    }

    #[test]
    fn tone_frequency_tolerates_noise_and_interferers() {
        let axis = live_axis();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let nu_true = -0.0831;
        let values: Vec<Complex64> = axis
            .iter()
            .map(|&x| {
                Complex64::from_polar(1.0, 2.0 * PI * nu_true * x as f64)
                    + Complex64::from_polar(0.2, 2.0 * PI * 0.3 * x as f64)
                    + awgn(&mut rng, 0.04)
            })
            .collect();
        let nu = dominant_tone_frequency(&axis, &values, 4096);
        assert!((nu - nu_true).abs() < 1e-4, "err={:.3e}", (nu - nu_true).abs());
    }

    #[test]
    fn interpolator_is_exact_at_integers() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<Complex64> = (0..200).map(|_| awgn(&mut rng, 1.0)).collect();
        let interp = SincInterpolator::new();
        for n in [40usize, 63, 100, 150] {
            let err = (interp.sample(&x, n as f64) - x[n]).norm();
            assert!(err < 1e-12, "n={n} err={err:.3e}");
        }
    }

    #[test]
    fn interpolator_tracks_band_limited_tones() {
        let interp = SincInterpolator::new();
        for &f in &[0.05, 0.11, 0.27] {
            let x: Vec<Complex64> = (0..400)
                .map(|n| Complex64::from_polar(1.0, 2.0 * PI * f * n as f64))
                .collect();
            for &t in &[57.3, 123.456, 200.5, 311.9999] {
                let want = Complex64::from_polar(1.0, 2.0 * PI * f * t);
                let err = (interp.sample(&x, t) - want).norm();
                assert!(err < 2e-5, "f={f} t={t} err={err:.3e}");
            }
        }
    }

    #[test]
    fn affine_resampling_with_unit_step_is_a_slice() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<Complex64> = (0..100).map(|_| awgn(&mut rng, 1.0)).collect();
        let interp = SincInterpolator::new();
        let y = interp.resample_affine(&x, 5.0, 1.0, 20);
        for (a, b) in y.iter().zip(&x[5..25]) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn segmented_correlation_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let stream: Vec<Complex64> = (0..4000).map(|_| awgn(&mut rng, 1.0)).collect();
        let replica: Vec<Complex64> = (0..301).map(|_| awgn(&mut rng, 1.0)).collect();

        let seg = SegmentedStream::new(&stream, 310);
        let fast = seg.correlate(&replica);
        assert_eq!(fast.len(), 4000 - 301 + 1);
        assert_eq!(fast.len(), seg.lags(replica.len()));

        for (k, &got) in fast.iter().enumerate().step_by(37) {
            let direct: Complex64 = replica
                .iter()
                .enumerate()
                .map(|(n, r)| stream[k + n] * r.conj())
                .sum();
            assert!((got - direct).norm() < 1e-9 * direct.norm().max(1.0), "lag {k}");
        }
    }

    #[test]
    fn local_poly_reproduces_cubics_exactly() {
        let axis: Vec<f64> = live_axis().iter().map(|&x| x as f64).collect();
        let poly = |x: f64| {
            Complex64::new(0.3 - 0.001 * x + 2e-6 * x * x, 1.0 + 4e-4 * x - 3e-9 * x * x * x)
        };
        let y: Vec<Complex64> = axis.iter().map(|&x| poly(x)).collect();
        let x_out = [0.0, -512.0, 511.0, -2.0, 100.5];
        let smoothed = local_poly_smooth(&axis, &y, 3, 41, &x_out);
        for (&xo, got) in x_out.iter().zip(&smoothed) {
            let err = (got - poly(xo)).norm();
            assert!(err < 1e-9, "x={xo} err={err:.3e}");
        }
    }

    #[test]
    fn local_poly_attenuates_noise() {
        let axis: Vec<f64> = live_axis().iter().map(|&x| x as f64).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sigma2 = 0.04;
        let y: Vec<Complex64> = axis.iter().map(|_| Complex64::new(1.0, 0.0) + awgn(&mut rng, sigma2)).collect();
        let smoothed = local_poly_smooth(&axis, &y, 3, 41, &axis);
        let resid_var: f64 = smoothed
            .iter()
            .map(|v| (v - Complex64::new(1.0, 0.0)).norm_sqr())
            .sum::<f64>()
            / smoothed.len() as f64;
        // Order-3 window-41 smoothing keeps roughly 4/41 of the noise power.
        assert!(resid_var < 0.35 * sigma2, "residual variance {resid_var:.4}");
    }

    #[test]
    fn awgn_variance_is_calibrated() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let var_target = 2.5;
        let n = 20000;
        let measured: f64 =
            (0..n).map(|_| awgn(&mut rng, var_target).norm_sqr()).sum::<f64>() / n as f64;
        assert!((measured / var_target - 1.0).abs() < 0.05, "measured {measured:.3}");
    }
}
