//! Frame detection and coarse synchronization.
//!
//! A Doppler-adjusted PSS+SSS replica is slid over the capture stream to
//! form a delay–Doppler ambiguity surface via overlap-save frequency-domain
//! correlation. The strongest cell is compared against a median-calibrated
//! constant-false-alarm threshold; on acceptance the frame is extracted and
//! coarsely compensated — resampled and derotated by the winning Doppler
//! hypothesis — so the demodulator starts from residual errors only.

use num_complex::Complex64;

use crate::dsp::{self, SincInterpolator};
use crate::error::{Error, Result};
use crate::grid::{FS, NSF, SYMBOL_LEN};
use crate::synth::{self, MAX_BETA};

/// Default family-wise false-alarm probability across the search grid.
pub const DEFAULT_PFA: f64 = 1e-6;

/// Default Doppler hypothesis spacing, as carrier Hertz. The two-symbol
/// coherent span keeps the inter-bin correlation loss well under 1 dB at
/// this spacing.
pub const DOPPLER_STEP_HZ: f64 = 2e3;

/// Default half-width of the centered Doppler search range.
pub const DEFAULT_DOPPLER_SPAN: f64 = 2.5e-6;

/// Cap on the number of cells sampled for the noise-floor median.
const FLOOR_SAMPLE_CAP: usize = 1 << 16;

/// Minimum number of cells the noise-floor median may be taken over.
const FLOOR_MIN_CELLS: usize = 16;

/// Doppler search grid: hypotheses `min, min+step, …` up to `max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DopplerGrid {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl DopplerGrid {
    /// Symmetric grid over ±[`DEFAULT_DOPPLER_SPAN`] with the default
    /// carrier-Hertz spacing converted to a β step at `fc`.
    pub fn centered(fc: f64) -> Self {
        DopplerGrid {
            min: -DEFAULT_DOPPLER_SPAN,
            max: DEFAULT_DOPPLER_SPAN,
            step: DOPPLER_STEP_HZ / fc,
        }
    }

    /// Degenerate grid holding one hypothesis.
    pub fn single(beta: f64) -> Self {
        DopplerGrid { min: beta, max: beta, step: 0.0 }
    }

    /// Materializes the hypotheses, validating the range.
    pub fn betas(&self) -> Result<Vec<f64>> {
        if !(self.min.is_finite() && self.max.is_finite() && self.min <= self.max) {
            return Err(Error::domain(format!(
                "doppler range [{}, {}] is not a valid interval",
                self.min, self.max
            )));
        }
        if self.min.abs() > MAX_BETA || self.max.abs() > MAX_BETA {
            return Err(Error::domain(format!(
                "doppler range [{}, {}] exceeds the ±{MAX_BETA} bound",
                self.min, self.max
            )));
        }
        if self.min == self.max {
            return Ok(vec![self.min]);
        }
        if !(self.step.is_finite() && self.step > 0.0) {
            return Err(Error::domain(format!("doppler step {} must be positive", self.step)));
        }
        let count = ((self.max - self.min) / self.step + 1e-9).floor() as usize + 1;
        Ok((0..count).map(|i| self.min + i as f64 * self.step).collect())
    }
}

/// Outcome of the delay–Doppler search over one stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcquisitionResult {
    /// Lag of the strongest cell, in samples into the stream.
    pub n_hat: usize,
    /// Winning Doppler hypothesis.
    pub beta_hat: f64,
    /// Correlation magnitude |R| at the winning cell.
    pub peak: f64,
    /// Detection threshold on |R| for the configured false-alarm rate.
    pub threshold: f64,
    /// Whether the peak cleared the threshold.
    pub accepted: bool,
    /// Pre-correlation SNR estimate at the peak, dB. Derived from the
    /// off-peak floor, which includes the frame's own data-symbol
    /// correlation power, so it understates the true SNR once that power
    /// rivals the noise (by ≈3 dB at 0 dB, more above).
    pub snr_pre_est: f64,
}

/// Search configuration for [`acquire`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcquireConfig {
    /// RF center frequency the Doppler hypotheses scale, Hz.
    pub fc: f64,
    pub doppler: DopplerGrid,
    /// Family-wise false-alarm probability across the searched grid.
    pub pfa: f64,
    /// First lag searched.
    pub lag_min: usize,
    /// One past the last lag searched; `None` scans as far as the stream
    /// supports a full replica.
    pub lag_max: Option<usize>,
}

impl AcquireConfig {
    pub fn new(fc: f64) -> Self {
        AcquireConfig {
            fc,
            doppler: DopplerGrid::centered(fc),
            pfa: DEFAULT_PFA,
            lag_min: 0,
            lag_max: None,
        }
    }
}

/// Replica sample count for Doppler hypothesis `beta`: the two-symbol
/// reference span divided by the compressed sample period, rounded up.
pub fn replica_len(beta: f64) -> usize {
    ((2 * SYMBOL_LEN) as f64 / (1.0 - beta)).ceil() as usize
}

/// Shaped time-domain concatenation of the PSS (time samples) and SSS
/// (frequency coefficients): the Doppler-free matched reference.
pub fn matched_reference(pss: &[Complex64], sss: &[Complex64]) -> Result<Vec<Complex64>> {
    if pss.len() != SYMBOL_LEN {
        return Err(Error::domain(format!(
            "PSS has {} samples, expected {SYMBOL_LEN}",
            pss.len()
        )));
    }
    let sss_time = synth::ofdm_symbol_time(sss)?;
    let mut out = Vec::with_capacity(2 * SYMBOL_LEN);
    for (n, &x) in pss.iter().enumerate() {
        out.push(x * synth::symbol_support(n));
    }
    for (n, &x) in sss_time.iter().enumerate() {
        out.push(x * synth::symbol_support(n));
    }
    Ok(out)
}

/// Doppler-adjusted local replica: the matched reference resampled by
/// `1 − beta` and rotated by `exp(−j2π·beta·fc·n·Ts)`, trimmed to
/// [`replica_len`] samples.
pub fn build_replica(
    pss: &[Complex64],
    sss: &[Complex64],
    beta: f64,
    fc: f64,
    interp: &SincInterpolator,
) -> Result<Vec<Complex64>> {
    if beta.abs() > MAX_BETA {
        return Err(Error::domain(format!(
            "doppler parameter {beta} exceeds the {MAX_BETA} bound"
        )));
    }
    let reference = matched_reference(pss, sss)?;
    let two_pi = 2.0 * std::f64::consts::PI;
    let ts = 1.0 / FS;
    let mut out = Vec::with_capacity(replica_len(beta));
    for n in 0..replica_len(beta) {
        let v = if beta == 0.0 {
            // Unity hypothesis: keep the reference bit-exact.
            reference.get(n).copied().unwrap_or_default()
        } else {
            interp.sample(&reference, n as f64 * (1.0 - beta))
        };
        let rot = Complex64::from_polar(1.0, -two_pi * beta * fc * n as f64 * ts);
        out.push(v * rot);
    }
    Ok(out)
}

/// Overlap-save cross-correlator feeding `R[k] = Σ_n stream[k+n]·replica*[n]`
/// to a sink over a contiguous lag range.
struct LagCorrelator {
    m: usize,
    fft_len: usize,
    step: usize,
    /// `conj(FFT(replica))`, with the inverse-FFT normalization folded in.
    replica_spec: Vec<Complex64>,
}

impl LagCorrelator {
    fn new(replica: &[Complex64]) -> Self {
        let m = replica.len();
        let fft_len = (2 * m).next_power_of_two();
        let step = fft_len - m + 1;
        let mut spec = vec![Complex64::new(0.0, 0.0); fft_len];
        spec[..m].copy_from_slice(replica);
        dsp::fft_in_place(&mut spec);
        let scale = 1.0 / fft_len as f64;
        for s in spec.iter_mut() {
            *s = s.conj() * scale;
        }
        LagCorrelator { m, fft_len, step, replica_spec: spec }
    }

    /// Lags the stream can support: correlation at lag k reads samples up to
    /// `k + m − 1`.
    fn max_lag_end(&self, stream_len: usize) -> usize {
        (stream_len + 1).saturating_sub(self.m)
    }

    fn run(
        &self,
        stream: &[Complex64],
        lags: std::ops::Range<usize>,
        mut sink: impl FnMut(usize, Complex64),
    ) {
        let mut buf = vec![Complex64::new(0.0, 0.0); self.fft_len];
        let mut s = lags.start;
        while s < lags.end {
            for (i, b) in buf.iter_mut().enumerate() {
                *b = stream.get(s + i).copied().unwrap_or(Complex64::new(0.0, 0.0));
            }
            dsp::fft_in_place(&mut buf);
            for (b, &r) in buf.iter_mut().zip(&self.replica_spec) {
                *b *= r;
            }
            dsp::ifft_in_place(&mut buf);
            let hi = lags.end.min(s + self.step);
            for k in s..hi {
                sink(k, buf[k - s]);
            }
            s = hi;
        }
    }
}

/// Delay–Doppler correlation surface; `values[b][k − lag_start]` holds
/// `R[k, betas[b]]`.
#[derive(Debug, Clone)]
pub struct AmbiguitySurface {
    pub lag_start: usize,
    pub betas: Vec<f64>,
    pub values: Vec<Vec<Complex64>>,
}

impl AmbiguitySurface {
    /// Cell of largest magnitude as `(lag, beta index)`.
    pub fn peak(&self) -> (usize, usize) {
        let mut best = (self.lag_start, 0, -1.0f64);
        for (b, row) in self.values.iter().enumerate() {
            for (i, v) in row.iter().enumerate() {
                let p = v.norm_sqr();
                if p > best.2 {
                    best = (self.lag_start + i, b, p);
                }
            }
        }
        (best.0, best.1)
    }
}

/// Correlates the stream against a replica per Doppler hypothesis and
/// materializes the full surface. Use [`acquire`] for large searches; this
/// keeps every cell.
pub fn ambiguity_surface(
    stream: &[Complex64],
    lags: std::ops::Range<usize>,
    betas: &[f64],
    pss: &[Complex64],
    sss: &[Complex64],
    fc: f64,
    interp: &SincInterpolator,
) -> Result<AmbiguitySurface> {
    if betas.is_empty() {
        return Err(Error::domain("doppler grid is empty".to_string()));
    }
    if lags.is_empty() {
        return Err(Error::domain("lag range is empty".to_string()));
    }
    let mut values = Vec::with_capacity(betas.len());
    for &beta in betas {
        let replica = build_replica(pss, sss, beta, fc, interp)?;
        let corr = LagCorrelator::new(&replica);
        if lags.end > corr.max_lag_end(stream.len()) {
            return Err(Error::domain(format!(
                "stream of {} samples cannot support lag {} with a {}-sample replica",
                stream.len(),
                lags.end - 1,
                replica.len()
            )));
        }
        let mut row = vec![Complex64::new(0.0, 0.0); lags.len()];
        corr.run(stream, lags.clone(), |k, v| row[k - lags.start] = v);
        values.push(row);
    }
    Ok(AmbiguitySurface { lag_start: lags.start, betas: betas.to_vec(), values })
}

/// Searches the stream over the configured delay–Doppler grid, applies the
/// median-calibrated constant-false-alarm threshold, and on acceptance
/// extracts and coarsely compensates the frame.
///
/// The threshold assumes exponentially distributed noise cell powers: the
/// noise mean is the off-peak |R|² median over ln 2, and the per-cell
/// false-alarm probability is the family-wise `pfa` split evenly over the
/// grid. The returned samples follow the residual-error model — remaining
/// impairments are `δβ = β − β̂` and a sub-sample timing offset. They are
/// `None` when the peak was rejected, and also when it was accepted but the
/// stream ends before the full frame does.
pub fn acquire(
    stream: &[Complex64],
    pss: &[Complex64],
    sss: &[Complex64],
    cfg: &AcquireConfig,
    interp: &SincInterpolator,
) -> Result<(AcquisitionResult, Option<Vec<Complex64>>)> {
    if !(cfg.pfa > 0.0 && cfg.pfa < 1.0) {
        return Err(Error::domain(format!(
            "false-alarm probability {} must lie in (0, 1)",
            cfg.pfa
        )));
    }
    let betas = cfg.doppler.betas()?;
    let replicas: Vec<Vec<Complex64>> = betas
        .iter()
        .map(|&b| build_replica(pss, sss, b, cfg.fc, interp))
        .collect::<Result<_>>()?;
    let m_max = replicas.iter().map(Vec::len).max().unwrap();
    let feasible_end = (stream.len() + 1).saturating_sub(m_max);
    let lag_end = cfg.lag_max.unwrap_or(feasible_end);
    if lag_end > feasible_end {
        return Err(Error::domain(format!(
            "stream of {} samples cannot support lag {} with a {m_max}-sample replica",
            stream.len(),
            lag_end - 1
        )));
    }
    if lag_end <= cfg.lag_min {
        return Err(Error::domain(format!(
            "lag range [{}, {lag_end}) is empty",
            cfg.lag_min
        )));
    }

    let n_lags = lag_end - cfg.lag_min;
    let n_cells = n_lags * betas.len();
    let stride = (n_cells / FLOOR_SAMPLE_CAP).max(1);
    let mut floor: Vec<(usize, f64)> = Vec::with_capacity(n_cells.min(FLOOR_SAMPLE_CAP) + 1);
    let mut cell = 0usize;
    let mut best = (cfg.lag_min, 0usize, -1.0f64);
    for (b, replica) in replicas.iter().enumerate() {
        let corr = LagCorrelator::new(replica);
        corr.run(stream, cfg.lag_min..lag_end, |k, v| {
            let p = v.norm_sqr();
            if p > best.2 {
                best = (k, b, p);
            }
            if cell % stride == 0 {
                floor.push((k, p));
            }
            cell += 1;
        });
    }
    let (n_hat, b_hat, peak_sq) = best;

    // Noise floor from off-peak cells; inside tight windows where every cell
    // neighbors the peak, fall back to the whole sample — the mainlobe is a
    // single cell and only biases the median upward (conservative).
    let guard = 2 * m_max;
    let mut cells: Vec<f64> = floor
        .iter()
        .filter(|(k, _)| k.abs_diff(n_hat) > guard)
        .map(|&(_, p)| p)
        .collect();
    if cells.len() < FLOOR_MIN_CELLS {
        cells = floor.iter().map(|&(_, p)| p).collect();
    }
    if cells.len() < FLOOR_MIN_CELLS {
        return Err(Error::domain(format!(
            "search grid of {n_cells} cells is too small to calibrate the detector"
        )));
    }
    cells.sort_by(f64::total_cmp);
    let noise_mean = cells[cells.len() / 2] / std::f64::consts::LN_2;
    let threshold = (noise_mean * (n_cells as f64 / cfg.pfa).ln()).sqrt();
    let peak = peak_sq.sqrt();
    let accepted = peak >= threshold;
    let m_hat = replicas[b_hat].len();
    let snr_pre_est = 10.0 * (peak_sq / noise_mean / m_hat as f64).log10();

    let result = AcquisitionResult {
        n_hat,
        beta_hat: betas[b_hat],
        peak,
        threshold,
        accepted,
        snr_pre_est,
    };
    let frame = if accepted {
        extract_compensated(stream, n_hat, betas[b_hat], cfg.fc, interp)
    } else {
        None
    };
    Ok((result, frame))
}

/// Extracts `Nsf·(Ns+Ng)` samples at `n_hat` and applies the coarse
/// compensation: derotation by `β̂·fc` and time resampling by `1/(1−β̂)`.
/// `None` when the stream ends before the frame does.
fn extract_compensated(
    stream: &[Complex64],
    n_hat: usize,
    beta_hat: f64,
    fc: f64,
    interp: &SincInterpolator,
) -> Option<Vec<Complex64>> {
    let len = NSF * SYMBOL_LEN;
    let span = ((len - 1) as f64 / (1.0 - beta_hat)).ceil() as usize + 1;
    if n_hat + span > stream.len() {
        return None;
    }
    if beta_hat == 0.0 {
        return Some(stream[n_hat..n_hat + len].to_vec());
    }
    let margin = interp.taps() / 2 + 2;
    let lo = n_hat as i64 - margin as i64;
    let hi = (n_hat + span + margin) as i64;
    let two_pi = 2.0 * std::f64::consts::PI;
    let ts = 1.0 / FS;
    let mut seg = Vec::with_capacity((hi - lo) as usize);
    for idx in lo..hi {
        let v = if idx >= 0 && (idx as usize) < stream.len() {
            stream[idx as usize]
        } else {
            Complex64::new(0.0, 0.0)
        };
        let e = (idx - n_hat as i64) as f64;
        seg.push(v * Complex64::from_polar(1.0, two_pi * beta_hat * fc * e * ts));
    }
    let mut out = Vec::with_capacity(len);
    for n in 0..len {
        let u = n as f64 / (1.0 - beta_hat);
        out.push(interp.sample(&seg, u + margin as f64));
    }
    Some(out)
}
