//! Frame demodulation: OFDM demultiplexing, channel estimation and
//! equalization, per-symbol constellation identification, maximum-likelihood
//! residual delay/phase estimation, residual clock-rate fitting, and hard
//! symbol decisions.
//!
//! The entry point for a whole frame is [`demod_frame`]; each stage is also
//! exposed on its own so captures can be inspected mid-pipeline.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::constellation::{Constellation, Modulation};
use crate::dsp;
use crate::error::{Error, Result};
use crate::grid::{self, NS, NSF, NUM_LIVE, SUBCARRIER_SPACING, SYMBOL_LEN, SYMBOL_PERIOD};
use crate::matrix::SymbolMatrix;
use crate::pilots::PilotCodebook;

/// Default magnitude floor below which an equalizer bin is masked out.
pub const DEFAULT_EQ_FLOOR: f64 = 0.05;
/// Smoothing window (subcarriers) for the channel magnitude/phase profile.
pub const CHANNEL_SMOOTH_WINDOW: usize = 41;
/// Polynomial order of the channel smoother.
pub const CHANNEL_SMOOTH_ORDER: usize = 3;
/// Clustering restarts per candidate cardinality; the lowest-distortion
/// fit over the restarts is the one judged.
pub const KMEANS_RESTARTS: usize = 8;
/// Accepted fits must bring the mean squared nearest-centroid distance below
/// the square of this fraction of the candidate constellation's minimum
/// distance...
pub const KMEANS_SHAPE_SCALE: f64 = 0.15;
/// ...or below this multiple of the reported per-point noise variance,
/// whichever is larger. The variance comes from the guard band, which
/// carrier leakage and interpolation artifacts do not reach, so live
/// columns run somewhat hotter than it; the slack absorbs that excess and
/// the lattice gate below carries the discrimination burden instead.
pub const KMEANS_NOISE_SCALE: f64 = 1.8;
/// Lattice-misfit acceptance gates for the cardinality-4, 16QAM, and 32QAM
/// hypotheses, as mean centroid-to-lattice distance. Each gate sits between
/// the worst misfit a true fit reaches at the 13.8 dB design point and the
/// smallest misfit a column mixing alphabets produces; denser alphabets
/// need wider gates because cluster overlap biases their centroids harder.
pub const KMEANS_LATTICE_GATES: [f64; 3] = [0.08, 0.075, 0.125];
/// Newton convergence threshold for the per-symbol estimator: the undamped
/// proposed step, measured as phase-equivalent radians across the band.
pub const NEWTON_TOL: f64 = 1e-9;
/// Iteration cap for the damped Newton refinements.
pub const NEWTON_MAX_ITERS: usize = 50;
/// Residual-rate magnitudes past this bound indicate a broken fit upstream
/// (coarse sync should leave parts-per-million residuals at most).
pub const MAX_RESIDUAL_RATE: f64 = 1e-5;
/// Retained-symbol index gaps wider than this split the phase unwrap into
/// segments that are rejoined by integer-cycle search.
pub const UNWRAP_MAX_GAP: usize = 20;

/// Phase advance across the half-band per second of delay; used to express
/// delay steps in radians so one tolerance covers both parameters.
const TAU_PHASE_SCALE: f64 = 2.0 * PI * SUBCARRIER_SPACING * 512.0;
/// Relative noise floor applied to the gutter estimate so noiseless input
/// stays numerically benign.
const NOISE_FLOOR_REL: f64 = 1e-12;

/// `e^{−j2π·d·F·τ}`: the per-subcarrier rotation produced by a start-time
/// offset of `tau` seconds. Multiply by `delay_phasor(d, -tau)` to remove it.
pub fn delay_phasor(d: i32, tau: f64) -> Complex64 {
    Complex64::from_polar(1.0, -2.0 * PI * d as f64 * SUBCARRIER_SPACING * tau)
}

fn wrap_pi(x: f64) -> f64 {
    let mut r = x % (2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    } else if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

// ---------------------------------------------------------------------------
// OFDM demultiplexing
// ---------------------------------------------------------------------------

/// Splits one frame of time samples into per-symbol subcarrier coefficients.
///
/// Input must be exactly `NSF·SYMBOL_LEN` samples starting at the frame
/// boundary. The FFT window begins halfway into each cyclic prefix — inside
/// the flat region of the transmit support for small timing error — and the
/// resulting known rotation is undone per bin, so a clean loopback
/// reproduces the coefficients exactly. Row 0 of the output is left zero:
/// the first slot carries the non-OFDM synchronization waveform.
pub fn ofdm_demod(samples: &[Complex64]) -> Result<SymbolMatrix> {
    if samples.len() != NSF * SYMBOL_LEN {
        return Err(Error::domain(format!(
            "frame must contain exactly {} samples, got {}",
            NSF * SYMBOL_LEN,
            samples.len()
        )));
    }
    let offset = (SYMBOL_LEN - NS) / 2; // window starts mid-prefix
    let scale = 1.0 / (NS as f64).sqrt();
    let correction: Vec<Complex64> = (0..NS)
        .map(|k| Complex64::from_polar(scale, 2.0 * PI * (offset * k) as f64 / NS as f64))
        .collect();

    let mut out = SymbolMatrix::zeros(NSF);
    let mut buf = vec![Complex64::new(0.0, 0.0); NS];
    for i in 1..NSF {
        let start = i * SYMBOL_LEN + offset;
        buf.copy_from_slice(&samples[start..start + NS]);
        dsp::fft_in_place(&mut buf);
        for (k, (dst, &b)) in out.row_mut(i).iter_mut().zip(&buf).enumerate() {
            *dst = b * correction[k];
        }
    }
    Ok(out)
}

/// Mean per-bin power in the gutter subcarriers over all demodulated symbols.
///
/// The gutter carries no signal, so this is an unbiased estimate of the
/// per-bin (equivalently per-sample) noise variance.
pub fn gutter_noise_power(bar_y: &SymbolMatrix) -> f64 {
    let mut acc = 0.0;
    let mut n = 0usize;
    for i in 1..bar_y.nsym() {
        for &k in &grid::GUTTER {
            acc += bar_y[(i, k)].norm_sqr();
            n += 1;
        }
    }
    if n == 0 { 0.0 } else { acc / n as f64 }
}

// ---------------------------------------------------------------------------
// Channel estimation and equalization
// ---------------------------------------------------------------------------

/// Per-frame equalizer: smoothed channel response (unit at band center),
/// complex frame gain, and the start-time offset of the reference symbol.
#[derive(Debug, Clone)]
pub struct EqualizerState {
    /// Normalized channel response over the live subcarriers, indexed by
    /// `live_row(k)`; exactly 1 at band center by construction.
    pub h_hat: Vec<Complex64>,
    /// Complex frame gain `√ĝ·e^{jθ̂}` absorbing the reference symbol's
    /// common phase.
    pub z_hat: Complex64,
    /// Start-time offset of the reference symbol, seconds.
    pub tau_m1_hat: f64,
}

impl EqualizerState {
    /// Channel response at live subcarrier `k`.
    pub fn h_at(&self, k: usize) -> Complex64 {
        self.h_hat[grid::live_row(k)]
    }
}

/// Accumulates per-frame channel observations from the known reference
/// symbol so the smoothed response can be refined across frames.
#[derive(Debug, Clone)]
pub struct ChannelEstimator {
    x_ref: Vec<Complex64>,
    acc: Vec<Complex64>,
    frames: usize,
    smooth_cache: Option<(Vec<Complex64>, Complex64)>,
}

/// Sorted live subcarriers by baseband offset, as `(d, k)` pairs.
fn live_by_offset() -> Vec<(i32, usize)> {
    let mut v: Vec<(i32, usize)> = grid::LIVE.map(|k| (grid::offset_unchecked(k), k)).collect();
    v.sort_unstable();
    v
}

/// Start-time offset of a known-content symbol from the dominant rotation
/// rate of `Ȳ_k·X_k^*` across the band.
fn estimate_row_delay(row: &[Complex64], x_ref: &[Complex64]) -> Result<f64> {
    let mut energy = 0.0;
    let mut ds = Vec::with_capacity(NUM_LIVE);
    let mut ps = Vec::with_capacity(NUM_LIVE);
    for k in grid::LIVE {
        energy += row[k].norm_sqr();
        ds.push(grid::offset_unchecked(k) as i64);
        ps.push(row[k] * x_ref[k].conj());
    }
    if energy / NUM_LIVE as f64 <= 1e-12 {
        return Err(Error::numeric(
            "reference symbol energy is below the detection floor; no frame present",
        ));
    }
    let nu = dsp::dominant_tone_frequency(&ds, &ps, 4096);
    Ok(-nu / SUBCARRIER_SPACING)
}

impl ChannelEstimator {
    /// Creates an estimator around the known reference-symbol coefficients
    /// (full `NS`-entry row; every live subcarrier loaded, gutter empty).
    pub fn new(x_ref: &[Complex64]) -> Result<Self> {
        if x_ref.len() != NS {
            return Err(Error::domain(format!(
                "reference symbol must have {NS} coefficients, got {}",
                x_ref.len()
            )));
        }
        for k in grid::LIVE {
            let a = x_ref[k].norm();
            if !(0.1..=10.0).contains(&a) {
                return Err(Error::domain(format!(
                    "reference symbol must load every live subcarrier; |X[{k}]| = {a:.3e}"
                )));
            }
        }
        for &k in &grid::GUTTER {
            if x_ref[k].norm() > 1e-9 {
                return Err(Error::domain(format!(
                    "reference symbol must leave gutter subcarrier {k} empty"
                )));
            }
        }
        Ok(Self {
            x_ref: x_ref.to_vec(),
            acc: vec![Complex64::new(0.0, 0.0); NUM_LIVE],
            frames: 0,
            smooth_cache: None,
        })
    }

    /// Number of frames folded into the running estimate.
    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Folds one demodulated reference row into the running per-subcarrier
    /// response, after removing that frame's start-time rotation. Returns
    /// the estimated start-time offset.
    pub fn add_frame(&mut self, bar_y_ref: &[Complex64]) -> Result<f64> {
        if bar_y_ref.len() != NS {
            return Err(Error::domain(format!(
                "reference row must have {NS} coefficients, got {}",
                bar_y_ref.len()
            )));
        }
        let tau = estimate_row_delay(bar_y_ref, &self.x_ref)?;
        for k in grid::LIVE {
            let d = grid::offset_unchecked(k);
            let ratio = bar_y_ref[k] / self.x_ref[k];
            self.acc[grid::live_row(k)] += ratio * delay_phasor(d, -tau);
        }
        self.frames += 1;
        self.smooth_cache = None;
        Ok(tau)
    }

    /// Smoothed response over the live subcarriers plus its band-center
    /// value, from the accumulated per-frame ratios.
    fn smoothed(&mut self) -> (&[Complex64], Complex64) {
        if self.smooth_cache.is_none() {
            let order = live_by_offset();
            let xs: Vec<f64> = order.iter().map(|&(d, _)| d as f64).collect();
            let ys: Vec<Complex64> = order
                .iter()
                .map(|&(_, k)| self.acc[grid::live_row(k)] / self.frames as f64)
                .collect();
            let mut x_out = xs.clone();
            x_out.push(0.0); // band center, between the gutter halves
            let smoothed =
                dsp::local_poly_smooth(&xs, &ys, CHANNEL_SMOOTH_ORDER, CHANNEL_SMOOTH_WINDOW, &x_out);
            let center = smoothed[smoothed.len() - 1];
            let mut by_row = vec![Complex64::new(0.0, 0.0); NUM_LIVE];
            for (&(_, k), &v) in order.iter().zip(&smoothed) {
                by_row[grid::live_row(k)] = v;
            }
            self.smooth_cache = Some((by_row, center));
        }
        let (h, c) = self.smooth_cache.as_ref().unwrap();
        (h, *c)
    }

    /// Builds the equalizer for one frame: the refined channel shape shared
    /// across frames, plus this frame's own gain, phase, and start time.
    pub fn equalizer_for(&mut self, bar_y_ref: &[Complex64]) -> Result<EqualizerState> {
        if self.frames == 0 {
            return Err(Error::domain(
                "no frames accumulated; call add_frame before equalizer_for",
            ));
        }
        let tau = estimate_row_delay(bar_y_ref, &self.x_ref)?;
        let x_ref = self.x_ref.clone();
        let (h_tilde, center) = self.smoothed();
        if center.norm() < 1e-6 {
            return Err(Error::numeric(
                "channel response vanished at band center; cannot normalize",
            ));
        }
        let h_hat: Vec<Complex64> = h_tilde.iter().map(|&h| h / center).collect();

        let mut g_acc = 0.0;
        let mut rot = Complex64::new(0.0, 0.0);
        for k in grid::LIVE {
            let d = grid::offset_unchecked(k);
            let h = h_hat[grid::live_row(k)];
            g_acc += (bar_y_ref[k] / h).norm_sqr();
            rot += (bar_y_ref[k] * delay_phasor(d, -tau) / h) * x_ref[k].conj();
        }
        let g_hat = g_acc / NUM_LIVE as f64 / mean_power(&x_ref);
        let z_hat = Complex64::from_polar(g_hat.sqrt(), rot.arg());
        Ok(EqualizerState { h_hat, z_hat, tau_m1_hat: tau })
    }
}

fn mean_power(x_ref: &[Complex64]) -> f64 {
    let mut acc = 0.0;
    for k in grid::LIVE {
        acc += x_ref[k].norm_sqr();
    }
    acc / NUM_LIVE as f64
}

/// Single-frame channel estimate from one demodulated reference row.
pub fn estimate_channel(bar_y_ref: &[Complex64], x_ref: &[Complex64]) -> Result<EqualizerState> {
    let mut est = ChannelEstimator::new(x_ref)?;
    est.add_frame(bar_y_ref)?;
    est.equalizer_for(bar_y_ref)
}

/// Equalized symbol matrix plus the list of masked (unusable) subcarriers.
#[derive(Debug, Clone)]
pub struct Equalized {
    /// `Ȳ/(Ẑ·Ĥ_k)` per live subcarrier; masked bins and the gutter are zero.
    pub y: SymbolMatrix,
    /// Live subcarriers whose channel magnitude fell below the floor,
    /// ascending.
    pub masked: Vec<usize>,
}

impl Equalized {
    /// Whether subcarrier `k` was masked out.
    pub fn is_masked(&self, k: usize) -> bool {
        self.masked.binary_search(&k).is_ok()
    }
}

/// Divides out the frame gain and channel shape, masking subcarriers where
/// `|Ĥ_k|` falls below `floor` (noise there would be amplified past use).
pub fn equalize(bar_y: &SymbolMatrix, state: &EqualizerState, floor: f64) -> Result<Equalized> {
    if !(0.0..1.0).contains(&floor) {
        return Err(Error::domain(format!("equalizer floor must be in [0, 1), got {floor}")));
    }
    if state.z_hat.norm() <= 0.0 {
        return Err(Error::domain("frame gain estimate is zero; cannot equalize"));
    }
    let mut masked = Vec::new();
    let mut inv = vec![Complex64::new(0.0, 0.0); NS];
    for k in grid::LIVE {
        let h = state.h_at(k);
        if h.norm() < floor {
            masked.push(k);
        } else {
            inv[k] = 1.0 / (state.z_hat * h);
        }
    }
    let mut y = SymbolMatrix::zeros(bar_y.nsym());
    for i in 1..bar_y.nsym() {
        for k in grid::LIVE {
            y[(i, k)] = bar_y[(i, k)] * inv[k];
        }
    }
    Ok(Equalized { y, masked })
}

// ---------------------------------------------------------------------------
// Constellation identification
// ---------------------------------------------------------------------------

/// Identified symbol content: a cardinality-4 alphabet (rotation still
/// ambiguous), one of the denser alphabets, or an unusable composite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SymbolClass {
    /// Four clusters; QPSK vs its 45°-rotated twin is resolved later.
    Card4,
    Qam16,
    Qam32,
    /// No single alphabet fits (e.g. a mid-symbol modulation change);
    /// the symbol is dropped from estimation.
    Composite,
}

impl SymbolClass {
    /// Cluster count of the identified alphabet, if usable.
    pub fn cardinality(self) -> Option<usize> {
        match self {
            SymbolClass::Card4 => Some(4),
            SymbolClass::Qam16 => Some(16),
            SymbolClass::Qam32 => Some(32),
            SymbolClass::Composite => None,
        }
    }
}

impl std::fmt::Display for SymbolClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            SymbolClass::Card4 => "card4",
            SymbolClass::Qam16 => "16qam",
            SymbolClass::Qam32 => "32qam",
            SymbolClass::Composite => "composite",
        };
        f.write_str(name)
    }
}

/// One k-means fit: centroids and the mean squared point-to-nearest-centroid
/// distance. Squared units make the distortion directly comparable with the
/// per-point noise variance, and they are what Lloyd iteration minimizes.
fn kmeans_fit(points: &[Complex64], k: usize, rng: &mut ChaCha8Rng) -> (Vec<Complex64>, f64) {
    let n = points.len();
    // Distance-weighted seeding.
    let mut centroids: Vec<Complex64> = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..n)]);
    let mut d2: Vec<f64> = points.iter().map(|p| (p - centroids[0]).norm_sqr()).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            points[rng.gen_range(0..n)]
        } else {
            let mut target = rng.gen_range(0.0..total);
            let mut idx = n - 1;
            for (j, &w) in d2.iter().enumerate() {
                if target < w {
                    idx = j;
                    break;
                }
                target -= w;
            }
            points[idx]
        };
        centroids.push(next);
        for (j, p) in points.iter().enumerate() {
            d2[j] = d2[j].min((p - next).norm_sqr());
        }
    }

    let mut assign = vec![0usize; n];
    for _ in 0..60 {
        let mut changed = false;
        for (j, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, ctr) in centroids.iter().enumerate() {
                let d = (p - ctr).norm_sqr();
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assign[j] != best {
                assign[j] = best;
                changed = true;
            }
        }
        let mut sums = vec![Complex64::new(0.0, 0.0); k];
        let mut counts = vec![0usize; k];
        for (j, p) in points.iter().enumerate() {
            sums[assign[j]] += p;
            counts[assign[j]] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c] / counts[c] as f64;
            } else {
                // Revive an empty cluster at the worst-covered point.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = (points[a] - centroids[assign[a]]).norm_sqr();
                        let db = (points[b] - centroids[assign[b]]).norm_sqr();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                centroids[c] = points[far];
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let mut dist = 0.0;
    for (j, p) in points.iter().enumerate() {
        dist += (p - centroids[assign[j]]).norm_sqr();
    }
    (centroids, dist / n as f64)
}

/// Mean distance from the fitted centroids to the nearest points of the
/// reference alphabet, at the alphabet's best-fit rotation.
///
/// The rotation starts from fourth moments, which collapse the alphabet's
/// 90° symmetry; multiplying by the conjugate of the alphabet's own fourth
/// moment cancels its intrinsic phase, so an unrotated column scores α ≈ 0
/// whatever the alphabet. The moment estimate blurs when the moment is
/// weak (32QAM) or the centroids scatter, so it is polished by alternating
/// nearest-point assignment with the closed-form rotation for that
/// assignment.
fn lattice_misfit(centroids: &[Complex64], alphabet: &[Complex64]) -> f64 {
    let m4: Complex64 =
        alphabet.iter().map(|a| a * a * a * a).sum::<Complex64>() / alphabet.len() as f64;
    let c4: Complex64 = centroids.iter().map(|c| c * c * c * c).sum();
    let mut alpha = 0.25 * (c4 * m4.conj()).arg();
    for _ in 0..3 {
        let rot = Complex64::from_polar(1.0, alpha);
        let mut corr = Complex64::new(0.0, 0.0);
        for c in centroids {
            let mut nearest = f64::INFINITY;
            let mut pick = Complex64::new(0.0, 0.0);
            for a in alphabet {
                let d = (c - rot * a).norm_sqr();
                if d < nearest {
                    nearest = d;
                    pick = *a;
                }
            }
            corr += c * pick.conj();
        }
        if corr.norm_sqr() > 0.0 {
            alpha = corr.arg();
        }
    }
    let rot = Complex64::from_polar(1.0, alpha);
    let mut mean = 0.0;
    for c in centroids {
        let mut nearest = f64::INFINITY;
        for a in alphabet {
            nearest = nearest.min((c - rot * a).norm());
        }
        mean += nearest;
    }
    mean / centroids.len() as f64
}

/// Determines which symbol alphabet a derotated, delay-compensated column of
/// subcarrier points was drawn from.
///
/// Candidate alphabets are tried smallest first; one is accepted when the
/// lowest-distortion k-means fit over the restarts both reaches the
/// distortion threshold — squared units, floored just above the reported
/// noise power — and puts its centroids on the alphabet's point lattice at
/// the lattice's best-fit rotation. The lattice gate is what rejects
/// columns that mix alphabets: their accidental clusters can pack tightly
/// enough to pass on distortion alone, but they sit in the wrong places.
/// A column that fits no candidate reports a composite. `noise_power` is
/// the per-point noise variance; restarts are seeded from `seed` so
/// identical inputs identify identically.
pub fn identify_constellation(
    points: &[Complex64],
    noise_power: f64,
    seed: u64,
) -> Result<SymbolClass> {
    if points.len() < 100 {
        return Err(Error::domain(format!(
            "constellation identification needs at least 100 subcarriers, got {}",
            points.len()
        )));
    }
    let noise_floor = KMEANS_NOISE_SCALE * noise_power.max(0.0);
    let ladder: [(usize, Modulation, SymbolClass, f64); 3] = [
        (4, Modulation::Qpsk, SymbolClass::Card4, KMEANS_LATTICE_GATES[0]),
        (16, Modulation::Qam16, SymbolClass::Qam16, KMEANS_LATTICE_GATES[1]),
        (32, Modulation::Qam32, SymbolClass::Qam32, KMEANS_LATTICE_GATES[2]),
    ];
    for (k, hyp, class, gate) in ladder {
        let reference = Constellation::new(hyp);
        let threshold =
            (KMEANS_SHAPE_SCALE * reference.min_distance()).powi(2).max(noise_floor);
        let mut best = f64::INFINITY;
        let mut best_centroids: Vec<Complex64> = Vec::new();
        for restart in 0..KMEANS_RESTARTS {
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed ^ ((k as u64) << 48) ^ ((restart as u64) << 40),
            );
            let (centroids, dist) = kmeans_fit(points, k, &mut rng);
            if dist < best {
                best = dist;
                best_centroids = centroids;
            }
            // Restarts escape bad local minima; a best fit still this far
            // out is not a local-minimum problem, so stop burning restarts.
            if restart >= 2 && best > 2.5 * threshold {
                break;
            }
        }
        if best < threshold && lattice_misfit(&best_centroids, reference.points()) < gate {
            return Ok(class);
        }
    }
    Ok(SymbolClass::Composite)
}

// ---------------------------------------------------------------------------
// Per-symbol maximum-likelihood delay/phase estimation
// ---------------------------------------------------------------------------

/// One subcarrier observation for the per-symbol estimator.
#[derive(Debug, Clone, Copy)]
pub struct MlObs {
    /// Signed baseband subcarrier offset.
    pub d: i32,
    /// Equalized observation.
    pub y: Complex64,
    /// Transmitted point when known a priori (pilots, reference symbol);
    /// `None` marginalizes over the symbol alphabet.
    pub known: Option<Complex64>,
    /// Inverse noise variance for this subcarrier.
    pub inv_noise: f64,
}

/// Per-symbol estimate of start-time offset (seconds) and common phase
/// (radians). `converged` is false when the refinement stalled; such
/// symbols should be dropped from the frame fit.
#[derive(Debug, Clone, Copy)]
pub struct MlEstimate {
    pub tau: f64,
    pub phi: f64,
    pub converged: bool,
    /// Marginalized log-likelihood at the estimate (additive constants
    /// dropped); comparable across hypotheses for the same observations.
    pub log_likelihood: f64,
}

/// Marginalized likelihood, gradient, and Hessian over (τ, φ) in one pass.
///
/// Each subcarrier contributes `log Σ_c exp[(2Re(u·c*) − |c|²)/σ²]` with
/// `u = y·e^{−j(φ − 2πdFτ)}`; known-symbol subcarriers use the single known
/// point. Derivatives come from the posterior symbol moments: with
/// `c̄ = E[c|u]`, `∂ℓ/∂ψ = (2/σ²)·Im(c̄*u)` and the curvature adds the
/// posterior covariance terms, which vanish as the posterior hardens.
fn ml_pass(
    obs: &[MlObs],
    alphabet: &[Complex64],
    tau: f64,
    phi: f64,
) -> (f64, [f64; 2], [[f64; 2]; 2]) {
    let mut obj = 0.0;
    let mut g = [0.0f64; 2];
    let mut h = [[0.0f64; 2]; 2];
    for o in obs {
        let s = -2.0 * PI * o.d as f64 * SUBCARRIER_SPACING; // ∂ψ/∂τ
        let psi = phi + s * tau;
        let u = o.y * Complex64::from_polar(1.0, -psi);
        let single;
        let cands: &[Complex64] = match o.known {
            Some(c) => {
                single = [c];
                &single
            }
            None => alphabet,
        };

        let mut amax = f64::NEG_INFINITY;
        for c in cands {
            let a = (2.0 * (u.re * c.re + u.im * c.im) - c.norm_sqr()) * o.inv_noise;
            if a > amax {
                amax = a;
            }
        }
        let mut w_sum = 0.0;
        let mut c_mean = Complex64::new(0.0, 0.0);
        let mut c2_mean = 0.0;
        let mut csq_mean = Complex64::new(0.0, 0.0);
        for c in cands {
            let a = (2.0 * (u.re * c.re + u.im * c.im) - c.norm_sqr()) * o.inv_noise;
            let w = (a - amax).exp();
            w_sum += w;
            c_mean += c * w;
            c2_mean += c.norm_sqr() * w;
            csq_mean += c * c * w;
        }
        c_mean /= w_sum;
        c2_mean /= w_sum;
        csq_mean /= w_sum;
        obj += amax + (w_sum / cands.len() as f64).ln();

        let cu = c_mean.conj() * u;
        let dl = 2.0 * o.inv_noise * cu.im;
        let post_var = (c2_mean - c_mean.norm_sqr()) * o.inv_noise;
        let post_pseudo = (csq_mean - c_mean * c_mean) * o.inv_noise;
        let d2l = 2.0
            * o.inv_noise
            * (post_var * u.norm_sqr() - (post_pseudo.conj() * u * u).re - cu.re);

        g[0] += s * dl;
        g[1] += dl;
        h[0][0] += s * s * d2l;
        h[0][1] += s * d2l;
        h[1][1] += d2l;
    }
    h[1][0] = h[0][1];
    (obj, g, h)
}

/// Joint maximum-likelihood fit of one symbol's start-time offset and common
/// phase, marginalizing unknown subcarriers over `alphabet` and pinning
/// known ones (pilots anchor the absolute phase). Refined by damped Newton
/// from the supplied initial values; the initializer must land inside the
/// correct mode — the frame pipeline seeds it from the previous symbol's
/// delay and the pilot phase.
pub fn per_symbol_ml(
    obs: &[MlObs],
    alphabet: &[Complex64],
    tau_init: f64,
    phi_init: f64,
) -> Result<MlEstimate> {
    if obs.is_empty() {
        return Err(Error::domain("per-symbol estimation needs at least one subcarrier"));
    }
    if alphabet.is_empty() && obs.iter().any(|o| o.known.is_none()) {
        return Err(Error::domain("an alphabet is required when any subcarrier is unknown"));
    }
    if obs.iter().any(|o| !(o.inv_noise > 0.0) || !o.inv_noise.is_finite()) {
        return Err(Error::domain("inverse noise weights must be positive and finite"));
    }

    let mut tau = tau_init;
    let mut phi = phi_init;
    let (mut obj, mut g, mut h) = ml_pass(obs, alphabet, tau, phi);
    let mut converged = false;
    for _ in 0..NEWTON_MAX_ITERS {
        let det = h[0][0] * h[1][1] - h[0][1] * h[0][1];
        let (dt, dp) = if h[0][0] < 0.0 && det > 0.0 {
            // Newton step toward the maximum.
            (
                -(h[1][1] * g[0] - h[0][1] * g[1]) / det,
                -(-h[0][1] * g[0] + h[0][0] * g[1]) / det,
            )
        } else {
            // Not locally concave: preconditioned ascent, clamped to the
            // main lobe so a wild curvature estimate cannot eject the fit.
            let dt = (g[0] / h[0][0].abs().max(f64::MIN_POSITIVE))
                .clamp(-0.25 / (SUBCARRIER_SPACING * 512.0), 0.25 / (SUBCARRIER_SPACING * 512.0));
            let dp = (g[1] / h[1][1].abs().max(f64::MIN_POSITIVE)).clamp(-0.5, 0.5);
            (dt, dp)
        };

        let mut accepted = None;
        let mut lam = 1.0;
        for _ in 0..40 {
            let (o2, g2, h2) = ml_pass(obs, alphabet, tau + lam * dt, phi + lam * dp);
            if o2.is_finite() && o2 >= obj - 1e-9 * obj.abs().max(1.0) {
                accepted = Some((o2, g2, h2, lam));
                break;
            }
            lam *= 0.5;
        }
        let Some((o2, g2, h2, lam)) = accepted else {
            break;
        };
        tau += lam * dt;
        phi += lam * dp;
        (obj, g, h) = (o2, g2, h2);
        // Convergence is judged on the undamped proposed step: a collapsed
        // backtracking scale must not mask a stall far from the optimum.
        if dp.abs() + TAU_PHASE_SCALE * dt.abs() < NEWTON_TOL {
            converged = true;
            break;
        }
    }
    Ok(MlEstimate { tau, phi, converged, log_likelihood: obj })
}

// ---------------------------------------------------------------------------
// Residual clock fit across the frame
// ---------------------------------------------------------------------------

/// One retained symbol's estimates entering the frame fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerSymbolEstimate {
    pub i: usize,
    pub tau: f64,
    pub phi: f64,
}

/// Frame-level residual synchronization: intercepts at slot 0 plus the
/// residual carrier and sample clock rates, with the per-symbol estimates
/// the fit was built from.
#[derive(Debug, Clone)]
pub struct SyncEstimate {
    /// Common phase extrapolated to slot 0, radians in (−π, π].
    pub phi_m0: f64,
    /// Residual carrier-frequency rate (dimensionless offset).
    pub dbeta_c: f64,
    /// Start-time offset extrapolated to slot 0, seconds.
    pub tau_m0: f64,
    /// Residual sample-rate offset (dimensionless).
    pub dbeta_s: f64,
    /// Carrier frequency the phase slope was referred to, Hz.
    pub fc: f64,
    /// Retained per-symbol estimates, ascending slot index.
    pub per_symbol: Vec<PerSymbolEstimate>,
}

impl SyncEstimate {
    /// Reconstructed start-time offset at slot `i` from the fitted line.
    pub fn tau_at(&self, i: usize) -> f64 {
        self.tau_m0 + i as f64 * SYMBOL_PERIOD * self.dbeta_s
    }

    /// Reconstructed common phase at slot `i` from the fitted line.
    pub fn phi_at(&self, i: usize) -> f64 {
        self.phi_m0 - 2.0 * PI * i as f64 * SYMBOL_PERIOD * self.fc * self.dbeta_c
    }

    /// The same estimate with both lines negated; compensating with it
    /// undoes a prior compensation exactly.
    pub fn negated(&self) -> SyncEstimate {
        SyncEstimate {
            phi_m0: -self.phi_m0,
            dbeta_c: -self.dbeta_c,
            tau_m0: -self.tau_m0,
            dbeta_s: -self.dbeta_s,
            fc: self.fc,
            per_symbol: self.per_symbol.clone(),
        }
    }
}

fn line_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let sx: f64 = xs.iter().sum();
    let sy: f64 = ys.iter().sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let intercept = (sy - slope * sx) / n;
    (intercept, slope)
}

/// Unwraps the per-symbol phases. Runs separated by index gaps wider than
/// [`UNWRAP_MAX_GAP`] are unwrapped independently, then joined by shifting
/// each run a whole number of turns onto the line fitted through what came
/// before. Within a run, adjacent estimates are assumed to advance by less
/// than half a turn per step — guaranteed for the residual rates coarse
/// synchronization leaves behind.
fn unwrap_phases(entries: &[PerSymbolEstimate]) -> Vec<f64> {
    let mut segments: Vec<Vec<usize>> = vec![vec![0]];
    for j in 1..entries.len() {
        if entries[j].i - entries[j - 1].i > UNWRAP_MAX_GAP {
            segments.push(Vec::new());
        }
        segments.last_mut().unwrap().push(j);
    }

    let mut out = vec![0.0f64; entries.len()];
    let mut acc_x: Vec<f64> = Vec::new();
    let mut acc_y: Vec<f64> = Vec::new();
    for seg in segments {
        let first = seg[0];
        let mut unwrapped = Vec::with_capacity(seg.len());
        unwrapped.push(wrap_pi(entries[first].phi));
        for w in seg.windows(2) {
            let step = wrap_pi(entries[w[1]].phi - entries[w[0]].phi);
            let prev = *unwrapped.last().unwrap();
            unwrapped.push(prev + step);
        }
        let shift = if acc_x.is_empty() {
            0.0
        } else {
            let pred = if acc_x.len() >= 2 {
                let (b0, b1) = line_fit(&acc_x, &acc_y);
                b0 + b1 * entries[first].i as f64
            } else {
                acc_y[0]
            };
            2.0 * PI * ((pred - unwrapped[0]) / (2.0 * PI)).round()
        };
        for (&j, u) in seg.iter().zip(&unwrapped) {
            out[j] = u + shift;
            acc_x.push(entries[j].i as f64);
            acc_y.push(out[j]);
        }
    }
    out
}

/// Fits the per-symbol delay and phase sequences to straight lines in the
/// slot index, yielding the residual sample-rate and carrier-rate offsets
/// and their slot-0 intercepts. Errors if fewer than two symbols survive or
/// if either fitted rate lands outside the residual regime coarse
/// synchronization guarantees.
pub fn joint_fit(per_symbol: &[PerSymbolEstimate], fc: f64) -> Result<SyncEstimate> {
    if per_symbol.len() < 2 {
        return Err(Error::domain(format!(
            "residual clock fit needs at least two retained symbols, got {}",
            per_symbol.len()
        )));
    }
    if !per_symbol.windows(2).all(|w| w[1].i > w[0].i) {
        return Err(Error::domain("symbol indices must be strictly increasing"));
    }
    if !(fc.is_finite() && fc > 0.0) {
        return Err(Error::domain(format!("carrier frequency must be positive, got {fc}")));
    }

    let xs: Vec<f64> = per_symbol.iter().map(|e| e.i as f64).collect();
    let taus: Vec<f64> = per_symbol.iter().map(|e| e.tau).collect();
    let phis = unwrap_phases(per_symbol);
    let (tau_m0, tau_slope) = line_fit(&xs, &taus);
    let (phi0, phi_slope) = line_fit(&xs, &phis);

    let dbeta_s = tau_slope / SYMBOL_PERIOD;
    let dbeta_c = -phi_slope / (2.0 * PI * SYMBOL_PERIOD * fc);
    if dbeta_s.abs() >= MAX_RESIDUAL_RATE || dbeta_c.abs() >= MAX_RESIDUAL_RATE {
        return Err(Error::numeric(format!(
            "fitted residual rates ({dbeta_s:.3e}, {dbeta_c:.3e}) exceed the coarse-sync regime"
        )));
    }
    Ok(SyncEstimate {
        phi_m0: wrap_pi(phi0),
        dbeta_c,
        tau_m0,
        dbeta_s,
        fc,
        per_symbol: per_symbol.to_vec(),
    })
}

/// Removes the fitted per-symbol phase and delay ramps from an equalized
/// matrix, aligning every symbol onto its transmit constellation.
pub fn compensate(y: &SymbolMatrix, sync: &SyncEstimate) -> SymbolMatrix {
    let mut out = SymbolMatrix::zeros(y.nsym());
    for i in 1..y.nsym() {
        let tau = sync.tau_at(i);
        let rot = Complex64::from_polar(1.0, -sync.phi_at(i));
        for k in grid::LIVE {
            let d = grid::offset_unchecked(k);
            out[(i, k)] = y[(i, k)] * rot * delay_phasor(d, -tau);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Label disambiguation and hard decisions
// ---------------------------------------------------------------------------

/// Fourth-power rotation reference of a compensated symbol over its
/// unmasked, non-pilot live subcarriers. Raising to the fourth power
/// collapses every candidate alphabet onto a nonzero mean, so the angle
/// tracks four times the residual rotation (plus π for the denser alphabets
/// and the 45°-rotated quaternary one).
fn fourth_power_angle(row: &[Complex64], masked: &[bool]) -> Result<f64> {
    let mut acc = Complex64::new(0.0, 0.0);
    let mut n = 0usize;
    for k in grid::non_pilot_subcarriers() {
        if !masked[k] {
            let y = row[k];
            acc += y * y * y * y;
            n += 1;
        }
    }
    if n < 16 {
        return Err(Error::domain(
            "too few usable subcarriers to form a rotation reference",
        ));
    }
    Ok(acc.arg())
}

/// Resolves cardinality-4 columns into QPSK or its 45°-rotated twin by
/// chaining each symbol's fourth-power rotation against the previous
/// retained symbol, anchored at the known-QPSK reference symbol in slot 1.
/// `classes` lists retained data symbols (slots ≥ 2) ascending with their
/// identified class; the result pairs each with a concrete alphabet.
pub fn resolve_labels(
    comp: &SymbolMatrix,
    classes: &[(usize, SymbolClass)],
    masked: &[usize],
) -> Result<Vec<(usize, Modulation)>> {
    let mut mask = vec![false; NS];
    for &k in masked {
        mask[k] = true;
    }
    // The reference symbol is plain QPSK, so its fourth-power angle tracks
    // the residual rotation directly.
    let mut r_ref = fourth_power_angle(comp.row(1), &mask)?;
    let mut labels = Vec::with_capacity(classes.len());
    for &(i, class) in classes {
        debug_assert!(i >= 2, "data symbols start at slot 2");
        let a = fourth_power_angle(comp.row(i), &mask)?;
        match class {
            SymbolClass::Card4 => {
                // A 45° transmit rotation lands the fourth power half a turn
                // away from the running reference.
                let delta = wrap_pi(a - r_ref);
                if delta.abs() <= PI / 2.0 {
                    labels.push((i, Modulation::Qpsk));
                    r_ref = a;
                } else {
                    labels.push((i, Modulation::Qam4));
                    r_ref = wrap_pi(a - PI);
                }
            }
            SymbolClass::Qam16 => {
                labels.push((i, Modulation::Qam16));
                r_ref = wrap_pi(a - PI); // E[c⁴] < 0 for the square alphabets
            }
            SymbolClass::Qam32 => {
                labels.push((i, Modulation::Qam32));
                r_ref = wrap_pi(a - PI);
            }
            SymbolClass::Composite => {
                return Err(Error::domain(
                    "composite symbols must be dropped before labeling",
                ));
            }
        }
    }
    Ok(labels)
}

/// Nearest-point hard decisions for every labeled symbol. Pilot subcarriers
/// always decode against the 45°-rotated quaternary pilot alphabet
/// regardless of the column's label; masked subcarriers and unlisted
/// symbols stay zero.
pub fn hard_decode(
    comp: &SymbolMatrix,
    labels: &[(usize, Modulation)],
    masked: &[usize],
) -> Result<SymbolMatrix> {
    let mut mask = vec![false; NS];
    for &k in masked {
        mask[k] = true;
    }
    let pilot_alphabet = Constellation::new(Modulation::Qam4);
    let mut out = SymbolMatrix::zeros(comp.nsym());
    for &(i, label) in labels {
        if i == 0 || i >= comp.nsym() {
            return Err(Error::domain(format!("symbol slot {i} out of range")));
        }
        let cons = Constellation::new(label);
        for k in grid::LIVE {
            if mask[k] {
                continue;
            }
            let alphabet = if i >= 2 && grid::is_pilot(k) { &pilot_alphabet } else { &cons };
            out[(i, k)] = alphabet.nearest(comp[(i, k)]).1;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Whole-frame pipeline
// ---------------------------------------------------------------------------

/// Options for [`demod_frame`].
#[derive(Debug, Clone)]
pub struct DemodConfig {
    /// Carrier frequency, Hz (refers phase slopes to a carrier-rate offset).
    pub fc: f64,
    /// Equalizer masking floor on `|Ĥ_k|`.
    pub eq_floor: f64,
    /// Frame index within the capture; diversifies clustering seeds and is
    /// recorded on the output.
    pub frame_index: usize,
    /// Base seed for the deterministic clustering restarts.
    pub seed: u64,
}

impl DemodConfig {
    pub fn new(fc: f64) -> Self {
        Self { fc, eq_floor: DEFAULT_EQ_FLOOR, frame_index: 0, seed: 0x5eed }
    }
}

/// Fully demodulated frame: hard decisions, labels, and the residual
/// synchronization estimate they rest on.
#[derive(Debug, Clone)]
pub struct DecodedFrame {
    /// Frame index within the capture.
    pub m: usize,
    /// Estimated pre-correlation signal-to-noise ratio, dB.
    pub snr_pre_db: f64,
    /// Residual clock fit across the retained symbols.
    pub sync: SyncEstimate,
    /// Retained symbols with their resolved alphabets, ascending slot.
    pub labels: Vec<(usize, Modulation)>,
    /// Masked live subcarriers, ascending.
    pub masked: Vec<usize>,
    /// Hard decisions; zeros at dropped symbols and masked subcarriers.
    pub x_hat: SymbolMatrix,
}

impl DecodedFrame {
    /// Slots that were dropped (composite content or failed refinement).
    pub fn dropped(&self) -> Vec<usize> {
        let retained: Vec<usize> = self.labels.iter().map(|&(i, _)| i).collect();
        (1..NSF).filter(|i| !retained.contains(i)).collect()
    }
}

/// Demodulates one frame of samples end to end.
///
/// `x_ref` is the known slot-1 reference symbol; `channel` carries the
/// cross-frame channel refinement (feed frames from the same pass in order).
/// Per symbol, the pipeline identifies the alphabet on a delay-derotated
/// copy (seeded from the previous symbol's delay — the residual rates move
/// the delay by picoseconds per slot), estimates delay and phase by
/// marginalized maximum likelihood with the pilots pinning absolute phase,
/// fits the retained sequence to lines in the slot index, compensates, and
/// takes hard decisions.
pub fn demod_frame(
    samples: &[Complex64],
    x_ref: &[Complex64],
    pilots: &PilotCodebook,
    channel: &mut ChannelEstimator,
    cfg: &DemodConfig,
) -> Result<DecodedFrame> {
    let bar_y = ofdm_demod(samples)?;

    // Noise level from the signal-free gutter, floored so noiseless input
    // keeps the likelihood weights finite.
    let mut live_power = 0.0;
    for i in 1..NSF {
        for k in grid::LIVE {
            live_power += bar_y[(i, k)].norm_sqr();
        }
    }
    live_power /= ((NSF - 1) * NUM_LIVE) as f64;
    let noise_raw = gutter_noise_power(&bar_y).max(NOISE_FLOOR_REL * live_power);

    channel.add_frame(bar_y.row(1))?;
    let state = channel.equalizer_for(bar_y.row(1))?;
    let eq = equalize(&bar_y, &state, cfg.eq_floor)?;

    // Equalization rescales the noise per subcarrier by |Ẑ·Ĥ_k|.
    let mut inv_noise = vec![0.0f64; NS];
    for k in grid::LIVE {
        if !eq.is_masked(k) {
            inv_noise[k] = (state.z_hat * state.h_at(k)).norm_sqr() / noise_raw;
        }
    }

    let pilot_matrix = pilots.pilot_matrix();
    let qpsk = Constellation::new(Modulation::Qpsk);
    let qam4 = Constellation::new(Modulation::Qam4);
    let qam16 = Constellation::new(Modulation::Qam16);
    let qam32 = Constellation::new(Modulation::Qam32);
    // Cardinality-4 columns are fitted over the union of both axis-aligned
    // and 45°-rotated squares. Either content type then has the true phase
    // as a likelihood mode, and the known pilots select among the π/4-spaced
    // modes — a single-square alphabet instead forces a ±45° tie on rotated
    // columns that would bias the frame fit.
    let card4_union: Vec<Complex64> =
        qpsk.points().iter().chain(qam4.points().iter()).copied().collect();

    let mut per: Vec<PerSymbolEstimate> = Vec::with_capacity(NSF - 1);
    let mut classes: Vec<(usize, SymbolClass)> = Vec::new();
    let mut sss_retained = false;
    let mut pred_tau = state.tau_m1_hat;
    for i in 1..NSF {
        let row = eq.y.row(i);

        // Known content for this slot: everything in the reference symbol,
        // the pilot lattice elsewhere.
        let known_at = |k: usize| -> Option<Complex64> {
            if i == 1 {
                Some(x_ref[k] / x_ref[k].norm())
            } else if grid::is_pilot(k) {
                let r = grid::pilot_rank(k).unwrap();
                Some(pilot_matrix[r][i - 2])
            } else {
                None
            }
        };

        // Pilot-anchored absolute phase at the predicted delay (the known
        // subcarriers sit symmetrically, so a small delay error cancels).
        let mut anchor = Complex64::new(0.0, 0.0);
        for k in grid::LIVE {
            if eq.is_masked(k) {
                continue;
            }
            if let Some(x) = known_at(k) {
                let d = grid::offset_unchecked(k);
                anchor += row[k] * x.conj() * delay_phasor(d, -pred_tau);
            }
        }

        let (class, alphabet, phi_init) = if i == 1 {
            (SymbolClass::Card4, qpsk.points(), anchor.arg())
        } else {
            let mut points = Vec::with_capacity(grid::NUM_LIVE_NON_PILOT);
            let mut noise_acc = 0.0;
            for k in grid::non_pilot_subcarriers() {
                if !eq.is_masked(k) {
                    let d = grid::offset_unchecked(k);
                    points.push(row[k] * delay_phasor(d, -pred_tau));
                    noise_acc += 1.0 / inv_noise[k];
                }
            }
            let noise_mean = noise_acc / points.len().max(1) as f64;
            let seed = cfg.seed ^ ((cfg.frame_index as u64) << 32) ^ (i as u64);
            let class = identify_constellation(&points, noise_mean, seed)?;
            let alphabet: &[Complex64] = match class {
                SymbolClass::Card4 => &card4_union,
                SymbolClass::Qam16 => qam16.points(),
                SymbolClass::Qam32 => qam32.points(),
                SymbolClass::Composite => continue, // dropped from the fit
            };
            (class, alphabet, anchor.arg())
        };

        let mut obs = Vec::with_capacity(NUM_LIVE);
        for k in grid::LIVE {
            if eq.is_masked(k) {
                continue;
            }
            obs.push(MlObs {
                d: grid::offset_unchecked(k),
                y: row[k],
                known: known_at(k),
                inv_noise: inv_noise[k],
            });
        }
        let est = per_symbol_ml(&obs, alphabet, pred_tau, phi_init)?;
        if !est.converged {
            continue; // dropped from the fit
        }
        per.push(PerSymbolEstimate { i, tau: est.tau, phi: est.phi });
        if i == 1 {
            sss_retained = true;
        } else {
            classes.push((i, class));
        }
        pred_tau = est.tau;
    }

    let sync = joint_fit(&per, cfg.fc)?;
    let comp = compensate(&eq.y, &sync);
    let mut labels = resolve_labels(&comp, &classes, &eq.masked)?;
    if sss_retained {
        labels.insert(0, (1, Modulation::Qpsk));
    }
    let x_hat = hard_decode(&comp, &labels, &eq.masked)?;

    let mean_h2 = state.h_hat.iter().map(|h| h.norm_sqr()).sum::<f64>() / NUM_LIVE as f64;
    let snr_pre = state.z_hat.norm_sqr() * mean_h2 * (NUM_LIVE as f64 / NS as f64) / noise_raw;
    Ok(DecodedFrame {
        m: cfg.frame_index,
        snr_pre_db: 10.0 * snr_pre.log10(),
        sync,
        labels,
        masked: eq.masked.clone(),
        x_hat,
    })
}

// ---------------------------------------------------------------------------
// Alternate whole-frame residual estimator
// ---------------------------------------------------------------------------

/// Options for [`alt_residual_sync`].
#[derive(Debug, Clone)]
pub struct AltSyncConfig {
    /// Carrier frequency, Hz.
    pub fc: f64,
    /// Coarse carrier-rate offset already removed upstream; stretches the
    /// effective symbol period.
    pub beta_hat: f64,
    /// Common start-time offset (seconds) to remove before fitting; use the
    /// reference-symbol delay estimate.
    pub tau_anchor: f64,
    /// Half-width of the brute-force carrier-rate scan.
    pub scan_half_width: f64,
    /// Scan step; fine enough that the within-symbol decoherence lobe is
    /// sampled several times.
    pub scan_step: f64,
    /// Gaussian prior (1σ) pulling the fitted carrier rate toward zero.
    pub beta_prior: f64,
    /// Gaussian prior (1σ) tying the fitted phase at the reference slot to
    /// zero, where equalization pinned it.
    pub phi_prior: f64,
}

impl AltSyncConfig {
    pub fn new(fc: f64) -> Self {
        Self {
            fc,
            beta_hat: 0.0,
            tau_anchor: 0.0,
            scan_half_width: 2e-6,
            scan_step: 1e-8,
            beta_prior: 1e-6,
            phi_prior: 0.1,
        }
    }

    /// Phase-ramp derivative `∂ψ_ik/∂δβ` at slot `i`, offset `d`.
    fn rate_gain(&self, i: usize, d: i32) -> f64 {
        -2.0 * PI * (self.fc + SUBCARRIER_SPACING * d as f64)
            * (SYMBOL_PERIOD / (1.0 - self.beta_hat))
            * i as f64
    }
}

/// Result of the alternate estimator: one carrier-rate offset applied to
/// both clocks, plus the slot-0 phase.
#[derive(Debug, Clone, Copy)]
pub struct AltSyncEstimate {
    pub dbeta_c: f64,
    pub phi_m0: f64,
    pub converged: bool,
}

/// Model phase at slot `i`, subcarrier offset `d`, for an alternate-path
/// estimate (the anchor delay is handled separately).
pub fn alt_phase(est: &AltSyncEstimate, cfg: &AltSyncConfig, i: usize, d: i32) -> f64 {
    est.phi_m0 + cfg.rate_gain(i, d) * est.dbeta_c
}

/// Whole-frame residual estimator that ties the sample-clock and
/// carrier-clock offsets together (they share the oscillator) and fits the
/// two remaining parameters — carrier-rate offset and slot-0 phase — to the
/// complete equalized frame at once, marginalizing every subcarrier over
/// all four candidate alphabets. Useful when per-symbol estimates are too
/// noisy to fit, and as an independent cross-check of the standard path.
///
/// A brute-force scan (phase-blind via fourth powers) brackets the carrier
/// rate before a damped Newton refinement of the penalized likelihood;
/// scanning to the edge without a bracket is an error.
pub fn alt_residual_sync(
    eq: &Equalized,
    noise_power: f64,
    cfg: &AltSyncConfig,
) -> Result<AltSyncEstimate> {
    if eq.y.nsym() != NSF {
        return Err(Error::domain(format!(
            "alternate estimator expects a full {NSF}-slot frame, got {}",
            eq.y.nsym()
        )));
    }
    if cfg.scan_step <= 0.0 || cfg.scan_half_width < 2.0 * cfg.scan_step {
        return Err(Error::domain("carrier-rate scan must span at least two steps each side"));
    }

    // Cells: every unmasked live subcarrier of every data slot, with the
    // anchor delay ramp removed.
    let mut cells: Vec<(usize, i32, Complex64)> = Vec::new();
    let mut power = 0.0;
    for i in grid::DATA_SYMBOLS {
        let row = eq.y.row(i);
        for k in grid::LIVE {
            if !eq.is_masked(k) {
                let d = grid::offset_unchecked(k);
                let y = row[k] * delay_phasor(d, -cfg.tau_anchor);
                power += y.norm_sqr();
                cells.push((i, d, y));
            }
        }
    }
    if cells.len() < 100 {
        return Err(Error::domain("too few usable cells for the alternate estimator"));
    }
    let inv_noise = 1.0 / noise_power.max(NOISE_FLOOR_REL * power / cells.len() as f64);

    // Phase-blind bracket: fourth powers cancel the unknown slot-0 phase
    // and collapse each alphabet onto a nonzero mean, so the correct rate
    // maximizes the per-slot coherent sums. Decimated in subcarrier — the
    // lobe width is set by the within-slot ramp, far wider than the step.
    let mut quads: Vec<(usize, Vec<(f64, Complex64)>)> = Vec::new();
    let mut cur = 0usize;
    for &(i, d, y) in &cells {
        if quads.last().map(|&(qi, _)| qi) != Some(i) {
            quads.push((i, Vec::new()));
            cur = 0;
        }
        cur += 1;
        if cur % 8 == 0 {
            let q = cfg.rate_gain(i, d);
            quads.last_mut().unwrap().1.push((q, y * y * y * y));
        }
    }
    let steps = (cfg.scan_half_width / cfg.scan_step).floor() as i64;
    let mut best = (f64::NEG_INFINITY, 0i64);
    for s in -steps..=steps {
        let db = s as f64 * cfg.scan_step;
        let mut metric = 0.0;
        for (_, terms) in &quads {
            let mut acc = Complex64::new(0.0, 0.0);
            for &(q, w) in terms {
                acc += w * Complex64::from_polar(1.0, -4.0 * q * db);
            }
            metric += acc.norm();
        }
        if metric > best.0 {
            best = (metric, s);
        }
    }
    if best.1 == -steps || best.1 == steps {
        return Err(Error::numeric(
            "carrier-rate scan peaked at the range edge without bracketing; widen the scan",
        ));
    }
    let mut dbeta = best.1 as f64 * cfg.scan_step;

    // Fine coherent stage. The per-slot metric above is blind to alignment
    // across slots, so its peak is far coarser than the likelihood basin:
    // one scan step slews the last slot's phase by hundreds of milliradians
    // per fourth power. Summing the fourth powers over the whole frame keeps
    // the slot-0 phase cancelled while demanding cross-slot alignment; its
    // peak sits at the true rate with a lobe narrow enough to start Newton
    // inside the correct mode. The grid is walked with per-cell phase
    // rotors so the hot loop is one complex multiply per cell and step.
    let fine_step = cfg.scan_step / 40.0;
    let fine_span = 4 * 40i64;
    let start = dbeta - fine_span as f64 * fine_step;
    let mut state: Vec<Complex64> = Vec::new();
    let mut rotor: Vec<Complex64> = Vec::new();
    for (n, &(i, d, y)) in cells.iter().enumerate() {
        if n % 4 != 0 {
            continue;
        }
        let q = cfg.rate_gain(i, d);
        let z = y * y * y * y;
        state.push(z * Complex64::from_polar(1.0, -4.0 * q * start));
        rotor.push(Complex64::from_polar(1.0, -4.0 * q * fine_step));
    }
    let mut fine: Vec<f64> = Vec::with_capacity(2 * fine_span as usize + 1);
    for s in 0..=2 * fine_span {
        let mut acc = Complex64::new(0.0, 0.0);
        for (c, r) in state.iter_mut().zip(&rotor) {
            acc += *c;
            if s < 2 * fine_span {
                *c *= *r;
            }
        }
        fine.push(acc.norm());
    }
    let peak = fine
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(s, _)| s)
        .unwrap_or(0);
    if peak == 0 || peak == fine.len() - 1 {
        return Err(Error::numeric(
            "carrier-rate refinement scan peaked at the bracket edge; widen the scan",
        ));
    }
    // Parabolic interpolation of the peak sample and its neighbors.
    let (ym, y0, yp) = (fine[peak - 1], fine[peak], fine[peak + 1]);
    let denom = ym - 2.0 * y0 + yp;
    let frac = if denom.abs() > f64::EPSILON { 0.5 * (ym - yp) / denom } else { 0.0 };
    dbeta = start + (peak as f64 + frac.clamp(-0.5, 0.5)) * fine_step;

    // Pilot-anchored phase at the bracketed rate.
    let pilot_matrix = PilotCodebook::builtin().pilot_matrix();
    let mut anchor = Complex64::new(0.0, 0.0);
    for &(i, d, y) in &cells {
        let k = if d >= 0 { d as usize } else { (d + NS as i32) as usize };
        if let Some(r) = grid::pilot_rank(k) {
            let x = pilot_matrix[r][i - 2];
            anchor += y * x.conj() * Complex64::from_polar(1.0, -cfg.rate_gain(i, d) * dbeta);
        }
    }
    let mut phi = anchor.arg();

    // Weighted union of all four alphabets with equal alphabet priors.
    let mut cands: Vec<(Complex64, f64)> = Vec::new();
    for m in Modulation::ALL {
        let cons = Constellation::new(m);
        let prior = (4.0 * cons.cardinality() as f64).recip().ln();
        for &p in cons.points() {
            cands.push((p, prior));
        }
    }

    // Penalized negative log-likelihood and its derivatives in (δβ, φ).
    let q1 = cfg.rate_gain(1, 0);
    let pass = |db: f64, ph: f64| -> (f64, [f64; 2], [[f64; 2]; 2]) {
        let mut obj = 0.0;
        let mut g = [0.0f64; 2];
        let mut h = [[0.0f64; 2]; 2];
        for &(i, d, y) in &cells {
            let q = cfg.rate_gain(i, d);
            let psi = ph + q * db;
            let u = y * Complex64::from_polar(1.0, -psi);
            let mut amax = f64::NEG_INFINITY;
            for &(c, lp) in &cands {
                let a = (2.0 * (u.re * c.re + u.im * c.im) - c.norm_sqr()) * inv_noise + lp;
                if a > amax {
                    amax = a;
                }
            }
            let mut w_sum = 0.0;
            let mut c_mean = Complex64::new(0.0, 0.0);
            let mut c2_mean = 0.0;
            let mut csq_mean = Complex64::new(0.0, 0.0);
            for &(c, lp) in &cands {
                let a = (2.0 * (u.re * c.re + u.im * c.im) - c.norm_sqr()) * inv_noise + lp;
                let w = (a - amax).exp();
                w_sum += w;
                c_mean += c * w;
                c2_mean += c.norm_sqr() * w;
                csq_mean += c * c * w;
            }
            c_mean /= w_sum;
            c2_mean /= w_sum;
            csq_mean /= w_sum;
            obj -= amax + w_sum.ln();

            let cu = c_mean.conj() * u;
            let dl = 2.0 * inv_noise * cu.im;
            let post_var = (c2_mean - c_mean.norm_sqr()) * inv_noise;
            let post_pseudo = (csq_mean - c_mean * c_mean) * inv_noise;
            let d2l = 2.0
                * inv_noise
                * (post_var * u.norm_sqr() - (post_pseudo.conj() * u * u).re - cu.re);
            g[0] -= q * dl;
            g[1] -= dl;
            h[0][0] -= q * q * d2l;
            h[0][1] -= q * d2l;
            h[1][1] -= d2l;
        }
        // Priors: rate near zero, phase at the reference slot near zero.
        let bp2 = cfg.beta_prior * cfg.beta_prior;
        obj += db * db / bp2;
        g[0] += 2.0 * db / bp2;
        h[0][0] += 2.0 / bp2;
        let pp2 = cfg.phi_prior * cfg.phi_prior;
        let e = wrap_pi(ph + q1 * db);
        obj += e * e / pp2;
        g[0] += 2.0 * e * q1 / pp2;
        g[1] += 2.0 * e / pp2;
        h[0][0] += 2.0 * q1 * q1 / pp2;
        h[0][1] += 2.0 * q1 / pp2;
        h[1][1] += 2.0 / pp2;
        h[1][0] = h[0][1];
        (obj, g, h)
    };

    let step_scale = 2.0 * PI * cfg.fc * SYMBOL_PERIOD * (NSF - 1) as f64;
    let (mut obj, mut g, mut h) = pass(dbeta, phi);
    let mut converged = false;
    for _ in 0..NEWTON_MAX_ITERS {
        let det = h[0][0] * h[1][1] - h[0][1] * h[0][1];
        let (db_step, dp_step) = if h[0][0] > 0.0 && det > 0.0 {
            (
                -(h[1][1] * g[0] - h[0][1] * g[1]) / det,
                -(-h[0][1] * g[0] + h[0][0] * g[1]) / det,
            )
        } else {
            (
                (-g[0] / h[0][0].abs().max(f64::MIN_POSITIVE)).clamp(-cfg.scan_step, cfg.scan_step),
                (-g[1] / h[1][1].abs().max(f64::MIN_POSITIVE)).clamp(-0.5, 0.5),
            )
        };
        let mut accepted = None;
        let mut lam = 1.0;
        for _ in 0..40 {
            let cand = pass(dbeta + lam * db_step, phi + lam * dp_step);
            if cand.0.is_finite() && cand.0 <= obj + 1e-9 * obj.abs().max(1.0) {
                accepted = Some((cand, lam));
                break;
            }
            lam *= 0.5;
        }
        let Some(((o2, g2, h2), lam)) = accepted else {
            break;
        };
        dbeta += lam * db_step;
        phi += lam * dp_step;
        (obj, g, h) = (o2, g2, h2);
        // Undamped step norm, so a collapsed backtracking scale cannot fake
        // convergence while the fit is still far from the minimum.
        if dp_step.abs() + step_scale * db_step.abs() < 1e-10 {
            converged = true;
            break;
        }
    }
    Ok(AltSyncEstimate { dbeta_c: dbeta, phi_m0: wrap_pi(phi), converged })
}

/// Removes an alternate-path estimate from an equalized matrix: the anchor
/// delay ramp plus the fitted per-cell phase model.
pub fn alt_compensate(
    y: &SymbolMatrix,
    est: &AltSyncEstimate,
    cfg: &AltSyncConfig,
) -> SymbolMatrix {
    let mut out = SymbolMatrix::zeros(y.nsym());
    for i in 1..y.nsym() {
        for k in grid::LIVE {
            let d = grid::offset_unchecked(k);
            let rot = Complex64::from_polar(1.0, -alt_phase(est, cfg, i, d));
            out[(i, k)] = y[(i, k)] * delay_phasor(d, -cfg.tau_anchor) * rot;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sequences;
    use crate::synth::{apply_impairment, synth_frame, FrameImpairment};
    use dsp::SincInterpolator;

    /// Mid-band downlink channel used throughout the tests.
    const FC: f64 = 11.805e9;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_point(cons: &Constellation, rng: &mut ChaCha8Rng) -> Complex64 {
        let pts = cons.points();
        pts[rng.gen_range(0..pts.len())]
    }

    /// Frame coefficients with the reference symbol in slot 1, the pilot
    /// lattice in place, and data drawn from `schedule` (cycled per slot).
    fn build_frame_matrix(schedule: &[Modulation], seed: u64) -> SymbolMatrix {
        let mut rng = rng(seed);
        let pm = PilotCodebook::builtin().pilot_matrix();
        let sss = sequences::default_sss();
        let mut x = SymbolMatrix::zeros(NSF);
        for k in 0..NS {
            x[(1, k)] = sss[k];
        }
        for i in grid::DATA_SYMBOLS {
            let cons = Constellation::new(schedule[(i - 2) % schedule.len()]);
            for k in grid::LIVE {
                x[(i, k)] = match grid::pilot_rank(k) {
                    Some(r) => pm[r][i - 2],
                    None => random_point(&cons, &mut rng),
                };
            }
        }
        x
    }

    #[test]
    fn demod_window_inverts_synthesis() {
        let x = build_frame_matrix(&[Modulation::Qpsk, Modulation::Qam16], 42);
        let time = synth_frame(&x, &sequences::default_pss()).unwrap();
        let y = ofdm_demod(&time).unwrap();
        let mut worst = 0.0f64;
        for i in 1..NSF {
            for k in 0..NS {
                worst = worst.max((y[(i, k)] - x[(i, k)]).norm());
            }
        }
        assert!(worst < 1e-9, "round-trip error {worst:.3e}");
        for k in 0..NS {
            assert_eq!(y[(0, k)], Complex64::new(0.0, 0.0));
        }
        assert!(ofdm_demod(&time[..1000]).is_err());
    }

    #[test]
    fn demod_window_reports_fractional_delay() {
        let x = build_frame_matrix(&[Modulation::Qpsk], 43);
        let time = synth_frame(&x, &sequences::default_pss()).unwrap();
        let tau = 0.5 / grid::FS; // half a sample
        let imp = FrameImpairment { delay: tau, ..FrameImpairment::identity(FC) };
        let interp = SincInterpolator::new();
        let rx = apply_impairment(&time, &[Complex64::new(1.0, 0.0)], &imp, &interp).unwrap();
        let y = ofdm_demod(&rx[..NSF * SYMBOL_LEN]).unwrap();
        let mut worst = 0.0f64;
        for k in grid::LIVE {
            let d = grid::offset_unchecked(k);
            let expect = x[(1, k)] * delay_phasor(d, tau);
            worst = worst.max((y[(1, k)] - expect).norm());
        }
        // The resampling itself is exact across the band; what remains is
        // the transmit shaping. A half-sample delay slides the analysis
        // window half a sample into the trapezoidal ramp, and the one
        // attenuated edge sample spreads ≈ 0.03/√Ns ≈ 1e−3 over every bin.
        assert!(worst < 1.2e-3, "live-band error {worst:.3e}");
    }

    #[test]
    fn gutter_noise_tracks_injected_variance() {
        let mut r = rng(44);
        let v = 0.01;
        let noise: Vec<Complex64> = (0..NSF * SYMBOL_LEN).map(|_| dsp::awgn(&mut r, v)).collect();
        let y = ofdm_demod(&noise).unwrap();
        let est = gutter_noise_power(&y);
        assert!(
            (est - v).abs() < 0.1 * v,
            "gutter estimate {est:.4e} vs injected {v:.4e}"
        );
    }

    #[test]
    fn channel_estimate_identity_is_unit() {
        let sss = sequences::default_sss();
        let state = estimate_channel(&sss, &sss).unwrap();
        for k in grid::LIVE {
            assert!((state.h_at(k) - Complex64::new(1.0, 0.0)).norm() < 1e-9);
        }
        assert!((state.z_hat - Complex64::new(1.0, 0.0)).norm() < 1e-6);
        assert!(state.tau_m1_hat.abs() < 1e-15, "tau {}", state.tau_m1_hat);
    }

    #[test]
    fn channel_estimate_recovers_pure_delay() {
        let sss = sequences::default_sss();
        let tau = 3.7e-9;
        let mut row = vec![Complex64::new(0.0, 0.0); NS];
        for k in grid::LIVE {
            let d = grid::offset_unchecked(k);
            row[k] = sss[k] * delay_phasor(d, tau);
        }
        let state = estimate_channel(&row, &sss).unwrap();
        assert!(
            (state.tau_m1_hat - tau).abs() < 1e-13,
            "tau error {:.3e}",
            state.tau_m1_hat - tau
        );
        for k in grid::LIVE {
            assert!((state.h_at(k) - Complex64::new(1.0, 0.0)).norm() < 1e-6);
        }
        assert!((state.z_hat - Complex64::new(1.0, 0.0)).norm() < 1e-6);
    }

    #[test]
    fn channel_estimate_tilt_refines_over_frames() {
        let sss = sequences::default_sss();
        let z = Complex64::from_polar(2.0f64.sqrt(), 0.8);
        let tau = 1e-9;
        let h_of = |d: i32| -> f64 { 10.0f64.powf(1.5 * (d as f64 / 510.0) / 20.0) };
        // Per-bin noise for 15 dB against the mean loaded power.
        let mut sig = 0.0;
        for k in grid::LIVE {
            sig += (z * h_of(grid::offset_unchecked(k))).norm_sqr();
        }
        let var = sig / NUM_LIVE as f64 * 10.0f64.powf(-1.5);
        let mut r = rng(7);
        let make_row = |r: &mut ChaCha8Rng| -> Vec<Complex64> {
            let mut row = vec![Complex64::new(0.0, 0.0); NS];
            for k in grid::LIVE {
                let d = grid::offset_unchecked(k);
                row[k] = z * h_of(d) * sss[k] * delay_phasor(d, tau) + dsp::awgn(r, var);
            }
            row
        };

        let max_err = |est: &mut ChannelEstimator, row: &[Complex64]| -> f64 {
            let state = est.equalizer_for(row).unwrap();
            let mut worst = 0.0f64;
            for k in grid::LIVE {
                let d = grid::offset_unchecked(k);
                worst = worst.max((state.h_at(k) - Complex64::new(h_of(d), 0.0)).norm());
            }
            worst
        };

        let mut est = ChannelEstimator::new(&sss).unwrap();
        let first = make_row(&mut r);
        est.add_frame(&first).unwrap();
        let err1 = max_err(&mut est, &first);
        let mut last = first;
        for _ in 1..10 {
            last = make_row(&mut r);
            est.add_frame(&last).unwrap();
        }
        let err10 = max_err(&mut est, &last);
        assert!(err10 < 0.05, "10-frame channel error {err10:.4}");
        assert!(err10 < err1, "no refinement: {err10:.4} vs {err1:.4}");

        let state = est.equalizer_for(&last).unwrap();
        assert!((state.tau_m1_hat - tau).abs() < 5e-11, "tau err {:.3e}", state.tau_m1_hat - tau);
        assert!((state.z_hat - z).norm() < 0.1, "z {} vs {z}", state.z_hat);
    }

    #[test]
    fn equalize_divides_and_masks() {
        let mut r = rng(46);
        let qpsk = Constellation::new(Modulation::Qpsk);
        let weak = 600usize;
        let mut h_hat = vec![Complex64::new(1.0, 0.0); NUM_LIVE];
        h_hat[grid::live_row(weak)] = Complex64::new(0.02, 0.0);
        h_hat[grid::live_row(300)] = Complex64::from_polar(0.9, 0.4);
        let state = EqualizerState {
            h_hat,
            z_hat: Complex64::from_polar(2.0, PI / 6.0),
            tau_m1_hat: 0.0,
        };
        let mut x = SymbolMatrix::zeros(4);
        let mut bar = SymbolMatrix::zeros(4);
        for i in 1..4 {
            for k in grid::LIVE {
                x[(i, k)] = random_point(&qpsk, &mut r);
                bar[(i, k)] = state.z_hat * state.h_at(k) * x[(i, k)];
            }
        }
        let eq = equalize(&bar, &state, 0.05).unwrap();
        assert_eq!(eq.masked, vec![weak]);
        assert!(eq.is_masked(weak) && !eq.is_masked(weak + 1));
        for i in 1..4 {
            assert_eq!(eq.y[(i, weak)], Complex64::new(0.0, 0.0));
            for k in grid::LIVE {
                if k != weak {
                    assert!((eq.y[(i, k)] - x[(i, k)]).norm() < 1e-12);
                }
            }
        }
        assert!(equalize(&bar, &state, 1.2).is_err());
    }

    #[test]
    fn identify_separates_cardinalities_clean() {
        let mut r = rng(47);
        for (m, expect) in [
            (Modulation::Qpsk, SymbolClass::Card4),
            (Modulation::Qam4, SymbolClass::Card4),
            (Modulation::Qam16, SymbolClass::Qam16),
            (Modulation::Qam32, SymbolClass::Qam32),
        ] {
            let cons = Constellation::new(m);
            let pts: Vec<Complex64> =
                (0..grid::NUM_LIVE_NON_PILOT).map(|_| random_point(&cons, &mut r)).collect();
            let got = identify_constellation(&pts, 1e-9, 11).unwrap();
            assert_eq!(got, expect, "alphabet {m}");
        }
        assert!(identify_constellation(&vec![Complex64::new(1.0, 0.0); 99], 1e-9, 11).is_err());
    }

    #[test]
    fn identify_handles_noise_at_13p8() {
        let var = 10.0f64.powf(-1.38);
        for (seed, m, expect) in [
            (48u64, Modulation::Qpsk, SymbolClass::Card4),
            (49, Modulation::Qam16, SymbolClass::Qam16),
            (50, Modulation::Qam32, SymbolClass::Qam32),
        ] {
            let mut r = rng(seed);
            let cons = Constellation::new(m);
            let pts: Vec<Complex64> = (0..grid::NUM_LIVE_NON_PILOT)
                .map(|_| random_point(&cons, &mut r) + dsp::awgn(&mut r, var))
                .collect();
            let got = identify_constellation(&pts, var, 13).unwrap();
            assert_eq!(got, expect, "alphabet {m} at 13.8 dB");
        }
    }

    #[test]
    fn identify_flags_composite_mixture() {
        let var = 10.0f64.powf(-1.5); // 15 dB
        let qpsk = Constellation::new(Modulation::Qpsk);
        let qam16 = Constellation::new(Modulation::Qam16);
        let mut composite_hits = 0;
        for t in 0..40 {
            let mut r = rng(900 + t);
            let mut pts = Vec::with_capacity(grid::NUM_LIVE_NON_PILOT);
            for j in 0..grid::NUM_LIVE_NON_PILOT {
                let cons = if j % 2 == 0 { &qpsk } else { &qam16 };
                pts.push(random_point(cons, &mut r) + dsp::awgn(&mut r, var));
            }
            if identify_constellation(&pts, var, 20 + t).unwrap() == SymbolClass::Composite {
                composite_hits += 1;
            }
        }
        assert!(composite_hits >= 38, "only {composite_hits}/40 mixtures flagged");

        let mut pure_hits = 0;
        for t in 0..20 {
            let mut r = rng(1400 + t);
            let pts: Vec<Complex64> = (0..grid::NUM_LIVE_NON_PILOT)
                .map(|_| random_point(&qam16, &mut r) + dsp::awgn(&mut r, var))
                .collect();
            if identify_constellation(&pts, var, 60 + t).unwrap() == SymbolClass::Qam16 {
                pure_hits += 1;
            }
        }
        assert!(pure_hits >= 19, "only {pure_hits}/20 pure columns identified");
    }

    /// Observations with unknown data everywhere except a 16-bin known
    /// lattice, at phase `phi` and start-time offset `tau`.
    fn ml_column(
        phi: f64,
        tau: f64,
        var: f64,
        seed: u64,
    ) -> (Vec<MlObs>, Vec<Complex64>) {
        let mut r = rng(seed);
        let qpsk = Constellation::new(Modulation::Qpsk);
        let pilot = Constellation::new(Modulation::Qam4);
        let inv = 1.0 / var;
        let mut obs = Vec::with_capacity(NUM_LIVE);
        let mut sent = Vec::with_capacity(NUM_LIVE);
        for k in grid::LIVE {
            let d = grid::offset_unchecked(k);
            let known = grid::is_pilot(k);
            let c = if known { random_point(&pilot, &mut r) } else { random_point(&qpsk, &mut r) };
            let s = -2.0 * PI * d as f64 * SUBCARRIER_SPACING;
            let y = c * Complex64::from_polar(1.0, phi + s * tau)
                + if var > 1e-30 { dsp::awgn(&mut r, var) } else { Complex64::new(0.0, 0.0) };
            obs.push(MlObs { d, y, known: if known { Some(c) } else { None }, inv_noise: inv });
            sent.push(c);
        }
        (obs, sent)
    }

    #[test]
    fn symbol_ml_exact_phase_and_pilot_anchor() {
        let qpsk = Constellation::new(Modulation::Qpsk);
        let (obs, _) = ml_column(0.3, 0.0, 1e-12, 51);
        let fit = per_symbol_ml(&obs, qpsk.points(), 0.0, 0.25).unwrap();
        assert!(fit.converged);
        assert!((fit.phi - 0.3).abs() < 1e-6, "phi {}", fit.phi);
        assert!(fit.tau.abs() < 1e-13, "tau {:.3e}", fit.tau);

        // A quarter-turn away the unknown data fits just as well, but the
        // known bins do not: that mode scores strictly worse.
        let fit2 = per_symbol_ml(&obs, qpsk.points(), 0.0, 0.3 + PI / 2.0).unwrap();
        assert!(wrap_pi(fit2.phi - 0.3 - PI / 2.0).abs() < 0.05, "phi2 {}", fit2.phi);
        assert!(
            fit2.log_likelihood < fit.log_likelihood - 1.0,
            "quarter-turn mode not penalized: {} vs {}",
            fit2.log_likelihood,
            fit.log_likelihood
        );

        assert!(per_symbol_ml(&[], qpsk.points(), 0.0, 0.0).is_err());
    }

    #[test]
    fn symbol_ml_recovers_group_delay() {
        let qpsk = Constellation::new(Modulation::Qpsk);
        let tau = 2e-9;
        let (obs, _) = ml_column(0.7, tau, 1e-30, 52);
        let fit = per_symbol_ml(&obs, qpsk.points(), 1.8e-9, 0.6).unwrap();
        assert!(fit.converged);
        assert!((fit.tau - tau).abs() < 1e-13, "noiseless tau err {:.3e}", fit.tau - tau);
        assert!(wrap_pi(fit.phi - 0.7).abs() < 1e-9);

        let (obs, _) = ml_column(0.7, tau, 10.0f64.powf(-1.38), 53);
        let fit = per_symbol_ml(&obs, qpsk.points(), 1.8e-9, 0.6).unwrap();
        assert!(fit.converged);
        assert!((fit.tau - tau).abs() < 5e-11, "noisy tau err {:.3e}", fit.tau - tau);
    }

    #[test]
    fn symbol_ml_variance_near_bound_at_10db() {
        let qpsk = Constellation::new(Modulation::Qpsk);
        let var = 0.1;
        let tau = 5e-10;
        let mut tau_hats = Vec::new();
        for t in 0..150 {
            let (obs, _) = ml_column(0.2, tau, var, 2000 + t);
            // Initialize the way the pipeline does: predicted delay, then
            // the known bins vote on the phase.
            let mut anchor = Complex64::new(0.0, 0.0);
            for o in &obs {
                if let Some(c) = o.known {
                    anchor += o.y * c.conj();
                }
            }
            let fit = per_symbol_ml(&obs, qpsk.points(), 0.0, anchor.arg()).unwrap();
            assert!(fit.converged);
            tau_hats.push(fit.tau);
        }
        let n = tau_hats.len() as f64;
        let mean = tau_hats.iter().sum::<f64>() / n;
        let var_hat = tau_hats.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0);

        // Known-symbol bound for the same grid (all |c| = 1).
        let inv = 1.0 / var;
        let (mut i_tt, mut i_tp, mut i_pp) = (0.0, 0.0, 0.0);
        for k in grid::LIVE {
            let s = -2.0 * PI * grid::offset_unchecked(k) as f64 * SUBCARRIER_SPACING;
            i_tt += 2.0 * inv * s * s;
            i_tp += 2.0 * inv * s;
            i_pp += 2.0 * inv;
        }
        let bound = i_pp / (i_tt * i_pp - i_tp * i_tp);
        let ratio = var_hat / bound;
        assert!(
            (0.5..2.0).contains(&ratio),
            "variance ratio {ratio:.3} (var {var_hat:.3e}, bound {bound:.3e})"
        );
        assert!((mean - tau).abs() < 4.0 * (var_hat / n).sqrt(), "biased: {:.3e}", mean - tau);
    }

    #[test]
    fn joint_fit_recovers_injected_rates() {
        let fc = FC;
        let (beta_s, beta_c, tau0, phi0) = (2e-7, 1e-7, 0.8e-9, 2.9);
        let entries: Vec<PerSymbolEstimate> = (1..NSF)
            .map(|i| PerSymbolEstimate {
                i,
                tau: tau0 + i as f64 * SYMBOL_PERIOD * beta_s,
                phi: wrap_pi(phi0 - 2.0 * PI * i as f64 * SYMBOL_PERIOD * fc * beta_c),
            })
            .collect();
        let fit = joint_fit(&entries, fc).unwrap();
        assert!((fit.dbeta_s - beta_s).abs() < 1e-13, "beta_s err {:.3e}", fit.dbeta_s - beta_s);
        assert!((fit.dbeta_c - beta_c).abs() < 1e-13, "beta_c err {:.3e}", fit.dbeta_c - beta_c);
        assert!((fit.tau_m0 - tau0).abs() < 1e-15);
        assert!(wrap_pi(fit.phi_m0 - phi0).abs() < 1e-9);

        // Rates outside the coarse-sync regime are a numeric failure…
        let wild: Vec<PerSymbolEstimate> = (1..NSF)
            .map(|i| PerSymbolEstimate {
                i,
                tau: i as f64 * SYMBOL_PERIOD * 5e-5,
                phi: 0.0,
            })
            .collect();
        assert!(joint_fit(&wild, fc).is_err());
        // …and a single point cannot define the lines.
        assert!(joint_fit(&entries[..1], fc).is_err());
        let mut bad = entries.clone();
        bad.swap(10, 11);
        assert!(joint_fit(&bad, fc).is_err());
    }

    #[test]
    fn joint_fit_bridges_gapped_segments() {
        let fc = FC;
        let (beta_c, phi0) = (8e-7, -1.2); // ≈0.26 rad/slot, ≈13 rad across the gap
        let entries: Vec<PerSymbolEstimate> = (1..NSF)
            .filter(|&i| !(151..=200).contains(&i))
            .map(|i| PerSymbolEstimate {
                i,
                tau: 1e-9,
                phi: wrap_pi(phi0 - 2.0 * PI * i as f64 * SYMBOL_PERIOD * fc * beta_c),
            })
            .collect();
        let fit = joint_fit(&entries, fc).unwrap();
        assert!(
            (fit.dbeta_c - beta_c).abs() < 1e-13,
            "gap bridge err {:.3e}",
            fit.dbeta_c - beta_c
        );
        assert!(wrap_pi(fit.phi_m0 - phi0).abs() < 1e-9);
    }

    #[test]
    fn compensate_inverts_modeled_ramp() {
        let mut r = rng(54);
        let qpsk = Constellation::new(Modulation::Qpsk);
        let sync = SyncEstimate {
            phi_m0: 0.9,
            dbeta_c: 3e-7,
            tau_m0: 1.3e-9,
            dbeta_s: -2e-7,
            fc: FC,
            per_symbol: Vec::new(),
        };
        let mut x = SymbolMatrix::zeros(NSF);
        let mut y = SymbolMatrix::zeros(NSF);
        for i in 1..NSF {
            let tau = sync.tau_at(i);
            let rot = Complex64::from_polar(1.0, sync.phi_at(i));
            for k in grid::LIVE {
                let d = grid::offset_unchecked(k);
                x[(i, k)] = random_point(&qpsk, &mut r);
                y[(i, k)] = x[(i, k)] * rot * delay_phasor(d, tau);
            }
        }
        let comp = compensate(&y, &sync);
        let mut worst = 0.0f64;
        for i in 1..NSF {
            for k in grid::LIVE {
                worst = worst.max((comp[(i, k)] - x[(i, k)]).norm());
            }
        }
        assert!(worst < 1e-9, "compensation error {worst:.3e}");

        let back = compensate(&comp, &sync.negated());
        let mut worst = 0.0f64;
        for i in 1..NSF {
            for k in grid::LIVE {
                worst = worst.max((back[(i, k)] - y[(i, k)]).norm());
            }
        }
        assert!(worst < 1e-12, "negated round trip error {worst:.3e}");
    }

    #[test]
    fn labels_follow_rotation_chain() {
        let mut r = rng(55);
        let schedule =
            [Modulation::Qpsk, Modulation::Qam4, Modulation::Qam16, Modulation::Qam32];
        let mut comp = SymbolMatrix::zeros(NSF);
        for k in grid::LIVE {
            comp[(1, k)] = random_point(&Constellation::new(Modulation::Qpsk), &mut r);
        }
        let mut classes = Vec::new();
        for i in grid::DATA_SYMBOLS {
            let m = schedule[(i - 2) % schedule.len()];
            let cons = Constellation::new(m);
            let rot = Complex64::from_polar(1.0, 0.02 * i as f64); // slow residual
            for k in grid::LIVE {
                comp[(i, k)] = random_point(&cons, &mut r) * rot;
            }
            classes.push((
                i,
                match m {
                    Modulation::Qpsk | Modulation::Qam4 => SymbolClass::Card4,
                    Modulation::Qam16 => SymbolClass::Qam16,
                    Modulation::Qam32 => SymbolClass::Qam32,
                },
            ));
        }
        comp.row_mut(1)
            .iter_mut()
            .for_each(|v| *v *= Complex64::from_polar(1.0, 0.02));
        let labels = resolve_labels(&comp, &classes, &[]).unwrap();
        for (j, &(i, m)) in labels.iter().enumerate() {
            assert_eq!(i, j + 2);
            assert_eq!(m, schedule[(i - 2) % schedule.len()], "slot {i}");
        }

        // A global quarter turn is invisible to fourth powers: same labels.
        let mut rotated = comp.clone();
        for i in 1..NSF {
            for k in grid::LIVE {
                rotated[(i, k)] *= Complex64::new(0.0, 1.0);
            }
        }
        assert_eq!(resolve_labels(&rotated, &classes, &[]).unwrap(), labels);
    }

    #[test]
    fn decode_is_idempotent_and_exact() {
        let mut r = rng(56);
        let pm = PilotCodebook::builtin().pilot_matrix();
        let schedule = [Modulation::Qam16, Modulation::Qpsk, Modulation::Qam4];
        let mut x = SymbolMatrix::zeros(NSF);
        let mut labels = vec![(1usize, Modulation::Qpsk)];
        for k in grid::LIVE {
            x[(1, k)] = random_point(&Constellation::new(Modulation::Qpsk), &mut r);
        }
        for i in grid::DATA_SYMBOLS {
            let m = schedule[(i - 2) % schedule.len()];
            let cons = Constellation::new(m);
            for k in grid::LIVE {
                x[(i, k)] = match grid::pilot_rank(k) {
                    Some(rank) => pm[rank][i - 2],
                    None => random_point(&cons, &mut r),
                };
            }
            labels.push((i, m));
        }
        let masked = vec![700usize];
        let decoded = hard_decode(&x, &labels, &masked).unwrap();
        for i in 1..NSF {
            for k in grid::LIVE {
                if k == 700 {
                    assert_eq!(decoded[(i, k)], Complex64::new(0.0, 0.0));
                } else {
                    assert_eq!(decoded[(i, k)], x[(i, k)], "slot {i} subcarrier {k}");
                }
            }
        }
        let again = hard_decode(&decoded, &labels, &masked).unwrap();
        for i in 0..NSF {
            for k in 0..NS {
                assert_eq!(again[(i, k)], decoded[(i, k)]);
            }
        }
        assert!(hard_decode(&x, &[(0, Modulation::Qpsk)], &[]).is_err());
    }

    #[test]
    fn demod_frame_identity_roundtrip() {
        let schedule =
            [Modulation::Qpsk, Modulation::Qam4, Modulation::Qam16, Modulation::Qam32];
        let x = build_frame_matrix(&schedule, 57);
        let time = synth_frame(&x, &sequences::default_pss()).unwrap();
        let sss = sequences::default_sss();
        let mut channel = ChannelEstimator::new(&sss).unwrap();
        let cfg = DemodConfig::new(FC);
        let frame = demod_frame(&time, &sss, &PilotCodebook::builtin(), &mut channel, &cfg)
            .unwrap();

        assert!(frame.masked.is_empty());
        assert_eq!(frame.labels.len(), NSF - 1, "dropped: {:?}", frame.dropped());
        assert_eq!(frame.labels[0], (1, Modulation::Qpsk));
        for &(i, m) in &frame.labels[1..] {
            assert_eq!(m, schedule[(i - 2) % schedule.len()], "slot {i}");
        }
        let mut errors = 0usize;
        for i in 1..NSF {
            for k in grid::LIVE {
                if frame.x_hat[(i, k)] != x[(i, k)] {
                    errors += 1;
                }
            }
        }
        assert_eq!(errors, 0, "symbol errors in a clean loopback");
        assert!(frame.sync.dbeta_c.abs() < 1e-9, "dbeta_c {:.3e}", frame.sync.dbeta_c);
        assert!(frame.sync.dbeta_s.abs() < 1e-9, "dbeta_s {:.3e}", frame.sync.dbeta_s);
        assert!(frame.sync.tau_m0.abs() < 1e-12, "tau_m0 {:.3e}", frame.sync.tau_m0);
        assert!(frame.snr_pre_db > 60.0, "noiseless SNR reported {}", frame.snr_pre_db);
    }

    #[test]
    fn demod_frame_tracks_impairments_at_13p8() {
        let fc = FC;
        let schedule = [Modulation::Qpsk, Modulation::Qam4];
        let x = build_frame_matrix(&schedule, 58);
        let time = synth_frame(&x, &sequences::default_pss()).unwrap();
        let imp = FrameImpairment {
            beta_s: 1e-6,
            beta_c: 1e-6,
            delay: 0.9e-9,
            phase: 1.1,
            amplitude: 0.9,
            fc,
        };
        let interp = SincInterpolator::new();
        let rx = apply_impairment(&time, &[Complex64::new(1.0, 0.0)], &imp, &interp).unwrap();
        let mut samples = rx[..NSF * SYMBOL_LEN].to_vec();
        let sig = samples.iter().map(|s| s.norm_sqr()).sum::<f64>() / samples.len() as f64;
        let var = sig * 10.0f64.powf(-1.38);
        let mut r = rng(59);
        for s in samples.iter_mut() {
            *s += dsp::awgn(&mut r, var);
        }

        let sss = sequences::default_sss();
        let mut channel = ChannelEstimator::new(&sss).unwrap();
        let cfg = DemodConfig::new(fc);
        let frame =
            demod_frame(&samples, &sss, &PilotCodebook::builtin(), &mut channel, &cfg).unwrap();

        assert_eq!(frame.labels.len(), NSF - 1, "dropped: {:?}", frame.dropped());
        for &(i, m) in &frame.labels[1..] {
            assert_eq!(m, schedule[(i - 2) % schedule.len()], "slot {i}");
        }
        // Residual carrier rate to 1e-8, start time to 0.1 ns.
        assert!(
            (frame.sync.dbeta_c - imp.beta_c).abs() < 1e-8,
            "dbeta_c err {:.3e}",
            frame.sync.dbeta_c - imp.beta_c
        );
        let tau_truth = imp.delay / (1.0 - imp.beta_s);
        assert!(
            (frame.sync.tau_m0 - tau_truth).abs() < 1e-10,
            "tau_m0 err {:.3e}",
            frame.sync.tau_m0 - tau_truth
        );
        // The sample-rate residual is noise-limited: the per-symbol delay
        // ramp fit lands within a few parts in 1e10 at this seed.
        assert!(
            (frame.sync.dbeta_s - imp.beta_s).abs() < 2e-9,
            "dbeta_s err {:.3e}",
            frame.sync.dbeta_s - imp.beta_s
        );
        // Data-cell symbol error rate over the non-pilot subcarriers.
        let mut cells = 0usize;
        let mut errors = 0usize;
        for i in grid::DATA_SYMBOLS {
            for k in grid::non_pilot_subcarriers() {
                cells += 1;
                if frame.x_hat[(i, k)] != x[(i, k)] {
                    errors += 1;
                }
            }
        }
        let ser = errors as f64 / cells as f64;
        assert!(ser < 1e-3, "symbol error rate {ser:.2e} ({errors}/{cells})");
        assert!(
            (frame.snr_pre_db - 13.8).abs() < 0.7,
            "reported SNR {:.2} dB",
            frame.snr_pre_db
        );
    }

    /// Equalized frame following the tied-rate residual model exactly.
    fn alt_frame(
        dbeta: f64,
        phi0: f64,
        tau_anchor: f64,
        var: f64,
        cfg: &AltSyncConfig,
        seed: u64,
    ) -> Equalized {
        let mut r = rng(seed);
        let qpsk = Constellation::new(Modulation::Qpsk);
        let pm = PilotCodebook::builtin().pilot_matrix();
        let mut y = SymbolMatrix::zeros(NSF);
        for i in grid::DATA_SYMBOLS {
            for k in grid::LIVE {
                let d = grid::offset_unchecked(k);
                let c = match grid::pilot_rank(k) {
                    Some(rank) => pm[rank][i - 2],
                    None => random_point(&qpsk, &mut r),
                };
                let psi = phi0 + cfg.rate_gain(i, d) * dbeta;
                y[(i, k)] = c * Complex64::from_polar(1.0, psi) * delay_phasor(d, tau_anchor)
                    + if var > 1e-30 { dsp::awgn(&mut r, var) } else { Complex64::new(0.0, 0.0) };
            }
        }
        Equalized { y, masked: Vec::new() }
    }

    #[test]
    fn alt_sync_matches_injected_residual() {
        let mut cfg = AltSyncConfig::new(FC);
        cfg.tau_anchor = 1e-9;

        // Noisy: 14 dB, 5e-8 residual, slot-1 phase consistent with the
        // equalizer having pinned it to zero.
        let dbeta = 5e-8;
        let phi0 = -cfg.rate_gain(1, 0) * dbeta;
        let var = 10.0f64.powf(-1.4);
        let eq = alt_frame(dbeta, phi0, cfg.tau_anchor, var, &cfg, 60);
        let est = alt_residual_sync(&eq, var, &cfg).unwrap();
        assert!(est.converged);
        assert!((est.dbeta_c - dbeta).abs() < 5e-10, "dbeta err {:.3e}", est.dbeta_c - dbeta);
        assert!(wrap_pi(est.phi_m0 - phi0).abs() < 1e-2, "phi {} vs {phi0}", est.phi_m0);

        // Noiseless null case.
        let eq = alt_frame(0.0, 0.0, cfg.tau_anchor, 0.0, &cfg, 61);
        let est = alt_residual_sync(&eq, 1e-9, &cfg).unwrap();
        assert!(est.converged);
        assert!(est.dbeta_c.abs() < 1e-12, "null dbeta {:.3e}", est.dbeta_c);
        assert!(wrap_pi(est.phi_m0).abs() < 1e-6);

        // A residual outside the scan range must be reported, not absorbed.
        let eq = alt_frame(5e-6, 0.0, cfg.tau_anchor, 0.0, &cfg, 62);
        let err = alt_residual_sync(&eq, 1e-9, &cfg).unwrap_err();
        assert!(err.to_string().contains("scan"), "unexpected error: {err}");
    }

    #[test]
    fn alt_sync_agrees_with_standard_path() {
        let fc = FC;
        let x = build_frame_matrix(&[Modulation::Qpsk], 63);
        let time = synth_frame(&x, &sequences::default_pss()).unwrap();
        let beta = 2e-7; // one oscillator feeds both clocks
        let imp = FrameImpairment {
            beta_s: beta,
            beta_c: beta,
            delay: 0.0,
            phase: 0.4,
            amplitude: 1.0,
            fc,
        };
        let interp = SincInterpolator::new();
        let rx = apply_impairment(&time, &[Complex64::new(1.0, 0.0)], &imp, &interp).unwrap();
        let samples = &rx[..NSF * SYMBOL_LEN];

        let sss = sequences::default_sss();
        let mut channel = ChannelEstimator::new(&sss).unwrap();
        let cfg = DemodConfig::new(fc);
        let frame =
            demod_frame(samples, &sss, &PilotCodebook::builtin(), &mut channel, &cfg).unwrap();

        let bar = ofdm_demod(samples).unwrap();
        let mut channel2 = ChannelEstimator::new(&sss).unwrap();
        channel2.add_frame(bar.row(1)).unwrap();
        let state = channel2.equalizer_for(bar.row(1)).unwrap();
        let eq = equalize(&bar, &state, DEFAULT_EQ_FLOOR).unwrap();
        let mut alt_cfg = AltSyncConfig::new(fc);
        alt_cfg.tau_anchor = state.tau_m1_hat;
        let noise = gutter_noise_power(&bar);
        let est = alt_residual_sync(&eq, noise, &alt_cfg).unwrap();

        assert!(est.converged);
        assert!(
            (est.dbeta_c - frame.sync.dbeta_c).abs() < 1e-9,
            "paths disagree: alt {:.3e} vs standard {:.3e}",
            est.dbeta_c,
            frame.sync.dbeta_c
        );
        assert!((est.dbeta_c - beta).abs() < 1e-9, "alt err {:.3e}", est.dbeta_c - beta);
    }

}
