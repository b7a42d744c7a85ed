//! Post-correlation gain accounting and delay-estimation bounds.
//!
//! Correlating a capture against a local replica multiplies the usable SNR by
//! a processing gain `L = SNR_post / SNR_pre` that depends on how much of the
//! frame the replica knows and how well it knows it.  This module provides
//! that arithmetic in three forms — closed form ([`processing_gain`]),
//! Monte-Carlo ([`empirical_gain`]), and a per-frame budget built from the
//! sync sequences, edge pilots, and recovered T-code region
//! ([`frame_gain_estimate`]) — plus the delay-estimation error bounds the
//! gain feeds into.
//!
//! The bounds side models a replica as a comb of subcarrier tones with
//! per-tone energy weights ([`ReplicaSpectrum`]) and evaluates two standard
//! bounds on time-of-arrival RMSE: the small-error bound
//! `var >= 1 / ((2*pi*B_ms)^2 * SNR_post)` ([`crb_toa`], with `B_ms` the
//! RMS bandwidth about the spectral centroid) and a threshold-aware bound
//! built from the replica autocorrelation with valley filling over a uniform
//! prior window ([`zzb_toa`]).  The threshold bound converges to the
//! small-error bound once the post-correlation SNR is high enough to resolve
//! the correlation mainlobe, and rises sharply below the ambiguity threshold;
//! [`knee_snr_db`] locates that departure point on a computed curve.

use num_complex::Complex64;
use rand::Rng;
use statrs::function::erf::erfc;

use crate::constellation::{Constellation, Modulation};
use crate::error::{Error, Result};
use crate::grid;
use crate::matrix::SymbolMatrix;

/// Converts a linear power ratio to decibels.
pub fn to_db(linear: f64) -> f64 {
    10.0 * linear.log10()
}

/// Converts decibels to a linear power ratio.
pub fn from_db(db: f64) -> f64 {
    10.0_f64.powf(db / 10.0)
}

/// Upper-tail probability of the standard normal distribution.
fn gaussian_tail(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// Coherent-integration gain `L = 1 + (N - 1) * |mu|^2` (linear) for a
/// replica of `n` unit-modulus symbols whose per-symbol correlation with the
/// transmitted content has magnitude `mu`.
///
/// `mu = 1` recovers the fully known case `L = N`; `mu = 0` leaves the
/// correlator no better than a single-sample detector (`L = 1`).  `n` may be
/// fractional because budget averages over a corpus need not be integers.
pub fn processing_gain(n: f64, mu: f64) -> Result<f64> {
    if !n.is_finite() || n < 1.0 {
        return Err(Error::domain(format!(
            "replica length must be at least 1 symbol, got {n}"
        )));
    }
    if !mu.is_finite() || !(0.0..=1.0).contains(&mu) {
        return Err(Error::domain(format!(
            "correlation magnitude must lie in [0, 1], got {mu}"
        )));
    }
    Ok(1.0 + (n - 1.0) * mu * mu)
}

/// How the Monte-Carlo replica in [`empirical_gain`] relates to the
/// transmitted symbols.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReplicaPolicy {
    /// Replica equals the transmitted symbols exactly (`mu = 1`).
    Known,
    /// Replica drawn independently of the transmitted symbols (`mu = 0`).
    Independent,
    /// Replica equals the transmitted symbols with each one's sign flipped
    /// independently with the given probability `p`, so `mu = |1 - 2p|`.
    SignFlipped(f64),
}

/// Minimum trial count for [`empirical_gain`]; fewer trials cannot resolve
/// gains to the fraction-of-a-dB level the estimate is quoted at.
pub const MIN_GAIN_TRIALS: usize = 10_000;

/// Monte-Carlo estimate of the processing gain `SNR_post / SNR_pre` (linear).
///
/// Each trial draws `n` QPSK symbols `x`, a replica `l` per `policy`, and
/// complex white noise at the given pre-correlation SNR, then accumulates the
/// signal and noise parts of the correlation sum `S = sum conj(r) * l`
/// separately.  The returned ratio estimates `E|S_x|^2 / E|S_n|^2`, referred
/// back to the per-sample SNR.
pub fn empirical_gain(
    n: usize,
    policy: ReplicaPolicy,
    snr_pre: f64,
    trials: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::domain("replica length must be at least 1 symbol"));
    }
    if !snr_pre.is_finite() || snr_pre <= 0.0 {
        return Err(Error::domain(format!(
            "pre-correlation SNR must be positive, got {snr_pre}"
        )));
    }
    if trials < MIN_GAIN_TRIALS {
        return Err(Error::domain(format!(
            "need at least {MIN_GAIN_TRIALS} trials for a dB-level estimate, got {trials}"
        )));
    }
    if let ReplicaPolicy::SignFlipped(p) = policy {
        if !p.is_finite() || !(0.0..=1.0).contains(&p) {
            return Err(Error::domain(format!(
                "flip probability must lie in [0, 1], got {p}"
            )));
        }
    }

    let points = Constellation::new(Modulation::Qpsk);
    let points = points.points();
    let noise_var = 1.0 / snr_pre;
    let mut signal_power = 0.0;
    let mut noise_power = 0.0;
    for _ in 0..trials {
        let mut s_x = Complex64::default();
        let mut s_n = Complex64::default();
        for _ in 0..n {
            let x = points[rng.gen_range(0..points.len())];
            let l = match policy {
                ReplicaPolicy::Known => x,
                ReplicaPolicy::Independent => points[rng.gen_range(0..points.len())],
                ReplicaPolicy::SignFlipped(p) => {
                    if rng.gen::<f64>() < p {
                        -x
                    } else {
                        x
                    }
                }
            };
            s_x += x.conj() * l;
            s_n += crate::dsp::awgn(rng, noise_var).conj() * l;
        }
        signal_power += s_x.norm_sqr();
        noise_power += s_n.norm_sqr();
    }
    Ok(signal_power / noise_power / snr_pre)
}

/// Chip-decision error rate and resulting replica correlation for T-code
/// content recovered by majority vote over `stacking` independent cells.
///
/// A chip stacked over `M` cells at pre-correlation SNR `snr` is decided
/// wrongly with probability `p_e = erfc(sqrt(M * snr)) / 2`; a replica built
/// from such decisions correlates with the true content at
/// `mu = |1 - 2 * p_e|`.  Returns `(p_e, mu)`.
pub fn tcode_error_rate(stacking: f64, snr_pre: f64) -> Result<(f64, f64)> {
    if !stacking.is_finite() || stacking < 1.0 {
        return Err(Error::domain(format!(
            "stacking depth must be at least 1, got {stacking}"
        )));
    }
    if !snr_pre.is_finite() || snr_pre <= 0.0 {
        return Err(Error::domain(format!(
            "pre-correlation SNR must be positive, got {snr_pre}"
        )));
    }
    let p_e = 0.5 * erfc((stacking * snr_pre).sqrt());
    Ok((p_e, (1.0 - 2.0 * p_e).abs()))
}

/// Per-frame inventory of replica-usable content, averaged over a corpus.
///
/// Counts are in resource cells (or time samples for the contiguous sync
/// sequences, which are known bit-for-bit including their cyclic prefixes).
/// The header region is treated as unknown and contributes nothing; cyclic
/// prefixes outside the sync sequences are conservatively ignored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameKnowledge {
    /// Time samples with fully known content: both sync symbols with their
    /// cyclic prefixes.
    pub known_samples: f64,
    /// Frame-invariant pilot cells: 16 subcarriers over every data symbol.
    pub pilot_cells: f64,
    /// Mean code-bearing cells per frame (tiled columns times live non-pilot
    /// subcarriers).
    pub tcode_cells: f64,
    /// Mean stacking depth per code chip available when the code was
    /// recovered (cells per chip).
    pub stacking: f64,
}

impl FrameKnowledge {
    /// Budget using only the sync sequences and edge pilots.
    pub fn sync_and_pilots() -> Self {
        FrameKnowledge {
            known_samples: (2 * grid::SYMBOL_LEN) as f64,
            pilot_cells: (grid::NUM_PILOTS * grid::NUM_DATA_SYMBOLS) as f64,
            tcode_cells: 0.0,
            stacking: 1.0,
        }
    }

    /// Budget averaged over a corpus whose per-frame T-code regions covered
    /// the given numbers of OFDM symbols.
    pub fn with_tcode_columns(columns: &[usize]) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::domain(
                "cannot build a frame budget from an empty corpus",
            ));
        }
        if let Some(&bad) = columns.iter().find(|&&c| c > grid::NUM_DATA_SYMBOLS) {
            return Err(Error::domain(format!(
                "a frame has only {} data symbols, got a T-code region of {bad}",
                grid::NUM_DATA_SYMBOLS
            )));
        }
        let mean_cols =
            columns.iter().map(|&c| c as f64).sum::<f64>() / columns.len() as f64;
        let cells_per_column = grid::NUM_LIVE_NON_PILOT as f64;
        Ok(FrameKnowledge {
            tcode_cells: mean_cols * cells_per_column,
            stacking: (mean_cols * cells_per_column / 60.0).max(1.0),
            ..FrameKnowledge::sync_and_pilots()
        })
    }
}

/// Output of [`frame_gain_estimate`]: the averaged budget folded into a
/// single coherent-integration gain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameGain {
    /// Total replica-usable cells per frame.
    pub n_bar: f64,
    /// Budget-weighted mean replica correlation.
    pub mu_bar: f64,
    /// Correlation of the recovered code region alone.
    pub mu_code: f64,
    /// Chip-decision error rate behind `mu_code`.
    pub chip_error_rate: f64,
    /// Resulting processing gain, linear.
    pub gain: f64,
}

/// Folds a frame-knowledge budget into an expected processing gain at the
/// given pre-correlation SNR (linear).
///
/// Sync samples and pilot cells correlate perfectly; code cells correlate at
/// the `mu` returned by [`tcode_error_rate`] for the budget's stacking depth.
/// The combined gain is `1 + (N_bar - 1) * mu_bar^2` with `mu_bar` the
/// cell-weighted average correlation.  Note that near-zero code correlation
/// drags the gain below the pilots-only figure: keeping dead cells in the
/// replica costs noise without adding coherent signal.
pub fn frame_gain_estimate(budget: &FrameKnowledge, snr_pre: f64) -> Result<FrameGain> {
    for (name, v) in [
        ("known_samples", budget.known_samples),
        ("pilot_cells", budget.pilot_cells),
        ("tcode_cells", budget.tcode_cells),
    ] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::domain(format!(
                "budget field {name} must be finite and nonnegative, got {v}"
            )));
        }
    }
    let (chip_error_rate, mu_code) = if budget.tcode_cells > 0.0 {
        tcode_error_rate(budget.stacking, snr_pre)?
    } else {
        if !snr_pre.is_finite() || snr_pre <= 0.0 {
            return Err(Error::domain(format!(
                "pre-correlation SNR must be positive, got {snr_pre}"
            )));
        }
        (0.0, 1.0)
    };
    let n_bar = budget.known_samples + budget.pilot_cells + budget.tcode_cells;
    if n_bar < 1.0 {
        return Err(Error::domain("frame budget holds no usable content"));
    }
    let mu_bar =
        (budget.known_samples + budget.pilot_cells + budget.tcode_cells * mu_code) / n_bar;
    Ok(FrameGain {
        n_bar,
        mu_bar,
        mu_code,
        chip_error_rate,
        gain: processing_gain(n_bar, mu_bar)?,
    })
}

/// Which parts of the frame a correlation replica includes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplicaKind {
    /// Both sync sequences only.
    PssSss,
    /// Sync sequences plus the edge pilots.
    PssSssEp,
    /// Sync sequences, edge pilots, and a learned template/T-code region.
    Lee,
    /// The entire frame known.
    Full,
}

impl ReplicaKind {
    /// Stable command-line / CSV label.
    pub fn label(self) -> &'static str {
        match self {
            ReplicaKind::PssSss => "pss-sss",
            ReplicaKind::PssSssEp => "pss-sss-ep",
            ReplicaKind::Lee => "lee",
            ReplicaKind::Full => "full",
        }
    }

    /// Parses a [`label`](Self::label) string.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pss-sss" => Ok(ReplicaKind::PssSss),
            "pss-sss-ep" => Ok(ReplicaKind::PssSssEp),
            "lee" => Ok(ReplicaKind::Lee),
            "full" => Ok(ReplicaKind::Full),
            other => Err(Error::domain(format!(
                "unknown replica kind {other:?}; expected pss-sss, pss-sss-ep, lee, or full"
            ))),
        }
    }
}

impl std::fmt::Display for ReplicaKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Default code-bearing cell count for the [`ReplicaKind::Lee`] replica:
/// the long-run corpus average of about 62.3 tiled columns per frame.
pub const DEFAULT_LEE_TCODE_CELLS: f64 = 62_588.0;

/// One piece of a replica: a set of subcarrier tones whose content repeats
/// its cell budget every `span_s` seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct ToneComponent {
    /// Tone center frequencies relative to channel center, Hz.
    pub freqs_hz: Vec<f64>,
    /// Effective known resource cells carried on each tone.  Certainty is
    /// folded in here: a cell whose content is known with correlation `mu`
    /// counts as `mu^2` of a cell.
    pub cells: Vec<f64>,
    /// Time extent over which the component's content is self-coherent,
    /// seconds — one OFDM symbol for everything on the frame grid, since the
    /// modulation changes symbol to symbol.
    pub span_s: f64,
    /// Capture-coherence group.  Components recorded phase-continuously by
    /// one front end share a segment; across segments (a retuned capture at
    /// a different time) the carrier phase relationship is unknown, so
    /// correlation magnitudes combine noncoherently and cross-segment
    /// spectral separation contributes no delay information.
    pub segment: usize,
}

/// Frequency-domain model of a correlation replica: tone combs with energy
/// weights, from which the integration gain, RMS bandwidth, and
/// autocorrelation envelope follow.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicaSpectrum {
    /// Human-readable label carried into reports.
    pub label: String,
    /// Capture bandwidth the tone set was limited to, Hz.
    pub bandwidth_hz: f64,
    components: Vec<ToneComponent>,
}

/// Self-coherence span of grid content: one OFDM symbol.
fn symbol_span() -> f64 {
    grid::SYMBOL_LEN as f64 / grid::FS
}

/// Live-subcarrier tones that fall inside a capture of the given bandwidth,
/// with a uniform share of `total_cells` on each (the sync sequences and
/// full-frame content spread their energy evenly across the live band).
fn live_comb(bandwidth_hz: f64, total_cells: f64, segment: usize) -> ToneComponent {
    let mut freqs = Vec::new();
    let per_tone = total_cells / grid::NUM_LIVE as f64;
    for k in grid::LIVE {
        let f = grid::offset_unchecked(k) as f64 * grid::SUBCARRIER_SPACING;
        if f.abs() <= bandwidth_hz / 2.0 + 1e-6 {
            freqs.push(f);
        }
    }
    let cells = vec![per_tone; freqs.len()];
    ToneComponent {
        freqs_hz: freqs,
        cells,
        span_s: symbol_span(),
        segment,
    }
}

/// Pilot-band tones (both edges, or one) with every data symbol known.
fn pilot_comb(upper_only: bool, segment: usize) -> ToneComponent {
    let mut freqs = Vec::new();
    for k in grid::pilot_subcarriers() {
        let f = grid::offset_unchecked(k) as f64 * grid::SUBCARRIER_SPACING;
        if !upper_only || f > 0.0 {
            freqs.push(f);
        }
    }
    let cells = vec![grid::NUM_DATA_SYMBOLS as f64; freqs.len()];
    ToneComponent {
        freqs_hz: freqs,
        cells,
        span_s: symbol_span(),
        segment,
    }
}

impl ReplicaSpectrum {
    /// Builds the named replica limited to a capture bandwidth.
    ///
    /// The edge-pilot variant adapts to the front end: a capture wide enough
    /// to span both pilot bands includes them alongside the sync tones in one
    /// phase-continuous segment; a narrower capture models the retuning
    /// scheme — a matched subband of the sync sequences concatenated in time
    /// with a single edge-pilot band, recorded as two segments whose carrier
    /// phases are independent because the front end retunes between them.
    ///
    /// The learned-region variant uses the corpus-average code extent at full
    /// chip confidence; see [`ReplicaSpectrum::lee`] to vary either.
    pub fn new(kind: ReplicaKind, bandwidth_hz: f64) -> Result<Self> {
        match kind {
            ReplicaKind::Lee => ReplicaSpectrum::lee(bandwidth_hz, DEFAULT_LEE_TCODE_CELLS, 1.0),
            _ => ReplicaSpectrum::build(kind, bandwidth_hz, DEFAULT_LEE_TCODE_CELLS, 1.0),
        }
    }

    /// Builds the learned-region replica with an explicit code-bearing cell
    /// count and chip confidence `mu_code` (the chips come from an offline
    /// learning corpus, so their quality is a property of that corpus, not of
    /// the SNR the bound is evaluated at).
    pub fn lee(bandwidth_hz: f64, tcode_cells: f64, mu_code: f64) -> Result<Self> {
        if !tcode_cells.is_finite() || tcode_cells < 0.0 {
            return Err(Error::domain(format!(
                "code cell count must be finite and nonnegative, got {tcode_cells}"
            )));
        }
        if !mu_code.is_finite() || !(0.0..=1.0).contains(&mu_code) {
            return Err(Error::domain(format!(
                "chip confidence must lie in [0, 1], got {mu_code}"
            )));
        }
        ReplicaSpectrum::build(ReplicaKind::Lee, bandwidth_hz, tcode_cells, mu_code)
    }

    fn build(
        kind: ReplicaKind,
        bandwidth_hz: f64,
        tcode_cells: f64,
        mu_code: f64,
    ) -> Result<Self> {
        if !bandwidth_hz.is_finite() || bandwidth_hz <= 0.0 || bandwidth_hz > grid::FS {
            return Err(Error::domain(format!(
                "capture bandwidth must lie in (0, {:.0}] Hz, got {bandwidth_hz}",
                grid::FS
            )));
        }
        let sync_cells = (2 * grid::SYMBOL_LEN) as f64;
        let mut components = Vec::new();
        match kind {
            ReplicaKind::PssSss => {
                components.push(live_comb(bandwidth_hz, sync_cells, 0));
            }
            ReplicaKind::Full => {
                components.push(live_comb(bandwidth_hz, grid::FRAME_LEN as f64, 0));
            }
            ReplicaKind::PssSssEp => {
                components.push(live_comb(bandwidth_hz, sync_cells, 0));
                let max_pilot_hz = grid::pilot_subcarriers()
                    .map(|k| (grid::offset_unchecked(k) as f64 * grid::SUBCARRIER_SPACING).abs())
                    .fold(0.0, f64::max);
                if bandwidth_hz / 2.0 >= max_pilot_hz {
                    components.push(pilot_comb(false, 0));
                } else {
                    let band_span = (grid::NUM_PILOTS / 2 - 1) as f64 * grid::SUBCARRIER_SPACING;
                    if bandwidth_hz < band_span + grid::SUBCARRIER_SPACING {
                        return Err(Error::domain(format!(
                            "capture bandwidth {bandwidth_hz} Hz cannot span an edge-pilot band"
                        )));
                    }
                    components.push(pilot_comb(true, 1));
                }
            }
            ReplicaKind::Lee => {
                components.push(live_comb(bandwidth_hz, sync_cells, 0));
                let max_pilot_hz = grid::pilot_subcarriers()
                    .map(|k| (grid::offset_unchecked(k) as f64 * grid::SUBCARRIER_SPACING).abs())
                    .fold(0.0, f64::max);
                if bandwidth_hz / 2.0 >= max_pilot_hz {
                    components.push(pilot_comb(false, 0));
                }
                if tcode_cells > 0.0 && mu_code > 0.0 {
                    let per_tone = tcode_cells / grid::NUM_LIVE_NON_PILOT as f64;
                    let mut freqs = Vec::new();
                    for k in grid::non_pilot_subcarriers() {
                        let f = grid::offset_unchecked(k) as f64 * grid::SUBCARRIER_SPACING;
                        if f.abs() <= bandwidth_hz / 2.0 + 1e-6 {
                            freqs.push(f);
                        }
                    }
                    let cells = vec![per_tone * mu_code * mu_code; freqs.len()];
                    components.push(ToneComponent {
                        freqs_hz: freqs,
                        cells,
                        span_s: symbol_span(),
                        segment: 0,
                    });
                }
            }
        }
        ReplicaSpectrum::from_components(kind.label(), bandwidth_hz, components)
    }

    /// Builds a replica spectrum from explicit components.
    pub fn from_components(
        label: impl Into<String>,
        bandwidth_hz: f64,
        components: Vec<ToneComponent>,
    ) -> Result<Self> {
        if !bandwidth_hz.is_finite() || bandwidth_hz <= 0.0 || bandwidth_hz > grid::FS {
            return Err(Error::domain(format!(
                "capture bandwidth must lie in (0, {:.0}] Hz, got {bandwidth_hz}",
                grid::FS
            )));
        }
        if components.is_empty() {
            return Err(Error::domain("a replica spectrum needs at least one component"));
        }
        let mut total = 0.0;
        for c in &components {
            if c.freqs_hz.len() != c.cells.len() || c.freqs_hz.is_empty() {
                return Err(Error::domain(
                    "component tone frequencies and cell weights must pair up",
                ));
            }
            if !c.span_s.is_finite() || c.span_s <= 0.0 {
                return Err(Error::domain(format!(
                    "component span must be positive, got {}",
                    c.span_s
                )));
            }
            for (&f, &w) in c.freqs_hz.iter().zip(&c.cells) {
                if !f.is_finite() || !w.is_finite() || w < 0.0 {
                    return Err(Error::domain(
                        "component tones must have finite frequencies and nonnegative weights",
                    ));
                }
                total += w;
            }
        }
        if total <= 0.0 {
            return Err(Error::domain("replica spectrum carries no energy"));
        }
        Ok(ReplicaSpectrum {
            label: label.into(),
            bandwidth_hz,
            components,
        })
    }

    /// Total effective known cells across all tones.
    pub fn effective_cells(&self) -> f64 {
        self.components
            .iter()
            .map(|c| c.cells.iter().sum::<f64>())
            .sum()
    }

    /// Number of tones across all components.
    pub fn tone_count(&self) -> usize {
        self.components.iter().map(|c| c.freqs_hz.len()).sum()
    }

    /// Coherent-integration gain of the replica, linear.
    pub fn processing_gain(&self) -> f64 {
        self.effective_cells().max(1.0)
    }

    /// Energy-weighted spectral centroid, Hz.  Reporting convenience; the
    /// delay bounds use per-segment centroids.
    pub fn centroid_hz(&self) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for c in &self.components {
            for (&f, &w) in c.freqs_hz.iter().zip(&c.cells) {
                num += w * f;
                den += w;
            }
        }
        num / den
    }

    fn segment_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.components.iter().map(|c| c.segment).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Delay-weighing RMS bandwidth, Hz: the energy-weighted spread of tone
    /// frequencies about each capture segment's own centroid.
    ///
    /// Within a segment the capture is phase-continuous, so the full spread
    /// of its tones carries delay information.  Frequency separation between
    /// segments does not: the unknown carrier phase of a retuned capture
    /// absorbs it.
    pub fn rms_bandwidth_hz(&self) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for id in self.segment_ids() {
            let mut w_sum = 0.0;
            let mut f_sum = 0.0;
            for c in self.components.iter().filter(|c| c.segment == id) {
                for (&f, &w) in c.freqs_hz.iter().zip(&c.cells) {
                    w_sum += w;
                    f_sum += w * f;
                }
            }
            if w_sum <= 0.0 {
                continue;
            }
            let centroid = f_sum / w_sum;
            for c in self.components.iter().filter(|c| c.segment == id) {
                for (&f, &w) in c.freqs_hz.iter().zip(&c.cells) {
                    num += w * (f - centroid) * (f - centroid);
                }
            }
            den += w_sum;
        }
        (num / den).sqrt()
    }

    /// Magnitude of the normalized replica autocorrelation at lag
    /// `delta_s` seconds.
    ///
    /// Each component contributes its tone comb rotated to the lag, tapered
    /// by the triangular factor its symbol-length self-coherence imposes
    /// (content changes symbol to symbol, so correlation across more than
    /// one symbol of lag averages out).  Components within one capture
    /// segment sum coherently; segments combine by magnitude, since the
    /// carrier phase between retuned captures is unknown.
    pub fn autocorr_mag(&self, delta_s: f64) -> f64 {
        let mut acc = 0.0;
        let mut total = 0.0;
        for id in self.segment_ids() {
            let mut seg = Complex64::default();
            for c in self.components.iter().filter(|c| c.segment == id) {
                let taper = (1.0 - delta_s.abs() / c.span_s).max(0.0);
                if taper > 0.0 {
                    let mut comb = Complex64::default();
                    for (&f, &w) in c.freqs_hz.iter().zip(&c.cells) {
                        comb +=
                            w * Complex64::from_polar(1.0, std::f64::consts::TAU * f * delta_s);
                    }
                    seg += taper * comb;
                }
                total += c.cells.iter().sum::<f64>();
            }
            acc += seg.norm();
        }
        acc / total
    }
}

/// Default uniform prior window for the threshold bound, seconds: the
/// residual delay uncertainty of a receiver already tracking the frame
/// schedule (a few hundred meters of geometry error).
pub const DEFAULT_PRIOR_WINDOW_S: f64 = 2e-6;

/// Prior window for a receiver with no delay knowledge beyond the frame
/// schedule itself, seconds: one full frame period.
pub const ACQUISITION_PRIOR_WINDOW_S: f64 = grid::FRAME_PERIOD;

/// Largest admissible prior window, seconds.  Delay is only ever defined
/// modulo the frame period, so a wider prior would double-count ambiguity.
pub const MAX_PRIOR_WINDOW_S: f64 = grid::FRAME_PERIOD;

/// Departure-detection slope for [`knee_snr_db`], in decades of RMSE per dB
/// of SNR.  The small-error bound falls at exactly 0.05 decade/dB, so a
/// sustained slope three times that marks the threshold region.
pub const KNEE_SLOPE_THRESHOLD: f64 = 0.15;

const ZZB_GRID_POINTS: usize = 4096;

/// Precomputed machinery for evaluating the delay bounds of one replica over
/// many SNRs: the lag grid, the valley-filled decorrelation profile, and the
/// spectrum's scalar summaries.
#[derive(Debug, Clone)]
pub struct ToaBoundEvaluator {
    gain: f64,
    rms_bandwidth_hz: f64,
    prior_s: f64,
    deltas: Vec<f64>,
    /// `min over lags >= delta of (1 - |r|)`: the least distinguishable the
    /// replica ever becomes at or beyond each lag.  Valley filling of the
    /// two-point error probability reduces to this because that probability
    /// is monotone in the decorrelation.
    decorrelation_floor: Vec<f64>,
}

impl ToaBoundEvaluator {
    /// Builds the evaluator for a replica and a uniform prior window.
    pub fn new(spectrum: &ReplicaSpectrum, prior_window_s: f64) -> Result<Self> {
        if !prior_window_s.is_finite()
            || prior_window_s <= 0.0
            || prior_window_s > MAX_PRIOR_WINDOW_S
        {
            return Err(Error::domain(format!(
                "prior window must lie in (0, {MAX_PRIOR_WINDOW_S}] s, got {prior_window_s}"
            )));
        }
        let rms_bandwidth_hz = spectrum.rms_bandwidth_hz();
        if !(rms_bandwidth_hz > 0.0) {
            return Err(Error::domain(
                "replica spectrum has zero RMS bandwidth; delay bounds are undefined",
            ));
        }
        let lo = prior_window_s * 1e-7;
        let ratio = (prior_window_s / lo).powf(1.0 / (ZZB_GRID_POINTS - 1) as f64);
        let mut deltas = Vec::with_capacity(ZZB_GRID_POINTS);
        let mut d = lo;
        for _ in 0..ZZB_GRID_POINTS {
            deltas.push(d.min(prior_window_s));
            d *= ratio;
        }
        let mut decorrelation_floor: Vec<f64> = deltas
            .iter()
            .map(|&d| (1.0 - spectrum.autocorr_mag(d)).max(0.0))
            .collect();
        for i in (0..decorrelation_floor.len() - 1).rev() {
            decorrelation_floor[i] = decorrelation_floor[i].min(decorrelation_floor[i + 1]);
        }
        Ok(ToaBoundEvaluator {
            gain: spectrum.processing_gain(),
            rms_bandwidth_hz,
            prior_s: prior_window_s,
            deltas,
            decorrelation_floor,
        })
    }

    /// Post-correlation SNR at a given pre-correlation SNR, linear.
    pub fn snr_post(&self, snr_pre: f64) -> f64 {
        self.gain * snr_pre
    }

    /// Small-error RMSE bound, seconds:
    /// `1 / (2 * pi * B_ms * sqrt(SNR_post))`.
    pub fn crb_rmse(&self, snr_pre: f64) -> Result<f64> {
        if !snr_pre.is_finite() || snr_pre <= 0.0 {
            return Err(Error::domain(format!(
                "pre-correlation SNR must be positive, got {snr_pre}"
            )));
        }
        Ok(1.0
            / (std::f64::consts::TAU * self.rms_bandwidth_hz * self.snr_post(snr_pre).sqrt()))
    }

    /// Threshold-aware RMSE bound, seconds, for a delay uniform over the
    /// prior window.
    ///
    /// Integrates the valley-filled two-point error probability
    /// `P(delta) = Q(sqrt(SNR_post * (1 - |r(delta)|) / 2))` weighted by
    /// `delta * (1 - delta / T)` over the window.  The error probability is
    /// paired to the small-error bound's convention so the two coincide once
    /// the mainlobe dominates; the result is floored at [`crb_rmse`] to keep
    /// that ordering under integration error.
    pub fn zzb_rmse(&self, snr_pre: f64) -> Result<f64> {
        let crb = self.crb_rmse(snr_pre)?;
        let post = self.snr_post(snr_pre);
        let weight = |d: f64, p: f64| d * (1.0 - d / self.prior_s) * p;
        let pmin = |floor: f64| 0.5 * erfc(0.5 * (post * floor).sqrt());
        let mut var = 0.0;
        let mut prev_d = self.deltas[0];
        let mut prev_g = weight(prev_d, pmin(self.decorrelation_floor[0]));
        // Head stub below the first grid point: the integrand there is
        // essentially d * P(first floor).
        var += 0.5 * prev_d * prev_d * pmin(self.decorrelation_floor[0]);
        for i in 1..self.deltas.len() {
            let d = self.deltas[i];
            let g = weight(d, pmin(self.decorrelation_floor[i]));
            var += 0.5 * (g + prev_g) * (d - prev_d);
            prev_d = d;
            prev_g = g;
        }
        Ok(var.sqrt().max(crb))
    }
}

/// Small-error TOA RMSE bound for a replica at a pre-correlation SNR
/// (seconds).  Convenience wrapper over [`ToaBoundEvaluator`].
pub fn crb_toa(spectrum: &ReplicaSpectrum, snr_pre: f64) -> Result<f64> {
    ToaBoundEvaluator::new(spectrum, DEFAULT_PRIOR_WINDOW_S)?.crb_rmse(snr_pre)
}

/// Threshold-aware TOA RMSE bound for a replica at a pre-correlation SNR
/// over a uniform prior window (seconds).
pub fn zzb_toa(spectrum: &ReplicaSpectrum, snr_pre: f64, prior_window_s: f64) -> Result<f64> {
    ToaBoundEvaluator::new(spectrum, prior_window_s)?.zzb_rmse(snr_pre)
}

/// Locates the departure point of a threshold bound computed on an ascending
/// SNR grid: the highest SNR at which the RMSE curve steepens beyond
/// [`KNEE_SLOPE_THRESHOLD`] going downward.  Returns `None` when the curve
/// never steepens (no threshold inside the grid).
pub fn knee_snr_db(snr_db: &[f64], rmse_s: &[f64]) -> Option<f64> {
    assert_eq!(snr_db.len(), rmse_s.len(), "grid and curve must pair up");
    for i in (1..snr_db.len()).rev() {
        let step = snr_db[i] - snr_db[i - 1];
        if step <= 0.0 {
            continue;
        }
        let slope = (rmse_s[i - 1].log10() - rmse_s[i].log10()) / step;
        if slope > KNEE_SLOPE_THRESHOLD {
            return Some(snr_db[i]);
        }
    }
    None
}

/// Result of scanning a demodulated corpus for frame-invariant cells.
#[derive(Debug, Clone)]
pub struct InvariantScan {
    /// Per-cell complex average over the corpus (data symbols and live
    /// subcarriers; all other cells stay zero).
    pub averages: SymbolMatrix,
    /// Cells whose average magnitude exceeded the threshold, as
    /// `(symbol, subcarrier)` pairs in scan order.
    pub flagged: Vec<(usize, usize)>,
    /// Estimated RMS of a non-invariant cell's average.
    pub noise_sigma: f64,
    /// Flagging threshold (six times the noise RMS).
    pub threshold: f64,
    /// Corpus size the scan ran over.
    pub frames: usize,
    /// Set when fewer than 10 frames were available; the noise-floor
    /// estimate and flags are then only indicative.
    pub low_confidence: bool,
}

/// Fraction of the noise RMS used as the flagging threshold multiplier.
const INVARIANT_SIGMA_MULTIPLE: f64 = 6.0;

/// Averages equalized, phase-aligned symbol matrices cell by cell and flags
/// the cells whose average stands clear of the noise floor.
///
/// Content that varies frame to frame averages toward zero at a rate set by
/// the corpus size, while frame-invariant content (the edge pilots, or any
/// undiscovered beacon) retains its full magnitude.  The noise floor is
/// estimated from the median squared average over all scanned cells, which
/// is robust to the small invariant population, and the threshold is six
/// times that floor: for a corpus of even modest size the chance of a single
/// false flag across all 306000 scanned cells is far below 1e-6.
pub fn invariant_symbol_average(frames: &[SymbolMatrix]) -> Result<InvariantScan> {
    if frames.is_empty() {
        return Err(Error::domain("cannot scan an empty corpus"));
    }
    if let Some(bad) = frames.iter().position(|f| f.nsym() != grid::NSF) {
        return Err(Error::domain(format!(
            "frame {bad} has {} symbols; the scan needs full {}-symbol frames",
            frames[bad].nsym(),
            grid::NSF
        )));
    }
    let m = frames.len() as f64;
    let mut averages = SymbolMatrix::zeros(grid::NSF);
    let mut magnitudes_sq = Vec::with_capacity(grid::NUM_DATA_SYMBOLS * grid::NUM_LIVE);
    for i in grid::DATA_SYMBOLS {
        let row = averages.row_mut(i);
        for frame in frames {
            let src = frame.row(i);
            for k in grid::LIVE {
                row[k] += src[k];
            }
        }
        for k in grid::LIVE {
            row[k] /= m;
            magnitudes_sq.push(row[k].norm_sqr());
        }
    }
    let mid = magnitudes_sq.len() / 2;
    let (_, median, _) = magnitudes_sq
        .select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).expect("finite magnitudes"));
    let noise_sigma = (*median / std::f64::consts::LN_2).sqrt();
    let threshold = INVARIANT_SIGMA_MULTIPLE * noise_sigma;
    let mut flagged = Vec::new();
    for i in grid::DATA_SYMBOLS {
        let row = averages.row(i);
        for k in grid::LIVE {
            if row[k].norm() > threshold {
                flagged.push((i, k));
            }
        }
    }
    Ok(InvariantScan {
        averages,
        flagged,
        noise_sigma,
        threshold,
        frames: frames.len(),
        low_confidence: frames.len() < 10,
    })
}


#[cfg(test)]
mod probe {
    use super::*;

    #[test]
    #[ignore]
    fn dump_curves() {
        for (kind, bw, prior, lo, hi) in [
            (ReplicaKind::PssSss, 240e6, DEFAULT_PRIOR_WINDOW_S, -25.0, -10.0),
            (ReplicaKind::PssSss, 25e6, DEFAULT_PRIOR_WINDOW_S, -16.0, -2.0),
            (ReplicaKind::PssSss, 5e6, ACQUISITION_PRIOR_WINDOW_S, -2.0, 15.0),
            (ReplicaKind::PssSssEp, 5e6, ACQUISITION_PRIOR_WINDOW_S, -20.0, -4.0),
        ] {
            let sp = ReplicaSpectrum::new(kind, bw).unwrap();
            let ev = ToaBoundEvaluator::new(&sp, prior).unwrap();
            eprintln!("=== {} bw {:.0e} B_ms {:.4e} L {:.1} ===", sp.label, bw, ev.rms_bandwidth_hz, ev.gain);
            let mut s = lo;
            let mut prev: Option<f64> = None;
            while s <= hi + 1e-9 {
                let z = ev.zzb_rmse(from_db(s)).unwrap();
                let c = ev.crb_rmse(from_db(s)).unwrap();
                let slope = prev.map(|p: f64| (p.log10() - z.log10()) / 0.5).unwrap_or(0.0);
                eprintln!("snr {:6.1}  crb {:.3e}  zzb {:.3e}  ratio {:8.3}  slope {:.3}", s, c, z, z / c, slope);
                prev = Some(z);
                s += 0.5;
            }
        }
    }
}
