//! Reference-template and tessellation-code structure of the QPSK payload.
//!
//! Pure-QPSK frames repeat almost all of their information symbols from
//! frame to frame. Voting those frames element-wise yields a reference
//! template; multiplying any QPSK symbol by the conjugate template entry
//! collapses it to a ±1 deviation. Each frame's deviation matrix splits
//! into a variable-length header followed by a region tiled by a 60-chip
//! code that advances 16 ranks per OFDM symbol. This module builds the
//! template, forms deviations, finds the header boundary, and converts the
//! tiled region to and from its code.

use num_complex::Complex64;

use crate::constellation::{Constellation, Modulation};
use crate::demod::DecodedFrame;
use crate::error::{Error, Result};
use crate::grid::{self, NSF, NUM_DATA_SYMBOLS, NUM_LIVE_NON_PILOT};
use crate::matrix::SymbolMatrix;

/// Tessellation-code length in chips.
pub const TCODE_LEN: usize = 60;

/// Ranks the tiling advances per OFDM symbol.
pub const TCODE_SHIFT: usize = 16;

/// Slot the tiling is phase-referenced to (the first data slot).
pub const TILING_REF_SLOT: usize = 2;

/// Default per-column agreement a tiled region must reach past the header.
pub const HEADER_AGREEMENT_THRESHOLD: f64 = 0.95;

/// Default minimum number of columns in a detected tiled region.
pub const MIN_TCODE_COLUMNS: usize = 1;

/// Code position covering cell `(slot i, non-pilot rank r)`: the tiling
/// model reads `code[(r − TCODE_SHIFT·(i − TILING_REF_SLOT)) mod TCODE_LEN]`.
fn tiling_position(i: usize, rank: usize) -> usize {
    let shift = (TCODE_SHIFT * (i - TILING_REF_SLOT)) % TCODE_LEN;
    (rank % TCODE_LEN + TCODE_LEN - shift) % TCODE_LEN
}

/// Data slots of `frame` labeled QPSK, ascending.
pub fn qpsk_columns(frame: &DecodedFrame) -> Vec<usize> {
    frame
        .labels
        .iter()
        .filter(|&&(i, label)| i >= 2 && label == Modulation::Qpsk)
        .map(|&(i, _)| i)
        .collect()
}

/// Fraction of data slots labeled QPSK.
pub fn qpsk_ratio(frame: &DecodedFrame) -> f64 {
    qpsk_columns(frame).len() as f64 / NUM_DATA_SYMBOLS as f64
}

/// Cross-correlation between two frames over the slots both label QPSK and
/// the loaded non-pilot subcarriers, with the shared-QPSK ratio.
pub fn pairwise_correlation(a: &DecodedFrame, b: &DecodedFrame) -> (Complex64, f64) {
    let cols_b: std::collections::BTreeSet<usize> = qpsk_columns(b).into_iter().collect();
    let shared: Vec<usize> = qpsk_columns(a)
        .into_iter()
        .filter(|i| cols_b.contains(i))
        .collect();
    let mut r = Complex64::new(0.0, 0.0);
    for &i in &shared {
        for k in grid::non_pilot_subcarriers() {
            r += a.x_hat[(i, k)].conj() * b.x_hat[(i, k)];
        }
    }
    (r, shared.len() as f64 / NUM_DATA_SYMBOLS as f64)
}

/// Element-wise mode of a pure-QPSK frame set, with the vote tallies it
/// was decided from.
#[derive(Debug, Clone)]
pub struct ReferenceTemplate {
    /// Winning QPSK point per data-symbol cell; zero where no votes landed
    /// (every contributing frame masked that subcarrier).
    pub t: SymbolMatrix,
    /// Votes per cell and QPSK point, in constellation-point order.
    tallies: Vec<[u32; 4]>,
    /// Number of frames voted in.
    pub frames: usize,
}

impl ReferenceTemplate {
    fn cell(i: usize, rank: usize) -> usize {
        (i - 2) * NUM_LIVE_NON_PILOT + rank
    }

    /// Vote tallies at `(i, k)`, or `None` off the covered support.
    pub fn tallies_at(&self, i: usize, k: usize) -> Option<[u32; 4]> {
        if !(2..NSF).contains(&i) {
            return None;
        }
        let rank = grid::non_pilot_rank(k)?;
        Some(self.tallies[Self::cell(i, rank)])
    }

    /// Whether the winning point at `(i, k)` was decided by a tie break.
    pub fn is_tie(&self, i: usize, k: usize) -> bool {
        match self.tallies_at(i, k) {
            Some(t) => {
                let max = *t.iter().max().unwrap();
                max > 0 && t.iter().filter(|&&v| v == max).count() > 1
            }
            None => false,
        }
    }
}

/// Votes the element-wise mode over a set of pure-QPSK frames.
///
/// Every frame must label all data slots QPSK; masked cells abstain. Ties
/// resolve to the earliest point in constellation order, and stay visible
/// through [`ReferenceTemplate::is_tie`].
pub fn build_reference_template(frames: &[DecodedFrame]) -> Result<ReferenceTemplate> {
    if frames.is_empty() {
        return Err(Error::domain("cannot build a template from no frames".to_string()));
    }
    let points = Constellation::new(Modulation::Qpsk);
    let mut tallies = vec![[0u32; 4]; NUM_DATA_SYMBOLS * NUM_LIVE_NON_PILOT];
    for frame in frames {
        if qpsk_ratio(frame) < 1.0 {
            return Err(Error::domain(format!(
                "frame {} is not pure QPSK (ratio {})",
                frame.m,
                qpsk_ratio(frame)
            )));
        }
        if frame.x_hat.nsym() != NSF {
            return Err(Error::domain(format!(
                "frame {} has {} symbol rows, expected {NSF}",
                frame.m,
                frame.x_hat.nsym()
            )));
        }
        for i in 2..NSF {
            for (rank, k) in grid::non_pilot_subcarriers().enumerate() {
                let x = frame.x_hat[(i, k)];
                if let Some(p) = points.points().iter().position(|&c| c == x) {
                    tallies[ReferenceTemplate::cell(i, rank)][p] += 1;
                }
            }
        }
    }
    let mut t = SymbolMatrix::zeros(NSF);
    for i in 2..NSF {
        for (rank, k) in grid::non_pilot_subcarriers().enumerate() {
            let votes = &tallies[ReferenceTemplate::cell(i, rank)];
            let max = *votes.iter().max().unwrap();
            if max > 0 {
                let winner = votes.iter().position(|&v| v == max).unwrap();
                t[(i, k)] = points.points()[winner];
            }
        }
    }
    Ok(ReferenceTemplate { t, tallies, frames: frames.len() })
}

/// BPSK deviations of one frame's QPSK columns from the template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviationMatrix {
    /// Frame index the deviations came from.
    pub m: usize,
    /// QPSK-labeled data slots the columns cover, ascending.
    pub symbols: Vec<usize>,
    /// Sign per (column, non-pilot rank): ±1, or 0 where the cell could not
    /// be read as BPSK (masked subcarrier or a decode error).
    d: Vec<i8>,
}

impl DeviationMatrix {
    /// Builds a matrix from raw signs (`symbols.len()·1004` of them,
    /// column-major by slot).
    pub fn new(m: usize, symbols: Vec<usize>, d: Vec<i8>) -> Result<Self> {
        if d.len() != symbols.len() * NUM_LIVE_NON_PILOT {
            return Err(Error::domain(format!(
                "{} signs for {} columns (expected {} per column)",
                d.len(),
                symbols.len(),
                NUM_LIVE_NON_PILOT
            )));
        }
        if !symbols.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::domain("deviation columns must be strictly ascending".to_string()));
        }
        if symbols.iter().any(|&i| !(2..NSF).contains(&i)) {
            return Err(Error::domain("deviation columns must be data slots".to_string()));
        }
        if d.iter().any(|&v| !(-1..=1).contains(&v)) {
            return Err(Error::domain("deviation signs must be −1, 0, or +1".to_string()));
        }
        Ok(DeviationMatrix { m, symbols, d })
    }

    /// Sign at column index `col` (into `symbols`) and non-pilot rank.
    pub fn get(&self, col: usize, rank: usize) -> i8 {
        self.d[col * NUM_LIVE_NON_PILOT + rank]
    }

    /// Number of cells that could not be read as BPSK.
    pub fn flagged(&self) -> usize {
        self.d.iter().filter(|&&v| v == 0).count()
    }

    /// Column index holding slot `i`, if covered.
    pub fn column_of(&self, i: usize) -> Option<usize> {
        self.symbols.binary_search(&i).ok()
    }
}

/// Element-wise product of the frame's QPSK columns with the conjugate
/// template. Entries that do not land on ±1 — masked cells, cells the
/// template never saw, or decode errors — are flagged as 0, never clipped.
pub fn deviation(frame: &DecodedFrame, template: &ReferenceTemplate) -> Result<DeviationMatrix> {
    if frame.x_hat.nsym() != NSF || template.t.nsym() != NSF {
        return Err(Error::domain(format!(
            "frame has {} symbol rows and template {}, expected {NSF}",
            frame.x_hat.nsym(),
            template.t.nsym()
        )));
    }
    let symbols = qpsk_columns(frame);
    let mut d = Vec::with_capacity(symbols.len() * NUM_LIVE_NON_PILOT);
    for &i in &symbols {
        for k in grid::non_pilot_subcarriers() {
            let p = frame.x_hat[(i, k)] * template.t[(i, k)].conj();
            d.push(if p.im == 0.0 && p.re == 1.0 {
                1
            } else if p.im == 0.0 && p.re == -1.0 {
                -1
            } else {
                0
            });
        }
    }
    DeviationMatrix::new(frame.m, symbols, d)
}

/// A tessellation code with the phase it was observed at.
#[derive(Debug, Clone, PartialEq)]
pub struct TCode {
    /// The 60 chips, in the [`TILING_REF_SLOT`] orientation.
    pub code: [i8; TCODE_LEN],
    /// Accumulated tiling shift at the first covered column, relative to
    /// the reference slot: `TCODE_SHIFT·(i₀ − TILING_REF_SLOT) mod TCODE_LEN`.
    pub phase: usize,
    /// Fraction of readable covered cells matching the tiled model.
    pub agreement: f64,
}

/// Votes accumulated per code position over a set of deviation columns.
fn tiling_votes(d: &DeviationMatrix, cols: &[usize]) -> [[u32; 2]; TCODE_LEN] {
    let mut votes = [[0u32; 2]; TCODE_LEN];
    for &col in cols {
        let i = d.symbols[col];
        for rank in 0..NUM_LIVE_NON_PILOT {
            let v = d.get(col, rank);
            if v != 0 {
                votes[tiling_position(i, rank)][usize::from(v < 0)] += 1;
            }
        }
    }
    votes
}

fn code_from_votes(votes: &[[u32; 2]; TCODE_LEN]) -> Result<([i8; TCODE_LEN], f64)> {
    let covered = votes.iter().filter(|v| v[0] + v[1] > 0).count();
    if covered < TCODE_LEN {
        return Err(Error::domain(format!(
            "only {covered} of {TCODE_LEN} code positions are covered"
        )));
    }
    let mut code = [0i8; TCODE_LEN];
    let mut matched = 0u64;
    let mut total = 0u64;
    for (p, v) in votes.iter().enumerate() {
        // A dead tie reads as +1; with whole columns voting it would take
        // flip rates near one half to produce one.
        code[p] = if v[0] >= v[1] { 1 } else { -1 };
        matched += u64::from(v[0].max(v[1]));
        total += u64::from(v[0] + v[1]);
    }
    Ok((code, matched as f64 / total as f64))
}

/// Majority-votes the tessellation code from the post-header columns
/// (slots above `i_h`). Gaps between covered slots keep their place: the
/// shift is driven by the absolute slot index.
pub fn extract_tcode(d: &DeviationMatrix, i_h: usize) -> Result<TCode> {
    let cols: Vec<usize> = (0..d.symbols.len()).filter(|&c| d.symbols[c] > i_h).collect();
    let votes = tiling_votes(d, &cols);
    let (code, agreement) = code_from_votes(&votes)?;
    let first = cols
        .iter()
        .find(|&&c| (0..NUM_LIVE_NON_PILOT).any(|r| d.get(c, r) != 0))
        .map(|&c| d.symbols[c])
        .unwrap();
    let phase = (TCODE_SHIFT * (first - TILING_REF_SLOT)) % TCODE_LEN;
    Ok(TCode { code, phase, agreement })
}

/// Renders the exact tiled region a code implies over the given data
/// slots. Inverse of [`extract_tcode`] on noiseless input.
pub fn synthesize_tcode_region(
    code: &[i8; TCODE_LEN],
    m: usize,
    columns: &[usize],
) -> Result<DeviationMatrix> {
    if code.iter().any(|&c| c != 1 && c != -1) {
        return Err(Error::domain("code chips must be ±1".to_string()));
    }
    let mut d = Vec::with_capacity(columns.len() * NUM_LIVE_NON_PILOT);
    for &i in columns {
        if !(2..NSF).contains(&i) {
            return Err(Error::domain(format!("slot {i} is not a data slot")));
        }
        for rank in 0..NUM_LIVE_NON_PILOT {
            d.push(code[tiling_position(i, rank)]);
        }
    }
    DeviationMatrix::new(m, columns.to_vec(), d)
}

/// A detected header/T-code split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeaderSplit {
    /// Index of the final header symbol; 1 when the header is empty.
    pub i_h: usize,
    /// Aggregate agreement of the tiled region past the boundary.
    pub agreement: f64,
}

/// Finds the smallest boundary whose trailing QPSK columns all fit one
/// tiled code, each column agreeing with the fitted code at `threshold` or
/// better. `None` when no boundary leaves at least `min_columns` columns
/// that fit — the frame has no T-code region.
pub fn detect_header_boundary(
    d: &DeviationMatrix,
    threshold: f64,
    min_columns: usize,
) -> Option<HeaderSplit> {
    let n = d.symbols.len();
    // Candidate boundaries: empty header first, then each covered slot.
    for j in 0..=n {
        let cols: Vec<usize> = (j..n).collect();
        if cols.len() < min_columns.max(1) {
            return None;
        }
        let votes = tiling_votes(d, &cols);
        let Ok((code, agreement)) = code_from_votes(&votes) else {
            continue;
        };
        let fits = cols.iter().all(|&col| {
            let i = d.symbols[col];
            let mut matched = 0u32;
            let mut total = 0u32;
            for rank in 0..NUM_LIVE_NON_PILOT {
                let v = d.get(col, rank);
                if v != 0 {
                    total += 1;
                    let expect = code[tiling_position(i, rank)];
                    matched += u32::from(v == expect);
                }
            }
            total == 0 || f64::from(matched) >= threshold * f64::from(total)
        });
        if fits {
            let i_h = if j == 0 { 1 } else { d.symbols[j - 1] };
            return Some(HeaderSplit { i_h, agreement });
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demod::SyncEstimate;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const FC: f64 = 11.805e9;

    fn frame_from(m: usize, labels: Vec<(usize, Modulation)>, x_hat: SymbolMatrix) -> DecodedFrame {
        DecodedFrame {
            m,
            snr_pre_db: 13.8,
            sync: SyncEstimate {
                phi_m0: 0.0,
                dbeta_c: 0.0,
                tau_m0: 0.0,
                dbeta_s: 0.0,
                fc: FC,
                per_symbol: Vec::new(),
            },
            labels,
            masked: Vec::new(),
            x_hat,
        }
    }

    fn random_qpsk_frame(m: usize, slots: &[usize], rng: &mut impl Rng) -> DecodedFrame {
        let points = Constellation::new(Modulation::Qpsk);
        let mut x = SymbolMatrix::zeros(NSF);
        for &i in slots {
            for k in grid::non_pilot_subcarriers() {
                x[(i, k)] = points.points()[rng.gen_range(0..4)];
            }
        }
        frame_from(m, slots.iter().map(|&i| (i, Modulation::Qpsk)).collect(), x)
    }

    fn pure_qpsk_slots() -> Vec<usize> {
        (2..NSF).collect()
    }

    #[test]
    fn qpsk_ratio_counts_labeled_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let all = random_qpsk_frame(0, &pure_qpsk_slots(), &mut rng);
        assert_eq!(qpsk_ratio(&all), 1.0);

        let none = frame_from(1, Vec::new(), SymbolMatrix::zeros(NSF));
        assert_eq!(qpsk_ratio(&none), 0.0);

        let half: Vec<usize> = (2..152).collect();
        assert_eq!(half.len(), 150);
        let frame = random_qpsk_frame(2, &half, &mut rng);
        assert_eq!(qpsk_ratio(&frame), 0.5);
    }

    #[test]
    fn pairwise_correlation_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let a = random_qpsk_frame(0, &pure_qpsk_slots(), &mut rng);
        let (r, rho) = pairwise_correlation(&a, &a);
        assert_eq!(r.norm(), (NUM_DATA_SYMBOLS * NUM_LIVE_NON_PILOT) as f64);
        assert_eq!(r.norm(), 301_200.0);
        assert_eq!(rho, 1.0);

        let lo: Vec<usize> = (2..152).collect();
        let hi: Vec<usize> = (152..NSF).collect();
        let b = random_qpsk_frame(1, &lo, &mut rng);
        let c = random_qpsk_frame(2, &hi, &mut rng);
        let (r, rho) = pairwise_correlation(&b, &c);
        assert_eq!(r, Complex64::new(0.0, 0.0));
        assert_eq!(rho, 0.0);
    }

    #[test]
    fn pairwise_correlation_of_independent_frames_is_noise_sized() {
        // Independent uniform QPSK symbols make R a random walk over the
        // shared cells, so E|R|² is the shared cell count.
        let mut rng = ChaCha8Rng::seed_from_u64(82);
        let lo: Vec<usize> = (2..162).collect();
        let hi: Vec<usize> = (102..262).collect();
        let shared = 60.0 * NUM_LIVE_NON_PILOT as f64;
        let trials = 64;
        let mut sum = 0.0;
        for t in 0..trials {
            let a = random_qpsk_frame(2 * t, &lo, &mut rng);
            let b = random_qpsk_frame(2 * t + 1, &hi, &mut rng);
            let (r, rho) = pairwise_correlation(&a, &b);
            assert_eq!(rho, 60.0 / NUM_DATA_SYMBOLS as f64);
            sum += r.norm_sqr();
        }
        let ratio = sum / trials as f64 / shared;
        assert!((0.5..1.5).contains(&ratio), "E|R|² ratio {ratio}");
    }

    #[test]
    fn template_is_elementwise_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let a = random_qpsk_frame(0, &pure_qpsk_slots(), &mut rng);

        // Mode of one frame is that frame.
        let single = build_reference_template(std::slice::from_ref(&a)).unwrap();
        for i in 2..NSF {
            for k in grid::non_pilot_subcarriers() {
                assert_eq!(single.t[(i, k)], a.x_hat[(i, k)]);
            }
        }

        // Three against one: majority wins everywhere.
        let b = random_qpsk_frame(1, &pure_qpsk_slots(), &mut rng);
        let set = vec![a.clone(), a.clone(), a.clone(), b];
        let majority = build_reference_template(&set).unwrap();
        for i in 2..NSF {
            for k in grid::non_pilot_subcarriers() {
                assert_eq!(majority.t[(i, k)], a.x_hat[(i, k)]);
            }
        }

        // A two-two tie resolves to the earlier constellation point and is
        // visible in the tallies.
        let mut c = a.clone();
        let k0 = grid::non_pilot_subcarriers().next().unwrap();
        let points = Constellation::new(Modulation::Qpsk);
        let alt = points.points()[(points.points().iter().position(|&p| p == c.x_hat[(5, k0)]).unwrap() + 1) % 4];
        c.x_hat[(5, k0)] = alt;
        let tied = build_reference_template(&[a.clone(), a.clone(), c.clone(), c.clone()]).unwrap();
        assert!(tied.is_tie(5, k0));
        assert!(!tied.is_tie(5, grid::non_pilot_subcarriers().nth(1).unwrap()));
        let idx_a = points.points().iter().position(|&p| p == a.x_hat[(5, k0)]).unwrap();
        let idx_c = points.points().iter().position(|&p| p == alt).unwrap();
        assert_eq!(tied.t[(5, k0)], points.points()[idx_a.min(idx_c)]);
    }

    #[test]
    fn template_majority_recovers_under_flips() {
        let mut rng = ChaCha8Rng::seed_from_u64(84);
        let truth = random_qpsk_frame(0, &pure_qpsk_slots(), &mut rng);
        let points = Constellation::new(Modulation::Qpsk);
        let mut frames = Vec::new();
        for m in 0..51 {
            let mut f = truth.clone();
            f.m = m;
            for i in 2..NSF {
                for k in grid::non_pilot_subcarriers() {
                    if rng.gen_bool(0.05) {
                        let cur = points.points().iter().position(|&p| p == f.x_hat[(i, k)]).unwrap();
                        f.x_hat[(i, k)] = points.points()[(cur + rng.gen_range(1..4)) % 4];
                    }
                }
            }
            frames.push(f);
        }
        let template = build_reference_template(&frames).unwrap();
        for i in 2..NSF {
            for k in grid::non_pilot_subcarriers() {
                assert_eq!(template.t[(i, k)], truth.x_hat[(i, k)], "cell ({i}, {k})");
            }
        }
    }

    #[test]
    fn template_rejects_impure_and_empty_sets() {
        assert!(build_reference_template(&[]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(85);
        let mut frame = random_qpsk_frame(0, &pure_qpsk_slots(), &mut rng);
        frame.labels[3].1 = Modulation::Qam16;
        assert!(build_reference_template(std::slice::from_ref(&frame)).is_err());
    }

    #[test]
    fn template_mode_is_stable_under_agreeing_duplicates() {
        let mut rng = ChaCha8Rng::seed_from_u64(86);
        let frames: Vec<DecodedFrame> =
            (0..5).map(|m| random_qpsk_frame(m, &pure_qpsk_slots(), &mut rng)).collect();
        let before = build_reference_template(&frames).unwrap();
        let mut extended = frames.clone();
        extended.push(frames[0].clone());
        let after = build_reference_template(&extended).unwrap();
        for i in 2..NSF {
            for k in grid::non_pilot_subcarriers() {
                if frames[0].x_hat[(i, k)] == before.t[(i, k)] {
                    assert_eq!(after.t[(i, k)], before.t[(i, k)], "cell ({i}, {k})");
                }
            }
        }
    }

    #[test]
    fn deviation_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(87);
        let frame = random_qpsk_frame(0, &pure_qpsk_slots(), &mut rng);
        let template = build_reference_template(std::slice::from_ref(&frame)).unwrap();

        // A frame deviated against itself is all +1.
        let d = deviation(&frame, &template).unwrap();
        assert_eq!(d.symbols.len(), NUM_DATA_SYMBOLS);
        assert_eq!(d.flagged(), 0);
        assert!((0..d.symbols.len()).all(|c| (0..NUM_LIVE_NON_PILOT).all(|r| d.get(c, r) == 1)));

        // Its negation is all −1.
        let mut neg = frame.clone();
        for i in 2..NSF {
            for k in grid::non_pilot_subcarriers() {
                neg.x_hat[(i, k)] = -neg.x_hat[(i, k)];
            }
        }
        let d = deviation(&neg, &template).unwrap();
        assert!((0..d.symbols.len()).all(|c| (0..NUM_LIVE_NON_PILOT).all(|r| d.get(c, r) == -1)));

        // A 90° product is flagged, not clipped.
        let mut quad = frame.clone();
        let k0 = grid::non_pilot_subcarriers().next().unwrap();
        quad.x_hat[(2, k0)] *= Complex64::new(0.0, 1.0);
        let d = deviation(&quad, &template).unwrap();
        assert_eq!(d.flagged(), 1);
        assert_eq!(d.get(0, 0), 0);
    }

    #[test]
    fn tcode_roundtrip_and_column_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(88);
        let mut code = [0i8; TCODE_LEN];
        for c in code.iter_mut() {
            *c = if rng.gen_bool(0.5) { 1 } else { -1 };
        }

        // Round trip across a gapped column set: absolute slot indices keep
        // the shift phase accumulating through the gaps.
        let columns = [2usize, 3, 17, 40, 297];
        let region = synthesize_tcode_region(&code, 0, &columns).unwrap();
        let extracted = extract_tcode(&region, 1).unwrap();
        assert_eq!(extracted.code, code);
        assert_eq!(extracted.agreement, 1.0);
        assert_eq!(extracted.phase, 0);

        // Column i+Δi is column i advanced by 16·Δi positions in the tiling.
        for (c0, c1, di) in [(0usize, 1usize, 1usize), (1, 2, 14), (2, 4, 280)] {
            for rank in 0..NUM_LIVE_NON_PILOT {
                let back = (rank + TCODE_LEN - (TCODE_SHIFT * di) % TCODE_LEN) % TCODE_LEN;
                assert_eq!(region.get(c1, rank), region.get(c0, back));
            }
        }

        // A shift of 15 slots is 240 ≡ 0 positions: identical columns.
        let pair = synthesize_tcode_region(&code, 0, &[2, 17]).unwrap();
        for rank in 0..NUM_LIVE_NON_PILOT {
            assert_eq!(pair.get(0, rank), pair.get(1, rank));
        }

        // Extracting single columns one slot apart gives the same code with
        // the phase advanced by 16.
        let at5 = extract_tcode(&synthesize_tcode_region(&code, 0, &[5]).unwrap(), 1).unwrap();
        let at6 = extract_tcode(&synthesize_tcode_region(&code, 0, &[6]).unwrap(), 1).unwrap();
        assert_eq!(at5.code, at6.code);
        assert_eq!((at6.phase + TCODE_LEN - at5.phase) % TCODE_LEN, TCODE_SHIFT);
    }

    #[test]
    fn tcode_majority_survives_cell_flips() {
        let mut rng = ChaCha8Rng::seed_from_u64(89);
        let mut code = [0i8; TCODE_LEN];
        for c in code.iter_mut() {
            *c = if rng.gen_bool(0.5) { 1 } else { -1 };
        }
        let columns: Vec<usize> = (10..74).collect();
        let mut region = synthesize_tcode_region(&code, 0, &columns).unwrap();
        let mut flips = 0usize;
        let cells = region.symbols.len() * NUM_LIVE_NON_PILOT;
        for idx in 0..cells {
            if rng.gen_bool(0.1) {
                region.d[idx] = -region.d[idx];
                flips += 1;
            }
        }
        let extracted = extract_tcode(&region, 1).unwrap();
        assert_eq!(extracted.code, code);
        let expect = 1.0 - flips as f64 / cells as f64;
        assert!(
            (extracted.agreement - expect).abs() < 1e-12,
            "agreement {} vs flip rate {expect}",
            extracted.agreement
        );
    }

    #[test]
    fn tcode_extraction_needs_full_coverage() {
        // Forty covered positions in a single sparse column cannot pin all
        // sixty chips.
        let mut d = vec![0i8; NUM_LIVE_NON_PILOT];
        for (rank, v) in d.iter_mut().enumerate() {
            if rank < 40 {
                *v = 1;
            }
        }
        let sparse = DeviationMatrix::new(0, vec![2], d).unwrap();
        assert!(extract_tcode(&sparse, 1).is_err());
    }

    #[test]
    fn header_boundary_detection() {
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        let mut code = [0i8; TCODE_LEN];
        for c in code.iter_mut() {
            *c = if rng.gen_bool(0.5) { 1 } else { -1 };
        }
        let all: Vec<usize> = (2..NSF).collect();
        let tiled = synthesize_tcode_region(&code, 0, &all).unwrap();

        // Random header over slots 2..=10, exact tiling after.
        let mut d = tiled.clone();
        for col in 0..9 {
            for rank in 0..NUM_LIVE_NON_PILOT {
                d.d[col * NUM_LIVE_NON_PILOT + rank] = if rng.gen_bool(0.5) { 1 } else { -1 };
            }
        }
        let split = detect_header_boundary(&d, HEADER_AGREEMENT_THRESHOLD, MIN_TCODE_COLUMNS)
            .expect("boundary");
        assert_eq!(split.i_h, 10);
        assert_eq!(split.agreement, 1.0);
        assert_eq!(extract_tcode(&d, split.i_h).unwrap().code, code);

        // A fully tiled frame has an empty header.
        let split = detect_header_boundary(&tiled, HEADER_AGREEMENT_THRESHOLD, MIN_TCODE_COLUMNS)
            .expect("boundary");
        assert_eq!(split.i_h, 1);
        assert_eq!(split.agreement, 1.0);

        // Pure random deviations never fit the tiling.
        let mut noise = tiled.clone();
        for v in noise.d.iter_mut() {
            *v = if rng.gen_bool(0.5) { 1 } else { -1 };
        }
        assert!(detect_header_boundary(&noise, HEADER_AGREEMENT_THRESHOLD, MIN_TCODE_COLUMNS)
            .is_none());
    }
}
