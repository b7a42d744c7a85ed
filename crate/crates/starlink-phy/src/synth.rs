//! Baseband frame synthesis and channel impairment.
//!
//! The transmit side builds each OFDM symbol as a cyclic-prefixed inverse
//! DFT shaped by a trapezoidal support window, concatenates 302 of them into
//! a frame, and sums frames into a capture stream. The channel side applies,
//! in order: a short FIR transfer function, time scaling plus fractional
//! delay evaluated per slot against the symbol's own tone sum, carrier
//! rotation with a per-frame phase, amplitude scaling, and calibrated
//! complex noise.
//!
//! Clock errors are affine in time and belong to the transmitter; they fold
//! into effective sample-rate and carrier-rate scale factors (`beta_s`,
//! `beta_c`) plus constant delay/phase terms, which is exactly how the
//! demodulator later parameterizes its residual-error estimates.

use num_complex::Complex64;
use rand::Rng;

use crate::dsp::{self, SincInterpolator};
use crate::error::{Error, Result};
use crate::grid::{self, FRAME_LEN, FS, NG, NS, NSF, SYMBOL_LEN};
use crate::matrix::SymbolMatrix;

/// Sanity bound on clock drift magnitudes.
pub const MAX_DRIFT: f64 = 1e-4;
/// Bound on the line-of-sight Doppler parameter |v/c|.
pub const MAX_BETA: f64 = 25e-6;

/// Affine transmitter clock model: each clock reads
/// `(1 + drift)·t + (offset − drift·t0)` at true time `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClockModel {
    /// Carrier clock offset at the epoch, seconds.
    pub dtc0: f64,
    /// Carrier clock drift, dimensionless.
    pub dtc_dot: f64,
    /// Sample clock offset at the epoch, seconds.
    pub dts0: f64,
    /// Sample clock drift, dimensionless.
    pub dts_dot: f64,
    /// Epoch the offsets refer to, seconds.
    pub t0: f64,
}

impl ClockModel {
    /// A perfect clock.
    pub fn ideal() -> Self {
        ClockModel {
            dtc0: 0.0,
            dtc_dot: 0.0,
            dts0: 0.0,
            dts_dot: 0.0,
            t0: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dtc_dot.abs() >= MAX_DRIFT || self.dts_dot.abs() >= MAX_DRIFT {
            return Err(Error::domain(format!(
                "clock drift ({}, {}) exceeds the {MAX_DRIFT} sanity bound",
                self.dtc_dot, self.dts_dot
            )));
        }
        Ok(())
    }

    /// Carrier clock reading at true time `t`.
    pub fn carrier_time(&self, t: f64) -> f64 {
        (1.0 + self.dtc_dot) * t + (self.dtc0 - self.dtc_dot * self.t0)
    }

    /// Sample clock reading at true time `t`.
    pub fn sample_time(&self, t: f64) -> f64 {
        (1.0 + self.dts_dot) * t + (self.dts0 - self.dts_dot * self.t0)
    }
}

/// Channel and radio parameters shared by every frame of a capture.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelParams {
    /// Line-of-sight Doppler parameter v/c (positive = compressing).
    pub beta: f64,
    /// Line-of-sight propagation delay, seconds.
    pub tau_los: f64,
    /// Centered FIR channel taps (odd length; index `(len−1)/2` is the
    /// zero-delay tap). `[1]` is the flat channel. Use
    /// [`ChannelParams::normalize_taps`] to enforce unit gain at the channel
    /// center.
    pub taps: Vec<Complex64>,
    /// Channel power gain g (amplitude √g).
    pub gain: f64,
    /// Pre-correlation SNR in dB; `None` disables noise.
    pub snr_pre_db: Option<f64>,
}

impl ChannelParams {
    /// A clean unit channel with no noise.
    pub fn clean() -> Self {
        ChannelParams {
            beta: 0.0,
            tau_los: 0.0,
            taps: vec![Complex64::new(1.0, 0.0)],
            gain: 1.0,
            snr_pre_db: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta.abs() > MAX_BETA {
            return Err(Error::domain(format!(
                "doppler parameter {} exceeds the {MAX_BETA} bound",
                self.beta
            )));
        }
        if self.taps.is_empty() || self.taps.len() % 2 == 0 {
            return Err(Error::domain(
                "channel taps must have odd length (centered FIR)".to_string(),
            ));
        }
        if self.gain <= 0.0 {
            return Err(Error::domain(format!("gain {} must be positive", self.gain)));
        }
        Ok(())
    }

    /// Transfer function of the FIR taps at subcarrier `k`.
    pub fn transfer(&self, k: usize) -> Result<Complex64> {
        let d = grid::subcarrier_offset(k)?;
        Ok(taps_transfer(&self.taps, f64::from(d)))
    }

    /// Rescales the taps so the transfer function equals one at the channel
    /// center (offset zero).
    pub fn normalize_taps(&mut self) {
        let h0 = taps_transfer(&self.taps, 0.0);
        for t in &mut self.taps {
            *t /= h0;
        }
    }
}

/// Transfer function of centered taps at fractional subcarrier offset `d`.
pub fn taps_transfer(taps: &[Complex64], d: f64) -> Complex64 {
    let half = (taps.len() / 2) as i64;
    taps.iter()
        .enumerate()
        .map(|(idx, &h)| {
            let l = idx as i64 - half;
            h * Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * d * l as f64 / NS as f64)
        })
        .sum()
}

/// Builds centered conjugate-symmetric taps whose magnitude response tilts
/// linearly in dB from `−tilt_db/2` at the lowest live subcarrier to
/// `+tilt_db/2` at the highest, with unit gain at the channel center. The
/// response is real across the band, so the channel adds no group delay.
///
/// The tilt wraps discontinuously where the band edges meet, and a
/// `2·half_taps+1`-tap filter smooths roughly `Ns/(2·half_taps)` bins around
/// that seam toward the band average — so the outermost few dozen
/// subcarriers roll back toward 0 dB. The realized response at any offset is
/// [`taps_transfer`]; use it, not the nominal profile, as ground truth.
pub fn tilted_channel_taps(tilt_db: f64, half_taps: usize) -> Vec<Complex64> {
    let mut spectrum = vec![Complex64::new(0.0, 0.0); NS];
    let edge = 510.0;
    for (k, s) in spectrum.iter_mut().enumerate() {
        let d = f64::from(grid::offset_unchecked(k));
        let slope = (d / edge).clamp(-1.0, 1.0);
        *s = Complex64::new(10f64.powf(tilt_db / 2.0 * slope / 20.0), 0.0);
    }
    dsp::ifft_in_place(&mut spectrum);
    // Gather the centered impulse response (wrap-around indices are the
    // negative lags) and taper the truncation with a raised cosine.
    let len = 2 * half_taps + 1;
    let mut taps = vec![Complex64::new(0.0, 0.0); len];
    for (idx, t) in taps.iter_mut().enumerate() {
        let l = idx as i64 - half_taps as i64;
        let v = spectrum[l.rem_euclid(NS as i64) as usize] / NS as f64;
        let w = 0.5 + 0.5 * (std::f64::consts::PI * l as f64 / (half_taps as f64 + 1.0)).cos();
        *t = v * w;
    }
    let h0 = taps_transfer(&taps, 0.0);
    for t in &mut taps {
        *t /= h0;
    }
    taps
}

/// A sample stream with its radio metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptureStream {
    pub samples: Vec<Complex64>,
    /// Samples per second.
    pub sample_rate: f64,
    /// RF center frequency the stream is basebanded around, Hz.
    pub center_frequency: f64,
    /// Capture start time, seconds.
    pub epoch: f64,
}

/// Trapezoidal OFDM symbol support: ramps linearly over the first and last
/// half-guard (16 samples), flat in between.
#[inline]
pub fn symbol_support(n: usize) -> f64 {
    const RAMP: usize = NG / 2;
    if n >= SYMBOL_LEN {
        0.0
    } else if n < RAMP {
        n as f64 / RAMP as f64
    } else if n >= SYMBOL_LEN - RAMP {
        (SYMBOL_LEN - n) as f64 / RAMP as f64
    } else {
        1.0
    }
}

/// Time-domain OFDM symbol for one row of frequency coefficients:
/// `(1/√Ns)·Σ_k X_k·exp(j2π·d[k]·F·(t − Tg))` sampled at `Fs`, which is the
/// scaled inverse DFT of `X` with the 32-sample cyclic prefix prepended.
/// No support window is applied here.
pub fn ofdm_symbol_time(x_row: &[Complex64]) -> Result<Vec<Complex64>> {
    if x_row.len() != NS {
        return Err(Error::domain(format!(
            "coefficient row has {} entries, expected {NS}",
            x_row.len()
        )));
    }
    for &k in &grid::GUTTER {
        if x_row[k] != Complex64::new(0.0, 0.0) {
            return Err(Error::domain(format!("gutter subcarrier {k} carries energy")));
        }
    }
    let mut useful = x_row.to_vec();
    dsp::ifft_in_place(&mut useful);
    let scale = 1.0 / (NS as f64).sqrt();
    let mut out = Vec::with_capacity(SYMBOL_LEN);
    for n in 0..SYMBOL_LEN {
        out.push(useful[(n + NS - NG) % NS] * scale);
    }
    Ok(out)
}

/// Assembles one baseband frame: slot 0 carries the PSS time sequence, slots
/// 1..=301 the OFDM symbols from `symbols` (slot 1 being the SSS), each
/// shaped by the trapezoidal support window.
pub fn synth_frame(symbols: &SymbolMatrix, pss: &[Complex64]) -> Result<Vec<Complex64>> {
    if symbols.nsym() != NSF {
        return Err(Error::domain(format!(
            "frame needs {NSF} symbol slots, got {}",
            symbols.nsym()
        )));
    }
    if pss.len() != SYMBOL_LEN {
        return Err(Error::domain(format!(
            "PSS has {} samples, expected {SYMBOL_LEN}",
            pss.len()
        )));
    }
    let mut frame = Vec::with_capacity(FRAME_LEN);
    for (n, &x) in pss.iter().enumerate() {
        frame.push(x * symbol_support(n));
    }
    for i in 1..NSF {
        let sym = ofdm_symbol_time(symbols.row(i))?;
        for (n, &x) in sym.iter().enumerate() {
            frame.push(x * symbol_support(n));
        }
    }
    Ok(frame)
}

/// Per-frame impairment in the discrete-time received-signal model
/// `y[n] = amplitude·e^{j(phase − 2π·beta_c·fc·n·Ts)}·x_f((1−beta_s)·n·Ts − delay)`,
/// where `x_f` is the FIR-filtered baseband frame and `n` counts from the
/// frame's nominal start.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameImpairment {
    /// Effective sample-rate scale error (Doppler + sample clock drift).
    pub beta_s: f64,
    /// Effective carrier scale error (Doppler + carrier clock drift).
    pub beta_c: f64,
    /// Effective delay of the frame content, seconds.
    pub delay: f64,
    /// Frame initial phase, radians.
    pub phase: f64,
    /// Amplitude √g.
    pub amplitude: f64,
    /// Carrier frequency the rotation is referenced to, Hz.
    pub fc: f64,
}

impl FrameImpairment {
    /// No impairment at all.
    pub fn identity(fc: f64) -> Self {
        FrameImpairment {
            beta_s: 0.0,
            beta_c: 0.0,
            delay: 0.0,
            phase: 0.0,
            amplitude: 1.0,
            fc,
        }
    }
}

/// Folds the clock model and channel geometry into the per-frame discrete
/// impairment for a frame whose content nominally starts at stream time
/// `t_m`, with initial phase draw `theta_m`.
pub fn derive_impairment(
    clock: &ClockModel,
    ch: &ChannelParams,
    theta_m: f64,
    t_m: f64,
    fc: f64,
) -> Result<FrameImpairment> {
    clock.validate()?;
    ch.validate()?;
    // Composing "transmit at the transmitter's clocks" with Doppler time
    // scaling (1−β) gives exact effective scale factors; the usual
    // first-order forms β − drift drop only the β·drift cross term.
    let beta_s = 1.0 - (1.0 + clock.dts_dot) * (1.0 - ch.beta);
    let beta_c = 1.0 - (1.0 + clock.dtc_dot) * (1.0 - ch.beta);
    let delay = (1.0 - beta_s) * ch.tau_los - (clock.dts0 - clock.dts_dot * clock.t0);
    let phase = theta_m
        + 2.0
            * std::f64::consts::PI
            * fc
            * ((clock.dtc0 - clock.dtc_dot * clock.t0)
                - (1.0 - beta_c) * ch.tau_los
                - beta_c * t_m);
    Ok(FrameImpairment {
        beta_s,
        beta_c,
        delay,
        phase,
        amplitude: ch.gain.sqrt(),
        fc,
    })
}

/// Extra output samples to cover resampler support at the tail.
const TAIL_MARGIN: usize = 34;

/// Oversampling factor of the per-symbol spectral resampling grid.
const OVERSAMPLE: usize = 8;

/// [`symbol_support`] at a real-valued sample position, for evaluating the
/// transmit shaping between sample instants.
fn support_at(l: f64) -> f64 {
    let ramp = (NG / 2) as f64;
    let len = SYMBOL_LEN as f64;
    if !(0.0..len).contains(&l) {
        0.0
    } else if l < ramp {
        l / ramp
    } else if l > len - ramp {
        (len - l) / ramp
    } else {
        1.0
    }
}

/// Centered FIR filtering of a whole sample sequence; the returned offset is
/// the index holding lag zero.
fn filter_sequence(frame: &[Complex64], taps: &[Complex64]) -> (Vec<Complex64>, f64) {
    if taps.len() == 1 && taps[0] == Complex64::new(1.0, 0.0) {
        return (frame.to_vec(), 0.0);
    }
    let half = taps.len() / 2;
    let mut out = vec![Complex64::new(0.0, 0.0); frame.len() + 2 * half];
    for (n, &x) in frame.iter().enumerate() {
        if x == Complex64::new(0.0, 0.0) {
            continue;
        }
        for (idx, &h) in taps.iter().enumerate() {
            // y[m] += h[l]·x[m−l] with l = idx − half ⇒ m = n + l.
            out[n + idx] += h * x;
        }
    }
    (out, half as f64)
}

/// Per-slot spectral evaluator behind the frame resampling path.
///
/// Each OFDM slot of a [`synth_frame`] output is, inside its trapezoidal
/// support, a cyclically extended sum of subcarrier tones; warped sample
/// positions can therefore be evaluated against the tone sum itself instead
/// of against a kernel sliding over the stored samples. The evaluator
/// recovers each slot's tone coefficients exactly (the stored cyclic-prefix
/// samples supply the body tail where the shaping has already rolled off),
/// applies the channel taps per tone, and renders the sum on an
/// `OVERSAMPLE`× grid, where the outermost subcarriers — right at the
/// sampling Nyquist edge, where any time-domain kernel's transition band
/// would dent them — land deep inside the interpolation kernel's flat
/// passband. The PSS slot has no subcarrier structure, so it is rendered
/// from the full-block spectrum of its stored samples (shaping included).
///
/// The resampling loop visits slots in order, so one rendered slot is cached
/// at a time.
struct SymbolEvaluator<'a> {
    frame: &'a [Complex64],
    interp: &'a SincInterpolator,
    /// Channel transfer at each body FFT bin, for OFDM slots.
    transfer_body: Vec<Complex64>,
    /// Channel transfer at each full-block FFT bin, for the PSS slot.
    transfer_block: Vec<Complex64>,
    /// Periodic wrap margin on each side of the rendered grid, covering the
    /// interpolation kernel's support.
    margin: usize,
    /// Slot currently rendered into `buf`, or −1.
    slot: i64,
    buf: Vec<Complex64>,
}

impl<'a> SymbolEvaluator<'a> {
    fn new(frame: &'a [Complex64], taps: &[Complex64], interp: &'a SincInterpolator) -> Self {
        let transfer_body = (0..NS)
            .map(|k| taps_transfer(taps, f64::from(grid::offset_unchecked(k))))
            .collect();
        let transfer_block = (0..SYMBOL_LEN)
            .map(|q| {
                let f = if q < SYMBOL_LEN / 2 { q as f64 } else { q as f64 - SYMBOL_LEN as f64 };
                taps_transfer(taps, f * NS as f64 / SYMBOL_LEN as f64)
            })
            .collect();
        SymbolEvaluator {
            frame,
            interp,
            transfer_body,
            transfer_block,
            margin: interp.taps() / 2,
            slot: -1,
            buf: Vec::new(),
        }
    }

    /// Impaired-signal value at fractional frame position `pos`.
    fn value_at(&mut self, pos: f64) -> Complex64 {
        if pos < 0.0 || pos >= FRAME_LEN as f64 {
            return Complex64::new(0.0, 0.0);
        }
        let slot = (pos / SYMBOL_LEN as f64) as i64;
        if slot != self.slot {
            self.render_slot(slot);
        }
        let l = pos - (slot as usize * SYMBOL_LEN) as f64;
        if slot == 0 {
            self.eval(l)
        } else {
            // Body offset; negative values sit in the cyclic prefix, which
            // the periodic rendering reproduces by wrapping.
            let u = l - NG as f64;
            let m = if u < 0.0 { u + NS as f64 } else { u };
            support_at(l) * self.eval(m)
        }
    }

    /// Rendered-grid lookup at pre-oversampling position `m`.
    fn eval(&self, m: f64) -> Complex64 {
        self.interp.sample(&self.buf, OVERSAMPLE as f64 * m + self.margin as f64)
    }

    fn render_slot(&mut self, slot: i64) {
        let base = slot as usize * SYMBOL_LEN;
        let (mut spec, transfer) = if slot == 0 {
            (self.frame[..SYMBOL_LEN].to_vec(), &self.transfer_block)
        } else {
            // Untapered body: the shaping is flat over the first Ns − Ng/2
            // body samples, and the tapered tail is read from its verbatim
            // copy in the flat part of the cyclic prefix.
            let flat = NS - NG / 2;
            let mut body = Vec::with_capacity(NS);
            body.extend_from_slice(&self.frame[base + NG..base + NG + flat]);
            body.extend_from_slice(&self.frame[base + NG / 2..base + NG]);
            (body, &self.transfer_body)
        };
        dsp::fft_in_place(&mut spec);
        let n = spec.len();
        let scale = 1.0 / n as f64;
        let over = OVERSAMPLE * n;
        let mut padded = vec![Complex64::new(0.0, 0.0); over];
        for (q, (&s, &h)) in spec.iter().zip(transfer).enumerate() {
            // Negative frequencies (the half-rate bin among them) keep their
            // distance from the top of the widened spectrum.
            let bin = if q < n / 2 { q } else { over - n + q };
            padded[bin] = s * h * scale;
        }
        dsp::ifft_in_place(&mut padded);
        self.buf.clear();
        self.buf.resize(over + 2 * self.margin, Complex64::new(0.0, 0.0));
        for (i, b) in self.buf.iter_mut().enumerate() {
            *b = padded[(i + over - self.margin) % over];
        }
        self.slot = slot;
    }
}

/// Applies the FIR taps and the discrete impairment model to one baseband
/// frame, returning noiseless received samples aligned to the frame's
/// nominal start. The output is a little longer than the input to cover
/// delay and time stretching; trailing samples decay to zero.
///
/// Frame-length inputs are resampled per slot through [`SymbolEvaluator`],
/// which keeps the response exact across the whole live band; inputs of any
/// other length fall back to windowed-sinc interpolation of the tap-filtered
/// sample sequence.
pub fn apply_impairment(
    frame: &[Complex64],
    taps: &[Complex64],
    imp: &FrameImpairment,
    interp: &SincInterpolator,
) -> Result<Vec<Complex64>> {
    if taps.is_empty() || taps.len() % 2 == 0 {
        return Err(Error::domain("channel taps must have odd length".to_string()));
    }
    if imp.beta_s.abs() >= 1e-3 {
        return Err(Error::domain(format!(
            "sample scale error {} exceeds resampler design range",
            imp.beta_s
        )));
    }
    // Snap delays that are within a billionth of a sample (≈4 as) of the
    // grid so nominally-integer shifts stay bit-exact through float noise.
    let mut delay_samples = imp.delay * FS;
    if (delay_samples - delay_samples.round()).abs() < 1e-9 {
        delay_samples = delay_samples.round();
    }

    let stretch = 1.0 / (1.0 - imp.beta_s);
    let out_len =
        ((frame.len() as f64 + delay_samples.max(0.0)) * stretch).ceil() as usize + TAIL_MARGIN;
    let two_pi = 2.0 * std::f64::consts::PI;
    let ts = 1.0 / FS;
    let rotate = |n: usize, v: Complex64| {
        let rot = imp.phase - two_pi * imp.beta_c * imp.fc * n as f64 * ts;
        imp.amplitude * Complex64::from_polar(1.0, rot) * v
    };
    let exact_grid = imp.beta_s == 0.0 && delay_samples.fract() == 0.0;

    let mut out = Vec::with_capacity(out_len);
    if exact_grid {
        // Integer sampling grid: read the filtered samples directly so the
        // identity channel is bit-exact.
        let (filtered, filtered_offset) = filter_sequence(frame, taps);
        for n in 0..out_len {
            let pos = n as f64 - delay_samples + filtered_offset;
            let idx = pos.round() as i64;
            let v = if idx >= 0 && (idx as usize) < filtered.len() {
                filtered[idx as usize]
            } else {
                Complex64::new(0.0, 0.0)
            };
            out.push(rotate(n, v));
        }
    } else if frame.len() == FRAME_LEN {
        let mut eval = SymbolEvaluator::new(frame, taps, interp);
        for n in 0..out_len {
            let pos = (1.0 - imp.beta_s) * n as f64 - delay_samples;
            out.push(rotate(n, eval.value_at(pos)));
        }
    } else {
        let (filtered, filtered_offset) = filter_sequence(frame, taps);
        for n in 0..out_len {
            let pos = (1.0 - imp.beta_s) * n as f64 - delay_samples + filtered_offset;
            out.push(rotate(n, interp.sample(&filtered, pos)));
        }
    }
    Ok(out)
}

/// [`derive_impairment`] followed by [`apply_impairment`].
pub fn apply_channel(
    frame: &[Complex64],
    clock: &ClockModel,
    ch: &ChannelParams,
    theta_m: f64,
    t_m: f64,
    fc: f64,
    interp: &SincInterpolator,
) -> Result<Vec<Complex64>> {
    let imp = derive_impairment(clock, ch, theta_m, t_m, fc)?;
    apply_impairment(frame, &ch.taps, &imp, interp)
}

/// One frame scheduled into a capture.
#[derive(Debug, Clone)]
pub struct ScheduledFrame {
    /// Nominal start time of the frame content, seconds from the capture
    /// epoch.
    pub t_m: f64,
    /// Baseband frame samples (from [`synth_frame`]).
    pub samples: Vec<Complex64>,
}

/// Ground truth recorded for each frame a capture was built from.
#[derive(Debug, Clone, Copy)]
pub struct FrameTruth {
    /// Index of the first stream sample the frame was written to.
    pub start_sample: usize,
    /// The impairment actually applied (its `delay` is relative to
    /// `start_sample`, so the frame content's time of arrival is
    /// `(start_sample + delay·Fs)·Ts` from the epoch).
    pub impairment: FrameImpairment,
}

/// Assembles scheduled frames into one continuous capture stream: impairs
/// each frame, writes it at its start time, and adds calibrated noise.
///
/// Noise power is set from `ch.snr_pre_db` against the average occupied
/// sample power (measured over the frames actually written; nominal frame
/// power is used when the capture is empty). Frames whose impaired extents
/// would overlap are rejected.
pub fn synth_capture(
    frames: &[ScheduledFrame],
    clock: &ClockModel,
    ch: &ChannelParams,
    duration: f64,
    fc: f64,
    rng: &mut impl Rng,
    interp: &SincInterpolator,
) -> Result<(CaptureStream, Vec<FrameTruth>)> {
    let nsamp = (duration * FS).round() as usize;
    let mut samples = vec![Complex64::new(0.0, 0.0); nsamp];
    let mut truths = Vec::with_capacity(frames.len());
    let mut occupied = 0usize;
    let mut signal_energy = 0.0f64;
    let mut last_end = 0usize;

    for frame in frames {
        let theta_m: f64 = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
        let start = frame.t_m * FS;
        let start_sample = start.floor();
        // The sub-sample part of the start time rides along as extra delay.
        let mut imp = derive_impairment(clock, ch, theta_m, frame.t_m, fc)?;
        imp.delay += (start - start_sample) / FS;
        let start_sample = start_sample as usize;

        let impaired = apply_impairment(&frame.samples, &ch.taps, &imp, interp)?;
        if start_sample < last_end {
            return Err(Error::domain(format!(
                "frame at t={} s overlaps the previous frame's extent",
                frame.t_m
            )));
        }
        if start_sample + impaired.len() > nsamp {
            return Err(Error::domain(format!(
                "frame at t={} s does not fit in the {duration} s capture",
                frame.t_m
            )));
        }
        for (dst, src) in samples[start_sample..].iter_mut().zip(&impaired) {
            *dst += src;
        }
        last_end = start_sample + impaired.len();
        occupied += frame.samples.len();
        signal_energy += impaired.iter().map(Complex64::norm_sqr).sum::<f64>();
        truths.push(FrameTruth {
            start_sample,
            impairment: imp,
        });
    }

    if let Some(snr_db) = ch.snr_pre_db {
        let signal_power = if occupied > 0 {
            signal_energy / occupied as f64
        } else {
            // Empty capture: calibrate against nominal occupied-symbol power.
            ch.gain * grid::NUM_LIVE as f64 / NS as f64
        };
        let sigma2 = signal_power / 10f64.powf(snr_db / 10.0);
        for s in &mut samples {
            *s += dsp::awgn(rng, sigma2);
        }
    }

    Ok((
        CaptureStream {
            samples,
            sample_rate: FS,
            center_frequency: fc,
            epoch: 0.0,
        },
        truths,
    ))
}
