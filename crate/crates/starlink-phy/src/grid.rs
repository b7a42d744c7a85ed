//! Frame structure: fixed dimensions, timing, subcarrier index sets, and the
//! index-to-frequency offset map.
//!
//! One downlink channel carries 750 frames per second. Each frame occupies
//! `NSF` = 302 OFDM symbol slots of `NS` = 1024 subcarriers with an `NG` = 32
//! sample cyclic prefix, sampled at `FS` = 240 MHz. Subcarrier index sets:
//!
//! * gutter — `{0, 1, 1022, 1023}`, never modulated (mid-channel dead zone
//!   after the index-to-frequency map),
//! * pilots — `{488..=495} ∪ {528..=535}`, sixteen band-edge subcarriers
//!   carrying frame-invariant 4QAM symbols,
//! * live — `{2..=1021}`, everything that can carry energy,
//! * live non-pilot — live minus pilots, 1004 subcarriers of payload.
//!
//! OFDM symbol slots: 0 is the primary synchronization sequence, 1 the
//! secondary; data (and pilots) occupy slots `2..=301`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::RangeInclusive;
use std::path::Path;

use crate::error::{Error, Result};

/// Subcarriers per OFDM symbol.
pub const NS: usize = 1024;
/// Cyclic-prefix length in samples.
pub const NG: usize = 32;
/// Occupied OFDM symbol slots per frame.
pub const NSF: usize = 302;
/// Samples per OFDM symbol including the cyclic prefix.
pub const SYMBOL_LEN: usize = NS + NG;
/// Samples per frame (302 × 1056 = 318912).
pub const FRAME_LEN: usize = NSF * SYMBOL_LEN;
/// Sample rate = occupied channel bandwidth, Hz.
pub const FS: f64 = 240e6;
/// Subcarrier spacing `FS / NS` = 234375 Hz.
pub const SUBCARRIER_SPACING: f64 = FS / NS as f64;
/// Frame repetition interval, seconds (750 frames/s, leaving dead time after
/// the 302 occupied slots).
pub const FRAME_PERIOD: f64 = 1.0 / 750.0;
/// One symbol interval `SYMBOL_LEN / FS` = 4.4 µs.
pub const SYMBOL_PERIOD: f64 = SYMBOL_LEN as f64 / FS;

/// Downlink band limits for a channel center frequency, Hz.
pub const KU_DOWNLINK: RangeInclusive<f64> = 10.7e9..=12.7e9;

/// Gutter subcarriers (zero energy).
pub const GUTTER: [usize; 4] = [0, 1, 1022, 1023];
/// Lower band-edge pilot subcarriers.
pub const PILOTS_LOW: RangeInclusive<usize> = 488..=495;
/// Upper band-edge pilot subcarriers.
pub const PILOTS_HIGH: RangeInclusive<usize> = 528..=535;
/// Number of pilot subcarriers.
pub const NUM_PILOTS: usize = 16;
/// First and last live subcarrier.
pub const LIVE: RangeInclusive<usize> = 2..=1021;
/// Number of live subcarriers.
pub const NUM_LIVE: usize = 1020;
/// Number of live non-pilot subcarriers.
pub const NUM_LIVE_NON_PILOT: usize = NUM_LIVE - NUM_PILOTS;

/// OFDM symbol slots that carry data and pilots (the first two slots carry
/// the synchronization sequences).
pub const DATA_SYMBOLS: RangeInclusive<usize> = 2..=NSF - 1;
/// Number of data symbol slots.
pub const NUM_DATA_SYMBOLS: usize = NSF - 2;

/// Signed frequency offset index for subcarrier `k`: `k` for `k ≤ 511`, else
/// `k − 1024`. Bijective from `0..=1023` onto `−512..=511`; the subcarrier
/// sits at `d·SUBCARRIER_SPACING` Hz from the channel center.
pub fn subcarrier_offset(k: usize) -> Result<i32> {
    if k >= NS {
        return Err(Error::domain(format!("subcarrier index {k} out of 0..{NS}")));
    }
    Ok(offset_unchecked(k))
}

/// `subcarrier_offset` without the range check, for hot loops over known-good
/// indices.
#[inline]
pub fn offset_unchecked(k: usize) -> i32 {
    debug_assert!(k < NS);
    if k <= 511 {
        k as i32
    } else {
        k as i32 - NS as i32
    }
}

/// True if `k` is a gutter subcarrier.
#[inline]
pub fn is_gutter(k: usize) -> bool {
    GUTTER.contains(&k)
}

/// True if `k` is a pilot subcarrier.
#[inline]
pub fn is_pilot(k: usize) -> bool {
    PILOTS_LOW.contains(&k) || PILOTS_HIGH.contains(&k)
}

/// True if `k` is live (can carry energy).
#[inline]
pub fn is_live(k: usize) -> bool {
    LIVE.contains(&k)
}

/// Iterator over the sixteen pilot subcarriers in ascending order.
pub fn pilot_subcarriers() -> impl Iterator<Item = usize> {
    PILOTS_LOW.chain(PILOTS_HIGH)
}

/// Rank of pilot subcarrier `k` within the ascending pilot set (`0..16`),
/// or `None` if `k` is not a pilot.
#[inline]
pub fn pilot_rank(k: usize) -> Option<usize> {
    if PILOTS_LOW.contains(&k) {
        Some(k - PILOTS_LOW.start())
    } else if PILOTS_HIGH.contains(&k) {
        Some(8 + k - PILOTS_HIGH.start())
    } else {
        None
    }
}

/// Row index of live subcarrier `k` in a 1020-row matrix over the live set.
#[inline]
pub fn live_row(k: usize) -> usize {
    debug_assert!(is_live(k));
    k - 2
}

/// Rank of `k` within the sorted live non-pilot set (`0..1004`), or `None`
/// if `k` is a gutter or pilot subcarrier.
#[inline]
pub fn non_pilot_rank(k: usize) -> Option<usize> {
    if !is_live(k) || is_pilot(k) {
        return None;
    }
    // Subtract the gutter offset (2) and however many pilots sit below k.
    Some(match k {
        k if k < 488 => k - 2,
        k if k < 528 => k - 10,
        k => k - 18,
    })
}

/// Inverse of [`non_pilot_rank`]: the live non-pilot subcarrier with rank `r`.
#[inline]
pub fn non_pilot_from_rank(r: usize) -> usize {
    debug_assert!(r < NUM_LIVE_NON_PILOT);
    match r {
        r if r < 486 => r + 2,
        r if r < 518 => r + 10,
        r => r + 18,
    }
}

/// Iterator over the live non-pilot subcarriers in rank order.
pub fn non_pilot_subcarriers() -> impl Iterator<Item = usize> {
    (0..NUM_LIVE_NON_PILOT).map(non_pilot_from_rank)
}

/// Structural and timing parameters of one channel frame.
///
/// Everything except the center frequency is fixed by the frame design; the
/// struct mostly exists so downstream code can carry one value around instead
/// of a loose center frequency plus module constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameGrid {
    /// Subcarriers per OFDM symbol.
    pub ns: usize,
    /// Cyclic-prefix samples.
    pub ng: usize,
    /// Occupied OFDM symbol slots per frame.
    pub nsf: usize,
    /// Sample rate, Hz.
    pub fs: f64,
    /// Channel center frequency, Hz.
    pub fc: f64,
}

impl FrameGrid {
    /// Builds the grid for a channel centered at `fc` Hz.
    ///
    /// Fails if `fc` falls outside the 10.7–12.7 GHz downlink band.
    pub fn new(fc: f64) -> Result<Self> {
        if !KU_DOWNLINK.contains(&fc) {
            return Err(Error::domain(format!(
                "center frequency {fc} Hz outside the {:.1}-{:.1} GHz downlink band",
                KU_DOWNLINK.start() / 1e9,
                KU_DOWNLINK.end() / 1e9
            )));
        }
        Ok(FrameGrid {
            ns: NS,
            ng: NG,
            nsf: NSF,
            fs: FS,
            fc,
        })
    }

    /// Subcarrier spacing, Hz.
    #[inline]
    pub fn subcarrier_spacing(&self) -> f64 {
        self.fs / self.ns as f64
    }

    /// Useful (FFT) interval of one OFDM symbol, seconds.
    #[inline]
    pub fn useful_interval(&self) -> f64 {
        self.ns as f64 / self.fs
    }

    /// Cyclic-prefix interval, seconds.
    #[inline]
    pub fn guard_interval(&self) -> f64 {
        self.ng as f64 / self.fs
    }

    /// Full OFDM symbol interval (guard + useful), seconds.
    #[inline]
    pub fn symbol_interval(&self) -> f64 {
        (self.ns + self.ng) as f64 / self.fs
    }

    /// Frame repetition interval, seconds.
    #[inline]
    pub fn frame_interval(&self) -> f64 {
        FRAME_PERIOD
    }

    /// Samples per OFDM symbol including the cyclic prefix.
    #[inline]
    pub fn symbol_len(&self) -> usize {
        self.ns + self.ng
    }

    /// Samples per frame.
    #[inline]
    pub fn frame_len(&self) -> usize {
        self.nsf * self.symbol_len()
    }

    /// Absolute frequency of subcarrier `k`, Hz.
    pub fn subcarrier_frequency(&self, k: usize) -> Result<f64> {
        let d = subcarrier_offset(k)?;
        Ok(self.fc + f64::from(d) * self.subcarrier_spacing())
    }
}

/// Channel index → center frequency table, loaded from a `key = value` text
/// file (`#` comments and blank lines allowed; frequencies in Hz, scientific
/// notation accepted).
///
/// The channelization is not hard-coded because the downlink band admits
/// several plausible 240 MHz plans; captures record which channel they came
/// from and the table maps that back to an absolute frequency.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChannelTable {
    channels: BTreeMap<u32, f64>,
}

impl ChannelTable {
    /// Parses a table from text. Duplicate indices and out-of-band
    /// frequencies are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        const WHAT: &str = "channel table";
        let mut channels = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let lineno = lineno + 1;
            let line = match raw.split_once('#') {
                Some((before, _)) => before.trim(),
                None => raw.trim(),
            };
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::parse(WHAT, lineno, format!("expected `index = frequency_hz`, got {raw:?}"))
            })?;
            let index: u32 = key.trim().parse().map_err(|_| {
                Error::parse(WHAT, lineno, format!("channel index {:?} is not an unsigned integer", key.trim()))
            })?;
            let fc: f64 = value.trim().parse().map_err(|_| {
                Error::parse(WHAT, lineno, format!("frequency {:?} is not a number", value.trim()))
            })?;
            if !KU_DOWNLINK.contains(&fc) {
                return Err(Error::parse(
                    WHAT,
                    lineno,
                    format!("channel {index}: {fc} Hz outside the downlink band"),
                ));
            }
            if channels.insert(index, fc).is_some() {
                return Err(Error::parse(WHAT, lineno, format!("duplicate channel index {index}")));
            }
        }
        Ok(ChannelTable { channels })
    }

    /// Loads a table from a file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Center frequency of channel `index`, Hz.
    pub fn center_frequency(&self, index: u32) -> Option<f64> {
        self.channels.get(&index).copied()
    }

    /// All (index, frequency) pairs in index order.
    pub fn iter(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.channels.iter().map(|(&i, &f)| (i, f))
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    /// Serializes the table back to its file format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (index, fc) in self.iter() {
            let _ = writeln!(out, "{index} = {fc}");
        }
        out
    }
}
