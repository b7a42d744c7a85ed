//! Band-edge pilot sequence generation.
//!
//! Each of the sixteen pilot subcarriers carries a frame-invariant 4QAM
//! sequence across the 300 data symbol slots, defined by a 150-digit
//! hexadecimal constant per subcarrier: writing the constant in base 4 gives
//! one quaternary digit `s ∈ {0,1,2,3}` per symbol slot, and the transmitted
//! coefficient is `exp(j·(π/2)·(s + 1/2))`. The expansion is anchored at the
//! *low* end — slot `i` reads digit `⌊q / 4^(301−i)⌋ mod 4` — so slot 301
//! gets the least-significant digit and slot 2 the most-significant one.
//!
//! The sixteen published constants ship with the crate
//! ([`PilotCodebook::builtin`]); alternative codebooks load from the same
//! text format (`k <150 uppercase hex digits>` per line).

use std::path::Path;

use num_bigint::BigUint;
use num_complex::Complex64;
use num_traits::ToPrimitive;

use crate::error::{Error, Result};
use crate::grid::{self, DATA_SYMBOLS, NUM_DATA_SYMBOLS, NUM_PILOTS};

/// Hex digits per pilot constant (600 bits = 300 base-4 digits).
pub const CODE_HEX_DIGITS: usize = 150;

const BUILTIN: &str = include_str!("../data/pilot_codes.txt");

/// Quaternary digit of `q` for data symbol slot `i`:
/// `⌊q / 4^(301−i)⌋ mod 4`, exact integer arithmetic.
pub fn pilot_digit(q: &BigUint, i: usize) -> Result<u8> {
    if !DATA_SYMBOLS.contains(&i) {
        return Err(Error::domain(format!(
            "symbol slot {i} outside the data range {}..={}",
            DATA_SYMBOLS.start(),
            DATA_SYMBOLS.end()
        )));
    }
    // 4^(301-i) is a pure bit shift; the masked remainder always fits u8.
    let shifted = q >> (2 * (301 - i));
    let digit = (shifted & BigUint::from(3u8)).to_u8().expect("masked to 2 bits");
    Ok(digit)
}

/// Maps a quaternary digit to its 4QAM point `exp(j·(π/2)·(s + 1/2))`.
///
/// Computed with the same operations that build the 4QAM constellation
/// table, so a pilot cell and the constellation point it decodes to are
/// equal bit for bit, not merely within rounding.
#[inline]
pub fn digit_symbol(s: u8) -> Complex64 {
    debug_assert!(s < 4);
    let axis = [
        Complex64::new(1.0, 0.0),
        Complex64::new(0.0, 1.0),
        Complex64::new(-1.0, 0.0),
        Complex64::new(0.0, -1.0),
    ][usize::from(s)];
    axis * Complex64::from_polar(1.0, std::f64::consts::FRAC_PI_4)
}

/// The sixteen per-subcarrier pilot constants and the symbol matrix they
/// generate.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotCodebook {
    /// `(k, q)` in ascending subcarrier order, one entry per pilot
    /// subcarrier.
    codes: Vec<(usize, BigUint)>,
}

impl PilotCodebook {
    /// The published constants shipped with the crate.
    pub fn builtin() -> Self {
        Self::parse(BUILTIN).expect("embedded pilot constants are valid")
    }

    /// Parses a codebook from text: one `k <150 uppercase hex digits>` line
    /// per pilot subcarrier, `#` comments and blank lines allowed. All
    /// sixteen pilot subcarriers must appear exactly once.
    pub fn parse(text: &str) -> Result<Self> {
        const WHAT: &str = "pilot codebook";
        let mut codes: Vec<(usize, BigUint)> = Vec::with_capacity(NUM_PILOTS);
        for (lineno, raw) in text.lines().enumerate() {
            let lineno = lineno + 1;
            let line = match raw.split_once('#') {
                Some((before, _)) => before.trim(),
                None => raw.trim(),
            };
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let (Some(key), Some(hex), None) = (fields.next(), fields.next(), fields.next())
            else {
                return Err(Error::parse(
                    WHAT,
                    lineno,
                    format!("expected `k <hex constant>`, got {raw:?}"),
                ));
            };
            let k: usize = key.parse().map_err(|_| {
                Error::parse(WHAT, lineno, format!("subcarrier index {key:?} is not an integer"))
            })?;
            if !grid::is_pilot(k) {
                return Err(Error::parse(
                    WHAT,
                    lineno,
                    format!("subcarrier {k} is not a pilot subcarrier"),
                ));
            }
            if codes.iter().any(|(seen, _)| *seen == k) {
                return Err(Error::parse(WHAT, lineno, format!("duplicate entry for subcarrier {k}")));
            }
            if hex.len() != CODE_HEX_DIGITS {
                return Err(Error::parse(
                    WHAT,
                    lineno,
                    format!(
                        "constant for subcarrier {k} has {} hex digits, expected {CODE_HEX_DIGITS}",
                        hex.len()
                    ),
                ));
            }
            if let Some(bad) = hex.chars().find(|c| !c.is_ascii_hexdigit() || c.is_ascii_lowercase())
            {
                return Err(Error::parse(
                    WHAT,
                    lineno,
                    format!("constant for subcarrier {k} contains {bad:?} (expected uppercase hex)"),
                ));
            }
            let q = BigUint::parse_bytes(hex.as_bytes(), 16)
                .expect("validated hex string parses");
            codes.push((k, q));
        }
        if codes.len() != NUM_PILOTS {
            let missing: Vec<usize> = grid::pilot_subcarriers()
                .filter(|k| !codes.iter().any(|(seen, _)| seen == k))
                .collect();
            return Err(Error::parse(
                WHAT,
                0,
                format!("missing constants for pilot subcarriers {missing:?}"),
            ));
        }
        codes.sort_by_key(|(k, _)| *k);
        Ok(PilotCodebook { codes })
    }

    /// Loads a codebook file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// The constant for pilot subcarrier `k`.
    pub fn code(&self, k: usize) -> Option<&BigUint> {
        grid::pilot_rank(k).map(|r| &self.codes[r].1)
    }

    /// Pilot coefficient for data symbol slot `i` on pilot subcarrier `k`.
    /// Identical for every frame.
    pub fn pilot_symbol(&self, i: usize, k: usize) -> Result<Complex64> {
        let q = self
            .code(k)
            .ok_or_else(|| Error::domain(format!("subcarrier {k} is not a pilot subcarrier")))?;
        Ok(digit_symbol(pilot_digit(q, i)?))
    }

    /// The full 16 × 300 pilot coefficient matrix: rows in ascending pilot
    /// subcarrier order, columns over data symbol slots `2..=301`.
    pub fn pilot_matrix(&self) -> Vec<Vec<Complex64>> {
        self.codes
            .iter()
            .map(|(_, q)| {
                // One base-4 expansion per subcarrier instead of 300 shifts:
                // most-significant digit first, left-padded to slot 2.
                let digits = q.to_radix_be(4);
                let mut row = vec![digit_symbol(0); NUM_DATA_SYMBOLS];
                let pad = NUM_DATA_SYMBOLS - digits.len();
                for (slot, &d) in row[pad..].iter_mut().zip(&digits) {
                    *slot = digit_symbol(d);
                }
                row
            })
            .collect()
    }
}
