//! Dense complex matrix over (OFDM symbol slot, subcarrier) cells.
//!
//! One `SymbolMatrix` holds a full frame's worth of frequency-domain
//! coefficients at some pipeline stage: transmitted symbols, raw demodulated
//! values, equalized values, phase-compensated values, or hard decisions.
//! Rows always span all `NS` subcarriers; cells that carry no energy
//! (gutter, unoccupied slots) just hold zero. Row `i`, laid out
//! contiguously, doubles as the FFT-ordered spectrum of OFDM symbol `i`
//! because the index-to-frequency map `d[k]` equals `k` modulo `NS`.

use std::ops::{Index, IndexMut};

use num_complex::Complex64;

use crate::grid::NS;

#[derive(Debug, Clone, PartialEq)]
pub struct SymbolMatrix {
    nsym: usize,
    data: Vec<Complex64>,
}

impl SymbolMatrix {
    /// All-zero matrix with `nsym` OFDM symbol rows.
    pub fn zeros(nsym: usize) -> Self {
        SymbolMatrix {
            nsym,
            data: vec![Complex64::new(0.0, 0.0); nsym * NS],
        }
    }

    /// Number of OFDM symbol rows.
    pub fn nsym(&self) -> usize {
        self.nsym
    }

    /// Subcarrier row for OFDM symbol `i` (length `NS`, FFT bin order).
    pub fn row(&self, i: usize) -> &[Complex64] {
        &self.data[i * NS..(i + 1) * NS]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [Complex64] {
        &mut self.data[i * NS..(i + 1) * NS]
    }
}

impl Index<(usize, usize)> for SymbolMatrix {
    type Output = Complex64;

    #[inline]
    fn index(&self, (i, k): (usize, usize)) -> &Complex64 {
        debug_assert!(k < NS);
        &self.data[i * NS + k]
    }
}

impl IndexMut<(usize, usize)> for SymbolMatrix {
    #[inline]
    fn index_mut(&mut self, (i, k): (usize, usize)) -> &mut Complex64 {
        debug_assert!(k < NS);
        &mut self.data[i * NS + k]
    }
}
