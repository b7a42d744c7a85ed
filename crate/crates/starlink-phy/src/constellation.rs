//! Modulation constellations carried by data subcarriers.
//!
//! Four alphabets appear on the downlink: QPSK `{1, j, −1, −j}`, 4QAM (QPSK
//! rotated 45°), rectangular 16QAM, and cross 32QAM, all normalized to unit
//! average power. QPSK and 4QAM share a point geometry and are only told
//! apart by absolute phase, which is why they get distinct labels here.
//!
//! Symbols are the terminal unit throughout the crate — no bit mapping.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Constellation label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modulation {
    Qpsk,
    Qam4,
    Qam16,
    Qam32,
}

impl Modulation {
    /// All labels, in detection-ladder order (smallest alphabet first).
    pub const ALL: [Modulation; 4] = [
        Modulation::Qpsk,
        Modulation::Qam4,
        Modulation::Qam16,
        Modulation::Qam32,
    ];

    /// Number of points in the alphabet.
    pub fn cardinality(self) -> usize {
        match self {
            Modulation::Qpsk | Modulation::Qam4 => 4,
            Modulation::Qam16 => 16,
            Modulation::Qam32 => 32,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modulation::Qpsk => "QPSK",
            Modulation::Qam4 => "4QAM",
            Modulation::Qam16 => "16QAM",
            Modulation::Qam32 => "32QAM",
        }
    }
}

impl fmt::Display for Modulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "QPSK" => Ok(Modulation::Qpsk),
            "4QAM" => Ok(Modulation::Qam4),
            "16QAM" => Ok(Modulation::Qam16),
            "32QAM" => Ok(Modulation::Qam32),
            other => Err(Error::domain(format!(
                "unknown modulation {other:?} (expected QPSK, 4QAM, 16QAM, or 32QAM)"
            ))),
        }
    }
}

/// A concrete point set for one modulation label.
#[derive(Debug, Clone, PartialEq)]
pub struct Constellation {
    pub label: Modulation,
    points: Vec<Complex64>,
    min_distance: f64,
}

impl Constellation {
    /// Builds the point set for `label`.
    ///
    /// QPSK points are ordered `[1, j, −1, −j]` and 4QAM follows the same
    /// order rotated by 45°; template extraction relies on that order for
    /// deterministic tie-breaking.
    pub fn new(label: Modulation) -> Self {
        let points = match label {
            Modulation::Qpsk => vec![
                Complex64::new(1.0, 0.0),
                Complex64::new(0.0, 1.0),
                Complex64::new(-1.0, 0.0),
                Complex64::new(0.0, -1.0),
            ],
            Modulation::Qam4 => {
                let rot = Complex64::from_polar(1.0, std::f64::consts::FRAC_PI_4);
                Constellation::new(Modulation::Qpsk)
                    .points
                    .iter()
                    .map(|p| p * rot)
                    .collect()
            }
            Modulation::Qam16 => {
                let scale = 10.0f64.sqrt();
                let levels = [-3.0, -1.0, 1.0, 3.0];
                levels
                    .iter()
                    .flat_map(|&a| levels.iter().map(move |&b| Complex64::new(a, b) / scale))
                    .collect()
            }
            Modulation::Qam32 => {
                let scale = 20.0f64.sqrt();
                let levels = [-5.0f64, -3.0, -1.0, 1.0, 3.0, 5.0];
                levels
                    .iter()
                    .flat_map(|&a| levels.iter().map(move |&b| (a, b)))
                    .filter(|&(a, b)| !(a.abs() == 5.0 && b.abs() == 5.0))
                    .map(|(a, b)| Complex64::new(a, b) / scale)
                    .collect()
            }
        };
        let min_distance = min_pairwise_distance(&points);
        Constellation {
            label,
            points,
            min_distance,
        }
    }

    pub fn points(&self) -> &[Complex64] {
        &self.points
    }

    pub fn cardinality(&self) -> usize {
        self.points.len()
    }

    /// Smallest distance between two distinct points.
    pub fn min_distance(&self) -> f64 {
        self.min_distance
    }

    /// Index and value of the point nearest to `z`.
    pub fn nearest(&self, z: Complex64) -> (usize, Complex64) {
        let mut best = 0;
        let mut best_d2 = f64::INFINITY;
        for (idx, p) in self.points.iter().enumerate() {
            let d2 = (z - p).norm_sqr();
            if d2 < best_d2 {
                best_d2 = d2;
                best = idx;
            }
        }
        (best, self.points[best])
    }
}

fn min_pairwise_distance(points: &[Complex64]) -> f64 {
    let mut min = f64::INFINITY;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            min = min.min((a - b).norm());
        }
    }
    min
}
