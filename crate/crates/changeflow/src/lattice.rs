//! The displacement lattice shared by the matcher and the flow head: an
//! odd r × r grid of candidate motions at spacing `delta`, flattened
//! row-major with vertical displacement as the slow axis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DisplacementLattice {
    r: usize,
    delta: f64,
    #[serde(skip)]
    offsets: Vec<(f64, f64)>,
}

impl DisplacementLattice {
    pub fn new(r: usize, delta: f64) -> Result<Self> {
        if r % 2 == 0 || r == 0 {
            return Err(Error::validation(format!(
                "lattice needs an odd positive bin count per axis, got {r}"
            )));
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::validation(format!(
                "lattice spacing must be positive and finite, got {delta}"
            )));
        }
        let mut lattice = DisplacementLattice {
            r,
            delta,
            offsets: Vec::new(),
        };
        lattice.fill_offsets();
        Ok(lattice)
    }

    /// Rebuilds the offset table; call after deserialization.
    pub fn fill_offsets(&mut self) {
        let half = (self.r as f64 - 1.0) / 2.0;
        self.offsets = (0..self.r * self.r)
            .map(|k| {
                let row = (k / self.r) as f64;
                let col = (k % self.r) as f64;
                ((row - half) * self.delta, (col - half) * self.delta)
            })
            .collect();
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn num_bins(&self) -> usize {
        self.r * self.r
    }

    /// Bin `k` as `(dy, dx)`.
    pub fn offset(&self, k: usize) -> (f64, f64) {
        self.offsets[k]
    }

    pub fn offsets(&self) -> &[(f64, f64)] {
        &self.offsets
    }

    pub fn center_bin(&self) -> usize {
        (self.num_bins() - 1) / 2
    }

    /// The bin whose offset is the negation of bin `k`'s.
    pub fn mirror(&self, k: usize) -> usize {
        let (row, col) = (k / self.r, k % self.r);
        (self.r - 1 - row) * self.r + (self.r - 1 - col)
    }

    /// Largest representable displacement magnitude per axis.
    pub fn half_range(&self) -> f64 {
        (self.r as f64 - 1.0) / 2.0 * self.delta
    }
}
