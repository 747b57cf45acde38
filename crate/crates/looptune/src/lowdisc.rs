//! Low-discrepancy point sets for deterministic space filling.
//!
//! The R2 sequence (generalized golden ratio) covers a unit hypercube far
//! more evenly than pseudorandom draws at the small sample counts used for
//! acquisition restarts and restart initialization, and it needs no RNG
//! state, which keeps every consumer reproducible.

/// Returns the irrational base of the d-dimensional R2 sequence: the unique
/// positive root of x^(d+1) = x + 1.
fn harmonious(dim: usize) -> f64 {
    let mut x = 2.0_f64;
    for _ in 0..64 {
        x = (1.0 + x).powf(1.0 / (dim as f64 + 1.0));
    }
    x
}

/// Generator for points of the R2 sequence in `[0, 1)^dim`.
///
/// `shift` offsets the whole lattice (a Cranley-Patterson rotation); use a
/// per-purpose constant or a derived seed fraction to decorrelate point sets
/// that share a dimension.
pub struct R2Sequence {
    alphas: Vec<f64>,
    shift: Vec<f64>,
    index: u64,
}

impl R2Sequence {
    pub fn new(dim: usize, shift: &[f64]) -> Self {
        let g = harmonious(dim);
        let alphas = (1..=dim).map(|j| (1.0 / g.powi(j as i32)).fract()).collect();
        let shift = (0..dim)
            .map(|j| shift.get(j).copied().unwrap_or(0.5).fract().abs())
            .collect();
        R2Sequence { alphas, shift, index: 0 }
    }

    /// Shift vector derived from a seed, one fraction per dimension.
    pub fn shift_from_seed(dim: usize, seed: u64) -> Vec<f64> {
        (0..dim)
            .map(|j| {
                let bits = crate::seeding::derive_seed(seed, &[j as u64]);
                (bits >> 11) as f64 / (1u64 << 53) as f64
            })
            .collect()
    }

    pub fn next_point(&mut self) -> Vec<f64> {
        self.index += 1;
        let n = self.index as f64;
        self.alphas
            .iter()
            .zip(&self.shift)
            .map(|(&a, &s)| (s + n * a).fract())
            .collect()
    }

    #[cfg(test)]
    pub fn take(&mut self, count: usize) -> Vec<Vec<f64>> {
        (0..count).map(|_| self.next_point()).collect()
    }
}
