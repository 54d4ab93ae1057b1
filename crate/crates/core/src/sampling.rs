//! Deterministic low-discrepancy point sets used by the grid-free sweeps.

const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

/// Van der Corput radical inverse of `index` in `base`.
pub fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let inv_base = 1.0 / base as f64;
    let mut factor = inv_base;
    let mut value = 0.0;
    while index > 0 {
        value += (index % base) as f64 * factor;
        index /= base;
        factor *= inv_base;
    }
    value
}

/// Halton sequence in `[0, 1)^dim` with an index offset, so that disjoint
/// offsets give independent-looking streams (the "seed split").
#[derive(Debug, Clone)]
pub struct Halton {
    dim: usize,
    next: u64,
}

impl Halton {
    pub fn new(dim: usize, offset: u64) -> Self {
        assert!(dim >= 1 && dim <= PRIMES.len(), "Halton dimension out of range");
        // index 0 is the origin in every base; skip it
        Self {
            dim,
            next: offset + 1,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn next_point(&mut self) -> Vec<f64> {
        let i = self.next;
        self.next += 1;
        PRIMES[..self.dim]
            .iter()
            .map(|&b| radical_inverse(i, b))
            .collect()
    }
}

impl Iterator for Halton {
    type Item = Vec<f64>;

    fn next(&mut self) -> Option<Vec<f64>> {
        Some(self.next_point())
    }
}
