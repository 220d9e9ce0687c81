//! Unscrambled Sobol sequence (Joe–Kuo direction numbers), Gray-code order.

use crate::error::{Error, Result};

pub const MAX_DIMENSION: usize = 21;

const BITS: usize = 32;

/// Primitive polynomial (with leading and constant terms) and initial
/// direction numbers for dimensions 2 through 21.
const TABLE: [(u32, &[u32]); MAX_DIMENSION - 1] = [
    (3, &[1]),
    (7, &[1, 3]),
    (11, &[1, 3, 1]),
    (13, &[1, 1, 1]),
    (19, &[1, 1, 3, 3]),
    (25, &[1, 3, 5, 13]),
    (37, &[1, 1, 5, 5, 17]),
    (41, &[1, 1, 5, 5, 5]),
    (47, &[1, 1, 7, 11, 19]),
    (55, &[1, 1, 5, 1, 1]),
    (59, &[1, 1, 1, 3, 11]),
    (61, &[1, 3, 5, 5, 31]),
    (67, &[1, 3, 3, 9, 7, 49]),
    (91, &[1, 1, 1, 15, 21, 21]),
    (97, &[1, 3, 1, 13, 27, 49]),
    (103, &[1, 1, 1, 15, 7, 5]),
    (109, &[1, 3, 1, 15, 13, 25]),
    (115, &[1, 1, 5, 5, 19, 61]),
    (131, &[1, 3, 7, 11, 23, 15, 103]),
    (137, &[1, 3, 7, 13, 13, 15, 69]),
];

fn directions(dim: usize) -> [u32; BITS] {
    let mut v = [0u32; BITS];
    if dim == 0 {
        for (i, vi) in v.iter_mut().enumerate() {
            *vi = 1 << (BITS - 1 - i);
        }
        return v;
    }
    let (poly, m) = TABLE[dim - 1];
    let s = m.len();
    for i in 0..s.min(BITS) {
        v[i] = m[i] << (BITS - 1 - i);
    }
    for i in s..BITS {
        let mut x = v[i - s] ^ (v[i - s] >> s);
        for k in 1..s {
            if (poly >> (s - k)) & 1 == 1 {
                x ^= v[i - k];
            }
        }
        v[i] = x;
    }
    v
}

/// Iterator over points of the unit cube, skipping the origin.
pub struct Sobol {
    dirs: Vec<[u32; BITS]>,
    state: Vec<u32>,
    index: u64,
}

impl Sobol {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 || dim > MAX_DIMENSION {
            return Err(Error::UnsupportedDimension(dim));
        }
        Ok(Sobol {
            dirs: (0..dim).map(directions).collect(),
            state: vec![0; dim],
            index: 0,
        })
    }
}

impl Iterator for Sobol {
    type Item = Vec<f64>;

    fn next(&mut self) -> Option<Vec<f64>> {
        if self.index >= (1u64 << BITS) - 1 {
            return None;
        }
        let c = self.index.trailing_ones() as usize;
        self.index += 1;
        for (x, d) in self.state.iter_mut().zip(&self.dirs) {
            *x ^= d[c];
        }
        Some(
            self.state
                .iter()
                .map(|&x| x as f64 / (1u64 << BITS) as f64)
                .collect(),
        )
    }
}
