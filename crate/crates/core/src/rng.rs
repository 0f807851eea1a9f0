//! Seed-keyed random streams.
//!
//! ChaCha is counter based: the output for `(seed, stream)` is fixed by the
//! cipher and independent of platform, so every draw in the crate is
//! reproducible bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::linalg::Matrix;

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn gaussian_matrix(rng: &mut Rng, rows: usize, cols: usize, sigma: f64) -> Matrix {
    // Row-major fill so the draw order matches the serialized layout.
    let mut m = Matrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let z: f64 = StandardNormal.sample(rng);
            m[(i, j)] = sigma * z;
        }
    }
    m
}

pub fn standard_normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}
