//! Fixtures shared by the benches.

use cvmh_core::ssm::{ScanDims, ScanInputs};
use cvmh_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Owned operands for one raw scan call, drawn from well-conditioned ranges.
pub struct ScanProblem {
    pub dims: ScanDims,
    pub u: Vec<f32>,
    pub delta: Vec<f32>,
    pub a: Vec<f32>,
    pub b: Vec<f32>,
    pub c: Vec<f32>,
    pub d_skip: Vec<f32>,
}

impl ScanProblem {
    pub fn random(dims: ScanDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ScanDims { n, d, l, s } = dims;
        let mut v = |len: usize, lo: f32, hi: f32| (0..len).map(|_| rng.gen_range(lo..hi)).collect::<Vec<f32>>();
        ScanProblem {
            dims,
            u: v(n * d * l, -1.0, 1.0),
            delta: v(n * d * l, 0.001, 0.2),
            a: v(d * s, -4.0, -0.05),
            b: v(n * l * s, -1.0, 1.0),
            c: v(n * l * s, -1.0, 1.0),
            d_skip: v(d, -1.0, 1.0),
        }
    }

    pub fn inputs(&self) -> ScanInputs<'_, f32> {
        ScanInputs { u: &self.u, delta: &self.delta, a: &self.a, b: &self.b, c: &self.c, d_skip: &self.d_skip }
    }
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::randn(shape.to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}
