//! Multi-dimensional complex FFT over flat, lexicographically ordered cubes.
//!
//! rustfft only transforms contiguous 1-d lines. Axis `a` of an `n^d` cube is
//! handled by transposing each `n x stride` block so the axis becomes
//! contiguous, transforming the rows in one batch, and transposing back.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Forward/inverse plans for an `n^dim` periodic cube.
#[derive(Clone)]
pub struct FftNd {
    n: usize,
    dim: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for FftNd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FftNd").field("n", &self.n).field("dim", &self.dim).finish()
    }
}

/// Per-worker scratch space. Plans are shared; scratch is not.
#[derive(Debug, Default)]
pub struct FftScratch {
    block: Vec<Complex64>,
    fft: Vec<Complex64>,
}

impl FftNd {
    pub fn new(n: usize, dim: usize) -> Self {
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(n);
        let inverse = planner.plan_fft_inverse(n);
        Self { n, dim, forward, inverse }
    }

    pub fn len(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Unnormalised forward transform, in place.
    pub fn forward(&self, data: &mut [Complex64], scratch: &mut FftScratch) {
        self.transform(data, scratch, &self.forward);
    }

    /// Inverse transform including the `1/n^d` normalisation, in place.
    pub fn inverse(&self, data: &mut [Complex64], scratch: &mut FftScratch) {
        self.transform(data, scratch, &self.inverse);
        let norm = 1.0 / self.len() as f64;
        for v in data.iter_mut() {
            *v *= norm;
        }
    }

    fn transform(&self, data: &mut [Complex64], scratch: &mut FftScratch, plan: &Arc<dyn Fft<f64>>) {
        assert_eq!(data.len(), self.len(), "buffer does not match plan size");
        let n = self.n;
        let need = plan.get_inplace_scratch_len();
        if scratch.fft.len() < need {
            scratch.fft.resize(need, Complex64::default());
        }
        // Last axis is contiguous.
        plan.process_with_scratch(data, &mut scratch.fft[..need]);
        let total = data.len();
        let mut stride = n;
        for _ in 1..self.dim {
            let block_len = stride * n;
            if scratch.block.len() < block_len {
                scratch.block.resize(block_len, Complex64::default());
            }
            let block = &mut scratch.block[..block_len];
            for chunk in data.chunks_exact_mut(block_len) {
                // chunk is an (n x stride) row-major matrix; gather columns.
                for row in 0..n {
                    let src = &chunk[row * stride..(row + 1) * stride];
                    for (col, v) in src.iter().enumerate() {
                        block[col * n + row] = *v;
                    }
                }
                plan.process_with_scratch(block, &mut scratch.fft[..need]);
                for row in 0..n {
                    let dst = &mut chunk[row * stride..(row + 1) * stride];
                    for (col, v) in dst.iter_mut().enumerate() {
                        *v = block[col * n + row];
                    }
                }
            }
            stride *= n;
            debug_assert!(stride <= total);
        }
    }
}
