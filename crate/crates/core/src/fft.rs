//! Complex m-dimensional FFT built from rustfft 1-D plans, one axis at a time.

use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

pub(crate) struct FftNd {
    shape: Vec<usize>,
    forward: Vec<Arc<dyn Fft<f64>>>,
    inverse: Vec<Arc<dyn Fft<f64>>>,
}

impl FftNd {
    pub(crate) fn new(shape: &[usize]) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            shape: shape.to_vec(),
            forward: shape.iter().map(|&n| planner.plan_fft_forward(n)).collect(),
            inverse: shape.iter().map(|&n| planner.plan_fft_inverse(n)).collect(),
        }
    }

    /// Unnormalized forward transform (`e^{-2πi k·s}` kernel), in place.
    pub(crate) fn forward(&self, data: &mut [Complex64]) {
        self.process(data, false);
    }

    /// Unnormalized inverse transform, in place.
    pub(crate) fn inverse(&self, data: &mut [Complex64]) {
        self.process(data, true);
    }

    fn process(&self, data: &mut [Complex64], inverse: bool) {
        let total: usize = self.shape.iter().product();
        assert_eq!(data.len(), total, "buffer does not match FFT shape");
        for axis in 0..self.shape.len() {
            let len = self.shape[axis];
            let inner: usize = self.shape[axis + 1..].iter().product();
            let plan = if inverse {
                &self.inverse[axis]
            } else {
                &self.forward[axis]
            };
            if inner == 1 {
                run_lines(plan.as_ref(), data, len);
                continue;
            }
            let mut buf = vec![Complex64::default(); len * inner];
            for block in data.chunks_mut(len * inner) {
                for j in 0..len {
                    for i in 0..inner {
                        buf[i * len + j] = block[j * inner + i];
                    }
                }
                run_lines(plan.as_ref(), &mut buf, len);
                for j in 0..len {
                    for i in 0..inner {
                        block[j * inner + i] = buf[i * len + j];
                    }
                }
            }
        }
    }
}

fn run_lines(plan: &dyn Fft<f64>, data: &mut [Complex64], len: usize) {
    const LINES_PER_TASK: usize = 64;
    if data.len() <= len * LINES_PER_TASK {
        plan.process(data);
    } else {
        data.par_chunks_mut(len * LINES_PER_TASK)
            .for_each(|chunk| plan.process(chunk));
    }
}
