//! Unitary 2-D FFT over the last two axes.
//!
//! Each direction is scaled by `1/sqrt(H*W)` (`1/N` on an `N x N` grid), so the
//! forward transform is unitary: its adjoint is the inverse transform and
//! Parseval holds with equality.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FftDirection {
    Forward,
    Inverse,
}

impl FftDirection {
    pub fn flip(self) -> Self {
        match self {
            FftDirection::Forward => FftDirection::Inverse,
            FftDirection::Inverse => FftDirection::Forward,
        }
    }
}

thread_local! {
    static PLANS: RefCell<(FftPlanner<f64>, HashMap<(usize, FftDirection), Arc<dyn Fft<f64>>>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

fn plan(n: usize, dir: FftDirection) -> Arc<dyn Fft<f64>> {
    PLANS.with(|p| {
        let mut p = p.borrow_mut();
        let (planner, cache) = &mut *p;
        cache
            .entry((n, dir))
            .or_insert_with(|| match dir {
                FftDirection::Forward => planner.plan_fft_forward(n),
                FftDirection::Inverse => planner.plan_fft_inverse(n),
            })
            .clone()
    })
}

/// In-place unitary 2-D transform of every trailing `h x w` plane in `data`.
pub fn fft2_inplace(data: &mut [Complex64], h: usize, w: usize, dir: FftDirection) {
    let plane = h * w;
    if plane == 0 {
        return;
    }
    let row_fft = plan(w, dir);
    let col_fft = plan(h, dir);
    let mut scratch = vec![Complex64::new(0.0, 0.0); row_fft.get_inplace_scratch_len().max(col_fft.get_inplace_scratch_len())];
    let mut t = vec![Complex64::new(0.0, 0.0); plane];
    let scale = 1.0 / (plane as f64).sqrt();
    for block in data.chunks_exact_mut(plane) {
        row_fft.process_with_scratch(block, &mut scratch);
        transpose(block, &mut t, h, w);
        col_fft.process_with_scratch(&mut t, &mut scratch);
        transpose(&t, block, w, h);
        for v in block.iter_mut() {
            *v *= scale;
        }
    }
}

/// `dst[j*h + i] = src[i*w + j]` for an `h x w` source.
fn transpose(src: &[Complex64], dst: &mut [Complex64], h: usize, w: usize) {
    for i in 0..h {
        for j in 0..w {
            dst[j * h + i] = src[i * w + j];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn impulse_gives_constant_quarter() {
        let mut d = vec![Complex64::new(0.0, 0.0); 16];
        d[0] = Complex64::new(1.0, 0.0);
        fft2_inplace(&mut d, 4, 4, FftDirection::Forward);
        for v in d {
            assert!((v - Complex64::new(0.25, 0.0)).norm() < 1e-15);
        }
    }
}
