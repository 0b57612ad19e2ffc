//! Multi-axis FFTs on the uniform `n^rank` row-major arrays used for
//! configuration-space storage.
//!
//! All transforms here are *raw*: no measure factors and no sign dressing
//! for the centred position grid. The physical conventions live in
//! [`crate::lattice`].

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

type Plans = (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>);

thread_local! {
    static PLANS: RefCell<HashMap<usize, Plans>> = RefCell::new(HashMap::new());
}

fn plans(n: usize) -> Plans {
    PLANS.with(|cache| {
        cache
            .borrow_mut()
            .entry(n)
            .or_insert_with(|| {
                let mut planner = FftPlanner::new();
                (planner.plan_fft_forward(n), planner.plan_fft_inverse(n))
            })
            .clone()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Σ_i f_i e^{-2πi j i / n}
    Forward,
    /// Σ_j f_j e^{+2πi j i / n}, unnormalized
    Inverse,
}

/// Transform `data` (shape `[n; rank]`, row-major) along each axis in `axes`.
pub fn fft_axes(data: &mut [Complex64], n: usize, rank: usize, axes: &[usize], dir: Direction) {
    debug_assert_eq!(data.len(), n.pow(rank as u32));
    let (fwd, inv) = plans(n);
    let plan = match dir {
        Direction::Forward => fwd,
        Direction::Inverse => inv,
    };
    let mut line = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); plan.get_inplace_scratch_len()];
    for &axis in axes {
        assert!(axis < rank);
        let stride = n.pow((rank - 1 - axis) as u32);
        let outer = data.len() / (n * stride);
        for o in 0..outer {
            for s in 0..stride {
                let base = o * n * stride + s;
                for (i, v) in line.iter_mut().enumerate() {
                    *v = data[base + i * stride];
                }
                plan.process_with_scratch(&mut line, &mut scratch);
                for (i, v) in line.iter().enumerate() {
                    data[base + i * stride] = *v;
                }
            }
        }
    }
}

/// Transform along every axis.
pub fn fft_all(data: &mut [Complex64], n: usize, rank: usize, dir: Direction) {
    let axes: Vec<usize> = (0..rank).collect();
    fft_axes(data, n, rank, &axes, dir);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_dft(f: &[Complex64], sign: f64) -> Vec<Complex64> {
        let n = f.len();
        (0..n)
            .map(|j| {
                f.iter()
                    .enumerate()
                    .map(|(i, v)| {
                        let ph = sign * 2.0 * std::f64::consts::PI * (i * j) as f64 / n as f64;
                        v * Complex64::from_polar(1.0, ph)
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn one_axis_matches_naive_dft() {
        let f: Vec<Complex64> = (0..16)
            .map(|i| Complex64::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()))
            .collect();
        let mut g = f.clone();
        fft_all(&mut g, 16, 1, Direction::Forward);
        for (a, b) in g.iter().zip(naive_dft(&f, -1.0)) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn two_axes_separable() {
        let n = 8;
        let f: Vec<Complex64> = (0..n * n)
            .map(|i| Complex64::new(i as f64, (i * i % 7) as f64))
            .collect();
        let mut g = f.clone();
        fft_all(&mut g, n, 2, Direction::Forward);
        // direct 2D sum at a few points
        for &(j0, j1) in &[(0, 0), (1, 3), (7, 5)] {
            let mut s = Complex64::new(0.0, 0.0);
            for i0 in 0..n {
                for i1 in 0..n {
                    let ph = -2.0 * std::f64::consts::PI * ((i0 * j0 + i1 * j1) as f64) / n as f64;
                    s += f[i0 * n + i1] * Complex64::from_polar(1.0, ph);
                }
            }
            assert!((g[j0 * n + j1] - s).norm() < 1e-9);
        }
        fft_all(&mut g, n, 2, Direction::Inverse);
        for (a, b) in g.iter().zip(&f) {
            assert!((a / (n * n) as f64 - b).norm() < 1e-12);
        }
    }
}
