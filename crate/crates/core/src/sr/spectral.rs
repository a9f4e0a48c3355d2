//! Spectral normalization by power iteration with persistent singular vectors.

use std::sync::Arc;

use rand::Rng;

use crate::error::bail_arg;
use crate::nn::Tensor;
use crate::rng::normal_vec;
use crate::{Result, Scalar};

/// Running estimates of the leading left/right singular vectors of a weight
/// viewed as `rows × cols` (`rows` = output channels).
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralState<T> {
    pub u: Vec<T>,
    pub v: Vec<T>,
}

fn normalize<T: Scalar>(x: &mut [T]) -> T {
    let n = x.iter().map(|&v| v * v).sum::<T>().sqrt();
    if n > T::zero() {
        x.iter_mut().for_each(|v| *v /= n);
    }
    n
}

impl<T: Scalar> SpectralState<T> {
    pub fn new<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let mut u = normal_vec(rng, rows);
        let mut v = normal_vec(rng, cols);
        normalize(&mut u);
        normalize(&mut v);
        Self { u, v }
    }

    pub fn for_weight<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let rows = shape[0];
        Self::new(rows, shape.iter().product::<usize>() / rows, rng)
    }

    pub fn u_arc(&self) -> Arc<[T]> {
        self.u.clone().into()
    }

    pub fn v_arc(&self) -> Arc<[T]> {
        self.v.clone().into()
    }

    /// `iters` rounds of `v ← Wᵀu/|Wᵀu|`, `u ← Wv/|Wv|`; returns `σ = uᵀWv`.
    pub fn power_iterate(&mut self, w: &[T], iters: usize) -> T {
        let (rows, cols) = (self.u.len(), self.v.len());
        for _ in 0..iters {
            let mut nv = vec![T::zero(); cols];
            for i in 0..rows {
                let ui = self.u[i];
                for (j, o) in nv.iter_mut().enumerate() {
                    *o += w[i * cols + j] * ui;
                }
            }
            if normalize(&mut nv) == T::zero() {
                break;
            }
            self.v = nv;
            let mut nu: Vec<T> = (0..rows)
                .map(|i| (0..cols).map(|j| w[i * cols + j] * self.v[j]).sum())
                .collect();
            if normalize(&mut nu) == T::zero() {
                break;
            }
            self.u = nu;
        }
        self.sigma(w)
    }

    pub fn sigma(&self, w: &[T]) -> T {
        let cols = self.v.len();
        self.u
            .iter()
            .enumerate()
            .map(|(i, &ui)| ui * (0..cols).map(|j| w[i * cols + j] * self.v[j]).sum::<T>())
            .sum()
    }
}

/// `weight / σ_max`, with `σ_max` refined by `n_power_iters` iterations of the
/// persistent `state`. A zero matrix comes back unchanged.
pub fn spectral_normalize<T: Scalar>(weight: &Tensor<T>, n_power_iters: usize, state: &mut SpectralState<T>) -> Result<Tensor<T>> {
    if n_power_iters == 0 {
        bail_arg!("spectral normalization needs at least one power iteration");
    }
    if state.u.len() * state.v.len() != weight.len() {
        bail_arg!("spectral state {}x{} does not match weight {:?}", state.u.len(), state.v.len(), weight.shape());
    }
    let mut sigma = state.power_iterate(weight.data(), n_power_iters);
    if sigma.abs() < T::lit(1e-30) {
        sigma = T::one();
    }
    Tensor::new(weight.shape().to_vec(), weight.data().iter().map(|&x| x / sigma).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use nalgebra::DMatrix;

    fn top_sv(t: &Tensor<f64>, rows: usize) -> f64 {
        let cols = t.len() / rows;
        DMatrix::from_row_slice(rows, cols, t.data()).singular_values().max()
    }

    #[test]
    fn diagonal_matrix() {
        let w = Tensor::<f64>::new(vec![2, 2], vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        let mut st = SpectralState::new(2, 2, &mut rng_from_seed(1));
        let n = spectral_normalize(&w, 30, &mut st).unwrap();
        let d = n.data();
        assert!((d[0] - 1.0).abs() < 1e-9 && (d[3] - 1.0 / 3.0).abs() < 1e-9);
        assert!(d[1].abs() < 1e-12 && d[2].abs() < 1e-12);
    }

    #[test]
    fn unit_norm_and_zero_matrices() {
        let mut rng = rng_from_seed(2);
        let q = DMatrix::<f64>::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0)).qr().q();
        let w = Tensor::new(vec![5, 5], q.transpose().as_slice().to_vec()).unwrap();
        let mut st = SpectralState::new(5, 5, &mut rng);
        let n = spectral_normalize(&w, 3, &mut st).unwrap();
        for (a, b) in n.data().iter().zip(w.data()) {
            assert!((a - b).abs() < 1e-4);
        }
        let z = Tensor::<f64>::zeros(vec![3, 4]);
        let mut st = SpectralState::new(3, 4, &mut rng);
        assert_eq!(spectral_normalize(&z, 2, &mut st).unwrap(), z);
        assert!(spectral_normalize(&z, 0, &mut st).is_err());
    }

    #[test]
    fn conv_weight_is_flattened_per_output_channel() {
        let mut rng = rng_from_seed(3);
        let w = Tensor::new(vec![4, 2, 3, 3], normal_vec(&mut rng, 72)).unwrap();
        let mut st = SpectralState::for_weight(w.shape(), &mut rng);
        assert_eq!((st.u.len(), st.v.len()), (4, 18));
        let n = spectral_normalize(&w, 50, &mut st).unwrap();
        assert!((top_sv(&n, 4) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn persistent_vectors_converge_on_random_square() {
        let mut rng = rng_from_seed(4);
        let w = Tensor::new(vec![64, 64], normal_vec(&mut rng, 64 * 64)).unwrap();
        let mut st = SpectralState::new(64, 64, &mut rng);
        let mut errs = Vec::new();
        for _ in 0..40 {
            let n = spectral_normalize(&w, 5, &mut st).unwrap();
            errs.push((top_sv(&n, 64) - 1.0).abs());
        }
        assert!(errs[39] < 1e-3, "{:?}", &errs[..5]);
        assert!(errs[39] <= errs[0]);
    }
}
