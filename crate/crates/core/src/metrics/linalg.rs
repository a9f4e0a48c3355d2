//! Small dense symmetric linear algebra: cyclic Jacobi eigendecomposition and
//! the PSD square root built on it.

use crate::Scalar;

/// Row-major square matrix helpers on flat slices.
pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            if aik == T::zero() {
                continue;
            }
            for j in 0..d {
                out[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    out
}

pub(crate) fn symmetrize<T: Scalar>(m: &mut [T], d: usize) {
    let half = T::lit(0.5);
    for i in 0..d {
        for j in (i + 1)..d {
            let s = (m[i * d + j] + m[j * d + i]) * half;
            m[i * d + j] = s;
            m[j * d + i] = s;
        }
    }
}

/// Eigenvalues and eigenvectors of a symmetric matrix. Column `k` of the
/// returned row-major `vectors` pairs with `values[k]`.
pub fn symmetric_eigen<T: Scalar>(m: &[T], d: usize) -> (Vec<T>, Vec<T>) {
    let mut a = m.to_vec();
    symmetrize(&mut a, d);
    let mut v = vec![T::zero(); d * d];
    for i in 0..d {
        v[i * d + i] = T::one();
    }
    let scale: T = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    if scale == T::zero() {
        return (vec![T::zero(); d], v);
    }
    let tol = T::epsilon() * scale;
    for _sweep in 0..100 {
        let off: T = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * d + j] * a[i * d + j])
            .sum::<T>()
            .sqrt();
        if off <= tol {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq.abs() <= T::min_positive_value() {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..d).map(|i| a[i * d + i]).collect(), v)
}

/// Eigenvalues at or below this are treated as zero when taking roots.
pub const EIGEN_CLAMP: f64 = 1e-10;

pub(crate) fn clamp_eigen<T: Scalar>(x: T) -> T {
    if x <= T::lit(EIGEN_CLAMP) {
        T::zero()
    } else {
        x
    }
}

/// Principal square root of a symmetric PSD matrix.
pub fn psd_sqrt<T: Scalar>(m: &[T], d: usize) -> Vec<T> {
    let (vals, vecs) = symmetric_eigen(m, d);
    let roots: Vec<T> = vals.into_iter().map(|l| clamp_eigen(l).sqrt()).collect();
    let mut out = vec![T::zero(); d * d];
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = (0..d).map(|k| vecs[i * d + k] * roots[k] * vecs[j * d + k]).sum();
        }
    }
    symmetrize(&mut out, d);
    out
}
