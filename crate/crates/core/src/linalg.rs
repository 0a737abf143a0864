//! Small fixed-size dense helpers shared by the element kernels.
//!
//! Element matrices are `D x D` with `D` in {2, 3}; the routines below avoid
//! the typenum-bounded decompositions of `nalgebra` so they stay usable from
//! code that is generic over `const D: usize`.

use nalgebra::{DMatrix, SMatrix, SVector};

pub type Point<const D: usize> = SVector<f64, D>;
pub type Mat<const D: usize> = SMatrix<f64, D, D>;

/// Determinant and inverse. Returns `None` when the matrix is exactly singular.
pub fn det_inv<const D: usize>(m: &Mat<D>) -> Option<(f64, Mat<D>)> {
    match D {
        1 => {
            let det = m[(0, 0)];
            if det == 0.0 {
                return None;
            }
            let mut inv = Mat::<D>::zeros();
            inv[(0, 0)] = 1.0 / det;
            Some((det, inv))
        }
        2 => {
            let (a, b, c, d) = (m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]);
            let det = a * d - b * c;
            if det == 0.0 {
                return None;
            }
            let s = 1.0 / det;
            let mut inv = Mat::<D>::zeros();
            inv[(0, 0)] = d * s;
            inv[(0, 1)] = -b * s;
            inv[(1, 0)] = -c * s;
            inv[(1, 1)] = a * s;
            Some((det, inv))
        }
        3 => {
            let c00 = m[(1, 1)] * m[(2, 2)] - m[(1, 2)] * m[(2, 1)];
            let c01 = m[(1, 2)] * m[(2, 0)] - m[(1, 0)] * m[(2, 2)];
            let c02 = m[(1, 0)] * m[(2, 1)] - m[(1, 1)] * m[(2, 0)];
            let det = m[(0, 0)] * c00 + m[(0, 1)] * c01 + m[(0, 2)] * c02;
            if det == 0.0 {
                return None;
            }
            let s = 1.0 / det;
            let mut inv = Mat::<D>::zeros();
            inv[(0, 0)] = c00 * s;
            inv[(1, 0)] = c01 * s;
            inv[(2, 0)] = c02 * s;
            inv[(0, 1)] = (m[(0, 2)] * m[(2, 1)] - m[(0, 1)] * m[(2, 2)]) * s;
            inv[(1, 1)] = (m[(0, 0)] * m[(2, 2)] - m[(0, 2)] * m[(2, 0)]) * s;
            inv[(2, 1)] = (m[(0, 1)] * m[(2, 0)] - m[(0, 0)] * m[(2, 1)]) * s;
            inv[(0, 2)] = (m[(0, 1)] * m[(1, 2)] - m[(0, 2)] * m[(1, 1)]) * s;
            inv[(1, 2)] = (m[(0, 2)] * m[(1, 0)] - m[(0, 0)] * m[(1, 2)]) * s;
            inv[(2, 2)] = (m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)]) * s;
            Some((det, inv))
        }
        _ => gauss_jordan(m),
    }
}

fn gauss_jordan<const D: usize>(m: &Mat<D>) -> Option<(f64, Mat<D>)> {
    let mut a = *m;
    let mut inv = Mat::<D>::identity();
    let mut det = 1.0;
    for col in 0..D {
        let pivot = (col..D)
            .max_by(|&i, &j| a[(i, col)].abs().total_cmp(&a[(j, col)].abs()))
            .unwrap_or(col);
        if a[(pivot, col)] == 0.0 {
            return None;
        }
        if pivot != col {
            a.swap_rows(pivot, col);
            inv.swap_rows(pivot, col);
            det = -det;
        }
        let p = a[(col, col)];
        det *= p;
        for k in 0..D {
            a[(col, k)] /= p;
            inv[(col, k)] /= p;
        }
        for row in 0..D {
            if row != col {
                let f = a[(row, col)];
                if f != 0.0 {
                    for k in 0..D {
                        a[(row, k)] -= f * a[(col, k)];
                        inv[(row, k)] -= f * inv[(col, k)];
                    }
                }
            }
        }
    }
    Some((det, inv))
}

pub fn det<const D: usize>(m: &Mat<D>) -> f64 {
    det_inv(m).map_or(0.0, |(d, _)| d)
}

/// Lower Cholesky factor, or `None` if the matrix is not positive definite.
pub fn cholesky<const D: usize>(m: &Mat<D>) -> Option<Mat<D>> {
    let mut l = Mat::<D>::zeros();
    for j in 0..D {
        let mut s = m[(j, j)];
        for k in 0..j {
            s -= l[(j, k)] * l[(j, k)];
        }
        if !(s > 0.0) {
            return None;
        }
        let ljj = s.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..D {
            let mut t = m[(i, j)];
            for k in 0..j {
                t -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = t / ljj;
        }
    }
    Some(l)
}

pub fn is_spd<const D: usize>(m: &Mat<D>) -> bool {
    is_symmetric(m, 1e-12) && cholesky(m).is_some()
}

pub fn is_symmetric<const D: usize>(m: &Mat<D>, rtol: f64) -> bool {
    let scale = m.amax().max(f64::MIN_POSITIVE);
    (m - m.transpose()).amax() <= rtol * scale
}

/// Eigen-decomposition of a symmetric matrix: ascending eigenvalues and the
/// matching orthonormal eigenvectors stored column-wise.
pub fn sym_eigen<const D: usize>(m: &Mat<D>) -> (Point<D>, Mat<D>) {
    if D == 2 {
        let (a, b, c) = (m[(0, 0)], 0.5 * (m[(0, 1)] + m[(1, 0)]), m[(1, 1)]);
        let mean = 0.5 * (a + c);
        let r = (0.25 * (a - c) * (a - c) + b * b).sqrt();
        let (l0, l1) = (mean - r, mean + r);
        // eigenvector of the larger eigenvalue
        let v1 = if r == 0.0 {
            [1.0, 0.0]
        } else if a >= c {
            let (x, y) = (l1 - c, b);
            let n = x.hypot(y);
            [x / n, y / n]
        } else {
            let (x, y) = (b, l1 - a);
            let n = x.hypot(y);
            [x / n, y / n]
        };
        let mut vals = Point::<D>::zeros();
        vals[0] = l0;
        vals[1] = l1;
        let mut vecs = Mat::<D>::zeros();
        vecs[(0, 0)] = -v1[1];
        vecs[(1, 0)] = v1[0];
        vecs[(0, 1)] = v1[0];
        vecs[(1, 1)] = v1[1];
        return (vals, vecs);
    }
    let dm = DMatrix::from_fn(D, D, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]));
    let eig = dm.symmetric_eigen();
    let mut order: Vec<usize> = (0..D).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let mut vals = Point::<D>::zeros();
    let mut vecs = Mat::<D>::zeros();
    for (dst, &src) in order.iter().enumerate() {
        vals[dst] = eig.eigenvalues[src];
        for r in 0..D {
            vecs[(r, dst)] = eig.eigenvectors[(r, src)];
        }
    }
    (vals, vecs)
}

/// Rebuild `V diag(f(lambda)) V^T` from a symmetric eigen-decomposition.
pub fn sym_map<const D: usize>(m: &Mat<D>, f: impl Fn(f64) -> f64) -> Mat<D> {
    let (vals, vecs) = sym_eigen(m);
    let mut out = Mat::<D>::zeros();
    for k in 0..D {
        let v = vecs.column(k);
        out += f(vals[k]) * v * v.transpose();
    }
    out
}

pub fn min_eigenvalue<const D: usize>(m: &Mat<D>) -> f64 {
    sym_eigen(m).0[0]
}

pub fn frobenius_dot<const D: usize>(a: &Mat<D>, b: &Mat<D>) -> f64 {
    a.component_mul(b).sum()
}

/// Fixed-order pairwise summation; the result only depends on the slice order.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if values.len() <= BLOCK {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

pub fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}
