//! Small dense linear algebra: complex LU with partial pivoting for the
//! per-bin FDN systems, and the skew-symmetric matrix exponential used to
//! parameterise orthogonal feedback matrices.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// In-place LU factorisation `P A = L U` of a small row-major complex matrix.
#[derive(Debug, Clone)]
pub(crate) struct ComplexLu {
    n: usize,
    lu: Vec<Complex64>,
    perm: Vec<usize>,
}

impl ComplexLu {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            n,
            lu: vec![Complex64::new(0.0, 0.0); n * n],
            perm: (0..n).collect(),
        }
    }

    /// Mutable access to the matrix storage before calling [`factor`](Self::factor).
    pub(crate) fn matrix_mut(&mut self) -> &mut [Complex64] {
        &mut self.lu
    }

    /// Factorises the stored matrix. Returns `false` on an exactly zero or
    /// non-finite pivot.
    pub(crate) fn factor(&mut self) -> bool {
        let n = self.n;
        for (i, p) in self.perm.iter_mut().enumerate() {
            *p = i;
        }
        let a = &mut self.lu;
        for k in 0..n {
            let mut piv = k;
            let mut best = a[k * n + k].norm_sqr();
            for i in k + 1..n {
                let v = a[i * n + k].norm_sqr();
                if v > best {
                    best = v;
                    piv = i;
                }
            }
            if !(best > 0.0) || !best.is_finite() {
                return false;
            }
            if piv != k {
                for j in 0..n {
                    a.swap(k * n + j, piv * n + j);
                }
                self.perm.swap(k, piv);
            }
            let inv = a[k * n + k].inv();
            let (top, bottom) = a.split_at_mut((k + 1) * n);
            let pivot_row = &top[k * n + k + 1..];
            for row in bottom.chunks_exact_mut(n) {
                let f = row[k] * inv;
                row[k] = f;
                if f != Complex64::new(0.0, 0.0) {
                    for (x, &u) in row[k + 1..].iter_mut().zip(pivot_row) {
                        *x -= f * u;
                    }
                }
            }
        }
        true
    }

    /// Solves `A x = rhs`; `out` receives x.
    pub(crate) fn solve(&self, rhs: &[Complex64], out: &mut [Complex64]) {
        let n = self.n;
        let a = &self.lu;
        for i in 0..n {
            let row = &a[i * n..i * n + i];
            let s = row.iter().zip(&out[..i]).fold(rhs[self.perm[i]], |s, (l, x)| s - l * x);
            out[i] = s;
        }
        for i in (0..n).rev() {
            let row = &a[i * n + i + 1..(i + 1) * n];
            let s = row.iter().zip(&out[i + 1..]).fold(out[i], |s, (u, x)| s - u * x);
            out[i] = s / a[i * n + i];
        }
    }

    /// Solves `Aᵀ y = rhs` (plain transpose); `out` receives y.
    pub(crate) fn solve_transpose(&self, rhs: &[Complex64], out: &mut [Complex64]) {
        let n = self.n;
        let a = &self.lu;
        // Uᵀ w = rhs
        let mut w = vec![Complex64::new(0.0, 0.0); n];
        for i in 0..n {
            let mut s = rhs[i];
            for j in 0..i {
                s -= a[j * n + i] * w[j];
            }
            w[i] = s / a[i * n + i];
        }
        // Lᵀ v = w
        for i in (0..n).rev() {
            let mut s = w[i];
            for j in i + 1..n {
                s -= a[j * n + i] * w[j];
            }
            w[i] = s;
        }
        for i in 0..n {
            out[self.perm[i]] = w[i];
        }
    }
}

/// `expm(W − Wᵀ)`: an orthogonal matrix for any square `w`.
pub fn skew_exp(w: &DMatrix<f64>) -> DMatrix<f64> {
    let s = w - w.transpose();
    s.exp()
}

/// Pulls a gradient with respect to `U = expm(W − Wᵀ)` back to `W`.
///
/// The adjoint of the Fréchet derivative of `expm` at `S` is the Fréchet
/// derivative at `Sᵀ`, read off the upper-right block of
/// `expm([[Sᵀ, G], [0, Sᵀ]])`.
pub fn skew_exp_pullback(w: &DMatrix<f64>, grad_u: &DMatrix<f64>) -> DMatrix<f64> {
    let n = w.nrows();
    let st = (w - w.transpose()).transpose();
    let mut block = DMatrix::<f64>::zeros(2 * n, 2 * n);
    block.view_mut((0, 0), (n, n)).copy_from(&st);
    block.view_mut((n, n), (n, n)).copy_from(&st);
    block.view_mut((0, n), (n, n)).copy_from(grad_u);
    let e = block.exp();
    let gs = e.view((0, n), (n, n)).into_owned();
    &gs - gs.transpose()
}

/// Random orthogonal matrix `expm(W − Wᵀ)` with `W` entries i.i.d. `N(0, std²)`.
pub fn random_orthogonal_with_std(n: usize, seed: u64, std: f64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = DMatrix::from_fn(n, n, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        std * z
    });
    skew_exp(&w)
}

/// Random orthogonal matrix from a standard-normal generator matrix.
pub fn random_orthogonal(n: usize, seed: u64) -> crate::Result<DMatrix<f64>> {
    if n == 0 {
        return Err(crate::error::invalid("matrix size must be at least 1"));
    }
    Ok(random_orthogonal_with_std(n, seed, 1.0))
}

/// `max |UᵀU − I|` over all entries.
pub fn orthogonality_error(u: &DMatrix<f64>) -> f64 {
    let g = u.transpose() * u;
    let n = g.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g[(i, j)] - target).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn matvec(a: &[Complex64], x: &[Complex64], n: usize, transpose: bool) -> Vec<Complex64> {
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| if transpose { a[j * n + i] } else { a[i * n + j] } * x[j])
                    .sum()
            })
            .collect()
    }

    #[test]
    fn lu_solves_and_transpose_solves() {
        let n = 4;
        let a: Vec<Complex64> = (0..n * n)
            .map(|k| c(((k * 37) % 11) as f64 - 5.0, ((k * 13) % 7) as f64 - 3.0))
            .collect();
        let b: Vec<Complex64> = (0..n).map(|k| c(k as f64 + 1.0, -(k as f64))).collect();
        let mut lu = ComplexLu::new(n);
        lu.matrix_mut().copy_from_slice(&a);
        assert!(lu.factor());
        let mut x = vec![c(0.0, 0.0); n];
        lu.solve(&b, &mut x);
        let r = matvec(&a, &x, n, false);
        for (ri, bi) in r.iter().zip(&b) {
            assert!((ri - bi).norm() < 1e-12);
        }
        lu.solve_transpose(&b, &mut x);
        let r = matvec(&a, &x, n, true);
        for (ri, bi) in r.iter().zip(&b) {
            assert!((ri - bi).norm() < 1e-12);
        }
    }

    #[test]
    fn singular_matrix_detected() {
        let mut lu = ComplexLu::new(2);
        lu.matrix_mut()
            .copy_from_slice(&[c(1.0, 0.0), c(2.0, 0.0), c(2.0, 0.0), c(4.0, 0.0)]);
        assert!(!lu.factor());
    }

    #[test]
    fn zero_generator_gives_identity() {
        let u = random_orthogonal_with_std(5, 3, 0.0);
        assert_eq!(u, DMatrix::identity(5, 5));
    }

    #[test]
    fn two_by_two_is_rotation() {
        for seed in 0..10 {
            let u = random_orthogonal(2, seed).unwrap();
            assert!((u[(0, 0)] - u[(1, 1)]).abs() < 1e-14);
            assert!((u[(0, 1)] + u[(1, 0)]).abs() < 1e-14);
            assert!((u.determinant() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn six_by_six_orthogonal() {
        let u = random_orthogonal(6, 42).unwrap();
        assert!(orthogonality_error(&u) < 1e-10);
    }

    #[test]
    fn pullback_matches_finite_differences() {
        let n = 3;
        let w = DMatrix::from_fn(n, n, |i, j| 0.3 * (i as f64) - 0.2 * (j as f64) + 0.1);
        let g = DMatrix::from_fn(n, n, |i, j| ((i * 3 + j) % 5) as f64 - 2.0);
        let f = |w: &DMatrix<f64>| skew_exp(w).component_mul(&g).sum();
        let analytic = skew_exp_pullback(&w, &g);
        let h = 1e-6;
        for i in 0..n {
            for j in 0..n {
                let mut wp = w.clone();
                wp[(i, j)] += h;
                let mut wm = w.clone();
                wm[(i, j)] -= h;
                let fd = (f(&wp) - f(&wm)) / (2.0 * h);
                assert!((fd - analytic[(i, j)]).abs() < 1e-8, "{i},{j}");
            }
        }
    }
}
