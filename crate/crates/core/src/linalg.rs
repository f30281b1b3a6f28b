//! Thin bridge between `ndarray` storage and the `faer` decompositions.
//!
//! Everything in the crate stores dense matrices as `Array2<Complex64>`; the
//! O(n³) kernels (eigendecompositions, LU, the Padé exponential) convert to
//! `faer` once and back once.

use faer::linalg::solvers::{DenseSolveCore, Solve};
use faer::{Mat, MatRef, Side};
use ndarray::{Array1, Array2, ArrayView2};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

pub(crate) fn to_faer(a: ArrayView2<'_, C64>) -> Mat<C64> {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

pub(crate) fn from_faer(m: MatRef<'_, C64>) -> Array2<C64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

pub fn identity(n: usize) -> Array2<C64> {
    Array2::from_diag_elem(n, ONE)
}

/// Conjugate transpose.
pub fn adjoint(a: &Array2<C64>) -> Array2<C64> {
    a.t().mapv(|z| z.conj())
}

pub fn frobenius_norm(a: ArrayView2<'_, C64>) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

fn one_norm(a: &Mat<C64>) -> f64 {
    (0..a.ncols())
        .map(|j| (0..a.nrows()).map(|i| a[(i, j)].norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &Array2<C64>, b: &Array2<C64>) -> Array2<C64> {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    let mut out = Array2::zeros((ar * br, ac * bc));
    for ((i, j), &x) in a.indexed_iter() {
        if x == ZERO {
            continue;
        }
        let mut block = out.slice_mut(ndarray::s![i * br..(i + 1) * br, j * bc..(j + 1) * bc]);
        block.zip_mut_with(b, |o, &y| *o = x * y);
    }
    out
}

/// Relative Frobenius deviation from Hermiticity, `‖A − A†‖ / max(‖A‖, 1e-300)`.
pub fn hermiticity_defect(a: &Array2<C64>) -> f64 {
    let diff = a - &adjoint(a);
    frobenius_norm(diff.view()) / frobenius_norm(a.view()).max(1e-300)
}

/// Eigendecomposition of a Hermitian matrix; eigenvalues ascending, eigenvectors in columns.
pub fn eigh(a: &Array2<C64>) -> Result<(Array1<f64>, Array2<C64>)> {
    let m = to_faer(a.view());
    let evd = m
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Linalg(format!("hermitian eigendecomposition: {e:?}")))?;
    let s = evd.S().column_vector();
    let values = Array1::from_iter((0..a.nrows()).map(|i| s[i].re));
    Ok((values, from_faer(evd.U())))
}

/// Eigendecomposition of a general complex matrix; eigenvectors in columns.
pub fn eig(a: &Array2<C64>) -> Result<(Array1<C64>, Array2<C64>)> {
    let m = to_faer(a.view());
    let evd = m
        .eigen()
        .map_err(|e| Error::Linalg(format!("eigendecomposition: {e:?}")))?;
    let s = evd.S().column_vector();
    let values = Array1::from_iter((0..a.nrows()).map(|i| s[i]));
    Ok((values, from_faer(evd.U())))
}

pub fn eigenvalues(a: &Array2<C64>) -> Result<Vec<C64>> {
    to_faer(a.view())
        .eigenvalues()
        .map_err(|e| Error::Linalg(format!("eigenvalues: {e:?}")))
}

pub fn inverse(a: &Array2<C64>) -> Array2<C64> {
    let lu = to_faer(a.view()).partial_piv_lu();
    from_faer(lu.inverse().as_ref())
}

/// Solve `a x = b` for a square `a`.
pub fn solve(a: &Array2<C64>, b: &Array2<C64>) -> Array2<C64> {
    let lu = to_faer(a.view()).partial_piv_lu();
    from_faer(lu.solve(to_faer(b.view())).as_ref())
}

/// Real symmetric eigendecomposition; eigenvalues ascending.
pub fn eigh_real(a: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let m = Mat::<f64>::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]]);
    let evd = m
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Linalg(format!("symmetric eigendecomposition: {e:?}")))?;
    let s = evd.S().column_vector();
    let u = evd.U();
    let values = Array1::from_iter((0..a.nrows()).map(|i| s[i]));
    let vectors = Array2::from_shape_fn(a.dim(), |(i, j)| u[(i, j)]);
    Ok((values, vectors))
}

/// Solve a real square system.
pub fn solve_real(a: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let m = Mat::<f64>::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]]);
    let rhs = Mat::<f64>::from_fn(b.len(), 1, |i, _| b[i]);
    let x = m.partial_piv_lu().solve(rhs);
    Array1::from_iter((0..b.len()).map(|i| x[(i, 0)]))
}

fn lincomb(n: usize, terms: &[(f64, &Mat<C64>)], diag: f64) -> Mat<C64> {
    Mat::from_fn(n, n, |i, j| {
        let mut z = terms.iter().fold(ZERO, |acc, (c, m)| acc + m[(i, j)] * *c);
        if i == j {
            z += diag;
        }
        z
    })
}

const PADE3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE7: [f64; 8] = [
    17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
];
const PADE9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA: [(usize, f64); 4] = [
    (3, 1.495585217958292e-2),
    (5, 2.539398330063230e-1),
    (7, 9.504178996162932e-1),
    (9, 2.097847961257068),
];
const THETA13: f64 = 5.371920351148152;

/// Matrix exponential by scaling and squaring with a Padé approximant
/// (Higham 2005 degree selection).
pub fn expm(a: &Array2<C64>) -> Array2<C64> {
    let n = a.nrows();
    if n == 0 {
        return Array2::zeros((0, 0));
    }
    let a = to_faer(a.view());
    let norm = one_norm(&a);
    let a2 = &a * &a;

    for &(degree, theta) in &THETA {
        if norm <= theta {
            let coeffs: &[f64] = match degree {
                3 => &PADE3,
                5 => &PADE5,
                7 => &PADE7,
                _ => &PADE9,
            };
            let mut powers = vec![a2.clone()];
            while powers.len() < degree / 2 {
                let next = powers.last().unwrap() * &a2;
                powers.push(next);
            }
            let odd: Vec<(f64, &Mat<C64>)> = powers
                .iter()
                .enumerate()
                .map(|(k, p)| (coeffs[2 * k + 3], p))
                .collect();
            let even: Vec<(f64, &Mat<C64>)> = powers
                .iter()
                .enumerate()
                .map(|(k, p)| (coeffs[2 * k + 2], p))
                .collect();
            let u = &a * lincomb(n, &odd, coeffs[1]);
            let v = lincomb(n, &even, coeffs[0]);
            return from_faer(pade_solve(&u, &v).as_ref());
        }
    }

    let s = (norm / THETA13).log2().ceil().max(0.0) as i32;
    let scale = 0.5f64.powi(s);
    let a1 = lincomb(n, &[(scale, &a)], 0.0);
    let a2 = lincomb(n, &[(scale * scale, &a2)], 0.0);
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let b = &PADE13;
    let inner_u = &a6 * lincomb(n, &[(b[13], &a6), (b[11], &a4), (b[9], &a2)], 0.0);
    let u_poly = lincomb(
        n,
        &[(1.0, &inner_u), (b[7], &a6), (b[5], &a4), (b[3], &a2)],
        b[1],
    );
    let u = &a1 * u_poly;
    let inner_v = &a6 * lincomb(n, &[(b[12], &a6), (b[10], &a4), (b[8], &a2)], 0.0);
    let v = lincomb(
        n,
        &[(1.0, &inner_v), (b[6], &a6), (b[4], &a4), (b[2], &a2)],
        b[0],
    );
    let mut r = pade_solve(&u, &v);
    for _ in 0..s {
        r = &r * &r;
    }
    from_faer(r.as_ref())
}

fn pade_solve(u: &Mat<C64>, v: &Mat<C64>) -> Mat<C64> {
    let n = u.nrows();
    let p = lincomb(n, &[(1.0, v), (1.0, u)], 0.0);
    let q = lincomb(n, &[(1.0, v), (-1.0, u)], 0.0);
    q.partial_piv_lu().solve(p)
}

/// Product of two complex matrices through `faer`'s blocked kernel.
pub fn matmul(a: &Array2<C64>, b: &Array2<C64>) -> Array2<C64> {
    let p = to_faer(a.view()) * to_faer(b.view());
    from_faer(p.as_ref())
}
