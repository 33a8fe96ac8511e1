//! Dense real matrix functions used by every estimator.
//!
//! The logarithm and the Lyapunov solver both work on the real Schur form
//! `M = U T Uᵀ`, where `T` is upper quasi-triangular with 1x1 blocks for real
//! eigenvalues and 2x2 blocks for complex-conjugate pairs. Staying in real
//! arithmetic keeps the principal logarithm of a real matrix exactly real.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;

/// Relative (Frobenius) asymmetry accepted for symmetric inputs.
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Negative eigenvalues down to `-PSD_TOL * ‖Q‖_F` are treated as zero.
pub const PSD_TOL: f64 = 1e-10;

// ‖T - I‖₁ threshold below which the Gauss-Legendre Padé approximant of
// log(I + X) with `LOG_PADE_NODES` nodes is accurate to double precision.
const LOG_SQRT_THRESHOLD: f64 = 0.25;
const LOG_PADE_NODES: usize = 8;
const MAX_SQRTS: usize = 64;

// Padé [13/13] coefficients for exp and the 1-norm bound under which no
// scaling is needed.
const EXP_PADE13: [f64; 14] = [
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
const EXP_THETA13: f64 = 5.371920351148152;

pub(crate) fn ensure_square(m: &Matrix) -> Result<usize> {
    if m.nrows() != m.ncols() {
        return Err(Error::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    Ok(m.nrows())
}

pub(crate) fn ensure_finite(m: &Matrix, what: &'static str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// ‖M − Mᵀ‖_F / ‖M‖_F, zero for the zero matrix.
pub fn relative_asymmetry(m: &Matrix) -> f64 {
    let norm = m.norm();
    if norm == 0.0 {
        0.0
    } else {
        (m - m.transpose()).norm() / norm
    }
}

fn norm1(m: &Matrix) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `e^{A s}` by scaling and squaring with a degree-13 Padé core.
pub fn mat_exp(a: &Matrix, s: f64) -> Result<Matrix> {
    let n = ensure_square(a)?;
    ensure_finite(a, "mat_exp input")?;
    if !s.is_finite() {
        return Err(Error::NonFinite("mat_exp time"));
    }
    let x = a * s;
    let id = Matrix::identity(n, n);
    let norm = norm1(&x);
    if norm == 0.0 {
        return Ok(id);
    }
    let squarings = if norm > EXP_THETA13 {
        (norm / EXP_THETA13).log2().ceil() as i32
    } else {
        0
    };
    let x = x * 2f64.powi(-squarings);

    let b = &EXP_PADE13;
    let x2 = &x * &x;
    let x4 = &x2 * &x2;
    let x6 = &x4 * &x2;
    let u_inner = &x6 * (&x6 * b[13] + &x4 * b[11] + &x2 * b[9])
        + &x6 * b[7]
        + &x4 * b[5]
        + &x2 * b[3]
        + &id * b[1];
    let u = &x * u_inner;
    let v = &x6 * (&x6 * b[12] + &x4 * b[10] + &x2 * b[8])
        + &x6 * b[6]
        + &x4 * b[4]
        + &x2 * b[2]
        + &id * b[0];

    let denom = &v - &u;
    let numer = &v + &u;
    let mut r = denom
        .lu()
        .solve(&numer)
        .ok_or(Error::SingularMatrix)?;
    for _ in 0..squarings {
        r = &r * &r;
    }
    ensure_finite(&r, "mat_exp result")?;
    Ok(r)
}

/// Real Schur form with the block layout of the quasi-triangular factor.
pub(crate) struct RealSchur {
    pub u: Matrix,
    pub t: Matrix,
    /// `(start, size)` of each diagonal block, size 1 or 2.
    pub blocks: Vec<(usize, usize)>,
}

impl RealSchur {
    pub fn new(m: &Matrix) -> Result<Self> {
        let n = ensure_square(m)?;
        ensure_finite(m, "Schur input")?;
        let schur = nalgebra::linalg::Schur::try_new(m.clone(), f64::EPSILON, 100 * n.max(10))
            .ok_or(Error::SchurFailed)?;
        let (mut u, mut t) = schur.unpack();
        let mut blocks = Vec::with_capacity(n);
        let mut i = 0;
        while i < n {
            if i + 1 < n && t[(i + 1, i)] != 0.0 {
                if split_real_block(&mut u, &mut t, i) {
                    blocks.push((i, 1));
                    i += 1;
                } else {
                    blocks.push((i, 2));
                    i += 2;
                }
            } else {
                blocks.push((i, 1));
                i += 1;
            }
        }
        for j in 0..n {
            for r in (j + 1)..n {
                let inside_block = blocks.iter().any(|&(s, sz)| sz == 2 && s == j && r == j + 1);
                if !inside_block {
                    t[(r, j)] = 0.0;
                }
            }
        }
        Ok(RealSchur { u, t, blocks })
    }

    /// Eigenvalues `(re, im)` of every block, conjugate pairs listed once with im > 0.
    pub fn block_eigenvalues(&self) -> Vec<(f64, f64)> {
        self.blocks
            .iter()
            .map(|&(s, sz)| {
                if sz == 1 {
                    (self.t[(s, s)], 0.0)
                } else {
                    let (a, b, c, d) = (
                        self.t[(s, s)],
                        self.t[(s, s + 1)],
                        self.t[(s + 1, s)],
                        self.t[(s + 1, s + 1)],
                    );
                    let half_tr = 0.5 * (a + d);
                    let disc = 0.25 * (a - d) * (a - d) + b * c;
                    (half_tr, (-disc).max(0.0).sqrt())
                }
            })
            .collect()
    }
}

// A 2x2 diagonal block with real eigenvalues is rotated into upper-triangular
// form. Returns true if the block was split.
fn split_real_block(u: &mut Matrix, t: &mut Matrix, i: usize) -> bool {
    let (a, b, c, d) = (t[(i, i)], t[(i, i + 1)], t[(i + 1, i)], t[(i + 1, i + 1)]);
    let disc = 0.25 * (a - d) * (a - d) + b * c;
    if disc < 0.0 {
        return false;
    }
    let half_tr = 0.5 * (a + d);
    let root = disc.sqrt();
    let lambda = if half_tr >= 0.0 {
        half_tr + root
    } else {
        half_tr - root
    };
    let v1 = (b, lambda - a);
    let v2 = (lambda - d, c);
    let (x, y) = if v1.0.hypot(v1.1) >= v2.0.hypot(v2.1) {
        v1
    } else {
        v2
    };
    let norm = x.hypot(y);
    if norm == 0.0 {
        return false;
    }
    let (cs, sn) = (x / norm, y / norm);
    let n = t.nrows();
    // T <- Gᵀ T G with G = [[cs, -sn], [sn, cs]].
    for col in 0..n {
        let (p, q) = (t[(i, col)], t[(i + 1, col)]);
        t[(i, col)] = cs * p + sn * q;
        t[(i + 1, col)] = -sn * p + cs * q;
    }
    for row in 0..n {
        let (p, q) = (t[(row, i)], t[(row, i + 1)]);
        t[(row, i)] = cs * p + sn * q;
        t[(row, i + 1)] = -sn * p + cs * q;
    }
    for row in 0..u.nrows() {
        let (p, q) = (u[(row, i)], u[(row, i + 1)]);
        u[(row, i)] = cs * p + sn * q;
        u[(row, i + 1)] = -sn * p + cs * q;
    }
    t[(i + 1, i)] = 0.0;
    true
}

/// Solves `a X + X b = c` for blocks of size at most 2 via the Kronecker form.
fn solve_small_sylvester(a: &Matrix, b: &Matrix, c: &Matrix) -> Result<Matrix> {
    let p = a.nrows();
    let q = b.nrows();
    let dim = p * q;
    let mut k = Matrix::zeros(dim, dim);
    for s in 0..q {
        for r in 0..p {
            let row = r + s * p;
            for rr in 0..p {
                k[(row, rr + s * p)] += a[(r, rr)];
            }
            for ss in 0..q {
                k[(row, r + ss * p)] += b[(ss, s)];
            }
        }
    }
    let rhs = nalgebra::DVector::from_iterator(dim, c.iter().copied());
    let x = k.lu().solve(&rhs).ok_or(Error::SingularMatrix)?;
    Ok(Matrix::from_column_slice(p, q, x.as_slice()))
}

fn block(m: &Matrix, (r0, rs): (usize, usize), (c0, cs): (usize, usize)) -> Matrix {
    m.view((r0, c0), (rs, cs)).clone_owned()
}

fn sqrt_diag_block(t: &Matrix, (s, sz): (usize, usize)) -> Result<Matrix> {
    if sz == 1 {
        let v = t[(s, s)];
        if v < 0.0 {
            return Err(Error::EigenvalueOnBranchCut(v));
        }
        return Ok(Matrix::from_element(1, 1, v.sqrt()));
    }
    let b = block(t, (s, 2), (s, 2));
    let (a, bb, c, d) = (b[(0, 0)], b[(0, 1)], b[(1, 0)], b[(1, 1)]);
    let theta = 0.5 * (a + d);
    let mu = (-(0.25 * (a - d) * (a - d) + bb * c)).max(0.0).sqrt();
    let modulus = theta.hypot(mu);
    let alpha = (0.5 * (modulus + theta)).sqrt();
    if alpha == 0.0 {
        return Err(Error::SingularMatrix);
    }
    let id = Matrix::identity(2, 2);
    Ok(&id * alpha + (b - &id * theta) / (2.0 * alpha))
}

/// Principal square root of a standardized quasi-triangular matrix.
fn sqrt_quasi_triangular(t: &Matrix, blocks: &[(usize, usize)]) -> Result<Matrix> {
    let n = t.nrows();
    let mut r = Matrix::zeros(n, n);
    for (bj, &jb) in blocks.iter().enumerate() {
        let rjj = sqrt_diag_block(t, jb)?;
        r.view_mut((jb.0, jb.0), (jb.1, jb.1)).copy_from(&rjj);
        for bi in (0..bj).rev() {
            let ib = blocks[bi];
            let mut rhs = block(t, ib, jb);
            for &kb in &blocks[bi + 1..bj] {
                rhs -= block(&r, ib, kb) * block(&r, kb, jb);
            }
            let rii = block(&r, ib, ib);
            let x = solve_small_sylvester(&rii, &rjj, &rhs)?;
            r.view_mut((ib.0, jb.0), (ib.1, jb.1)).copy_from(&x);
        }
    }
    Ok(r)
}

/// Nodes and weights of the m-point Gauss-Legendre rule on [0, 1].
fn gauss_legendre_unit(m: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        // Chebyshev-like initial guess, refined by Newton on P_m.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (m as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=m {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let pm = if m == 1 { x } else { p1 };
            let pm1 = if m == 1 { 1.0 } else { p0 };
            dp = m as f64 * (x * pm - pm1) / (x * x - 1.0);
            let dx = pm / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        out.push((0.5 * (x + 1.0), 0.5 * w));
    }
    out
}

/// Principal real logarithm by inverse scaling and squaring on the real Schur form.
pub fn mat_log(m: &Matrix) -> Result<Matrix> {
    let n = ensure_square(m)?;
    ensure_finite(m, "mat_log input")?;
    let schur = RealSchur::new(m)?;
    let scale = schur.t.amax().max(f64::MIN_POSITIVE);
    for (re, im) in schur.block_eigenvalues() {
        if re.hypot(im) <= 1e-14 * scale {
            return Err(Error::SingularMatrix);
        }
        if im == 0.0 && re < 0.0 {
            return Err(Error::EigenvalueOnBranchCut(re));
        }
    }

    let id = Matrix::identity(n, n);
    let mut t = schur.t.clone();
    let mut sqrts = 0;
    while norm1(&(&t - &id)) > LOG_SQRT_THRESHOLD {
        if sqrts == MAX_SQRTS {
            return Err(Error::SingularMatrix);
        }
        t = sqrt_quasi_triangular(&t, &schur.blocks)?;
        sqrts += 1;
    }

    let x = &t - &id;
    let mut log_t = Matrix::zeros(n, n);
    for (node, weight) in gauss_legendre_unit(LOG_PADE_NODES) {
        let lhs = &id + &x * node;
        let y = lhs.lu().solve(&x).ok_or(Error::SingularMatrix)?;
        log_t += y * weight;
    }
    log_t *= 2f64.powi(sqrts as i32);
    let out = &schur.u * log_t * schur.u.transpose();
    ensure_finite(&out, "mat_log result")?;
    Ok(out)
}

/// Symmetric PSD square root; negative eigenvalues within tolerance are clipped to zero.
pub fn spd_sqrt(q: &Matrix) -> Result<Matrix> {
    spd_sqrt_tol(q, PSD_TOL)
}

pub fn spd_sqrt_tol(q: &Matrix, tol: f64) -> Result<Matrix> {
    ensure_square(q)?;
    ensure_finite(q, "spd_sqrt input")?;
    let sym = symmetrize(q);
    let eig = SymmetricEigen::new(sym.clone());
    let min = eig.eigenvalues.min();
    if min < -tol * sym.norm() {
        return Err(Error::NotPsd(min));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    let s = v * Matrix::from_diagonal(&roots) * v.transpose();
    Ok(symmetrize(&s))
}

/// Largest real part over the spectrum of `a`.
pub fn spectral_abscissa(a: &Matrix) -> Result<f64> {
    let schur = RealSchur::new(a)?;
    Ok(schur
        .block_eigenvalues()
        .into_iter()
        .map(|(re, _)| re)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// True iff every eigenvalue has a strictly negative real part.
pub fn is_stable(a: &Matrix) -> bool {
    matches!(spectral_abscissa(a), Ok(abscissa) if abscissa < 0.0)
}

// Solves T Y + Y Tᵀ = F for quasi-triangular T, block by block from the bottom-right.
fn solve_quasi_lyapunov(t: &Matrix, blocks: &[(usize, usize)], f: &Matrix) -> Result<Matrix> {
    let n = t.nrows();
    let mut y = Matrix::zeros(n, n);
    let nb = blocks.len();
    for bi in (0..nb).rev() {
        let ib = blocks[bi];
        let tii = block(t, ib, ib);
        for bj in (0..nb).rev() {
            let jb = blocks[bj];
            let mut rhs = block(f, ib, jb);
            for &kb in &blocks[bi + 1..] {
                rhs -= block(t, ib, kb) * block(&y, kb, jb);
            }
            for &lb in &blocks[bj + 1..] {
                rhs -= block(&y, ib, lb) * block(t, jb, lb).transpose();
            }
            let tjj_t = block(t, jb, jb).transpose();
            let x = solve_small_sylvester(&tii, &tjj_t, &rhs)?;
            y.view_mut((ib.0, jb.0), (ib.1, jb.1)).copy_from(&x);
        }
    }
    Ok(y)
}

/// Steady-state covariance: solves `0 = A C + C Aᵀ + 2 Q` for symmetric `C`.
pub fn solve_lyapunov(a: &Matrix, q: &Matrix) -> Result<Matrix> {
    let n = ensure_square(a)?;
    if q.shape() != (n, n) {
        return Err(Error::DimensionMismatch(format!(
            "A is {n}x{n} but Q is {}x{}",
            q.nrows(),
            q.ncols()
        )));
    }
    ensure_finite(q, "solve_lyapunov Q")?;
    let schur = RealSchur::new(a)?;
    let abscissa = schur
        .block_eigenvalues()
        .into_iter()
        .map(|(re, _)| re)
        .fold(f64::NEG_INFINITY, f64::max);
    if abscissa >= 0.0 {
        return Err(Error::UnstableDynamics(abscissa));
    }
    let u = &schur.u;
    let ut = u.transpose();
    let solve = |rhs: &Matrix| -> Result<Matrix> {
        let f = &ut * rhs * u;
        let y = solve_quasi_lyapunov(&schur.t, &schur.blocks, &f)?;
        Ok(symmetrize(&(u * y * &ut)))
    };
    let mut c = solve(&(q * -2.0))?;
    // one step of iterative refinement on the residual
    let residual = a * &c + &c * a.transpose() + q * 2.0;
    c += solve(&(-residual))?;
    Ok(symmetrize(&c))
}

/// Projects onto symmetric matrices with every eigenvalue at least `eps`.
pub fn nearest_psd(m: &Matrix, eps: f64) -> Result<Matrix> {
    ensure_square(m)?;
    ensure_finite(m, "nearest_psd input")?;
    let eig = SymmetricEigen::new(symmetrize(m));
    let clipped = eig.eigenvalues.map(|l| l.max(eps));
    let v = &eig.eigenvectors;
    Ok(symmetrize(&(v * Matrix::from_diagonal(&clipped) * v.transpose())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, data: &[f64]) -> Matrix {
        Matrix::from_row_slice(rows, data.len() / rows, data)
    }

    #[test]
    fn exp_scalar_and_zero() {
        let e = mat_exp(&m(1, &[-1.0]), 1.0).unwrap();
        assert!((e[(0, 0)] - 0.36787944117144233).abs() < 1e-14);
        let z = mat_exp(&Matrix::zeros(2, 2), 7.0).unwrap();
        assert_eq!(z, Matrix::identity(2, 2));
        let a = m(2, &[-1.0, 2.0, -2.0, -1.0]);
        assert_eq!(mat_exp(&a, 0.0).unwrap(), Matrix::identity(2, 2));
    }

    #[test]
    fn exp_rejects_nan() {
        let a = m(1, &[f64::NAN]);
        assert!(matches!(mat_exp(&a, 1.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn exp_rotation_closed_form() {
        // e^{[[-1,2],[-2,-1]] s} = e^{-s} [[cos 2s, sin 2s], [-sin 2s, cos 2s]]
        let a = m(2, &[-1.0, 2.0, -2.0, -1.0]);
        let e = mat_exp(&a, 0.5).unwrap();
        let (c, s) = (1f64.cos(), 1f64.sin());
        let expect = m(2, &[c, s, -s, c]) * (-0.5f64).exp();
        assert!((e - &expect).norm() / expect.norm() < 1e-14);
    }

    #[test]
    fn log_identity_and_diagonal() {
        let l = mat_log(&Matrix::identity(3, 3)).unwrap();
        assert!(l.norm() < 1e-15);
        let d = Matrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
            (-1f64).exp(),
            (-2f64).exp(),
        ]));
        let l = mat_log(&d).unwrap();
        assert!((l - m(2, &[-1.0, 0.0, 0.0, -2.0])).norm() < 1e-13);
    }

    #[test]
    fn log_branch_cut_and_singular() {
        let d = m(2, &[-1.0, 0.0, 0.0, 1.0]);
        assert!(matches!(mat_log(&d), Err(Error::EigenvalueOnBranchCut(_))));
        let s = m(2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(matches!(mat_log(&s), Err(Error::SingularMatrix)));
    }

    #[test]
    fn log_of_rotation_exponential() {
        let a = m(2, &[-1.0, 2.0, -2.0, -1.0]);
        let l = mat_log(&mat_exp(&a, 1.0).unwrap()).unwrap();
        assert!((l - &a).norm() / a.norm() < 1e-12);
    }

    #[test]
    fn log_with_large_rotation_stays_principal() {
        // eigenvalues e^{±i·3}: principal log has imaginary parts ±3 (< π)
        let a = m(2, &[0.0, 3.0, -3.0, 0.0]);
        let l = mat_log(&mat_exp(&a, 1.0).unwrap()).unwrap();
        assert!((l - &a).norm() < 1e-10);
    }

    #[test]
    fn log_of_real_block_with_repeated_eigenvalue() {
        let a = m(2, &[-1.0, 1.0, 0.0, -1.0]);
        let l = mat_log(&mat_exp(&a, 1.0).unwrap()).unwrap();
        assert!((l - &a).norm() < 1e-12);
    }

    #[test]
    fn sqrt_examples() {
        let s = spd_sqrt(&m(2, &[4.0, 0.0, 0.0, 9.0])).unwrap();
        assert!((s - m(2, &[2.0, 0.0, 0.0, 3.0])).norm() < 1e-14);
        assert_eq!(spd_sqrt(&Matrix::zeros(2, 2)).unwrap(), Matrix::zeros(2, 2));
        assert!(matches!(
            spd_sqrt(&m(2, &[1.0, 0.0, 0.0, -0.5])),
            Err(Error::NotPsd(_))
        ));
    }

    #[test]
    fn lyapunov_examples() {
        let c = solve_lyapunov(&m(1, &[-1.0]), &m(1, &[1.0])).unwrap();
        assert!((c[(0, 0)] - 1.0).abs() < 1e-14);
        let c = solve_lyapunov(&m(2, &[-1.0, 0.0, 0.0, -2.0]), &Matrix::identity(2, 2)).unwrap();
        assert!((c - m(2, &[1.0, 0.0, 0.0, 0.5])).norm() < 1e-14);
        assert!(matches!(
            solve_lyapunov(&m(2, &[0.0, 1.0, -1.0, 0.0]), &Matrix::identity(2, 2)),
            Err(Error::UnstableDynamics(_))
        ));
    }

    #[test]
    fn stability_examples() {
        assert!(is_stable(&m(1, &[-1.0])));
        assert!(!is_stable(&m(2, &[0.0, 1.0, -1.0, 0.0])));
        assert!(!is_stable(&m(1, &[0.5])));
        assert!(is_stable(&m(2, &[-0.1, 5.0, -5.0, -0.1])));
    }

    #[test]
    fn nearest_psd_examples() {
        let spd = m(2, &[2.0, 0.5, 0.5, 1.0]);
        assert!((nearest_psd(&spd, 0.0).unwrap() - &spd).norm() < 1e-12);
        let out = nearest_psd(&m(2, &[1.0, 0.0, 0.0, -0.1]), 1e-8).unwrap();
        assert!((out - m(2, &[1.0, 0.0, 0.0, 1e-8])).norm() < 1e-15);
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let rule = gauss_legendre_unit(LOG_PADE_NODES);
        let total: f64 = rule.iter().map(|(_, w)| w).sum();
        assert!((total - 1.0).abs() < 1e-14);
        // exact through degree 2m - 1
        let deg = 2 * LOG_PADE_NODES - 1;
        let integral: f64 = rule.iter().map(|(x, w)| w * x.powi(deg as i32)).sum();
        assert!((integral - 1.0 / (deg as f64 + 1.0)).abs() < 1e-14);
    }
}
