use cslim::matfun::{mat_exp, mat_log, nearest_psd, solve_lyapunov, spd_sqrt};
use cslim::simulate::{random_stable_system_from, RandomStream};
use cslim::{Error, Matrix};
use nalgebra::SymmetricEigen;
use proptest::prelude::*;
use rand::Rng;

/// Unevaluated sum `hi + lo` with about 32 significant digits.
#[derive(Clone, Copy, Debug)]
struct Dd {
    hi: f64,
    lo: f64,
}

fn two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    let bb = s - a;
    Dd {
        hi: s,
        lo: (a - (s - bb)) + (b - bb),
    }
}

fn quick_two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    Dd { hi: s, lo: b - (s - a) }
}

impl Dd {
    const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };

    fn from(v: f64) -> Dd {
        Dd { hi: v, lo: 0.0 }
    }

    fn add(self, o: Dd) -> Dd {
        let s = two_sum(self.hi, o.hi);
        let t = two_sum(self.lo, o.lo);
        let s = quick_two_sum(s.hi, s.lo + t.hi);
        quick_two_sum(s.hi, s.lo + t.lo)
    }

    fn mul(self, o: Dd) -> Dd {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p);
        quick_two_sum(p, e + (self.hi * o.lo + self.lo * o.hi))
    }

    fn div_f64(self, d: f64) -> Dd {
        let q1 = self.hi / d;
        let r = self.add(Dd::from(-q1 * d)).add(Dd::from(-q1.mul_add(d, -q1 * d)));
        let q2 = r.hi / d;
        quick_two_sum(q1, q2)
    }
}

type DdMat = Vec<Vec<Dd>>;

fn dd_mat(m: &Matrix) -> DdMat {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| Dd::from(m[(i, j)])).collect())
        .collect()
}

fn dd_mul(a: &DdMat, b: &DdMat) -> DdMat {
    let n = a.len();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| (0..n).fold(Dd::ZERO, |acc, k| acc.add(a[i][k].mul(b[k][j]))))
                .collect()
        })
        .collect()
}

/// `exp(A s)` by a 40-term Taylor series in double-double after scaling by
/// `2^-j` so the scaled norm is below 1/2, then `j` squarings.
fn exp_oracle(a: &Matrix, s: f64) -> Matrix {
    let n = a.nrows();
    let norm = a.norm() * s.abs();
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let scale = s / 2f64.powi(squarings);
    // power-of-two scaling is exact
    let x = dd_mat(&(a * scale));
    let mut term: DdMat = (0..n)
        .map(|i| (0..n).map(|j| Dd::from(if i == j { 1.0 } else { 0.0 })).collect())
        .collect();
    let mut sum = term.clone();
    for k in 1..=40 {
        term = dd_mul(&term, &x)
            .into_iter()
            .map(|row| row.into_iter().map(|v| v.div_f64(k as f64)).collect())
            .collect();
        for i in 0..n {
            for j in 0..n {
                sum[i][j] = sum[i][j].add(term[i][j]);
            }
        }
    }
    for _ in 0..squarings {
        sum = dd_mul(&sum, &sum);
    }
    Matrix::from_fn(n, n, |i, j| sum[i][j].hi + sum[i][j].lo)
}

fn rel(a: &Matrix, b: &Matrix) -> f64 {
    (a - b).norm() / b.norm()
}

#[test]
fn exp_matches_double_double_taylor() {
    let mut rng = RandomStream::new(11, 0).rng();
    for _ in 0..200 {
        let n = rng.random_range(1..=4);
        let a = Matrix::from_fn(n, n, |_, _| rng.random_range(-3.0..3.0));
        let s = rng.random_range(0.01..1.0);
        let got = mat_exp(&a, s).unwrap();
        let want = exp_oracle(&a, s);
        assert!(rel(&got, &want) < 1e-12, "n={n} s={s} err={}", rel(&got, &want));
    }
}

#[test]
fn exp_of_stable_systems_at_sampling_lags() {
    let mut rng = RandomStream::new(12, 0).rng();
    for _ in 0..100 {
        let n = rng.random_range(1..=4);
        let (a, _) = random_stable_system_from(n, &mut rng).unwrap();
        for s in [0.01, 0.1, 1.0] {
            let got = mat_exp(&a, s).unwrap();
            let want = exp_oracle(&a, s);
            // exp(As) can be very small for large s; compare against its scale
            let err = (&got - &want).norm() / want.norm().max(1e-300);
            assert!(err < 1e-10, "s={s} err={err}");
        }
    }
}

#[test]
fn log_inverts_exp_on_stable_draws() {
    let mut rng = RandomStream::new(13, 0).rng();
    for _ in 0..300 {
        let n = rng.random_range(1..=4);
        let (a, _) = random_stable_system_from(n, &mut rng).unwrap();
        let s = 0.1;
        let back = mat_log(&mat_exp(&a, s).unwrap()).unwrap() / s;
        assert!(rel(&back, &a) < 1e-8, "err={}", rel(&back, &a));
    }
}

/// Kronecker-form dense solve of `A C + C Aᵀ = −2Q`, independent of the Schur path.
fn lyapunov_oracle(a: &Matrix, q: &Matrix) -> Matrix {
    let n = a.nrows();
    let id = Matrix::identity(n, n);
    let big = id.kronecker(a) + a.kronecker(&id);
    let rhs = nalgebra::DVector::from_column_slice((q * -2.0).as_slice());
    let x = big.lu().solve(&rhs).unwrap();
    Matrix::from_column_slice(n, n, x.as_slice())
}

#[test]
fn lyapunov_matches_kronecker_solve() {
    let mut rng = RandomStream::new(14, 0).rng();
    for _ in 0..200 {
        let n = rng.random_range(1..=5);
        let (a, q) = random_stable_system_from(n, &mut rng).unwrap();
        let c = solve_lyapunov(&a, &q).unwrap();
        assert!(rel(&c, &lyapunov_oracle(&a, &q)) < 1e-9);
        assert_eq!(c, c.transpose());
    }
}

#[test]
fn unstable_lyapunov_is_rejected() {
    let a = Matrix::from_row_slice(2, 2, &[0.1, 0.0, 0.0, -1.0]);
    assert!(matches!(
        solve_lyapunov(&a, &Matrix::identity(2, 2)),
        Err(Error::UnstableDynamics(_))
    ));
}

fn stable_draw() -> impl Strategy<Value = (Matrix, Matrix)> {
    (1usize..=4, any::<u64>()).prop_map(|(n, seed)| {
        let mut rng = RandomStream::new(seed, 7).rng();
        random_stable_system_from(n, &mut rng).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn lyapunov_residual_small((a, q) in stable_draw()) {
        let c = solve_lyapunov(&a, &q).unwrap();
        let r = &a * &c + &c * a.transpose() + &q * 2.0;
        let scale = (a.norm() * c.norm()).max(q.norm());
        prop_assert!(r.norm() <= 1e-10 * scale, "residual {}", r.norm() / scale);
        prop_assert!(SymmetricEigen::new(c).eigenvalues.min() > 0.0);
    }

    #[test]
    fn exp_log_round_trip((a, _q) in stable_draw(), s in 0.005f64..0.5) {
        let back = mat_log(&mat_exp(&a, s).unwrap()).unwrap() / s;
        prop_assert!(rel(&back, &a) < 1e-7);
    }

    #[test]
    fn spd_sqrt_squares_back((_a, q) in stable_draw()) {
        let r = spd_sqrt(&q).unwrap();
        prop_assert!(rel(&(&r * &r), &q) < 1e-12);
        prop_assert_eq!(r.clone(), r.transpose());
    }

    #[test]
    fn nearest_psd_is_idempotent_and_bounded(vals in prop::collection::vec(-3.0f64..3.0, 9)) {
        let m = Matrix::from_row_slice(3, 3, &vals);
        let p = nearest_psd(&m, 1e-8).unwrap();
        // reconstruction V diag Vᵀ perturbs eigenvalues by a few ulps of the norm
        let floor = 1e-8 - 64.0 * f64::EPSILON * m.norm();
        prop_assert!(SymmetricEigen::new(p.clone()).eigenvalues.min() >= floor);
        let again = nearest_psd(&p, 1e-8).unwrap();
        prop_assert!((&again - &p).norm() <= 1e-12 * p.norm().max(1.0));
    }
}
