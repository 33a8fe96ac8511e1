//! Linear inverse models.
//!
//! * Classical LIM: constant `A = log(K(s) K(0)⁻¹)/s` and `Q` from the
//!   stationary balance `0 = AC + CAᵀ + 2Q`.
//! * Cyclostationary LIMs (original and `e`): split the period into `M`
//!   intervals, fit an exponential per interval from the pooled pairs
//!   `(x(t), x(t + kΔt))` with base time `t` in the interval, and recover the
//!   diffusion from the periodic balance `dC/dt = AC + CAᵀ + 2Q`. The two
//!   variants differ only in the difference stencil for `dC/dt` and the time
//!   coordinate attached to each interval.
//! * `l`-CS-LIM: pointwise `A(t) C(t) = ∂ₛK(s, t)|ₛ₌₀` by a forward
//!   difference in the lag, followed by the same periodic balance.
//!
//! Per-phase failures (a lagged ratio outside the principal-log domain, a
//! singular covariance) never abort a fit: the phase is kept with no matrices
//! and a flag, and downstream metrics skip it.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{self, DiffScheme, PeriodicMatrixSeries};
use crate::matfun::{self, Matrix};
use crate::simulate::TimeSeries;

/// Condition-number ceiling for covariance inversions.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Lim,
    Cslim,
    Ecslim,
    Lcslim,
}

impl Estimator {
    pub const ALL: [Estimator; 4] = [
        Estimator::Lim,
        Estimator::Cslim,
        Estimator::Ecslim,
        Estimator::Lcslim,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Lim => "lim",
            Estimator::Cslim => "cslim",
            Estimator::Ecslim => "ecslim",
            Estimator::Lcslim => "lcslim",
        }
    }
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CsVariant {
    /// Central-difference `dC/dt`, time at the interval center.
    Original,
    /// Forward-difference `dC/dt`, time at the interval center plus `kΔt/2`.
    E,
}

impl CsVariant {
    pub fn estimator(self) -> Estimator {
        match self {
            CsVariant::Original => Estimator::Cslim,
            CsVariant::E => Estimator::Ecslim,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseFlag {
    BranchCut,
    SingularCovariance,
    /// The diffusion estimate has a negative eigenvalue; it is kept as-is.
    IndefiniteDiffusion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    #[serde(rename = "M", skip_serializing_if = "Option::is_none", default)]
    pub intervals: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub k: Option<usize>,
    pub dt: f64,
    #[serde(rename = "P")]
    pub period_samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phase {
    pub t: f64,
    pub dynamics: Option<Matrix>,
    pub diffusion: Option<Matrix>,
    pub flags: Vec<PhaseFlag>,
}

impl Phase {
    pub fn is_valid(&self) -> bool {
        self.dynamics.is_some() && self.diffusion.is_some()
    }
}

/// Output of an estimator: time coordinates with per-phase `A` and `Q`.
#[derive(Clone, Debug, PartialEq)]
pub struct PeriodicModel {
    pub estimator: Estimator,
    pub hyper: Hyper,
    pub dim: usize,
    pub phases: Vec<Phase>,
}

#[derive(Serialize, Deserialize)]
struct PhaseWire {
    t: f64,
    #[serde(rename = "A")]
    a: Option<Vec<f64>>,
    #[serde(rename = "Q")]
    q: Option<Vec<f64>>,
    flags: Vec<PhaseFlag>,
}

#[derive(Serialize, Deserialize)]
struct ModelWire {
    estimator: Estimator,
    hyper: Hyper,
    dim: usize,
    /// Pairs whose lagged partner falls past the end of the record are dropped.
    boundary_pairs: String,
    phases: Vec<PhaseWire>,
}

fn row_major(m: &Matrix) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn from_row_major(n: usize, v: &[f64]) -> Result<Matrix> {
    if v.len() != n * n {
        return Err(Error::DimensionMismatch(format!(
            "expected {} entries, got {}",
            n * n,
            v.len()
        )));
    }
    Ok(Matrix::from_row_slice(n, n, v))
}

impl PeriodicModel {
    /// A constant `(A, Q)` laid on a `grid`-point uniform phase grid.
    pub fn constant(estimator: Estimator, a: &Matrix, q: &Matrix, grid: usize, dt: f64) -> Self {
        let phases = (0..grid)
            .map(|j| Phase {
                t: j as f64 / grid as f64,
                dynamics: Some(a.clone()),
                diffusion: Some(q.clone()),
                flags: Vec::new(),
            })
            .collect();
        PeriodicModel {
            estimator,
            hyper: Hyper {
                intervals: None,
                k: None,
                dt,
                period_samples: grid,
            },
            dim: a.nrows(),
            phases,
        }
    }

    pub fn times(&self) -> Vec<f64> {
        self.phases.iter().map(|p| p.t).collect()
    }

    pub fn flagged_count(&self) -> usize {
        self.phases.iter().filter(|p| !p.is_valid()).count()
    }

    pub fn indefinite_count(&self) -> usize {
        self.phases
            .iter()
            .filter(|p| p.flags.contains(&PhaseFlag::IndefiniteDiffusion))
            .count()
    }

    pub fn dynamics_points(&self) -> Vec<(f64, &Matrix)> {
        self.phases
            .iter()
            .filter_map(|p| p.dynamics.as_ref().map(|m| (p.t, m)))
            .collect()
    }

    pub fn diffusion_points(&self) -> Vec<(f64, &Matrix)> {
        self.phases
            .iter()
            .filter_map(|p| p.diffusion.as_ref().map(|m| (p.t, m)))
            .collect()
    }

    /// Dynamics as a complete series; fails if any phase is flagged.
    pub fn dynamics_series(&self) -> Result<PeriodicMatrixSeries> {
        self.field_series(|p| p.dynamics.as_ref())
    }

    pub fn diffusion_series(&self) -> Result<PeriodicMatrixSeries> {
        self.field_series(|p| p.diffusion.as_ref())
    }

    fn field_series<'a>(&'a self, f: impl Fn(&'a Phase) -> Option<&'a Matrix>) -> Result<PeriodicMatrixSeries> {
        let values = self
            .phases
            .iter()
            .map(|p| f(p).cloned().ok_or(Error::AllPhasesFlagged))
            .collect::<Result<Vec<_>>>()?;
        PeriodicMatrixSeries::new(self.times(), values)
    }

    /// Average of the valid dynamics over all phases.
    pub fn mean_dynamics(&self) -> Result<Matrix> {
        mean_of(&self.dynamics_points())
    }

    pub fn mean_diffusion(&self) -> Result<Matrix> {
        mean_of(&self.diffusion_points())
    }

    pub fn to_json(&self) -> Result<String> {
        let wire = ModelWire {
            estimator: self.estimator,
            hyper: self.hyper.clone(),
            dim: self.dim,
            boundary_pairs: "dropped".into(),
            phases: self
                .phases
                .iter()
                .map(|p| PhaseWire {
                    t: p.t,
                    a: p.dynamics.as_ref().map(row_major),
                    q: p.diffusion.as_ref().map(row_major),
                    flags: p.flags.clone(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&wire)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let wire: ModelWire = serde_json::from_str(text)?;
        let n = wire.dim;
        let phases = wire
            .phases
            .into_iter()
            .map(|p| {
                Ok(Phase {
                    t: p.t,
                    dynamics: p.a.map(|v| from_row_major(n, &v)).transpose()?,
                    diffusion: p.q.map(|v| from_row_major(n, &v)).transpose()?,
                    flags: p.flags,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PeriodicModel {
            estimator: wire.estimator,
            hyper: wire.hyper,
            dim: n,
            phases,
        })
    }

    /// Long-format export with columns `t,i,j,A_ij,Q_ij`; flagged phases carry `NaN`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,i,j,A_ij,Q_ij")?;
        for p in &self.phases {
            for i in 0..self.dim {
                for j in 0..self.dim {
                    let a = p.dynamics.as_ref().map_or(f64::NAN, |m| m[(i, j)]);
                    let q = p.diffusion.as_ref().map_or(f64::NAN, |m| m[(i, j)]);
                    writeln!(w, "{:.16e},{i},{j},{a:.16e},{q:.16e}", p.t)?;
                }
            }
        }
        Ok(())
    }
}

fn mean_of(points: &[(f64, &Matrix)]) -> Result<Matrix> {
    let (_, first) = points.first().ok_or(Error::AllPhasesFlagged)?;
    let mut acc = Matrix::zeros(first.nrows(), first.ncols());
    for (_, m) in points {
        acc += *m;
    }
    Ok(acc / points.len() as f64)
}

fn condition_number(m: &Matrix) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// `X C⁻¹` as the solution of `C Xᵀ... = ...`, guarded by the condition number of `C`.
fn right_divide(x: &Matrix, c: &Matrix) -> Result<Matrix> {
    let cond = condition_number(c);
    if !(cond <= MAX_CONDITION) {
        return Err(Error::SingularCovariance(cond));
    }
    // Y C = X  <=>  Cᵀ Yᵀ = Xᵀ
    let yt = c
        .transpose()
        .lu()
        .solve(&x.transpose())
        .ok_or(Error::SingularCovariance(cond))?;
    Ok(yt.transpose())
}

/// `A = log(K(s) K(0)⁻¹) / s`.
pub fn green_function(k0: &Matrix, ks: &Matrix, s: f64) -> Result<Matrix> {
    matfun::ensure_square(k0)?;
    if ks.shape() != k0.shape() {
        return Err(Error::DimensionMismatch("K(0) and K(s) differ in shape".into()));
    }
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::InvalidArgument(format!("lag {s} must be positive")));
    }
    let ratio = right_divide(ks, k0)?;
    Ok(matfun::mat_log(&ratio)? / s)
}

/// `Q = −(AC + CAᵀ)/2` from the stationary balance.
pub fn classical_fdr_diffusion(a: &Matrix, c: &Matrix) -> Matrix {
    let ac = a * c;
    matfun::symmetrize(&((&ac + ac.transpose()) * -0.5))
}

fn fdr_step(a: &Matrix, c: &Matrix, dcdt: &Matrix) -> Matrix {
    let ac = a * c;
    matfun::symmetrize(&((dcdt - &ac - ac.transpose()) * 0.5))
}

/// `Q(t) = (dC/dt − A(t)C(t) − C(t)A(t)ᵀ)/2`, symmetrized, on `A`'s time grid.
pub fn periodic_fdr_diffusion(
    a: &PeriodicMatrixSeries,
    c: &PeriodicMatrixSeries,
    dcdt: &PeriodicMatrixSeries,
) -> Result<PeriodicMatrixSeries> {
    if a.len() != c.len() || a.len() != dcdt.len() {
        return Err(Error::GridMismatch(format!(
            "A has {} phases, C has {}, dC/dt has {}",
            a.len(),
            c.len(),
            dcdt.len()
        )));
    }
    if a.dim() != c.dim() || a.dim() != dcdt.dim() {
        return Err(Error::DimensionMismatch("periodic FDR operands".into()));
    }
    let values = a
        .values()
        .iter()
        .zip(c.values())
        .zip(dcdt.values())
        .map(|((a, c), d)| fdr_step(a, c, d))
        .collect();
    a.with_values(values)
}

/// Classical LIM at lag `k` samples: returns `(A, Q)`.
pub fn classical_lim(ts: &TimeSeries, lag: usize) -> Result<(Matrix, Matrix)> {
    let ks = estimate::stationary_correlation(ts, lag)?;
    if lag == 0 {
        return Err(Error::InvalidArgument("classical LIM needs a positive lag".into()));
    }
    let c = matfun::symmetrize(&estimate::stationary_correlation(ts, 0)?);
    classical_lim_from_moments(&c, &ks, lag as f64 * ts.dt())
}

/// Classical LIM from given `K(0)` and `K(s)`.
pub fn classical_lim_from_moments(k0: &Matrix, ks: &Matrix, s: f64) -> Result<(Matrix, Matrix)> {
    let c = matfun::symmetrize(k0);
    let a = green_function(&c, ks, s)?;
    let q = classical_fdr_diffusion(&a, &c);
    Ok((a, q))
}

fn flag_for(err: &Error) -> PhaseFlag {
    match err {
        Error::EigenvalueOnBranchCut(_) => PhaseFlag::BranchCut,
        _ => PhaseFlag::SingularCovariance,
    }
}

fn min_eigenvalue(m: &Matrix) -> f64 {
    nalgebra::SymmetricEigen::new(matfun::symmetrize(m)).eigenvalues.min()
}

// Periodic balance on possibly incomplete dynamics: phases without `A` stay empty.
fn assemble(
    times: Vec<f64>,
    dynamics: Vec<std::result::Result<Matrix, PhaseFlag>>,
    covariance: &[Matrix],
    dcdt: &[Matrix],
) -> Vec<Phase> {
    times
        .into_iter()
        .zip(dynamics)
        .zip(covariance.iter().zip(dcdt))
        .map(|((t, a), (c, d))| match a {
            Ok(a) => {
                let q = fdr_step(&a, c, d);
                let mut flags = Vec::new();
                if min_eigenvalue(&q) < 0.0 {
                    flags.push(PhaseFlag::IndefiniteDiffusion);
                }
                Phase {
                    t,
                    dynamics: Some(a),
                    diffusion: Some(q),
                    flags,
                }
            }
            Err(flag) => Phase {
                t,
                dynamics: None,
                diffusion: None,
                flags: vec![flag],
            },
        })
        .collect()
}

fn check_period(ts: &TimeSeries, period: usize) -> Result<()> {
    if period == 0 || ((ts.dt() * period as f64) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "{period} samples of {} do not span the unit period",
            ts.dt()
        )));
    }
    let periods = ts.len() / period;
    if periods < 2 {
        return Err(Error::TooShort {
            needed: 2 * period,
            got: ts.len(),
        });
    }
    Ok(())
}

/// Pooled interval moments `(K_j(0), K_j(kΔt))` for `j = 0..M`.
///
/// A pair belongs to interval `j` when its base time does, even if its lagged
/// partner lies in the next interval.
pub fn interval_moments(
    ts: &TimeSeries,
    period: usize,
    intervals: usize,
    lag: usize,
) -> Result<(Vec<Matrix>, Vec<Matrix>)> {
    if intervals == 0 || period % intervals != 0 {
        return Err(Error::IndivisibleInterval {
            samples: period,
            intervals,
        });
    }
    let width = period / intervals;
    let periods = ts.len() / period;
    let mut zero = Vec::with_capacity(intervals);
    let mut lagged = Vec::with_capacity(intervals);
    for j in 0..intervals {
        let bases = || {
            (0..periods).flat_map(move |p| (j * width..(j + 1) * width).map(move |s| p * period + s))
        };
        // Both moments use the same retained pairs.
        let kept = bases().filter(|b| b + lag < ts.len());
        let (k0, count0) = estimate::lagged_sum(ts, kept.clone(), 0);
        let (kk, count) = estimate::lagged_sum(ts, kept, lag);
        if count == 0 || count0 != count {
            return Err(Error::EmptyCell { lag, phase: j * width });
        }
        zero.push(matfun::symmetrize(&(k0 / count as f64)));
        lagged.push(kk / count as f64);
    }
    Ok((zero, lagged))
}

/// Original or `e` cyclostationary LIM with `M` intervals and lag `k` samples.
pub fn cs_lim(
    ts: &TimeSeries,
    period: usize,
    intervals: usize,
    lag: usize,
    variant: CsVariant,
) -> Result<PeriodicModel> {
    if intervals == 0 || period % intervals != 0 {
        return Err(Error::IndivisibleInterval {
            samples: period,
            intervals,
        });
    }
    if lag == 0 {
        return Err(Error::InvalidArgument("lag must be at least one sample".into()));
    }
    check_period(ts, period)?;
    let (zero, lagged) = interval_moments(ts, period, intervals, lag)?;
    cs_lim_from_moments(&zero, &lagged, period, lag, ts.dt(), variant)
}

/// Cyclostationary LIM from interval moments `K_j(0)`, `K_j(kΔt)`.
pub fn cs_lim_from_moments(
    zero_lag: &[Matrix],
    lagged: &[Matrix],
    period: usize,
    lag: usize,
    dt: f64,
    variant: CsVariant,
) -> Result<PeriodicModel> {
    let intervals = zero_lag.len();
    if intervals == 0 || intervals != lagged.len() {
        return Err(Error::GridMismatch(format!(
            "{} zero-lag vs {} lagged moments",
            intervals,
            lagged.len()
        )));
    }
    if period % intervals != 0 {
        return Err(Error::IndivisibleInterval {
            samples: period,
            intervals,
        });
    }
    let width = period / intervals;
    let s = lag as f64 * dt;
    let covariance: Vec<Matrix> = zero_lag.iter().map(matfun::symmetrize).collect();
    let dynamics: Vec<_> = covariance
        .iter()
        .zip(lagged)
        .map(|(c, kk)| green_function(c, kk, s).map_err(|e| flag_for(&e)))
        .collect();

    // Midpoint of the sample phases in the interval.
    let centers: Vec<f64> = (0..intervals)
        .map(|j| (j * width) as f64 / period as f64 + (width - 1) as f64 * 0.5 / period as f64)
        .collect();
    let c_series = PeriodicMatrixSeries::new(centers.clone(), covariance.clone())?;
    let (scheme, shift) = match variant {
        CsVariant::Original => (DiffScheme::Central, 0.0),
        CsVariant::E => (DiffScheme::Forward, 0.5 * s),
    };
    let dcdt = estimate::periodic_diff(&c_series, scheme)?;
    let times = centers.iter().map(|c| c + shift).collect();
    let phases = assemble(times, dynamics, &covariance, dcdt.values());
    Ok(PeriodicModel {
        estimator: variant.estimator(),
        hyper: Hyper {
            intervals: Some(intervals),
            k: Some(lag),
            dt,
            period_samples: period,
        },
        dim: covariance[0].nrows(),
        phases,
    })
}

/// Pointwise `l`-CS-LIM on `P` phases.
pub fn l_cs_lim(ts: &TimeSeries, period: usize) -> Result<PeriodicModel> {
    check_period(ts, period)?;
    let c = estimate::covariance_series(ts, period)?;
    let k1 = (0..period)
        .map(|phase| estimate::cyclo_correlation(ts, period, 1, phase))
        .collect::<Result<Vec<_>>>()?;
    l_cs_lim_from_moments(&c, &k1, ts.dt())
}

/// `l`-CS-LIM from `C(t) = K(0, t)` and `K(Δt, t)`.
pub fn l_cs_lim_from_moments(
    covariance: &PeriodicMatrixSeries,
    lag_one: &[Matrix],
    dt: f64,
) -> Result<PeriodicModel> {
    let period = covariance.len();
    if lag_one.len() != period {
        return Err(Error::GridMismatch(format!(
            "{period} covariances vs {} lag-one moments",
            lag_one.len()
        )));
    }
    let covariance = covariance.with_values(covariance.values().iter().map(matfun::symmetrize).collect())?;
    let dynamics: Vec<_> = covariance
        .values()
        .iter()
        .zip(lag_one)
        .map(|(c, k1)| right_divide(&((k1 - c) / dt), c).map_err(|e| flag_for(&e)))
        .collect();
    let dcdt = estimate::periodic_diff(&covariance, DiffScheme::Forward)?;
    let times = covariance.times().iter().map(|t| t + 0.5 * dt).collect();
    let phases = assemble(times, dynamics, covariance.values(), dcdt.values());
    Ok(PeriodicModel {
        estimator: Estimator::Lcslim,
        hyper: Hyper {
            intervals: None,
            k: Some(1),
            dt,
            period_samples: period,
        },
        dim: covariance.dim(),
        phases,
    })
}
