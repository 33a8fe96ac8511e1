//! Seeded multi-trial experiments and the monthly-index driver.
//!
//! Trial `i` draws from `RandomStream::new(master_seed, i)`; its children
//! supply the random system (when one is drawn) and the sample path, so any
//! single trial can be re-run from the report alone. Trials run in parallel
//! and are aggregated in trial order, which makes reports byte-identical for
//! identical configurations.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::enso::{self, MonthlySeries, Polarity, RegenerateConfig, SyntheticIndex, MONTHS};
use crate::error::{Error, Result};
use crate::estimate::{self, DiffScheme, PeriodicMatrixSeries};
use crate::matfun::Matrix;
use crate::models::{self, CsVariant, Estimator, PeriodicModel};
use crate::postproc::{self, FitResult, Filter, Summary};
use crate::simulate::{
    random_stable_system, sample_path_with, sinusoidal_system, steps_per_period, PathConfig, RandomStream,
    SystemSpec, TimeSeries,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

// Child-stream slots of a trial stream.
const SYSTEM_SLOT: u64 = 0;
const PATH_SLOT: u64 = 1;

fn cell_stream(trial: RandomStream, slot: u64, n: usize) -> RandomStream {
    trial.child(slot + 16 * n as u64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Oned,
    Nd,
    Convergence,
    Enso,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Oned => "oned",
            ExperimentKind::Nd => "nd",
            ExperimentKind::Convergence => "convergence",
            ExperimentKind::Enso => "enso",
        }
    }
}

/// Sinusoidal truth `Ā(1 + aπ sin 2πt)`, `Q̄(1 + bπ sin 2πt)`. The means are
/// used for the scalar study; drawn systems only take `a` and `b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinusoidParams {
    pub mean_dynamics: f64,
    pub a: f64,
    pub mean_diffusion: f64,
    pub b: f64,
}

impl Default for SinusoidParams {
    fn default() -> Self {
        SinusoidParams {
            mean_dynamics: -1.0,
            a: 0.2,
            mean_diffusion: 1.0,
            b: 0.3,
        }
    }
}

/// Filter parameters; unset values take the defaults derived from `P` and `M`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterParams {
    pub ma_window: Option<usize>,
    pub lp_cutoff: Option<usize>,
    pub gw_sigma: Option<f64>,
}

impl FilterParams {
    pub fn resolve(&self, period: usize, intervals: usize) -> [Filter; 3] {
        let [ma, lp, gw] = Filter::defaults(period, intervals);
        [
            self.ma_window.map_or(ma, |window| Filter::MovingAverage { window }),
            self.lp_cutoff.map_or(lp, |cutoff| Filter::Lowpass { cutoff }),
            self.gw_sigma.map_or(gw, |sigma| Filter::Gaussian { sigma }),
        ]
    }
}

/// Lag used by the `e` model in the convergence sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "lowercase")]
pub enum LagRule {
    /// Lag equal to the interval width, `k = P/M`.
    Interval,
    Fixed { k: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsoParams {
    /// `year,month,value` CSV; when absent the synthetic index is used.
    pub data: Option<String>,
    pub synthetic: SyntheticIndex,
    pub members: usize,
    /// Ensemble length; defaults to the whole years of the input record.
    pub years: Option<usize>,
    pub dt_years: f64,
    pub burn_in_years: usize,
    pub threshold: f64,
    pub window: usize,
    pub polarity: Polarity,
}

impl Default for EnsoParams {
    fn default() -> Self {
        EnsoParams {
            data: None,
            synthetic: SyntheticIndex::default(),
            members: 1024,
            years: None,
            dt_years: 0.001,
            burn_in_years: 1,
            threshold: enso::DEFAULT_THRESHOLD,
            window: enso::DEFAULT_WINDOW,
            polarity: Polarity::Absolute,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub dims: Vec<usize>,
    /// Record lengths in periods.
    pub tf_list: Vec<usize>,
    pub trials: usize,
    /// Euler step.
    pub dt: f64,
    /// Recorded every `stride` Euler steps.
    pub stride: usize,
    /// `M`.
    pub intervals: usize,
    /// `k`, in samples.
    pub lag: usize,
    pub master_seed: u64,
    pub burn_in_periods: usize,
    pub system: SinusoidParams,
    pub filters: FilterParams,
    pub m_list: Vec<usize>,
    pub convergence_lag: LagRule,
    /// Largest tolerated fraction of failed fits.
    pub failure_budget: f64,
    pub enso: EnsoParams,
}

impl ExperimentConfig {
    /// Desk-scale defaults.
    pub fn defaults(kind: ExperimentKind) -> Self {
        let dims = match kind {
            ExperimentKind::Nd => vec![1, 2, 3],
            _ => vec![1],
        };
        ExperimentConfig {
            experiment: kind,
            dims,
            tf_list: vec![100, 1000],
            trials: 128,
            dt: 0.002,
            stride: 5,
            intervals: 10,
            lag: 10,
            master_seed: 0,
            burn_in_periods: 10,
            system: SinusoidParams::default(),
            filters: FilterParams::default(),
            m_list: vec![10, 20, 50, 100],
            convergence_lag: LagRule::Interval,
            failure_budget: 0.05,
            enso: EnsoParams::default(),
        }
    }

    /// Restore the full protocol: 1024 trials and records up to 5000 periods.
    pub fn full_scale(mut self) -> Self {
        self.trials = 1024;
        self.tf_list = vec![100, 1000, 5000];
        self.enso.members = 1024;
        self
    }

    /// Overlay a JSON object onto `self`, field by field.
    pub fn overlay(&self, json: &str) -> Result<Self> {
        let patch: Value = serde_json::from_str(json).map_err(|e| Error::Config(e.to_string()))?;
        if !patch.is_object() {
            return Err(Error::Config("configuration must be a JSON object".into()));
        }
        let mut base = serde_json::to_value(self).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, patch);
        let cfg: ExperimentConfig = serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.experiment != self.experiment {
            return Err(Error::Config(format!(
                "configuration is for {:?}, not {:?}",
                cfg.experiment.name(),
                self.experiment.name()
            )));
        }
        Ok(cfg)
    }

    /// Samples per period of the recorded series.
    pub fn period(&self) -> Result<usize> {
        Ok(steps_per_period(self.dt)? / self.stride.max(1))
    }

    pub fn sample_dt(&self) -> f64 {
        self.dt * self.stride as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if self.experiment == ExperimentKind::Enso {
            if self.enso.members == 0 {
                return bad("ensemble needs at least one member".into());
            }
            if !(self.enso.dt_years > 0.0) {
                return bad("ensemble dt must be positive".into());
            }
            return Ok(());
        }
        let spp = steps_per_period(self.dt).map_err(|e| Error::Config(e.to_string()))?;
        if self.stride == 0 || spp % self.stride != 0 {
            return bad(format!("stride {} does not divide {spp} steps per period", self.stride));
        }
        let p = spp / self.stride;
        if self.intervals == 0 || p % self.intervals != 0 {
            return bad(format!("{p} samples per period cannot be split into {} intervals", self.intervals));
        }
        if self.lag == 0 {
            return bad("lag must be at least one sample".into());
        }
        if self.dims.is_empty() || self.dims.iter().any(|&n| n == 0 || n > 6) {
            return bad("dimensions must lie in 1..=6".into());
        }
        if self.experiment == ExperimentKind::Oned && self.dims != [1] {
            return bad("the scalar study takes dims = [1]".into());
        }
        if self.tf_list.is_empty() || self.tf_list.iter().any(|&t| t < 2) {
            return bad("each record length must be at least 2 periods".into());
        }
        if !(0.0..=1.0).contains(&self.failure_budget) {
            return bad("failure budget must lie in [0, 1]".into());
        }
        if self.experiment == ExperimentKind::Convergence {
            if self.m_list.is_empty() || self.m_list.windows(2).any(|w| w[0] >= w[1]) {
                return bad("interval counts must be strictly ascending".into());
            }
            if self.m_list.iter().any(|&m| m == 0 || p % m != 0) {
                return bad(format!("every interval count must divide {p}"));
            }
            if *self.m_list.last().unwrap() != p {
                return bad(format!("interval counts must end at {p}"));
            }
            if let LagRule::Fixed { k: 0 } = self.convergence_lag {
                return bad("lag must be at least one sample".into());
            }
        }
        Ok(())
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub stage: String,
    pub error: String,
}

/// Outcome of one trial (one cell of the sweep).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub n: usize,
    pub tf: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    pub stream: RandomStream,
    /// `model.metric` → value.
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub fits: BTreeMap<String, FitResult>,
    /// `model` → number of flagged phases.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub flags: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<Failure>,
}

impl TrialRecord {
    fn new(trial: usize, n: usize, tf: usize, stream: RandomStream) -> Self {
        TrialRecord {
            trial,
            n,
            tf,
            m: None,
            stream,
            metrics: BTreeMap::new(),
            fits: BTreeMap::new(),
            flags: BTreeMap::new(),
            failures: Vec::new(),
        }
    }

    fn metric(&mut self, key: String, value: Result<f64>) {
        match value {
            Ok(v) if v.is_finite() => {
                self.metrics.insert(key, v);
            }
            Ok(v) => self.fail(&key, format!("non-finite value {v}")),
            Err(e) => self.fail(&key, e.to_string()),
        }
    }

    fn fail(&mut self, stage: &str, error: String) {
        self.failures.push(Failure {
            stage: stage.to_string(),
            error,
        });
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub tf: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    pub metric: String,
    #[serde(flatten)]
    pub summary: Summary,
}

/// Model curves of one trial on the uniform phase grid (scalar systems only).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    pub trial: usize,
    pub tf: usize,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub version: String,
    pub config: ExperimentConfig,
    pub samples_per_period: usize,
    pub filters: Vec<Filter>,
    /// Number of model fits attempted.
    pub attempted: usize,
    pub failure_count: usize,
    pub trials: Vec<TrialRecord>,
    pub aggregates: Vec<Aggregate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curves: Option<Curves>,
}

impl ExperimentReport {
    pub fn failure_fraction(&self) -> f64 {
        if self.attempted == 0 {
            0.0
        } else {
            self.failure_count as f64 / self.attempted as f64
        }
    }

    pub fn within_budget(&self) -> bool {
        self.failure_fraction() <= self.config.failure_budget
    }

    pub fn aggregate(&self, n: usize, tf: usize, m: Option<usize>, metric: &str) -> Option<&Summary> {
        self.aggregates
            .iter()
            .find(|a| a.n == n && a.tf == tf && a.m == m && a.metric == metric)
            .map(|a| &a.summary)
    }

    pub fn median(&self, n: usize, tf: usize, m: Option<usize>, metric: &str) -> Option<f64> {
        self.aggregate(n, tf, m, metric).map(|s| s.median)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Summaries per `(n, tf, m, metric)` over the trial records, plus fitted phases.
pub fn aggregate(trials: &[TrialRecord]) -> Vec<Aggregate> {
    let mut groups: BTreeMap<(usize, usize, Option<usize>, String), Vec<f64>> = BTreeMap::new();
    for t in trials {
        for (k, v) in &t.metrics {
            groups.entry((t.n, t.tf, t.m, k.clone())).or_default().push(*v);
        }
        for (k, f) in &t.fits {
            if !f.degenerate_mean {
                for (name, v) in [("mean", f.mean), ("intensity", f.intensity), ("phase", f.phase)] {
                    groups
                        .entry((t.n, t.tf, t.m, format!("{k}.{name}")))
                        .or_default()
                        .push(v);
                }
            }
        }
    }
    groups
        .into_iter()
        .map(|((n, tf, m, metric), v)| Aggregate {
            n,
            tf,
            m,
            metric,
            summary: Summary::of(&v),
        })
        .collect()
}

fn simulate(cfg: &ExperimentConfig, spec: &SystemSpec, tf: usize, stream: RandomStream) -> Result<TimeSeries> {
    let path = PathConfig {
        dt: cfg.dt,
        periods: tf,
        x0: vec![0.0; spec.dim()],
        burn_in_periods: cfg.burn_in_periods,
        stride: cfg.stride,
    };
    sample_path_with(spec, &path, stream)
}

fn scalar_system(p: &SinusoidParams) -> Result<SystemSpec> {
    sinusoidal_system(
        &Matrix::from_element(1, 1, p.mean_dynamics),
        p.a,
        &Matrix::from_element(1, 1, p.mean_diffusion),
        p.b,
    )
}

fn drawn_system(n: usize, p: &SinusoidParams, stream: RandomStream) -> Result<SystemSpec> {
    let (a, q) = random_stable_system(n, stream)?;
    sinusoidal_system(&a, p.a, &q, p.b)
}

/// The four models on one record. Failures are returned in place.
pub fn fit_all(ts: &TimeSeries, period: usize, intervals: usize, lag: usize) -> Vec<(Estimator, Result<PeriodicModel>)> {
    let lim = models::classical_lim(ts, lag).map(|(a, q)| PeriodicModel::constant(Estimator::Lim, &a, &q, period, ts.dt()));
    vec![
        (Estimator::Lim, lim),
        (Estimator::Cslim, models::cs_lim(ts, period, intervals, lag, CsVariant::Original)),
        (Estimator::Ecslim, models::cs_lim(ts, period, intervals, lag, CsVariant::E)),
        (Estimator::Lcslim, models::l_cs_lim(ts, period)),
    ]
}

fn truth_errors(
    rec: &mut TrialRecord,
    label: &str,
    a: &[(f64, &Matrix)],
    q: &[(f64, &Matrix)],
    spec: &SystemSpec,
) {
    rec.metric(format!("{label}.E_A"), postproc::relative_error_series(a, |t| spec.dynamics_at(t)));
    rec.metric(format!("{label}.E_Q"), postproc::relative_error_series(q, |t| spec.diffusion_at(t)));
}

fn sine_fit_points(points: &[(f64, &Matrix)]) -> Result<FitResult> {
    let t: Vec<f64> = points.iter().map(|p| p.0).collect();
    let y: Vec<f64> = points.iter().map(|p| p.1[(0, 0)]).collect();
    postproc::sine_fit(&y, &t)
}

fn record_fit(rec: &mut TrialRecord, key: String, fit: Result<FitResult>, truth_mean: f64, truth_intensity: f64) {
    match fit {
        Ok(f) if f.mean.is_finite() && f.intensity.is_finite() && f.phase.is_finite() => {
            rec.metric(format!("{key}.e_mean"), Ok((f.mean - truth_mean).abs() / truth_mean.abs()));
            if truth_intensity != 0.0 {
                rec.metric(
                    format!("{key}.e_intensity"),
                    Ok((f.intensity - truth_intensity).abs() / truth_intensity.abs()),
                );
            }
            rec.fits.insert(key, f);
        }
        Ok(_) => rec.fail(&key, "non-finite fit".into()),
        Err(e) => rec.fail(&key, e.to_string()),
    }
}

struct Fitted {
    models: Vec<(Estimator, PeriodicModel)>,
    filtered: Vec<(&'static str, PeriodicMatrixSeries, PeriodicMatrixSeries)>,
}

fn model_of(models: &[(Estimator, PeriodicModel)], e: Estimator) -> Option<&PeriodicModel> {
    models.iter().find(|(k, _)| *k == e).map(|(_, m)| m)
}

fn fit_and_record(rec: &mut TrialRecord, ts: &TimeSeries, cfg: &ExperimentConfig, period: usize) -> Vec<(Estimator, PeriodicModel)> {
    let mut out = Vec::new();
    for (est, model) in fit_all(ts, period, cfg.intervals, cfg.lag) {
        match model {
            Ok(m) => {
                rec.flags.insert(est.name().into(), m.flagged_count());
                out.push((est, m));
            }
            Err(e) => rec.fail(est.name(), e.to_string()),
        }
    }
    out
}

fn oned_trial(cfg: &ExperimentConfig, spec: &SystemSpec, tf: usize, trial: usize, want_curves: bool) -> (TrialRecord, Option<Curves>) {
    let stream = RandomStream::new(cfg.master_seed, trial as u64);
    let mut rec = TrialRecord::new(trial, 1, tf, stream);
    let period = cfg.period().expect("validated");
    let ts = match simulate(cfg, spec, tf, cell_stream(stream, PATH_SLOT, 1)) {
        Ok(ts) => ts,
        Err(e) => {
            rec.fail("simulate", e.to_string());
            return (rec, None);
        }
    };
    let models = fit_and_record(&mut rec, &ts, cfg, period);
    let p = &cfg.system;
    for (est, m) in &models {
        let (a, q) = (m.dynamics_points(), m.diffusion_points());
        truth_errors(&mut rec, est.name(), &a, &q, spec);
        record_fit(&mut rec, format!("{}.A", est.name()), sine_fit_points(&a), p.mean_dynamics, p.a);
        record_fit(&mut rec, format!("{}.Q", est.name()), sine_fit_points(&q), p.mean_diffusion, p.b);
    }
    let mut fitted = Fitted {
        models,
        filtered: Vec::new(),
    };
    if let Some(l) = model_of(&fitted.models, Estimator::Lcslim) {
        match (l.dynamics_series(), l.diffusion_series()) {
            (Ok(a), Ok(q)) => {
                for f in cfg.filters.resolve(period, cfg.intervals) {
                    let label = format!("lcslim_{}", f.label());
                    match (f.apply(&a), f.apply(&q)) {
                        (Ok(fa), Ok(fq)) => {
                            truth_errors(&mut rec, &label, &postproc::series_points(&fa), &postproc::series_points(&fq), spec);
                            fitted.filtered.push((f.label(), fa, fq));
                        }
                        (Err(e), _) | (_, Err(e)) => rec.fail(&label, e.to_string()),
                    }
                }
            }
            _ => rec.fail("lcslim_filters", "flagged phases in the pointwise model".into()),
        }
    }
    let curves = want_curves.then(|| curves_of(&fitted, spec, period, trial, tf));
    (rec, curves)
}

fn curves_of(fitted: &Fitted, spec: &SystemSpec, period: usize, trial: usize, tf: usize) -> Curves {
    let grid: Vec<f64> = (0..period).map(|j| j as f64 / period as f64).collect();
    let mut columns = vec!["t".to_string()];
    let mut cols: Vec<Vec<Option<f64>>> = vec![grid.iter().map(|&t| Some(t)).collect()];
    let interp = |pts: &[(f64, &Matrix)]| -> Vec<Option<f64>> {
        grid.iter()
            .map(|&t| postproc::circular_interpolate(pts, t).ok().map(|m| m[(0, 0)]))
            .collect()
    };
    for field in ["A", "Q"] {
        columns.push(format!("truth_{field}"));
        cols.push(
            grid.iter()
                .map(|&t| {
                    Some(if field == "A" {
                        spec.dynamics_at(t)[(0, 0)]
                    } else {
                        spec.diffusion_at(t)[(0, 0)]
                    })
                })
                .collect(),
        );
        for est in Estimator::ALL {
            columns.push(format!("{}_{field}", est.name()));
            cols.push(match model_of(&fitted.models, est) {
                Some(m) if field == "A" => interp(&m.dynamics_points()),
                Some(m) => interp(&m.diffusion_points()),
                None => vec![None; period],
            });
        }
        for (label, a, q) in &fitted.filtered {
            columns.push(format!("lcslim_{label}_{field}"));
            let s = if field == "A" { a } else { q };
            cols.push(interp(&postproc::series_points(s)));
        }
    }
    let rows = (0..period).map(|j| cols.iter().map(|c| c[j]).collect()).collect();
    Curves {
        trial,
        tf,
        columns,
        rows,
    }
}

fn nd_trial(cfg: &ExperimentConfig, n: usize, tf: usize, trial: usize) -> TrialRecord {
    let stream = RandomStream::new(cfg.master_seed, trial as u64);
    let mut rec = TrialRecord::new(trial, n, tf, stream);
    let period = cfg.period().expect("validated");
    let spec = match drawn_system(n, &cfg.system, cell_stream(stream, SYSTEM_SLOT, n)) {
        Ok(s) => s,
        Err(e) => {
            rec.fail("system", e.to_string());
            return rec;
        }
    };
    let ts = match simulate(cfg, &spec, tf, cell_stream(stream, PATH_SLOT, n)) {
        Ok(ts) => ts,
        Err(e) => {
            rec.fail("simulate", e.to_string());
            return rec;
        }
    };
    let abar = spec.mean_dynamics();
    let qbar = spec.mean_diffusion();
    for (est, m) in fit_and_record(&mut rec, &ts, cfg, period) {
        let name = est.name();
        if est == Estimator::Lcslim {
            truth_errors(&mut rec, "lcslim_raw", &m.dynamics_points(), &m.diffusion_points(), &spec);
            let averaged = m
                .dynamics_series()
                .and_then(|a| postproc::interval_average(&a, cfg.intervals))
                .and_then(|a| {
                    let q = postproc::interval_average(&m.diffusion_series()?, cfg.intervals)?;
                    Ok((a, q))
                });
            match averaged {
                Ok((a, q)) => truth_errors(&mut rec, name, &postproc::series_points(&a), &postproc::series_points(&q), &spec),
                Err(e) => rec.fail(name, e.to_string()),
            }
        } else {
            truth_errors(&mut rec, name, &m.dynamics_points(), &m.diffusion_points(), &spec);
        }
        rec.metric(format!("{name}.e_Abar"), m.mean_dynamics().and_then(|a| postproc::relative_error_const(&a, &abar)));
        rec.metric(format!("{name}.e_Qbar"), m.mean_diffusion().and_then(|q| postproc::relative_error_const(&q, &qbar)));
    }
    rec
}

fn convergence_trial(cfg: &ExperimentConfig, n: usize, tf: usize, trial: usize) -> Vec<TrialRecord> {
    let stream = RandomStream::new(cfg.master_seed, trial as u64);
    let period = cfg.period().expect("validated");
    let blank = |m: Option<usize>| {
        let mut r = TrialRecord::new(trial, n, tf, stream);
        r.m = m;
        r
    };
    let spec = if n == 1 {
        scalar_system(&cfg.system)
    } else {
        drawn_system(n, &cfg.system, cell_stream(stream, SYSTEM_SLOT, n))
    };
    let ts = spec.and_then(|s| simulate(cfg, &s, tf, cell_stream(stream, PATH_SLOT, n)));
    let ts = match ts {
        Ok(ts) => ts,
        Err(e) => {
            let mut r = blank(None);
            r.fail("simulate", e.to_string());
            return vec![r];
        }
    };
    let l = models::l_cs_lim(&ts, period);
    cfg.m_list
        .iter()
        .map(|&m| {
            let mut rec = blank(Some(m));
            let l = match &l {
                Ok(l) => l,
                Err(e) => {
                    rec.fail("lcslim", e.to_string());
                    return rec;
                }
            };
            let k = match cfg.convergence_lag {
                LagRule::Interval => period / m,
                LagRule::Fixed { k } => k,
            };
            match models::cs_lim(&ts, period, m, k, CsVariant::E) {
                Ok(e) => {
                    rec.flags.insert("ecslim".into(), e.flagged_count());
                    rec.flags.insert("lcslim".into(), l.flagged_count());
                    rec.metric(
                        "ecslim_vs_lcslim.diff_A".into(),
                        postproc::relative_difference(&e.dynamics_points(), &l.dynamics_points()),
                    );
                    rec.metric(
                        "ecslim_vs_lcslim.diff_Q".into(),
                        postproc::relative_difference(&e.diffusion_points(), &l.diffusion_points()),
                    );
                }
                Err(e) => rec.fail("ecslim", e.to_string()),
            }
            rec
        })
        .collect()
}

fn finish(cfg: &ExperimentConfig, trials: Vec<TrialRecord>, attempted: usize, curves: Option<Curves>) -> Result<ExperimentReport> {
    let period = cfg.period()?;
    let failure_count = trials.iter().map(|t| t.failures.len()).sum();
    Ok(ExperimentReport {
        version: format!("cslim {VERSION}"),
        config: cfg.clone(),
        samples_per_period: period,
        filters: cfg.filters.resolve(period, cfg.intervals).to_vec(),
        attempted,
        failure_count,
        aggregates: aggregate(&trials),
        trials,
        curves,
    })
}

fn cells(cfg: &ExperimentConfig) -> Vec<(usize, usize, usize)> {
    let mut v = Vec::new();
    for &n in &cfg.dims {
        for &tf in &cfg.tf_list {
            for trial in 0..cfg.trials {
                v.push((n, tf, trial));
            }
        }
    }
    v
}

/// Scalar sinusoidal study: the four models, sine fits and filter comparison.
pub fn run_oned(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    expect_kind(cfg, ExperimentKind::Oned)?;
    cfg.validate()?;
    let spec = scalar_system(&cfg.system).map_err(|e| Error::Config(e.to_string()))?;
    let longest = *cfg.tf_list.iter().max().unwrap();
    let results: Vec<(TrialRecord, Option<Curves>)> = cells(cfg)
        .into_par_iter()
        .map(|(_, tf, trial)| oned_trial(cfg, &spec, tf, trial, trial == 0 && tf == longest))
        .collect();
    let mut curves = None;
    let mut trials = Vec::with_capacity(results.len());
    for (r, c) in results {
        if c.is_some() {
            curves = c;
        }
        trials.push(r);
    }
    let attempted = trials.len() * (Estimator::ALL.len() + 3);
    finish(cfg, trials, attempted, curves)
}

/// Random stable systems of several dimensions.
pub fn run_nd(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    expect_kind(cfg, ExperimentKind::Nd)?;
    cfg.validate()?;
    let trials: Vec<TrialRecord> = cells(cfg)
        .into_par_iter()
        .map(|(n, tf, trial)| nd_trial(cfg, n, tf, trial))
        .collect();
    let attempted = trials.len() * Estimator::ALL.len();
    finish(cfg, trials, attempted, None)
}

/// Relative difference between the `e` and pointwise models as `M` grows.
pub fn run_convergence(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    expect_kind(cfg, ExperimentKind::Convergence)?;
    cfg.validate()?;
    let trials: Vec<TrialRecord> = cells(cfg)
        .into_par_iter()
        .map(|(n, tf, trial)| convergence_trial(cfg, n, tf, trial))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    let attempted = cfg.dims.len() * cfg.tf_list.len() * cfg.trials * cfg.m_list.len();
    finish(cfg, trials, attempted, None)
}

pub fn run(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    match cfg.experiment {
        ExperimentKind::Oned => run_oned(cfg),
        ExperimentKind::Nd => run_nd(cfg),
        ExperimentKind::Convergence => run_convergence(cfg),
        ExperimentKind::Enso => Err(Error::Config("use run_enso for the monthly-index pipeline".into())),
    }
}

fn expect_kind(cfg: &ExperimentConfig, kind: ExperimentKind) -> Result<()> {
    if cfg.experiment != kind {
        return Err(Error::Config(format!(
            "expected a {:?} configuration, got {:?}",
            kind.name(),
            cfg.experiment.name()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsoModelSummary {
    pub estimator: Estimator,
    pub flagged_phases: usize,
    pub indefinite_phases: usize,
    pub projected_phases: Vec<usize>,
    pub failed_members: Vec<usize>,
    pub stats: enso::EepStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsoReport {
    pub version: String,
    pub config: EnsoParams,
    pub master_seed: u64,
    /// `file` or `synthetic`.
    pub source: String,
    pub start_year: i32,
    pub start_month: u32,
    pub months: usize,
    /// Whole years used for fitting.
    pub fitted_years: usize,
    pub observed_total: usize,
    pub observed_per_month: [usize; MONTHS],
    pub models: Vec<EnsoModelSummary>,
}

/// Load or synthesize the index, fit, regenerate and write every artifact into `out`.
pub fn run_enso(cfg: &ExperimentConfig, out: &Path) -> Result<EnsoReport> {
    expect_kind(cfg, ExperimentKind::Enso)?;
    cfg.validate()?;
    let p = &cfg.enso;
    let master = RandomStream::new(cfg.master_seed, 0);
    let (raw, source) = match &p.data {
        Some(path) => (enso::load_monthly_index(path)?, "file"),
        None => (p.synthetic.generate(master.child(0))?, "synthetic"),
    };
    let anomaly = enso::compute_anomaly(&raw)?;
    let (e_model, l_model) = enso::fit_enso_models(&anomaly)?;
    let whole = anomaly.whole_years();
    let years = p.years.unwrap_or(whole.len() / MONTHS);
    let regen = RegenerateConfig {
        years,
        members: p.members,
        dt_years: p.dt_years,
        burn_in_years: p.burn_in_years,
        psd_eps: enso::PSD_EPS,
    };
    let observed = enso::eep_month_counts(&anomaly, p.threshold, p.window, p.polarity);
    let mut summaries = Vec::new();
    for (slot, model) in [(1, &e_model), (2, &l_model)] {
        let ens = enso::ensemble_regenerate(model, &regen, master.child(slot))?;
        if ens.members.is_empty() {
            return Err(Error::NumericalBlowup(0));
        }
        let stats = enso::eep_monthly_stats(&ens.members, p.threshold, p.window, p.polarity)?;
        summaries.push(EnsoModelSummary {
            estimator: model.estimator,
            flagged_phases: model.flagged_count(),
            indefinite_phases: model.indefinite_count(),
            projected_phases: ens.projected_phases,
            failed_members: ens.failed,
            stats,
        });
    }
    let report = EnsoReport {
        version: format!("cslim {VERSION}"),
        config: p.clone(),
        master_seed: cfg.master_seed,
        source: source.into(),
        start_year: anomaly.start_year,
        start_month: anomaly.start_month,
        months: anomaly.len(),
        fitted_years: whole.len() / MONTHS,
        observed_total: observed.iter().sum(),
        observed_per_month: observed,
        models: summaries,
    };
    write_enso_outputs(out, &anomaly, &e_model, &l_model, &report)?;
    Ok(report)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_enso_outputs(
    out: &Path,
    anomaly: &MonthlySeries,
    e_model: &PeriodicModel,
    l_model: &PeriodicModel,
    report: &EnsoReport,
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let p = &report.config;
    let peaks: Vec<usize> = enso::detect_eep(anomaly, p.threshold, p.window, p.polarity)
        .iter()
        .map(|r| r.index)
        .collect();
    let mut w = create(out, "anomaly.csv")?;
    writeln!(w, "year,month,value,eep")?;
    for (i, v) in anomaly.values.iter().enumerate() {
        let (y, m) = anomaly.year_month(i);
        writeln!(w, "{y},{m},{v},{}", u8::from(peaks.binary_search(&i).is_ok()))?;
    }
    w.flush()?;

    std::fs::write(out.join("model_enso.json"), e_model.to_json()? + "\n")?;
    std::fs::write(out.join("model_enso_l.json"), l_model.to_json()? + "\n")?;

    // covariance and its forward derivative beside both models, per calendar month
    let ts = anomaly.whole_years().to_time_series()?;
    let c = estimate::covariance_series(&ts, MONTHS)?;
    let dc = estimate::periodic_diff(&c, DiffScheme::Forward)?;
    let cell = |m: &Option<Matrix>| m.as_ref().map_or(String::new(), |m| m[(0, 0)].to_string());
    let mut w = create(out, "plot_models.csv")?;
    writeln!(w, "month,t,C,dCdt,ecslim_A,ecslim_Q,lcslim_A,lcslim_Q")?;
    for j in 0..MONTHS {
        let (pe, pl) = (&e_model.phases[j], &l_model.phases[j]);
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            j + 1,
            pe.t,
            c.values()[j][(0, 0)],
            dc.values()[j][(0, 0)],
            cell(&pe.dynamics),
            cell(&pe.diffusion),
            cell(&pl.dynamics),
            cell(&pl.diffusion)
        )?;
    }
    w.flush()?;

    let mut w = create(out, "plot_eep.csv")?;
    writeln!(w, "model,month,q25,median,q75,mean,observed")?;
    for s in &report.models {
        for m in &s.stats.per_month {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                s.estimator,
                m.month,
                m.q25,
                m.median,
                m.q75,
                m.mean,
                report.observed_per_month[m.month as usize - 1]
            )?;
        }
        let t = &s.stats.total;
        writeln!(w, "{},total,{},{},{},{},{}", s.estimator, t.q25, t.median, t.q75, t.mean, report.observed_total)?;
    }
    w.flush()?;

    let stats = serde_json::json!({
        "observed_total": report.observed_total,
        "observed_per_month": report.observed_per_month,
        "models": report.models.iter().map(|s| (s.estimator.name().to_string(), &s.stats)).collect::<BTreeMap<_, _>>(),
    });
    std::fs::write(out.join("eep_stats.json"), serde_json::to_string_pretty(&stats)? + "\n")?;
    std::fs::write(out.join("enso_report.json"), serde_json::to_string_pretty(report)? + "\n")?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotKind {
    Curves,
    Boxes,
    Phases,
}

impl std::str::FromStr for PlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "curves" => Ok(PlotKind::Curves),
            "boxes" => Ok(PlotKind::Boxes),
            "phases" => Ok(PlotKind::Phases),
            _ => Err(Error::UnknownKind(s.into())),
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

/// Tidy CSV derived from a report; returns the written path.
pub fn emit_plot_data(report: &ExperimentReport, kind: PlotKind, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    match kind {
        PlotKind::Curves => {
            let curves = report
                .curves
                .as_ref()
                .ok_or_else(|| Error::UnknownKind("curves (report has no scalar curves)".into()))?;
            let path = dir.join("curves.csv");
            let mut w = BufWriter::new(File::create(&path)?);
            writeln!(w, "{}", curves.columns.join(","))?;
            for row in &curves.rows {
                writeln!(w, "{}", row.iter().map(|v| opt(*v)).collect::<Vec<_>>().join(","))?;
            }
            w.flush()?;
            Ok(path)
        }
        PlotKind::Boxes => {
            let path = dir.join("boxes.csv");
            let mut w = BufWriter::new(File::create(&path)?);
            writeln!(w, "model,metric,n,tf,m,statistic,value")?;
            for a in &report.aggregates {
                let (model, metric) = a.metric.split_once('.').unwrap_or((&a.metric, ""));
                let m = a.m.map_or(String::new(), |m| m.to_string());
                let s = &a.summary;
                for (stat, v) in [
                    ("count", s.count as f64),
                    ("mean", s.mean),
                    ("q05", s.q05),
                    ("q25", s.q25),
                    ("median", s.median),
                    ("q75", s.q75),
                    ("q95", s.q95),
                ] {
                    writeln!(w, "{model},{metric},{},{},{m},{stat},{v}", a.n, a.tf)?;
                }
            }
            w.flush()?;
            Ok(path)
        }
        PlotKind::Phases => {
            const BINS: usize = 100;
            let mut hist: BTreeMap<(String, usize, usize), [usize; BINS]> = BTreeMap::new();
            for t in &report.trials {
                for (k, f) in &t.fits {
                    if f.degenerate_mean {
                        continue;
                    }
                    let bin = (((f.phase + 0.5) * BINS as f64).floor() as usize).min(BINS - 1);
                    hist.entry((k.clone(), t.n, t.tf)).or_insert([0; BINS])[bin] += 1;
                }
            }
            let path = dir.join("phases.csv");
            let mut w = BufWriter::new(File::create(&path)?);
            writeln!(w, "model,field,n,tf,bin_lo,bin_hi,count")?;
            for ((key, n, tf), counts) in &hist {
                let (model, field) = key.split_once('.').unwrap_or((key, ""));
                for (b, c) in counts.iter().enumerate() {
                    let lo = b as f64 / BINS as f64 - 0.5;
                    writeln!(w, "{model},{field},{n},{tf},{lo},{},{c}", lo + 1.0 / BINS as f64)?;
                }
            }
            w.flush()?;
            Ok(path)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(kind: ExperimentKind) -> ExperimentConfig {
        let mut c = ExperimentConfig::defaults(kind);
        c.trials = 2;
        c.tf_list = vec![20];
        c.burn_in_periods = 1;
        c
    }

    #[test]
    fn overlay_merges_nested_fields() {
        let base = ExperimentConfig::defaults(ExperimentKind::Oned);
        let c = base.overlay(r#"{"trials": 3, "system": {"a": 0.1}}"#).unwrap();
        assert_eq!(c.trials, 3);
        assert_eq!(c.system.a, 0.1);
        assert_eq!(c.system.b, 0.3);
        assert!(matches!(base.overlay(r#"{"bogus": 1}"#), Err(Error::Config(_))));
        assert!(matches!(base.overlay(r#"{"experiment": "nd"}"#), Err(Error::Config(_))));
    }

    #[test]
    fn validation_catches_grid_errors() {
        let mut c = ExperimentConfig::defaults(ExperimentKind::Oned);
        c.intervals = 7;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ExperimentConfig::defaults(ExperimentKind::Convergence);
        c.m_list = vec![10, 20];
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::defaults(ExperimentKind::Oned);
        c.trials = 0;
        assert!(c.validate().is_err());
        assert_eq!(ExperimentConfig::defaults(ExperimentKind::Nd).period().unwrap(), 100);
    }

    #[test]
    fn oned_report_is_deterministic() {
        let c = tiny(ExperimentKind::Oned);
        let a = run_oned(&c).unwrap().to_json().unwrap();
        let b = run_oned(&c).unwrap().to_json().unwrap();
        assert_eq!(a, b);
        let r = ExperimentReport::from_json(&a).unwrap();
        assert_eq!(r.trials.len(), 2);
        assert!(r.curves.is_some());
        assert!(r.median(1, 20, None, "ecslim.E_A").is_some());
    }

    #[test]
    fn convergence_has_one_record_per_interval_count() {
        let c = tiny(ExperimentKind::Convergence);
        let r = run_convergence(&c).unwrap();
        assert_eq!(r.trials.len(), 2 * 4);
        assert!(r.median(1, 20, Some(100), "ecslim_vs_lcslim.diff_A").is_some());
    }

    #[test]
    fn plot_kind_parsing() {
        assert_eq!("boxes".parse::<PlotKind>().unwrap(), PlotKind::Boxes);
        assert!(matches!("pie".parse::<PlotKind>(), Err(Error::UnknownKind(_))));
    }
}
