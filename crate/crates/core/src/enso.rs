//! Monthly climate-index pipeline: anomalies, 12-phase models, extreme-peak
//! detection and ensemble statistics.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matfun;
use crate::models::{self, CsVariant, PeriodicModel};
use crate::postproc::Summary;
use crate::matfun::Matrix;
use crate::simulate::{sample_path_with, sinusoidal_system, PathConfig, RandomStream, SystemSpec, TimeSeries};

pub const MONTHS: usize = 12;
pub const DEFAULT_THRESHOLD: f64 = 2.0;
pub const DEFAULT_WINDOW: usize = 6;
pub const PSD_EPS: f64 = 1e-8;

/// Contiguous monthly values starting at `start_year`-`start_month`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonthlySeries {
    pub start_year: i32,
    /// 1 = January.
    pub start_month: u32,
    pub values: Vec<f64>,
}

impl MonthlySeries {
    pub fn new(start_year: i32, start_month: u32, values: Vec<f64>) -> Result<Self> {
        if !(1..=12).contains(&start_month) {
            return Err(Error::InvalidArgument(format!("month {start_month} is not in 1..=12")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("monthly series"));
        }
        Ok(MonthlySeries {
            start_year,
            start_month,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Zero-based calendar month (0 = January) of entry `i`.
    pub fn month_index(&self, i: usize) -> usize {
        (self.start_month as usize - 1 + i) % MONTHS
    }

    /// `(year, month)` of entry `i`, month 1-based.
    pub fn year_month(&self, i: usize) -> (i32, u32) {
        let total = self.start_month as usize - 1 + i;
        (self.start_year + (total / MONTHS) as i32, (total % MONTHS) as u32 + 1)
    }

    /// Drop leading months up to the first January and trailing months of an
    /// incomplete final year.
    pub fn whole_years(&self) -> MonthlySeries {
        let skip = ((MONTHS - self.month_index(0)) % MONTHS).min(self.values.len());
        let keep = (self.values.len() - skip) / MONTHS * MONTHS;
        let (year, _) = self.year_month(skip);
        MonthlySeries {
            start_year: year,
            start_month: 1,
            values: self.values[skip..skip + keep].to_vec(),
        }
    }

    /// Scalar record with `Δt = 1/12` year.
    pub fn to_time_series(&self) -> Result<TimeSeries> {
        let origin = self.start_year as f64 + (self.start_month as f64 - 1.0) / MONTHS as f64;
        TimeSeries::new(1.0 / MONTHS as f64, origin, 1, self.values.clone())
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "year,month,value")?;
        for (i, v) in self.values.iter().enumerate() {
            let (y, m) = self.year_month(i);
            writeln!(w, "{y},{m},{v}")?;
        }
        Ok(())
    }
}

fn stamp(y: i32, m: u32) -> String {
    format!("{y}-{m:02}")
}

#[derive(Deserialize)]
struct Row {
    year: i32,
    month: u32,
    value: f64,
}

/// Parse a `year,month,value` CSV; months must be contiguous.
pub fn read_monthly_index<R: Read>(r: R) -> Result<MonthlySeries> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let headers = reader.headers()?.clone();
    let want = ["year", "month", "value"];
    if headers.len() != 3 || headers.iter().zip(want).any(|(h, w)| !h.eq_ignore_ascii_case(w)) {
        return Err(Error::Parse {
            line: 1,
            msg: "expected header year,month,value".into(),
        });
    }
    let mut start: Option<(i32, u32)> = None;
    let mut values = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let row: Row = rec.deserialize(Some(&headers)).map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        if !(1..=12).contains(&row.month) {
            return Err(Error::Parse {
                line,
                msg: format!("month {} is not in 1..=12", row.month),
            });
        }
        if !row.value.is_finite() {
            return Err(Error::Parse {
                line,
                msg: "non-finite value".into(),
            });
        }
        match start {
            None => start = Some((row.year, row.month)),
            Some((y0, m0)) => {
                let total = m0 as usize - 1 + values.len();
                let expect = (y0 + (total / MONTHS) as i32, (total % MONTHS) as u32 + 1);
                if expect != (row.year, row.month) {
                    return Err(Error::GapInRecord {
                        line,
                        expected: stamp(expect.0, expect.1),
                        found: stamp(row.year, row.month),
                    });
                }
            }
        }
        values.push(row.value);
    }
    let (y0, m0) = start.ok_or(Error::TooShort { needed: 1, got: 0 })?;
    MonthlySeries::new(y0, m0, values)
}

pub fn load_monthly_index(path: impl AsRef<Path>) -> Result<MonthlySeries> {
    read_monthly_index(std::fs::File::open(path)?)
}

/// Remove a linear trend and the monthly climatology, fitted jointly.
///
/// The output has zero mean in every calendar month and no linear trend.
pub fn compute_anomaly(series: &MonthlySeries) -> Result<MonthlySeries> {
    let n = series.len();
    if n < 2 * MONTHS {
        return Err(Error::TooShort {
            needed: 2 * MONTHS,
            got: n,
        });
    }
    let t: Vec<f64> = (0..n).map(|i| i as f64 / MONTHS as f64).collect();
    let mut sum_y = [0.0; MONTHS];
    let mut sum_t = [0.0; MONTHS];
    let mut count = [0usize; MONTHS];
    for i in 0..n {
        let c = series.month_index(i);
        sum_y[c] += series.values[i];
        sum_t[c] += t[i];
        count[c] += 1;
    }
    let mut y_res = Vec::with_capacity(n);
    let mut t_res = Vec::with_capacity(n);
    for i in 0..n {
        let c = series.month_index(i);
        y_res.push(series.values[i] - sum_y[c] / count[c] as f64);
        t_res.push(t[i] - sum_t[c] / count[c] as f64);
    }
    let stt: f64 = t_res.iter().map(|v| v * v).sum();
    let sty: f64 = t_res.iter().zip(&y_res).map(|(a, b)| a * b).sum();
    let slope = sty / stt;
    let values = y_res.iter().zip(&t_res).map(|(y, t)| y - slope * t).collect();
    MonthlySeries::new(series.start_year, series.start_month, values)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    /// Extremes of `|x|`, covering both warm and cold events.
    #[default]
    Absolute,
    /// Maxima of `x` only.
    Signed,
}

impl std::str::FromStr for Polarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "absolute" => Ok(Polarity::Absolute),
            "signed" => Ok(Polarity::Signed),
            _ => Err(Error::InvalidArgument(format!("unknown polarity {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EepRecord {
    /// Offset in months from the start of the series.
    pub index: usize,
    /// 1 = January.
    pub calendar_month: u32,
    pub value: f64,
}

/// Months whose magnitude dominates every month within `±window` and reaches
/// `threshold`. Equal magnitudes resolve to the earlier month; months near
/// the record edges are compared with the neighbors that exist.
pub fn detect_eep(anomaly: &MonthlySeries, threshold: f64, window: usize, polarity: Polarity) -> Vec<EepRecord> {
    let x = &anomaly.values;
    let score = |v: f64| match polarity {
        Polarity::Absolute => v.abs(),
        Polarity::Signed => v,
    };
    let n = x.len();
    let mut out = Vec::new();
    for m in 0..n {
        let s = score(x[m]);
        if s < threshold {
            continue;
        }
        let lo = m.saturating_sub(window);
        let hi = (m + window).min(n - 1);
        let before = (lo..m).all(|j| s > score(x[j]));
        let after = (m + 1..=hi).all(|j| s >= score(x[j]));
        if before && after {
            out.push(EepRecord {
                index: m,
                calendar_month: anomaly.month_index(m) as u32 + 1,
                value: x[m],
            });
        }
    }
    out
}

/// `e`-CS-LIM (`M = 12`, `k = 1`) and `l`-CS-LIM fitted to whole calendar
/// years of a monthly anomaly, with phase 0 at January.
pub fn fit_enso_models(anomaly: &MonthlySeries) -> Result<(PeriodicModel, PeriodicModel)> {
    let years = anomaly.whole_years();
    if years.len() < 10 * MONTHS {
        return Err(Error::TooShort {
            needed: 10 * MONTHS,
            got: years.len(),
        });
    }
    let ts = years.to_time_series()?;
    let e = models::cs_lim(&ts, MONTHS, MONTHS, 1, CsVariant::E)?;
    let l = models::l_cs_lim(&ts, MONTHS)?;
    Ok((e, l))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegenerateConfig {
    pub years: usize,
    pub members: usize,
    pub dt_years: f64,
    /// Discarded spin-up from `x = 0`.
    pub burn_in_years: usize,
    pub psd_eps: f64,
}

impl Default for RegenerateConfig {
    fn default() -> Self {
        RegenerateConfig {
            years: 137,
            members: 1024,
            dt_years: 0.001,
            burn_in_years: 1,
            psd_eps: PSD_EPS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    /// Surviving members in member order.
    pub members: Vec<MonthlySeries>,
    /// Indices of members lost to numerical blow-up.
    pub failed: Vec<usize>,
    /// Phases whose diffusion was changed by the PSD projection.
    pub projected_phases: Vec<usize>,
}

/// Piecewise-constant system from a model's phases, with each `Q` projected
/// onto the PSD cone. Returns the system and the phases the projection changed.
pub fn model_system(model: &PeriodicModel, eps: f64) -> Result<(SystemSpec, Vec<usize>)> {
    let mut dynamics = Vec::with_capacity(model.phases.len());
    let mut diffusions = Vec::with_capacity(model.phases.len());
    let mut projected = Vec::new();
    for (j, p) in model.phases.iter().enumerate() {
        let (Some(a), Some(q)) = (&p.dynamics, &p.diffusion) else {
            return Err(Error::InvalidArgument(format!("phase {j} of the model is flagged")));
        };
        let min = nalgebra::SymmetricEigen::new(matfun::symmetrize(q)).eigenvalues.min();
        if min < eps {
            projected.push(j);
        }
        dynamics.push(a.clone());
        diffusions.push(matfun::nearest_psd(q, eps)?);
    }
    Ok((SystemSpec::tabulated(dynamics, diffusions)?, projected))
}

/// Monthly means of an Euler path covering whole years from `t = 0`.
fn monthly_means(path: &TimeSeries, years: usize) -> Vec<f64> {
    let months = years * MONTHS;
    let mut sum = vec![0.0; months];
    let mut count = vec![0usize; months];
    let dt = path.dt();
    for i in 0..path.len() {
        let m = (i as f64 * dt * MONTHS as f64 + 1e-9).floor() as usize;
        if m < months {
            sum[m] += path.sample(i)[0];
            count[m] += 1;
        }
    }
    sum.iter().zip(&count).map(|(s, &c)| s / c.max(1) as f64).collect()
}

/// Regenerate `members` independent monthly-mean series from a scalar model.
pub fn ensemble_regenerate(model: &PeriodicModel, cfg: &RegenerateConfig, stream: RandomStream) -> Result<Ensemble> {
    if model.dim != 1 {
        return Err(Error::DimensionMismatch(format!(
            "monthly regeneration needs a scalar model, got dimension {}",
            model.dim
        )));
    }
    if cfg.years == 0 {
        return Err(Error::InvalidArgument("need at least one year".into()));
    }
    let (system, projected_phases) = model_system(model, cfg.psd_eps)?;
    let mut path_cfg = PathConfig::new(cfg.dt_years, cfg.years, 1);
    path_cfg.burn_in_periods = cfg.burn_in_years;
    let results: Vec<Result<Option<MonthlySeries>>> = (0..cfg.members)
        .into_par_iter()
        .map(|k| match sample_path_with(&system, &path_cfg, stream.child(k as u64)) {
            Ok(path) => Ok(Some(MonthlySeries::new(1, 1, monthly_means(&path, cfg.years))?)),
            Err(Error::NumericalBlowup(_)) => Ok(None),
            Err(e) => Err(e),
        })
        .collect();
    let mut members = Vec::with_capacity(cfg.members);
    let mut failed = Vec::new();
    for (k, r) in results.into_iter().enumerate() {
        match r? {
            Some(m) => members.push(m),
            None => failed.push(k),
        }
    }
    Ok(Ensemble {
        members,
        failed,
        projected_phases,
    })
}

/// Scalar sinusoidal system standing in for a monthly index with known truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticIndex {
    pub start_year: i32,
    pub years: usize,
    pub mean_dynamics: f64,
    pub a: f64,
    pub mean_diffusion: f64,
    pub b: f64,
    pub dt_years: f64,
    pub burn_in_years: usize,
}

impl Default for SyntheticIndex {
    fn default() -> Self {
        SyntheticIndex {
            start_year: 1884,
            years: 137,
            mean_dynamics: -2.0,
            a: 0.2,
            mean_diffusion: 1.0,
            b: 0.3,
            dt_years: 0.001,
            burn_in_years: 1,
        }
    }
}

impl SyntheticIndex {
    pub fn system(&self) -> Result<SystemSpec> {
        sinusoidal_system(
            &Matrix::from_element(1, 1, self.mean_dynamics),
            self.a,
            &Matrix::from_element(1, 1, self.mean_diffusion),
            self.b,
        )
    }

    /// Monthly means of one Euler path.
    pub fn generate(&self, stream: RandomStream) -> Result<MonthlySeries> {
        let mut cfg = PathConfig::new(self.dt_years, self.years, 1);
        cfg.burn_in_periods = self.burn_in_years;
        let path = sample_path_with(&self.system()?, &cfg, stream)?;
        MonthlySeries::new(self.start_year, 1, monthly_means(&path, self.years))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonthStats {
    /// 1 = January.
    pub month: u32,
    pub mean: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EepStats {
    pub threshold: f64,
    pub window: usize,
    pub polarity: Polarity,
    pub members: usize,
    pub per_month: Vec<MonthStats>,
    pub total: Summary,
    /// Total peak count of each member.
    pub totals: Vec<usize>,
}

/// Per-calendar-month peak counts per member.
pub fn eep_month_counts(series: &MonthlySeries, threshold: f64, window: usize, polarity: Polarity) -> [usize; MONTHS] {
    let mut counts = [0; MONTHS];
    for r in detect_eep(series, threshold, window, polarity) {
        counts[r.calendar_month as usize - 1] += 1;
    }
    counts
}

/// Distribution over members of the peak count in each calendar month and in total.
pub fn eep_monthly_stats(
    ensemble: &[MonthlySeries],
    threshold: f64,
    window: usize,
    polarity: Polarity,
) -> Result<EepStats> {
    if ensemble.is_empty() {
        return Err(Error::InvalidArgument("empty ensemble".into()));
    }
    let counts: Vec<[usize; MONTHS]> = ensemble
        .par_iter()
        .map(|m| eep_month_counts(m, threshold, window, polarity))
        .collect();
    let per_month = (0..MONTHS)
        .map(|c| {
            let v: Vec<f64> = counts.iter().map(|k| k[c] as f64).collect();
            let s = Summary::of(&v);
            MonthStats {
                month: c as u32 + 1,
                mean: s.mean,
                q25: s.q25,
                median: s.median,
                q75: s.q75,
            }
        })
        .collect();
    let totals: Vec<usize> = counts.iter().map(|k| k.iter().sum()).collect();
    let total = Summary::of(&totals.iter().map(|&t| t as f64).collect::<Vec<_>>());
    Ok(EepStats {
        threshold,
        window,
        polarity,
        members: ensemble.len(),
        per_month,
        total,
        totals,
    })
}
