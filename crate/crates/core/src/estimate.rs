//! Second-moment estimators for stationary and cyclostationary records.
//!
//! None of the estimators remove a sample mean. The systems studied here are
//! zero-mean; callers working with real data must center it first (the ENSO
//! pipeline forms anomalies before fitting).

use std::io::Write;

use crate::error::{Error, Result};
use crate::matfun::{self, Matrix};
use crate::simulate::TimeSeries;

/// Sum of `x(b + lag) x(b)ᵀ` over the given base indices whose lead stays
/// inside the record. Returns the sum and the number of retained terms.
pub(crate) fn lagged_sum<I>(ts: &TimeSeries, bases: I, lag: usize) -> (Matrix, usize)
where
    I: IntoIterator<Item = usize>,
{
    let n = ts.dim();
    let len = ts.len();
    let data = ts.data();
    let mut acc = vec![0.0; n * n];
    let mut count = 0;
    for b in bases {
        let lead = b + lag;
        if lead >= len {
            continue;
        }
        let xb = &data[b * n..(b + 1) * n];
        let xl = &data[lead * n..(lead + 1) * n];
        for i in 0..n {
            let row = &mut acc[i * n..(i + 1) * n];
            let li = xl[i];
            for j in 0..n {
                row[j] += li * xb[j];
            }
        }
        count += 1;
    }
    (Matrix::from_row_slice(n, n, &acc), count)
}

/// `K(kΔt) = Σ_{t=0}^{(N−k)Δt} x(t + kΔt) x(t)ᵀ / (N − k + 1)` for a record of N + 1 samples.
pub fn stationary_correlation(ts: &TimeSeries, lag: usize) -> Result<Matrix> {
    let len = ts.len();
    if lag >= len {
        return Err(Error::LagExceedsRecord { lag, len });
    }
    let (sum, count) = lagged_sum(ts, 0..len - lag, lag);
    Ok(sum / count as f64)
}

fn complete_periods(ts: &TimeSeries, period: usize) -> Result<usize> {
    if period == 0 {
        return Err(Error::InvalidArgument("period must be positive".into()));
    }
    let periods = ts.len() / period;
    if periods == 0 {
        return Err(Error::TooShort {
            needed: period,
            got: ts.len(),
        });
    }
    Ok(periods)
}

fn cyclo_cell(ts: &TimeSeries, period: usize, lag: usize, phase: usize) -> Result<(Matrix, usize)> {
    let periods = complete_periods(ts, period)?;
    if phase >= period {
        return Err(Error::InvalidArgument(format!(
            "phase index {phase} outside 0..{period}"
        )));
    }
    let (sum, count) = lagged_sum(ts, (0..periods).map(|k| k * period + phase), lag);
    if count == 0 {
        return Err(Error::EmptyCell { lag, phase });
    }
    Ok((sum / count as f64, count))
}

/// Phase-resolved correlation `K(s, t)`: the average of `x(kP + t + s) x(kP + t)ᵀ`
/// over complete periods `k`, dropping terms whose lead leaves the record and
/// dividing by the retained count.
pub fn cyclo_correlation(
    ts: &TimeSeries,
    period: usize,
    lag: usize,
    phase: usize,
) -> Result<Matrix> {
    cyclo_cell(ts, period, lag, phase).map(|(k, _)| k)
}

/// Matrix sequence on a uniform periodic grid with spacing `1/P`.
///
/// Times are phase coordinates; they start anywhere and increase by `1/P`,
/// so a grid offset (for instance half a step) may push the last time past 1.
#[derive(Clone, Debug, PartialEq)]
pub struct PeriodicMatrixSeries {
    times: Vec<f64>,
    values: Vec<Matrix>,
}

impl PeriodicMatrixSeries {
    pub fn new(times: Vec<f64>, values: Vec<Matrix>) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::GridMismatch(format!(
                "{} times for {} values",
                times.len(),
                values.len()
            )));
        }
        if values.is_empty() {
            return Err(Error::InvalidArgument("empty periodic series".into()));
        }
        let shape = values[0].shape();
        if values.iter().any(|v| v.shape() != shape) {
            return Err(Error::DimensionMismatch("periodic series entries".into()));
        }
        let p = times.len() as f64;
        for w in times.windows(2) {
            if ((w[1] - w[0]) * p - 1.0).abs() > 1e-9 {
                return Err(Error::GridMismatch(format!(
                    "times not uniformly spaced by 1/{}",
                    times.len()
                )));
            }
        }
        Ok(PeriodicMatrixSeries { times, values })
    }

    /// Values at `offset + j/P`.
    pub fn uniform(values: Vec<Matrix>, offset: f64) -> Result<Self> {
        let p = values.len() as f64;
        let times = (0..values.len()).map(|j| offset + j as f64 / p).collect();
        PeriodicMatrixSeries::new(times, values)
    }

    pub fn from_scalars(values: &[f64], offset: f64) -> Result<Self> {
        Self::uniform(
            values.iter().map(|&v| Matrix::from_element(1, 1, v)).collect(),
            offset,
        )
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.values[0].nrows()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn into_values(self) -> Vec<Matrix> {
        self.values
    }

    /// Entry `(i, j)` of every matrix.
    pub fn entry(&self, i: usize, j: usize) -> Vec<f64> {
        self.values.iter().map(|m| m[(i, j)]).collect()
    }

    pub fn with_values(&self, values: Vec<Matrix>) -> Result<Self> {
        PeriodicMatrixSeries::new(self.times.clone(), values)
    }

    pub fn with_times(&self, times: Vec<f64>) -> Result<Self> {
        PeriodicMatrixSeries::new(times, self.values.clone())
    }

    /// Mean of the values over one period.
    pub fn mean(&self) -> Matrix {
        let mut acc = Matrix::zeros(self.values[0].nrows(), self.values[0].ncols());
        for v in &self.values {
            acc += v;
        }
        acc / self.len() as f64
    }
}

/// Lag-0 phase slices, symmetrized: `C(t) = K(0, t)` at `t = j/P`.
pub fn covariance_series(ts: &TimeSeries, period: usize) -> Result<PeriodicMatrixSeries> {
    let values = (0..period)
        .map(|phase| cyclo_correlation(ts, period, 0, phase).map(|k| matfun::symmetrize(&k)))
        .collect::<Result<Vec<_>>>()?;
    PeriodicMatrixSeries::uniform(values, 0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiffScheme {
    /// `(v_{j+1} − v_j) P`, centered half a step after `t_j`.
    Forward,
    /// `(v_{j+1} − v_{j−1}) P / 2`, centered at `t_j`.
    Central,
}

/// Periodic finite difference with indices taken modulo `P`; the output keeps
/// the input's time coordinates.
pub fn periodic_diff(series: &PeriodicMatrixSeries, scheme: DiffScheme) -> Result<PeriodicMatrixSeries> {
    let p = series.len();
    let needed = match scheme {
        DiffScheme::Forward => 2,
        DiffScheme::Central => 3,
    };
    if p < needed {
        return Err(Error::TooFewPhases { needed, got: p });
    }
    let v = series.values();
    let pf = p as f64;
    let values = (0..p)
        .map(|j| {
            let next = &v[(j + 1) % p];
            match scheme {
                DiffScheme::Forward => (next - &v[j]) * pf,
                DiffScheme::Central => (next - &v[(j + p - 1) % p]) * (pf / 2.0),
            }
        })
        .collect();
    series.with_values(values)
}

/// `K(s, t)` on a lag × phase grid with the number of averaged terms per cell.
#[derive(Clone, Debug)]
pub struct CorrelationField {
    period: usize,
    max_lag: usize,
    cells: Vec<Matrix>,
    counts: Vec<usize>,
}

impl CorrelationField {
    /// Estimates lags `0..=max_lag` at every phase; the lag-0 slice is symmetrized.
    pub fn estimate(ts: &TimeSeries, period: usize, max_lag: usize) -> Result<Self> {
        let mut cells = Vec::with_capacity((max_lag + 1) * period);
        let mut counts = Vec::with_capacity((max_lag + 1) * period);
        for lag in 0..=max_lag {
            for phase in 0..period {
                let (k, count) = cyclo_cell(ts, period, lag, phase)?;
                cells.push(if lag == 0 { matfun::symmetrize(&k) } else { k });
                counts.push(count);
            }
        }
        Ok(CorrelationField {
            period,
            max_lag,
            cells,
            counts,
        })
    }

    pub fn period(&self) -> usize {
        self.period
    }

    pub fn max_lag(&self) -> usize {
        self.max_lag
    }

    pub fn get(&self, lag: usize, phase: usize) -> &Matrix {
        &self.cells[lag * self.period + phase]
    }

    pub fn count(&self, lag: usize, phase: usize) -> usize {
        self.counts[lag * self.period + phase]
    }

    /// Diagnostic export with columns `lag,phase,i,j,value,count`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "lag,phase,i,j,value,count")?;
        for lag in 0..=self.max_lag {
            for phase in 0..self.period {
                let k = self.get(lag, phase);
                let count = self.count(lag, phase);
                for i in 0..k.nrows() {
                    for j in 0..k.ncols() {
                        writeln!(w, "{lag},{phase},{i},{j},{:.16e},{count}", k[(i, j)])?;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(values: &[f64]) -> TimeSeries {
        TimeSeries::scalar(0.5, values).unwrap()
    }

    #[test]
    fn stationary_hand_computed() {
        let ts = series(&[1.0, 2.0, 3.0]);
        assert_eq!(stationary_correlation(&ts, 1).unwrap()[(0, 0)], 4.0);
        assert_eq!(stationary_correlation(&ts, 0).unwrap()[(0, 0)], 14.0 / 3.0);
        assert_eq!(
            stationary_correlation(&ts, 3).unwrap_err(),
            Error::LagExceedsRecord { lag: 3, len: 3 }
        );
    }

    #[test]
    fn cyclo_hand_computed() {
        let ts = series(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(cyclo_correlation(&ts, 2, 0, 0).unwrap()[(0, 0)], 5.0);
        // only the k = 0 term has its lead inside the record
        assert_eq!(cyclo_correlation(&ts, 2, 1, 1).unwrap()[(0, 0)], 6.0);
        assert_eq!(
            cyclo_correlation(&ts, 2, 3, 1).unwrap_err(),
            Error::EmptyCell { lag: 3, phase: 1 }
        );
    }

    #[test]
    fn covariance_series_hand_computed() {
        let ts = series(&[1.0, 2.0, 3.0, 4.0]);
        let c = covariance_series(&ts, 2).unwrap();
        assert_eq!(c.entry(0, 0), vec![5.0, 10.0]);
        assert_eq!(c.times(), &[0.0, 0.5]);
    }

    #[test]
    fn covariance_of_constant_vector() {
        let v = [1.5, -2.0];
        let data: Vec<f64> = (0..12).flat_map(|_| v).collect();
        let ts = TimeSeries::new(0.25, 0.0, 2, data).unwrap();
        let c = covariance_series(&ts, 4).unwrap();
        let outer = Matrix::from_row_slice(2, 2, &[2.25, -3.0, -3.0, 4.0]);
        for m in c.values() {
            assert_eq!(m, &outer);
        }
    }

    #[test]
    fn diff_constant_and_wrap() {
        let s = PeriodicMatrixSeries::from_scalars(&[2.0; 5], 0.0).unwrap();
        for scheme in [DiffScheme::Forward, DiffScheme::Central] {
            assert!(periodic_diff(&s, scheme).unwrap().entry(0, 0).iter().all(|&v| v == 0.0));
        }
        let s = PeriodicMatrixSeries::from_scalars(&[0.0, 1.0, 2.0, 3.0], 0.0).unwrap();
        let f = periodic_diff(&s, DiffScheme::Forward).unwrap().entry(0, 0);
        // last phase differences against phase 0
        assert_eq!(f, vec![4.0, 4.0, 4.0, -12.0]);
        let c = periodic_diff(&s, DiffScheme::Central).unwrap().entry(0, 0);
        assert_eq!(c, vec![-4.0, 4.0, 4.0, -4.0]);
    }

    #[test]
    fn diff_needs_enough_phases() {
        let s = PeriodicMatrixSeries::from_scalars(&[1.0, 2.0], 0.0).unwrap();
        assert_eq!(
            periodic_diff(&s, DiffScheme::Central).unwrap_err(),
            Error::TooFewPhases { needed: 3, got: 2 }
        );
        let s = PeriodicMatrixSeries::from_scalars(&[1.0], 0.0).unwrap();
        assert!(periodic_diff(&s, DiffScheme::Forward).is_err());
    }

    #[test]
    fn field_export_schema() {
        let ts = series(&[1.0, 2.0, 3.0, 4.0]);
        let field = CorrelationField::estimate(&ts, 2, 1).unwrap();
        assert_eq!(field.count(1, 1), 1);
        assert_eq!(field.get(1, 1)[(0, 0)], 6.0);
        let mut buf = Vec::new();
        field.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("lag,phase,i,j,value,count"));
        assert_eq!(lines.count(), 4);
    }
}
