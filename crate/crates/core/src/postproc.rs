//! Filters, sine fitting and error metrics on periodic series.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::PeriodicMatrixSeries;
use crate::matfun::Matrix;

/// Gaussian kernels are cut at this many standard deviations.
pub const GAUSSIAN_TRUNCATION: f64 = 4.0;

/// A denoising filter applied along the phase index.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Filter {
    None,
    MovingAverage { window: usize },
    Lowpass { cutoff: usize },
    Gaussian { sigma: f64 },
}

impl Filter {
    pub fn label(&self) -> &'static str {
        match self {
            Filter::None => "none",
            Filter::MovingAverage { .. } => "ma",
            Filter::Lowpass { .. } => "lp",
            Filter::Gaussian { .. } => "gw",
        }
    }

    pub fn apply(&self, series: &PeriodicMatrixSeries) -> Result<PeriodicMatrixSeries> {
        match *self {
            Filter::None => Ok(series.clone()),
            Filter::MovingAverage { window } => moving_average(series, window),
            Filter::Lowpass { cutoff } => lowpass(series, cutoff),
            Filter::Gaussian { sigma } => gaussian_smooth(series, sigma),
        }
    }

    /// The three filters with their defaults for `P` phases and `M` intervals.
    pub fn defaults(period: usize, intervals: usize) -> [Filter; 3] {
        [
            Filter::MovingAverage {
                window: default_window(period, intervals),
            },
            Filter::Lowpass {
                cutoff: DEFAULT_CUTOFF.min(period / 2),
            },
            Filter::Gaussian {
                sigma: default_sigma(period, intervals),
            },
        ]
    }
}

pub const DEFAULT_CUTOFF: usize = 4;

/// `P/M` rounded up to the next odd count, capped at `P` (or `P − 1` when `P` is even).
pub fn default_window(period: usize, intervals: usize) -> usize {
    let w = (period / intervals.max(1)).max(1);
    let w = if w % 2 == 0 { w + 1 } else { w };
    if w > period {
        if period % 2 == 0 {
            period - 1
        } else {
            period
        }
    } else {
        w
    }
}

pub fn default_sigma(period: usize, intervals: usize) -> f64 {
    period as f64 / (2.0 * PI * intervals.max(1) as f64)
}

fn circular_convolve(series: &PeriodicMatrixSeries, weights: &[(isize, f64)]) -> Result<PeriodicMatrixSeries> {
    let p = series.len() as isize;
    let values = series.values();
    let out = (0..p)
        .map(|j| {
            let mut acc = Matrix::zeros(series.dim(), series.dim());
            for &(off, w) in weights {
                acc += &values[(j + off).rem_euclid(p) as usize] * w;
            }
            acc
        })
        .collect();
    series.with_values(out)
}

/// Centered circular mean over `window` phases.
pub fn moving_average(series: &PeriodicMatrixSeries, window: usize) -> Result<PeriodicMatrixSeries> {
    let p = series.len();
    if window == 0 || window % 2 == 0 || window > p {
        return Err(Error::BadWindow { window, period: p });
    }
    let half = (window / 2) as isize;
    let w = 1.0 / window as f64;
    let weights: Vec<_> = (-half..=half).map(|o| (o, w)).collect();
    circular_convolve(series, &weights)
}

/// Zero every Fourier mode above `cutoff` cycles per period.
pub fn lowpass(series: &PeriodicMatrixSeries, cutoff: usize) -> Result<PeriodicMatrixSeries> {
    let p = series.len();
    if cutoff > p / 2 {
        return Err(Error::BadCutoff { cutoff, max: p / 2 });
    }
    let n = series.dim();
    let mut planner = FftPlanner::<f64>::new();
    let forward = planner.plan_fft_forward(p);
    let inverse = planner.plan_fft_inverse(p);
    let mut out = vec![Matrix::zeros(n, n); p];
    let mut buf = vec![Complex::new(0.0, 0.0); p];
    for i in 0..n {
        for j in 0..n {
            for (b, m) in buf.iter_mut().zip(series.values()) {
                *b = Complex::new(m[(i, j)], 0.0);
            }
            forward.process(&mut buf);
            for (k, b) in buf.iter_mut().enumerate() {
                if k.min(p - k) > cutoff {
                    *b = Complex::new(0.0, 0.0);
                }
            }
            inverse.process(&mut buf);
            for (m, b) in out.iter_mut().zip(&buf) {
                m[(i, j)] = b.re / p as f64;
            }
        }
    }
    series.with_values(out)
}

/// Normalized Gaussian weights at integer offsets `−⌈4σ⌉..=⌈4σ⌉`.
pub fn gaussian_weights(sigma: f64) -> Vec<(isize, f64)> {
    let reach = (GAUSSIAN_TRUNCATION * sigma).ceil() as isize;
    let raw: Vec<_> = (-reach..=reach)
        .map(|o| (o, (-(o as f64).powi(2) / (2.0 * sigma * sigma)).exp()))
        .collect();
    let total: f64 = raw.iter().map(|(_, w)| w).sum();
    raw.into_iter().map(|(o, w)| (o, w / total)).collect()
}

pub fn gaussian_smooth(series: &PeriodicMatrixSeries, sigma: f64) -> Result<PeriodicMatrixSeries> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("gaussian sigma {sigma} must be positive")));
    }
    circular_convolve(series, &gaussian_weights(sigma))
}

/// Result of fitting `mean·(1 + π·intensity·sin(2π(t + phase)))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub mean: f64,
    pub intensity: f64,
    /// In `[−0.5, 0.5)`; positive means the curve is shifted left.
    pub phase: f64,
    /// Root-mean-square misfit.
    pub residual: f64,
    /// Set when `|mean| < 1e-12`; intensity and phase are then reported as 0.
    pub degenerate_mean: bool,
}

/// Map a phase in cycles to `[−0.5, 0.5)`.
pub fn canonical_phase(phi: f64) -> f64 {
    let x = phi - (phi + 0.5).floor();
    if x >= 0.5 {
        x - 1.0
    } else {
        x
    }
}

/// Least-squares fit of `c0 + c1 sin 2πt + c2 cos 2πt`.
pub fn sine_fit(values: &[f64], times: &[f64]) -> Result<FitResult> {
    if values.len() != times.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} values vs {} times",
            values.len(),
            times.len()
        )));
    }
    if values.len() < 3 {
        return Err(Error::TooShort {
            needed: 3,
            got: values.len(),
        });
    }
    let n = values.len();
    let design = DMatrix::from_fn(n, 3, |r, c| match c {
        0 => 1.0,
        1 => (2.0 * PI * times[r]).sin(),
        _ => (2.0 * PI * times[r]).cos(),
    });
    let y = DVector::from_column_slice(values);
    let coef = design
        .clone()
        .svd(true, true)
        .solve(&y, 1e-14)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let (c0, c1, c2) = (coef[0], coef[1], coef[2]);
    let residual = ((&design * &coef - &y).norm_squared() / n as f64).sqrt();
    let amplitude = c1.hypot(c2);
    if c0.abs() < 1e-12 {
        return Ok(FitResult {
            mean: c0,
            intensity: 0.0,
            phase: 0.0,
            residual,
            degenerate_mean: true,
        });
    }
    // below this amplitude the input is treated as constant
    let (intensity, phase) = if amplitude < 1e-12 * c0.abs() {
        (0.0, 0.0)
    } else {
        let s = c0.signum();
        (
            amplitude / (PI * c0.abs()),
            canonical_phase((s * c2).atan2(s * c1) / (2.0 * PI)),
        )
    };
    Ok(FitResult {
        mean: c0,
        intensity,
        phase,
        residual,
        degenerate_mean: false,
    })
}

/// `‖model − truth‖_F / ‖truth‖_F`.
pub fn relative_error_const(model: &Matrix, truth: &Matrix) -> Result<f64> {
    if model.shape() != truth.shape() {
        return Err(Error::DimensionMismatch("model and truth differ in shape".into()));
    }
    let denom = truth.norm();
    if denom == 0.0 {
        return Err(Error::ZeroTruth);
    }
    Ok((model - truth).norm() / denom)
}

/// Integrated relative error with the truth evaluated at the model's own times.
///
/// Flagged phases are simply absent from `points`.
pub fn relative_error_series<F>(points: &[(f64, &Matrix)], truth: F) -> Result<f64>
where
    F: Fn(f64) -> Matrix,
{
    if points.is_empty() {
        return Err(Error::AllPhasesFlagged);
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (t, m) in points {
        let x = truth(*t);
        if x.shape() != m.shape() {
            return Err(Error::DimensionMismatch("model and truth differ in shape".into()));
        }
        num += (*m - &x).norm_squared();
        den += x.norm_squared();
    }
    if den == 0.0 {
        return Err(Error::ZeroTruth);
    }
    Ok((num / den).sqrt())
}

/// Points of a complete series, in the form the metrics take.
pub fn series_points(series: &PeriodicMatrixSeries) -> Vec<(f64, &Matrix)> {
    series.times().iter().copied().zip(series.values()).collect()
}

/// Linear interpolation on the circle of unit circumference.
pub fn circular_interpolate(points: &[(f64, &Matrix)], t: f64) -> Result<Matrix> {
    if points.is_empty() {
        return Err(Error::EmptyOverlap);
    }
    Ok(interpolate_sorted(&sorted_points(points), t))
}

fn interpolate_sorted(sorted: &[(f64, &Matrix)], t: f64) -> Matrix {
    let n = sorted.len();
    if n == 1 {
        return sorted[0].1.clone();
    }
    let t = t.rem_euclid(1.0);
    let upper = sorted.partition_point(|(s, _)| *s <= t);
    let (lo, hi) = if upper == 0 || upper == n {
        (n - 1, 0)
    } else {
        (upper - 1, upper)
    };
    let (t0, m0) = sorted[lo];
    let (t1, m1) = sorted[hi];
    let span = (t1 - t0).rem_euclid(1.0);
    if span == 0.0 {
        return m0.clone();
    }
    let frac = (t - t0).rem_euclid(1.0) / span;
    m0 * (1.0 - frac) + m1 * frac
}

fn sorted_points<'a>(points: &[(f64, &'a Matrix)]) -> Vec<(f64, &'a Matrix)> {
    let mut v: Vec<_> = points.iter().map(|(s, m)| (s.rem_euclid(1.0), *m)).collect();
    v.sort_by(|x, y| x.0.total_cmp(&y.0));
    v
}

/// Integrated relative difference of `a` from `b`; the finer series is
/// interpolated onto the coarser one's times.
pub fn relative_difference(a: &[(f64, &Matrix)], b: &[(f64, &Matrix)]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyOverlap);
    }
    let (va, vb) = (sorted_points(a), sorted_points(b));
    let (mut num, mut den) = (0.0, 0.0);
    if va.len() >= vb.len() {
        for (t, mb) in &vb {
            let ma = interpolate_sorted(&va, *t);
            num += (ma - *mb).norm_squared();
            den += mb.norm_squared();
        }
    } else {
        for (t, ma) in &va {
            let mb = interpolate_sorted(&vb, *t);
            num += (*ma - &mb).norm_squared();
            den += mb.norm_squared();
        }
    }
    if den == 0.0 {
        return Err(Error::ZeroTruth);
    }
    Ok((num / den).sqrt())
}

/// Mean over each of `M` equal phase intervals, placed at the interval centers.
pub fn interval_average(series: &PeriodicMatrixSeries, intervals: usize) -> Result<PeriodicMatrixSeries> {
    let p = series.len();
    if intervals == 0 || p % intervals != 0 {
        return Err(Error::IndivisibleInterval {
            samples: p,
            intervals,
        });
    }
    let width = p / intervals;
    let values = series
        .values()
        .chunks(width)
        .map(|c| c.iter().fold(Matrix::zeros(series.dim(), series.dim()), |acc, m| acc + m) / width as f64)
        .collect();
    let times = (0..intervals)
        .map(|j| (j as f64 + 0.5) / intervals as f64)
        .collect();
    PeriodicMatrixSeries::new(times, values)
}

/// Linear-interpolation quantile of an ascending slice, `q` in `[0, 1]`.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let h = q.clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

/// Five-number distribution summary (5/25/50/75/95th percentiles) plus mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub q05: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub q95: f64,
}

impl Summary {
    /// Summary of the finite entries of `values`.
    pub fn of(values: &[f64]) -> Summary {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        v.sort_by(f64::total_cmp);
        let mean = if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        };
        Summary {
            count: v.len(),
            mean,
            q05: quantile(&v, 0.05),
            q25: quantile(&v, 0.25),
            median: quantile(&v, 0.5),
            q75: quantile(&v, 0.75),
            q95: quantile(&v, 0.95),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sinusoid(p: usize, cycles: f64, amp: f64) -> PeriodicMatrixSeries {
        let v: Vec<f64> = (0..p)
            .map(|j| amp * (2.0 * PI * cycles * j as f64 / p as f64).sin())
            .collect();
        PeriodicMatrixSeries::from_scalars(&v, 0.0).unwrap()
    }

    fn scalars(s: &PeriodicMatrixSeries) -> Vec<f64> {
        s.entry(0, 0)
    }

    #[test]
    fn moving_average_examples() {
        let c = PeriodicMatrixSeries::from_scalars(&[3.0; 10], 0.0).unwrap();
        for v in scalars(&moving_average(&c, 5).unwrap()) {
            assert!((v - 3.0).abs() < 1e-14);
        }
        let s = PeriodicMatrixSeries::from_scalars(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.0).unwrap();
        for v in scalars(&moving_average(&s, 5).unwrap()) {
            assert!((v - 3.0).abs() < 1e-14);
        }
        let p = 100;
        let w = 9;
        let out = scalars(&moving_average(&sinusoid(p, 1.0, 1.0), w).unwrap());
        let factor = (PI * w as f64 / p as f64).sin() / (w as f64 * (PI / p as f64).sin());
        for (j, v) in out.iter().enumerate() {
            let expect = factor * (2.0 * PI * j as f64 / p as f64).sin();
            assert!((v - expect).abs() < 1e-12);
        }
        assert!(matches!(moving_average(&s, 4), Err(Error::BadWindow { .. })));
        assert!(matches!(moving_average(&s, 7), Err(Error::BadWindow { .. })));
    }

    #[test]
    fn lowpass_examples() {
        let s = PeriodicMatrixSeries::from_scalars(&[1.0, 2.0, 3.0, 6.0], 0.0).unwrap();
        for v in scalars(&lowpass(&s, 0).unwrap()) {
            assert!((v - 3.0).abs() < 1e-12);
        }
        let one = sinusoid(100, 1.0, 2.0);
        let out = lowpass(&one, 1).unwrap();
        for (a, b) in scalars(&out).iter().zip(scalars(&one)) {
            assert!((a - b).abs() < 1e-12);
        }
        let mixed: Vec<f64> = scalars(&one)
            .iter()
            .zip(scalars(&sinusoid(100, 10.0, 0.5)))
            .map(|(a, b)| a + b)
            .collect();
        let mixed = PeriodicMatrixSeries::from_scalars(&mixed, 0.0).unwrap();
        for (a, b) in scalars(&lowpass(&mixed, 4).unwrap()).iter().zip(scalars(&one)) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(lowpass(&s, 3).unwrap_err(), Error::BadCutoff { cutoff: 3, max: 2 });
    }

    #[test]
    fn gaussian_examples() {
        for sigma in [0.3, 1.0, 1.59, 7.0] {
            let total: f64 = gaussian_weights(sigma).iter().map(|(_, w)| w).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        let c = PeriodicMatrixSeries::from_scalars(&[-2.0; 12], 0.0).unwrap();
        for v in scalars(&gaussian_smooth(&c, 1.5).unwrap()) {
            assert!((v + 2.0).abs() < 1e-12);
        }
        assert!(gaussian_smooth(&c, 0.0).is_err());
    }

    fn grid(p: usize) -> Vec<f64> {
        (0..p).map(|j| j as f64 / p as f64).collect()
    }

    #[test]
    fn sine_fit_examples() {
        let t = grid(100);
        let y: Vec<f64> = t.iter().map(|t| -(1.0 + 0.2 * PI * (2.0 * PI * t).sin())).collect();
        let f = sine_fit(&y, &t).unwrap();
        assert!((f.mean + 1.0).abs() < 1e-10);
        assert!((f.intensity - 0.2).abs() < 1e-10);
        assert!(f.phase.abs() < 1e-10);
        assert!(f.residual < 1e-10);

        let f = sine_fit(&[2.0; 10], &grid(10)).unwrap();
        assert_eq!((f.intensity, f.phase), (0.0, 0.0));
        assert!((f.mean - 2.0).abs() < 1e-12);

        let y: Vec<f64> = t
            .iter()
            .map(|t| -(1.0 + 0.2 * PI * (2.0 * PI * (t + 0.05)).sin()))
            .collect();
        let f = sine_fit(&y, &t).unwrap();
        assert!((f.phase - 0.05).abs() < 1e-10);

        let y: Vec<f64> = t.iter().map(|t| (2.0 * PI * t).sin()).collect();
        assert!(sine_fit(&y, &t).unwrap().degenerate_mean);
        assert!(sine_fit(&[1.0, 2.0], &[0.0, 0.5]).is_err());
    }

    #[test]
    fn canonical_phase_range() {
        assert_eq!(canonical_phase(0.5), -0.5);
        assert_eq!(canonical_phase(-0.5), -0.5);
        assert!((canonical_phase(0.75) + 0.25).abs() < 1e-15);
        assert!((canonical_phase(-1.2) + 0.2).abs() < 1e-12);
    }

    #[test]
    fn relative_error_examples() {
        let t = Matrix::from_row_slice(2, 2, &[1.0, 2.0, -1.0, 0.5]);
        assert_eq!(relative_error_const(&t, &t).unwrap(), 0.0);
        assert!((relative_error_const(&(&t * 2.0), &t).unwrap() - 1.0).abs() < 1e-15);
        assert!((relative_error_const(&Matrix::zeros(2, 2), &t).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(relative_error_const(&t, &Matrix::zeros(2, 2)).unwrap_err(), Error::ZeroTruth);
        assert_eq!(
            relative_error_series(&[], |_| t.clone()).unwrap_err(),
            Error::AllPhasesFlagged
        );
    }

    #[test]
    fn constant_model_against_sinusoidal_truth() {
        let truth = |t: f64| Matrix::from_element(1, 1, -(1.0 + 0.2 * PI * (2.0 * PI * t).sin()));
        let mean = Matrix::from_element(1, 1, -1.0);
        let pts: Vec<(f64, &Matrix)> = grid(100).into_iter().map(|t| (t, &mean)).collect();
        let e = relative_error_series(&pts, truth).unwrap();
        let x = 0.2 * PI;
        let expect = (x / 2f64.sqrt()) / (1.0 + x * x / 2.0).sqrt();
        assert!((e - expect).abs() < 1e-12);
        assert!((expect - 0.4060193).abs() < 1e-6);
    }

    #[test]
    fn relative_difference_resampling() {
        let fine = sinusoid(200, 1.0, 1.0);
        let coarse_times = grid(100);
        let fine_pts = series_points(&fine);
        for t in coarse_times {
            let v = circular_interpolate(&fine_pts, t).unwrap()[(0, 0)];
            assert!((v - (2.0 * PI * t).sin()).abs() < 1e-3);
        }
        let a = sinusoid(50, 1.0, 1.0);
        assert_eq!(relative_difference(&series_points(&a), &series_points(&a)).unwrap(), 0.0);
        assert_eq!(relative_difference(&[], &series_points(&a)).unwrap_err(), Error::EmptyOverlap);
    }

    #[test]
    fn interval_average_examples() {
        let s = PeriodicMatrixSeries::from_scalars(&[1.0, 2.0, 3.0, 4.0], 0.0).unwrap();
        let out = interval_average(&s, 2).unwrap();
        assert_eq!(scalars(&out), vec![1.5, 3.5]);
        assert_eq!(out.times(), &[0.25, 0.75]);
        let same = interval_average(&s, 4).unwrap();
        assert_eq!(scalars(&same), scalars(&s));
        assert!(matches!(interval_average(&s, 3), Err(Error::IndivisibleInterval { .. })));
    }

    #[test]
    fn quantile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        let s = Summary::of(&[3.0, f64::NAN, 1.0, 2.0]);
        assert_eq!((s.count, s.median, s.mean), (3, 2.0, 2.0));
    }

    #[test]
    fn default_filter_parameters() {
        assert_eq!(default_window(100, 10), 11);
        assert_eq!(default_window(100, 20), 5);
        assert_eq!(default_window(12, 12), 1);
        assert_eq!(default_window(4, 1), 3);
        assert!((default_sigma(100, 10) - 1.5915494309189535).abs() < 1e-12);
    }
}
