//! Euler sample paths of periodic linear Markov systems and the ground-truth
//! systems used by the experiments.

use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::matfun::{self, Matrix};

const BLOWUP_LIMIT: f64 = 1e12;
const MAX_SYSTEM_DRAWS: usize = 10_000;

/// A reproducible random stream addressed by `(master_seed, stream_id)`.
///
/// Backed by ChaCha20 with the stream id mapped onto ChaCha's native stream
/// selector, so distinct ids give independent sequences and a given pair
/// yields the same bits on every platform.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RandomStream {
    pub master_seed: u64,
    pub stream_id: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RandomStream {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        RandomStream {
            master_seed,
            stream_id,
        }
    }

    pub fn rng(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.stream_id);
        rng
    }

    /// Derived stream for a sub-task (ensemble member, experiment cell).
    pub fn child(&self, index: u64) -> RandomStream {
        RandomStream {
            master_seed: splitmix64(self.master_seed ^ splitmix64(self.stream_id)),
            stream_id: index,
        }
    }
}

#[derive(Clone, Debug)]
enum SystemKind {
    Sinusoidal {
        mean_dynamics: Matrix,
        dyn_intensity: f64,
        mean_diffusion: Matrix,
        diff_intensity: f64,
        mean_diffusion_sqrt: Matrix,
    },
    /// Zero-order hold on a uniform phase grid: node `j` rules `[j/P, (j+1)/P)`.
    Tabulated {
        dynamics: Vec<Matrix>,
        diffusions: Vec<Matrix>,
        diffusion_sqrts: Vec<Matrix>,
    },
}

/// A 1-periodic pair `(A(t), Q(t))` used as simulation ground truth.
#[derive(Clone, Debug)]
pub struct SystemSpec {
    dim: usize,
    kind: SystemKind,
}

fn sine_factor(intensity: f64, t: f64) -> f64 {
    1.0 + intensity * PI * (2.0 * PI * t).sin()
}

/// `A(t) = (1 + a π sin 2πt) Ā`, `Q(t) = (1 + b π sin 2πt) Q̄`.
pub fn sinusoidal_system(
    mean_dynamics: &Matrix,
    dyn_intensity: f64,
    mean_diffusion: &Matrix,
    diff_intensity: f64,
) -> Result<SystemSpec> {
    let n = matfun::ensure_square(mean_dynamics)?;
    if mean_diffusion.shape() != (n, n) {
        return Err(Error::DimensionMismatch(format!(
            "mean dynamics is {n}x{n}, mean diffusion is {}x{}",
            mean_diffusion.nrows(),
            mean_diffusion.ncols()
        )));
    }
    if !dyn_intensity.is_finite() || !diff_intensity.is_finite() {
        return Err(Error::NonFinite("fluctuation intensity"));
    }
    if !matfun::is_stable(mean_dynamics) {
        return Err(Error::UnstableMean);
    }
    if matfun::relative_asymmetry(mean_diffusion) > matfun::SYMMETRY_TOL {
        return Err(Error::InvalidArgument("mean diffusion is not symmetric".into()));
    }
    let min_factor = 1.0 - diff_intensity.abs() * PI;
    if min_factor < 0.0 {
        return Err(Error::DiffusionGoesNegative(min_factor));
    }
    let mean_diffusion_sqrt = matfun::spd_sqrt(mean_diffusion)?;
    Ok(SystemSpec {
        dim: n,
        kind: SystemKind::Sinusoidal {
            mean_dynamics: mean_dynamics.clone(),
            dyn_intensity,
            mean_diffusion: matfun::symmetrize(mean_diffusion),
            diff_intensity,
            mean_diffusion_sqrt,
        },
    })
}

impl SystemSpec {
    /// Piecewise-constant system on a uniform phase grid.
    ///
    /// No stability requirement is imposed: a periodic system may be
    /// transiently unstable at some phases and still have a periodic steady state.
    pub fn tabulated(dynamics: Vec<Matrix>, diffusions: Vec<Matrix>) -> Result<SystemSpec> {
        if dynamics.is_empty() || dynamics.len() != diffusions.len() {
            return Err(Error::GridMismatch(format!(
                "{} dynamics vs {} diffusions",
                dynamics.len(),
                diffusions.len()
            )));
        }
        let n = matfun::ensure_square(&dynamics[0])?;
        for (a, q) in dynamics.iter().zip(&diffusions) {
            if a.shape() != (n, n) || q.shape() != (n, n) {
                return Err(Error::DimensionMismatch("tabulated system".into()));
            }
            matfun::ensure_finite(a, "tabulated dynamics")?;
        }
        let diffusion_sqrts = diffusions
            .iter()
            .map(matfun::spd_sqrt)
            .collect::<Result<Vec<_>>>()?;
        Ok(SystemSpec {
            dim: n,
            kind: SystemKind::Tabulated {
                dynamics,
                diffusions: diffusions.iter().map(matfun::symmetrize).collect(),
                diffusion_sqrts,
            },
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn node(len: usize, t: f64) -> usize {
        let phase = t.rem_euclid(1.0);
        ((phase * len as f64).floor() as usize).min(len - 1)
    }

    pub fn dynamics_at(&self, t: f64) -> Matrix {
        match &self.kind {
            SystemKind::Sinusoidal {
                mean_dynamics,
                dyn_intensity,
                ..
            } => mean_dynamics * sine_factor(*dyn_intensity, t),
            SystemKind::Tabulated { dynamics, .. } => {
                dynamics[Self::node(dynamics.len(), t)].clone()
            }
        }
    }

    pub fn diffusion_at(&self, t: f64) -> Matrix {
        match &self.kind {
            SystemKind::Sinusoidal {
                mean_diffusion,
                diff_intensity,
                ..
            } => mean_diffusion * sine_factor(*diff_intensity, t),
            SystemKind::Tabulated { diffusions, .. } => {
                diffusions[Self::node(diffusions.len(), t)].clone()
            }
        }
    }

    /// `sqrt(2 Q(t) dt)` as a symmetric square root.
    pub fn noise_factor_at(&self, t: f64, dt: f64) -> Matrix {
        match &self.kind {
            SystemKind::Sinusoidal {
                diff_intensity,
                mean_diffusion_sqrt,
                ..
            } => {
                let f = sine_factor(*diff_intensity, t).max(0.0);
                mean_diffusion_sqrt * (2.0 * dt * f).sqrt()
            }
            SystemKind::Tabulated {
                diffusion_sqrts, ..
            } => &diffusion_sqrts[Self::node(diffusion_sqrts.len(), t)] * (2.0 * dt).sqrt(),
        }
    }

    /// Time average of `A(t)` over one period.
    pub fn mean_dynamics(&self) -> Matrix {
        match &self.kind {
            SystemKind::Sinusoidal { mean_dynamics, .. } => mean_dynamics.clone(),
            SystemKind::Tabulated { dynamics, .. } => average(dynamics),
        }
    }

    pub fn mean_diffusion(&self) -> Matrix {
        match &self.kind {
            SystemKind::Sinusoidal { mean_diffusion, .. } => mean_diffusion.clone(),
            SystemKind::Tabulated { diffusions, .. } => average(diffusions),
        }
    }
}

fn average(ms: &[Matrix]) -> Matrix {
    let mut acc = Matrix::zeros(ms[0].nrows(), ms[0].ncols());
    for m in ms {
        acc += m;
    }
    acc / ms.len() as f64
}

/// Uniformly sampled vector-valued record, stored row-major (one row per sample).
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries {
    dt: f64,
    origin: f64,
    dim: usize,
    data: Vec<f64>,
}

impl TimeSeries {
    pub fn new(dt: f64, origin: f64, dim: usize, data: Vec<f64>) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() || !origin.is_finite() {
            return Err(Error::InvalidArgument(format!("bad sampling step {dt}")));
        }
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::DimensionMismatch(format!(
                "{} values do not form rows of width {dim}",
                data.len()
            )));
        }
        if data.len() / dim < 2 {
            return Err(Error::TooShort {
                needed: 2,
                got: data.len() / dim,
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("time series"));
        }
        Ok(TimeSeries {
            dt,
            origin,
            dim,
            data,
        })
    }

    /// One-dimensional series from scalars.
    pub fn scalar(dt: f64, values: &[f64]) -> Result<Self> {
        TimeSeries::new(dt, 0.0, 1, values.to_vec())
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn origin(&self) -> f64 {
        self.origin
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn time(&self, i: usize) -> f64 {
        self.origin + i as f64 * self.dt
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Samples per unit period implied by `dt`.
    pub fn samples_per_period(&self) -> Result<usize> {
        steps_per_period(self.dt)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header = String::from("t");
        for i in 1..=self.dim {
            header.push_str(&format!(",x{i}"));
        }
        writeln!(w, "{header}")?;
        for i in 0..self.len() {
            let mut line = format!("{:.16e}", self.time(i));
            for v in self.sample(i) {
                line.push_str(&format!(",{v:.16e}"));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    /// Reads the `t,x1,...,xn` layout; `dt` is taken from the first two rows
    /// and every later row must respect it.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let headers = reader.headers()?.clone();
        if headers.len() < 2 || &headers[0] != "t" {
            return Err(Error::Parse {
                line: 1,
                msg: "expected header t,x1,...,xn".into(),
            });
        }
        let dim = headers.len() - 1;
        let mut times = Vec::new();
        let mut data = Vec::new();
        for (row, rec) in reader.records().enumerate() {
            let rec = rec?;
            let line = row + 2;
            let parse = |s: &str| {
                s.parse::<f64>().map_err(|e| Error::Parse {
                    line,
                    msg: format!("{s:?}: {e}"),
                })
            };
            if rec.len() != dim + 1 {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected {} fields, got {}", dim + 1, rec.len()),
                });
            }
            times.push(parse(&rec[0])?);
            for field in rec.iter().skip(1) {
                data.push(parse(field)?);
            }
        }
        if times.len() < 2 {
            return Err(Error::TooShort {
                needed: 2,
                got: times.len(),
            });
        }
        let dt = times[1] - times[0];
        for (i, t) in times.iter().enumerate() {
            let expected = times[0] + i as f64 * dt;
            if (t - expected).abs() > 1e-6 * dt.abs().max(1e-300) {
                return Err(Error::Parse {
                    line: i + 2,
                    msg: format!("non-uniform sampling: t = {t}, expected {expected}"),
                });
            }
        }
        TimeSeries::new(dt, times[0], dim, data)
    }
}

/// Number of steps of size `dt` in one unit period; `1/dt` must be an integer.
pub fn steps_per_period(dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidArgument(format!("bad time step {dt}")));
    }
    let inv = 1.0 / dt;
    let rounded = inv.round();
    if rounded < 1.0 || (inv - rounded).abs() > 1e-9 * rounded {
        return Err(Error::InvalidArgument(format!(
            "time step {dt} does not divide the unit period"
        )));
    }
    Ok(rounded as usize)
}

/// Settings of an Euler run.
#[derive(Clone, Debug)]
pub struct PathConfig {
    pub dt: f64,
    /// Recorded span in whole periods (the record covers `[0, periods]`).
    pub periods: usize,
    pub x0: Vec<f64>,
    pub burn_in_periods: usize,
    /// Record every `stride`-th Euler state.
    pub stride: usize,
}

impl PathConfig {
    pub fn new(dt: f64, periods: usize, dim: usize) -> Self {
        PathConfig {
            dt,
            periods,
            x0: vec![0.0; dim],
            burn_in_periods: 0,
            stride: 1,
        }
    }
}

/// Euler path `x_{m+1} = x_m + A(t_m) x_m dt + sqrt(2 Q(t_m) dt) ξ_m` at full resolution.
pub fn sample_path(
    spec: &SystemSpec,
    dt: f64,
    periods: usize,
    stream: RandomStream,
    x0: &[f64],
    burn_in_periods: usize,
) -> Result<TimeSeries> {
    let cfg = PathConfig {
        dt,
        periods,
        x0: x0.to_vec(),
        burn_in_periods,
        stride: 1,
    };
    sample_path_with(spec, &cfg, stream)
}

/// Euler path recording only every `cfg.stride`-th state. Bit-identical to
/// [`sample_path`] followed by [`subsample`].
pub fn sample_path_with(
    spec: &SystemSpec,
    cfg: &PathConfig,
    stream: RandomStream,
) -> Result<TimeSeries> {
    let n = spec.dim();
    let spp = steps_per_period(cfg.dt)?;
    if cfg.periods == 0 {
        return Err(Error::InvalidArgument("need at least one period".into()));
    }
    if cfg.x0.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "x0 has {} entries, system has dimension {n}",
            cfg.x0.len()
        )));
    }
    if cfg.x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("x0"));
    }
    if cfg.stride == 0 || spp % cfg.stride != 0 {
        return Err(Error::StrideMisaligned {
            stride: cfg.stride,
            per_period: spp,
        });
    }

    // Coefficients repeat every period; tabulate them once.
    let nn = n * n;
    let mut drift = vec![0.0; spp * nn];
    let mut noise = vec![0.0; spp * nn];
    for m in 0..spp {
        let t = m as f64 / spp as f64;
        let a = spec.dynamics_at(t);
        let s = spec.noise_factor_at(t, cfg.dt);
        for i in 0..n {
            for j in 0..n {
                drift[m * nn + i * n + j] = a[(i, j)] * cfg.dt;
                noise[m * nn + i * n + j] = s[(i, j)];
            }
        }
    }

    let burn_steps = cfg.burn_in_periods * spp;
    let total_steps = burn_steps + cfg.periods * spp;
    let out_len = cfg.periods * spp / cfg.stride + 1;
    let mut out = Vec::with_capacity(out_len * n);
    let mut rng = stream.rng();
    let mut x = cfg.x0.clone();
    let mut next = vec![0.0; n];
    let mut xi = vec![0.0; n];

    for step in 0..=total_steps {
        if step >= burn_steps && (step - burn_steps) % cfg.stride == 0 {
            out.extend_from_slice(&x);
        }
        if step == total_steps {
            break;
        }
        for v in xi.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let base = (step % spp) * nn;
        for i in 0..n {
            let row = base + i * n;
            let mut acc = x[i];
            for j in 0..n {
                acc += drift[row + j] * x[j];
            }
            for j in 0..n {
                acc += noise[row + j] * xi[j];
            }
            next[i] = acc;
        }
        if next.iter().any(|v| !(v.abs() <= BLOWUP_LIMIT)) {
            return Err(Error::NumericalBlowup(step + 1));
        }
        std::mem::swap(&mut x, &mut next);
    }
    TimeSeries::new(cfg.dt * cfg.stride as f64, 0.0, n, out)
}

/// Keeps every `stride`-th sample; the stride must divide the per-period count.
pub fn subsample(path: &TimeSeries, stride: usize) -> Result<TimeSeries> {
    let spp = path.samples_per_period()?;
    if stride == 0 || spp % stride != 0 {
        return Err(Error::StrideMisaligned {
            stride,
            per_period: spp,
        });
    }
    let n = path.dim();
    let data: Vec<f64> = (0..path.len())
        .step_by(stride)
        .flat_map(|i| path.sample(i).iter().copied())
        .collect();
    if data.len() / n < 2 {
        return Err(Error::TooShort {
            needed: 2,
            got: data.len() / n,
        });
    }
    TimeSeries::new(path.dt() * stride as f64, path.origin(), n, data)
}

/// Random stable `Ā` with entries in (−5, 5) and SPD `Q̄ = GᵀG + 0.1 I`.
pub fn random_stable_system(n: usize, stream: RandomStream) -> Result<(Matrix, Matrix)> {
    random_stable_system_from(n, &mut stream.rng())
}

pub fn random_stable_system_from<R: Rng>(n: usize, rng: &mut R) -> Result<(Matrix, Matrix)> {
    if n == 0 {
        return Err(Error::InvalidArgument("dimension must be at least 1".into()));
    }
    let mut open_uniform = |half_width: f64| loop {
        let v: f64 = rng.random_range(-half_width..half_width);
        if v != -half_width {
            break v;
        }
    };
    let mut a_bar = None;
    for _ in 0..MAX_SYSTEM_DRAWS {
        let candidate = Matrix::from_fn(n, n, |_, _| open_uniform(5.0));
        if matfun::is_stable(&candidate) {
            a_bar = Some(candidate);
            break;
        }
    }
    let a_bar = a_bar.ok_or(Error::RejectionBudgetExceeded(MAX_SYSTEM_DRAWS))?;
    let g = Matrix::from_fn(n, n, |_, _| open_uniform(1.0));
    let q_bar = matfun::symmetrize(&(g.transpose() * &g + Matrix::identity(n, n) * 0.1));
    Ok((a_bar, q_bar))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Matrix {
        Matrix::from_element(1, 1, v)
    }

    #[test]
    fn sinusoidal_reference_system() {
        let spec = sinusoidal_system(&scalar(-1.0), 0.2, &scalar(1.0), 0.3).unwrap();
        assert!((spec.dynamics_at(0.25)[(0, 0)] + 1.6283185307179586).abs() < 1e-12);
        assert!((spec.diffusion_at(0.75)[(0, 0)] - (1.0 - 0.3 * PI)).abs() < 1e-12);
    }

    #[test]
    fn constant_when_intensities_vanish() {
        let spec = sinusoidal_system(&scalar(-1.0), 0.0, &scalar(1.0), 0.0).unwrap();
        for t in [0.0, 0.1, 0.37, 0.9] {
            assert_eq!(spec.dynamics_at(t), scalar(-1.0));
        }
    }

    #[test]
    fn construction_errors() {
        assert_eq!(
            sinusoidal_system(&scalar(-1.0), 0.2, &scalar(1.0), 0.5).unwrap_err(),
            Error::DiffusionGoesNegative(1.0 - 0.5 * PI)
        );
        assert_eq!(
            sinusoidal_system(&scalar(0.5), 0.2, &scalar(1.0), 0.3).unwrap_err(),
            Error::UnstableMean
        );
    }

    #[test]
    fn deterministic_decay_without_noise() {
        let spec = sinusoidal_system(&scalar(-1.0), 0.0, &scalar(0.0), 0.0).unwrap();
        let path = sample_path(&spec, 0.002, 1, RandomStream::new(1, 0), &[1.0], 0).unwrap();
        assert_eq!(path.len(), 501);
        let end = path.sample(500)[0];
        assert!((end - 0.998f64.powi(500)).abs() < 1e-12);
        assert!((end - (-1f64).exp()).abs() < 1e-3);
        // exact recursion
        let mut x = 1.0;
        for i in 0..path.len() {
            assert_eq!(path.sample(i)[0], x);
            x += -0.002 * x;
        }
    }

    #[test]
    fn same_stream_same_bits() {
        let spec = sinusoidal_system(&scalar(-1.0), 0.2, &scalar(1.0), 0.3).unwrap();
        let a = sample_path(&spec, 0.002, 3, RandomStream::new(7, 3), &[0.0], 1).unwrap();
        let b = sample_path(&spec, 0.002, 3, RandomStream::new(7, 3), &[0.0], 1).unwrap();
        assert_eq!(a, b);
        let c = sample_path(&spec, 0.002, 3, RandomStream::new(7, 4), &[0.0], 1).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn strided_path_matches_subsample() {
        let spec = sinusoidal_system(&scalar(-1.0), 0.2, &scalar(1.0), 0.3).unwrap();
        let stream = RandomStream::new(11, 0);
        let full = sample_path(&spec, 0.002, 4, stream, &[0.5], 0).unwrap();
        let mut cfg = PathConfig::new(0.002, 4, 1);
        cfg.x0 = vec![0.5];
        cfg.stride = 5;
        let strided = sample_path_with(&spec, &cfg, stream).unwrap();
        assert_eq!(strided, subsample(&full, 5).unwrap());
        assert!((strided.dt() - 0.01).abs() < 1e-15);
        assert_eq!(strided.len(), 401);
    }

    #[test]
    fn subsample_rules() {
        let ts = TimeSeries::scalar(0.01, &vec![0.0; 201]).unwrap();
        assert_eq!(subsample(&ts, 1).unwrap(), ts);
        assert_eq!(
            subsample(&ts, 7).unwrap_err(),
            Error::StrideMisaligned {
                stride: 7,
                per_period: 100
            }
        );
        let ts = TimeSeries::scalar(0.002, &vec![0.0; 1001]).unwrap();
        assert!((subsample(&ts, 5).unwrap().dt() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn blowup_detected() {
        let spec = SystemSpec::tabulated(vec![scalar(2000.0)], vec![scalar(0.0)]).unwrap();
        let err = sample_path(&spec, 0.01, 10, RandomStream::new(0, 0), &[1.0], 0).unwrap_err();
        assert!(matches!(err, Error::NumericalBlowup(_)));
    }

    #[test]
    fn random_system_is_deterministic() {
        let s = RandomStream::new(3, 9);
        let (a1, q1) = random_stable_system(3, s).unwrap();
        let (a2, q2) = random_stable_system(3, s).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(q1, q2);
    }

    #[test]
    fn csv_round_trip() {
        let ts = TimeSeries::new(0.5, 0.0, 2, vec![1.0, -2.0, 0.1, 1e-300, 3.0, 4.0]).unwrap();
        let mut buf = Vec::new();
        ts.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,x1,x2\n"));
        let back = TimeSeries::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, ts);
    }
}
