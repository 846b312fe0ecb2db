//! Synthetic experiment lab: signal generators (Helmholtz kernel between a
//! helix and a sheet, sinusoidal factor matrices), separable-covariance
//! noise in three flavors, a trial runner with per-trial derived seeds, and
//! summary statistics with paired t-tests.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StudentT};
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{input_err, Result};
use crate::matcore::{self, Mat, SvdTriplet};
use crate::pipeline::{self, EowsConfig};
use crate::seed::derive_rng;
use crate::spectre;

/// Noise construction: white, or separable covariance with two spectra.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum NoiseKind {
    Type1,
    Type2,
    Type3,
}

impl std::str::FromStr for NoiseKind {
    type Err = crate::error::EowsError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "type1" => Ok(NoiseKind::Type1),
            "type2" => Ok(NoiseKind::Type2),
            "type3" => Ok(NoiseKind::Type3),
            other => input_err(format!("unknown noise kind '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// Student-t degrees of freedom of the raw entries.
    pub df: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, seed: u64) -> Self {
        NoiseSpec { kind, df: 10.0, seed }
    }
}

/// Signal family of the synthetic experiments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum SignalKind {
    /// Oscillating kernel `cos(2 pi nu r)/r` between a helix and a sheet,
    /// scaled to a target squared Frobenius norm.
    Helmholtz { nu: f64, frob2: f64 },
    /// `U diag(1..10) V^T` with sine/cosine factor columns, shape n x 2n.
    Sinusoid,
}

#[derive(Debug, Clone, Copy)]
pub struct SignalSpec {
    pub kind: SignalKind,
    pub seed: u64,
}

/// Eigenvalue sequences of the two covariance factors (None for white noise).
fn noise_spectra(kind: NoiseKind, p: usize, n: usize) -> Option<(Vec<f64>, Vec<f64>)> {
    match kind {
        NoiseKind::Type1 => None,
        NoiseKind::Type2 => {
            let da = (1..=p).map(|k| (1.0 + 9.0 * k as f64 / p as f64).sqrt()).collect();
            let quarter = n / 4;
            let db = (1..=n)
                .map(|k| {
                    if k <= quarter {
                        (10.0 + k as f64 / n as f64).sqrt()
                    } else {
                        0.3f64.sqrt()
                    }
                })
                .collect();
            Some((da, db))
        }
        NoiseKind::Type3 => {
            let da = (1..=p).map(|k| (k as f64 / p as f64).exp()).collect();
            let db = (1..=n)
                .map(|k| 1.1 + (4.0 * std::f64::consts::PI * k as f64 / n as f64).sin())
                .collect();
            Some((da, db))
        }
    }
}

/// Orthogonal factor from the QR decomposition of a standard normal matrix,
/// with the R-diagonal sign convention fixed for reproducibility.
fn random_orthogonal(dim: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(dim, dim, |_, _| {
        // Box-Muller keeps us off the Distribution trait for plain normals.
        let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    });
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            for i in 0..dim {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}

/// Draw a noise matrix with the requested covariance structure, normalized
/// so that `||Z||_F = sqrt(p)` exactly (average entry variance `1/n`).
pub fn gen_noise(p: usize, n: usize, spec: &NoiseSpec) -> Result<Mat> {
    if p < 2 || n < 2 {
        return input_err("gen_noise: dimensions must be at least 2");
    }
    if spec.df <= 2.0 {
        return input_err("gen_noise: Student-t df must exceed 2");
    }
    let mut rng = derive_rng(spec.seed, "noise-x", 0);
    let t = StudentT::new(spec.df).map_err(|e| crate::error::EowsError::Input(e.to_string()))?;
    // Unit-variance t samples scaled to variance 1/n.
    let scale = 1.0 / (n as f64 * spec.df / (spec.df - 2.0)).sqrt();
    let mut z = DMatrix::from_fn(p, n, |_, _| t.sample(&mut rng) * scale);
    if let Some((da, db)) = noise_spectra(spec.kind, p, n) {
        let mut rng_a = derive_rng(spec.seed, "noise-qa", 0);
        let qa = random_orthogonal(p, &mut rng_a);
        let mut rng_b = derive_rng(spec.seed, "noise-qb", 0);
        let qb = random_orthogonal(n, &mut rng_b);
        // A^(1/2) X B^(1/2) with A = Qa diag(da) Qa^T.
        let da_sqrt = DMatrix::from_fn(p, p, |i, j| if i == j { da[i].sqrt() } else { 0.0 });
        let db_sqrt = DMatrix::from_fn(n, n, |i, j| if i == j { db[i].sqrt() } else { 0.0 });
        let a_half = &qa * da_sqrt * qa.transpose();
        let b_half = &qb * db_sqrt * qb.transpose();
        z = a_half * z * b_half;
    }
    let norm = z.iter().map(|x| x * x).sum::<f64>().sqrt();
    let target = (p as f64).sqrt();
    let factor = target / norm;
    Ok(Mat::from_fn(p, n, |i, j| z[(i, j)] * factor))
}

/// Helix/sheet geometry constants (overridable through the CLI).
#[derive(Debug, Clone, Copy)]
pub struct HelixGeometry {
    pub radius: f64,
    pub pitch: f64,
    pub turns: f64,
    /// Plane x-offset of the target sheet.
    pub sheet_offset: f64,
}

impl Default for HelixGeometry {
    fn default() -> Self {
        HelixGeometry { radius: 1.0, pitch: 0.5, turns: 3.0, sheet_offset: 3.0 }
    }
}

/// Oscillating kernel between `p` equispaced helix points and `n` uniform
/// points on a separated planar sheet, scaled to `||S||_F^2 = frob2`.
pub fn gen_helmholtz(
    p: usize,
    n: usize,
    nu: f64,
    frob2: f64,
    seed: u64,
    geom: &HelixGeometry,
) -> Result<(Mat, SvdTriplet)> {
    if p < 2 || n < 2 {
        return input_err("gen_helmholtz: dimensions must be at least 2");
    }
    if frob2 <= 0.0 {
        return input_err("gen_helmholtz: frob2 must be positive");
    }
    let height = geom.pitch * geom.turns;
    let sources: Vec<[f64; 3]> = (0..p)
        .map(|i| {
            let t = i as f64 / (p - 1).max(1) as f64;
            let theta = 2.0 * std::f64::consts::PI * geom.turns * t;
            [geom.radius * theta.cos(), geom.radius * theta.sin(), height * t]
        })
        .collect();
    let mut rng = derive_rng(seed, "helmholtz-sheet", 0);
    let mut targets: Vec<[f64; 3]> = Vec::with_capacity(n);
    while targets.len() < n {
        let cand = [
            geom.sheet_offset,
            rng.random_range(-1.0..1.0),
            rng.random_range(-0.25..height + 0.25),
        ];
        // Resample accidental near-collisions (cannot occur with the
        // default separated geometry, but the knobs are user-settable).
        let too_close = sources.iter().any(|s| {
            let d2: f64 = (0..3).map(|k| (s[k] - cand[k]) * (s[k] - cand[k])).sum();
            d2 < 1e-12
        });
        if !too_close {
            targets.push(cand);
        }
    }
    let mut s = Mat::from_fn(p, n, |i, j| {
        let d2: f64 =
            (0..3).map(|k| (sources[i][k] - targets[j][k]) * (sources[i][k] - targets[j][k])).sum();
        let d = d2.sqrt();
        (2.0 * std::f64::consts::PI * nu * d).cos() / d
    });
    let factor = (frob2 / s.frob_norm_sq()).sqrt();
    for v in s.data_mut().iter_mut() {
        *v *= factor;
    }
    let truth = matcore::gram_top_svd(&s, p.min(n).min(64));
    Ok((s, truth))
}

/// Sinusoidal factor signal `U diag(1..10) V^T` of shape `n x 2n`.
pub fn gen_sinusoid(n: usize, seed: u64) -> Result<(Mat, SvdTriplet)> {
    if n < 10 {
        return input_err("gen_sinusoid: n must be at least 10");
    }
    let mut rng = derive_rng(seed, "sinusoid-x", 0);
    let xs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut rng = derive_rng(seed, "sinusoid-y", 0);
    let ys: Vec<f64> = (0..2 * n).map(|_| rng.random_range(0.0..1.0)).collect();
    let tau = 2.0 * std::f64::consts::PI;
    let s = Mat::from_fn(n, 2 * n, |i, k| {
        let mut acc = 0.0;
        for j in 1..=10 {
            acc += j as f64 * (tau * j as f64 * xs[i]).sin() * (tau * j as f64 * ys[k]).cos();
        }
        acc
    });
    let truth = matcore::gram_top_svd(&s, n.min(64));
    Ok((s, truth))
}

/// Methods the lab compares; `Noisy` scores the raw observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SimMethod {
    Noisy,
    Eoptshrink,
    Ws,
    Eows,
}

impl SimMethod {
    pub fn name(&self) -> &'static str {
        match self {
            SimMethod::Noisy => "noisy",
            SimMethod::Eoptshrink => "eoptshrink",
            SimMethod::Ws => "ws",
            SimMethod::Eows => "eows",
        }
    }
}

impl std::str::FromStr for SimMethod {
    type Err = crate::error::EowsError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noisy" => Ok(SimMethod::Noisy),
            "eoptshrink" => Ok(SimMethod::Eoptshrink),
            "ws" => Ok(SimMethod::Ws),
            "eows" => Ok(SimMethod::Eows),
            other => input_err(format!("unknown method '{other}'")),
        }
    }
}

/// One CSV row of the experiment output.
#[derive(Debug, Clone, Serialize)]
pub struct TrialRow {
    pub n: usize,
    pub method: String,
    pub trial: usize,
    pub mse: f64,
    pub left_inner: f64,
    pub right_inner: f64,
    pub r_hat: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AggregateRow {
    pub n: usize,
    pub method: String,
    pub median_mse: f64,
    pub iqr_mse: f64,
    pub median_left: f64,
    pub iqr_left: f64,
    pub median_right: f64,
    pub iqr_right: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TtestRow {
    pub n: usize,
    pub method_a: String,
    pub method_b: String,
    pub stat: f64,
    pub p: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentTable {
    pub rows: Vec<TrialRow>,
    pub aggregates: Vec<AggregateRow>,
    pub ttests: Vec<TtestRow>,
}

impl ExperimentTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,method,trial,mse,left_inner,right_inner,r_hat,seed\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.n, r.method, r.trial, r.mse, r.left_inner, r.right_inner, r.r_hat, r.seed
            ));
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("serializable")
    }

    pub fn median_mse(&self, n: usize, method: SimMethod) -> Option<f64> {
        self.aggregates
            .iter()
            .find(|a| a.n == n && a.method == method.name())
            .map(|a| a.median_mse)
    }
}

fn median_sorted(sorted: &[f64]) -> f64 {
    let k = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[k]
    } else {
        0.5 * (sorted[k - 1] + sorted[k])
    }
}

/// Nearest-rank quantile of a sorted slice.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let k = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[k - 1]
}

fn median_iqr(values: &[f64]) -> (f64, f64) {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let med = median_sorted(&sorted);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    (med, iqr)
}

/// Paired two-sided t-test. Zero-variance differences follow the
/// conventions: all-zero differences give (0, 1); nonzero constant
/// differences give an infinite statistic and p = 0.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() || a.len() < 2 {
        return input_err("paired_ttest: need two samples of equal length >= 2");
    }
    let k = a.len() as f64;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / k;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (k - 1.0);
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (f64::INFINITY.copysign(mean), 0.0)
        });
    }
    let stat = mean / (var / k).sqrt();
    let dist = StudentsT::new(0.0, 1.0, k - 1.0)
        .map_err(|e| crate::error::EowsError::Numeric(e.to_string()))?;
    let p = 2.0 * (1.0 - dist.cdf(stat.abs()));
    Ok((stat, p))
}

fn combine_seed(master: u64, n: usize, trial: usize) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325 ^ master;
    for b in (n as u64).to_le_bytes().iter().chain((trial as u64).to_le_bytes().iter()) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn signal_dims(kind: SignalKind, n: usize) -> (usize, usize) {
    match kind {
        SignalKind::Helmholtz { .. } => (n, n),
        SignalKind::Sinusoid => (n, 2 * n),
    }
}

fn generate_signal(spec: &SignalSpec, n: usize, seed: u64) -> Result<(Mat, SvdTriplet)> {
    match spec.kind {
        SignalKind::Helmholtz { nu, frob2 } => {
            gen_helmholtz(n, n, nu, frob2, seed, &HelixGeometry::default())
        }
        SignalKind::Sinusoid => gen_sinusoid(n, seed),
    }
}

/// Run `trials` independent draws for every grid size and method; returns
/// the raw rows, per-(n, method) medians with interquartile ranges, and
/// paired t-tests on the MSE between every method pair.
pub fn run_experiment(
    signal: &SignalSpec,
    noise: &NoiseSpec,
    n_grid: &[usize],
    trials: usize,
    methods: &[SimMethod],
    cfg: &EowsConfig,
) -> Result<ExperimentTable> {
    if trials < 1 {
        return input_err("run_experiment: trials must be >= 1");
    }
    if methods.is_empty() {
        return input_err("run_experiment: at least one method required");
    }
    let mut rows: Vec<TrialRow> = Vec::new();
    for &n in n_grid {
        let trial_rows: Vec<Result<Vec<TrialRow>>> = (0..trials)
            .into_par_iter()
            .map(|trial| run_trial(signal, noise, n, trial, methods, cfg))
            .collect();
        for tr in trial_rows {
            rows.extend(tr?);
        }
    }

    let mut aggregates = Vec::new();
    let mut ttests = Vec::new();
    for &n in n_grid {
        for m in methods {
            let mses: Vec<f64> = rows
                .iter()
                .filter(|r| r.n == n && r.method == m.name())
                .map(|r| r.mse)
                .collect();
            let lefts: Vec<f64> = rows
                .iter()
                .filter(|r| r.n == n && r.method == m.name())
                .map(|r| r.left_inner)
                .collect();
            let rights: Vec<f64> = rows
                .iter()
                .filter(|r| r.n == n && r.method == m.name())
                .map(|r| r.right_inner)
                .collect();
            if mses.is_empty() {
                continue;
            }
            let (mm, mi) = median_iqr(&mses);
            let (lm, li) = median_iqr(&lefts);
            let (rm, ri) = median_iqr(&rights);
            aggregates.push(AggregateRow {
                n,
                method: m.name().to_string(),
                median_mse: mm,
                iqr_mse: mi,
                median_left: lm,
                iqr_left: li,
                median_right: rm,
                iqr_right: ri,
            });
        }
        for (i, ma) in methods.iter().enumerate() {
            for mb in methods.iter().skip(i + 1) {
                let a: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.n == n && r.method == ma.name())
                    .map(|r| r.mse)
                    .collect();
                let b: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.n == n && r.method == mb.name())
                    .map(|r| r.mse)
                    .collect();
                if a.len() == b.len() && a.len() >= 2 {
                    let (stat, p) = paired_ttest(&a, &b)?;
                    ttests.push(TtestRow {
                        n,
                        method_a: ma.name().to_string(),
                        method_b: mb.name().to_string(),
                        stat,
                        p,
                    });
                }
            }
        }
    }
    Ok(ExperimentTable { rows, aggregates, ttests })
}

fn run_trial(
    signal: &SignalSpec,
    noise: &NoiseSpec,
    n: usize,
    trial: usize,
    methods: &[SimMethod],
    cfg: &EowsConfig,
) -> Result<Vec<TrialRow>> {
    let trial_seed = combine_seed(signal.seed ^ noise.seed.rotate_left(17), n, trial);
    let (s, truth) = generate_signal(signal, n, trial_seed)?;
    let (p, nc) = (s.rows(), s.cols());
    debug_assert_eq!((p, nc), signal_dims(signal.kind, n));
    let z = gen_noise(p, nc, &NoiseSpec { kind: noise.kind, df: noise.df, seed: trial_seed })?;
    let y = s.add(&z)?;

    // The spectral stage also provides the shared effective rank reported
    // for every method's singular-vector metrics.
    let pipeline_methods: Vec<pipeline::Method> = methods
        .iter()
        .filter_map(|m| match m {
            SimMethod::Noisy => None,
            SimMethod::Eoptshrink => Some(pipeline::Method::Eoptshrink),
            SimMethod::Ws => Some(pipeline::Method::Ws),
            SimMethod::Eows => Some(pipeline::Method::Eows),
        })
        .collect();
    let mut results = pipeline::run_many(&y, cfg, &pipeline_methods)?.into_iter();
    let r_hat = {
        // Cheap spectral pass when no method carried it.
        let mut found = None;
        let mut peeked: Vec<pipeline::EowsResult> = Vec::new();
        for res in results.by_ref() {
            if found.is_none() {
                if let Some(est) = &res.est {
                    found = Some(est.r_hat);
                }
            }
            peeked.push(res);
        }
        results = peeked.into_iter();
        match found {
            Some(r) => r,
            None => spectre::eoptshrink(&y, cfg.loss, cfg.c_exp)?.est.r_hat,
        }
    };

    let mut rows = Vec::with_capacity(methods.len());
    for m in methods {
        let s_hat = match m {
            SimMethod::Noisy => y.clone(),
            _ => results.next().expect("one result per pipeline method").s_hat,
        };
        let mse = matcore::mse(&s_hat, &s)?;
        let (left, right) = singular_vector_metrics(&s_hat, &truth, r_hat);
        rows.push(TrialRow {
            n,
            method: m.name().to_string(),
            trial,
            mse,
            left_inner: left,
            right_inner: right,
            r_hat,
            seed: trial_seed,
        });
    }
    Ok(rows)
}

/// Projection of the estimate's r-th singular vectors onto the true top-r
/// subspaces.
fn singular_vector_metrics(s_hat: &Mat, truth: &SvdTriplet, r_hat: usize) -> (f64, f64) {
    if r_hat == 0 {
        return (0.0, 0.0);
    }
    let r = r_hat.min(truth.sigma.len());
    let est_svd = matcore::gram_top_svd(s_hat, r);
    if est_svd.sigma.len() < r {
        return (0.0, 0.0);
    }
    let u_true = Mat::from_fn(truth.u.rows(), r, |i, k| truth.u.get(i, k));
    let v_true = Mat::from_fn(truth.v.rows(), r, |i, k| truth.v.get(i, k));
    let u_hat: Vec<f64> = (0..est_svd.u.rows()).map(|i| est_svd.u.get(i, r - 1)).collect();
    let v_hat: Vec<f64> = (0..est_svd.v.rows()).map(|i| est_svd.v.get(i, r - 1)).collect();
    let left = matcore::subspace_inner(&u_true, &u_hat).unwrap_or(0.0);
    let right = matcore::subspace_inner(&v_true, &v_hat).unwrap_or(0.0);
    (left, right)
}
