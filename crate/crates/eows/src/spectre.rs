//! Data-driven optimal shrinkage of singular values under separable noise.
//!
//! Everything is estimated from the observed spectrum alone: the bulk edge
//! from order statistics of the eigenvalues, the effective rank by
//! thresholding above the edge, the bulk distribution by imputing the
//! eigenvalues hidden behind detected spikes, and from it the Stieltjes
//! transforms, D-transform, clean singular values and singular-vector
//! overlaps for each spike. Three loss-specific shrinkers map those onto
//! the retained singular values.
//!
//! A note on the companion Stieltjes transform: the second transform is
//! computed as `m2 = beta*m1 - (1-beta)/lambda`, i.e. the spectrum of the
//! wide-side Gram matrix is the narrow-side one plus a point mass at zero.
//! With this sign the D-transform `T(x) = x*m1(x)*m2(x)` is positive above
//! the bulk and inverts the spike locations exactly in the clean limit.

use serde::Serialize;

use crate::error::{input_err, numeric_err, Result};
use crate::matcore::{self, Mat};

/// Descending eigenvalues of the (smaller-side) Gram matrix plus the shape
/// they came from.
#[derive(Debug, Clone)]
pub struct SpectrumView {
    eigs: Vec<f64>,
    p: usize,
    n: usize,
}

impl SpectrumView {
    pub fn new(eigs: Vec<f64>, p: usize, n: usize) -> Result<Self> {
        if eigs.is_empty() {
            return input_err("spectrum must be nonempty");
        }
        if eigs.windows(2).any(|w| w[0] < w[1]) || eigs.iter().any(|&x| x < 0.0 || !x.is_finite())
        {
            return input_err("eigenvalues must be finite, nonnegative and descending");
        }
        Ok(SpectrumView { eigs, p, n })
    }

    pub fn eigs(&self) -> &[f64] {
        &self.eigs
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn beta(&self) -> f64 {
        self.p as f64 / self.n as f64
    }
}

/// Per-spike estimators.
#[derive(Debug, Clone, Serialize)]
pub struct SpikeEstimate {
    pub lambda: f64,
    pub m1: f64,
    pub m2: f64,
    pub m1p: f64,
    pub m2p: f64,
    pub t_hat: f64,
    pub tp_hat: f64,
    pub d_hat: f64,
    pub a1_hat: f64,
    pub a2_hat: f64,
}

/// Full output of the spectral estimation stage.
#[derive(Debug, Clone, Serialize)]
pub struct SpikeEstimates {
    pub r_hat: usize,
    pub lambda_plus_hat: f64,
    pub spikes: Vec<SpikeEstimate>,
    pub c_exp: f64,
    pub imputed: Vec<f64>,
    /// Spikes discarded as invalid (non-positive D-transform or overlaps
    /// far outside [0, 1]); they are treated as bulk.
    pub dropped: usize,
}

/// Loss function the shrinker is optimal for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ShrinkTarget {
    Frobenius,
    Operator,
    Nuclear,
}

impl std::str::FromStr for ShrinkTarget {
    type Err = crate::error::EowsError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fro" | "frobenius" => Ok(ShrinkTarget::Frobenius),
            "op" | "operator" => Ok(ShrinkTarget::Operator),
            "nuc" | "nuclear" => Ok(ShrinkTarget::Nuclear),
            other => input_err(format!("unknown loss '{other}' (expected fro|op|nuc)")),
        }
    }
}

/// Default spectral exponent `min(1/2.01, 1/ln(ln n))`.
pub fn default_c(n: usize) -> f64 {
    let lnln = (n.max(3) as f64).ln().ln();
    (1.0f64 / 2.01).min(1.0 / lnln.max(1e-9))
}

fn order_index(n: usize, c: f64) -> usize {
    (n as f64).powf(c).floor() as usize
}

/// Bulk-edge estimator from two order statistics of the spectrum.
pub fn bulk_edge(spec: &SpectrumView, c: f64) -> Result<f64> {
    if !(0.0 < c && c < 0.5) {
        return input_err("bulk_edge: c must lie in (0, 1/2)");
    }
    let k = order_index(spec.n, c);
    if k == 0 || 2 * k + 1 > spec.eigs.len() {
        return input_err("bulk_edge: matrix too small for the given c");
    }
    let a = spec.eigs[k];
    let b = spec.eigs[2 * k];
    let coef = 1.0 / ((2.0f64).powf(2.0 / 3.0) - 1.0);
    Ok(a + coef * (a - b))
}

/// Effective rank: eigenvalues separated from the estimated bulk edge by
/// more than `n^(-1/3)`.
pub fn effective_rank(spec: &SpectrumView, lambda_plus_hat: f64) -> usize {
    let thresh = lambda_plus_hat + (spec.n as f64).powf(-1.0 / 3.0);
    spec.eigs.iter().take_while(|&&l| l > thresh).count()
}

/// Imputed bulk eigenvalues behind the detected spikes plus the resulting
/// step CDF of the noise Gram spectrum.
#[derive(Debug, Clone)]
pub struct ImputedCdf {
    pub imputed: Vec<f64>,
    /// All support points (imputed + remaining bulk), each of mass
    /// `1/(p - r_hat)`.
    points: Vec<f64>,
    mass: f64,
}

impl ImputedCdf {
    /// Right-continuous step CDF evaluated at `x`.
    pub fn eval(&self, x: f64) -> f64 {
        self.points.iter().filter(|&&t| t <= x).count() as f64 * self.mass
    }
}

pub fn impute_and_cdf(spec: &SpectrumView, r_hat: usize, c: f64) -> Result<ImputedCdf> {
    if !(0.0 < c && c < 0.5) {
        return input_err("impute_and_cdf: c must lie in (0, 1/2)");
    }
    let k = order_index(spec.n, c);
    let p = spec.p.min(spec.eigs.len());
    if k == 0 || r_hat + 2 * k + 1 > p {
        return input_err("impute_and_cdf: matrix too small for the given c and rank");
    }
    let anchor = spec.eigs[k + r_hat];
    let tail = spec.eigs[2 * k + r_hat];
    let denom = (2.0f64).powf(2.0 / 3.0) - 1.0;
    let mut imputed = Vec::with_capacity(k);
    for j_rel in 1..=k {
        let frac = ((j_rel - 1) as f64 / k as f64).powf(2.0 / 3.0);
        imputed.push(anchor + (1.0 - frac) / denom * (anchor - tail));
    }
    let mut points = imputed.clone();
    points.extend_from_slice(&spec.eigs[k + r_hat..p]);
    let mass = 1.0 / (p - r_hat) as f64;
    Ok(ImputedCdf { imputed, points, mass })
}

/// Stieltjes-transform estimators at one spiked eigenvalue: `(m1, m2, m1',
/// m2')` from the imputed plus remaining bulk points.
pub fn stieltjes_at(
    spec: &SpectrumView,
    imputed: &[f64],
    r_hat: usize,
    lam: f64,
) -> Result<(f64, f64, f64, f64)> {
    let k = imputed.len();
    let p = spec.p.min(spec.eigs.len());
    if r_hat + k > p {
        return input_err("stieltjes_at: inconsistent rank/imputation");
    }
    let mut sum1 = 0.0;
    let mut sum2 = 0.0;
    let mut count = 0usize;
    for &x in imputed.iter().chain(&spec.eigs[k + r_hat..p]) {
        let gap = x - lam;
        if gap.abs() < 1e-12 {
            return numeric_err("stieltjes_at: spike too close to the bulk");
        }
        sum1 += 1.0 / gap;
        sum2 += 1.0 / (gap * gap);
        count += 1;
    }
    let m1 = sum1 / count as f64;
    let m1p = sum2 / count as f64;
    let beta = spec.beta();
    let m2 = beta * m1 - (1.0 - beta) / lam;
    let m2p = beta * m1p + (1.0 - beta) / (lam * lam);
    Ok((m1, m2, m1p, m2p))
}

const A_CLAMP_MIN: f64 = 1e-8;
const A_VALID_MAX: f64 = 1.5;

/// Estimate the effective rank and all per-spike quantities from a spectrum.
pub fn estimate_spikes(spec: &SpectrumView, c: f64) -> Result<SpikeEstimates> {
    let lambda_plus_hat = bulk_edge(spec, c)?;
    let mut r = effective_rank(spec, lambda_plus_hat);
    let r_initial = r;
    loop {
        let cdf = impute_and_cdf(spec, r, c)?;
        let mut spikes = Vec::with_capacity(r);
        let mut valid = true;
        for i in 0..r {
            let lam = spec.eigs[i];
            let (m1, m2, m1p, m2p) = match stieltjes_at(spec, &cdf.imputed, r, lam) {
                Ok(v) => v,
                Err(_) => {
                    valid = false;
                    r = i;
                    break;
                }
            };
            let t_hat = lam * m1 * m2;
            let tp_hat = m1 * m2 + lam * (m1p * m2 + m1 * m2p);
            if t_hat <= 0.0 {
                valid = false;
                r = i;
                break;
            }
            let d_hat = 1.0 / t_hat.sqrt();
            let a1_raw = m1 / (d_hat * d_hat * tp_hat);
            let a2_raw = m2 / (d_hat * d_hat * tp_hat);
            if !(0.0..A_VALID_MAX).contains(&a1_raw) || !(0.0..A_VALID_MAX).contains(&a2_raw) {
                valid = false;
                r = i;
                break;
            }
            let a1_hat = a1_raw.clamp(A_CLAMP_MIN, 1.0);
            let a2_hat = a2_raw.clamp(A_CLAMP_MIN, 1.0);
            spikes.push(SpikeEstimate {
                lambda: lam,
                m1,
                m2,
                m1p,
                m2p,
                t_hat,
                tp_hat,
                d_hat,
                a1_hat,
                a2_hat,
            });
        }
        if valid {
            return Ok(SpikeEstimates {
                r_hat: r,
                lambda_plus_hat,
                spikes,
                c_exp: c,
                imputed: cdf.imputed,
                dropped: r_initial - r,
            });
        }
    }
}

/// Loss-optimal shrinker values for the retained spikes.
pub fn shrinker_values(est: &SpikeEstimates, target: ShrinkTarget) -> Vec<f64> {
    est.spikes
        .iter()
        .map(|s| {
            let (a1, a2, d) = (s.a1_hat, s.a2_hat, s.d_hat);
            match target {
                ShrinkTarget::Frobenius => d * (a1 * a2).sqrt(),
                ShrinkTarget::Operator => d * (a1.min(a2) / a1.max(a2)).sqrt(),
                ShrinkTarget::Nuclear => {
                    (d * ((a1 * a2).sqrt() - ((1.0 - a1) * (1.0 - a2)).sqrt())).max(0.0)
                }
            }
        })
        .collect()
}

/// Result of the full spectral-shrinkage stage.
#[derive(Debug, Clone)]
pub struct EoptShrink {
    /// Loss-target shrinkage estimate (rank `r_hat`).
    pub s_os: Mat,
    /// Amplitude-corrected matrix `sum d_hat/sqrt(a1*a2) u v^T`.
    pub s_amp: Mat,
    /// Noise estimate `y - s_os`.
    pub z_hat: Mat,
    pub est: SpikeEstimates,
    /// Shrinker values applied in `s_os`.
    pub phi: Vec<f64>,
    /// Retained left/right singular vectors (columns, possibly none).
    pub u: Mat,
    pub v: Mat,
}

/// Run eOptShrink on an observation. `c` defaults to `default_c(cols)` of
/// the wide orientation.
pub fn eoptshrink(y: &Mat, target: ShrinkTarget, c: Option<f64>) -> Result<EoptShrink> {
    y.check_finite("eoptshrink")?;
    let transposed = y.rows() > y.cols();
    let work = if transposed { y.transpose() } else { y.clone() };
    let (p, n) = (work.rows(), work.cols());
    let c = c.unwrap_or_else(|| default_c(n));

    let gram = {
        let a = work.to_dmatrix();
        &a * a.transpose()
    };
    let se = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| {
        se.eigenvalues[b].partial_cmp(&se.eigenvalues[a]).unwrap().then(a.cmp(&b))
    });
    let eigs: Vec<f64> = order.iter().map(|&i| se.eigenvalues[i].max(0.0)).collect();

    let spec = SpectrumView::new(eigs, p, n)?;
    let mut est = estimate_spikes(&spec, c)?;
    let r = est.r_hat;
    let phi = shrinker_values(&est, target);

    // Top-r singular triplets of the working matrix from the Gram factors.
    let mut u = Mat::zeros(p, r.max(1));
    let mut v = Mat::zeros(n, r.max(1));
    let a = work.to_dmatrix();
    for col in 0..r {
        let idx = order[col];
        let sigma = spec.eigs()[col].sqrt();
        let w = se.eigenvectors.column(idx);
        let mut best = 0usize;
        let mut best_abs = -1.0;
        for i in 0..p {
            if w[i].abs() > best_abs {
                best_abs = w[i].abs();
                best = i;
            }
        }
        let flip = if w[best] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..p {
            u.set(i, col, flip * w[i]);
        }
        for j in 0..n {
            let mut dot = 0.0;
            for i in 0..p {
                dot += a[(i, j)] * w[i];
            }
            v.set(j, col, flip * dot / sigma);
        }
    }

    let amp: Vec<f64> =
        est.spikes.iter().map(|s| s.d_hat / (s.a1_hat * s.a2_hat).sqrt()).collect();
    let s_os = matcore::outer_sum(&u, &v, &phi);
    let s_amp = matcore::outer_sum(&u, &v, &amp);
    let z_hat = work.sub(&s_os)?;

    if transposed {
        // Swap the axes back: internal left quantities are original rights.
        for s in est.spikes.iter_mut() {
            std::mem::swap(&mut s.m1, &mut s.m2);
            std::mem::swap(&mut s.m1p, &mut s.m2p);
            std::mem::swap(&mut s.a1_hat, &mut s.a2_hat);
        }
        Ok(EoptShrink {
            s_os: s_os.transpose(),
            s_amp: s_amp.transpose(),
            z_hat: z_hat.transpose(),
            est,
            phi,
            u: v,
            v: u,
        })
    } else {
        Ok(EoptShrink { s_os, s_amp, z_hat, est, phi, u, v })
    }
}
