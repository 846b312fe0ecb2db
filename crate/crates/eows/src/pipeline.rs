//! End-to-end denoising: spectral shrinkage, coupled tree learning on the
//! shrunk matrix, tensor best-basis selection on the amplitude-corrected
//! matrix, variance-adaptive wavelet shrinkage, and the final low-rank
//! recombination with the estimated singular values.

use std::time::Instant;

use serde::Serialize;

use crate::error::{input_err, Result};
use crate::hwt::{best_basis_2d, BestBasis2D, TensorAnalysis};
use crate::matcore::{self, Mat};
use crate::shrinkage;
use crate::spectre::{self, ShrinkTarget, SpikeEstimates};
use crate::treegeo::{questionnaire, EmdParams, PartitionTree, StartAxis};

/// Which estimator to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Method {
    Eoptshrink,
    Ws,
    Eows,
}

impl std::str::FromStr for Method {
    type Err = crate::error::EowsError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eoptshrink" => Ok(Method::Eoptshrink),
            "ws" => Ok(Method::Ws),
            "eows" => Ok(Method::Eows),
            other => input_err(format!("unknown method '{other}'")),
        }
    }
}

/// Which matrix the Questionnaire trees are learned from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TreeSource {
    /// The loss-target shrinkage estimate (the algorithm's choice).
    Os,
    /// The amplitude-corrected matrix.
    Amp,
}

#[derive(Debug, Clone)]
pub struct EowsConfig {
    pub method: Method,
    pub loss: ShrinkTarget,
    /// Spectral exponent; `None` selects `min(1/2.01, 1/ln ln n)`.
    pub c_exp: Option<f64>,
    pub emd: EmdParams,
    /// Questionnaire iterations.
    pub iters: usize,
    /// Best-basis cost exponent.
    pub ell: f64,
    pub tree_source: TreeSource,
    /// Axis the Questionnaire starts from.
    pub start_axis: StartAxis,
    /// Known noise level for the classical wavelet-shrinkage method.
    pub ws_sigma: f64,
}

impl Default for EowsConfig {
    fn default() -> Self {
        EowsConfig {
            method: Method::Eows,
            loss: ShrinkTarget::Frobenius,
            c_exp: None,
            emd: EmdParams::default(),
            iters: 3,
            ell: 1.0,
            tree_source: TreeSource::Os,
            start_axis: StartAxis::Columns,
            ws_sigma: 1.0,
        }
    }
}

/// Run diagnostics: stage timings, tree balance, warnings.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Diagnostics {
    pub timings_ms: Vec<(String, f64)>,
    pub balance_rows: Option<(f64, f64)>,
    pub balance_cols: Option<(f64, f64)>,
    pub no_signal: bool,
    pub notes: Vec<String>,
    /// 99% absolute-entry quantile of the noise estimate.
    pub quantile99: Option<f64>,
    /// (min, median, max) of the per-tile variance estimates.
    pub sigma_summary: Option<(f64, f64, f64)>,
}

/// Result of one pipeline run.
#[derive(Debug)]
pub struct EowsResult {
    pub s_hat: Mat,
    pub est: Option<SpikeEstimates>,
    pub trees: Option<(PartitionTree, PartitionTree)>,
    pub basis: Option<BestBasis2D>,
    pub tau_star: Option<f64>,
    pub diagnostics: Diagnostics,
}

/// Run the configured method on an observation.
pub fn run(y: &Mat, cfg: &EowsConfig) -> Result<EowsResult> {
    run_shared(y, cfg, None)
}

/// Run several methods on the same observation, computing the spectral
/// stage only once.
pub fn run_many(y: &Mat, cfg: &EowsConfig, methods: &[Method]) -> Result<Vec<EowsResult>> {
    let mut shared: Option<spectre::EoptShrink> = None;
    let mut out = Vec::with_capacity(methods.len());
    for &method in methods {
        let mut mcfg = cfg.clone();
        mcfg.method = method;
        if matches!(method, Method::Eoptshrink | Method::Eows) && shared.is_none() {
            shared = Some(spectre::eoptshrink(y, cfg.loss, cfg.c_exp)?);
        }
        out.push(run_shared(y, &mcfg, shared.as_ref())?);
    }
    Ok(out)
}

fn run_shared(
    y: &Mat,
    cfg: &EowsConfig,
    shared: Option<&spectre::EoptShrink>,
) -> Result<EowsResult> {
    y.check_finite("pipeline input")?;
    if y.rows().min(y.cols()) < 32 {
        return input_err("pipeline: min(p, n) must be at least 32");
    }
    let mut diag = Diagnostics::default();

    if cfg.method == Method::Ws {
        let t0 = Instant::now();
        let (t_rows, t_cols) = questionnaire(y, cfg.iters, &cfg.emd, cfg.start_axis)?;
        diag.timings_ms.push(("questionnaire".into(), ms(t0)));
        diag.balance_rows = Some(t_rows.balance_ratios());
        diag.balance_cols = Some(t_cols.balance_ratios());
        let t0 = Instant::now();
        let s_hat = shrinkage::classic_ws(y, &t_rows, &t_cols, cfg.ws_sigma, cfg.ell)?;
        diag.timings_ms.push(("classic_ws".into(), ms(t0)));
        return Ok(EowsResult {
            s_hat,
            est: None,
            trees: Some((t_rows, t_cols)),
            basis: None,
            tau_star: None,
            diagnostics: diag,
        });
    }

    let t0 = Instant::now();
    let eopt_local;
    let eopt = match shared {
        Some(e) => e,
        None => {
            eopt_local = spectre::eoptshrink(y, cfg.loss, cfg.c_exp)?;
            &eopt_local
        }
    };
    diag.timings_ms.push(("eoptshrink".into(), ms(t0)));

    if cfg.method == Method::Eoptshrink {
        return Ok(EowsResult {
            s_hat: eopt.s_os.clone(),
            est: Some(eopt.est.clone()),
            trees: None,
            basis: None,
            tau_star: None,
            diagnostics: diag,
        });
    }

    // Full pipeline.
    let r_hat = eopt.est.r_hat;
    if r_hat == 0 {
        diag.no_signal = true;
        diag.notes.push("no signal detected (effective rank 0)".into());
        return Ok(EowsResult {
            s_hat: Mat::zeros(y.rows(), y.cols()),
            est: Some(eopt.est.clone()),
            trees: None,
            basis: None,
            tau_star: None,
            diagnostics: diag,
        });
    }
    // Pathological near-full-rank detection: the CDF imputation needs bulk
    // room, so fall back to the spectral stage alone.
    let n_wide = y.rows().max(y.cols());
    let k = (n_wide as f64).powf(eopt.est.c_exp).floor() as usize;
    if r_hat + 2 * k + 1 >= y.rows().min(y.cols()) {
        diag.notes.push("effective rank leaves no bulk room; returning the spectral stage".into());
        return Ok(EowsResult {
            s_hat: eopt.s_os.clone(),
            est: Some(eopt.est.clone()),
            trees: None,
            basis: None,
            tau_star: None,
            diagnostics: diag,
        });
    }

    let tree_src = match cfg.tree_source {
        TreeSource::Os => &eopt.s_os,
        TreeSource::Amp => &eopt.s_amp,
    };
    let t0 = Instant::now();
    let (t_rows, t_cols) = questionnaire(tree_src, cfg.iters, &cfg.emd, cfg.start_axis)?;
    diag.timings_ms.push(("questionnaire".into(), ms(t0)));
    diag.balance_rows = Some(t_rows.balance_ratios());
    diag.balance_cols = Some(t_cols.balance_ratios());

    let t0 = Instant::now();
    let row_dict = std::sync::Arc::new(crate::hwt::TreeDictionary::new(&t_rows)?);
    let col_dict = std::sync::Arc::new(crate::hwt::TreeDictionary::new(&t_cols)?);
    let ta = TensorAnalysis::new(&eopt.s_amp, row_dict, col_dict);
    let basis = best_basis_2d(&ta, cfg.ell)?;
    diag.timings_ms.push(("best_basis".into(), ms(t0)));

    let t0 = Instant::now();
    let (synth, tau, vt, _cm) =
        shrinkage::shrink_and_synthesize(&ta, &basis, &eopt.z_hat, &eopt.est)?;
    diag.timings_ms.push(("adaptive_shrink".into(), ms(t0)));
    let pn = (eopt.z_hat.rows() * eopt.z_hat.cols()) as f64;
    diag.quantile99 = Some(tau * (eopt.z_hat.frob_norm_sq() / pn).sqrt());
    diag.sigma_summary = Some(vt.summary());

    // Final recombination: top r_hat singular vectors of the synthesized
    // matrix, diagonal replaced by the estimated singular values. Vectors
    // past the numerical rank are zero-padded in the diagonal.
    let t0 = Instant::now();
    let svd = matcore::gram_top_svd(&synth, r_hat);
    let mut weights = Vec::with_capacity(r_hat);
    let sigma0 = svd.sigma.first().copied().unwrap_or(0.0);
    for i in 0..r_hat.min(svd.sigma.len()) {
        if svd.sigma[i] > 1e-10 * sigma0 {
            weights.push(eopt.est.spikes[i].d_hat);
        } else {
            weights.push(0.0);
        }
    }
    let s_hat = matcore::outer_sum(&svd.u, &svd.v, &weights);
    diag.timings_ms.push(("recombine".into(), ms(t0)));

    Ok(EowsResult {
        s_hat,
        est: Some(eopt.est.clone()),
        trees: Some((t_rows, t_cols)),
        basis: Some(basis),
        tau_star: Some(tau),
        diagnostics: diag,
    })
}

fn ms(t0: Instant) -> f64 {
    t0.elapsed().as_secs_f64() * 1e3
}
