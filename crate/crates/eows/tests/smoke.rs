// Temporary diagnostics, deleted before finalizing.
use eows::matcore::{self, Mat};
use eows::pipeline::{self, EowsConfig, Method};
use eows::simlab::*;
use eows::spectre::{self, ShrinkTarget};

#[test]
#[ignore]
fn n512_balance() {
    let n = 512;
    let (s, _) = gen_sinusoid(n, 7).unwrap();
    let z = gen_noise(n, 2 * n, &NoiseSpec::new(NoiseKind::Type1, 13)).unwrap();
    let y = s.add(&z).unwrap();
    let eopt = spectre::eoptshrink(&y, ShrinkTarget::Frobenius, None).unwrap();
    println!("r_hat {}", eopt.est.r_hat);
    println!("mse(noisy) = {:.4e}", matcore::mse(&y, &s).unwrap());
    println!("mse(s_os)  = {:.4e}", matcore::mse(&eopt.s_os, &s).unwrap());
    let t0 = std::time::Instant::now();
    let res = pipeline::run(&y, &EowsConfig { method: Method::Eows, ..Default::default() }).unwrap();
    println!("mse(eows)  = {:.4e} ({:.1}s) tau {:?}", matcore::mse(&res.s_hat, &s).unwrap(), t0.elapsed().as_secs_f64(), res.tau_star);
    // How compressible is the signal in the chosen basis? Coefficient
    // magnitudes of the *clean* signal against the threshold.
    let basis = res.basis.as_ref().unwrap();
    let ta_clean = eows::hwt::TensorAnalysis::new(&s, basis.row_dict.clone(), basis.col_dict.clone());
    let coeffs = ta_clean.coeffs_for(&basis.tiles).unwrap();
    let sig2 = res.diagnostics.sigma_summary.unwrap().1;
    let thresh = res.tau_star.unwrap() * sig2.sqrt();
    let nbig = coeffs.iter().filter(|c| c.abs() > thresh).count();
    let small_energy: f64 = coeffs.iter().filter(|c| c.abs() <= thresh).map(|c| c * c).sum();
    println!(
        "threshold {:.3e}: clean-signal coeffs above it: {} of {} ({:.1}%), energy below: {:.3e} (pn*sigma2 = {:.3e})",
        thresh, nbig, coeffs.len(), 100.0 * nbig as f64 / coeffs.len() as f64,
        small_energy, (coeffs.len() as f64) * sig2
    );
    let t0 = std::time::Instant::now();
    let res_ws = pipeline::run(&y, &EowsConfig { method: Method::Ws, ..Default::default() }).unwrap();
    println!("mse(ws)    = {:.4e} ({:.1}s)", matcore::mse(&res_ws.s_hat, &s).unwrap(), t0.elapsed().as_secs_f64());
}
