//! `eows`: generate synthetic data, denoise matrices, inspect transforms
//! and trees, and run the simulation lab from the command line.
//!
//! Exit codes: 0 success, 1 input/file problems, 2 numeric failures.

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use eows::error::EowsError;
use eows::hwt;
use eows::matcore::io;
use eows::pipeline::{self, EowsConfig, Method, TreeSource};
use eows::simlab::{self, NoiseKind, NoiseSpec, SignalKind, SignalSpec, SimMethod};
use eows::spectre::ShrinkTarget;
use eows::treegeo::{questionnaire, EmdParams, StartAxis};

#[derive(Parser)]
#[command(name = "eows", version, about = "Matrix denoising by optimal singular-value shrinkage and tree-adapted Haar-Walsh wavelet shrinkage")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic signal matrix (optionally with noise added).
    Gen(GenArgs),
    /// Denoise a matrix file.
    Denoise(DenoiseArgs),
    /// Transform a matrix on the best basis of two given trees.
    Transform(TransformArgs),
    /// Learn partition trees for a matrix and emit one as JSON.
    Tree(TreeArgs),
    /// Run the synthetic experiment lab.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Signal family: helmholtz | sinusoid.
    #[arg(long)]
    signal: String,
    /// Base size n (helmholtz is n x n, sinusoid is n x 2n).
    #[arg(long)]
    n: usize,
    /// Rows for helmholtz (defaults to n).
    #[arg(long)]
    p: Option<usize>,
    /// Helmholtz frequency parameter.
    #[arg(long, default_value_t = 1.0)]
    nu: f64,
    /// Helmholtz squared Frobenius norm target.
    #[arg(long, default_value_t = 150.0)]
    frob2: f64,
    /// Helix radius / pitch / turns and sheet x-offset.
    #[arg(long, default_value_t = 1.0)]
    helix_radius: f64,
    #[arg(long, default_value_t = 0.5)]
    helix_pitch: f64,
    #[arg(long, default_value_t = 3.0)]
    helix_turns: f64,
    #[arg(long, default_value_t = 3.0)]
    sheet_offset: f64,
    /// Add noise of this kind to the signal: type1 | type2 | type3.
    #[arg(long)]
    noise: Option<String>,
    /// Student-t degrees of freedom for the noise entries.
    #[arg(long, default_value_t = 10.0)]
    df: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output path (.txt writes the text format, anything else binary).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DenoiseArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// eoptshrink | ws | eows.
    #[arg(long, default_value = "eows")]
    method: String,
    /// Shrinkage loss: fro | op | nuc.
    #[arg(long, default_value = "fro")]
    loss: String,
    /// Noise level for the ws method.
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Which matrix the trees are learned from: os | amp.
    #[arg(long, default_value = "os")]
    tree_source: String,
    /// Best-basis cost exponent in (0, 2).
    #[arg(long, default_value_t = 1.0)]
    ell: f64,
    /// Questionnaire iterations.
    #[arg(long, default_value_t = 3)]
    iters: usize,
    /// Spectral exponent c (defaults to min(1/2.01, 1/ln ln n)).
    #[arg(long)]
    c_exp: Option<f64>,
    /// Tree-metric level exponent a.
    #[arg(long, default_value_t = 0.0)]
    emd_a: f64,
    /// Tree-metric size exponent b.
    #[arg(long, default_value_t = 1.0)]
    emd_b: f64,
    /// Multiplier on the median tree metric for the affinity scale.
    #[arg(long, default_value_t = 1.0)]
    eps_factor: f64,
    /// Questionnaire start axis: cols | rows.
    #[arg(long, default_value = "cols")]
    start_axis: String,
    /// Sidecar JSON path (defaults to <out>.json).
    #[arg(long)]
    sidecar: Option<PathBuf>,
}

#[derive(Args)]
struct TransformArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Row tree JSON file.
    #[arg(long)]
    rows: PathBuf,
    /// Column tree JSON file.
    #[arg(long)]
    cols: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    ell: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TreeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Which tree to emit: rows | cols.
    #[arg(long, default_value = "rows")]
    axis: String,
    #[arg(long, default_value_t = 3)]
    iters: usize,
    #[arg(long, default_value_t = 0.0)]
    emd_a: f64,
    #[arg(long, default_value_t = 1.0)]
    emd_b: f64,
    #[arg(long, default_value_t = 1.0)]
    eps_factor: f64,
    /// Questionnaire start axis: cols | rows.
    #[arg(long, default_value = "cols")]
    start_axis: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// helmholtz | sinusoid.
    #[arg(long)]
    signal: String,
    /// type1 | type2 | type3.
    #[arg(long)]
    noise: String,
    /// Comma-separated grid of sizes, e.g. 256,512.
    #[arg(long)]
    n: String,
    #[arg(long, default_value_t = 10)]
    trials: usize,
    /// Comma-separated list from noisy,eoptshrink,ws,eows.
    #[arg(long)]
    methods: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10.0)]
    df: f64,
    /// Shrinkage loss for the spectral stage.
    #[arg(long, default_value = "fro")]
    loss: String,
    /// Noise level assumed by the ws baseline.
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Output CSV path; the JSON aggregate lands next to it.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("EOWS_THREADS") {
        if let Ok(k) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
        }
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(
            e.kind(),
            clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
        ) =>
        {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            // Bad arguments are input errors.
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err((step, err)) => {
            eprintln!("eows: {step}: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

type StepResult = Result<(), (String, EowsError)>;

fn at<T>(step: &str, r: eows::Result<T>) -> Result<T, (String, EowsError)> {
    r.map_err(|e| (step.to_string(), e))
}

fn dispatch(cli: Cli) -> StepResult {
    match cli.command {
        Command::Gen(args) => run_gen(args),
        Command::Denoise(args) => run_denoise(args),
        Command::Transform(args) => run_transform(args),
        Command::Tree(args) => run_tree(args),
        Command::Simulate(args) => run_simulate(args),
    }
}

fn parse_signal(kind: &str, nu: f64, frob2: f64) -> eows::Result<SignalKind> {
    match kind {
        "helmholtz" => Ok(SignalKind::Helmholtz { nu, frob2 }),
        "sinusoid" => Ok(SignalKind::Sinusoid),
        other => Err(EowsError::Input(format!("unknown signal '{other}'"))),
    }
}

fn parse_start_axis(s: &str) -> eows::Result<StartAxis> {
    match s {
        "cols" | "columns" => Ok(StartAxis::Columns),
        "rows" => Ok(StartAxis::Rows),
        other => Err(EowsError::Input(format!("unknown start axis '{other}'"))),
    }
}

fn run_gen(args: GenArgs) -> StepResult {
    let kind = at("parse arguments", parse_signal(&args.signal, args.nu, args.frob2))?;
    let geom = simlab::HelixGeometry {
        radius: args.helix_radius,
        pitch: args.helix_pitch,
        turns: args.helix_turns,
        sheet_offset: args.sheet_offset,
    };
    let (mut m, _) = at(
        "generate signal",
        match kind {
            SignalKind::Helmholtz { nu, frob2 } => simlab::gen_helmholtz(
                args.p.unwrap_or(args.n),
                args.n,
                nu,
                frob2,
                args.seed,
                &geom,
            ),
            SignalKind::Sinusoid => simlab::gen_sinusoid(args.n, args.seed),
        },
    )?;
    if let Some(noise) = &args.noise {
        let kind = at("parse arguments", NoiseKind::from_str(noise))?;
        let z = at(
            "generate noise",
            simlab::gen_noise(
                m.rows(),
                m.cols(),
                &NoiseSpec { kind, df: args.df, seed: args.seed },
            ),
        )?;
        m = at("add noise", m.add(&z))?;
    }
    at("write output", io::write_matrix(&args.out, &m, io::format_for_path(&args.out)))?;
    println!("wrote {} x {} matrix to {}", m.rows(), m.cols(), args.out.display());
    Ok(())
}

fn build_config(args: &DenoiseArgs) -> eows::Result<EowsConfig> {
    Ok(EowsConfig {
        method: Method::from_str(&args.method)?,
        loss: ShrinkTarget::from_str(&args.loss)?,
        c_exp: args.c_exp,
        emd: EmdParams { a: args.emd_a, b: args.emd_b, eps_factor: args.eps_factor },
        iters: args.iters,
        ell: args.ell,
        tree_source: match args.tree_source.as_str() {
            "os" => TreeSource::Os,
            "amp" => TreeSource::Amp,
            other => return Err(EowsError::Input(format!("unknown tree source '{other}'"))),
        },
        start_axis: parse_start_axis(&args.start_axis)?,
        ws_sigma: args.sigma,
    })
}

fn run_denoise(args: DenoiseArgs) -> StepResult {
    let cfg = at("parse arguments", build_config(&args))?;
    let y = at("read input", io::read_matrix(&args.input))?;
    let result = at("denoise", pipeline::run(&y, &cfg))?;
    at("write output", io::write_matrix(&args.out, &result.s_hat, io::format_for_path(&args.out)))?;

    let mut sidecar = serde_json::json!({
        "method": args.method,
        "loss": args.loss,
        "diagnostics": result.diagnostics,
        "tau_star": result.tau_star,
    });
    if let Some(est) = &result.est {
        let spikes: Vec<serde_json::Value> = est
            .spikes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                serde_json::json!({
                    "index": i,
                    "lambda": s.lambda,
                    "d_hat": s.d_hat,
                    "a1": s.a1_hat,
                    "a2": s.a2_hat,
                    "phi": match cfg.loss {
                        ShrinkTarget::Frobenius => s.d_hat * (s.a1_hat * s.a2_hat).sqrt(),
                        ShrinkTarget::Operator =>
                            s.d_hat * (s.a1_hat.min(s.a2_hat) / s.a1_hat.max(s.a2_hat)).sqrt(),
                        ShrinkTarget::Nuclear => (s.d_hat
                            * ((s.a1_hat * s.a2_hat).sqrt()
                                - ((1.0 - s.a1_hat) * (1.0 - s.a2_hat)).sqrt()))
                        .max(0.0),
                    },
                })
            })
            .collect();
        sidecar["r_hat"] = serde_json::json!(est.r_hat);
        sidecar["lambda_plus_hat"] = serde_json::json!(est.lambda_plus_hat);
        sidecar["spikes"] = serde_json::json!(spikes);
        sidecar["dropped_spikes"] = serde_json::json!(est.dropped);
    }
    let sidecar_path = args.sidecar.unwrap_or_else(|| {
        let mut p = args.out.clone();
        p.set_extension("json");
        p
    });
    at(
        "write sidecar",
        std::fs::write(&sidecar_path, serde_json::to_string_pretty(&sidecar).unwrap())
            .map_err(EowsError::from),
    )?;
    println!("denoised {} -> {}", args.input.display(), args.out.display());
    Ok(())
}

fn run_transform(args: TransformArgs) -> StepResult {
    let m = at("read input", io::read_matrix(&args.input))?;
    let rows_json: serde_json::Value = at(
        "read row tree",
        std::fs::read_to_string(&args.rows)
            .map_err(EowsError::from)
            .and_then(|s| serde_json::from_str(&s).map_err(|e| EowsError::Input(e.to_string()))),
    )?;
    let cols_json: serde_json::Value = at(
        "read col tree",
        std::fs::read_to_string(&args.cols)
            .map_err(EowsError::from)
            .and_then(|s| serde_json::from_str(&s).map_err(|e| EowsError::Input(e.to_string()))),
    )?;
    let t_rows = at("parse row tree", eows::treegeo::PartitionTree::from_json(&rows_json))?;
    let t_cols = at("parse col tree", eows::treegeo::PartitionTree::from_json(&cols_json))?;
    let ta = at("analyze", hwt::tensor_analyze(&m, &t_rows, &t_cols))?;
    let basis = at("best basis", hwt::best_basis_2d(&ta, args.ell))?;
    let values = at("coefficients", ta.coeffs_for(&basis.tiles))?;
    let tiles: Vec<serde_json::Value> = basis
        .tiles
        .iter()
        .zip(&values)
        .map(|((p_atom, q_atom), v)| {
            serde_json::json!({ "row_atom": p_atom, "col_atom": q_atom, "value": v })
        })
        .collect();
    let out = serde_json::json!({ "ell": args.ell, "cost": basis.cost, "tiles": tiles });
    at(
        "write output",
        std::fs::write(&args.out, serde_json::to_string(&out).unwrap()).map_err(EowsError::from),
    )?;
    println!("wrote {} coefficients to {}", values.len(), args.out.display());
    Ok(())
}

fn run_tree(args: TreeArgs) -> StepResult {
    let m = at("read input", io::read_matrix(&args.input))?;
    let prm = EmdParams { a: args.emd_a, b: args.emd_b, eps_factor: args.eps_factor };
    let start = at("parse arguments", parse_start_axis(&args.start_axis))?;
    let (t_rows, t_cols) = at("questionnaire", questionnaire(&m, args.iters, &prm, start))?;
    let tree = match args.axis.as_str() {
        "rows" => t_rows,
        "cols" => t_cols,
        other => {
            return Err((
                "parse arguments".into(),
                EowsError::Input(format!("unknown axis '{other}'")),
            ))
        }
    };
    at(
        "write output",
        std::fs::write(&args.out, serde_json::to_string(&tree.to_json()).unwrap())
            .map_err(EowsError::from),
    )?;
    println!(
        "wrote {} tree ({} levels, {} leaves) to {}",
        args.axis,
        tree.n_levels(),
        tree.n_leaves(),
        args.out.display()
    );
    Ok(())
}

fn run_simulate(args: SimulateArgs) -> StepResult {
    let kind = at("parse arguments", parse_signal(&args.signal, 1.0, 150.0))?;
    let noise_kind = at("parse arguments", NoiseKind::from_str(&args.noise))?;
    let n_grid: Vec<usize> = {
        let mut grid = Vec::new();
        for tok in args.n.split(',') {
            match tok.trim().parse() {
                Ok(v) => grid.push(v),
                Err(_) => {
                    return Err((
                        "parse arguments".into(),
                        EowsError::Input(format!("bad size '{tok}'")),
                    ))
                }
            }
        }
        grid
    };
    let methods: Vec<SimMethod> = {
        let mut ms = Vec::new();
        for tok in args.methods.split(',') {
            ms.push(at("parse arguments", SimMethod::from_str(tok.trim()))?);
        }
        ms
    };
    let signal = SignalSpec { kind, seed: args.seed };
    let noise = NoiseSpec { kind: noise_kind, df: args.df, seed: args.seed };
    let cfg = EowsConfig {
        loss: at("parse arguments", ShrinkTarget::from_str(&args.loss))?,
        ws_sigma: args.sigma,
        ..EowsConfig::default()
    };
    let table = at(
        "simulate",
        simlab::run_experiment(&signal, &noise, &n_grid, args.trials, &methods, &cfg),
    )?;
    at(
        "write csv",
        std::fs::write(&args.out, table.to_csv()).map_err(EowsError::from),
    )?;
    let mut json_path = args.out.clone();
    json_path.set_extension("json");
    at(
        "write json aggregate",
        std::fs::write(&json_path, serde_json::to_string_pretty(&table.to_json()).unwrap())
            .map_err(EowsError::from),
    )?;
    println!(
        "wrote {} rows to {} (aggregates in {})",
        table.rows.len(),
        args.out.display(),
        json_path.display()
    );
    Ok(())
}
