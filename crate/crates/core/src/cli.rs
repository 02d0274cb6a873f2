//! Command-line front end: `simulate`, `fuse`, `evaluate`, `grad-check`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint;
use crate::cube::{unfold, Mat};
use crate::degrade::{gaussian_kernel, simulate_triplet};
use crate::error::{FuseError, Result};
use crate::gradcheck::{check_joint, fd_check, joint_gradients, joint_value, FdOptions, FdReport};
use crate::io;
use crate::losses::{Ablation, LossWeights};
use crate::metrics;
use crate::net::{ConstraintFn, Dims, ModelParams};
use crate::synth::{gen_scene, SceneConfig};
use crate::tape::Reduction;
use crate::train::{train, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "specfuse", version, about = "Unsupervised hyperspectral/multispectral image fusion")]
pub struct Cli {
    /// Worker threads for array math.
    #[arg(long, global = true, env = "SPECFUSE_THREADS")]
    pub threads: Option<usize>,

    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene or degrade a supplied HrHSI into a triplet.
    Simulate(SimulateArgs),
    /// Train the coupled autoencoders and write the fused HrHSI.
    Fuse(FuseArgs),
    /// Compare an estimate against a reference cube.
    Evaluate(EvaluateArgs),
    /// Finite-difference check of the analytic gradients.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Generate a planted synthetic scene.
    #[arg(long, conflicts_with = "hrhsi")]
    pub synthetic: bool,
    /// Reference HrHSI cube to degrade.
    #[arg(long, requires = "srf")]
    pub hrhsi: Option<PathBuf>,
    /// Coverage table (msi_band, lambda_low_nm, lambda_high_nm).
    #[arg(long)]
    pub srf: Option<PathBuf>,
    /// Min-max normalize the supplied HrHSI into [0, 1] first.
    #[arg(long)]
    pub normalize: bool,
    #[arg(long, default_value_t = 48)]
    pub size: usize,
    #[arg(long, default_value_t = 31)]
    pub bands: usize,
    #[arg(long, default_value_t = 4)]
    pub p_true: usize,
    #[arg(long, default_value_t = 4)]
    pub ratio: usize,
    #[arg(long, default_value_t = 0.5)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub lrhsi: Option<PathBuf>,
    #[arg(long)]
    pub hrmsi: Option<PathBuf>,
    /// Coverage table (msi_band, lambda_low_nm, lambda_high_nm).
    #[arg(long)]
    pub coverage: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Ground-truth HrHSI for periodic metrics.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Ground-truth PSF kernel CSV for the kernel error report.
    #[arg(long)]
    pub truth_psf: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub nu: Option<f64>,
    #[arg(long)]
    pub a_sparse: Option<f64>,
    /// mean or sum.
    #[arg(long)]
    pub reduction: Option<String>,
    /// clamp or softmax.
    #[arg(long)]
    pub constraint: Option<String>,
    /// Loss terms to remove: drop_Zb, drop_Za, drop_Y, drop_Ylr.
    #[arg(long, value_delimiter = ',')]
    pub ablate: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Allow thread-count dependent reduction order.
    #[arg(long)]
    pub nondeterministic: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub estimate: PathBuf,
    /// GSD ratio used by ERGAS.
    #[arg(long)]
    pub ratio: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub size: usize,
    #[arg(long, default_value_t = 12)]
    pub bands: usize,
    #[arg(long, default_value_t = 2)]
    pub ratio: usize,
    #[arg(long, default_value_t = 4)]
    pub p: usize,
    #[arg(long, default_value_t = 64)]
    pub coords: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Also write the report CSV here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Corrupts the analytic gradient of one group (negative control).
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

/// On-disk run configuration for `fuse`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub lrhsi: Option<PathBuf>,
    pub hrmsi: Option<PathBuf>,
    pub coverage: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub truth_psf: Option<PathBuf>,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Built-in defaults, then the config file, then flags.
    pub fn resolve(args: &FuseArgs) -> Result<RunConfig> {
        let mut cfg = match &args.config {
            Some(p) => io::read_json::<RunConfig>(p)?,
            None => RunConfig::default(),
        };
        let set = |dst: &mut Option<PathBuf>, src: &Option<PathBuf>| {
            if src.is_some() {
                *dst = src.clone();
            }
        };
        set(&mut cfg.lrhsi, &args.lrhsi);
        set(&mut cfg.hrmsi, &args.hrmsi);
        set(&mut cfg.coverage, &args.coverage);
        set(&mut cfg.out, &args.out);
        set(&mut cfg.truth, &args.truth);
        set(&mut cfg.truth_psf, &args.truth_psf);
        let t = &mut cfg.train;
        if let Some(v) = args.iterations {
            t.iterations = v;
        }
        if let Some(v) = args.lr0 {
            t.lr0 = v;
        }
        if let Some(v) = args.p {
            t.p = v;
        }
        if let Some(v) = args.seed {
            t.seed = v;
        }
        let w = &mut t.weights;
        for (dst, src) in [
            (&mut w.alpha, args.alpha),
            (&mut w.beta, args.beta),
            (&mut w.gamma, args.gamma),
            (&mut w.mu, args.mu),
            (&mut w.nu, args.nu),
            (&mut w.a_sparse, args.a_sparse),
        ] {
            if let Some(v) = src {
                *dst = v;
            }
        }
        if let Some(r) = &args.reduction {
            w.reduction = match r.as_str() {
                "mean" => Reduction::Mean,
                "sum" => Reduction::Sum,
                other => return Err(FuseError::Config(format!("unknown reduction {other:?} (expected mean or sum)"))),
            };
        }
        if let Some(c) = &args.constraint {
            t.constraint_fn = c.parse::<ConstraintFn>()?;
        }
        if !args.ablate.is_empty() {
            let extra = Ablation::parse(&args.ablate)?;
            let a = &mut t.ablation;
            a.drop_zb |= extra.drop_zb;
            a.drop_za |= extra.drop_za;
            a.drop_y |= extra.drop_y;
            a.drop_ylr |= extra.drop_ylr;
        }
        if args.nondeterministic {
            t.reproducible = false;
        }
        t.validate()?;
        Ok(cfg)
    }
}

fn require<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    v.as_deref()
        .ok_or_else(|| FuseError::Config(format!("missing required input --{flag}")))
}

fn write_manifest(out: &Path, command: &str, config: serde_json::Value, files: &[&str]) -> Result<()> {
    io::write_json(
        &out.join("manifest.json"),
        &json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "config": config,
            "files": files,
        }),
    )
}

fn kernel_mat(kernel: &[f64], k: usize) -> Mat {
    Mat {
        rows: k,
        cols: k,
        data: kernel.to_vec(),
    }
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let out = &args.out;
    let mut files = vec!["hrhsi.raw", "lrhsi.raw", "hrmsi.raw", "psf.csv", "srf.csv", "coverage.csv"];
    let config;
    if args.synthetic {
        let cfg = SceneConfig {
            rows: args.size,
            cols: args.size,
            bands: args.bands,
            p_true: args.p_true,
            ratio: args.ratio,
            sigma: args.sigma,
            seed: args.seed,
            ..Default::default()
        };
        let (scene, t) = gen_scene(&cfg)?;
        io::write_cube(&out.join("hrhsi.raw"), &scene.hrhsi)?;
        io::write_cube(&out.join("lrhsi.raw"), &t.lrhsi)?;
        io::write_cube(&out.join("hrmsi.raw"), &t.hrmsi)?;
        io::write_matrix_csv(&out.join("psf.csv"), &kernel_mat(&scene.psf.kernel, scene.psf.size))?;
        io::write_srf_csv(&out.join("srf.csv"), &scene.coverage, &scene.srf_weights, scene.hrhsi.wavelengths())?;
        io::write_coverage(&out.join("coverage.csv"), &scene.coverage)?;
        io::write_matrix_csv(&out.join("endmembers.csv"), &scene.endmembers)?;
        io::write_matrix_csv(&out.join("abundances.csv"), &unfold(&scene.abundances))?;
        files.extend(["endmembers.csv", "abundances.csv"]);
        config = serde_json::to_value(&cfg).expect("scene config serializes");
    } else {
        let Some(path) = &args.hrhsi else {
            return Err(FuseError::Config("simulate needs --synthetic or --hrhsi".into()));
        };
        let srf_path = require(&args.srf, "srf")?;
        let mut hrhsi = io::read_cube(path)?;
        if args.normalize {
            hrhsi = hrhsi.min_max_normalized();
        }
        let wl = hrhsi.wavelengths().ok_or_else(|| {
            FuseError::format(io::sidecar_path(path), "wavelengths_nm are required to map the coverage table")
        })?;
        let cov = io::read_coverage(srf_path, wl)?;
        let weights: Vec<Vec<f64>> = cov.index_sets().iter().map(|s| vec![1.0; s.len()]).collect();
        let psf = gaussian_kernel(args.ratio, args.sigma)?;
        let t = simulate_triplet(&hrhsi, &psf, &cov, &weights)?;
        io::write_cube(&out.join("hrhsi.raw"), &hrhsi)?;
        io::write_cube(&out.join("lrhsi.raw"), &t.lrhsi)?;
        io::write_cube(&out.join("hrmsi.raw"), &t.hrmsi)?;
        io::write_matrix_csv(&out.join("psf.csv"), &kernel_mat(&psf.kernel, psf.size))?;
        io::write_srf_csv(&out.join("srf.csv"), &cov, &weights, hrhsi.wavelengths())?;
        io::write_coverage(&out.join("coverage.csv"), &cov)?;
        config = json!({
            "hrhsi": path,
            "srf": srf_path,
            "normalize": args.normalize,
            "ratio": args.ratio,
            "sigma": args.sigma,
        });
    }
    write_manifest(out, "simulate", config, &files)
}

fn read_kernel_csv(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| FuseError::io(path, e))?;
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|e| FuseError::format(path, format!("{s:?}: {e}"))))
        .collect()
}

pub fn cmd_fuse(args: &FuseArgs) -> Result<()> {
    let cfg = RunConfig::resolve(args)?;
    let z = io::read_cube(require(&cfg.lrhsi, "lrhsi")?)?;
    let y = io::read_cube(require(&cfg.hrmsi, "hrmsi")?)?;
    let out = require(&cfg.out, "out")?.to_path_buf();
    let cov_path = require(&cfg.coverage, "coverage")?;
    let wl = z
        .wavelengths()
        .ok_or_else(|| FuseError::Config("LrHSI sidecar lacks wavelengths_nm; coverage cannot be mapped".into()))?;
    let cov = io::read_coverage(cov_path, wl)?;
    let (_, ratio) = Dims::from_inputs(&z, &y)?;
    let truth = cfg.truth.as_deref().map(io::read_cube).transpose()?;
    let truth_psf = cfg.truth_psf.as_deref().map(read_kernel_csv).transpose()?;
    io::write_json(&out.join("effective-config.json"), &cfg)?;

    let result = train(&z, &y, &cov, &cfg.train, truth.as_ref())?;
    io::write_cube(&out.join("x_tilde.raw"), &result.x_tilde)?;
    checkpoint::save(&out.join("model.ckpt"), &result.params)?;
    io::write_matrix_csv(&out.join("psf.csv"), &result.params.psf.kernel)?;
    io::write_srf_csv(&out.join("srf.csv"), &cov, &result.params.srf.band_weights(), Some(wl))?;
    io::write_matrix_csv(&out.join("endmembers.csv"), &result.params.endmembers.e)?;
    io::write_text(&out.join("train_log.csv"), &result.log.to_csv())?;
    let mut files = vec![
        "effective-config.json",
        "x_tilde.raw",
        "model.ckpt",
        "psf.csv",
        "srf.csv",
        "endmembers.csv",
        "train_log.csv",
    ];

    let mut summary = serde_json::Map::new();
    if let Some(last) = result.log.rows.last() {
        summary.insert("final_loss".into(), json!(last.loss.total));
    }
    if let Some(t) = &truth {
        let report = metrics::evaluate(t, &result.x_tilde, ratio as f64)?;
        summary.insert("metrics".into(), serde_json::to_value(&report).expect("report serializes"));
    }
    if let Some(k) = &truth_psf {
        let err = metrics::psf_kernel_error(&result.params.psf.kernel.data, k)?;
        summary.insert("psf_kernel_error".into(), json!(err));
    }
    if !summary.is_empty() {
        io::write_json(&out.join("summary.json"), &summary)?;
        files.push("summary.json");
    }
    if let Some(m) = summary.get("metrics") {
        println!("mPSNR {:.4} dB, mSAM {:.4} deg", m["mpsnr"], m["msam"]);
    }
    write_manifest(&out, "fuse", serde_json::to_value(&cfg).expect("config serializes"), &files)
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let r = io::read_cube(&args.reference)?;
    let e = io::read_cube(&args.estimate)?;
    let report = metrics::evaluate(&r, &e, args.ratio)?;
    let out = &args.out;
    io::write_text(
        &out.join("metrics.csv"),
        &format!(
            "metric,value\nmPSNR,{}\nmSAM,{}\nERGAS,{}\nRMSE,{}\nMRAE,{}\nSAM_skipped_pixels,{}\n",
            report.mpsnr, report.msam, report.ergas, report.rmse, report.mrae, report.sam_skipped_pixels
        ),
    )?;
    let mut bands = String::from("band,wavelength_nm,psnr_db\n");
    for (b, v) in report.psnr_per_band.iter().enumerate() {
        let wl = r.wavelengths().map(|w| w[b].to_string()).unwrap_or_default();
        bands.push_str(&format!("{b},{wl},{v}\n"));
    }
    io::write_text(&out.join("psnr_per_band.csv"), &bands)?;
    for (name, map) in [
        ("rmse_map", &report.rmse_map),
        ("mrae_map", &report.mrae_map),
        ("sam_map", &report.sam_map),
    ] {
        io::write_heatmap(&out.join(name), map, r.rows(), r.cols())?;
    }
    println!(
        "mPSNR {:.4} dB, mSAM {:.4} deg, ERGAS {:.4}, RMSE {:.6}, MRAE {:.6}",
        report.mpsnr, report.msam, report.ergas, report.rmse, report.mrae
    );
    write_manifest(
        out,
        "evaluate",
        json!({"reference": args.reference, "estimate": args.estimate, "ratio": args.ratio}),
        &[
            "metrics.csv",
            "psnr_per_band.csv",
            "rmse_map.pgm",
            "mrae_map.pgm",
            "sam_map.pgm",
        ],
    )
}

/// Seeded small scene and freshly initialized parameters for gradient checks.
pub fn grad_check_setup(args: &GradCheckArgs) -> Result<(Mat, Mat, Dims, ModelParams)> {
    let (scene, t) = gen_scene(&SceneConfig {
        rows: args.size,
        cols: args.size,
        bands: args.bands,
        ratio: args.ratio,
        seed: args.seed,
        ..Default::default()
    })?;
    let (dims, ratio) = Dims::from_inputs(&t.lrhsi, &t.hrmsi)?;
    let cfg = TrainConfig {
        p: args.p,
        ..Default::default()
    };
    let params = ModelParams::init(&t.lrhsi, t.hrmsi.bands(), &scene.coverage, ratio, &cfg.net_config(), args.seed)?;
    Ok((unfold(&t.lrhsi), unfold(&t.hrmsi), dims, params))
}

pub fn run_grad_check(args: &GradCheckArgs) -> Result<FdReport> {
    let (z, y, dims, params) = grad_check_setup(args)?;
    let weights = LossWeights::default();
    let ablation = Ablation::default();
    let opts = FdOptions {
        tolerance: args.tolerance,
        coords_per_group: args.coords,
        seed: args.seed,
        ..Default::default()
    };
    match &args.inject_fault {
        None => check_joint(&z, &y, dims, &params, &weights, &ablation, &opts),
        Some(group) => {
            let (_, mut grads) = joint_gradients(&z, &y, dims, &params, &weights, &ablation)?;
            let g = grads
                .get_mut(group)
                .ok_or_else(|| FuseError::Config(format!("unknown parameter group {group:?}")))?;
            g.iter_mut().for_each(|v| *v = *v * 1.5 + 1e-3);
            fd_check(&params, &grads, |p| joint_value(&z, &y, dims, p, &weights, &ablation), &opts)
        }
    }
}

/// Returns the process exit code: 0 when every group passes, 1 otherwise.
pub fn cmd_grad_check(args: &GradCheckArgs) -> Result<i32> {
    let report = run_grad_check(args)?;
    let csv = report.to_csv();
    print!("{csv}");
    if let Some(p) = &args.out {
        io::write_text(p, &csv)?;
    }
    if report.passed() {
        Ok(0)
    } else {
        eprintln!("gradient check failed for: {}", report.failing_groups().join(", "));
        Ok(1)
    }
}

pub fn run(cli: &Cli) -> Result<i32> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(FuseError::Config("--threads must be at least 1".into()));
        }
        // Fails only if the pool was already built, which leaves the old size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a).map(|_| 0),
        Command::Fuse(a) => cmd_fuse(a).map(|_| 0),
        Command::Evaluate(a) => cmd_evaluate(a).map(|_| 0),
        Command::GradCheck(a) => cmd_grad_check(a),
    }
}
