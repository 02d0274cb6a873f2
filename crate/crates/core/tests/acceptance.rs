//! Acceptance suite. Runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line per criterion; exits non-zero if any gating criterion
//! fails.
//!
//! Training runs are cached so criteria sharing a configuration reuse them.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use specfuse::cube::{build_coverage, linear_wavelengths, unfold, ImageCube, Mat};
use specfuse::degrade::{apply_psf, apply_srf, gaussian_kernel};
use specfuse::gradcheck::{check_joint, FdOptions, FdReport};
use specfuse::losses::{Ablation, LossWeights};
use specfuse::metrics;
use specfuse::net::{decode_shared, psf_forward, srf_forward, ConstraintFn, Dims, EndmemberLayer, ModelParams, PsfLayer, SrfLayer};
use specfuse::synth::{gen_scene, SceneConfig};
use specfuse::train::{train, train_from, TrainConfig, TrainOutput};

const SEEDS: [u64; 3] = [0, 1, 2];
const ITERATIONS: usize = 3000;
const FIT_P: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Variant {
    Full,
    Softmax,
    DropZb,
    DropYlr,
}

/// σ stored in tenths to keep the key orderable.
type RunKey = (Variant, u64, u32);

struct Run {
    mpsnr: f64,
    msam: f64,
    psf_error: f64,
    elapsed: Duration,
    out: TrainOutput,
}

struct Suite {
    runs: BTreeMap<RunKey, Run>,
    results: Vec<(String, bool, String, bool)>,
}

impl Suite {
    fn run(&mut self, variant: Variant, seed: u64, sigma_tenths: u32) -> &Run {
        let key = (variant, seed, sigma_tenths);
        if !self.runs.contains_key(&key) {
            let sigma = sigma_tenths as f64 / 10.0;
            let (scene, t) = gen_scene(&SceneConfig {
                sigma,
                seed,
                ..Default::default()
            })
            .expect("default scene");
            let mut cfg = TrainConfig {
                iterations: ITERATIONS,
                p: FIT_P,
                seed,
                ..Default::default()
            };
            match variant {
                Variant::Full => {}
                Variant::Softmax => cfg.constraint_fn = ConstraintFn::Softmax,
                Variant::DropZb => cfg.ablation.drop_zb = true,
                Variant::DropYlr => cfg.ablation.drop_ylr = true,
            }
            let start = Instant::now();
            let out = train(&t.lrhsi, &t.hrmsi, &scene.coverage, &cfg, Some(&scene.hrhsi)).expect("training run");
            let elapsed = start.elapsed();
            let mpsnr = metrics::mpsnr(&scene.hrhsi, &out.x_tilde).unwrap();
            let msam = metrics::msam(&scene.hrhsi, &out.x_tilde).unwrap();
            let psf_error = metrics::psf_kernel_error(&out.params.psf.kernel.data, &scene.psf.kernel).unwrap();
            println!(
                "    run {variant:?} seed {seed} sigma {sigma}: mPSNR {mpsnr:.3} dB, mSAM {msam:.3} deg, PSF error {psf_error:.5}, {:.1} s",
                elapsed.as_secs_f64()
            );
            self.runs.insert(
                key,
                Run {
                    mpsnr,
                    msam,
                    psf_error,
                    elapsed,
                    out,
                },
            );
        }
        &self.runs[&key]
    }

    fn record(&mut self, name: &str, pass: bool, detail: String, gating: bool) {
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        self.results.push((name.to_string(), pass, detail, gating));
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn fd_summary(r: &FdReport) -> String {
    let worst = r
        .groups
        .iter()
        .map(|g| g.max_rel_err)
        .fold(0.0, f64::max);
    let min_checked = r.groups.iter().map(|g| g.checked).min().unwrap_or(0);
    let skipped: usize = r.groups.iter().map(|g| g.kink_skipped).sum();
    format!(
        "{} groups, worst rel err {worst:.2e}, min checked {min_checked}, kink-skipped {skipped}, failing {:?}",
        r.groups.len(),
        r.failing_groups()
    )
}

fn criterion_1(s: &mut Suite) {
    let start = Instant::now();
    let (scene, t) = gen_scene(&SceneConfig {
        rows: 8,
        cols: 8,
        bands: 12,
        ratio: 2,
        seed: 0,
        ..Default::default()
    })
    .unwrap();
    let (dims, ratio) = Dims::from_inputs(&t.lrhsi, &t.hrmsi).unwrap();
    let cfg = TrainConfig {
        p: 4,
        iterations: 200,
        ..Default::default()
    };
    let init = ModelParams::init(&t.lrhsi, 3, &scene.coverage, ratio, &cfg.net_config(), 0).unwrap();
    // also check at a partly trained point where many clamps are saturated
    let trained = train_from(&t.lrhsi, &t.hrmsi, init.clone(), &cfg, None).unwrap().params;
    let (z, y) = (unfold(&t.lrhsi), unfold(&t.hrmsi));
    let opts = FdOptions::default();
    let w = LossWeights::default();
    let mut pass = true;
    let mut detail = Vec::new();
    for (label, params) in [("init", &init), ("trained", &trained)] {
        let report = check_joint(&z, &y, dims, params, &w, &Ablation::default(), &opts).unwrap();
        // every group is fully checked when smaller than 64 entries
        let coverage_ok = report
            .groups
            .iter()
            .zip(params.views())
            .all(|(g, v)| g.sampled == v.data.len().min(64) && g.checked > 0);
        pass &= report.passed() && coverage_ok;
        detail.push(format!("{label}: {}", fd_summary(&report)));
    }
    let elapsed = start.elapsed();
    pass &= elapsed <= Duration::from_secs(60);
    s.record(
        "1 gradient correctness",
        pass,
        format!("{}; {:.1} s (limit 60 s)", detail.join("; "), elapsed.as_secs_f64()),
        true,
    );
}

fn brute_decode(a: &ImageCube, e: &Mat) -> Vec<f64> {
    let mut out = vec![0.0; a.rows() * a.cols() * e.cols];
    for r in 0..a.rows() {
        for c in 0..a.cols() {
            for l in 0..e.cols {
                let mut v = 0.0;
                for k in 0..e.rows {
                    v += a.get(r, c, k) * e.get(k, l);
                }
                out[l * a.rows() * a.cols() + r * a.cols() + c] = v.clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn criterion_2(s: &mut Suite) {
    let mut worst = [0.0f64; 3];
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bands = 20;
        let x = ImageCube::new(16, 16, bands, (0..16 * 16 * bands).map(|_| rng.gen()).collect(), None).unwrap();
        let psf = gaussian_kernel(4, 0.5 + seed as f64 * 0.4).unwrap();
        let learned = psf_forward(
            &x,
            &PsfLayer {
                kernel: Mat::from_vec(4, 4, psf.kernel.clone()).unwrap(),
            },
        )
        .unwrap();
        let reference = apply_psf(&x, &psf).unwrap();
        for (a, b) in learned.data().iter().zip(reference.data()) {
            worst[0] = worst[0].max((a - b).abs());
        }

        let wl = linear_wavelengths(400.0, 1000.0, bands);
        let cov = build_coverage(&wl, &[(400.0, 620.0), (600.0, 800.0), (780.0, 1000.0)]).unwrap();
        let weights: Vec<Vec<f64>> = cov
            .index_sets()
            .iter()
            .map(|set| set.iter().map(|_| rng.gen_range(0.05..1.0)).collect())
            .collect();
        let layer = SrfLayer {
            coverage: cov.clone(),
            weights: weights.concat(),
            eps_norm: 1e-8,
        };
        let learned = srf_forward(&x, &layer).unwrap();
        let reference = apply_srf(&x, &cov, &weights).unwrap();
        for (a, b) in learned.data().iter().zip(reference.data()) {
            worst[1] = worst[1].max((a - b).abs());
        }

        let p = 6;
        let a = ImageCube::new(16, 16, p, (0..16 * 16 * p).map(|_| rng.gen::<f64>() / 3.0).collect(), None).unwrap();
        let e = Mat::from_vec(p, bands, (0..p * bands).map(|_| rng.gen()).collect()).unwrap();
        let decoded = decode_shared(&a, &EndmemberLayer { e: e.clone() }).unwrap();
        for (u, v) in decoded.data().iter().zip(brute_decode(&a, &e)) {
            worst[2] = worst[2].max((u - v).abs());
        }
    }
    let pass = worst[0] <= 1e-12 && worst[1] <= 1e-6 && worst[2] <= 1e-12;
    s.record(
        "2 oracle equivalence",
        pass,
        format!(
            "psf {:.1e} (<= 1e-12), srf {:.1e} (<= 1e-6), decode {:.1e} (<= 1e-12) over 5 random 16x16 scenes",
            worst[0], worst[1], worst[2]
        ),
        true,
    );
}

fn criterion_3(s: &mut Suite) {
    let r = s.run(Variant::Full, 0, 5);
    let pass = r.mpsnr >= 30.0 && r.msam <= 5.0 && r.psf_error <= 0.02 && r.elapsed <= Duration::from_secs(600);
    let detail = format!(
        "mPSNR {:.3} dB (>= 30), mSAM {:.3} deg (<= 5), PSF error {:.5} (<= 0.02), {:.1} s (<= 600)",
        r.mpsnr,
        r.msam,
        r.psf_error,
        r.elapsed.as_secs_f64()
    );
    s.record("3 synthetic recovery", pass, detail, true);
}

fn mean_sum_error(a: &Mat) -> f64 {
    (0..a.rows).map(|i| (1.0 - a.row(i).iter().sum::<f64>()).abs()).sum::<f64>() / a.rows as f64
}

fn criterion_4(s: &mut Suite) {
    let r = s.run(Variant::Full, 0, 5);
    let b = &r.out.bundle;
    let all: Vec<f64> = [&b.a, &b.a_h_a, &b.a_h_b].iter().flat_map(|m| m.data.iter().copied()).collect();
    let in_box = all.iter().all(|v| (0.0..=1.0).contains(v));
    let small = all.iter().filter(|&&v| v < 0.1).count() as f64 / all.len() as f64;
    let (sa, sb) = (mean_sum_error(&b.a), mean_sum_error(&b.a_h_b));
    let weights_ok = r.out.log.constraints_held() && r.out.params.boxes_satisfied();
    let pass = in_box && sa <= 0.05 && sb <= 0.05 && small >= 0.6 && weights_ok;
    let detail = format!(
        "abundances in [0,1]: {in_box}; mean |1-sum| A {sa:.4}, A_h_b {sb:.4} (<= 0.05); entries < 0.1: {:.1}% (>= 60%); E/PSF/SRF boxed every iteration: {weights_ok}",
        small * 100.0
    );
    s.record("4 constraint invariants", pass, detail, true);
}

fn criterion_5(s: &mut Suite) {
    let mut diffs = Vec::new();
    for seed in SEEDS {
        let clamp = s.run(Variant::Full, seed, 5).mpsnr;
        let soft = s.run(Variant::Softmax, seed, 5).mpsnr;
        diffs.push(clamp - soft);
    }
    let m = median(diffs.clone());
    let detail = format!(
        "median mPSNR(clamp) - mPSNR(softmax) = {m:.3} dB (>= 0); per seed {:?}",
        diffs.iter().map(|d| (d * 1000.0).round() / 1000.0).collect::<Vec<_>>()
    );
    s.record("5 clamp vs softmax", m >= 0.0, detail, true);
}

fn criterion_6(s: &mut Suite) {
    let (mut zb, mut ylr) = (Vec::new(), Vec::new());
    for seed in SEEDS {
        let full = s.run(Variant::Full, seed, 5).mpsnr;
        zb.push(full - s.run(Variant::DropZb, seed, 5).mpsnr);
        ylr.push(full - s.run(Variant::DropYlr, seed, 5).mpsnr);
    }
    let (mz, my) = (median(zb), median(ylr));
    s.record(
        "6 ablation ordering",
        mz >= 1.0 && mz > my,
        format!("median drop without Z~b {mz:.3} dB (>= 1), without Y_lr {my:.3} dB (< Z~b drop)"),
        true,
    );
}

fn criterion_7(s: &mut Suite) {
    let v: Vec<f64> = [5u32, 10, 20].iter().map(|&t| s.run(Variant::Full, 0, t).mpsnr).collect();
    let spread = v.iter().copied().fold(f64::MIN, f64::max) - v.iter().copied().fold(f64::MAX, f64::min);
    s.record(
        "7 PSF robustness",
        spread <= 2.0,
        format!("mPSNR at sigma 0.5/1/2 = {:.3}/{:.3}/{:.3} dB, spread {spread:.3} dB (<= 2)", v[0], v[1], v[2]),
        true,
    );
}

fn oracle_rmse(r: &ImageCube, e: &ImageCube) -> f64 {
    let mut s = 0.0;
    let mut n = 0.0;
    for row in 0..r.rows() {
        for col in 0..r.cols() {
            for b in 0..r.bands() {
                let d = r.get(row, col, b) - e.get(row, col, b);
                s += d * d;
                n += 1.0;
            }
        }
    }
    (s / n).sqrt()
}

fn oracle_mrae(r: &ImageCube, e: &ImageCube) -> f64 {
    let mut s = 0.0;
    for row in 0..r.rows() {
        for col in 0..r.cols() {
            for b in 0..r.bands() {
                let (x, y) = (r.get(row, col, b), e.get(row, col, b));
                s += (x - y).abs() / x.max(1e-3);
            }
        }
    }
    s / (r.rows() * r.cols() * r.bands()) as f64
}

fn oracle_ergas(r: &ImageCube, e: &ImageCube, ratio: f64) -> f64 {
    let mut acc = 0.0;
    for b in 0..r.bands() {
        let (mut se, mut sum) = (0.0, 0.0);
        for row in 0..r.rows() {
            for col in 0..r.cols() {
                let d = r.get(row, col, b) - e.get(row, col, b);
                se += d * d;
                sum += r.get(row, col, b);
            }
        }
        let n = (r.rows() * r.cols()) as f64;
        let rel = (se / n).sqrt() / (sum / n);
        acc += rel * rel;
    }
    100.0 / ratio * (acc / r.bands() as f64).sqrt()
}

fn criterion_8(s: &mut Suite) {
    let mut ok = true;
    let mut notes = Vec::new();
    let cube = |rows, cols, bands, data| ImageCube::new(rows, cols, bands, data, None).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let c = cube(5, 4, 3, (0..60).map(|_| rng.gen_range(0.05..1.0)).collect());
    let exact = metrics::mpsnr(&c, &c).unwrap() == 100.0
        && metrics::msam(&c, &c).unwrap() == 0.0
        && metrics::ergas(&c, &c, 4.0).unwrap() == 0.0
        && metrics::rmse(&c, &c).unwrap() == 0.0
        && metrics::mrae(&c, &c).unwrap() == 0.0;
    ok &= exact;
    notes.push(format!("identical cubes exact: {exact}"));

    let psnr20 = metrics::mpsnr(&cube(1, 2, 1, vec![1.0, 0.5]), &cube(1, 2, 1, vec![0.9, 0.6])).unwrap();
    let sam = (
        metrics::sam_pixel(&[0.3, 0.4], &[0.3, 0.4]).unwrap(),
        metrics::sam_pixel(&[1.0, 0.0], &[0.0, 1.0]).unwrap(),
        metrics::sam_pixel(&[1.0, 0.0], &[1.0, 1.0]).unwrap(),
    );
    let offset_r = cube(2, 2, 2, vec![0.5; 8]);
    let offset_e = cube(2, 2, 2, vec![0.6; 8]);
    let (rm, mr) = (
        metrics::rmse(&offset_r, &offset_e).unwrap(),
        metrics::mrae(&offset_r, &offset_e).unwrap(),
    );
    let g = gaussian_kernel(4, 0.5).unwrap().kernel;
    let scaled: Vec<f64> = g.iter().map(|v| v * 2.5).collect();
    let trivial = (psnr20 - 20.0).abs() < 1e-12
        && sam.0 == 0.0
        && (sam.1 - 90.0).abs() < 1e-12
        && (sam.2 - 45.0).abs() < 1e-12
        && (rm - 0.1).abs() < 1e-12
        && (mr - 0.2).abs() < 1e-12
        && metrics::psf_kernel_error(&g, &g).unwrap() == 0.0
        && metrics::psf_kernel_error(&scaled, &g).unwrap() < 1e-15;
    ok &= trivial;
    notes.push(format!("analytic examples: {trivial}"));

    let ergas_ex = metrics::ergas(&cube(1, 2, 1, vec![0.4, 0.6]), &cube(1, 2, 1, vec![0.45, 0.55]), 4.0).unwrap();
    ok &= (ergas_ex - 2.5).abs() < 1e-12;
    notes.push(format!("ERGAS example {ergas_ex:.12}"));

    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (rows, cols, bands) = (rng.gen_range(2..10), rng.gen_range(2..10), rng.gen_range(1..8));
        let n = rows * cols * bands;
        let r = cube(rows, cols, bands, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect());
        let e = cube(rows, cols, bands, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect());
        let ratio = rng.gen_range(1..9) as f64;
        worst = worst
            .max((metrics::ergas(&r, &e, ratio).unwrap() - oracle_ergas(&r, &e, ratio)).abs())
            .max((metrics::rmse(&r, &e).unwrap() - oracle_rmse(&r, &e)).abs())
            .max((metrics::mrae(&r, &e).unwrap() - oracle_mrae(&r, &e)).abs());
    }
    ok &= worst <= 1e-12;
    notes.push(format!("ERGAS/RMSE/MRAE vs brute force worst {worst:.1e} (<= 1e-12)"));
    s.record("8 metric unit suite", ok, notes.join("; "), true);
}

fn specfuse(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_specfuse"))
        .args(args)
        .env_remove("SPECFUSE_THREADS")
        .output()
        .expect("spawn specfuse")
}

fn criterion_9(s: &mut Suite) {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let p = |name: &str| d.join(name).to_str().unwrap().to_string();
    let sim = specfuse(&["simulate", "--synthetic", "--size", "16", "--bands", "10", "--seed", "3", "--out", &p("scene")]);
    assert!(sim.status.success(), "{}", String::from_utf8_lossy(&sim.stderr));
    let fuse = |out: &str, threads: &str| {
        let o = specfuse(&[
            "--threads",
            threads,
            "fuse",
            "--lrhsi",
            &p("scene/lrhsi.raw"),
            "--hrmsi",
            &p("scene/hrmsi.raw"),
            "--coverage",
            &p("scene/coverage.csv"),
            "--truth",
            &p("scene/hrhsi.raw"),
            "--iterations",
            "40",
            "--p",
            "6",
            "--seed",
            "11",
            "--out",
            &p(out),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    fuse("a", "1");
    fuse("b", "1");
    fuse("c", "3");
    let read = |run: &str, file: &str| std::fs::read(Path::new(&p(run)).join(file)).unwrap();
    let same = |x: &str, y: &str| read(x, "model.ckpt") == read(y, "model.ckpt") && read(x, "train_log.csv") == read(y, "train_log.csv");
    let (ab, ac) = (same("a", "b"), same("a", "c"));
    s.record(
        "9 determinism",
        ab && ac,
        format!("repeat run identical: {ab}; 1 vs 3 threads identical: {ac}"),
        true,
    );
}

fn criterion_10(s: &mut Suite) {
    let Ok(dir) = std::env::var("SPECFUSE_PAVIA_DIR") else {
        println!("SKIP 10 real-data spot check: set SPECFUSE_PAVIA_DIR to a simulate output of the prepared Pavia cube (non-gating)");
        return;
    };
    let dir = Path::new(&dir);
    let read = |f: &str| specfuse::io::read_cube(&dir.join(f)).expect("Pavia cube");
    let (x, z, y) = (read("hrhsi.raw"), read("lrhsi.raw"), read("hrmsi.raw"));
    let cov = specfuse::io::read_coverage(&dir.join("coverage.csv"), z.wavelengths().expect("wavelengths")).unwrap();
    let out = train(&z, &y, &cov, &TrainConfig::default(), None).unwrap();
    let v = metrics::mpsnr(&x, &out.x_tilde).unwrap();
    s.record(
        "10 real-data spot check",
        (v - 38.7647).abs() <= 1.5,
        format!("mPSNR {v:.3} dB (38.76 +- 1.5, non-gating)"),
        false,
    );
}

fn main() {
    // The harness passes filter arguments; an explicit filter that does not
    // mention this suite skips it (e.g. `cargo test --workspace foo`).
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }
    let mut s = Suite {
        runs: BTreeMap::new(),
        results: Vec::new(),
    };
    let start = Instant::now();
    criterion_1(&mut s);
    criterion_2(&mut s);
    criterion_8(&mut s);
    criterion_9(&mut s);
    criterion_3(&mut s);
    criterion_4(&mut s);
    criterion_5(&mut s);
    criterion_6(&mut s);
    criterion_7(&mut s);
    criterion_10(&mut s);

    println!("\nacceptance summary ({:.0} s):", start.elapsed().as_secs_f64());
    let mut failed = 0;
    s.results
        .sort_by_key(|r| r.0.split(' ').next().and_then(|n| n.parse::<u32>().ok()));
    for (name, pass, _, gating) in &s.results {
        let tag = match (pass, gating) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "FAIL (non-gating)",
        };
        println!("  {tag} {name}");
        if !pass && *gating {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} gating criteria failed");
        std::process::exit(1);
    }
}
