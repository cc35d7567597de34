//! `winoq` — verification, calibration, benchmarking and demo-training
//! workflows for the quantized Winograd Conv1D toolkit.
//!
//! Exit codes: 0 success, 1 verification/assertion failure, 2 usage or I/O
//! error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use winoq_core::gradcheck::{run_gradcheck, GradCheckConfig};
use winoq_core::quant::{
    build_histogram, kl_calibrate, minmax_scale, CalibrationReport, QuantScheme,
};
use winoq_core::train::{run_train_demo, save_checkpoint, RsqConfig, RsqMode};
use winoq_core::wino::{
    bench_kernel, check_overflow, plan_conv1d, run_equivalence_suite, BenchOptions, BenchReport,
    BenchShape, CaseOutcome, EquivalenceConfig, PlanPath,
};
use winoq_core::{io, Error};

const EXIT_OK: i32 = 0;
const EXIT_FAIL: i32 = 1;
const EXIT_USAGE: i32 = 2;

#[derive(Parser)]
#[command(
    name = "winoq",
    about = "Quantized Winograd Conv1D: verify, analyze, benchmark, calibrate, train",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Randomized bit-exactness sweep: INT8 Winograd vs INT8 GEMM
    Verify(VerifyArgs),
    /// Winograd transform overflow analysis for a scheme pair
    Overflow(OverflowArgs),
    /// Wall-clock comparison of the INT8 GEMM and Winograd operators
    Bench(BenchArgs),
    /// KL and min-max scale calibration for raw tensor files
    Calibrate(CalibrateArgs),
    /// Finite-difference verification of the training gradients
    Gradcheck(GradcheckArgs),
    /// PTQ / RSQ ordering experiment plus deployment consistency check
    TrainDemo(TrainDemoArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args)]
struct OutputArgs {
    /// Write the report here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Args)]
struct SchemeArgs {
    /// Activation base integer range T
    #[arg(long = "act-T", default_value_t = 63)]
    act_t: i32,
    /// Activation range scaling factor
    #[arg(long = "act-alpha", default_value_t = 1.0)]
    act_alpha: f64,
    /// Weight base integer range T
    #[arg(long = "wt-T", default_value_t = 63)]
    wt_t: i32,
    /// Weight range scaling factor
    #[arg(long = "wt-alpha", default_value_t = 1.5)]
    wt_alpha: f64,
    /// Storage bit-width
    #[arg(long, default_value_t = 8)]
    bits: u32,
}

impl SchemeArgs {
    fn schemes(&self) -> Result<(QuantScheme, QuantScheme), Error> {
        Ok((
            QuantScheme::new(self.bits, self.act_t, self.act_alpha)?,
            QuantScheme::new(self.bits, self.wt_t, self.wt_alpha)?,
        ))
    }
}

#[derive(Args)]
struct VerifyArgs {
    /// Single kernel size (default sweeps 3..=16)
    #[arg(long)]
    k: Option<usize>,
    /// Randomized cases per kernel size
    #[arg(long, default_value_t = 25)]
    cases: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct OverflowArgs {
    #[command(flatten)]
    scheme: SchemeArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct BenchArgs {
    /// Single kernel size (default sweeps 3..=16)
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long = "c-in", default_value_t = 64)]
    c_in: usize,
    #[arg(long = "c-out", default_value_t = 64)]
    c_out: usize,
    /// Input sequence length
    #[arg(long, default_value_t = 150)]
    width: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    /// Timed repetitions per operator (>= 3)
    #[arg(long, default_value_t = 10)]
    reps: usize,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Worker threads for the timing path only
    #[arg(long, env = "WINOQ_THREADS", default_value_t = 1)]
    threads: usize,
    #[command(flatten)]
    scheme: SchemeArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Raw tensor files, each with its `.json` sidecar
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Histogram bins for the KL search
    #[arg(long, default_value_t = 2048)]
    bins: usize,
    #[command(flatten)]
    scheme: SchemeArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    /// Relative error tolerance for the finite-difference checks
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Random points for the noise-gradient sign sweep
    #[arg(long = "sign-samples", default_value_t = 10_000)]
    sign_samples: usize,
    #[command(flatten)]
    scheme: SchemeArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct TrainDemoArgs {
    /// Number of seeds (medians over >= 5 give a confident verdict)
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    /// First seed; runs use seed, seed+1, ...
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 300)]
    steps: usize,
    /// Noise-loss weight (0 makes RSQ behave as RSQ without MSE)
    #[arg(long, default_value_t = 0.25)]
    beta: f64,
    /// Initial learning rate of the poly-decay schedule
    #[arg(long, default_value_t = 0.005)]
    lr: f64,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    /// Write per-run reports and the final RSQ student checkpoint here
    #[arg(long = "out-dir")]
    out_dir: Option<PathBuf>,
    #[command(flatten)]
    output: OutputArgs,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Io(_) | Error::Json(_) | Error::InvalidScheme(_) | Error::Domain(_) => {
                    EXIT_USAGE
                }
                _ => EXIT_FAIL,
            }
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<i32, Error> {
    match cli.command {
        Command::Verify(args) => cmd_verify(args),
        Command::Overflow(args) => cmd_overflow(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::TrainDemo(args) => cmd_train_demo(args),
    }
}

fn emit(output: &OutputArgs, json: &serde_json::Value, csv: Option<String>) -> Result<(), Error> {
    let body = match output.format {
        Format::Json => serde_json::to_string_pretty(json)?,
        Format::Csv => csv.ok_or_else(|| {
            Error::Domain("this report has no CSV form; use --format json".to_string())
        })?,
    };
    match &output.out {
        Some(path) => {
            std::fs::write(path, body + "\n")?;
            eprintln!("report written to {}", path.display());
        }
        None => println!("{body}"),
    }
    Ok(())
}

/// For subcommands whose primary output is the printed status lines: the
/// machine-readable report is written only when `--out` is given.
fn emit_to_file_only(output: &OutputArgs, json: &serde_json::Value) -> Result<(), Error> {
    if let Some(path) = &output.out {
        match output.format {
            Format::Json => {
                std::fs::write(path, serde_json::to_string_pretty(json)? + "\n")?;
                eprintln!("report written to {}", path.display());
            }
            Format::Csv => {
                return Err(Error::Domain(
                    "this report has no CSV form; use --format json".to_string(),
                ))
            }
        }
    }
    Ok(())
}

fn cmd_verify(args: VerifyArgs) -> Result<i32, Error> {
    if args.cases == 0 {
        return Err(Error::Domain("--cases must be >= 1".to_string()));
    }
    let cfg = EquivalenceConfig {
        k_values: match args.k {
            Some(k) => vec![k],
            None => (3..=16).collect(),
        },
        cases_per_k: args.cases,
        seed: args.seed,
        ..Default::default()
    };
    let report = run_equivalence_suite(&cfg);
    for case in &report.cases {
        let status = match &case.outcome {
            CaseOutcome::Exact => "exact".to_string(),
            CaseOutcome::PlainPath => "plain-int8 path (nothing to compare)".to_string(),
            CaseOutcome::Mismatch {
                batch,
                channel,
                index,
                wino_raw2x,
                gemm_raw_doubled,
            } => format!(
                "MISMATCH at (b={batch}, co={channel}, i={index}): \
                 winograd {wino_raw2x} vs doubled gemm {gemm_raw_doubled}"
            ),
            CaseOutcome::OperatorError(e) => format!("OPERATOR ERROR: {e}"),
        };
        println!(
            "k={:<2} c_in={} c_out={} width={:<2} pad=({},{}) .. {status}",
            case.k, case.c_in, case.c_out, case.width, case.padding.0, case.padding.1
        );
    }
    println!(
        "verify: {} exact, {} plain-path, {} failures (seed {})",
        report.exact, report.plain, report.failures, args.seed
    );
    if let Some(first) = report.first_failure() {
        eprintln!("first divergence: {}", serde_json::to_string(first)?);
    }
    emit_to_file_only(&args.output, &serde_json::to_value(&report)?)?;
    Ok(if report.all_ok() { EXIT_OK } else { EXIT_FAIL })
}

fn cmd_overflow(args: OverflowArgs) -> Result<i32, Error> {
    let (act, wt) = args.scheme.schemes()?;
    let report = check_overflow(act, wt);
    emit(&args.output, &serde_json::to_value(report)?, None)?;
    Ok(if report.fits_both() { EXIT_OK } else { EXIT_FAIL })
}

fn cmd_bench(args: BenchArgs) -> Result<i32, Error> {
    if args.reps < 3 {
        return Err(Error::Domain(format!(
            "--reps must be >= 3 for a meaningful median, got {}",
            args.reps
        )));
    }
    if args.stride != 1 {
        return Err(Error::Domain(
            "stride > 1 takes the plain INT8 path; there is no Winograd side to compare"
                .to_string(),
        ));
    }
    let (act, wt) = args.scheme.schemes()?;
    let ks: Vec<usize> = match args.k {
        Some(k) => vec![k],
        None => (3..=16).collect(),
    };
    let opts = BenchOptions {
        repetitions: args.reps,
        warmup: args.warmup,
        seed: args.seed,
        threads: args.threads.max(1),
    };
    let shape = BenchShape {
        batch: args.batch,
        c_in: args.c_in,
        c_out: args.c_out,
        width: args.width,
    };
    eprintln!(
        "bench: seed {}, {} timed reps after {} warmup, {} thread(s)",
        args.seed, args.reps, args.warmup, opts.threads
    );
    let mut rows: Vec<BenchReport> = Vec::with_capacity(ks.len());
    for k in ks {
        let plan = plan_conv1d(k, args.stride, act, wt);
        if plan.path != PlanPath::Winograd {
            return Err(Error::Domain(format!(
                "k={k} has no Winograd plan at stride {}",
                args.stride
            )));
        }
        rows.push(bench_kernel(&plan, shape, &opts)?);
    }
    let csv = {
        let mut s = String::from(BenchReport::CSV_HEADER);
        for r in &rows {
            s.push('\n');
            s.push_str(&r.csv_row());
        }
        s
    };
    emit(&args.output, &serde_json::to_value(&rows)?, Some(csv))?;
    Ok(EXIT_OK)
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<i32, Error> {
    let (act, _) = args.scheme.schemes()?;
    if args.bins < act.t_s() as usize {
        return Err(Error::Domain(format!(
            "--bins {} is below the scheme range T_s = {}",
            args.bins,
            act.t_s()
        )));
    }
    let mut rows: Vec<CalibrationReport> = Vec::new();
    for path in &args.inputs {
        let tensor = io::load_tensor::<f32>(path)?;
        let name = tensor_name(path);
        let hist = build_histogram(&tensor, args.bins)?;
        let cal = kl_calibrate(&hist, act);
        if cal.fallback_minmax {
            eprintln!(
                "warning: {name}: degenerate histogram, KL fell back to min-max behavior"
            );
        }
        rows.push(CalibrationReport {
            tensor: name.clone(),
            method: if cal.fallback_minmax { "minmax" } else { "kl" }.to_string(),
            scale: cal.scale,
            t_s: act.t_s(),
            alpha: act.alpha(),
            bins: args.bins,
        });
        rows.push(CalibrationReport {
            tensor: name,
            method: "minmax".to_string(),
            scale: f64::from(minmax_scale(&tensor, act)),
            t_s: act.t_s(),
            alpha: act.alpha(),
            bins: args.bins,
        });
    }
    let csv = {
        let mut s = String::from("tensor,method,scale,T_s,alpha,bins");
        for r in &rows {
            s.push_str(&format!(
                "\n{},{},{},{},{},{}",
                r.tensor, r.method, r.scale, r.t_s, r.alpha, r.bins
            ));
        }
        s
    };
    emit(&args.output, &serde_json::to_value(&rows)?, Some(csv))?;
    Ok(EXIT_OK)
}

fn tensor_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<i32, Error> {
    let (_, wt) = args.scheme.schemes()?;
    let cfg = GradCheckConfig {
        samples: args.samples,
        tolerance: args.tolerance,
        seed: args.seed,
        scheme: wt,
        sign_samples: args.sign_samples,
    };
    let report = run_gradcheck(&cfg);
    println!(
        "gradcheck: {} samples, {} failures at tolerance {:e}; \
         sign sweep {} points, {} violations (seed {})",
        report.samples,
        report.failures,
        report.tolerance,
        report.sign_samples,
        report.sign_violations,
        report.seed
    );
    emit_to_file_only(&args.output, &serde_json::to_value(&report)?)?;
    Ok(if report.passed() { EXIT_OK } else { EXIT_FAIL })
}

fn cmd_train_demo(args: TrainDemoArgs) -> Result<i32, Error> {
    if args.seeds == 0 {
        return Err(Error::Domain("--seeds must be >= 1".to_string()));
    }
    if args.seeds == 1 {
        eprintln!("warning: single seed; the ordering verdict is low-confidence");
    }
    let seeds: Vec<u64> = (0..args.seeds as u64).map(|i| args.seed + i).collect();
    let base = RsqConfig {
        beta: args.beta,
        lr0: args.lr,
        steps: args.steps,
        batch: args.batch,
        ..RsqConfig::toy(RsqMode::Rsq, args.seed)
    };
    let report = run_train_demo(&seeds, &base)?;

    for summary in &report.summaries {
        println!(
            "{:<9} median final_output_mse = {:.6e}  (per seed: {})",
            summary.mode,
            summary.median_mse,
            summary
                .seed_mses
                .iter()
                .map(|m| format!("{m:.4e}"))
                .collect::<Vec<_>>()
                .join(", ")
        );
    }
    println!(
        "ordering: median(rsq) <= median(rsq_nomse): {}",
        verdict(report.rsq_leq_nomse)
    );
    println!(
        "ordering: median(rsq_nomse) <= median(ptq): {}",
        verdict(report.nomse_leq_ptq)
    );
    println!(
        "rsq beat ptq strictly in {}/{} seeds",
        report.rsq_beats_ptq_seeds,
        report.seeds.len()
    );
    println!("deploy check on RSQ students: {}", verdict(report.deploy_passed));

    if let Some(dir) = &args.out_dir {
        std::fs::create_dir_all(dir)?;
        for run in &report.runs {
            let path = dir.join(format!("report_{}_{}.json", run.mode, run.seed));
            std::fs::write(&path, serde_json::to_vec_pretty(run)?)?;
        }
        // retrain the first-seed RSQ student for the checkpoint
        let teacher =
            winoq_core::train::toy_teacher(seeds[0].wrapping_mul(1000).wrapping_add(1));
        let cfg = RsqConfig {
            mode: RsqMode::Rsq,
            seed: seeds[0],
            ..base.clone()
        };
        let outcome = winoq_core::train::run_rsq_training(&teacher, &cfg)?;
        save_checkpoint(&outcome.student, &dir.join("rsq_student"))?;
        eprintln!("reports and checkpoint written to {}", dir.display());
    }

    let summary_json = json!({
        "seeds": report.seeds,
        "summaries": report.summaries,
        "rsq_leq_nomse": report.rsq_leq_nomse,
        "nomse_leq_ptq": report.nomse_leq_ptq,
        "rsq_beats_ptq_seeds": report.rsq_beats_ptq_seeds,
        "deploy_passed": report.deploy_passed,
        "low_confidence": report.low_confidence,
    });
    emit_to_file_only(&args.output, &summary_json)?;

    let ok = report.ordering_holds() && report.deploy_passed;
    Ok(if ok { EXIT_OK } else { EXIT_FAIL })
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "FAIL"
    }
}
