//! `mpfc`: dataset generation, training, quantization, simulation and
//! benchmarking for the MPFC path-following controllers.
//!
//! Failures exit with status 1 and print one line to stderr:
//! `error: <kind>: <message>`.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mpfc_core::controllers::{DnnController, QdnnController, QdnnPController};
use mpfc_core::dataset::{compute_stats, generate_dataset};
use mpfc_core::mlp::{mse, train};
use mpfc_core::quant::quantize_model;
use mpfc_core::sim::{
    bench_states, compute_metrics, run_closed_loop, time_controller, tune_gains, write_path_csv, write_trace_csv, SimOutcome,
};
use mpfc_core::{
    Controller, ControllerKind, Ellipse, MlpArchitecture, MlpParams, MpfcController, PGains, PipelineConfig, QuantizedMlp,
    SimTrace, TrainingSet,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser, Debug)]
#[command(name = "mpfc", version, about = "Model predictive path following and its quantized network approximation")]
struct Cli {
    /// Plain-text key=value settings.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed for sampling, initialization and shuffling; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Corridor dataset labeled by MPFC.
    Dataset {
        #[command(subcommand)]
        action: DatasetAction,
    },
    /// Train the float network on a dataset.
    Train {
        /// Dataset CSV [default: <out>/dataset.csv].
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Quantize a trained network to int8.
    Quantize {
        /// Float model [default: <out>/model.txt].
        #[arg(long)]
        model: Option<PathBuf>,
        /// Dataset whose states calibrate activation ranges [default: <out>/dataset.csv].
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Closed-loop run with one controller; writes trace-<controller>.csv.
    Simulate(SimulateArgs),
    /// Per-step controller timing on states sampled near the path.
    Bench(ModelArgs),
    /// One lap with every controller, metrics table and optional gain tuning.
    Evaluate {
        #[command(flatten)]
        models: ModelArgs,
        /// Grid-search the compensator gains first and use the winner.
        #[arg(long)]
        tune_gains: bool,
    },
    /// Reference path samples.
    Path {
        #[command(subcommand)]
        action: PathAction,
    },
}

#[derive(Subcommand, Debug)]
enum DatasetAction {
    /// Writes dataset.csv and norm.csv.
    Generate,
}

#[derive(Subcommand, Debug)]
enum PathAction {
    /// Writes path.csv.
    Export,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// One of mpfc, dnn, qdnn, qdnn-p.
    #[arg(long, value_parser = parse_kind)]
    controller: ControllerKind,
    /// Laps to drive; overrides the config.
    #[arg(long)]
    laps: Option<usize>,
    /// Float model for dnn, quantized model for qdnn and qdnn-p
    /// [default: <out>/model.txt or <out>/model.qnt].
    #[arg(long)]
    model: Option<PathBuf>,
    /// Compensator gains `P_t,P_n`; overrides the config.
    #[arg(long, value_parser = parse_gains, allow_hyphen_values = true)]
    gains: Option<PGains>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Float model [default: <out>/model.txt].
    #[arg(long)]
    model: Option<PathBuf>,
    /// Quantized model [default: <out>/model.qnt].
    #[arg(long)]
    qmodel: Option<PathBuf>,
    /// Compensator gains `P_t,P_n`; overrides the config.
    #[arg(long, value_parser = parse_gains, allow_hyphen_values = true)]
    gains: Option<PGains>,
}

fn parse_kind(s: &str) -> std::result::Result<ControllerKind, String> {
    s.parse().map_err(|e: mpfc_core::Error| e.to_string())
}

fn parse_gains(s: &str) -> std::result::Result<PGains, String> {
    s.parse().map_err(|e: mpfc_core::Error| e.to_string())
}

struct Ctx {
    cfg: PipelineConfig,
    out: PathBuf,
    path: Ellipse,
}

impl Ctx {
    fn file(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn or_default(&self, given: &Option<PathBuf>, name: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.file(name))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error: usage: {first}");
            return ExitCode::FAILURE;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .chain()
                .find_map(|c| c.downcast_ref::<mpfc_core::Error>())
                .map_or("runtime", |c| c.kind());
            let msg = e.chain().map(|c| c.to_string()).collect::<Vec<_>>().join(": ");
            eprintln!("error: {kind}: {}", msg.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    fs::create_dir_all(&cli.out).with_context(|| format!("creating output directory {}", cli.out.display()))?;
    let ctx = Ctx {
        cfg,
        out: cli.out,
        path: Ellipse::default(),
    };
    match cli.command {
        Command::Dataset {
            action: DatasetAction::Generate,
        } => dataset_generate(&ctx),
        Command::Train { dataset } => train_cmd(&ctx, &ctx.or_default(&dataset, "dataset.csv")),
        Command::Quantize { model, dataset } => quantize_cmd(
            &ctx,
            &ctx.or_default(&model, "model.txt"),
            &ctx.or_default(&dataset, "dataset.csv"),
        ),
        Command::Simulate(args) => simulate_cmd(&ctx, &args),
        Command::Bench(models) => bench_cmd(&ctx, &models),
        Command::Evaluate { models, tune_gains } => evaluate_cmd(&ctx, &models, tune_gains),
        Command::Path {
            action: PathAction::Export,
        } => {
            let f = ctx.file("path.csv");
            write_path_csv(&ctx.path, ctx.cfg.path_samples, &f)?;
            println!("wrote {}", f.display());
            Ok(())
        }
    }
}

fn dataset_generate(ctx: &Ctx) -> Result<()> {
    let c = &ctx.cfg.corridor;
    eprintln!(
        "labeling {} corridor states ({} path points × {})",
        c.total_samples(),
        c.n_theta,
        c.points_per_corridor()
    );
    let ts = generate_dataset(&ctx.path, &ctx.cfg.ocp, c)?;
    let stats = compute_stats(&ts)?;
    let (data, norm) = (ctx.file("dataset.csv"), ctx.file("norm.csv"));
    ts.write_csv(&data)?;
    stats.write_csv(&norm)?;
    println!("samples={} failures={}", ts.len(), ts.failures);
    println!("wrote {} {}", data.display(), norm.display());
    Ok(())
}

fn train_cmd(ctx: &Ctx, dataset: &Path) -> Result<()> {
    let ts = TrainingSet::read_csv(dataset)?;
    let stats = compute_stats(&ts)?;
    let (x, y) = ts.normalized(&stats);
    let report = train(&x, &y, &MlpArchitecture::controller(), stats, &ctx.cfg.train)?;
    let model = ctx.file("model.txt");
    report.params.save(&model)?;

    let hist = ctx.file("train_history.csv");
    let mut text = String::from("epoch,validation_mse\n");
    for (i, v) in report.history.iter().enumerate() {
        text.push_str(&format!("{},{}\n", i + 1, v));
    }
    fs::write(&hist, text).with_context(|| format!("writing {}", hist.display()))?;
    println!(
        "params={} best_epoch={} train_mse={:.6e} validation_mse={:.6e}",
        report.params.param_count(),
        report.best_epoch,
        report.train_mse,
        report.validation_mse
    );
    println!("wrote {}", model.display());
    Ok(())
}

fn calibration_set(ctx: &Ctx, params: &MlpParams, dataset: &Path) -> Result<(Vec<[f64; 4]>, Vec<[f64; 3]>)> {
    let ts = TrainingSet::read_csv(dataset)?;
    let (x, y) = ts.normalized(&params.stats);
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(ctx.cfg.seed));
    idx.truncate(ctx.cfg.calibration_samples);
    Ok(idx.iter().map(|&i| (x[i], y[i])).unzip())
}

fn quantize_cmd(ctx: &Ctx, model: &Path, dataset: &Path) -> Result<()> {
    let params = MlpParams::load(model)?;
    let (cx, cy) = calibration_set(ctx, &params, dataset)?;
    let q = quantize_model(&params, &cx)?;
    let out = ctx.file("model.qnt");
    q.save(&out)?;
    let float_mse = mse(&params, &cx, &cy)?;
    let outputs: Vec<Vec<f64>> = cx.iter().map(|x| q.forward(x)).collect();
    let quant_mse = outputs
        .iter()
        .zip(&cy)
        .flat_map(|(o, t)| o.iter().zip(t).map(|(a, b)| (a - b) * (a - b)))
        .sum::<f64>()
        / (3 * cx.len()) as f64;
    println!(
        "calibration_samples={} float_mse={:.6e} quantized_mse={:.6e} weight_bytes={} bias_bytes={} file_bytes={}",
        cx.len(),
        float_mse,
        quant_mse,
        q.weight_bytes(),
        q.bias_bytes(),
        q.to_bytes().len()
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn build_controller(
    ctx: &Ctx,
    kind: ControllerKind,
    model: &Path,
    qmodel: &Path,
    gains: PGains,
) -> Result<Box<dyn Controller>> {
    let b = ctx.cfg.ocp.input_box;
    Ok(match kind {
        ControllerKind::Mpfc => Box::new(MpfcController::new(ctx.path, ctx.cfg.ocp.clone())?),
        ControllerKind::Dnn => Box::new(DnnController::new(MlpParams::load(model)?, b)?),
        ControllerKind::Qdnn => Box::new(QdnnController::new(QuantizedMlp::load(qmodel)?, b)?),
        ControllerKind::QdnnP => Box::new(QdnnPController::new(QuantizedMlp::load(qmodel)?, b, ctx.path, gains)?),
    })
}

fn describe(trace: &SimTrace) -> String {
    match trace.outcome {
        SimOutcome::Completed => "completed".into(),
        SimOutcome::BudgetExhausted => "budget-exhausted".into(),
        SimOutcome::Diverged { step, .. } => format!("diverged@{step}"),
        SimOutcome::ControllerFailure { step } => format!("controller-failure@{step}"),
    }
}

fn simulate_one(ctx: &Ctx, kind: ControllerKind, model: &Path, qmodel: &Path, gains: PGains, laps: usize) -> Result<SimTrace> {
    let mut controller = build_controller(ctx, kind, model, qmodel, gains)?;
    let cfg = mpfc_core::SimConfig { laps, ..ctx.cfg.sim };
    let trace = run_closed_loop(&ctx.path, controller.as_mut(), &cfg)?;
    let f = ctx.file(&format!("trace-{kind}.csv"));
    write_trace_csv(&trace, &f)?;
    Ok(trace)
}

fn simulate_cmd(ctx: &Ctx, args: &SimulateArgs) -> Result<()> {
    let model = ctx.or_default(&args.model, "model.txt");
    let qmodel = ctx.or_default(&args.model, "model.qnt");
    let gains = args.gains.unwrap_or(ctx.cfg.gains);
    let laps = args.laps.unwrap_or(ctx.cfg.sim.laps);
    let trace = simulate_one(ctx, args.controller, &model, &qmodel, gains, laps)?;
    let m = compute_metrics(&trace)?;
    println!(
        "controller={} outcome={} steps={} mean_error={:.6e} max_error={:.6e} step_time_mean={:.3e}",
        args.controller,
        describe(&trace),
        m.steps,
        m.mean_error,
        m.max_error,
        m.timing.mean
    );
    match trace.outcome {
        SimOutcome::Completed => Ok(()),
        SimOutcome::Diverged { step, error } => {
            bail!("simulation diverged at step {step}: error {error:.3e} m exceeds the limit")
        }
        SimOutcome::BudgetExhausted => bail!("step budget used up before {laps} lap(s) were completed"),
        SimOutcome::ControllerFailure { step } => bail!("controller returned a non-finite command at step {step}"),
    }
}

fn bench_cmd(ctx: &Ctx, models: &ModelArgs) -> Result<()> {
    let model = ctx.or_default(&models.model, "model.txt");
    let qmodel = ctx.or_default(&models.qmodel, "model.qnt");
    let gains = models.gains.unwrap_or(ctx.cfg.gains);
    let states = bench_states(&ctx.path, &ctx.cfg.corridor, ctx.cfg.bench_samples, ctx.cfg.seed);
    let mut rows = String::from("controller,samples,mean,std,worst\n");
    for kind in ControllerKind::ALL {
        let mut c = build_controller(ctx, kind, &model, &qmodel, gains)?;
        let t = time_controller(c.as_mut(), &states)?;
        println!(
            "controller={kind} samples={} mean={:.3e} std={:.3e} worst={:.3e}",
            t.samples, t.mean, t.std, t.worst
        );
        rows.push_str(&format!("{kind},{},{},{},{}\n", t.samples, t.mean, t.std, t.worst));
    }
    let f = ctx.file("bench.csv");
    fs::write(&f, rows).with_context(|| format!("writing {}", f.display()))?;
    println!("wrote {}", f.display());
    Ok(())
}

fn evaluate_cmd(ctx: &Ctx, models: &ModelArgs, tune: bool) -> Result<()> {
    let model = ctx.or_default(&models.model, "model.txt");
    let qmodel = ctx.or_default(&models.qmodel, "model.qnt");
    let mut gains = models.gains.unwrap_or(ctx.cfg.gains);
    if tune {
        let q = QuantizedMlp::load(&qmodel)?;
        let search = tune_gains(&ctx.path, &q, ctx.cfg.ocp.input_box, &ctx.cfg.sim, &PGains::search_grid())?;
        let mut text = String::from("p_t,p_n,max_error\n");
        for (g, e) in &search.results {
            let e = e.map_or("nan".to_string(), |v| v.to_string());
            text.push_str(&format!("{},{},{}\n", g.p_t, g.p_n, e));
        }
        let f = ctx.file("gain_search.csv");
        fs::write(&f, text).with_context(|| format!("writing {}", f.display()))?;
        gains = search.best;
        println!("gains={} max_error={:.6e}", gains, search.best_max_error);
    }
    let mut table = String::from("controller,outcome,steps,mean_error,max_error\n");
    let mut max_errors = Vec::new();
    for kind in ControllerKind::ALL {
        let trace = simulate_one(ctx, kind, &model, &qmodel, gains, ctx.cfg.sim.laps)?;
        let m = compute_metrics(&trace)?;
        let outcome = describe(&trace);
        println!(
            "controller={kind} outcome={outcome} steps={} mean_error={:.6e} max_error={:.6e}",
            m.steps, m.mean_error, m.max_error
        );
        table.push_str(&format!("{kind},{outcome},{},{},{}\n", m.steps, m.mean_error, m.max_error));
        max_errors.push(if trace.completed() { m.max_error } else { f64::INFINITY });
    }
    let f = ctx.file("metrics.csv");
    let mut file = fs::File::create(&f).with_context(|| format!("writing {}", f.display()))?;
    file.write_all(table.as_bytes())
        .with_context(|| format!("writing {}", f.display()))?;
    let ordered = max_errors[0] < max_errors[3] && max_errors[3] < max_errors[2];
    println!("ordering mpfc<qdnn-p<qdnn: {}", if ordered { "holds" } else { "violated" });
    println!("wrote {}", f.display());
    Ok(())
}
