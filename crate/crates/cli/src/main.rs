//! `trapkit` command line: dataset synthesis, evaluation, benchmarking,
//! simulation, and chart rendering.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use trapkit::bench::{benchmark, compare_reference, AdapterConfig, FpsReference};
use trapkit::dataset::{load_detections, load_manifest, write_detections};
use trapkit::disturbance::{synthesize_testset, DisturbanceSpec, Effect, EffectParams};
use trapkit::metrics::{evaluate_with, ApMode, EvalOptions};
use trapkit::report::{
    comparison_text, read_eval_csv, write_eval_csv, write_latency_csv, write_throughput_csv,
    ModelSeries, ReportBundle,
};
use trapkit::trapsim::{
    run_simulation, write_log_csv, write_notifications, ScriptedSource, TrapConfig,
};

#[derive(Parser)]
#[command(name = "trapkit", version, about = "Detection evaluation and trap benchmarking toolkit")]
struct Cli {
    /// Seed for every randomized operation (synthesis, simulation).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Print progress details to stderr.
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a disturbance test set from an original dataset.
    Synth(SynthArgs),
    /// Score a detection file against ground-truth annotations.
    Eval(EvalArgs),
    /// Measure detector throughput through an adapter subprocess.
    Bench(BenchArgs),
    /// Run the solar trap simulator.
    Simulate(SimulateArgs),
    /// Render a grouped-bar SVG chart from evaluation CSVs.
    Report(ReportArgs),
    /// Act as a detector adapter that returns canned detections; useful for
    /// harness testing and demos.
    MockAdapter(MockAdapterArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum EffectArg {
    Blur,
    #[value(alias = "salt_pepper")]
    SaltPepper,
    Dust,
    Flare,
}

impl From<EffectArg> for Effect {
    fn from(e: EffectArg) -> Effect {
        match e {
            EffectArg::Blur => Effect::Blur,
            EffectArg::SaltPepper => Effect::SaltPepper,
            EffectArg::Dust => Effect::Dust,
            EffectArg::Flare => Effect::Flare,
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Manifest of the original dataset.
    #[arg(long)]
    manifest: PathBuf,
    /// Directory the manifest's image paths are relative to
    /// (default: the manifest's directory).
    #[arg(long)]
    images_root: Option<PathBuf>,
    /// Effect to apply.
    #[arg(long, value_enum)]
    effect: EffectArg,
    /// Output directory for transformed PNGs and the new manifest.
    #[arg(long)]
    out_dir: PathBuf,
    /// Box-blur kernel size (blur only).
    #[arg(long)]
    kernel_size: Option<u32>,
    /// Number of specks (salt-pepper only).
    #[arg(long)]
    speck_count: Option<u32>,
    /// Smallest speck radius in pixels (salt-pepper only).
    #[arg(long)]
    radius_min: Option<u32>,
    /// Largest speck radius in pixels (salt-pepper only).
    #[arg(long)]
    radius_max: Option<u32>,
    /// Fraction of the image to cover with particles (dust only).
    #[arg(long)]
    density: Option<f64>,
    /// Particle opacity (dust only).
    #[arg(long)]
    alpha: Option<f64>,
    /// Flare center, relative coordinates (flare only).
    #[arg(long, number_of_values = 2, value_names = ["X", "Y"])]
    flare_center: Option<Vec<f64>>,
    /// Peak flare brightness as a fraction of full scale (flare only).
    #[arg(long)]
    flare_intensity: Option<f64>,
    /// Flare radius as a fraction of the image diagonal (flare only).
    #[arg(long)]
    flare_radius: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Ground-truth manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Detection file (one JSON object per line).
    #[arg(long)]
    detections: PathBuf,
    /// IoU thresholds to evaluate at.
    #[arg(long, value_delimiter = ',', default_values_t = [0.25, 0.5, 0.75])]
    thresholds: Vec<f64>,
    /// AP definition: confidence-cutoff sweep or interpolated PR area.
    #[arg(long, value_enum, default_value_t = ApModeArg::Sweep)]
    ap_mode: ApModeArg,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ApModeArg {
    Sweep,
    Interpolated,
}

#[derive(Args)]
struct BenchArgs {
    /// Manifest of the images to run.
    #[arg(long)]
    manifest: PathBuf,
    /// Directory the manifest's image paths are relative to
    /// (default: the manifest's directory).
    #[arg(long)]
    images_root: Option<PathBuf>,
    /// Initial images timed but excluded from the mean.
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    /// Label for the hardware column of the report.
    #[arg(long, default_value = "local")]
    hardware: String,
    /// Throughput report CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Sidecar per-image latency CSV path.
    #[arg(long)]
    latencies: Option<PathBuf>,
    /// Persist the adapter's detections for later evaluation.
    #[arg(long)]
    detections_out: Option<PathBuf>,
    /// Reference FPS table to compare against.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Handshake timeout in seconds.
    #[arg(long, default_value_t = 30.0)]
    startup_timeout_s: f64,
    /// Per-image timeout in seconds.
    #[arg(long, default_value_t = 60.0)]
    image_timeout_s: f64,
    /// Adapter command and its arguments, after `--`.
    #[arg(last = true, required = true)]
    adapter: Vec<String>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Trap configuration JSON (defaults apply when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Simulated duration in hours.
    #[arg(long, default_value_t = 72.0)]
    horizon_hours: f64,
    /// Scripted detections: JSON list of {"at", "count"}.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Sensor log CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Notification sink file (one JSON object per line).
    #[arg(long)]
    notifications: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Evaluation CSVs, one per model; the file stem is the model label.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Output SVG path.
    #[arg(long)]
    out: PathBuf,
    /// Chart title (default: derived from the test set names).
    #[arg(long)]
    title: Option<String>,
}

#[derive(Args)]
struct MockAdapterArgs {
    /// Simulated inference time per image, in milliseconds.
    #[arg(long, default_value_t = 0)]
    latency_ms: u64,
    /// Model name reported in the handshake.
    #[arg(long, default_value = "mock")]
    model: String,
    /// Number of canned boxes returned per image.
    #[arg(long, default_value_t = 0)]
    boxes: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => cmd_synth(args, cli.seed, cli.verbose),
        Command::Eval(args) => cmd_eval(args, cli.verbose),
        Command::Bench(args) => cmd_bench(args, cli.verbose),
        Command::Simulate(args) => cmd_simulate(args, cli.seed, cli.verbose),
        Command::Report(args) => cmd_report(args),
        Command::MockAdapter(args) => cmd_mock_adapter(args),
    }
}

fn images_root_for(manifest: &Path, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| {
        manifest
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."))
    })
}

fn cmd_synth(args: SynthArgs, seed: u64, verbose: bool) -> Result<()> {
    let dataset = load_manifest(&args.manifest)?;
    let images_root = images_root_for(&args.manifest, args.images_root);

    let mut spec = DisturbanceSpec::default_for(args.effect.into(), seed);
    match &mut spec.params {
        EffectParams::Blur { kernel_size } => {
            if let Some(k) = args.kernel_size {
                *kernel_size = k;
            }
        }
        EffectParams::SaltPepper { speck_count, speck_radius_range } => {
            if let Some(n) = args.speck_count {
                *speck_count = n;
            }
            if let Some(lo) = args.radius_min {
                speck_radius_range.0 = lo;
            }
            if let Some(hi) = args.radius_max {
                speck_radius_range.1 = hi;
            }
        }
        EffectParams::Dust { particle_density, particle_alpha } => {
            if let Some(d) = args.density {
                *particle_density = d;
            }
            if let Some(a) = args.alpha {
                *particle_alpha = a;
            }
        }
        EffectParams::Flare { center, intensity, radius } => {
            if let Some(c) = &args.flare_center {
                *center = (c[0], c[1]);
            }
            if let Some(i) = args.flare_intensity {
                *intensity = i;
            }
            if let Some(r) = args.flare_radius {
                *radius = r;
            }
        }
    }

    let synthesized = synthesize_testset(&dataset, &images_root, &spec, &args.out_dir)?;
    if verbose {
        eprintln!(
            "synthesized {} images with effect {}",
            synthesized.images.len(),
            spec.effect()
        );
    }
    println!("{}", args.out_dir.join("manifest.json").display());
    Ok(())
}

fn cmd_eval(args: EvalArgs, verbose: bool) -> Result<()> {
    let dataset = load_manifest(&args.manifest)?;
    let detections = load_detections(&args.detections)?;
    let options = EvalOptions {
        ap_mode: match args.ap_mode {
            ApModeArg::Sweep => ApMode::ConfidenceSweep,
            ApModeArg::Interpolated => ApMode::InterpolatedPr,
        },
        ..EvalOptions::default()
    };
    let reports = evaluate_with(&dataset, &detections, &args.thresholds, &options)?;
    write_eval_csv(&reports, &args.out)?;
    if verbose {
        for r in &reports {
            eprintln!(
                "{} @ IoU {:.2}: tp={} fp={} fn={}",
                r.testset_name,
                r.iou_threshold,
                r.counts.true_positives,
                r.counts.false_positives,
                r.counts.false_negatives
            );
        }
    }
    println!("{}", args.out.display());
    Ok(())
}

fn cmd_bench(args: BenchArgs, verbose: bool) -> Result<()> {
    let dataset = load_manifest(&args.manifest)?;
    let images_root = images_root_for(&args.manifest, args.images_root);
    let mut cfg = AdapterConfig::new(args.adapter.clone());
    cfg.startup_timeout = Duration::from_secs_f64(args.startup_timeout_s);
    cfg.per_image_timeout = Duration::from_secs_f64(args.image_timeout_s);

    let run = benchmark(&dataset, &images_root, &cfg, args.warmup, &args.hardware)?;
    if let Some(failure) = &run.report.failure {
        eprintln!("warning: partial run, adapter failed: {failure}");
    }
    if verbose {
        eprintln!(
            "model {} over {} images (warmup {}): {:.3} fps",
            run.report.model_name, run.report.image_count, run.report.warmup_count, run.report.mean_fps
        );
    }
    write_throughput_csv(std::slice::from_ref(&run.report), &args.out)?;
    if let Some(path) = &args.latencies {
        write_latency_csv(&run.report, path)?;
    }
    if let Some(path) = &args.detections_out {
        write_detections(&run.detections, path)?;
    }
    if let Some(path) = &args.reference {
        let reference = FpsReference::load_csv(path)?;
        let row = compare_reference(&run.report, &reference)?;
        print!("{}", comparison_text(std::slice::from_ref(&row)));
    }
    println!("{}", args.out.display());
    Ok(())
}

fn cmd_simulate(args: SimulateArgs, seed: u64, verbose: bool) -> Result<()> {
    let cfg = match &args.config {
        Some(path) => TrapConfig::from_json_file(path)?,
        None => TrapConfig::default(),
    };
    let scenario = match &args.scenario {
        Some(path) => Some(ScriptedSource::from_json_file(path)?),
        None => None,
    };
    let run = run_simulation(&cfg, args.horizon_hours, seed, scenario)?;
    write_log_csv(&run.log, &args.out)?;
    if let Some(path) = &args.notifications {
        write_notifications(&run.notifications, path)?;
    }
    for problem in &run.errors {
        eprintln!("warning: {problem}");
    }
    if verbose {
        eprintln!(
            "{} log rows, {} notifications, {} mode transitions",
            run.log.len(),
            run.notifications.len(),
            run.events.len()
        );
    }
    println!("{}", args.out.display());
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let mut series = Vec::with_capacity(args.inputs.len());
    for path in &args.inputs {
        let rows = read_eval_csv(path)?;
        let model = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("model")
            .to_string();
        series.push(ModelSeries { model, rows });
    }
    let title = args.title.unwrap_or_else(|| {
        let mut names: Vec<String> = series
            .iter()
            .flat_map(|s| s.rows.iter().map(|r| r.testset_name.clone()))
            .collect();
        names.sort();
        names.dedup();
        format!("Evaluation results on {} testset", names.join(" + "))
    });
    let bundle = ReportBundle::new(series, vec![], vec![])?;
    let svg = bundle.render_chart(&title)?;
    std::fs::write(&args.out, svg)
        .with_context(|| format!("cannot write {}", args.out.display()))?;
    println!("{}", args.out.display());
    Ok(())
}

fn cmd_mock_adapter(args: MockAdapterArgs) -> Result<()> {
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for line in stdin.lock().lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let request: serde_json::Value =
            serde_json::from_str(&line).with_context(|| format!("bad request line: {line:?}"))?;
        if request.get("hello").is_some() {
            writeln!(out, "{}", serde_json::json!({ "ready": true, "model": args.model }))?;
            out.flush()?;
        } else if let Some(image) = request.get("image").and_then(|v| v.as_str()) {
            if args.latency_ms > 0 {
                std::thread::sleep(Duration::from_millis(args.latency_ms));
            }
            let image_id = Path::new(image)
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("unknown");
            let boxes: Vec<serde_json::Value> = (0..args.boxes)
                .map(|i| {
                    let offset = (i * 40) as f64;
                    serde_json::json!({
                        "x_min": 10.0 + offset,
                        "y_min": 10.0,
                        "x_max": 40.0 + offset,
                        "y_max": 40.0,
                        "confidence": 0.9,
                    })
                })
                .collect();
            writeln!(
                out,
                "{}",
                serde_json::json!({ "image_id": image_id, "boxes": boxes })
            )?;
            out.flush()?;
        } else if request.get("bye").is_some() {
            break;
        } else {
            bail!("unrecognized request: {line:?}");
        }
    }
    Ok(())
}
