use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use freqtrack::eval::{
    evaluate_frames, read_predictions, track_sequence, train_toy, write_curves_csv, write_predictions, FreqTracker,
    Report, TrainConfig,
};
use freqtrack::event::{event_voxel, load_sequence, parse_events, synth_sequence, write_sequence, Manifest, SimConfig};
use freqtrack::gradcheck::GradCheckConfig;
use freqtrack::gradsuite::{run_suite, SuiteModule};
use freqtrack::model::{FreqTrack, ModelConfig};

#[derive(Parser)]
#[command(name = "freqtrack", version, about = "Frequency-aware RGB-event tracking toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write per-frame event voxels as raw little-endian float64 arrays.
    Voxelize {
        /// Event CSV; overrides the manifest's event file.
        #[arg(long)]
        events: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 4)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a prediction CSV against the manifest's ground truth.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a trained model over a sequence.
    Track {
        /// Model configuration JSON.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the toy model on a synthetic sequence.
    TrainToy {
        /// Training configuration JSON; the built-in toy setup when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        steps: Option<usize>,
        /// Output directory for the checkpoint, model config and loss history.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value = "all")]
        module: SuiteModule,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Flatten report curves into CSV.
    PlotData {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic sequence directory with a manifest.
    Synth {
        /// Simulator configuration JSON; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse().cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Voxelize {
            events,
            manifest,
            bins,
            out,
        } => voxelize(events.as_deref(), &manifest, bins, &out),
        Command::Eval { manifest, pred, out } => eval(&manifest, &pred, &out),
        Command::Track {
            config,
            checkpoint,
            manifest,
            out,
        } => track(&config, &checkpoint, &manifest, &out),
        Command::TrainToy {
            config,
            seed,
            steps,
            out,
        } => train(config.as_deref(), seed, steps, &out),
        Command::Gradcheck { module, tol } => gradcheck(module, tol),
        Command::PlotData { report, out } => {
            let r = Report::read(&report)?;
            write_curves_csv(&out, &r)?;
            Ok(true)
        }
        Command::Synth { config, seed, out } => {
            let cfg: SimConfig = match config {
                Some(p) => serde_json::from_str(&fs::read_to_string(&p).with_context(|| p.display().to_string())?)?,
                None => SimConfig::default(),
            };
            let seq = synth_sequence(&cfg, seed)?;
            let path = write_sequence(&out, &seq)?;
            println!("{} frames, {} events -> {}", seq.frames.len(), seq.events.len(), path.display());
            Ok(true)
        }
    }
}

fn voxelize(events: Option<&Path>, manifest: &Path, bins: usize, out: &Path) -> Result<bool> {
    let m = Manifest::read(manifest)?;
    let ev_path = match events {
        Some(p) => p.to_path_buf(),
        None => manifest.parent().unwrap_or(Path::new("")).join(&m.events),
    };
    let stream = parse_events(&ev_path, m.sensor)?;
    fs::create_dir_all(out).with_context(|| out.display().to_string())?;
    let mut frames = Vec::new();
    for f in m.frame_index() {
        let voxel = event_voxel(&stream, &f, m.sensor, bins)?;
        let name = format!("frame_{:06}.f64", f.frame_id);
        let bytes: Vec<u8> = voxel.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(out.join(&name), bytes)?;
        frames.push(json!({ "frame_id": f.frame_id, "t_rgb": f.t_rgb, "file": name }));
    }
    let desc = json!({
        "dtype": "float64",
        "byte_order": "little",
        "layout": "row-major",
        "shape": [bins, m.sensor.height, m.sensor.width],
        "axes": ["bin", "y", "x"],
        "frames": frames,
    });
    fs::write(out.join("shape.json"), serde_json::to_string_pretty(&desc)?)?;
    println!("{} frames of shape [{bins}, {}, {}]", frames.len(), m.sensor.height, m.sensor.width);
    Ok(true)
}

fn eval(manifest: &Path, pred: &Path, out: &Path) -> Result<bool> {
    let m = Manifest::read(manifest)?;
    let preds = read_predictions(pred)?;
    let result = evaluate_frames(&m.frame_index(), &preds)?;
    let report = Report::from_result(&result)?;
    report.write(out)?;
    println!(
        "frames {}  SR AUC {:.4}  SR@0.5 {:.4}  PR@20 {:.4}",
        report.frames, report.sr_auc, report.sr_05, report.pr_20
    );
    Ok(true)
}

fn track(config: &Path, checkpoint: &Path, manifest: &Path, out: &Path) -> Result<bool> {
    let cfg = ModelConfig::read(config)?;
    let model = FreqTrack::load(&cfg, checkpoint)?;
    let seq = load_sequence(manifest)?;
    let mut tracker = FreqTracker::new(&model);
    let (preds, result) = track_sequence(&mut tracker, &seq)?;
    write_predictions(out, &preds)?;
    println!(
        "{} predictions  SR AUC {:.4}  PR@20 {:.4}",
        preds.len(),
        result.sr_auc(),
        result.pr_at(freqtrack::eval::PR_RADIUS)?
    );
    Ok(true)
}

fn train(config: Option<&Path>, seed: u64, steps: Option<usize>, out: &Path) -> Result<bool> {
    let mut cfg = match config {
        Some(p) => TrainConfig::read(p)?,
        None => TrainConfig::default(),
    };
    if let Some(k) = steps {
        cfg.steps = k;
    }
    fs::create_dir_all(out).with_context(|| out.display().to_string())?;
    let start = Instant::now();
    let (model, report) = train_toy(&cfg, seed)?;
    model.save(&out.join("checkpoint.json"))?;
    model.cfg.write(&out.join("model.json"))?;
    report.write_csv(&out.join("history.csv"))?;
    let last = report.history.last().map_or(f64::NAN, |h| h.total);
    println!(
        "{} steps in {:.1}s: loss {:.4} -> {:.4} ({:.1}% of initial)",
        report.history.len(),
        start.elapsed().as_secs_f64(),
        report.initial(),
        last,
        100.0 * last / report.initial()
    );
    Ok(true)
}

fn gradcheck(module: SuiteModule, tol: f64) -> Result<bool> {
    if !(tol > 0.0) {
        bail!("tolerance must be positive");
    }
    let cfg = GradCheckConfig {
        tol,
        ..GradCheckConfig::default()
    };
    let mut ok = true;
    for entry in run_suite(module, &cfg)? {
        println!("{:<16} {}", entry.name, entry.report);
        ok &= entry.report.passed;
    }
    Ok(ok)
}
