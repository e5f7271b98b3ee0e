use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use csdn::data::dataset::{load_sample, write_pgm, LABEL_FILE};
use csdn::data::{generate_dataset, load_dataset, save_dataset, Split, DEFAULT_SPACING_MM};
use csdn::gradcheck::suite::{run_suite, SuiteOptions};
use csdn::metrics::{evaluate, evaluate_oracle, fps_benchmark, score_pair};
use csdn::train::{Checkpoint, Trainer};
use csdn::{count_parameters, Csdn, NetworkConfig};

use crate::config::RunConfig;
use crate::overlay;
use crate::{CliError, CliResult};

/// Published figures for the full network, measured on a GPU with clinical
/// data. Shown next to local benchmarks for context only.
pub const PUBLISHED_PARAMS_K: usize = 1706;
pub const PUBLISHED_FPS: f64 = 151.0;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::data(format!("{}: {}", path.display(), e))
}

fn say(out: &mut dyn Write, text: impl AsRef<str>) -> CliResult<()> {
    writeln!(out, "{}", text.as_ref()).map_err(|e| CliError::data(format!("stdout: {}", e)))
}

fn load_net(path: &Path) -> CliResult<Csdn<f32>> {
    Ok(Checkpoint::<f32>::load(path)?.net)
}

#[derive(Args, Debug, Clone)]
pub struct GenDataArgs {
    /// Dataset root to create.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub n_train: usize,
    #[arg(long, default_value_t = 50)]
    pub n_val: usize,
    /// Image side in pixels; a multiple of 64.
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write into an existing non-empty directory.
    #[arg(long)]
    pub force: bool,
}

pub fn gen_data(a: &GenDataArgs, out: &mut dyn Write) -> CliResult<()> {
    csdn::data::phantom::check_size(a.size)?;
    if a.n_train + a.n_val == 0 {
        return Err(CliError::usage("nothing to generate: --n-train and --n-val are both 0"));
    }
    if !a.force {
        if let Ok(mut entries) = std::fs::read_dir(&a.out) {
            if entries.next().is_some() {
                return Err(CliError::usage(format!("{} exists and is not empty (use --force to write into it)", a.out.display())));
            }
        }
    }
    let ds = generate_dataset(a.n_train, a.n_val, a.size, a.seed)?;
    save_dataset(&a.out, &ds.manifest, &ds.samples)?;
    say(out, format!("wrote {} train + {} val samples ({}x{}) to {}", a.n_train, a.n_val, a.size, a.size, a.out.display()))
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// Run configuration (key = value lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset root; overrides `data_dir`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory; overrides `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

pub fn train(a: &TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let data = a.data.clone().or_else(|| cfg.data_dir.clone()).ok_or_else(|| CliError::usage("no dataset: pass --data or set data_dir"))?;
    let dir = a.out.clone().or_else(|| cfg.out_dir.clone()).ok_or_else(|| CliError::usage("no output directory: pass --out or set out_dir"))?;
    let text = cfg.to_text();
    log::info!("effective config:");
    for line in text.lines() {
        log::info!("  {}", line);
    }
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let cfg_path = dir.join("config.txt");
    std::fs::write(&cfg_path, &text).map_err(|e| io_err(&cfg_path, e))?;

    let ds = load_dataset(&data)?;
    let train_set = ds.split(Split::Train);
    let val_set = ds.split(Split::Val);
    if train_set.is_empty() {
        return Err(CliError::data(format!("{} has no training samples", data.display())));
    }
    cfg.network.check_input(ds.manifest.size, ds.manifest.size)?;

    let mut trainer = match &a.resume {
        Some(p) => {
            let ck = Checkpoint::<f32>::load(p)?;
            if ck.net.config() != &cfg.network {
                log::warn!("{} was trained with a different network config; keeping the checkpoint's", p.display());
            }
            log::info!("resuming after epoch {} (step {})", ck.epoch, ck.global_step);
            Trainer::resume(ck, cfg.train.clone(), cfg.loss.clone())?
        }
        None => Trainer::new(Csdn::new(cfg.network.clone(), cfg.train.seed)?, cfg.train.clone(), cfg.loss.clone())?,
    };
    say(out, format!("training {} parameters on {} samples ({} val)", trainer.net().num_parameters(), train_set.len(), val_set.len()))?;
    let start = Instant::now();
    let records = trainer.fit(&train_set, &val_set, Some(&dir))?;
    if records.is_empty() {
        return say(out, format!("nothing to do: {} epochs already complete", trainer.epoch()));
    }
    let last = records.last().expect("non-empty");
    let mut line = format!("finished epoch {} loss {:.5} in {:.1}s", last.epoch, last.loss, start.elapsed().as_secs_f64());
    if let Some(v) = &last.val {
        let hd = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{:.4}", v));
        line.push_str(&format!(
            "; val dsc lumen {:.4} eem {:.4}, hd95 lumen {} eem {} mm",
            v.dsc_lumen,
            v.dsc_eem,
            hd(v.hd95_lumen),
            hd(v.hd95_eem)
        ));
    }
    say(out, line)?;
    say(out, format!("checkpoints in {}", dir.display()))
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    /// Checkpoint or weight file; not needed with --oracle.
    #[arg(long, required_unless_present = "oracle")]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "val")]
    pub split: String,
    /// Per-sample CSV destination.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Score the ground truth against itself (harness self-test).
    #[arg(long)]
    pub oracle: bool,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
}

pub fn eval(a: &EvalArgs, out: &mut dyn Write) -> CliResult<()> {
    let split: Split = a.split.parse()?;
    let ds = load_dataset(&a.data)?;
    let samples = ds.split(split);
    if samples.is_empty() {
        return Err(CliError::data(format!("split `{}` of {} has no samples", split, a.data.display())));
    }
    let (report, label, params) = if a.oracle {
        (evaluate_oracle(&samples)?, "oracle".to_string(), None)
    } else {
        let path = a.weights.as_ref().ok_or_else(|| CliError::usage("--weights is required"))?;
        let net = load_net(path)?;
        net.config().check_input(ds.manifest.size, ds.manifest.size)?;
        (evaluate(&net, &samples, a.batch)?, "CSDN".to_string(), Some(net.num_parameters()))
    };
    if let Some(p) = &a.report {
        std::fs::write(p, report.to_csv()).map_err(|e| io_err(p, e))?;
    }
    write!(out, "{}", report.summary(&label, params)).map_err(|e| CliError::data(e.to_string()))?;
    Ok(())
}

#[derive(Args, Debug, Clone)]
pub struct InferArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// Sample directory holding frame1.pgm .. frame3.pgm (and optionally label.pgm).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Pixel size, used only for the metrics printed when a label exists.
    #[arg(long, default_value_t = DEFAULT_SPACING_MM)]
    pub spacing_mm: f64,
}

pub fn infer(a: &InferArgs, out: &mut dyn Write) -> CliResult<()> {
    let id = a.input.file_name().map_or_else(|| "input".to_string(), |n| n.to_string_lossy().into_owned());
    let sample = load_sample(&a.input, &id, a.spacing_mm, false)?;
    let has_truth = a.input.join(LABEL_FILE).exists();
    let shape = sample.frames.shape();
    let (h, w) = (shape.h, shape.w);
    let net = load_net(&a.weights)?;
    net.config().check_input(h, w)?;
    let pred = net.predict_labels(&sample.frames)?;

    std::fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let label_path = a.out.join("label.pgm");
    write_pgm(&label_path, w, h, pred.data())?;
    let middle = &sample.frames.data()[h * w..2 * h * w];
    let img = overlay::render(middle, w, h, &pred, has_truth.then_some(&sample.label))?;
    let overlay_path = a.out.join("overlay.ppm");
    img.save(&overlay_path)?;
    say(out, format!("wrote {} and {}", label_path.display(), overlay_path.display()))?;
    if has_truth {
        for m in score_pair(&id, &pred, &sample.label, a.spacing_mm)? {
            let hd = m.hd95_mm.map_or_else(|| "n/a".to_string(), |v| format!("{:.4}", v));
            say(out, format!("{}: dsc {:.4} iou {:.4} hd95 {} mm", m.region.name(), m.dsc, m.iou, hd))?;
        }
    }
    Ok(())
}

#[derive(Args, Debug, Clone)]
pub struct BenchArgs {
    /// Checkpoint or weight file; without it a freshly initialized network
    /// from --config (default: reference) is timed.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, conflicts_with = "weights")]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 896)]
    pub size: usize,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    /// Timed iterations; at least 10.
    #[arg(long, default_value_t = 20)]
    pub iters: usize,
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
}

pub const MIN_BENCH_ITERS: usize = 10;

pub fn bench(a: &BenchArgs, out: &mut dyn Write) -> CliResult<()> {
    if a.iters < MIN_BENCH_ITERS {
        return Err(CliError::usage(format!("--iters {} is below the minimum of {}", a.iters, MIN_BENCH_ITERS)));
    }
    if a.warmup < 1 || a.batch < 1 {
        return Err(CliError::usage("--warmup and --batch must be at least 1"));
    }
    let net = match (&a.weights, &a.config) {
        (Some(p), _) => load_net(p)?,
        (None, Some(c)) => Csdn::new(RunConfig::load(c)?.network, 0)?,
        (None, None) => Csdn::new(NetworkConfig::reference(), 0)?,
    };
    net.config().check_input(a.size, a.size)?;
    let params = count_parameters(net.config())?;
    let t = fps_benchmark(&net, (a.size, a.size), a.batch, a.warmup, a.iters)?;
    say(out, format!("params: {}", params))?;
    say(out, format!("input: {}x{}x{}x{}", a.batch, net.config().in_frames, a.size, a.size))?;
    say(out, format!("batch: {}", t.batch))?;
    say(out, format!("iters: {}", t.iters))?;
    say(out, format!("fps: {:.3}", t.fps))?;
    say(out, format!("latency_p50_ms: {:.3}", t.p50_ms))?;
    say(out, format!("latency_p95_ms: {:.3}", t.p95_ms))?;
    say(
        out,
        format!(
            "published reference (GPU, clinical data, not comparable): params {}K, fps {}",
            PUBLISHED_PARAMS_K, PUBLISHED_FPS
        ),
    )
}

#[derive(Args, Debug, Clone)]
pub struct GradcheckArgs {
    /// Run configuration; only the network keys matter. Default: tiny preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Input side of the end-to-end check.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> CliResult<()> {
    let net = match &a.config {
        Some(p) => RunConfig::load(p)?.network,
        None => NetworkConfig::tiny(),
    };
    if !(a.tol > 0.0) {
        return Err(CliError::usage("--tol must be positive"));
    }
    let start = Instant::now();
    let opts = SuiteOptions { tol: a.tol, size: a.size, seed: a.seed };
    let mut failed = Vec::new();
    let mut write_err = None;
    let results = run_suite(&net, &opts, |r| {
        let status = if r.report.passed { "ok" } else { "FAIL" };
        if !r.report.passed {
            failed.push(r.name.clone());
        }
        let line = format!("{:<28} max_rel_err {:.3e}  checked {:>6}  {}", r.name, r.report.max_rel_error, r.report.checked, status);
        if let Err(e) = say(out, line) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    say(out, format!("{} checks, {} failed, tol {:e}, {:.1}s", results.len(), failed.len(), a.tol, start.elapsed().as_secs_f64()))?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::numeric(format!("gradient check failed: {}", failed.join(", "))))
    }
}
