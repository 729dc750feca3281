//! `oft`: synthetic data, training, inference, evaluation and diagnostics.

use std::fs;
use std::io::{self, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};

use oft::config::RunConfig;
use oft::data::{ground_truth, list_frames, load_dataset, load_frame};
use oft::eval::{average_precision, Difficulty, EvalConfig, Frame, Metric};
use oft::gradcheck::run_suite;
use oft::image::{save_pnm, Image};
use oft::kitti::{parse_detections, parse_labels, write_detections};
use oft::network::Model;
use oft::par;
use oft::synth::{generate_corpus, generate_scenes};
use oft::targets::LossComponents;
use oft::train::{evaluate, train};

#[derive(Parser)]
#[command(name = "oft", version, about = "Monocular 3D detection with the orthographic feature transform")]
struct Cli {
    /// Worker threads for the data-parallel kernels; 1 makes runs bit-reproducible.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    /// Run configuration (JSON); absent keys take their defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Print the effective configuration with all defaults filled in and exit.
    #[arg(long)]
    dump_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic corpus in KITTI layout.
    SynthGen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        count: usize,
    },
    /// Train on a KITTI-layout corpus; per-epoch mean losses go to a CSV stream.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Weight file to write.
        #[arg(long)]
        out: PathBuf,
        /// Loss CSV destination; standard output when omitted.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Write 16-field KITTI detections for every frame of a corpus.
    Infer {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score detection files against label files; prints AP and the PR curve as CSV.
    Eval {
        /// Directory of prediction files, or a corpus root holding `label_2`.
        #[arg(long)]
        pred: PathBuf,
        /// Directory of label files, or a corpus root holding `label_2`.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        iou: Option<f64>,
        #[arg(long)]
        class: Option<String>,
        #[arg(long, value_enum)]
        metric: Option<MetricArg>,
        #[arg(long, value_enum)]
        difficulty: Option<DifficultyArg>,
    },
    /// Save one frame's predicted confidence map as an 8-bit PGM, row 0 nearest.
    RenderBev {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        frame: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        class: Option<String>,
    },
    /// Finite-difference gradient checks of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train each topdown depth on the same synthetic scenes and tabulate AP.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "0,8,16")]
        layers: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        scenes: usize,
        /// Step budget per depth; the configured training length when omitted.
        #[arg(long)]
        steps: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Bev,
    #[value(name = "3d")]
    ThreeD,
}

#[derive(Clone, Copy, ValueEnum)]
enum DifficultyArg {
    Easy,
    Moderate,
    Hard,
}

/// Failure classes, one per non-zero exit code.
enum Failure {
    Usage(String),
    Data(anyhow::Error),
    Check(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

impl From<oft::error::Error> for Failure {
    fn from(e: oft::error::Error) -> Self {
        Failure::Data(e.into())
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Data(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    let outcome = match cli.threads {
        Some(0) => Err(Failure::Usage("--threads must be at least 1".into())),
        Some(n) => par::with_threads(n, || run(&cli)).unwrap_or_else(|e| Err(e.into())),
        None => run(&cli),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(3)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        Some(p) => Ok(RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?),
        None => Ok(RunConfig::default()),
    }
}

fn run(cli: &Cli) -> Outcome {
    let cfg = load_config(cli.config.as_deref())?;
    if cli.dump_config {
        println!("{}", cfg.to_json());
        return Ok(());
    }
    let Some(command) = &cli.command else {
        return Err(Failure::Usage("no subcommand given; see --help".into()));
    };
    match command {
        Command::SynthGen { out, count } => synth_gen(&cfg, out, *count),
        Command::Train { data, out, log } => train_cmd(&cfg, data, out, log.as_deref()),
        Command::Infer { weights, data, out } => infer(&cfg, weights, data, out),
        Command::Eval {
            pred,
            gt,
            iou,
            class,
            metric,
            difficulty,
        } => eval_cmd(&cfg, pred, gt, *iou, class.as_deref(), *metric, *difficulty),
        Command::RenderBev {
            weights,
            data,
            frame,
            out,
            class,
        } => render_bev(&cfg, weights, data, frame, out, class.as_deref()),
        Command::Gradcheck { seed } => gradcheck(*seed),
        Command::Ablate { layers, scenes, steps } => ablate(&cfg, layers, *scenes, *steps),
    }
}

fn class_index(cfg: &RunConfig, name: Option<&str>) -> Result<usize, Failure> {
    match name {
        None => Ok(0),
        Some(n) => cfg
            .model
            .classes
            .class_id(n)
            .ok_or_else(|| Failure::Usage(format!("unknown class {n:?}; configured: {}", cfg.model.classes.names.join(", ")))),
    }
}

fn load_model(cfg: &RunConfig, weights: &Path) -> Result<Model<f32>, Failure> {
    Ok(Model::load(cfg.model.clone(), weights).with_context(|| format!("loading weights {}", weights.display()))?)
}

fn synth_gen(cfg: &RunConfig, out: &Path, count: usize) -> Outcome {
    let samples = generate_corpus(&cfg.scene, &cfg.model.classes, count, out)?;
    let objects: usize = samples.iter().map(|s| s.objects.len()).sum();
    log::info!("wrote {count} frames with {objects} objects to {}", out.display());
    Ok(())
}

fn csv_row(out: &mut dyn Write, epoch: usize, steps: usize, sum: &LossComponents) -> io::Result<()> {
    let n = steps.max(1) as f64;
    writeln!(
        out,
        "{epoch},{steps},{:.6},{:.6},{:.6},{:.6},{:.6}",
        sum.total() / n,
        sum.confidence / n,
        sum.position / n,
        sum.dimension / n,
        sum.angle / n
    )
}

fn train_cmd(cfg: &RunConfig, data: &Path, out: &Path, log_path: Option<&Path>) -> Outcome {
    let samples = load_dataset(data, &cfg.model.classes)?;
    if samples.is_empty() {
        return Err(Failure::Data(anyhow!("no frames under {}", data.join("image_2").display())));
    }
    log::info!("training on {} frames for {} steps", samples.len(), cfg.train.steps);
    let mut sink: Box<dyn Write> = match log_path {
        Some(p) => Box::new(io::BufWriter::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(io::stdout().lock()),
    };
    writeln!(sink, "epoch,steps,total,confidence,position,dimension,angle")?;
    let mut model = Model::<f32>::new(cfg.model.clone())?;
    let every = cfg.train.log_every;
    let (mut epoch, mut steps, mut sum) = (0, 0, LossComponents::default());
    train(&mut model, &samples, &cfg.train, &cfg.augment, &cfg.loss, |r, _| {
        if r.epoch != epoch {
            if (epoch + 1) % every == 0 {
                csv_row(&mut *sink, epoch, steps, &sum)?;
            }
            (epoch, steps, sum) = (r.epoch, 0, LossComponents::default());
        }
        steps += 1;
        sum.add(&r.loss);
        Ok(ControlFlow::Continue(()))
    })?;
    if steps > 0 {
        csv_row(&mut *sink, epoch, steps, &sum)?;
    }
    sink.flush()?;
    model.save(out)?;
    log::info!("saved weights to {}", out.display());
    Ok(())
}

fn infer(cfg: &RunConfig, weights: &Path, data: &Path, out: &Path) -> Outcome {
    let model = load_model(cfg, weights)?;
    fs::create_dir_all(out)?;
    let ids = list_frames(data)?;
    let mut total = 0;
    for id in &ids {
        let sample = load_frame(data, id, &cfg.model.classes).with_context(|| format!("frame {id}"))?;
        let dets = model.detect(&sample, &cfg.decode).with_context(|| format!("frame {id}"))?;
        total += dets.len();
        let text = write_detections(&dets, &cfg.model.classes, Some(&sample.intrinsics));
        fs::write(out.join(format!("{id}.txt")), text)?;
    }
    log::info!("wrote {total} detections for {} frames to {}", ids.len(), out.display());
    Ok(())
}

/// `dir/label_2` when it exists, else `dir`.
fn label_dir(dir: &Path) -> PathBuf {
    let nested = dir.join("label_2");
    if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

fn text_stems(dir: &Path) -> Result<Vec<String>, Failure> {
    let mut ids: Vec<String> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .filter_map(|p| p.file_stem().and_then(|s| s.to_str()).map(str::to_string))
        .collect();
    ids.sort();
    Ok(ids)
}

fn eval_cmd(
    cfg: &RunConfig,
    pred: &Path,
    gt: &Path,
    iou: Option<f64>,
    class: Option<&str>,
    metric: Option<MetricArg>,
    difficulty: Option<DifficultyArg>,
) -> Outcome {
    let stats = &cfg.model.classes;
    let mut ecfg: EvalConfig = cfg.eval.clone();
    if let Some(t) = iou {
        if !(t > 0.0 && t <= 1.0) {
            return Err(Failure::Usage(format!("--iou must be in (0, 1], got {t}")));
        }
        ecfg.iou_threshold = t;
    }
    if class.is_some() {
        ecfg.class_id = Some(class_index(cfg, class)?);
    }
    if let Some(m) = metric {
        ecfg.metric = match m {
            MetricArg::Bev => Metric::Bev,
            MetricArg::ThreeD => Metric::ThreeD,
        };
    }
    if let Some(d) = difficulty {
        ecfg.difficulty = Some(match d {
            DifficultyArg::Easy => Difficulty::Easy,
            DifficultyArg::Moderate => Difficulty::Moderate,
            DifficultyArg::Hard => Difficulty::Hard,
        });
    }
    let (gt_dir, pred_dir) = (label_dir(gt), label_dir(pred));
    let mut frames = Vec::new();
    for id in text_stems(&gt_dir)? {
        let read = |p: PathBuf| fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()));
        let records = parse_labels(&read(gt_dir.join(format!("{id}.txt")))?).with_context(|| format!("labels of {id}"))?;
        let pred_path = pred_dir.join(format!("{id}.txt"));
        let predictions = if pred_path.exists() {
            parse_detections(&read(pred_path)?, stats).with_context(|| format!("detections of {id}"))?
        } else {
            Vec::new()
        };
        frames.push(Frame {
            predictions,
            ground_truth: ground_truth(&records, stats, ecfg.difficulty),
        });
    }
    let ap = average_precision(&frames, &ecfg)?;
    let class_name = ecfg.class_id.map_or("all".to_string(), |c| stats.names[c].clone());
    let metric_name = match ecfg.metric {
        Metric::Bev => "bev",
        Metric::ThreeD => "3d",
    };
    let mut out = io::stdout().lock();
    writeln!(out, "metric,iou,class,frames,gt,ap")?;
    writeln!(out, "{metric_name},{},{class_name},{},{},{:.6}", ecfg.iou_threshold, frames.len(), ap.gt_count, ap.ap)?;
    writeln!(out)?;
    writeln!(out, "score,recall,precision")?;
    for (score, recall, precision) in &ap.curve {
        writeln!(out, "{score:.6},{recall:.6},{precision:.6}")?;
    }
    Ok(())
}

fn render_bev(cfg: &RunConfig, weights: &Path, data: &Path, frame: &str, out: &Path, class: Option<&str>) -> Outcome {
    let k = class_index(cfg, class)?;
    let model = load_model(cfg, weights)?;
    let sample = load_frame(data, frame, &cfg.model.classes).with_context(|| format!("frame {frame}"))?;
    let maps = model.predict(&sample.image.to_tensor(), &sample.intrinsics)?;
    let (_, nz, nx) = maps.dims()?;
    let mut img = Image::new(nx, nz, 1);
    for iz in 0..nz {
        for ix in 0..nx {
            img.pixel_mut(ix, iz)[0] = maps.confidence.at(&[k, iz, ix]);
        }
    }
    save_pnm(out, &img)?;
    log::info!("wrote {nx}x{nz} confidence map to {}", out.display());
    Ok(())
}

fn gradcheck(seed: u64) -> Outcome {
    let results = run_suite(seed)?;
    let mut out = io::stdout().lock();
    writeln!(out, "check,relative_error,tolerance,coordinates,status")?;
    for r in &results {
        let status = if r.passed() { "pass" } else { "FAIL" };
        writeln!(out, "{},{:.3e},{:.0e},{},{status}", r.name, r.rel_error, r.tolerance, r.coordinates)?;
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient mismatch in {}", failed.join(", "))))
    }
}

fn ablate(cfg: &RunConfig, layers: &[usize], scenes: usize, steps: Option<usize>) -> Outcome {
    if scenes == 0 {
        return Err(Failure::Usage("--scenes must be positive".into()));
    }
    let samples = generate_scenes(&cfg.scene, &cfg.model.classes, scenes)?;
    let mut out = io::stdout().lock();
    writeln!(out, "layers,steps,final_loss,ap")?;
    for &l in layers {
        let mut run = cfg.clone();
        run.model.topdown_layers = l;
        if let Some(s) = steps {
            run.train.steps = s;
        }
        run.validate().map_err(|e| Failure::Usage(e.to_string()))?;
        let mut model = Model::<f32>::new(run.model.clone())?;
        let mut last = LossComponents::default();
        train(&mut model, &samples, &run.train, &run.augment, &run.loss, |r, _| {
            last = r.loss;
            Ok(ControlFlow::Continue(()))
        })?;
        let ap = evaluate(&model, &samples, &run.decode, &run.eval)?;
        writeln!(out, "{l},{},{:.3},{:.6}", run.train.steps, last.total(), ap.ap)?;
        out.flush()?;
    }
    Ok(())
}
