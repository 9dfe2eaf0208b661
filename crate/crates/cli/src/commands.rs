//! Subcommands and exit-code mapping.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use step_core::model::Checkpoint;
use step_core::simulator::Scene;

use crate::config::{ConfigError, ExperimentConfig, ModelKind};
use crate::io::{read_json, read_jsonl, write_atomic, write_json, write_jsonl, write_manifest};
use crate::pipeline::{
    detect_all, detection_records, evaluate, group_records, initial_boxes, link_all, make_scenes,
    train, DetectionRecord, EvalSummary, Models, ScenesFile, TrainLogRow, TubeRecord,
    SCENES_VERSION,
};
use crate::svg::{chart_for, parse_csv};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const SCENES_FILE: &str = "scenes.json";
pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const TUBES_FILE: &str = "tubes.jsonl";
pub const CHECKPOINT_FILE: &str = "heads.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const FRAME_AP_FILE: &str = "frame_ap.csv";
pub const VIDEO_AP_FILE: &str = "video_ap.csv";
pub const STEPS_FILE: &str = "steps.csv";
pub const MIUT_FILE: &str = "miut.csv";
pub const HISTOGRAM_FILE: &str = "iou_histogram.csv";

#[derive(Debug, Parser)]
#[command(name = "step", version, about = "Progressive spatio-temporal action detection on synthetic scenes")]
pub struct Cli {
    /// Experiment configuration (TOML). Defaults apply to missing keys.
    #[arg(short, long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Override a configuration key, e.g. `--set step.clip_len=12`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,

    /// Output directory [default: config output_dir, then $STEP_OUTPUT_DIR, then ./step-out].
    #[arg(short, long, global = true, value_name = "DIR")]
    pub output: Option<PathBuf>,

    /// Global seed (overrides the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Upper bound on worker threads for per-video parallelism.
    #[arg(short, long, global = true)]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic scenes and write scenes.json.
    Simulate,
    /// Run progressive detection over every clip and write detections.jsonl.
    Detect {
        /// Scenes file [default: <output>/scenes.json, or generated from the config].
        #[arg(long)]
        scenes: Option<PathBuf>,
        /// Write only the last step's records.
        #[arg(long)]
        final_only: bool,
    },
    /// Jointly train the per-step linear heads; writes heads.json and train_log.csv.
    Train {
        #[arg(long)]
        scenes: Option<PathBuf>,
    },
    /// Link the last step's detections into trimmed tubes; writes tubes.jsonl.
    Link {
        #[arg(long)]
        detections: Option<PathBuf>,
    },
    /// Frame- and video-level mAP, MIUT and IoU histograms.
    Eval {
        #[arg(long)]
        scenes: Option<PathBuf>,
        #[arg(long)]
        detections: Option<PathBuf>,
        /// Tubes for video-mAP [default: <output>/tubes.jsonl when present].
        #[arg(long)]
        tubes: Option<PathBuf>,
    },
    /// Render CSV tables as SVG charts next to them.
    Report {
        /// CSV files [default: every *.csv in the output directory].
        inputs: Vec<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Detect { .. } => "detect",
            Command::Train { .. } => "train",
            Command::Link { .. } => "link",
            Command::Eval { .. } => "eval",
            Command::Report { .. } => "report",
        }
    }
}

/// Parses arguments, runs the command and maps the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                EXIT_USAGE
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

pub fn resolve_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut overrides = cli.set.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    ExperimentConfig::load(cli.config.as_deref(), &overrides)
}

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = resolve_config(cli)?;
    let out = cfg.resolve_output_dir(cli.output.as_deref());
    let pool = match cli.jobs {
        Some(0) => return Err(ConfigError("--jobs must be >= 1".into()).into()),
        Some(n) => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .context("building the worker pool")?,
        ),
        None => None,
    };
    let go = || match &cli.command {
        Command::Simulate => simulate(&cfg, &out),
        Command::Detect { scenes, final_only } => detect(&cfg, &out, scenes.as_deref(), *final_only),
        Command::Train { scenes } => train_cmd(&cfg, &out, scenes.as_deref()),
        Command::Link { detections } => link(&cfg, &out, detections.as_deref()),
        Command::Eval {
            scenes,
            detections,
            tubes,
        } => eval(&cfg, &out, scenes.as_deref(), detections.as_deref(), tubes.as_deref()),
        Command::Report { inputs } => report(&cfg, &out, inputs),
    };
    let (inputs, outputs) = match pool {
        Some(p) => p.install(go)?,
        None => go()?,
    };
    write_manifest(&out, cli.command.name(), &cfg, &inputs, &outputs)?;
    Ok(())
}

type Touched = (Vec<PathBuf>, Vec<PathBuf>);

fn required(path: &Path, what: &str) -> anyhow::Result<()> {
    if !path.is_file() {
        bail!("{what} {} does not exist", path.display());
    }
    Ok(())
}

/// Scenes from an explicit file, else `<out>/scenes.json`, else generated.
fn load_scenes(
    cfg: &ExperimentConfig,
    out: &Path,
    explicit: Option<&Path>,
    inputs: &mut Vec<PathBuf>,
) -> anyhow::Result<Vec<Scene>> {
    let path = match explicit {
        Some(p) => {
            required(p, "scenes file")?;
            Some(p.to_path_buf())
        }
        None => Some(out.join(SCENES_FILE)).filter(|p| p.is_file()),
    };
    let scenes = match path {
        Some(p) => {
            let file: ScenesFile = read_json(&p)?;
            if file.version != SCENES_VERSION {
                bail!("{} has version {}, expected {SCENES_VERSION}", p.display(), file.version);
            }
            inputs.push(p);
            file.videos
        }
        None => make_scenes(&cfg.scene, cfg.num_videos)?,
    };
    if scenes.is_empty() {
        bail!("no scenes to process");
    }
    if let Some(s) = scenes.iter().find(|s| s.spec.num_classes != cfg.scene.num_classes) {
        bail!(
            "scenes have {} classes but the config has {}",
            s.spec.num_classes,
            cfg.scene.num_classes
        );
    }
    Ok(scenes)
}

fn simulate(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<Touched> {
    let scenes = make_scenes(&cfg.scene, cfg.num_videos)?;
    let path = out.join(SCENES_FILE);
    write_json(
        &path,
        &ScenesFile {
            version: SCENES_VERSION,
            videos: scenes,
        },
    )?;
    println!("wrote {} scenes to {}", cfg.num_videos, path.display());
    Ok((vec![], vec![path]))
}

fn checkpoint_path(cfg: &ExperimentConfig, out: &Path) -> PathBuf {
    cfg.model.checkpoint.clone().unwrap_or_else(|| out.join(CHECKPOINT_FILE))
}

fn detect(
    cfg: &ExperimentConfig,
    out: &Path,
    scenes: Option<&Path>,
    final_only: bool,
) -> anyhow::Result<Touched> {
    let mut inputs = Vec::new();
    let scenes = load_scenes(cfg, out, scenes, &mut inputs)?;
    let checkpoint = match cfg.model.kind {
        ModelKind::Oracle => None,
        ModelKind::Linear => {
            let p = checkpoint_path(cfg, out);
            required(&p, "checkpoint")?;
            let ck: Checkpoint = read_json(&p)?;
            ck.validate()?;
            inputs.push(p);
            Some(ck)
        }
    };
    let models = Models::from_config(cfg, checkpoint.as_ref())?;
    let boxes = initial_boxes(cfg)?;
    let results = detect_all(&scenes, &boxes, &cfg.step, &models, cfg.seed)?;
    let records: Vec<DetectionRecord> = results
        .iter()
        .enumerate()
        .flat_map(|(v, clips)| detection_records(v, clips, !final_only))
        .collect();
    let path = out.join(DETECTIONS_FILE);
    write_jsonl(&path, &records)?;
    println!("wrote {} detection records to {}", records.len(), path.display());
    Ok((inputs, vec![path]))
}

fn train_cmd(cfg: &ExperimentConfig, out: &Path, scenes: Option<&Path>) -> anyhow::Result<Touched> {
    let mut inputs = Vec::new();
    let scenes = load_scenes(cfg, out, scenes, &mut inputs)?;
    let steps = cfg.step.max_steps;
    let mut log = String::from("iteration");
    for s in 1..=steps {
        let _ = write!(log, ",cls_{s},loc_{s},anticipation_{s}");
    }
    log.push_str(",total\n");
    let heads = train(cfg, &scenes, |row: &TrainLogRow| {
        let _ = write!(log, "{}", row.iteration);
        for r in &row.report.per_step {
            let _ = write!(log, ",{},{},{}", r.cls, r.loc, r.anticipation);
        }
        let _ = writeln!(log, ",{}", row.report.total);
    })?;
    let ck_path = checkpoint_path(cfg, out);
    write_json(&ck_path, &Checkpoint::new(heads))?;
    let log_path = out.join(TRAIN_LOG_FILE);
    write_atomic(&log_path, log.as_bytes())?;
    println!("wrote {} and {}", ck_path.display(), log_path.display());
    Ok((inputs, vec![ck_path, log_path]))
}

fn link(cfg: &ExperimentConfig, out: &Path, detections: Option<&Path>) -> anyhow::Result<Touched> {
    let path = detections.map_or_else(|| out.join(DETECTIONS_FILE), Path::to_path_buf);
    required(&path, "detections file")?;
    let records: Vec<DetectionRecord> = read_jsonl(&path)?;
    let grouped = group_records(&records)?;
    let tubes = link_all(&grouped, cfg.step.clip_len, cfg);
    let tubes_path = out.join(TUBES_FILE);
    write_jsonl(&tubes_path, &tubes)?;
    println!("wrote {} tubes to {}", tubes.len(), tubes_path.display());
    Ok((vec![path], vec![tubes_path]))
}

fn fmt_ap(ap: Option<f64>) -> String {
    ap.map_or_else(String::new, |v| v.to_string())
}

fn eval(
    cfg: &ExperimentConfig,
    out: &Path,
    scenes: Option<&Path>,
    detections: Option<&Path>,
    tubes: Option<&Path>,
) -> anyhow::Result<Touched> {
    let mut inputs = Vec::new();
    let scenes = load_scenes(cfg, out, scenes, &mut inputs)?;
    let det_path = detections.map_or_else(|| out.join(DETECTIONS_FILE), Path::to_path_buf);
    required(&det_path, "detections file")?;
    let records: Vec<DetectionRecord> = read_jsonl(&det_path)?;
    inputs.push(det_path);
    let tube_path = match tubes {
        Some(p) => {
            required(p, "tubes file")?;
            Some(p.to_path_buf())
        }
        None => Some(out.join(TUBES_FILE)).filter(|p| p.is_file()),
    };
    let tubes: Option<Vec<TubeRecord>> = match &tube_path {
        Some(p) => {
            inputs.push(p.clone());
            Some(read_jsonl(p)?)
        }
        None => None,
    };
    let grouped = group_records(&records)?;
    let boxes = initial_boxes(cfg)?;
    let summary = evaluate(&scenes, &grouped, tubes.as_deref(), &boxes, cfg.step.clip_len, cfg)?;
    let outputs = write_eval(out, &summary)?;
    println!("frame-mAP@{}: {:.4}", summary.iou_threshold, summary.frame_map);
    for v in &summary.video {
        println!("video-mAP@{}: {:.4}", v.threshold, v.report.map);
    }
    Ok((inputs, outputs))
}

/// Writes the summary JSON and its CSV views.
pub fn write_eval(out: &Path, summary: &EvalSummary) -> anyhow::Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let mut put = |name: &str, text: String| -> anyhow::Result<()> {
        let p = out.join(name);
        write_atomic(&p, text.as_bytes())?;
        files.push(p);
        Ok(())
    };

    let mut frame = String::from("class,ap\n");
    if let Some(last) = summary.steps.last() {
        for (c, ap) in &last.frame_map.per_class {
            let _ = writeln!(frame, "{c},{}", fmt_ap(*ap));
        }
    }
    put(FRAME_AP_FILE, frame)?;

    let mut steps = String::from("step,frame_map,mean_iou,input_median_iou\n");
    for s in &summary.steps {
        let _ = writeln!(
            steps,
            "{},{},{},{}",
            s.step, s.frame_map.map, s.mean_iou, s.input_histogram.median
        );
    }
    put(STEPS_FILE, steps)?;

    if !summary.video.is_empty() {
        let mut video = String::from("class");
        for v in &summary.video {
            let _ = write!(video, ",ap@{}", v.threshold);
        }
        video.push('\n');
        let classes = summary.video[0].report.per_class.keys().copied().collect::<Vec<_>>();
        for c in classes {
            let _ = write!(video, "{c}");
            for v in &summary.video {
                let _ = write!(video, ",{}", fmt_ap(v.report.per_class[&c]));
            }
            video.push('\n');
        }
        put(VIDEO_AP_FILE, video)?;
    }

    let mut miut = String::from("video,tube,label,length,miut\n");
    for r in &summary.miut {
        let _ = writeln!(miut, "{},{},{},{},{}", r.video, r.tube, r.label, r.length, r.miut);
    }
    put(MIUT_FILE, miut)?;

    if let Some(first) = summary.steps.first() {
        let bw = first.input_histogram.bin_width;
        let mut hist = String::from("bin_start");
        for s in &summary.steps {
            let _ = write!(hist, ",step_{}", s.step);
        }
        hist.push('\n');
        for b in 0..first.input_histogram.counts.len() {
            let _ = write!(hist, "{}", b as f64 * bw);
            for s in &summary.steps {
                let _ = write!(hist, ",{}", s.input_histogram.counts[b]);
            }
            hist.push('\n');
        }
        put(HISTOGRAM_FILE, hist)?;
    }

    let p = out.join(SUMMARY_FILE);
    write_json(&p, summary)?;
    files.push(p);
    Ok(files)
}

fn report(_cfg: &ExperimentConfig, out: &Path, inputs: &[PathBuf]) -> anyhow::Result<Touched> {
    let csvs: Vec<PathBuf> = if inputs.is_empty() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(out)
            .with_context(|| format!("reading {}", out.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        v.sort();
        v
    } else {
        inputs.to_vec()
    };
    if csvs.is_empty() {
        bail!("no CSV files to report in {}", out.display());
    }
    let mut outputs = Vec::new();
    for csv in &csvs {
        required(csv, "CSV file")?;
        let text = std::fs::read_to_string(csv)?;
        let table = parse_csv(&text).with_context(|| format!("parsing {}", csv.display()))?;
        let title = csv.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
        let svg = chart_for(&title, &table).with_context(|| format!("charting {}", csv.display()))?;
        let target = out.join(format!("{title}.svg"));
        write_atomic(&target, svg.as_bytes())?;
        outputs.push(target);
    }
    println!("wrote {} charts", outputs.len());
    Ok((csvs, outputs))
}
