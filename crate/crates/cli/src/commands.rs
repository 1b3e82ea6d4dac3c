use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use zad_core::eval::{error_profile, evaluate, EvalConfig, ErrorKind};
use zad_core::pipeline::ScoreKind;
use zad_core::store::{parse_annotations, parse_predictions, predictions_to_bytes};
use zad_core::synth::{generate, SynthConfig, MANIFEST_FILE};
use zad_core::tta::{adapt_video, AdapterState, LossRecord, OracleMode, TtaConfig};
use zad_core::{detect as run_detector, AnnotationSet, Detection, FeatureMatrix, LabelMode, PipelineConfig, PromptBank};

use crate::config::FileConfig;
use crate::manifest::{default_manifest_path, read_bytes, sha256_hex, write_bytes, AdaptSummary, InputChecksum, RunManifest, VideoThroughput};
use crate::{parse_threshold, AdaptArgs, CliError, DetectArgs, DiagnoseArgs, EvalArgs, Preset, SynthArgs, SynthPreset};

pub const JOBS_ENV: &str = "ZAD_JOBS";

/// Flag, then config file, then `$ZAD_JOBS`, then the CPU count.
pub fn resolve_jobs(flag: Option<usize>, file: &FileConfig) -> Result<usize, CliError> {
    let jobs = match flag.or(file.run.jobs) {
        Some(j) => j,
        None => match std::env::var(JOBS_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("{JOBS_ENV} must be a positive integer, got {v:?}")))?,
            Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
        },
    };
    if jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    Ok(jobs)
}

fn preset(args: &DetectArgs, file: &FileConfig) -> Preset {
    args.preset.or(file.pipeline.preset).unwrap_or(Preset::Thumos)
}

pub fn pipeline_config(args: &DetectArgs, file: &FileConfig) -> Result<PipelineConfig, CliError> {
    let f = &file.pipeline;
    let base = match preset(args, file) {
        Preset::Thumos => PipelineConfig::thumos(),
        Preset::Anet => PipelineConfig::activitynet(),
    };
    let threshold = match (&args.threshold, &f.threshold) {
        (Some(t), _) => *t,
        (None, Some(s)) => parse_threshold(s).map_err(|e| CliError::Validation(format!("config threshold: {e}")))?,
        (None, None) => base.threshold,
    };
    let cfg = PipelineConfig {
        smoothing_window: args.window.or(f.window).unwrap_or(base.smoothing_window),
        gamma1: args.gamma1.or(f.gamma1).unwrap_or(base.gamma1),
        gamma2: args.gamma2.or(f.gamma2).unwrap_or(base.gamma2),
        eta: args.eta.or(f.eta).unwrap_or(base.eta),
        dc_exclude: args.dc_exclude || f.dc_exclude.unwrap_or(base.dc_exclude),
        threshold,
        score_kind: args.score.or(f.score).map_or(base.score_kind, ScoreKind::from),
        calibrate: !args.no_calibrate && f.calibrate.unwrap_or(base.calibrate),
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn tta_config(args: &AdaptArgs, file: &FileConfig) -> Result<TtaConfig, CliError> {
    let f = &file.adapt;
    let base = match preset(&args.detect, file) {
        Preset::Thumos => TtaConfig::thumos(),
        Preset::Anet => TtaConfig::activitynet(),
    };
    let cfg = TtaConfig {
        k: args.k.or(f.k).unwrap_or(base.k),
        steps: args.steps.or(f.steps).unwrap_or(base.steps),
        beta: args.beta.or(f.beta).unwrap_or(base.beta),
        learning_rate: args.lr.or(f.lr).unwrap_or(base.learning_rate),
        weight_decay: args.wd.or(f.wd).unwrap_or(base.weight_decay),
        seed: seed(&args.detect, file),
        positive: args.pos.or(f.pos).map_or(base.positive, Into::into),
        negative: args.neg.or(f.neg).map_or(base.negative, Into::into),
        reset_per_video: !(args.carry_state || f.carry_state.unwrap_or(false)),
        ..base
    };
    cfg.validate()?;
    Ok(cfg)
}

fn seed(args: &DetectArgs, file: &FileConfig) -> u64 {
    args.seed.or(file.run.seed).unwrap_or(0)
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

/// `.vfeat` files of a directory in name order.
pub fn list_features(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Usage(format!("feature directory {} does not exist", dir.display())));
    }
    let entries = fs::read_dir(dir).map_err(|e| CliError::Runtime(format!("cannot list {}: {e}", dir.display())))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::Runtime(e.to_string()))?.path();
        if path.extension().is_some_and(|x| x == "vfeat") {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Usage(format!("no .vfeat files in {}", dir.display())));
    }
    Ok(paths)
}

fn load_annotation_file(path: &Path) -> Result<(AnnotationSet, InputChecksum), CliError> {
    require_file(path, "annotation file")?;
    let bytes = read_bytes(path)?;
    let set = parse_annotations(&bytes)?;
    Ok((set, checksum(path, &bytes)))
}

fn checksum(path: &Path, bytes: &[u8]) -> InputChecksum {
    InputChecksum {
        path: path.display().to_string(),
        sha256: sha256_hex(bytes),
    }
}

fn first_label(set: &AnnotationSet, video_id: &str) -> Result<String, CliError> {
    set.videos
        .get(video_id)
        .and_then(|v| v.instances.first())
        .map(|g| g.label.clone())
        .ok_or_else(|| CliError::Validation(format!("oracle annotations have no instance for video {video_id}")))
}

fn foreground(set: &AnnotationSet, video_id: &str) -> Result<Vec<(f64, f64)>, CliError> {
    let v = set
        .videos
        .get(video_id)
        .ok_or_else(|| CliError::Validation(format!("oracle annotations have no entry for video {video_id}")))?;
    Ok(v.instances.iter().map(|g| (g.begin, g.end)).collect())
}

struct Inputs {
    prompts: PromptBank,
    videos: Vec<PathBuf>,
    checksums: Vec<InputChecksum>,
    oracle_label: Option<AnnotationSet>,
}

fn load_inputs(args: &DetectArgs) -> Result<Inputs, CliError> {
    let videos = list_features(&args.features)?;
    require_file(&args.prompts, "prompt file")?;
    let bytes = read_bytes(&args.prompts)?;
    let prompts = PromptBank::from_bytes(&bytes)?;
    let mut checksums = vec![checksum(&args.prompts, &bytes)];
    let oracle_label = match &args.oracle_label {
        Some(p) => {
            let (set, sum) = load_annotation_file(p)?;
            checksums.push(sum);
            Some(set)
        }
        None => None,
    };
    Ok(Inputs {
        prompts,
        videos,
        checksums,
        oracle_label,
    })
}

fn load_video(path: &Path) -> Result<(FeatureMatrix, InputChecksum), CliError> {
    let bytes = read_bytes(path)?;
    let m = FeatureMatrix::from_bytes(&bytes).map_err(|e| match e {
        zad_core::Error::Io { .. } => CliError::Core(e),
        other => CliError::Validation(format!("{}: {other}", path.display())),
    })?;
    Ok((m, checksum(path, &bytes)))
}

struct VideoOutput {
    video_id: String,
    checksum: InputChecksum,
    frames: usize,
    seconds: f64,
    detections: Vec<Detection>,
    trajectory: Vec<LossRecord>,
    initial: Option<f64>,
    last: Option<f64>,
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Runtime(format!("cannot start worker pool: {e}")))
}

/// Sorts by video id and rejects duplicates, so outputs never depend on
/// file or worker order.
fn finish_outputs(mut outs: Vec<VideoOutput>) -> Result<Vec<VideoOutput>, CliError> {
    outs.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    if let Some(w) = outs.windows(2).find(|w| w[0].video_id == w[1].video_id) {
        return Err(CliError::Validation(format!("video id {} appears in more than one feature file", w[0].video_id)));
    }
    Ok(outs)
}

fn write_run(
    out: &Path,
    manifest_path: Option<&Path>,
    mut manifest: RunManifest,
    outs: &[VideoOutput],
    stage: &'static str,
    stage_seconds: f64,
) -> Result<(), CliError> {
    let t = Instant::now();
    let detections: Vec<Detection> = outs.iter().flat_map(|o| o.detections.iter().cloned()).collect();
    write_bytes(out, &predictions_to_bytes(&detections))?;
    manifest.timings.insert(stage, stage_seconds);
    manifest.timings.insert("write", t.elapsed().as_secs_f64());
    manifest.inputs.extend(outs.iter().map(|o| o.checksum.clone()));
    manifest.outputs.push(out.display().to_string());
    manifest.videos = outs
        .iter()
        .map(|o| VideoThroughput {
            video_id: o.video_id.clone(),
            frames: o.frames,
            seconds: o.seconds,
            frames_per_second: if o.seconds > 0.0 { o.frames as f64 / o.seconds } else { 0.0 },
        })
        .collect();
    manifest.total_frames = outs.iter().map(|o| o.frames).sum();
    manifest.frames_per_second = if stage_seconds > 0.0 {
        manifest.total_frames as f64 / stage_seconds
    } else {
        0.0
    };
    let path = manifest_path.map_or_else(|| default_manifest_path(out), Path::to_path_buf);
    manifest.write(&path)?;
    eprintln!(
        "zad: {} videos, {} detections, {:.1} frames/s; wrote {}",
        outs.len(),
        detections.len(),
        manifest.frames_per_second,
        out.display()
    );
    Ok(())
}

pub fn detect(args: &DetectArgs, file: &FileConfig, jobs: usize) -> Result<(), CliError> {
    let t_load = Instant::now();
    let cfg = pipeline_config(args, file)?;
    let inputs = load_inputs(args)?;
    let load_seconds = t_load.elapsed().as_secs_f64();

    let t = Instant::now();
    let outs = pool(jobs)?.install(|| {
        inputs
            .videos
            .par_iter()
            .map(|path| {
                let (m, sum) = load_video(path)?;
                let start = Instant::now();
                let mode = match &inputs.oracle_label {
                    Some(set) => LabelMode::Perfect(first_label(set, m.video_id())?),
                    None => LabelMode::Pseudo,
                };
                let detections = run_detector(&m, &inputs.prompts, &cfg, &mode)?;
                Ok(VideoOutput {
                    video_id: m.video_id().to_string(),
                    checksum: sum,
                    frames: m.frame_count(),
                    seconds: start.elapsed().as_secs_f64(),
                    detections,
                    trajectory: Vec::new(),
                    initial: None,
                    last: None,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()
    })?;
    let outs = finish_outputs(outs)?;
    let stage_seconds = t.elapsed().as_secs_f64();

    let mut manifest = RunManifest::new(
        "detect",
        json!({
            "preset": format!("{:?}", preset(args, file)).to_lowercase(),
            "pipeline": cfg,
            "seed": seed(args, file),
            "jobs": jobs,
            "oracle_label": args.oracle_label.as_ref().map(|p| p.display().to_string()),
        }),
    );
    manifest.inputs = inputs.checksums;
    manifest.timings.insert("load_inputs", load_seconds);
    write_run(&args.out, args.manifest.as_deref(), manifest, &outs, "detect", stage_seconds)
}

#[derive(Serialize)]
struct LossLine<'a> {
    video_id: &'a str,
    #[serde(flatten)]
    record: &'a LossRecord,
}

pub fn adapt(args: &AdaptArgs, file: &FileConfig, jobs: usize) -> Result<(), CliError> {
    let t_load = Instant::now();
    let cfg = pipeline_config(&args.detect, file)?;
    let tta = tta_config(args, file)?;
    let mut inputs = load_inputs(&args.detect)?;
    let oracle_samples = match &args.oracle_samples {
        Some(p) => {
            let (set, sum) = load_annotation_file(p)?;
            inputs.checksums.push(sum);
            Some(set)
        }
        None => None,
    };
    let load_seconds = t_load.elapsed().as_secs_f64();

    let oracle_for = |video_id: &str| -> Result<OracleMode, CliError> {
        Ok(OracleMode {
            label: inputs.oracle_label.as_ref().map(|s| first_label(s, video_id)).transpose()?,
            foreground: oracle_samples.as_ref().map(|s| foreground(s, video_id)).transpose()?,
        })
    };
    let run_one = |state: &mut AdapterState, m: &FeatureMatrix, sum: InputChecksum| -> Result<VideoOutput, CliError> {
        let start = Instant::now();
        let outcome = adapt_video(state, m, &inputs.prompts, &cfg, &tta, &oracle_for(m.video_id())?)?;
        Ok(VideoOutput {
            video_id: m.video_id().to_string(),
            checksum: sum,
            frames: m.frame_count(),
            seconds: start.elapsed().as_secs_f64(),
            detections: outcome.detections,
            trajectory: outcome.trajectory,
            initial: outcome.initial_loss.map(|l| l.total),
            last: outcome.final_loss.map(|l| l.total),
        })
    };

    let t = Instant::now();
    let outs = if tta.reset_per_video {
        pool(jobs)?.install(|| {
            inputs
                .videos
                .par_iter()
                .map(|path| {
                    let (m, sum) = load_video(path)?;
                    run_one(&mut AdapterState::identity(m.dim()), &m, sum)
                })
                .collect::<Result<Vec<_>, CliError>>()
        })?
    } else {
        // The adapter carries over, so videos run one after another in id order.
        let mut loaded = Vec::new();
        for path in &inputs.videos {
            let (m, sum) = load_video(path)?;
            loaded.push((m.video_id().to_string(), path.clone(), sum));
        }
        loaded.sort_by(|a, b| a.0.cmp(&b.0));
        let mut state: Option<AdapterState> = None;
        let mut outs = Vec::new();
        for (_, path, _) in &loaded {
            let (m, sum) = load_video(path)?;
            let st = state.get_or_insert_with(|| AdapterState::identity(m.dim()));
            outs.push(run_one(st, &m, sum)?);
        }
        outs
    };
    let outs = finish_outputs(outs)?;
    let stage_seconds = t.elapsed().as_secs_f64();

    if let Some(log) = &args.loss_log {
        let mut text = String::new();
        for o in &outs {
            for r in &o.trajectory {
                let line = serde_json::to_string(&LossLine { video_id: &o.video_id, record: r }).expect("loss record serializes");
                let _ = writeln!(text, "{line}");
            }
        }
        write_bytes(log, text.as_bytes())?;
    }

    let mut manifest = RunManifest::new(
        "adapt",
        json!({
            "preset": format!("{:?}", preset(&args.detect, file)).to_lowercase(),
            "pipeline": cfg,
            "adapt": tta,
            "seed": tta.seed,
            "jobs": jobs,
            "oracle_label": args.detect.oracle_label.as_ref().map(|p| p.display().to_string()),
            "oracle_samples": args.oracle_samples.as_ref().map(|p| p.display().to_string()),
        }),
    );
    manifest.inputs = inputs.checksums;
    manifest.timings.insert("load_inputs", load_seconds);
    manifest.adaptation = Some(
        outs.iter()
            .map(|o| AdaptSummary {
                video_id: o.video_id.clone(),
                initial_total: o.initial,
                final_total: o.last,
            })
            .collect(),
    );
    if let Some(log) = &args.loss_log {
        manifest.outputs.push(log.display().to_string());
    }
    write_run(&args.detect.out, args.detect.manifest.as_deref(), manifest, &outs, "adapt", stage_seconds)
}

pub fn parse_grid(grid: &str) -> Result<EvalConfig, CliError> {
    match grid {
        "thumos" => Ok(EvalConfig::thumos()),
        "anet" => Ok(EvalConfig::activitynet()),
        list => {
            let values = list
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| CliError::Usage(format!("--grid expects thumos, anet or a list of numbers, got {list:?}")))?;
            Ok(EvalConfig::with_grid(values)?)
        }
    }
}

fn load_predictions_and_truth(pred: &Path, gt: &Path) -> Result<(Vec<Detection>, AnnotationSet), CliError> {
    require_file(pred, "prediction file")?;
    let preds = parse_predictions(&read_bytes(pred)?)?;
    let (gts, _) = load_annotation_file(gt)?;
    Ok((preds, gts))
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let cfg = parse_grid(&args.grid)?;
    let (preds, gts) = load_predictions_and_truth(&args.pred, &args.gt)?;
    let report = evaluate(&preds, &gts, &cfg)?;
    if let Some(out) = &args.out {
        let mut bytes = serde_json::to_vec_pretty(&report).expect("report serializes");
        bytes.push(b'\n');
        write_bytes(out, &bytes)?;
    }
    let label = args.pred.file_stem().map_or_else(|| "mAP".to_string(), |s| s.to_string_lossy().into_owned());
    print!("{}", report.table(&label));
    Ok(())
}

pub fn diagnose(args: &DiagnoseArgs) -> Result<(), CliError> {
    if !(args.tiou > 0.0 && args.tiou <= 1.0) {
        return Err(CliError::Usage(format!("--tiou must lie in (0, 1], got {}", args.tiou)));
    }
    if !(1..=3).contains(&args.max_k) {
        return Err(CliError::Usage(format!("--max-k must be 1, 2 or 3, got {}", args.max_k)));
    }
    let (preds, gts) = load_predictions_and_truth(&args.pred, &args.gt)?;
    let profile = error_profile(&preds, &gts, args.tiou, args.max_k)?;
    if let Some(out) = &args.out {
        let mut bytes = serde_json::to_vec_pretty(&profile).expect("profile serializes");
        bytes.push(b'\n');
        write_bytes(out, &bytes)?;
    }
    if let Some(csv) = &args.csv {
        write_bytes(csv, profile.to_csv().as_bytes())?;
    }
    let mut table = format!("{:<8} {:>6}", "budget", "kept");
    for kind in ErrorKind::ALL {
        let _ = write!(table, " {:>16}", kind.name());
    }
    table.push('\n');
    for b in &profile.budgets {
        let _ = write!(table, "{:<8} {:>6}", format!("top-{}G", b.k), b.kept);
        for kind in ErrorKind::ALL {
            let _ = write!(table, " {:>15.1}%", 100.0 * b.fractions[&kind]);
        }
        table.push('\n');
    }
    print!("{table}");
    Ok(())
}

pub fn synth(args: &SynthArgs) -> Result<(), CliError> {
    let base = match args.preset {
        SynthPreset::Clean => SynthConfig::clean(),
        SynthPreset::Hard => SynthConfig::hard(),
    };
    let cfg = SynthConfig {
        videos: args.videos.unwrap_or(base.videos),
        classes: args.classes.unwrap_or(base.classes),
        dim: args.dim.unwrap_or(base.dim),
        noise_sigma: args.noise.unwrap_or(base.noise_sigma),
        background: args.background.map_or(base.background, Into::into),
        seed: args.seed.unwrap_or(base.seed),
        ..base
    };
    let manifest = generate(&cfg, &args.out)?;
    let counts: BTreeMap<bool, usize> = manifest.files.iter().fold(BTreeMap::new(), |mut m, f| {
        *m.entry(f.path.ends_with(".vfeat")).or_default() += 1;
        m
    });
    eprintln!("zad: wrote {} feature files", counts.get(&true).copied().unwrap_or(0));
    println!("{}", args.out.join(MANIFEST_FILE).display());
    Ok(())
}
