use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Deserialize;
use soundtriage::dataio::{
    read_dataset, read_wav, synthesize_dataset, write_dataset, ClipAnnotation, DatasetClip,
};
use soundtriage::inference::{
    detect, evaluate_model, tune_postprocessing, ClipPrediction, PostprocessConfig, TuningResult,
};
use soundtriage::metrics::IntersectionConfig;
use soundtriage::training::{prepare_dataset, train, Checkpoint, EpochRecord, LabeledClip, TrainObserver};
use soundtriage::triage::{make_inference_weights, TriageWeights};

use crate::config::{self, RunConfig};
use crate::output::Run;
use crate::{Cli, Command, PredictArgs, PriorityArgs, SweepArgs, SynthArgs, TrainArgs, TuneArgs};

/// A problem with the invocation rather than with the data or the run.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

pub fn is_usage_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.is::<Usage>() || matches!(c.downcast_ref::<soundtriage::Error>(), Some(soundtriage::Error::Config(_)))
    })
}

pub fn run(cli: &Cli, out: &Path) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => config::load(path).map_err(|e| usage(format!("{e:#}")))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match &cli.command {
        Command::Synth(args) => synth(cfg, args, out),
        Command::Train(args) => train_cmd(cfg, args, out),
        Command::Infer(args) => predict_cmd(cfg, args, out, false),
        Command::Eval(args) => predict_cmd(cfg, args, out, true),
        Command::Sweep(args) => sweep(cfg, args, out),
        Command::Tune(args) => tune(cfg, args, out),
    }
}

fn synth(mut cfg: RunConfig, args: &SynthArgs, out: &Path) -> anyhow::Result<()> {
    let s = &mut cfg.synth;
    s.clips = args.clips.unwrap_or(s.clips);
    s.classes = args.classes.unwrap_or(s.classes);
    s.duration = args.duration.unwrap_or(s.duration);
    s.sample_rate = args.sample_rate.unwrap_or(s.sample_rate);
    if let Some(g) = &args.class_gain_db {
        s.class_gain_db = g.clone();
    }
    if let Some(p) = &args.class_prevalence {
        s.class_prevalence = p.clone();
    }
    let synth_cfg = s.to_config(cfg.seed);
    synth_cfg.validate()?;
    let clips = synthesize_dataset(&synth_cfg)?;
    let names: Vec<String> = (0..synth_cfg.n_classes).map(|k| format!("class_{k}")).collect();
    let sample_rate = synth_cfg.sample_rate;
    Run::start("synth", &cfg).finish_dir(out, |dir| {
        write_dataset(dir, &clips, &names, sample_rate)?;
        Ok(vec!["clips/".into(), "annotations.jsonl".into(), "classes.json".into()])
    })?;
    eprintln!("wrote {} clips to {}", clips.len(), out.display());
    Ok(())
}

fn load_labeled(dir: &Path, cfg: &RunConfig) -> anyhow::Result<(Vec<LabeledClip>, Vec<String>)> {
    let (clips, names) = read_dataset(dir).with_context(|| format!("reading dataset {}", dir.display()))?;
    if clips.is_empty() {
        return Err(usage(format!("dataset {} has no clips", dir.display())));
    }
    let labeled = prepare_dataset(&clips, &cfg.features, names.len())?;
    Ok((labeled, names))
}

struct EpochPrinter;

impl TrainObserver for EpochPrinter {
    fn on_epoch(&mut self, r: &EpochRecord) {
        eprintln!(
            "epoch {:>3}  train_loss {:.6}  val_frame_f {:.4}",
            r.epoch, r.train_loss, r.validation_frame_f
        );
    }
}

fn train_cmd(mut cfg: RunConfig, args: &TrainArgs, out: &Path) -> anyhow::Result<()> {
    let t = &mut cfg.train;
    t.seed = cfg.seed;
    t.loss = args.loss.unwrap_or(t.loss);
    t.dirichlet_alpha = args.alpha.unwrap_or(t.dirichlet_alpha);
    t.epochs = args.epochs.unwrap_or(t.epochs);
    t.batch_size = args.batch_size.unwrap_or(t.batch_size);
    t.learning_rate = args.learning_rate.unwrap_or(t.learning_rate);
    t.identity_film |= args.identity_film;
    t.validate()?;
    cfg.features.validate()?;

    let (train_set, names) = load_labeled(&args.train, &cfg)?;
    let (val_set, val_names) = load_labeled(&args.val, &cfg)?;
    if names != val_names {
        bail!("training and validation class maps differ");
    }
    let model_cfg = cfg.model.to_config(cfg.features.n_mels, names.len());
    model_cfg.validate()?;
    let outcome = train(&model_cfg, &train_set, &val_set, &cfg.train, &mut EpochPrinter)?;
    let checkpoint = Checkpoint {
        model: outcome.model.clone(),
        train_config: cfg.train.clone(),
        feature_config: cfg.features.clone(),
        class_names: names,
        epoch: outcome.best_epoch,
        validation_score: outcome.best_score,
    };
    let mut run = Run::start("train", &cfg);
    run.input("train", &args.train);
    run.input("val", &args.val);
    run.finish(
        out,
        vec![
            ("model.ckpt".into(), checkpoint.to_bytes()?),
            ("train_log.tsv".into(), outcome.log_tsv().into_bytes()),
        ],
    )?;
    eprintln!(
        "best epoch {} (val frame F {:.4}); wrote {}",
        outcome.best_epoch,
        outcome.best_score,
        out.join("model.ckpt").display()
    );
    Ok(())
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Clips of a dataset directory; annotations are optional for inference.
fn load_clips(dir: &Path, ck: &Checkpoint, need_labels: bool) -> anyhow::Result<Vec<LabeledClip>> {
    let n_classes = ck.class_names.len();
    let clips: Vec<DatasetClip> = if dir.join("annotations.jsonl").exists() {
        let (clips, names) = read_dataset(dir).with_context(|| format!("reading dataset {}", dir.display()))?;
        if names != ck.class_names {
            bail!("class map of {} differs from the checkpoint's", dir.display());
        }
        clips
    } else if need_labels {
        return Err(usage(format!("{} has no annotations.jsonl", dir.display())));
    } else {
        unlabeled_clips(dir)?
    };
    if clips.is_empty() {
        return Err(usage(format!("dataset {} has no clips", dir.display())));
    }
    Ok(prepare_dataset(&clips, &ck.feature_config, n_classes)?)
}

fn unlabeled_clips(dir: &Path) -> anyhow::Result<Vec<DatasetClip>> {
    let wav_dir = if dir.join("clips").is_dir() { dir.join("clips") } else { dir.to_path_buf() };
    let mut paths: Vec<PathBuf> = fs::read_dir(&wav_dir)
        .with_context(|| format!("listing {}", wav_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "wav"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let (waveform, sample_rate) = read_wav(p)?;
            let clip_id = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            Ok(DatasetClip {
                annotation: ClipAnnotation {
                    clip_id,
                    duration: waveform.len() as f64 / sample_rate as f64,
                    events: Vec::new(),
                },
                waveform,
                sample_rate,
            })
        })
        .collect()
}

fn priority(args: &PriorityArgs, n_classes: usize) -> anyhow::Result<TriageWeights> {
    let weights = match (&args.lambda, args.target, args.weight) {
        (Some(raw), _, _) => {
            if raw.len() != n_classes {
                return Err(usage(format!("--lambda has {} values, the model has {n_classes} classes", raw.len())));
            }
            TriageWeights::from_raw(raw.clone())
        }
        (None, Some(target), Some(weight)) => make_inference_weights(target, weight, n_classes),
        _ => Ok(TriageWeights::uniform(n_classes)),
    };
    weights.map_err(|e| usage(e.to_string()))
}

fn load_postprocess(path: Option<&Path>, n_classes: usize) -> anyhow::Result<PostprocessConfig> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum File {
        Tuned(TuningResult),
        Bare(PostprocessConfig),
    }
    let Some(path) = path else {
        return Ok(PostprocessConfig::plain(n_classes));
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg = match serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))? {
        File::Tuned(t) => t.postprocess,
        File::Bare(p) => p,
    };
    if cfg.n_classes() != n_classes {
        return Err(usage(format!(
            "{} covers {} classes, the model has {n_classes}",
            path.display(),
            cfg.n_classes()
        )));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn predictions_jsonl(preds: &[ClipPrediction]) -> anyhow::Result<Vec<u8>> {
    let mut out = Vec::new();
    for p in preds {
        serde_json::to_writer(&mut out, p)?;
        out.push(b'\n');
    }
    Ok(out)
}

fn predict_cmd(cfg: RunConfig, args: &PredictArgs, out: &Path, evaluate: bool) -> anyhow::Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let n = ck.class_names.len();
    let weights = priority(&args.priority, n)?;
    let post = load_postprocess(args.postprocess.as_deref(), n)?;
    let clips = load_clips(&args.data, &ck, evaluate)?;
    let mut run = Run::start(if evaluate { "eval" } else { "infer" }, &cfg);
    run.input("checkpoint", &args.checkpoint);
    run.input("data", &args.data);
    if let Some(p) = &args.postprocess {
        run.input("postprocess", p);
    }
    let mut files = Vec::new();
    if evaluate {
        let (report, preds) =
            evaluate_model(&ck.model, &clips, &weights, &post, &ck.class_names, &IntersectionConfig::default())?;
        files.push(("report.json".to_string(), serde_json::to_vec_pretty(&report)?));
        files.push(("report.tsv".to_string(), report.to_tsv().into_bytes()));
        files.push(("predictions.jsonl".to_string(), predictions_jsonl(&preds)?));
        eprintln!(
            "macro frame F {:.4}, macro intersection F {:.4}",
            report.macro_frame_f, report.macro_intersection_f
        );
    } else {
        let (_, preds) = detect(&ck.model, &clips, &weights, &post)?;
        files.push(("predictions.jsonl".to_string(), predictions_jsonl(&preds)?));
        eprintln!("wrote detections for {} clips", preds.len());
    }
    run.finish(out, files)
}

fn sweep(cfg: RunConfig, args: &SweepArgs, out: &Path) -> anyhow::Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let n = ck.class_names.len();
    let grid = args.weights.clone().unwrap_or_else(|| cfg.tuning.target_weights.clone());
    if grid.is_empty() {
        return Err(usage("--weights must not be empty"));
    }
    let post = load_postprocess(args.postprocess.as_deref(), n)?;
    let clips = load_clips(&args.data, &ck, true)?;
    let intersection = IntersectionConfig::default();

    let mut csv = String::from("class,name,weight,frame_f,intersection_f,insertion_rate,deletion_rate\n");
    for class in 0..n {
        for &w in &grid {
            let weights = make_inference_weights(class, w, n).map_err(|e| usage(e.to_string()))?;
            let (report, _) = evaluate_model(&ck.model, &clips, &weights, &post, &ck.class_names, &intersection)?;
            let r = &report.classes[class];
            let rate = |v: Option<f64>| v.map_or("nan".to_string(), |x| format!("{x:.6}"));
            writeln!(
                csv,
                "{class},{},{w},{:.6},{:.6},{},{}",
                r.name,
                r.frame_f,
                r.intersection_f,
                rate(r.insertion_rate),
                rate(r.deletion_rate)
            )?;
        }
        eprintln!("swept class {}", ck.class_names[class]);
    }
    let mut run = Run::start("sweep", &cfg);
    run.input("checkpoint", &args.checkpoint);
    run.input("data", &args.data);
    run.finish(out, vec![("sweep.csv".into(), csv.into_bytes())])
}

fn tune(mut cfg: RunConfig, args: &TuneArgs, out: &Path) -> anyhow::Result<()> {
    if let Some(m) = args.metric {
        cfg.tuning.metric = m;
    }
    if let Some(w) = &args.weights {
        cfg.tuning.target_weights = w.clone();
    }
    let grid = cfg.tuning.grid();
    grid.validate()?;
    let ck = load_checkpoint(&args.checkpoint)?;
    let clips = load_clips(&args.data, &ck, true)?;
    let result = tune_postprocessing(&ck.model, &clips, &grid, cfg.tuning.metric)?;
    for (name, c) in ck.class_names.iter().zip(&result.classes) {
        eprintln!(
            "{name}: threshold {:.2}, median {}, weight {}, score {:.4}",
            c.threshold, c.median_size, c.target_weight, c.score
        );
    }
    let mut run = Run::start("tune", &cfg);
    run.input("checkpoint", &args.checkpoint);
    run.input("data", &args.data);
    run.finish(out, vec![("tuning.json".into(), serde_json::to_vec_pretty(&result)?)])
}
