use std::path::{Path, PathBuf};

use cascade_core::cascade::{infer_cascade, run_evaluation, CascadeConfig, CascadeModel, OracleStub, Predictor, CASCADE_FILE};
use cascade_core::checkpoint::Checkpoint;
use cascade_core::data::split_cohort;
use cascade_core::io::cohort::{list_subjects, load_scan, load_subjects, save_scan, CohortSplit, LABELS_FILE, SPLIT_FILE};
use cascade_core::io::volume_file::save_volume;
use cascade_core::phantom::{generate_cohort, PhantomSpec};
use cascade_core::train::{Stage, TrainConfig, TrainState};
use cascade_core::volume::{Modality, MultiModalScan};
use cascade_core::{Error, Result};
use serde_json::{json, Value};

use crate::sink::FileSink;
use crate::{meta, read_toml};

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("config serialises")
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

pub fn phantom(out: &Path, count: usize, seed: Option<u64>, spec: Option<&Path>, argv: &[String]) -> Result<()> {
    if count == 0 {
        return Err(Error::Config("--count must be at least 1".into()));
    }
    let mut spec: PhantomSpec = match spec {
        Some(p) => read_toml(p)?,
        None => PhantomSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let cohort = generate_cohort(&spec, count)?;
    create_dir(out)?;
    for s in &cohort {
        save_scan(s, out)?;
    }
    let ids: Vec<&str> = cohort.iter().map(|s| s.subject_id.as_str()).collect();
    log::info!("wrote {} phantoms to {}", ids.len(), out.display());
    meta::write(out, "phantom", argv, Some(spec.seed), to_value(&spec), json!({ "subjects": ids }))
}

pub fn split(cohort: &Path, fraction: f64, seed: u64, argv: &[String]) -> Result<()> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("--fraction must lie in (0, 1), got {fraction}")));
    }
    let ids = list_subjects(cohort)?;
    let (train, dev) = split_cohort(&ids, fraction, seed)?;
    let split = CohortSplit { fraction, seed, train, dev };
    split.save(&cohort.join(SPLIT_FILE))?;
    log::info!("{} training / {} development subjects", split.train.len(), split.dev.len());
    meta::write(
        cohort,
        "split",
        argv,
        Some(seed),
        json!({ "fraction": fraction }),
        json!({ "split": SPLIT_FILE, "train": split.train.len(), "dev": split.dev.len() }),
    )
}

/// Training and development subjects: the saved split when present, otherwise
/// everything trains and nothing is held out.
fn load_split(cohort: &Path) -> Result<(Vec<MultiModalScan>, Vec<MultiModalScan>)> {
    let split_path = cohort.join(SPLIT_FILE);
    if split_path.exists() {
        let split = CohortSplit::load(&split_path)?;
        Ok((load_subjects(cohort, &split.train)?, load_subjects(cohort, &split.dev)?))
    } else {
        log::warn!("{} has no {SPLIT_FILE}; training on every subject without a development set", cohort.display());
        Ok((load_subjects(cohort, &list_subjects(cohort)?)?, Vec::new()))
    }
}

pub struct TrainArgs<'a> {
    pub stage: u8,
    pub config: Option<&'a Path>,
    pub cohort: &'a Path,
    pub out: &'a Path,
    pub seed: Option<u64>,
    pub resume: Option<&'a Path>,
}

fn resumed_state(path: &Path, stage: Stage, config: Option<TrainConfig>, seed: Option<u64>) -> Result<TrainState> {
    let mut state = TrainState::from_checkpoint(&Checkpoint::load(path)?)?;
    if state.stage != stage {
        return Err(Error::Config(format!(
            "{} is a stage {} checkpoint, --stage is {}",
            path.display(),
            state.stage.number(),
            stage.number()
        )));
    }
    if seed.is_some_and(|s| s != state.config.seed) {
        return Err(Error::Config(format!("--seed differs from the checkpoint's seed {}", state.config.seed)));
    }
    if let Some(cfg) = config {
        // only the step budget may change on resume
        let same = TrainConfig {
            steps: state.config.steps,
            ..cfg.clone()
        };
        if same != state.config {
            return Err(Error::Config("resumed runs may only change `steps` in the configuration".into()));
        }
        state.config.steps = cfg.steps;
    }
    Ok(state)
}

pub fn train(args: TrainArgs<'_>, argv: &[String]) -> Result<()> {
    let stage = Stage::from_number(args.stage)?;
    let config = args.config.map(read_toml::<TrainConfig>).transpose()?;
    let state = match args.resume {
        Some(path) => resumed_state(path, stage, config, args.seed)?,
        None => {
            let mut cfg = config.unwrap_or_else(|| TrainConfig::for_stage(stage));
            if let Some(s) = args.seed {
                cfg.seed = s;
            }
            TrainState::fresh(stage, &cfg)?
        }
    };
    let (train_set, dev_set) = load_split(args.cohort)?;
    create_dir(args.out)?;
    let n = stage.number();
    let ckpt = args.out.join(format!("net{n}.ckpt"));
    let log_path = args.out.join(format!("train{n}.log.jsonl"));
    let mut sink = FileSink::new(log_path.clone(), ckpt.clone(), args.resume.is_some())?;
    log::info!(
        "stage {n}: {} training / {} development subjects, steps {}..{}",
        train_set.len(),
        dev_set.len(),
        state.step,
        state.config.steps
    );
    let config = state.config.clone();
    let start = state.step;
    let outcome = match cascade_core::train::train(state, &train_set, &dev_set, &mut sink) {
        Ok(o) => o,
        Err(e) => {
            sink.flush()?;
            if matches!(e, Error::NonFinite { .. }) {
                log::error!("state before the failing step saved to {}", ckpt.display());
            }
            return Err(e);
        }
    };
    sink.flush()?;
    if outcome.stopped_early {
        log::info!("stopped early at step {} after {} stale epochs", outcome.state.step, config.patience);
    }
    if !args.out.join(CASCADE_FILE).exists() {
        CascadeModel::write_cascade_config(args.out, &CascadeConfig::default())?;
    }
    meta::write(
        args.out,
        &format!("train{n}"),
        argv,
        Some(config.seed),
        to_value(&config),
        json!({
            "checkpoint": ckpt.file_name().and_then(|f| f.to_str()),
            "log": log_path.file_name().and_then(|f| f.to_str()),
            "start_step": start,
            "final_step": outcome.state.step,
            "stopped_early": outcome.stopped_early,
            "best_dev": outcome.state.best_dev,
            "train_subjects": train_set.iter().map(|s| &s.subject_id).collect::<Vec<_>>(),
            "dev_subjects": dev_set.iter().map(|s| &s.subject_id).collect::<Vec<_>>(),
        }),
    )
}

/// A subject directory, or every subject inside a cohort directory.
fn load_scans(dir: &Path) -> Result<Vec<MultiModalScan>> {
    if dir.join(format!("{}.vol", Modality::Flair.file_stem())).exists() {
        Ok(vec![load_scan(dir)?])
    } else {
        load_subjects(dir, &list_subjects(dir)?)
    }
}

pub fn infer(model_dir: &Path, scan_dir: &Path, out_dir: &Path, argv: &[String]) -> Result<()> {
    let model = CascadeModel::load(model_dir)?;
    let scans = load_scans(scan_dir)?;
    create_dir(out_dir)?;
    let mut subjects = Vec::new();
    for scan in &scans {
        let out = infer_cascade(&model, scan).map_err(|e| match e {
            Error::Shape { op, detail } => Error::Shape {
                op,
                detail: format!("{}: {detail}", scan.subject_id),
            },
            other => other,
        })?;
        let dir = out_dir.join(&scan.subject_id);
        create_dir(&dir)?;
        let path: PathBuf = dir.join(LABELS_FILE);
        save_volume(out.labels.volume(), &path)?;
        let tumor = out.labels.data().iter().filter(|&&v| v != 0).count();
        log::info!("{}: {tumor} tumor voxels", scan.subject_id);
        subjects.push(json!({
            "subject": scan.subject_id,
            "labels": path.strip_prefix(out_dir).unwrap_or(&path),
            "detected_voxels": out.detection.count(),
            "roi": out.roi.map(|b| json!({ "min": b.min, "max": b.max })),
            "tumor_voxels": tumor,
        }));
    }
    meta::write(
        out_dir,
        "infer",
        argv,
        None,
        json!({
            "model": model_dir,
            "cascade": to_value(&model.cascade),
            "net1": to_value(&model.net1.config),
            "net2": to_value(&model.net2.config),
        }),
        json!({ "subjects": subjects }),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Subset {
    All,
    Train,
    Dev,
}

pub fn eval(model: &str, cohort: &Path, report: &Path, subset: Option<Subset>, argv: &[String]) -> Result<()> {
    let split_path = cohort.join(SPLIT_FILE);
    let has_split = split_path.exists();
    let subset = subset.unwrap_or(if has_split { Subset::Dev } else { Subset::All });
    let ids = match subset {
        Subset::All => list_subjects(cohort)?,
        Subset::Train | Subset::Dev if !has_split => {
            return Err(Error::Config(format!("--subset needs {}", split_path.display())));
        }
        Subset::Train => CohortSplit::load(&split_path)?.train,
        Subset::Dev => CohortSplit::load(&split_path)?.dev,
    };
    let scans = load_subjects(cohort, &ids)?;
    let loaded;
    let predictor: &dyn Predictor = if model == "oracle" {
        &OracleStub
    } else {
        loaded = CascadeModel::load(Path::new(model))?;
        &loaded
    };
    let result = run_evaluation(predictor, &scans, None)?;
    let text = match report.extension().and_then(|e| e.to_str()) {
        Some("json") => result.to_json(),
        Some("tsv") => result.to_records(),
        _ => result.to_table(),
    };
    let parent = report.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    create_dir(parent)?;
    std::fs::write(report, text).map_err(|source| Error::Io {
        path: report.to_path_buf(),
        source,
    })?;
    print!("{}", result.to_table());
    meta::write(
        parent,
        "eval",
        argv,
        None,
        json!({ "model": model, "cohort": cohort, "subset": format!("{subset:?}").to_lowercase() }),
        json!({
            "report": report.file_name().and_then(|f| f.to_str()),
            "subjects": ids,
            "means": to_value(&result.means),
        }),
    )
}
