//! Experiment orchestration: data and knowledge loading, single runs,
//! ablation batches and prompt-length sweeps.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{load_dataset, QaInstance};
use crate::error::{GsapError, Result};
use crate::knowledge::{EvidenceCorpus, ParaphraseDict, TripleStore};
use crate::model::{Ablation, Knowledge, Model, ModelConfig};
use crate::synth::{generate_synthetic, SynthConfig};
use crate::trainer::{evaluate, train, FreezeGuard, LogEntry, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub triples: Option<PathBuf>,
    pub paraphrases: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
}

/// One experiment. Data comes from `paths` unless `synthetic` is set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub paths: DataPaths,
    pub synthetic: Option<SynthConfig>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Prompt lengths for sweep mode.
    pub sweep: Vec<usize>,
    /// Where pruned dev graphs are written, if anywhere.
    pub dump_graphs: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            paths: DataPaths::default(),
            synthetic: Some(SynthConfig::default()),
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
            sweep: vec![2, 4, 8, 16, 32],
            dump_graphs: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GsapError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.synthetic.is_none() && (self.paths.train.is_none() || self.paths.dev.is_none()) {
            return Err(GsapError::Config("train and dev paths are required without synthetic data".into()));
        }
        Ok(())
    }

    pub fn with_ablation(&self, ablation: Ablation) -> Self {
        let mut c = self.clone();
        c.model.ablation = ablation;
        c
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub train: Vec<QaInstance>,
    pub dev: Vec<QaInstance>,
    pub test: Vec<QaInstance>,
    pub knowledge: Knowledge,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    if let Some(s) = &cfg.synthetic {
        let d = generate_synthetic(s);
        return Ok(ExperimentData {
            train: d.train,
            dev: d.dev,
            test: Vec::new(),
            knowledge: Knowledge::new(d.store, d.paraphrases, EvidenceCorpus::default()),
        });
    }
    let need = |p: &Option<PathBuf>, what: &str| {
        p.clone().ok_or_else(|| GsapError::Config(format!("missing {what} path")))
    };
    let train = load_dataset(&need(&cfg.paths.train, "train")?)?.instances;
    let dev = load_dataset(&need(&cfg.paths.dev, "dev")?)?.instances;
    let test = match &cfg.paths.test {
        Some(p) => load_dataset(p)?.instances,
        None => Vec::new(),
    };
    let triples = match &cfg.paths.triples {
        Some(p) => TripleStore::load(p)?,
        None => TripleStore::default(),
    };
    let paraphrases = match &cfg.paths.paraphrases {
        Some(p) => ParaphraseDict::load(p)?,
        None => ParaphraseDict::new(),
    };
    let corpus = match &cfg.paths.corpus {
        Some(p) => EvidenceCorpus::load(p)?,
        None => EvidenceCorpus::default(),
    };
    Ok(ExperimentData { train, dev, test, knowledge: Knowledge::new(triples, paraphrases, corpus) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub variant: String,
    pub dev_acc: f64,
    pub test_acc: Option<f64>,
    pub steps: usize,
    pub wall_time_s: f64,
    /// Instances skipped because no question entity could be grounded.
    pub skipped: usize,
    pub frozen_intact: bool,
    pub log: Vec<LogEntry>,
}

/// Build, train and evaluate one configuration on already loaded data.
pub fn run_on(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<Report> {
    cfg.validate()?;
    let start = Instant::now();
    let knowledge = data.knowledge.restricted(&cfg.model.ablation);
    let mut model = Model::for_data(cfg.model.clone(), &data.knowledge, &[&data.train, &data.dev, &data.test])?;
    let guard = FreezeGuard::new(&model.store);
    let (train_set, s1) = model.prepare_all(&data.train, &knowledge)?;
    let (dev_set, s2) = model.prepare_all(&data.dev, &knowledge)?;
    let (test_set, s3) = model.prepare_all(&data.test, &knowledge)?;
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(GsapError::Config("no grounded train or dev instances".into()));
    }
    let tr = train(&mut model, &train_set, &dev_set, &cfg.train)?;
    let dev_acc = evaluate(&model, &dev_set)?;
    let test_acc = if test_set.is_empty() { None } else { Some(evaluate(&model, &test_set)?) };
    if let Some(dir) = &cfg.dump_graphs {
        dump_graphs(&model, &dev_set, dir)?;
    }
    Ok(Report {
        variant: cfg.model.ablation.label(),
        dev_acc,
        test_acc,
        steps: tr.steps,
        wall_time_s: start.elapsed().as_secs_f64(),
        skipped: s1 + s2 + s3,
        frozen_intact: guard.check(&model.store),
        log: tr.log,
    })
}

pub fn run(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    run_on(cfg, &load_data(cfg)?)
}

/// Runs every variant on the same data.
pub fn ablate(cfg: &ExperimentConfig, variants: &[Ablation]) -> Result<Vec<Report>> {
    for v in variants {
        v.validate()?;
    }
    let data = load_data(cfg)?;
    variants.iter().map(|v| run_on(&cfg.with_ablation(v.clone()), &data)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub k: usize,
    pub report: Report,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
    /// Qualitative shape of dev accuracy against prompt length.
    pub shape: String,
}

/// `rising`, `rising-then-flat-or-declining`, `flat`, `declining` or `irregular`,
/// with changes within `tol` counted as flat.
pub fn curve_shape(values: &[f64], tol: f64) -> String {
    let steps: Vec<i8> = values
        .windows(2)
        .map(|w| {
            let d = w[1] - w[0];
            if d > tol {
                1
            } else if d < -tol {
                -1
            } else {
                0
            }
        })
        .collect();
    let peak = steps.iter().rposition(|&s| s == 1);
    let shape = match peak {
        None if steps.iter().all(|&s| s == 0) => "flat",
        None if steps.iter().all(|&s| s <= 0) => "declining",
        Some(p) if steps[..=p].iter().all(|&s| s >= 0) && p + 1 == steps.len() => "rising",
        Some(p) if steps[..=p].iter().all(|&s| s >= 0) => "rising-then-flat-or-declining",
        _ => "irregular",
    };
    shape.to_string()
}

pub fn sweep(cfg: &ExperimentConfig, lengths: &[usize]) -> Result<SweepReport> {
    if lengths.is_empty() {
        return Err(GsapError::Config("sweep needs at least one prompt length".into()));
    }
    let data = load_data(cfg)?;
    let mut points = Vec::with_capacity(lengths.len());
    for &k in lengths {
        let mut c = cfg.clone();
        c.model.prompt_length = k;
        let mut report = run_on(&c, &data)?;
        report.variant = format!("{} k={k}", report.variant);
        points.push(SweepPoint { k, report });
    }
    let accs: Vec<f64> = points.iter().map(|p| p.report.dev_acc).collect();
    Ok(SweepReport { shape: curve_shape(&accs, 0.01), points })
}

/// Writes the pruned graphs of every choice as `<id>.<choice>.json`.
pub fn dump_graphs(model: &Model, data: &[crate::model::Prepared], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| GsapError::io(dir, e))?;
    for p in data {
        let mut tape = gsap_autograd::Tape::new();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let out = model.forward(&mut tape, p, false, &mut rng)?;
        for (i, g) in out.graphs.iter().enumerate() {
            g.dump(&dir.join(format!("{}.{i}.json", p.id)))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes() {
        assert_eq!(curve_shape(&[0.5, 0.6, 0.7], 0.01), "rising");
        assert_eq!(curve_shape(&[0.5, 0.7, 0.7, 0.6], 0.01), "rising-then-flat-or-declining");
        assert_eq!(curve_shape(&[0.7, 0.7], 0.01), "flat");
        assert_eq!(curve_shape(&[0.7, 0.6], 0.01), "declining");
        assert_eq!(curve_shape(&[0.7, 0.6, 0.8], 0.01), "irregular");
    }

    #[test]
    fn conflicting_flags_rejected() {
        let cfg = ExperimentConfig::default()
            .with_ablation(Ablation { no_prompt: true, random_prompt: true, ..Ablation::default() });
        assert!(matches!(run(&cfg), Err(GsapError::ConflictingFlags(_))));
    }
}
