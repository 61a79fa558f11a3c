//! Data loading and the train / eval / inspect / generate workflows.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use hyfuse_core::autograd::Graph;
use hyfuse_core::data::{
    load_entities, load_sequence_corpus, load_triples, sample_k_shot, SequenceExample, SequenceTask, TripleStore,
};
use hyfuse_core::model::{HybridModel, ModelInput, TaskHead};
use hyfuse_core::task_heads::EntityVocabulary;
use hyfuse_core::training_eval::{
    evaluate_ranking, evaluate_sequence, load_checkpoint, load_corpus_images, save_checkpoint, train_classifier_head,
    train_entity_modeling, train_link_prediction, Example, LinkData, MetricsReport, SequenceData, TrainTask,
};

use crate::config::RunConfig;
use crate::error::{io_err, CliError, CliResult};
use crate::manifest::RunManifest;

pub const CHECKPOINT_FILE: &str = "checkpoint.mkgc";
pub const REPORT_FILE: &str = "report.txt";
pub const REPORT_TSV: &str = "report.tsv";
pub const HISTORY_FILE: &str = "history.tsv";
pub const SWEEP_FILE: &str = "sweep.tsv";
pub const TRACE_FILE: &str = "trace.txt";

const SPLITS: [&str; 3] = ["train", "valid", "test"];

fn split_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.tsv"))
}

fn data_dir(cfg: &RunConfig) -> CliResult<&Path> {
    cfg.data_dir
        .as_deref()
        .ok_or_else(|| CliError::Usage("no data directory (use --data or `data_dir = ...`)".into()))
}

/// Split evaluated by default: `test`, else `valid`, else `train`.
fn eval_split(cfg: &RunConfig, present: &[&str]) -> CliResult<String> {
    match &cfg.eval_split {
        Some(s) if present.contains(&s.as_str()) => Ok(s.clone()),
        Some(s) => Err(CliError::Core(hyfuse_core::Error::Io {
            path: split_path(data_dir(cfg)?, s),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "requested split is missing"),
        })),
        None => Ok(["test", "valid", "train"]
            .into_iter()
            .find(|s| present.contains(s))
            .expect("train is always present")
            .to_string()),
    }
}

/// Link-prediction files of a data directory.
pub struct LinkInputs {
    pub entities: EntityVocabulary,
    /// `(split name, triples)`, train first.
    pub splits: Vec<(String, TripleStore)>,
    pub paths: Vec<PathBuf>,
}

impl LinkInputs {
    pub fn load(cfg: &RunConfig) -> CliResult<Self> {
        let dir = data_dir(cfg)?;
        let ent_path = dir.join("entities.tsv");
        let entities = load_entities(&ent_path, dir, &cfg.image_spec())?;
        let mut paths = vec![ent_path];
        let mut splits = Vec::new();
        for s in SPLITS {
            let p = split_path(dir, s);
            if s == "train" || p.exists() {
                splits.push((s.to_string(), load_triples(&p)?));
                paths.push(p);
            }
        }
        Ok(Self { entities, splits, paths })
    }

    fn split(&self, name: &str) -> &TripleStore {
        &self.splits.iter().find(|(n, _)| n == name).expect("split present").1
    }

    fn data(&self) -> CliResult<LinkData> {
        let others: Vec<&TripleStore> = self.splits[1..].iter().map(|(_, s)| s).collect();
        Ok(LinkData::new(self.entities.clone(), self.splits[0].1.clone(), &others)?)
    }

    fn filter(&self) -> TripleStore {
        TripleStore::merged(self.splits.iter().map(|(_, s)| s))
    }

    fn names(&self) -> Vec<&str> {
        self.splits.iter().map(|(n, _)| n.as_str()).collect()
    }
}

/// RE or NER files of a data directory, images already loaded.
pub struct SequenceInputs {
    pub splits: Vec<(String, Vec<SequenceExample>, Vec<Vec<hyfuse_core::data::ImageTensor>>)>,
    pub paths: Vec<PathBuf>,
}

impl SequenceInputs {
    pub fn load(cfg: &RunConfig, task: SequenceTask) -> CliResult<Self> {
        let dir = data_dir(cfg)?;
        let mut splits = Vec::new();
        let mut paths = Vec::new();
        for s in SPLITS {
            let p = split_path(dir, s);
            if s == "train" || p.exists() {
                let corpus = load_sequence_corpus(&p, task, true)?;
                let images = load_corpus_images(&corpus, dir, &cfg.image_spec())?;
                splits.push((s.to_string(), corpus, images));
                paths.push(p);
            }
        }
        Ok(Self { splits, paths })
    }

    fn data(&self, task: SequenceTask) -> CliResult<SequenceData> {
        let corpora: Vec<&[SequenceExample]> = self.splits.iter().map(|(_, c, _)| c.as_slice()).collect();
        Ok(SequenceData::new(task, &corpora)?)
    }

    fn split(&self, name: &str) -> (&[SequenceExample], &[Vec<hyfuse_core::data::ImageTensor>]) {
        let (_, c, i) = self.splits.iter().find(|(n, _, _)| n == name).expect("split present");
        (c, i)
    }

    fn names(&self) -> Vec<&str> {
        self.splits.iter().map(|(n, _, _)| n.as_str()).collect()
    }
}

pub enum Inputs {
    Link(LinkInputs),
    Sequence(SequenceTask, SequenceInputs),
}

impl Inputs {
    pub fn load(cfg: &RunConfig) -> CliResult<Self> {
        Ok(match cfg.train.task {
            TrainTask::Link => Inputs::Link(LinkInputs::load(cfg)?),
            TrainTask::Re => Inputs::Sequence(SequenceTask::Re, SequenceInputs::load(cfg, SequenceTask::Re)?),
            TrainTask::Ner => Inputs::Sequence(SequenceTask::Ner, SequenceInputs::load(cfg, SequenceTask::Ner)?),
        })
    }

    pub fn paths(&self) -> &[PathBuf] {
        match self {
            Inputs::Link(l) => &l.paths,
            Inputs::Sequence(_, s) => &s.paths,
        }
    }
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_report(dir: &Path, report: &MetricsReport) -> CliResult<()> {
    write_file(&dir.join(REPORT_FILE), &report.to_kv())?;
    write_file(&dir.join(REPORT_TSV), &format!("{}\n{}\n", report.tsv_header(), report.tsv_row()))
}

/// Records `(phase, epoch, loss)` and logs progress.
struct History {
    phase: &'static str,
    text: String,
}

impl History {
    fn new() -> Self {
        Self {
            phase: "",
            text: "phase\tepoch\tloss\n".into(),
        }
    }

    fn record(&mut self, epoch: usize, loss: f64) -> hyfuse_core::Result<ControlFlow<()>> {
        let _ = writeln!(self.text, "{}\t{epoch}\t{loss}", self.phase);
        if epoch.is_multiple_of(10) || epoch == 1 {
            log::info!("{} epoch {epoch}: loss {loss:.6}", self.phase);
        }
        Ok(ControlFlow::Continue(()))
    }
}

/// Builds a model for `inputs`, initialised from `seed`.
fn build_model(cfg: &RunConfig, inputs: &Inputs, seed: u64) -> CliResult<HybridModel> {
    Ok(match inputs {
        Inputs::Link(l) => {
            let data = l.data()?;
            HybridModel::new(cfg.model.clone(), data.vocab.len(), data.entities.len(), TaskHead::Link, seed)?
        }
        Inputs::Sequence(task, s) => {
            let data = s.data(*task)?;
            HybridModel::new(cfg.model.clone(), data.vocab.len(), 0, data.head(), seed)?
        }
    })
}

fn evaluate(cfg: &RunConfig, inputs: &Inputs, model: &HybridModel) -> CliResult<MetricsReport> {
    let report = match inputs {
        Inputs::Link(l) => {
            let split = eval_split(cfg, &l.names())?;
            let data = l.data()?;
            let m = evaluate_ranking(model, &data, l.split(&split), &l.filter())?;
            MetricsReport::ranking("link", &m).with_meta("split", split)
        }
        Inputs::Sequence(task, s) => {
            let split = eval_split(cfg, &s.names())?;
            let data = s.data(*task)?;
            let (corpus, images) = s.split(&split);
            let examples = data.examples(corpus, images)?;
            let prf = evaluate_sequence(model, &data, &examples)?;
            let name = if *task == SequenceTask::Re { "re" } else { "ner" };
            MetricsReport::prf(name, &prf).with_meta("split", split)
        }
    };
    Ok(report
        .with_meta("seed", cfg.train.seed)
        .with_meta("config_hash", cfg.hash())
        .with_meta("ablation", cfg.model.ablation.as_str())
        .with_meta("lm_layers", cfg.model.fusion_layers))
}

/// Trains one model with `cfg.train.seed`, writes its checkpoint, loss
/// history and report into `out`, and returns the report.
pub fn train_once(cfg: &RunConfig, inputs: &Inputs, out: &Path) -> CliResult<MetricsReport> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let seed = cfg.train.seed;
    let mut model = build_model(cfg, inputs, seed)?;
    let mut history = History::new();
    match inputs {
        Inputs::Link(l) => {
            let mut data = l.data()?;
            if let Some(k) = cfg.train.k_shot {
                let picked = sample_k_shot(data.train.triples(), k, seed, |t| t.relation.clone())?;
                data.train = TripleStore::from_triples(picked);
            }
            if cfg.train.entity_phase {
                history.phase = "entity";
                train_entity_modeling(&mut model, &data, &cfg.train, &mut |e, l, _| history.record(e, l))?;
            }
            if cfg.train.triple_phase {
                history.phase = "triple";
                train_link_prediction(&mut model, &data, &cfg.train, &mut |e, l, _| history.record(e, l))?;
            }
        }
        Inputs::Sequence(task, s) => {
            let data = s.data(*task)?;
            let (corpus, images) = s.split("train");
            let mut examples: Vec<Example> = data.examples(corpus, images)?;
            if let Some(k) = cfg.train.k_shot {
                let labelled: Vec<(String, Example)> =
                    corpus.iter().map(|c| c.class_label()).zip(examples).collect();
                examples = sample_k_shot(&labelled, k, seed, |(c, _)| c.clone())?
                    .into_iter()
                    .map(|(_, e)| e)
                    .collect();
            }
            history.phase = "task";
            train_classifier_head(&mut model, &examples, &cfg.train, &mut |e, l, _| history.record(e, l))?;
        }
    }
    save_checkpoint(&model.store, &out.join(CHECKPOINT_FILE))?;
    write_file(&out.join(HISTORY_FILE), &history.text)?;
    let report = evaluate(cfg, inputs, &model)?;
    write_report(out, &report)?;
    Ok(report)
}

/// One training run per seed; with several seeds each run goes to
/// `out/seed<k>` and the averaged report to `out`.
pub fn train_seeds(cfg: &RunConfig, inputs: &Inputs, out: &Path) -> CliResult<MetricsReport> {
    if cfg.seeds <= 1 {
        return train_once(cfg, inputs, out);
    }
    let mut reports = Vec::with_capacity(cfg.seeds);
    for k in 0..cfg.seeds {
        let mut sub = cfg.clone();
        sub.seeds = 1;
        sub.train.seed = cfg.train.seed.wrapping_add(k as u64);
        let dir = out.join(format!("seed{k}"));
        sub.output_dir = Some(dir.clone());
        RunManifest::new("train", &sub, inputs.paths().to_vec(), &dir).write()?;
        log::info!("seed {} ({}/{})", sub.train.seed, k + 1, cfg.seeds);
        reports.push(train_once(&sub, inputs, &dir)?);
    }
    let avg = MetricsReport::average(&reports)?
        .with_meta("seed", cfg.train.seed)
        .with_meta("config_hash", cfg.hash());
    write_report(out, &avg)?;
    Ok(avg)
}

/// Appends one row per variant to `out/sweep.tsv`, writing the header when
/// the file is new.
fn append_sweep_row(out: &Path, cfg: &RunConfig, report: &MetricsReport) -> CliResult<()> {
    let path = out.join(SWEEP_FILE);
    let header = format!("lm_layers\tablation\t{}", report.tsv_header());
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| io_err(&path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(&header);
        text.push('\n');
    }
    let _ = writeln!(text, "{}\t{}\t{}", cfg.model.fusion_layers, cfg.model.ablation.as_str(), report.tsv_row());
    f.write_all(text.as_bytes()).map_err(|e| io_err(&path, e))
}

/// Trains every `(lm_layers, ablation)` combination into `out/lm<L>_<ablation>`
/// and tabulates the reports in `out/sweep.tsv`.
pub fn train_sweep(inputs: &Inputs, out: &Path, variants: &[RunConfig]) -> CliResult<Vec<MetricsReport>> {
    let mut reports = Vec::with_capacity(variants.len());
    for v in variants {
        let dir = out.join(format!("lm{}_{}", v.model.fusion_layers, v.model.ablation.as_str()));
        let mut v = v.clone();
        v.output_dir = Some(dir.clone());
        RunManifest::new("train", &v, inputs.paths().to_vec(), &dir).write()?;
        log::info!("variant lm_layers={} ablation={}", v.model.fusion_layers, v.model.ablation.as_str());
        let report = train_seeds(&v, inputs, &dir)?;
        append_sweep_row(out, &v, &report)?;
        reports.push(report);
    }
    Ok(reports)
}

/// Rebuilds the model described by `cfg`, loads `checkpoint` and evaluates it.
pub fn eval_checkpoint(cfg: &RunConfig, inputs: &Inputs, checkpoint: &Path, out: &Path) -> CliResult<MetricsReport> {
    cfg.validate()?;
    let mut model = build_model(cfg, inputs, cfg.train.seed)?;
    load_checkpoint(&mut model.store, checkpoint)?;
    let report = evaluate(cfg, inputs, &model)?;
    write_report(out, &report)?;
    Ok(report)
}

/// Forward pass on example `index` of the training split with fusion tracing on.
pub fn trace_example(cfg: &RunConfig, inputs: &Inputs, checkpoint: Option<&Path>, index: usize) -> CliResult<String> {
    cfg.validate()?;
    let mut model = build_model(cfg, inputs, cfg.train.seed)?;
    if let Some(c) = checkpoint {
        load_checkpoint(&mut model.store, c)?;
    }
    let input: ModelInput = match inputs {
        Inputs::Link(l) => {
            let data = l.data()?;
            let t = data
                .train
                .triples()
                .get(index)
                .ok_or_else(|| CliError::Usage(format!("index {index} beyond {} triples", data.train.len())))?;
            data.tail_query(&model, &t.head, &t.relation)?.0
        }
        Inputs::Sequence(task, s) => {
            let data = s.data(*task)?;
            let (corpus, images) = s.split("train");
            if index >= corpus.len() {
                return Err(CliError::Usage(format!("index {index} beyond {} examples", corpus.len())));
            }
            data.examples(&corpus[index..=index], &images[index..=index])?.remove(0).input
        }
    };
    let mut g = Graph::new();
    let out = model.forward(&mut g, &input, true)?;
    Ok(out.trace.map(|t| t.dump()).unwrap_or_default())
}

/// Parameter names, shapes and sizes of the model `cfg` would build.
pub fn describe_model(cfg: &RunConfig, inputs: &Inputs) -> CliResult<String> {
    cfg.validate()?;
    let model = build_model(cfg, inputs, cfg.train.seed)?;
    let mut s = String::from("name\trows\tcols\n");
    for (_, p) in model.store.iter() {
        let _ = writeln!(s, "{}\t{}\t{}", p.name, p.value.rows(), p.value.cols());
    }
    let _ = writeln!(s, "# parameters: {}", model.store.total_entries());
    Ok(s)
}
