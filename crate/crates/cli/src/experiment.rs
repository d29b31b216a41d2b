//! Corpus loading, grid execution and per-run artifacts.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use seqlabel_core::data::{self, Split, CORPUS_FILE, LABELS_FILE, VOCAB_FILE};
use seqlabel_core::train::{self, streams, DevEvaluator, NovelStats};
use seqlabel_core::{
    AttentionScheme, Classifier, Dataset, DatasetSpec, Decoding, Document, LabelCatalog, LabelVocabulary, Level,
    MethodKind, MetricsReport, Prediction, Prng, SizePreset, Tokenizer,
};

use crate::config::{sha256_hex, DataSource, ExperimentConfig};
use crate::error::{CliError, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const GENERATIONS_FILE: &str = "generations.jsonl";
pub const EVALUATION_FILE: &str = "evaluation.json";
pub const MANIFEST_FILE: &str = "manifest.json";

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

/// One grid cell: a method, optionally with a non-default decoder depth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub method: MethodKind,
    pub decoder_layers: Option<usize>,
}

impl Cell {
    pub fn new(method: MethodKind) -> Self {
        Self {
            method,
            decoder_layers: None,
        }
    }

    /// Directory-safe identifier, unique per method variant.
    pub fn slug(&self) -> String {
        let base = match self.method {
            MethodKind::EncoderHead => "encoder_head".to_string(),
            MethodKind::Lwan { heads } => format!("lwan{heads}"),
            MethodKind::Seq2Seq { decoding: Decoding::Greedy } => "seq2seq_greedy".into(),
            MethodKind::Seq2Seq { decoding: Decoding::Beam(w) } => format!("seq2seq_beam{w}"),
            MethodKind::T5Enc { scheme } => format!("t5enc_{}", scheme.name()),
            MethodKind::T5EncSingleStep => "t5enc_single".into(),
        };
        match self.decoder_layers {
            Some(n) => format!("{base}_dec{n}"),
            None => base,
        }
    }

    pub fn label(&self) -> String {
        match self.decoder_layers {
            Some(n) => format!("{} N={n}", self.method),
            None => self.method.to_string(),
        }
    }

    /// Table position: encoder-only methods first, then decoder variants.
    pub fn rank(&self) -> (u8, usize, usize) {
        let (group, detail) = match self.method {
            MethodKind::EncoderHead => (0, 0),
            MethodKind::Lwan { heads } => (1, heads),
            MethodKind::T5EncSingleStep => (2, 0),
            MethodKind::Seq2Seq { decoding: Decoding::Greedy } => (3, 0),
            MethodKind::Seq2Seq { decoding: Decoding::Beam(w) } => (3, w),
            MethodKind::T5Enc { scheme: AttentionScheme::Causal } => (4, 0),
            MethodKind::T5Enc { scheme: AttentionScheme::None } => (5, 0),
            MethodKind::T5Enc { scheme: AttentionScheme::Full } => (6, 0),
        };
        (group, detail, self.decoder_layers.unwrap_or(0))
    }
}

/// Novel-fragment telemetry for one Seq2Seq run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NovelReport {
    pub stats: NovelStats,
    /// Novel fragments per hundred generated fragments.
    pub rate: f64,
    /// Distinct novel strings, sorted.
    pub distinct: Vec<String>,
}

impl NovelReport {
    pub fn from_predictions(preds: &[Prediction]) -> Self {
        let stats = NovelStats::from_predictions(preds);
        let mut distinct: Vec<String> = preds.iter().flat_map(|p| p.novel.iter().cloned()).collect();
        distinct.sort();
        distinct.dedup();
        Self {
            rate: stats.rate(),
            stats,
            distinct,
        }
    }
}

/// Everything stored about one finished run; tables are rebuilt from these.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: String,
    pub dataset: String,
    pub level: Level,
    pub cell: Cell,
    pub size: SizePreset,
    pub seed: u64,
    pub best_eval: usize,
    pub evaluations: usize,
    pub stopped_early: bool,
    pub dev: MetricsReport,
    pub test: MetricsReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub novel: Option<NovelReport>,
}

/// One line of a Seq2Seq generation log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationLog {
    pub id: u64,
    pub generated: String,
    pub predicted: Vec<usize>,
    pub novel: Vec<String>,
}

/// A loaded, validated experiment.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub dataset: Dataset,
    pub dataset_name: String,
    pub split: Split,
    pub config_hash: String,
    pub corpus_hash: String,
}

fn load_jsonl(path: &Path) -> seqlabel_core::Result<Dataset> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let catalog = LabelCatalog::load(&dir.join(LABELS_FILE))?;
    let tokenizer = Tokenizer::load(&dir.join(VOCAB_FILE))?;
    let file = File::open(path)?;
    Dataset::read_jsonl(BufReader::new(file), catalog, tokenizer)
}

/// Generates or reads the configured corpus, returning it with its name.
pub fn load_dataset(config: &ExperimentConfig) -> Result<(Dataset, String)> {
    let loaded = match config.source()? {
        DataSource::Synthetic(spec) => {
            spec.validate().map_err(config_err)?;
            let name = spec.name.clone();
            (data::generate(&spec).map_err(config_err)?, name)
        }
        DataSource::Directory(dir) => {
            let name = file_stem(&dir);
            (Dataset::load_dir(&dir).map_err(|e| config_err(format!("{}: {e}", dir.display())))?, name)
        }
        DataSource::Jsonl(path) => {
            let name = file_stem(&path);
            (load_jsonl(&path).map_err(|e| config_err(format!("{}: {e}", path.display())))?, name)
        }
    };
    Ok(loaded)
}

fn file_stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into())
}

/// SHA-256 of the corpus as JSONL followed by its label catalog.
pub fn corpus_hash(ds: &Dataset) -> Result<String> {
    let mut bytes = Vec::new();
    ds.write_jsonl(&mut bytes)?;
    bytes.extend_from_slice(ds.catalog.to_tsv().as_bytes());
    Ok(sha256_hex(&bytes))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(CliError::io(path.display().to_string()))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(CliError::io(path.display().to_string()))?;
    Ok(serde_json::from_str(&text)?)
}

impl Experiment {
    /// Validates the config, loads the corpus and splits it. Any failure here
    /// is reported as a configuration error.
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let (dataset, dataset_name) = load_dataset(&config)?;
        let split = data::split(
            &dataset.documents,
            config.split.fractions,
            config.split.mode,
            config.split.seed,
        )
        .map_err(config_err)?;
        let config_hash = config.hash()?;
        let corpus_hash = corpus_hash(&dataset)?;
        let exp = Self {
            config,
            dataset,
            dataset_name,
            split,
            config_hash,
            corpus_hash,
        };
        exp.vocabulary()?;
        Ok(exp)
    }

    pub fn level(&self) -> Level {
        self.config.level
    }

    pub fn vocabulary(&self) -> Result<LabelVocabulary> {
        LabelVocabulary::new(&self.dataset.catalog, self.config.level, self.config.scheme).map_err(config_err)
    }

    pub fn build(&self, cell: &Cell, seed: u64) -> Result<Classifier> {
        let mut cfg = self.config.model_config(self.dataset.tokenizer.len())?;
        if let Some(n) = cell.decoder_layers {
            cfg.decoder_layers = n;
        }
        let mut rng = Prng::derive(seed, streams::INIT);
        Classifier::new(
            cell.method,
            cfg,
            self.vocabulary()?,
            self.dataset.tokenizer.clone(),
            self.config.options.clone(),
            &mut rng,
        )
        .map_err(|e| config_err(format!("{}: {e}", cell.method)))
    }

    /// Constructs every cell once so that invalid combinations surface before
    /// any training starts.
    pub fn check_cells(&self, cells: &[Cell]) -> Result<()> {
        if cells.is_empty() {
            return Err(CliError::Config("no methods to run".into()));
        }
        for cell in cells {
            self.build(cell, 0)?;
        }
        Ok(())
    }

    pub fn run_name(&self, cell: &Cell, seed: u64) -> String {
        format!(
            "{}_{}_{}_{}_seed{seed}",
            self.dataset_name,
            self.config.level,
            cell.slug(),
            self.config.size.name()
        )
    }

    fn docs(&self, positions: &[usize]) -> Vec<&Document> {
        self.dataset.subset(positions)
    }

    /// Trains one cell with one seed and writes its run directory.
    pub fn run(&self, cell: &Cell, seed: u64, out: &Path) -> Result<RunRecord> {
        let name = self.run_name(cell, seed);
        let dir = out.join(&name);
        fs::create_dir_all(&dir).map_err(CliError::io(dir.display().to_string()))?;
        let level = self.level();
        let train_docs = self.docs(&self.split.train);
        let dev_docs = self.docs(&self.split.dev);
        let test_docs = self.docs(&self.split.test);
        let mut model = self.build(cell, seed)?;
        log::info!("{name}: training on {} documents", train_docs.len());
        let failed = |source| CliError::Training {
            run: name.clone(),
            source,
        };
        let mut dev = DevEvaluator {
            docs: &dev_docs,
            level,
        };
        let outcome = train::train(&mut model, &train_docs, level, &self.config.train, seed, &mut dev).map_err(failed)?;
        let (test, preds) = train::evaluate_docs(&model, &test_docs, level).map_err(failed)?;
        log::info!(
            "{name}: best eval {} of {}, test micro-F1 {:.4} macro-F1 {:.4}",
            outcome.best_eval,
            outcome.history.len(),
            test.micro_f1,
            test.macro_f1
        );

        model.save(&dir.join(CHECKPOINT_FILE))?;
        let path = dir.join(HISTORY_FILE);
        let mut w = BufWriter::new(File::create(&path).map_err(CliError::io(path.display().to_string()))?);
        outcome.write_history(&mut w)?;
        w.flush().map_err(CliError::io(path.display().to_string()))?;

        let novel = if cell.method.is_generative() {
            write_generations(&dir.join(GENERATIONS_FILE), &test_docs, &preds)?;
            Some(NovelReport::from_predictions(&preds))
        } else {
            None
        };
        let record = RunRecord {
            run: name,
            dataset: self.dataset_name.clone(),
            level,
            cell: *cell,
            size: self.config.size,
            seed,
            best_eval: outcome.best_eval,
            evaluations: outcome.history.len(),
            stopped_early: outcome.stopped_early,
            dev: outcome.best_dev,
            test,
            novel,
        };
        write_json(&dir.join(METRICS_FILE), &record)?;
        Ok(record)
    }

    /// Runs every cell with every seed, cells outermost.
    pub fn run_grid(&self, cells: &[Cell], seeds: &[u64], out: &Path) -> Result<Vec<RunRecord>> {
        self.check_cells(cells)?;
        let mut records = Vec::with_capacity(cells.len() * seeds.len());
        for cell in cells {
            for &seed in seeds {
                records.push(self.run(cell, seed, out)?);
            }
        }
        Ok(records)
    }

    /// Re-scores stored checkpoints on the test split.
    pub fn evaluate_grid(&self, cells: &[Cell], seeds: &[u64], out: &Path) -> Result<Vec<RunRecord>> {
        let test_docs = self.docs(&self.split.test);
        let mut records = Vec::new();
        for cell in cells {
            for &seed in seeds {
                let dir = out.join(self.run_name(cell, seed));
                let mut record: RunRecord = read_json(&dir.join(METRICS_FILE))?;
                let model = Classifier::load(
                    &dir.join(CHECKPOINT_FILE),
                    &self.dataset.catalog,
                    self.dataset.tokenizer.clone(),
                )
                .map_err(|e| config_err(format!("{}: {e}", dir.display())))?;
                let (test, preds) = train::evaluate_docs(&model, &test_docs, self.level())?;
                record.test = test;
                record.novel = cell.method.is_generative().then(|| NovelReport::from_predictions(&preds));
                write_json(&dir.join(EVALUATION_FILE), &record)?;
                records.push(record);
            }
        }
        Ok(records)
    }

    pub fn write_manifest(&self, out: &Path, verb: &str, runs: &[RunRecord]) -> Result<()> {
        let manifest = serde_json::json!({
            "verb": verb,
            "config_hash": self.config_hash,
            "corpus_hash": self.corpus_hash,
            "dataset": self.dataset_name,
            "documents": self.dataset.documents.len(),
            "split": {
                "train": self.split.train.len(),
                "dev": self.split.dev.len(),
                "test": self.split.test.len(),
            },
            "runs": runs.iter().map(|r| &r.run).collect::<Vec<_>>(),
            "config": self.config,
        });
        write_json(&out.join(MANIFEST_FILE), &manifest)
    }
}

fn write_generations(path: &Path, docs: &[&Document], preds: &[Prediction]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(CliError::io(path.display().to_string()))?);
    for (doc, p) in docs.iter().zip(preds) {
        let line = GenerationLog {
            id: doc.id,
            generated: p.generated.clone().unwrap_or_default(),
            predicted: p.labels.iter().copied().collect(),
            novel: p.novel.clone(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(CliError::io(path.display().to_string()))?;
    }
    w.flush().map_err(CliError::io(path.display().to_string()))
}

/// Reads every run record under `out`, ordered by run name.
pub fn load_runs(out: &Path) -> Result<Vec<RunRecord>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(out)
        .map_err(CliError::io(out.display().to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(METRICS_FILE).is_file())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| read_json(&d.join(METRICS_FILE))).collect()
}

/// Writes a synthetic corpus and its spec into `dir`.
pub fn generate_data(spec: &DatasetSpec, dir: &Path) -> Result<Dataset> {
    spec.validate().map_err(config_err)?;
    let ds = data::generate(spec).map_err(config_err)?;
    ds.save_dir(dir)?;
    write_json(&dir.join(data::SPEC_FILE), spec)?;
    Ok(ds)
}

/// Corpus file name written by [`generate_data`].
pub fn corpus_path(dir: &Path) -> PathBuf {
    dir.join(CORPUS_FILE)
}
