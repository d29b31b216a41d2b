//! Python bindings: synthetic corpora, classifiers, training and metrics.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use seqlabel_core::data::{self, split};
use seqlabel_core::train::{self, streams, DevEvaluator};
use seqlabel_core::{
    fisher_exact_p, metrics, Classifier, ContingencyTable, DatasetSpec, DescriptorScheme, Document, LabelSet,
    LabelVocabulary, Level, MethodKind, MethodOptions, ModelConfig, Prng, SizePreset, SplitMode, TrainConfig,
};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn level(n: u8) -> PyResult<Level> {
    Level::try_from(n).map_err(err)
}

fn from_json<T: serde::de::DeserializeOwned>(what: &str, text: &str) -> PyResult<T> {
    serde_json::from_value(serde_json::Value::String(text.to_string()))
        .map_err(|e| err(format!("unknown {what} {text:?}: {e}")))
}

fn method(spec: &str) -> PyResult<MethodKind> {
    let json = if spec.trim_start().starts_with('{') {
        spec.to_string()
    } else {
        format!("{{\"kind\": {spec:?}}}")
    };
    serde_json::from_str(&json).map_err(|e| err(format!("bad method {spec:?}: {e}")))
}

/// A labelled corpus with a fixed train/dev/test split.
#[pyclass(module = "seqlabel")]
pub struct Dataset {
    inner: data::Dataset,
    split: data::Split,
}

impl Dataset {
    fn wrap(inner: data::Dataset, seed: u64) -> PyResult<Self> {
        let split = split(&inner.documents, [0.8, 0.1, 0.1], SplitMode::Chronological, seed).map_err(err)?;
        Ok(Self { inner, split })
    }

    fn part(&self, name: &str) -> PyResult<Vec<&Document>> {
        let idx = match name {
            "train" => &self.split.train,
            "dev" => &self.split.dev,
            "test" => &self.split.test,
            _ => return Err(err(format!("split must be train, dev or test, not {name:?}"))),
        };
        Ok(idx.iter().map(|&i| &self.inner.documents[i]).collect())
    }
}

#[pymethods]
impl Dataset {
    /// Generates a synthetic preset ("uklex_like", "planted" or "separable").
    #[staticmethod]
    #[pyo3(signature = (preset, seed=0, num_docs=None))]
    fn synthetic(preset: &str, seed: u64, num_docs: Option<usize>) -> PyResult<Self> {
        let mut spec = DatasetSpec::preset(preset).ok_or_else(|| err(format!("unknown preset {preset:?}")))?;
        spec.seed = seed;
        if let Some(n) = num_docs {
            spec.num_docs = n;
        }
        Self::wrap(data::generate(&spec).map_err(err)?, 0)
    }

    /// Loads a corpus directory written by `save` or `seqlabel generate-data`.
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Self::wrap(data::Dataset::load_dir(&dir).map_err(err)?, 0)
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.save_dir(&dir).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.documents.len()
    }

    fn num_labels(&self, level_number: u8) -> PyResult<usize> {
        Ok(self.inner.catalog.level(level(level_number)?).len())
    }

    /// Label descriptors of a level in id order.
    #[pyo3(signature = (level_number, scheme="original"))]
    fn labels(&self, level_number: u8, scheme: &str) -> PyResult<Vec<String>> {
        let scheme: DescriptorScheme = from_json("scheme", scheme)?;
        Ok(self
            .inner
            .catalog
            .level(level(level_number)?)
            .iter()
            .map(|l| l.descriptor(scheme))
            .collect())
    }

    /// Token ids and level-1 and level-2 label ids of document `i`.
    fn document(&self, i: usize) -> PyResult<(Vec<u32>, Vec<usize>, Vec<usize>)> {
        let d = self.inner.documents.get(i).ok_or_else(|| err(format!("no document {i}")))?;
        Ok((
            d.tokens.clone(),
            d.labels_l1.iter().copied().collect(),
            d.labels_l2.iter().copied().collect(),
        ))
    }

    fn encode(&self, text: &str) -> Vec<u32> {
        self.inner.tokenizer.encode(text)
    }

    fn decode(&self, tokens: Vec<u32>) -> String {
        self.inner.tokenizer.decode(&tokens)
    }

    /// Sizes of the train, dev and test splits.
    fn split_sizes(&self) -> (usize, usize, usize) {
        (self.split.train.len(), self.split.dev.len(), self.split.test.len())
    }
}

/// A multi-label classifier bound to one dataset's labels and vocabulary.
#[pyclass(module = "seqlabel")]
pub struct Model {
    inner: Classifier,
    level: Level,
}

#[pymethods]
impl Model {
    /// `method` is a kind name such as "encoder_head" or a JSON object
    /// such as '{"kind": "lwan", "heads": 4}'.
    #[new]
    #[pyo3(signature = (dataset, method, level_number=2, scheme="pseudo", size="small", seed=0, dropout=None))]
    fn new(
        dataset: &Dataset,
        method: &str,
        level_number: u8,
        scheme: &str,
        size: &str,
        seed: u64,
        dropout: Option<f64>,
    ) -> PyResult<Self> {
        let kind = self::method(method)?;
        let level = level(level_number)?;
        let scheme: DescriptorScheme = from_json("scheme", scheme)?;
        let size: SizePreset = from_json("size", size)?;
        let mut cfg = ModelConfig::preset(size, dataset.inner.tokenizer.len());
        if let Some(p) = dropout {
            cfg.dropout = p;
        }
        let vocab = LabelVocabulary::new(&dataset.inner.catalog, level, scheme).map_err(err)?;
        let inner = Classifier::new(
            kind,
            cfg,
            vocab,
            dataset.inner.tokenizer.clone(),
            MethodOptions::default(),
            &mut Prng::derive(seed, streams::INIT),
        )
        .map_err(err)?;
        Ok(Self { inner, level })
    }

    /// Loads a checkpoint saved by `save` or by a `seqlabel` run.
    #[staticmethod]
    fn load(path: PathBuf, dataset: &Dataset) -> PyResult<Self> {
        let inner = Classifier::load(&path, &dataset.inner.catalog, dataset.inner.tokenizer.clone()).map_err(err)?;
        let level = inner.vocab().level();
        Ok(Self { inner, level })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn num_parameters(&self) -> usize {
        self.inner.params().num_scalars()
    }

    /// Trains on the train split with early stopping on dev micro-F1.
    /// Returns (epoch, train loss, dev micro-F1, dev macro-F1) per evaluation.
    #[pyo3(signature = (dataset, learning_rate=1e-3, max_epochs=10, patience=3, batch_size=8, seed=0))]
    fn fit(
        &mut self,
        dataset: &Dataset,
        learning_rate: f64,
        max_epochs: usize,
        patience: usize,
        batch_size: usize,
        seed: u64,
    ) -> PyResult<Vec<(usize, f64, f64, f64)>> {
        let cfg = TrainConfig {
            learning_rate,
            max_epochs,
            patience,
            batch_size,
            ..TrainConfig::default()
        };
        let train_docs = dataset.part("train")?;
        let dev_docs = dataset.part("dev")?;
        let mut dev = DevEvaluator {
            docs: &dev_docs,
            level: self.level,
        };
        let out = train::train(&mut self.inner, &train_docs, self.level, &cfg, seed, &mut dev).map_err(err)?;
        Ok(out
            .history
            .iter()
            .map(|r| (r.epoch, r.train_loss, r.dev_micro_f1, r.dev_macro_f1))
            .collect())
    }

    /// Predicted label ids for a token sequence.
    fn predict(&self, tokens: Vec<u32>) -> PyResult<Vec<usize>> {
        Ok(self.inner.predict(&tokens).map_err(err)?.labels.into_iter().collect())
    }

    /// Micro- and macro-F1 on a split.
    #[pyo3(signature = (dataset, split="test"))]
    fn evaluate(&self, dataset: &Dataset, split: &str) -> PyResult<(f64, f64)> {
        let docs = dataset.part(split)?;
        let (report, _) = train::evaluate_docs(&self.inner, &docs, self.level).map_err(err)?;
        Ok((report.micro_f1, report.macro_f1))
    }
}

/// Two-sided Fisher exact p-value of the table [[a, b], [c, d]].
#[pyfunction]
fn fisher_exact(a: u64, b: u64, c: u64, d: u64) -> f64 {
    fisher_exact_p(&ContingencyTable::new(a, b, c, d))
}

/// Micro- and macro-F1 of predicted against gold label-id lists.
#[pyfunction]
fn f1_scores(gold: Vec<Vec<usize>>, predicted: Vec<Vec<usize>>, num_labels: usize) -> PyResult<(f64, f64)> {
    let sets = |v: Vec<Vec<usize>>| v.into_iter().map(|s| s.into_iter().collect()).collect::<Vec<LabelSet>>();
    let report = metrics::evaluate(&sets(gold), &sets(predicted), num_labels).map_err(err)?;
    Ok((report.micro_f1, report.macro_f1))
}

#[pymodule]
fn seqlabel(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(fisher_exact, m)?)?;
    m.add_function(wrap_pyfunction!(f1_scores, m)?)?;
    Ok(())
}
