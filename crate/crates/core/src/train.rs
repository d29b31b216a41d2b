//! Training loop with warm-up, early stopping and evaluation helpers.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::Document;
use crate::error::{Error, Result};
use crate::labelspace::{LabelSet, Level};
use crate::methods::{Classifier, Prediction};
use crate::metrics::{self, MetricsReport};
use crate::optim::Adafactor;
use crate::rng::Prng;
use crate::tensor::Tensor;

/// Random streams derived from a run seed.
pub mod streams {
    pub const INIT: u64 = 0;
    pub const SHUFFLE: u64 = 1;
    pub const DROPOUT: u64 = 2;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalCadence {
    Epoch,
    Steps(u64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Ramp the learning rate linearly from 0 over the first epoch.
    pub warmup: bool,
    pub max_epochs: usize,
    /// Evaluations without improvement tolerated before stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    pub eval_every: EvalCadence,
    /// Stop once dev micro-F1 reaches this value.
    pub target_micro_f1: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            warmup: true,
            max_epochs: 20,
            patience: 3,
            batch_size: 8,
            seeds: vec![0, 1, 2, 3],
            eval_every: EvalCadence::Epoch,
            target_micro_f1: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.patience == 0 {
            return fail("patience must be at least 1".into());
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return fail("batch_size and max_epochs must be positive".into());
        }
        if self.seeds.is_empty() {
            return fail("at least one seed is required".into());
        }
        if self.eval_every == EvalCadence::Steps(0) {
            return fail("eval_every steps must be positive".into());
        }
        Ok(())
    }

    /// Learning rate for 1-based optimiser step `step`.
    pub fn lr_at(&self, step: u64, steps_per_epoch: u64) -> f64 {
        if self.warmup && step <= steps_per_epoch {
            self.learning_rate * step as f64 / steps_per_epoch as f64
        } else {
            self.learning_rate
        }
    }
}

/// One line of training history, written at every evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub eval: usize,
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    /// Mean training loss since the previous evaluation.
    pub train_loss: f64,
    pub dev_micro_f1: f64,
    pub dev_macro_f1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EvalRecord>,
    /// Per-step learning rate and loss.
    pub steps: Vec<(f64, f64)>,
    /// 1-based index of the evaluation whose parameters were kept.
    pub best_eval: usize,
    pub best_dev: MetricsReport,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn write_history<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.history {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Produces the dev metrics that drive early stopping.
pub trait Evaluator {
    fn evaluate(&mut self, model: &Classifier) -> Result<MetricsReport>;
}

/// Scores a model on held-out documents at one label level.
pub struct DevEvaluator<'a> {
    pub docs: &'a [&'a Document],
    pub level: Level,
}

impl Evaluator for DevEvaluator<'_> {
    fn evaluate(&mut self, model: &Classifier) -> Result<MetricsReport> {
        Ok(evaluate_docs(model, self.docs, self.level)?.0)
    }
}

impl<F: FnMut(&Classifier) -> Result<MetricsReport>> Evaluator for F {
    fn evaluate(&mut self, model: &Classifier) -> Result<MetricsReport> {
        self(model)
    }
}

pub fn predict_docs(model: &Classifier, docs: &[&Document]) -> Result<Vec<Prediction>> {
    docs.iter().map(|d| model.predict(&d.tokens)).collect()
}

/// Metrics plus raw predictions for a set of documents.
pub fn evaluate_docs(model: &Classifier, docs: &[&Document], level: Level) -> Result<(MetricsReport, Vec<Prediction>)> {
    let preds = predict_docs(model, docs)?;
    let gold: Vec<LabelSet> = docs.iter().map(|d| d.labels(level).clone()).collect();
    let predicted: Vec<LabelSet> = preds.iter().map(|p| p.labels.clone()).collect();
    Ok((metrics::evaluate(&gold, &predicted, model.num_labels())?, preds))
}

/// Novel-fragment telemetry over generated outputs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NovelStats {
    pub documents: usize,
    pub fragments: usize,
    pub novel: usize,
    pub documents_with_novel: usize,
}

impl NovelStats {
    pub fn from_predictions(preds: &[Prediction]) -> Self {
        let mut s = Self::default();
        for p in preds {
            if let Some(text) = &p.generated {
                s.documents += 1;
                s.fragments += text.split(',').map(str::trim).filter(|f| !f.is_empty()).count();
                s.novel += p.novel.len();
                s.documents_with_novel += usize::from(!p.novel.is_empty());
            }
        }
        s
    }

    /// Share of generated fragments that matched no descriptor, in percent.
    pub fn rate(&self) -> f64 {
        if self.fragments == 0 {
            0.0
        } else {
            100.0 * self.novel as f64 / self.fragments as f64
        }
    }
}

fn grad_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
}

/// Trains `model` in place and leaves it holding the best-scoring
/// parameters seen at any evaluation.
pub fn train<E: Evaluator>(
    model: &mut Classifier,
    train_docs: &[&Document],
    level: Level,
    cfg: &TrainConfig,
    seed: u64,
    evaluator: &mut E,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_docs.is_empty() {
        return Err(Error::Data("no training documents".into()));
    }
    let steps_per_epoch = train_docs.len().div_ceil(cfg.batch_size) as u64;
    let mut shuffle_rng = Prng::derive(seed, streams::SHUFFLE);
    let mut dropout_rng = Prng::derive(seed, streams::DROPOUT);
    let mut opt = Adafactor::new(model.params().values());
    let mut order: Vec<usize> = (0..train_docs.len()).collect();

    let mut history = Vec::new();
    let mut steps = Vec::new();
    let mut best: Option<(f64, usize, Vec<Tensor>, MetricsReport)> = None;
    let mut stale = 0;
    let mut step: u64 = 0;
    let mut loss_since_eval = (0.0, 0usize);
    let mut stopped_early = false;

    'epochs: for epoch in 1..=cfg.max_epochs {
        shuffle_rng.shuffle(&mut order);
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            step += 1;
            let lr = cfg.lr_at(step, steps_per_epoch);
            let mut sum: Option<Vec<Tensor>> = None;
            let mut batch_loss = 0.0;
            for &i in batch {
                let doc = train_docs[i];
                let mut tape = Tape::new();
                let loss = model.loss_var(&mut tape, &doc.tokens, doc.labels(level), Some(&mut dropout_rng))?;
                batch_loss += tape.value(loss).data()[0];
                let grads = tape.backward(loss)?.for_store(model.params());
                match &mut sum {
                    None => sum = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            a.add_assign(g);
                        }
                    }
                }
            }
            let mut grads = sum.expect("batches are non-empty");
            let scale = 1.0 / batch.len() as f64;
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|x| *x *= scale);
            }
            let mean_loss = batch_loss * scale;
            let norm = grad_norm(&grads);
            if !mean_loss.is_finite() || !norm.is_finite() {
                return Err(Error::NonFinite {
                    step: step as usize,
                    epoch,
                    lr,
                    grad_norm: norm,
                });
            }
            opt.step(model.params_mut().values_mut(), &grads, lr)?;
            steps.push((lr, mean_loss));
            loss_since_eval.0 += mean_loss;
            loss_since_eval.1 += 1;

            let end_of_epoch = batch_idx as u64 + 1 == steps_per_epoch;
            let due = match cfg.eval_every {
                EvalCadence::Epoch => end_of_epoch,
                EvalCadence::Steps(n) => step % n == 0,
            };
            if !due {
                continue;
            }
            let report = evaluator.evaluate(model)?;
            let eval = history.len() + 1;
            history.push(EvalRecord {
                eval,
                step,
                epoch,
                lr,
                train_loss: loss_since_eval.0 / loss_since_eval.1 as f64,
                dev_micro_f1: report.micro_f1,
                dev_macro_f1: report.macro_f1,
            });
            loss_since_eval = (0.0, 0);
            let improved = best.as_ref().is_none_or(|(score, ..)| report.micro_f1 > *score);
            if improved {
                stale = 0;
                let reached = cfg.target_micro_f1.is_some_and(|t| report.micro_f1 >= t);
                best = Some((report.micro_f1, eval, model.params().values().to_vec(), report));
                if reached {
                    stopped_early = true;
                    break 'epochs;
                }
            } else {
                stale += 1;
                if stale > cfg.patience {
                    stopped_early = true;
                    break 'epochs;
                }
            }
        }
    }

    let (best_eval, best_dev) = match best {
        Some((_, eval, values, report)) => {
            model.params_mut().values_mut().clone_from_slice(&values);
            (eval, report)
        }
        None => {
            // Fewer steps than the evaluation cadence: score the final model.
            let report = evaluator.evaluate(model)?;
            (0, report)
        }
    };
    Ok(TrainOutcome {
        history,
        steps,
        best_eval,
        best_dev,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{self, DatasetSpec};
    use crate::labelspace::{DescriptorScheme, LabelVocabulary};
    use crate::methods::{MethodKind, MethodOptions};
    use crate::transformer::{ModelConfig, SizePreset};

    fn setup(kind: MethodKind, seed: u64) -> (data::Dataset, Classifier) {
        let spec = DatasetSpec {
            num_docs: 40,
            ..DatasetSpec::separable()
        };
        let ds = data::generate(&spec).unwrap();
        let vocab = LabelVocabulary::new(&ds.catalog, Level::L1, DescriptorScheme::Simplified).unwrap();
        let cfg = ModelConfig {
            d_model: 16,
            num_heads: 2,
            d_ff: 32,
            encoder_layers: 1,
            decoder_layers: 1,
            dropout: 0.0,
            ..ModelConfig::preset(SizePreset::Small, ds.tokenizer.len())
        };
        let clf = Classifier::new(
            kind,
            cfg,
            vocab,
            ds.tokenizer.clone(),
            MethodOptions::default(),
            &mut Prng::derive(seed, streams::INIT),
        )
        .unwrap();
        (ds, clf)
    }

    fn report(micro: f64) -> MetricsReport {
        MetricsReport {
            micro_f1: micro,
            macro_f1: micro,
            per_label: Vec::new(),
        }
    }

    #[test]
    fn early_stopping_keeps_first_checkpoint() {
        let (ds, mut clf) = setup(MethodKind::EncoderHead, 0);
        let docs: Vec<&Document> = ds.documents.iter().collect();
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            patience: 1,
            batch_size: 20,
            max_epochs: 10,
            ..TrainConfig::default()
        };
        let mut snapshots = Vec::new();
        let scores = [0.6, 0.5, 0.4, 0.3, 0.2];
        let mut calls = 0;
        let mut stub = |m: &Classifier| {
            snapshots.push(m.params().values().to_vec());
            calls += 1;
            Ok(report(scores[calls - 1]))
        };
        let out = train(&mut clf, &docs, Level::L1, &cfg, 0, &mut stub).unwrap();
        assert_eq!(out.history.len(), 3);
        assert_eq!(out.best_eval, 1);
        assert!(out.stopped_early);
        assert_eq!(clf.params().values(), &snapshots[0][..]);
        assert_ne!(snapshots[0], snapshots[2]);
    }

    #[test]
    fn warmup_ramps_over_first_epoch() {
        let (ds, mut clf) = setup(MethodKind::EncoderHead, 1);
        let docs: Vec<&Document> = ds.documents.iter().collect();
        let cfg = TrainConfig {
            learning_rate: 3e-3,
            batch_size: 7,
            max_epochs: 2,
            ..TrainConfig::default()
        };
        let mut stub = |_: &Classifier| Ok(report(0.5));
        let out = train(&mut clf, &docs, Level::L1, &cfg, 0, &mut stub).unwrap();
        let per_epoch = 40usize.div_ceil(7);
        assert_eq!(out.steps.len(), 2 * per_epoch);
        for (k, (lr, _)) in out.steps.iter().enumerate() {
            let expect = if k < per_epoch {
                3e-3 * (k + 1) as f64 / per_epoch as f64
            } else {
                3e-3
            };
            assert!((lr - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let run = || {
            let (ds, mut clf) = setup(MethodKind::Lwan { heads: 1 }, 2);
            let docs: Vec<&Document> = ds.documents.iter().collect();
            let cfg = TrainConfig {
                learning_rate: 1e-2,
                batch_size: 4,
                max_epochs: 6,
                patience: 10,
                ..TrainConfig::default()
            };
            let mut dev = DevEvaluator {
                docs: &docs,
                level: Level::L1,
            };
            train(&mut clf, &docs, Level::L1, &cfg, 2, &mut dev).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.history, b.history);
        let first = a.steps[..5].iter().map(|s| s.1).sum::<f64>();
        let last = a.steps[a.steps.len() - 5..].iter().map(|s| s.1).sum::<f64>();
        assert!(last < first, "loss did not fall: {first} -> {last}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
            TrainConfig { patience: 0, ..TrainConfig::default() },
            TrainConfig { seeds: vec![], ..TrainConfig::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        let (ds, mut clf) = setup(MethodKind::EncoderHead, 3);
        let id = clf.params().lookup("head.b").unwrap();
        clf.params_mut().get_mut(id).data_mut()[0] = f64::NAN;
        let docs: Vec<&Document> = ds.documents.iter().collect();
        let mut stub = |_: &Classifier| Ok(report(0.0));
        let err = train(&mut clf, &docs, Level::L1, &TrainConfig::default(), 0, &mut stub).unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 1, epoch: 1, .. }), "{err}");
    }

    #[test]
    fn novel_stats_count_fragments() {
        let preds = vec![
            Prediction {
                labels: LabelSet::from([0]),
                generated: Some("EU, accommodation, ".into()),
                novel: vec!["accommodation".into()],
            },
            Prediction {
                labels: LabelSet::new(),
                generated: Some(String::new()),
                novel: vec![],
            },
        ];
        let s = NovelStats::from_predictions(&preds);
        assert_eq!((s.documents, s.fragments, s.novel, s.documents_with_novel), (2, 2, 1, 1));
        assert_eq!(s.rate(), 50.0);
    }
}
