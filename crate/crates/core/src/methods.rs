//! Classification methods built on the shared encoder-decoder.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{log_softmax, sigmoid, Tape, Var};
use crate::decoding::{self, Decoding, Hypothesis};
use crate::error::{Error, Result};
use crate::labelspace::{DescriptorScheme, LabelCatalog, LabelSet, LabelVocabulary, Level};
use crate::params::{ParamId, ParamStore};
use crate::rng::Prng;
use crate::tensor::Tensor;
use crate::tokenizer::{Tokenizer, EOS_ID, PAD_ID};
use crate::transformer::{AttentionScheme, Dropout, Forward, ModelConfig, Transformer};

/// LWAN head counts in the usual sweep.
pub const STANDARD_LWAN_HEADS: [usize; 4] = [1, 4, 6, 12];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MethodKind {
    EncoderHead,
    Lwan { heads: usize },
    #[serde(rename = "seq2seq")]
    Seq2Seq { decoding: Decoding },
    #[serde(rename = "t5enc")]
    T5Enc { scheme: AttentionScheme },
    #[serde(rename = "t5enc_single")]
    T5EncSingleStep,
}

impl MethodKind {
    pub fn slug(&self) -> &'static str {
        match self {
            MethodKind::EncoderHead => "encoder_head",
            MethodKind::Lwan { .. } => "lwan",
            MethodKind::Seq2Seq { .. } => "seq2seq",
            MethodKind::T5Enc { .. } => "t5enc",
            MethodKind::T5EncSingleStep => "t5enc_single",
        }
    }

    pub fn uses_decoder(&self) -> bool {
        !matches!(self, MethodKind::EncoderHead | MethodKind::Lwan { .. })
    }

    pub fn is_generative(&self) -> bool {
        matches!(self, MethodKind::Seq2Seq { .. })
    }

    /// False for LWAN head counts outside the usual sweep.
    pub fn is_standard_config(&self) -> bool {
        match self {
            MethodKind::Lwan { heads } => STANDARD_LWAN_HEADS.contains(heads),
            _ => true,
        }
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MethodKind::EncoderHead => write!(f, "Encoder+Head"),
            MethodKind::Lwan { heads } => write!(f, "LWAN (N={heads})"),
            MethodKind::Seq2Seq { decoding: Decoding::Greedy } => write!(f, "Seq2Seq (greedy)"),
            MethodKind::Seq2Seq { decoding: Decoding::Beam(w) } => write!(f, "Seq2Seq (beam {w})"),
            MethodKind::T5Enc { scheme } => write!(f, "T5Enc ({} attention)", scheme.name()),
            MethodKind::T5EncSingleStep => write!(f, "T5Enc (single step)"),
        }
    }
}

/// Per-method knobs that are not part of the transformer shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodOptions {
    /// A label is predicted when `sigmoid(logit) > threshold`.
    pub threshold: f64,
    /// Upper bound on generated tokens, end token included.
    pub max_gen_len: usize,
    /// Decoder input for the single-step variant.
    pub probe_token: String,
}

impl Default for MethodOptions {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            max_gen_len: 64,
            probe_token: "<pad>".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelScores {
    pub logits: Vec<f64>,
    pub method: MethodKind,
}

impl LabelScores {
    pub fn probabilities(&self) -> Vec<f64> {
        self.logits.iter().map(|&z| sigmoid(z)).collect()
    }

    pub fn predict(&self, threshold: f64) -> LabelSet {
        self.logits
            .iter()
            .enumerate()
            .filter(|(_, &z)| sigmoid(z) > threshold)
            .map(|(i, _)| i)
            .collect()
    }
}

/// A predicted label set plus, for generative methods, what was generated.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Prediction {
    pub labels: LabelSet,
    pub generated: Option<String>,
    pub novel: Vec<String>,
}

#[derive(Clone, Debug)]
enum Head {
    /// `[L × d]` weights and `[L]` biases applied to one shared state.
    Shared { w: ParamId, b: ParamId },
    /// One weight row per label applied to that label's own state.
    PerLabel { w: ParamId, b: ParamId },
    /// Label queries followed by per-label weights.
    Lwan { queries: ParamId, w: ParamId, b: ParamId, heads: usize },
    Generative,
}

/// A transformer plus the method-specific head and label vocabulary.
#[derive(Clone, Debug)]
pub struct Classifier {
    kind: MethodKind,
    model: Transformer,
    params: ParamStore,
    head: Head,
    vocab: LabelVocabulary,
    tokenizer: Tokenizer,
    decoder_inputs: Vec<u32>,
    options: MethodOptions,
}

/// Splits `d` into `parts` contiguous chunks whose sizes differ by at most one.
pub fn split_dims(d: usize, parts: usize) -> Vec<(usize, usize)> {
    let base = d / parts;
    let extra = d % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for h in 0..parts {
        let len = base + usize::from(h < extra);
        out.push((start, len));
        start += len;
    }
    out
}

impl Classifier {
    /// Builds a freshly initialised classifier. Encoder-only methods drop the
    /// decoder stack from `cfg`.
    pub fn new(
        kind: MethodKind,
        mut cfg: ModelConfig,
        vocab: LabelVocabulary,
        tokenizer: Tokenizer,
        options: MethodOptions,
        rng: &mut Prng,
    ) -> Result<Self> {
        if !kind.uses_decoder() {
            cfg.decoder_layers = 0;
        } else if cfg.decoder_layers == 0 {
            return Err(Error::Config(format!("{kind} needs at least one decoder layer")));
        }
        if cfg.vocab_size != tokenizer.len() {
            return Err(Error::Config(format!(
                "model vocab_size {} differs from tokenizer size {}",
                cfg.vocab_size,
                tokenizer.len()
            )));
        }
        let mut params = ParamStore::new();
        let mut model = Transformer::new(cfg, &mut params, rng)?;
        let d = model.config().d_model;
        let l = vocab.len();
        let std = 1.0 / (d as f64).sqrt();
        let head = match kind {
            MethodKind::EncoderHead | MethodKind::T5EncSingleStep => Head::Shared {
                w: params.add_normal("head.w", &[l, d], std, rng),
                b: params.add("head.b", Tensor::zeros(&[l])),
            },
            MethodKind::T5Enc { .. } => Head::PerLabel {
                w: params.add_normal("head.w", &[l, d], std, rng),
                b: params.add("head.b", Tensor::zeros(&[l])),
            },
            MethodKind::Lwan { heads } => {
                if heads == 0 || heads > d {
                    return Err(Error::Config(format!("LWAN heads must be in 1..={d}, got {heads}")));
                }
                Head::Lwan {
                    queries: params.add_normal("head.queries", &[l, d], std, rng),
                    w: params.add_normal("head.w", &[l, d], std, rng),
                    b: params.add("head.b", Tensor::zeros(&[l])),
                    heads,
                }
            }
            MethodKind::Seq2Seq { decoding } => {
                if let Decoding::Beam(0) = decoding {
                    return Err(Error::Config("beam width must be at least 1".into()));
                }
                model.add_lm_head(&mut params, rng);
                Head::Generative
            }
        };
        let decoder_inputs = Self::decoder_inputs(kind, &vocab, &tokenizer, &options)?;
        Ok(Self {
            kind,
            model,
            params,
            head,
            vocab,
            tokenizer,
            decoder_inputs,
            options,
        })
    }

    fn decoder_inputs(
        kind: MethodKind,
        vocab: &LabelVocabulary,
        tokenizer: &Tokenizer,
        options: &MethodOptions,
    ) -> Result<Vec<u32>> {
        match kind {
            MethodKind::T5Enc { .. } => vocab.descriptor_tokens(tokenizer),
            MethodKind::T5EncSingleStep => tokenizer
                .id(&options.probe_token)
                .map(|t| vec![t])
                .ok_or_else(|| {
                    Error::Config(format!("probe token {:?} is not in the vocabulary", options.probe_token))
                }),
            _ => Ok(Vec::new()),
        }
    }

    pub fn kind(&self) -> MethodKind {
        self.kind
    }

    pub fn config(&self) -> &ModelConfig {
        self.model.config()
    }

    pub fn transformer(&self) -> &Transformer {
        &self.model
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn vocab(&self) -> &LabelVocabulary {
        &self.vocab
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn options(&self) -> &MethodOptions {
        &self.options
    }

    pub fn num_labels(&self) -> usize {
        self.vocab.len()
    }

    /// Tokens fed to the decoder by the non-generative decoder methods.
    pub fn decoder_input_tokens(&self) -> &[u32] {
        &self.decoder_inputs
    }

    /// Replaces the decoder input sequence, e.g. to probe how positions
    /// interact. The length must stay the same.
    pub fn set_decoder_input_tokens(&mut self, tokens: Vec<u32>) -> Result<()> {
        if tokens.len() != self.decoder_inputs.len() {
            return Err(Error::Shape {
                op: "set_decoder_input_tokens",
                lhs: vec![self.decoder_inputs.len()],
                rhs: vec![tokens.len()],
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.tokenizer.len()) {
            return Err(Error::Index {
                index: t as usize,
                size: self.tokenizer.len(),
                context: "decoder input token".into(),
            });
        }
        self.decoder_inputs = tokens;
        Ok(())
    }

    /// Sets every head weight and bias to zero.
    pub fn zero_heads(&mut self) {
        let ids: Vec<ParamId> = match &self.head {
            Head::Shared { w, b } | Head::PerLabel { w, b } => vec![*w, *b],
            Head::Lwan { w, b, .. } => vec![*w, *b],
            Head::Generative => Vec::new(),
        };
        for id in ids {
            self.params.get_mut(id).data_mut().fill(0.0);
        }
    }

    /// Ensures the encoder input ends in an end token, keeping any trailing
    /// padding after it and respecting the maximum sequence length.
    pub fn prepare_input(&self, tokens: &[u32]) -> Vec<u32> {
        let max = self.model.config().max_seq_len;
        let content = tokens.iter().rposition(|&t| t != PAD_ID).map_or(0, |p| p + 1);
        let mut out: Vec<u32> = tokens[..content].to_vec();
        if out.last() != Some(&EOS_ID) {
            out.push(EOS_ID);
        }
        if out.len() > max {
            out.truncate(max - 1);
            out.push(EOS_ID);
        }
        let pad = tokens.len().saturating_sub(out.len()).min(max - out.len());
        out.extend(std::iter::repeat_n(PAD_ID, pad));
        out
    }

    fn forward<'a>(&'a self, tape: &'a mut Tape, rng: Option<&'a mut Prng>) -> Forward<'a> {
        let rate = self.model.config().dropout;
        Forward {
            tape,
            params: &self.params,
            dropout: rng.map(|rng| Dropout { rate, rng }),
        }
    }

    /// Label logits `[L]` recorded on `tape`. Passing an rng enables dropout.
    pub fn logits_var(&self, tape: &mut Tape, tokens: &[u32], rng: Option<&mut Prng>) -> Result<Var> {
        let input = self.prepare_input(tokens);
        let mut fwd = self.forward(tape, rng);
        let enc = self.model.encode(&mut fwd, &input)?;
        match &self.head {
            Head::Shared { w, b } => {
                let state = match self.kind {
                    MethodKind::EncoderHead => {
                        let eos = input
                            .iter()
                            .rposition(|&t| t == EOS_ID)
                            .ok_or_else(|| Error::Contract("input lacks an end token".into()))?;
                        fwd.tape.gather_rows(enc.hidden, &[eos])?
                    }
                    _ => self.model.decode(&mut fwd, &self.decoder_inputs, &enc, AttentionScheme::Causal)?,
                };
                let (w, b) = (fwd.p(*w), fwd.p(*b));
                let l = self.vocab.len();
                let z = fwd.tape.matmul_bt(state, w)?;
                let z = fwd.tape.add_row(z, b)?;
                fwd.tape.reshape(z, &[l])
            }
            Head::PerLabel { w, b } => {
                let MethodKind::T5Enc { scheme } = self.kind else {
                    unreachable!("per-label head is only built for T5Enc")
                };
                let states = self.model.decode(&mut fwd, &self.decoder_inputs, &enc, scheme)?;
                let (w, b) = (fwd.p(*w), fwd.p(*b));
                let prod = fwd.tape.mul(states, w)?;
                let z = fwd.tape.sum_rows(prod);
                fwd.tape.add(z, b)
            }
            Head::Lwan { queries, w, b, heads } => {
                let q = fwd.p(*queries);
                let d = self.model.config().d_model;
                let n = enc.attention_mask.len();
                let l = self.vocab.len();
                let allowed: Vec<bool> = (0..l).flat_map(|_| enc.attention_mask.iter().copied()).collect();
                debug_assert_eq!(fwd.tape.value(enc.hidden).rows(), n);
                let mut parts = Vec::with_capacity(*heads);
                for (start, len) in split_dims(d, *heads) {
                    let qh = fwd.tape.slice_cols(q, start, len)?;
                    let hh = fwd.tape.slice_cols(enc.hidden, start, len)?;
                    let s = fwd.tape.matmul_bt(qh, hh)?;
                    let s = fwd.tape.scale(s, 1.0 / (len as f64).sqrt());
                    let a = fwd.tape.masked_softmax_rows(s, &allowed)?;
                    parts.push(fwd.tape.matmul(a, hh)?);
                }
                let docs = if parts.len() == 1 { parts[0] } else { fwd.tape.concat_cols(&parts)? };
                let (w, b) = (fwd.p(*w), fwd.p(*b));
                let prod = fwd.tape.mul(docs, w)?;
                let z = fwd.tape.sum_rows(prod);
                fwd.tape.add(z, b)
            }
            Head::Generative => Err(Error::Config(format!("{} does not produce label logits", self.kind))),
        }
    }

    pub fn scores(&self, tokens: &[u32]) -> Result<LabelScores> {
        let mut tape = Tape::new();
        let z = self.logits_var(&mut tape, tokens, None)?;
        Ok(LabelScores {
            logits: tape.value(z).data().to_vec(),
            method: self.kind,
        })
    }

    /// Teacher-forcing decoder input and target for a gold label set.
    pub fn seq2seq_target(&self, gold: &LabelSet) -> Result<(Vec<u32>, Vec<u32>)> {
        let text = self.vocab.format_target(gold)?;
        let mut target = self.tokenizer.encode(&text);
        target.push(EOS_ID);
        let mut input = vec![PAD_ID];
        input.extend_from_slice(&target[..target.len() - 1]);
        Ok((input, target))
    }

    /// Scalar training loss on `tape`: mean binary cross-entropy over labels
    /// for head methods, mean token cross-entropy for generation.
    pub fn loss_var(
        &self,
        tape: &mut Tape,
        tokens: &[u32],
        gold: &LabelSet,
        rng: Option<&mut Prng>,
    ) -> Result<Var> {
        if let Some(&bad) = gold.iter().find(|&&g| g >= self.vocab.len()) {
            return Err(Error::Data(format!("unknown {} label id {bad}", self.vocab.level())));
        }
        if self.kind.is_generative() {
            let (dec_in, target) = self.seq2seq_target(gold)?;
            let input = self.prepare_input(tokens);
            let mut fwd = self.forward(tape, rng);
            let enc = self.model.encode(&mut fwd, &input)?;
            let h = self.model.decode(&mut fwd, &dec_in, &enc, AttentionScheme::Causal)?;
            let logits = self.model.lm_logits(&mut fwd, h)?;
            let targets: Vec<usize> = target.iter().map(|&t| t as usize).collect();
            let mask = vec![true; targets.len()];
            tape.cross_entropy(logits, &targets, &mask)
        } else {
            let z = self.logits_var(tape, tokens, rng)?;
            let targets: Vec<f64> = (0..self.vocab.len())
                .map(|i| if gold.contains(&i) { 1.0 } else { 0.0 })
                .collect();
            tape.bce_with_logits(z, &targets)
        }
    }

    pub fn loss(&self, tokens: &[u32], gold: &LabelSet) -> Result<f64> {
        let mut tape = Tape::new();
        let l = self.loss_var(&mut tape, tokens, gold, None)?;
        Ok(tape.value(l).data()[0])
    }

    /// Log-probabilities of the next generated token given a prefix, with
    /// the encoder already run on `tape`.
    fn next_token_log_probs(
        &self,
        tape: &mut Tape,
        enc: &crate::transformer::EncoderOutput,
        prefix: &[u32],
    ) -> Result<Vec<f64>> {
        let mut dec_in = Vec::with_capacity(prefix.len() + 1);
        dec_in.push(PAD_ID);
        dec_in.extend_from_slice(prefix);
        let mut fwd = Forward::eval(tape, &self.params);
        let h = self.model.decode(&mut fwd, &dec_in, enc, AttentionScheme::Causal)?;
        let last = fwd.tape.gather_rows(h, &[dec_in.len() - 1])?;
        let logits = self.model.lm_logits(&mut fwd, last)?;
        Ok(log_softmax(fwd.tape.value(logits).data()))
    }

    /// Log-probabilities of the token following `prefix` for one document.
    pub fn next_log_probs(&self, tokens: &[u32], prefix: &[u32]) -> Result<Vec<f64>> {
        if !self.kind.is_generative() {
            return Err(Error::Config(format!("{} does not generate text", self.kind)));
        }
        let input = self.prepare_input(tokens);
        let mut tape = Tape::new();
        let enc = {
            let mut fwd = Forward::eval(&mut tape, &self.params);
            self.model.encode(&mut fwd, &input)?
        };
        self.next_token_log_probs(&mut tape, &enc, prefix)
    }

    /// Generates a token sequence for a document.
    pub fn generate(&self, tokens: &[u32], decoding: Decoding, max_len: usize) -> Result<Hypothesis> {
        if !self.kind.is_generative() {
            return Err(Error::Config(format!("{} does not generate text", self.kind)));
        }
        let input = self.prepare_input(tokens);
        let mut tape = Tape::new();
        let enc = {
            let mut fwd = Forward::eval(&mut tape, &self.params);
            self.model.encode(&mut fwd, &input)?
        };
        let base = tape.len();
        let mut scorer = |prefix: &[u32]| {
            let out = self.next_token_log_probs(&mut tape, &enc, prefix);
            tape.truncate(base);
            out
        };
        decoding::decode(&mut scorer, decoding, max_len, EOS_ID)
    }

    /// Predicted label set; thresholded scores for head methods, parsed
    /// generation for Seq2Seq.
    pub fn predict(&self, tokens: &[u32]) -> Result<Prediction> {
        match self.kind {
            MethodKind::Seq2Seq { decoding } => {
                let hyp = self.generate(tokens, decoding, self.options.max_gen_len)?;
                let text = self.tokenizer.decode(&hyp.tokens);
                let parsed = self.vocab.parse_prediction(&text);
                Ok(Prediction {
                    labels: parsed.labels,
                    generated: Some(text),
                    novel: parsed.novel,
                })
            }
            _ => Ok(Prediction {
                labels: self.scores(tokens)?.predict(self.options.threshold),
                generated: None,
                novel: Vec::new(),
            }),
        }
    }

    fn meta(&self) -> serde_json::Value {
        serde_json::json!({
            "method": self.kind,
            "model": self.model.config(),
            "options": self.options,
            "level": self.vocab.level(),
            "scheme": self.vocab.scheme(),
            "decoder_inputs": self.decoder_inputs,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path, &self.meta())
    }

    /// Restores a classifier saved with [`save`](Self::save). The catalog and
    /// tokenizer must be the ones it was trained with.
    pub fn load(path: &Path, catalog: &LabelCatalog, tokenizer: Tokenizer) -> Result<Self> {
        let (params, meta) = ParamStore::load(path)?;
        let field = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| Error::Data(format!("checkpoint meta lacks {k:?}")))
        };
        let kind: MethodKind = serde_json::from_value(field("method")?)?;
        let cfg: ModelConfig = serde_json::from_value(field("model")?)?;
        let options: MethodOptions = serde_json::from_value(field("options")?)?;
        let level: Level = serde_json::from_value(field("level")?)?;
        let scheme: DescriptorScheme = serde_json::from_value(field("scheme")?)?;
        let decoder_inputs: Vec<u32> = serde_json::from_value(field("decoder_inputs")?)?;
        if cfg.vocab_size != tokenizer.len() {
            return Err(Error::Data(format!(
                "checkpoint vocab_size {} differs from tokenizer size {}",
                cfg.vocab_size,
                tokenizer.len()
            )));
        }
        let vocab = LabelVocabulary::new(catalog, level, scheme)?;
        let model = Transformer::bind(cfg, &params)?;
        let get = |name: &str| {
            params
                .lookup(name)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks parameter {name}")))
        };
        let head = match kind {
            MethodKind::EncoderHead | MethodKind::T5EncSingleStep => Head::Shared {
                w: get("head.w")?,
                b: get("head.b")?,
            },
            MethodKind::T5Enc { .. } => Head::PerLabel {
                w: get("head.w")?,
                b: get("head.b")?,
            },
            MethodKind::Lwan { heads } => Head::Lwan {
                queries: get("head.queries")?,
                w: get("head.w")?,
                b: get("head.b")?,
                heads,
            },
            MethodKind::Seq2Seq { .. } => Head::Generative,
        };
        if let Head::Shared { w, .. } | Head::PerLabel { w, .. } | Head::Lwan { w, .. } = &head {
            if params.get(*w).rows() != vocab.len() {
                return Err(Error::Data(format!(
                    "checkpoint head has {} labels, vocabulary has {}",
                    params.get(*w).rows(),
                    vocab.len()
                )));
            }
        }
        Ok(Self {
            kind,
            model,
            params,
            head,
            vocab,
            tokenizer,
            decoder_inputs,
            options,
        })
    }
}
