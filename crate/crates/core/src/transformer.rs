//! T5-shaped encoder-decoder.
//!
//! Pre-norm residual blocks with RMS normalisation, ReLU feed-forward layers,
//! no biases in the projections, and bucketed relative position biases
//! computed once per stack and shared by all of its layers. Cross-attention
//! carries no position bias.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Prng;
use crate::tensor::Tensor;
use crate::tokenizer::PAD_ID;

/// How decoder positions attend to each other.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionScheme {
    /// Position `i` sees positions `0..=i`.
    Causal,
    /// The self-attention sublayer is skipped; positions only interact with
    /// the encoder through cross-attention.
    None,
    /// Every position sees every other position.
    Full,
}

impl AttentionScheme {
    pub fn name(self) -> &'static str {
        match self {
            AttentionScheme::Causal => "causal",
            AttentionScheme::None => "none",
            AttentionScheme::Full => "full",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizePreset {
    Small,
    Base,
    Large,
}

impl SizePreset {
    pub fn name(self) -> &'static str {
        match self {
            SizePreset::Small => "small",
            SizePreset::Base => "base",
            SizePreset::Large => "large",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Relative position bias in the encoder.
    pub relative_bias: bool,
    /// Relative position bias in decoder self-attention.
    pub decoder_relative_bias: bool,
    pub num_buckets: usize,
    pub max_distance: usize,
    pub dropout: f64,
    pub tie_embeddings: bool,
    pub max_seq_len: usize,
}

impl ModelConfig {
    pub fn preset(size: SizePreset, vocab_size: usize) -> Self {
        let (layers, d_model, num_heads, d_ff) = match size {
            SizePreset::Small => (2, 64, 4, 128),
            SizePreset::Base => (3, 128, 4, 256),
            SizePreset::Large => (4, 256, 8, 512),
        };
        Self {
            vocab_size,
            d_model,
            num_heads,
            d_ff,
            encoder_layers: layers,
            decoder_layers: layers,
            relative_bias: true,
            decoder_relative_bias: true,
            num_buckets: 32,
            max_distance: 128,
            dropout: 0.1,
            tie_embeddings: true,
            max_seq_len: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.d_ff == 0 {
            return fail("vocab_size, d_model and d_ff must be positive".into());
        }
        if self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return fail(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            ));
        }
        if self.encoder_layers == 0 {
            return fail("encoder_layers must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.num_buckets < 2 || self.max_distance < self.num_buckets / 2 {
            return fail("num_buckets must be >= 2 and max_distance >= num_buckets / 2".into());
        }
        if self.max_seq_len < 2 {
            return fail("max_seq_len must be at least 2".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }
}

/// T5 relative position bucket for `relative = key - query`.
pub fn relative_position_bucket(
    relative: i64,
    bidirectional: bool,
    num_buckets: usize,
    max_distance: usize,
) -> usize {
    let mut buckets = num_buckets as i64;
    let mut ret = 0i64;
    let mut n = -relative;
    if bidirectional {
        buckets /= 2;
        if n < 0 {
            ret += buckets;
        }
        n = n.abs();
    } else {
        n = n.max(0);
    }
    let max_exact = buckets / 2;
    let bucket = if n < max_exact {
        n
    } else {
        let scaled = ((n as f64 / max_exact as f64).ln()
            / (max_distance as f64 / max_exact as f64).ln()
            * (buckets - max_exact) as f64) as i64;
        (max_exact + scaled).min(buckets - 1)
    };
    (ret + bucket) as usize
}

#[derive(Clone, Debug)]
struct AttnParams {
    q: ParamId,
    k: ParamId,
    v: ParamId,
    o: ParamId,
}

#[derive(Clone, Debug)]
struct FfParams {
    wi: ParamId,
    wo: ParamId,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    norm_attn: ParamId,
    attn: AttnParams,
    norm_ff: ParamId,
    ff: FfParams,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    norm_self: ParamId,
    self_attn: AttnParams,
    norm_cross: ParamId,
    cross_attn: AttnParams,
    norm_ff: ParamId,
    ff: FfParams,
}

/// Parameter handles for the encoder-decoder stack. Values live in a
/// [`ParamStore`]; this struct only records which ids belong where.
#[derive(Clone, Debug)]
pub struct Transformer {
    cfg: ModelConfig,
    embed: ParamId,
    encoder: Vec<EncoderLayer>,
    encoder_norm: ParamId,
    encoder_bias: Option<ParamId>,
    decoder: Vec<DecoderLayer>,
    decoder_norm: Option<ParamId>,
    decoder_bias: Option<ParamId>,
    lm_head: Option<ParamId>,
}

/// Encoder hidden states and the key mask used for cross-attention.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub hidden: Var,
    pub attention_mask: Vec<bool>,
}

/// Dropout state for a training-mode forward pass.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut Prng,
}

/// Everything a forward pass needs besides the model itself.
pub struct Forward<'a> {
    pub tape: &'a mut Tape,
    pub params: &'a ParamStore,
    pub dropout: Option<Dropout<'a>>,
}

impl<'a> Forward<'a> {
    pub fn eval(tape: &'a mut Tape, params: &'a ParamStore) -> Self {
        Self {
            tape,
            params,
            dropout: None,
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.tape.param(self.params, id)
    }

    fn drop(&mut self, x: Var) -> Result<Var> {
        let Some(d) = self.dropout.as_mut() else {
            return Ok(x);
        };
        if d.rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - d.rate;
        let n = self.tape.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if d.rng.bernoulli(keep) { 1.0 / keep } else { 0.0 })
            .collect();
        self.tape.mul_const(x, Arc::new(mask))
    }
}

/// Scaled dot-product attention for a single head:
/// `softmax(q·kᵀ/√d + bias, allowed)·v`.
pub fn attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    allowed: &[bool],
    bias: Option<Var>,
) -> Result<Var> {
    let d = tape.value(q).cols();
    let scores = tape.matmul_bt(q, k)?;
    let mut scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    if let Some(b) = bias {
        scores = tape.add(scores, b)?;
    }
    let weights = tape.masked_softmax_rows(scores, allowed)?;
    tape.matmul(weights, v)
}

impl Transformer {
    pub fn new(cfg: ModelConfig, store: &mut ParamStore, rng: &mut Prng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let w_std = 1.0 / (d as f64).sqrt();
        let ff_std = 1.0 / (cfg.d_ff as f64).sqrt();
        let embed = store.add_normal("shared.embed", &[cfg.vocab_size, d], 1.0, rng);

        let attn = |store: &mut ParamStore, rng: &mut Prng, prefix: &str| AttnParams {
            q: store.add_normal(&format!("{prefix}.q"), &[d, d], w_std, rng),
            k: store.add_normal(&format!("{prefix}.k"), &[d, d], w_std, rng),
            v: store.add_normal(&format!("{prefix}.v"), &[d, d], w_std, rng),
            o: store.add_normal(&format!("{prefix}.o"), &[d, d], w_std, rng),
        };
        let ff = |store: &mut ParamStore, rng: &mut Prng, prefix: &str| FfParams {
            wi: store.add_normal(&format!("{prefix}.wi"), &[d, cfg.d_ff], w_std, rng),
            wo: store.add_normal(&format!("{prefix}.wo"), &[cfg.d_ff, d], ff_std, rng),
        };
        let norm = |store: &mut ParamStore, name: String| store.add(name, Tensor::ones(&[d]));

        let mut encoder = Vec::with_capacity(cfg.encoder_layers);
        for i in 0..cfg.encoder_layers {
            let p = format!("encoder.{i}");
            encoder.push(EncoderLayer {
                norm_attn: norm(store, format!("{p}.norm_attn")),
                attn: attn(store, rng, &format!("{p}.attn")),
                norm_ff: norm(store, format!("{p}.norm_ff")),
                ff: ff(store, rng, &format!("{p}.ff")),
            });
        }
        let encoder_norm = norm(store, "encoder.final_norm".into());
        let encoder_bias = cfg.relative_bias.then(|| {
            store.add_normal("encoder.rel_bias", &[cfg.num_buckets, cfg.num_heads], 0.1, rng)
        });

        let mut decoder = Vec::with_capacity(cfg.decoder_layers);
        for i in 0..cfg.decoder_layers {
            let p = format!("decoder.{i}");
            decoder.push(DecoderLayer {
                norm_self: norm(store, format!("{p}.norm_self")),
                self_attn: attn(store, rng, &format!("{p}.self_attn")),
                norm_cross: norm(store, format!("{p}.norm_cross")),
                cross_attn: attn(store, rng, &format!("{p}.cross_attn")),
                norm_ff: norm(store, format!("{p}.norm_ff")),
                ff: ff(store, rng, &format!("{p}.ff")),
            });
        }
        let has_decoder = cfg.decoder_layers > 0;
        let decoder_norm = has_decoder.then(|| norm(store, "decoder.final_norm".into()));
        let decoder_bias = (has_decoder && cfg.decoder_relative_bias).then(|| {
            store.add_normal("decoder.rel_bias", &[cfg.num_buckets, cfg.num_heads], 0.1, rng)
        });
        Ok(Self {
            cfg,
            embed,
            encoder,
            encoder_norm,
            encoder_bias,
            decoder,
            decoder_norm,
            decoder_bias,
            lm_head: None,
        })
    }

    /// Adds an untied output projection for token generation, unless the
    /// config ties it to the embedding table.
    pub fn add_lm_head(&mut self, store: &mut ParamStore, rng: &mut Prng) {
        if !self.cfg.tie_embeddings && self.lm_head.is_none() {
            let d = self.cfg.d_model;
            self.lm_head = Some(store.add_normal(
                "decoder.lm_head",
                &[self.cfg.vocab_size, d],
                1.0 / (d as f64).sqrt(),
                rng,
            ));
        }
    }

    /// Rebinds handles against a store loaded from a checkpoint. The store
    /// must have been produced by a model with the same config.
    pub fn bind(cfg: ModelConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let get = |name: String| {
            store
                .lookup(&name)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks parameter {name}")))
        };
        let attn = |p: String| -> Result<AttnParams> {
            Ok(AttnParams {
                q: get(format!("{p}.q"))?,
                k: get(format!("{p}.k"))?,
                v: get(format!("{p}.v"))?,
                o: get(format!("{p}.o"))?,
            })
        };
        let ff = |p: String| -> Result<FfParams> {
            Ok(FfParams {
                wi: get(format!("{p}.wi"))?,
                wo: get(format!("{p}.wo"))?,
            })
        };
        let mut encoder = Vec::new();
        for i in 0..cfg.encoder_layers {
            let p = format!("encoder.{i}");
            encoder.push(EncoderLayer {
                norm_attn: get(format!("{p}.norm_attn"))?,
                attn: attn(format!("{p}.attn"))?,
                norm_ff: get(format!("{p}.norm_ff"))?,
                ff: ff(format!("{p}.ff"))?,
            });
        }
        let mut decoder = Vec::new();
        for i in 0..cfg.decoder_layers {
            let p = format!("decoder.{i}");
            decoder.push(DecoderLayer {
                norm_self: get(format!("{p}.norm_self"))?,
                self_attn: attn(format!("{p}.self_attn"))?,
                norm_cross: get(format!("{p}.norm_cross"))?,
                cross_attn: attn(format!("{p}.cross_attn"))?,
                norm_ff: get(format!("{p}.norm_ff"))?,
                ff: ff(format!("{p}.ff"))?,
            });
        }
        let has_decoder = cfg.decoder_layers > 0;
        Ok(Self {
            embed: get("shared.embed".into())?,
            encoder,
            encoder_norm: get("encoder.final_norm".into())?,
            encoder_bias: if cfg.relative_bias {
                Some(get("encoder.rel_bias".into())?)
            } else {
                None
            },
            decoder,
            decoder_norm: if has_decoder {
                Some(get("decoder.final_norm".into())?)
            } else {
                None
            },
            decoder_bias: if has_decoder && cfg.decoder_relative_bias {
                Some(get("decoder.rel_bias".into())?)
            } else {
                None
            },
            lm_head: store.lookup("decoder.lm_head"),
            cfg,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn embedding(&self) -> ParamId {
        self.embed
    }

    fn check_tokens(&self, tokens: &[u32], what: &str) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Contract(format!("{what} needs at least one token")));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(Error::Index {
                index: t as usize,
                size: self.cfg.vocab_size,
                context: "token id",
            });
        }
        Ok(())
    }

    /// Per-head bias matrices `[queries × keys]` gathered from `table`.
    fn position_bias(
        &self,
        fwd: &mut Forward,
        table: ParamId,
        queries: usize,
        keys: usize,
        bidirectional: bool,
    ) -> Result<Vec<Var>> {
        let heads = self.cfg.num_heads;
        let buckets: Vec<usize> = (0..queries)
            .flat_map(|i| {
                (0..keys).map(move |j| {
                    relative_position_bucket(
                        j as i64 - i as i64,
                        bidirectional,
                        self.cfg.num_buckets,
                        self.cfg.max_distance,
                    )
                })
            })
            .collect();
        let table = fwd.p(table);
        (0..heads)
            .map(|h| {
                let idx = Arc::new(buckets.iter().map(|b| b * heads + h).collect());
                fwd.tape.gather(table, idx, vec![queries, keys])
            })
            .collect()
    }

    fn multi_head(
        &self,
        fwd: &mut Forward,
        p: &AttnParams,
        query_in: Var,
        kv_in: Var,
        allowed: &[bool],
        bias: Option<&[Var]>,
    ) -> Result<Var> {
        let (wq, wk, wv, wo) = (fwd.p(p.q), fwd.p(p.k), fwd.p(p.v), fwd.p(p.o));
        let q = fwd.tape.matmul(query_in, wq)?;
        let k = fwd.tape.matmul(kv_in, wk)?;
        let v = fwd.tape.matmul(kv_in, wv)?;
        let dh = self.cfg.head_dim();
        let mut heads = Vec::with_capacity(self.cfg.num_heads);
        for h in 0..self.cfg.num_heads {
            let qh = fwd.tape.slice_cols(q, h * dh, dh)?;
            let kh = fwd.tape.slice_cols(k, h * dh, dh)?;
            let vh = fwd.tape.slice_cols(v, h * dh, dh)?;
            heads.push(attention(fwd.tape, qh, kh, vh, allowed, bias.map(|b| b[h]))?);
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            fwd.tape.concat_cols(&heads)?
        };
        fwd.tape.matmul(joined, wo)
    }

    fn feed_forward(&self, fwd: &mut Forward, p: &FfParams, x: Var) -> Result<Var> {
        let (wi, wo) = (fwd.p(p.wi), fwd.p(p.wo));
        let h = fwd.tape.matmul(x, wi)?;
        let h = fwd.tape.relu(h);
        let h = fwd.drop(h)?;
        fwd.tape.matmul(h, wo)
    }

    /// Encodes token ids. Tokens equal to the pad id are excluded as
    /// attention keys; sequences longer than `max_seq_len` are cut.
    pub fn encode(&self, fwd: &mut Forward, tokens: &[u32]) -> Result<EncoderOutput> {
        self.check_tokens(tokens, "encode")?;
        let tokens = &tokens[..tokens.len().min(self.cfg.max_seq_len)];
        let n = tokens.len();
        let key_mask: Vec<bool> = tokens.iter().map(|&t| t != PAD_ID).collect();
        if !key_mask.iter().any(|&k| k) {
            return Err(Error::Contract("encoder input is entirely padding".into()));
        }
        let allowed: Vec<bool> = (0..n).flat_map(|_| key_mask.iter().copied()).collect();
        let bias = match self.encoder_bias {
            Some(table) => Some(self.position_bias(fwd, table, n, n, true)?),
            None => None,
        };

        let embed = fwd.p(self.embed);
        let rows: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let x = fwd.tape.gather_rows(embed, &rows)?;
        let mut x = fwd.drop(x)?;
        for layer in &self.encoder {
            let g = fwd.p(layer.norm_attn);
            let h = fwd.tape.rms_norm(x, g)?;
            let a = self.multi_head(fwd, &layer.attn, h, h, &allowed, bias.as_deref())?;
            let a = fwd.drop(a)?;
            x = fwd.tape.add(x, a)?;

            let g = fwd.p(layer.norm_ff);
            let h = fwd.tape.rms_norm(x, g)?;
            let f = self.feed_forward(fwd, &layer.ff, h)?;
            let f = fwd.drop(f)?;
            x = fwd.tape.add(x, f)?;
        }
        let g = fwd.p(self.encoder_norm);
        let x = fwd.tape.rms_norm(x, g)?;
        let hidden = fwd.drop(x)?;
        Ok(EncoderOutput {
            hidden,
            attention_mask: key_mask,
        })
    }

    /// Runs the decoder once over `tokens`, attending to `enc`.
    pub fn decode(
        &self,
        fwd: &mut Forward,
        tokens: &[u32],
        enc: &EncoderOutput,
        scheme: AttentionScheme,
    ) -> Result<Var> {
        if self.decoder.is_empty() {
            return Err(Error::Config("decode called on a model without decoder layers".into()));
        }
        self.check_tokens(tokens, "decode")?;
        let m = tokens.len();
        let n = enc.attention_mask.len();
        let self_allowed: Vec<bool> = match scheme {
            AttentionScheme::Causal => (0..m).flat_map(|i| (0..m).map(move |j| j <= i)).collect(),
            AttentionScheme::Full | AttentionScheme::None => vec![true; m * m],
        };
        let cross_allowed: Vec<bool> =
            (0..m).flat_map(|_| enc.attention_mask.iter().copied()).collect();
        let bias = match (self.decoder_bias, scheme) {
            (Some(table), AttentionScheme::Causal) => Some(self.position_bias(fwd, table, m, m, false)?),
            (Some(table), AttentionScheme::Full) => Some(self.position_bias(fwd, table, m, m, true)?),
            _ => None,
        };
        debug_assert_eq!(fwd.tape.value(enc.hidden).rows(), n);

        let embed = fwd.p(self.embed);
        let rows: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let x = fwd.tape.gather_rows(embed, &rows)?;
        let mut x = fwd.drop(x)?;
        for layer in &self.decoder {
            if scheme != AttentionScheme::None {
                let g = fwd.p(layer.norm_self);
                let h = fwd.tape.rms_norm(x, g)?;
                let a = self.multi_head(fwd, &layer.self_attn, h, h, &self_allowed, bias.as_deref())?;
                let a = fwd.drop(a)?;
                x = fwd.tape.add(x, a)?;
            }

            let g = fwd.p(layer.norm_cross);
            let h = fwd.tape.rms_norm(x, g)?;
            let a = self.multi_head(fwd, &layer.cross_attn, h, enc.hidden, &cross_allowed, None)?;
            let a = fwd.drop(a)?;
            x = fwd.tape.add(x, a)?;

            let g = fwd.p(layer.norm_ff);
            let h = fwd.tape.rms_norm(x, g)?;
            let f = self.feed_forward(fwd, &layer.ff, h)?;
            let f = fwd.drop(f)?;
            x = fwd.tape.add(x, f)?;
        }
        let g = fwd.p(self.decoder_norm.expect("decoder present"));
        let x = fwd.tape.rms_norm(x, g)?;
        fwd.drop(x)
    }

    /// Vocabulary logits for decoder states `[M × d] → [M × V]`.
    pub fn lm_logits(&self, fwd: &mut Forward, hidden: Var) -> Result<Var> {
        match self.lm_head {
            Some(head) => {
                let w = fwd.p(head);
                fwd.tape.matmul_bt(hidden, w)
            }
            None => {
                let d = self.cfg.d_model as f64;
                let scaled = fwd.tape.scale(hidden, 1.0 / d.sqrt());
                let e = fwd.p(self.embed);
                fwd.tape.matmul_bt(scaled, e)
            }
        }
    }
}
