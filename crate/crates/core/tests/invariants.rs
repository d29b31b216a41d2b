use proptest::prelude::*;

use seqlabel_core::data::{self, split};
use seqlabel_core::decoding::Decoding;
use seqlabel_core::train::{self, streams, DevEvaluator};
use seqlabel_core::transformer::Forward;
use seqlabel_core::{
    AttentionScheme, Classifier, DatasetSpec, DescriptorScheme, Document, LabelSet, LabelVocabulary, Level,
    MethodKind, MethodOptions, ModelConfig, ParamStore, Prng, SizePreset, SplitMode, Tape, Tensor, TrainConfig,
    Transformer,
};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-40.0f64..40.0, rows * cols).prop_map(move |v| Tensor::new(vec![rows, cols], v).unwrap())
}

fn tiny_config(vocab: usize, heads: usize, head_dim: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        d_model: heads * head_dim,
        num_heads: heads,
        d_ff: 2 * heads * head_dim,
        encoder_layers: layers,
        decoder_layers: layers,
        dropout: 0.0,
        ..ModelConfig::preset(SizePreset::Small, vocab)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions((r, c) in (1usize..6, 1usize..9), seed in any::<u64>()) {
        let mut rng = Prng::new(seed);
        let x = Tensor::new(vec![r, c], (0..r * c).map(|_| 80.0 * rng.uniform() - 40.0).collect()).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let s = tape.softmax_rows(v);
        let out = tape.value(s);
        for i in 0..r {
            let row = out.row(i);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn losses_are_non_negative(x in matrix(3, 5), bits in prop::collection::vec(any::<bool>(), 15), targets in prop::collection::vec(0usize..5, 3)) {
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let t: Vec<f64> = bits.iter().map(|&b| f64::from(u8::from(b))).collect();
        let bce = tape.bce_with_logits(v, &t).unwrap();
        let ce = tape.cross_entropy(v, &targets, &[true, true, true]).unwrap();
        prop_assert!(tape.value(bce).data()[0] >= 0.0);
        prop_assert!(tape.value(ce).data()[0] >= 0.0);
    }

    #[test]
    fn transformer_shapes_follow_inputs(
        heads in 1usize..4,
        head_dim in 2usize..6,
        layers in 1usize..3,
        n in 1usize..10,
        m in 1usize..6,
        seed in any::<u64>(),
    ) {
        let vocab = 30;
        let cfg = tiny_config(vocab, heads, head_dim, layers);
        let mut store = ParamStore::new();
        let mut rng = Prng::new(seed);
        let model = Transformer::new(cfg, &mut store, &mut rng).unwrap();
        let src: Vec<u32> = (0..n).map(|_| 4 + rng.below(vocab - 4) as u32).collect();
        let tgt: Vec<u32> = (0..m).map(|_| 4 + rng.below(vocab - 4) as u32).collect();
        let mut tape = Tape::new();
        let mut fwd = Forward { tape: &mut tape, params: &store, dropout: None };
        let enc = model.encode(&mut fwd, &src).unwrap();
        for scheme in [AttentionScheme::Causal, AttentionScheme::None, AttentionScheme::Full] {
            let out = model.decode(&mut fwd, &tgt, &enc, scheme).unwrap();
            prop_assert_eq!(fwd.tape.shape(out), &[m, heads * head_dim][..]);
        }
        prop_assert_eq!(fwd.tape.shape(enc.hidden), &[n, heads * head_dim][..]);
    }

    #[test]
    fn masking_holds_across_depths_and_heads(
        heads in 1usize..4,
        layers in 1usize..3,
        cut in 0usize..4,
        seed in any::<u64>(),
    ) {
        let vocab = 30;
        let cfg = tiny_config(vocab, heads, 4, layers);
        let mut store = ParamStore::new();
        let mut rng = Prng::new(seed);
        let model = Transformer::new(cfg, &mut store, &mut rng).unwrap();
        let src: Vec<u32> = (0..6).map(|_| 4 + rng.below(vocab - 4) as u32).collect();
        let base: Vec<u32> = (0..5).map(|_| 4 + rng.below(vocab - 4) as u32).collect();
        let mut alt = base.clone();
        for t in alt.iter_mut().skip(cut + 1) {
            *t = 4 + (*t - 4 + 1) % (vocab as u32 - 4);
        }
        let run = |tgt: &[u32], scheme| {
            let mut tape = Tape::new();
            let mut fwd = Forward { tape: &mut tape, params: &store, dropout: None };
            let enc = model.encode(&mut fwd, &src).unwrap();
            let out = model.decode(&mut fwd, tgt, &enc, scheme).unwrap();
            fwd.tape.value(out).clone()
        };
        // Causal: positions up to `cut` never see the changed suffix.
        let (a, b) = (run(&base, AttentionScheme::Causal), run(&alt, AttentionScheme::Causal));
        for i in 0..=cut {
            for (x, y) in a.row(i).iter().zip(b.row(i)) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }
        // None: each position depends only on its own input.
        let (a, b) = (run(&base, AttentionScheme::None), run(&alt, AttentionScheme::None));
        for i in 0..=cut {
            for (x, y) in a.row(i).iter().zip(b.row(i)) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }
    }
}

fn separable() -> data::Dataset {
    data::generate(&DatasetSpec {
        num_docs: 120,
        ..DatasetSpec::separable()
    })
    .unwrap()
}

fn methods() -> Vec<MethodKind> {
    vec![
        MethodKind::EncoderHead,
        MethodKind::Lwan { heads: 4 },
        MethodKind::Seq2Seq { decoding: Decoding::Greedy },
        MethodKind::Seq2Seq { decoding: Decoding::Beam(3) },
        MethodKind::T5Enc { scheme: AttentionScheme::Causal },
        MethodKind::T5Enc { scheme: AttentionScheme::None },
        MethodKind::T5Enc { scheme: AttentionScheme::Full },
        MethodKind::T5EncSingleStep,
    ]
}

fn classifier(ds: &data::Dataset, kind: MethodKind, seed: u64) -> Classifier {
    let vocab = LabelVocabulary::new(&ds.catalog, Level::L1, DescriptorScheme::Pseudo).unwrap();
    let cfg = ModelConfig {
        dropout: 0.0,
        ..ModelConfig::preset(SizePreset::Small, ds.tokenizer.len())
    };
    Classifier::new(kind, cfg, vocab, ds.tokenizer.clone(), MethodOptions::default(), &mut Prng::derive(seed, streams::INIT))
        .unwrap()
}

#[test]
fn heads_give_one_logit_per_label_and_predictions_stay_in_vocabulary() {
    let ds = separable();
    let labels = ds.catalog.level(Level::L1).len();
    for kind in methods() {
        let c = classifier(&ds, kind, 3);
        for doc in ds.documents.iter().take(5) {
            if !kind.is_generative() {
                assert_eq!(c.scores(&doc.tokens).unwrap().logits.len(), labels, "{kind}");
            }
            let p = c.predict(&doc.tokens).unwrap();
            assert!(p.labels.iter().all(|&l| l < labels), "{kind}: {:?}", p.labels);
        }
    }
}

#[test]
fn every_method_reduces_its_loss_in_the_first_fifty_steps() {
    let ds = separable();
    let docs: Vec<&Document> = ds.documents.iter().collect();
    let cfg = TrainConfig {
        learning_rate: 3e-3,
        warmup: false,
        max_epochs: 2,
        patience: 5,
        batch_size: 4,
        ..TrainConfig::default()
    };
    for kind in methods().into_iter().filter(|k| !matches!(k, MethodKind::Seq2Seq { decoding: Decoding::Beam(_) })) {
        let mut c = classifier(&ds, kind, 4);
        let mut dev = DevEvaluator { docs: &docs[..10], level: Level::L1 };
        let out = train::train(&mut c, &docs, Level::L1, &cfg, 4, &mut dev).unwrap();
        let losses: Vec<f64> = out.steps.iter().take(50).map(|s| s.1).collect();
        assert_eq!(losses.len(), 50);
        let first = losses[..10].iter().sum::<f64>() / 10.0;
        let last = losses[40..].iter().sum::<f64>() / 10.0;
        assert!(last < first, "{kind}: loss {first:.4} -> {last:.4}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn parsing_is_idempotent(mask in prop::collection::vec(any::<bool>(), 18), level in 1u8..3, scheme in 0usize..4, junk in "[a-z ]{0,12}") {
        let ds = data::generate(&DatasetSpec { num_docs: 20, ..DatasetSpec::uklex_like() }).unwrap();
        let level = Level::try_from(level).unwrap();
        let scheme = [DescriptorScheme::Original, DescriptorScheme::Simplified, DescriptorScheme::Numeric, DescriptorScheme::Pseudo][scheme];
        let vocab = LabelVocabulary::new(&ds.catalog, level, scheme).unwrap();
        let set: LabelSet = mask.iter().enumerate().filter(|(i, &b)| b && *i < vocab.len()).map(|(i, _)| i).collect();
        let text = format!("{}, {junk}", vocab.format_target(&set).unwrap());
        let once = vocab.parse_prediction(&text).labels;
        let twice = vocab.parse_prediction(&vocab.format_target(&once).unwrap()).labels;
        prop_assert_eq!(&once, &twice);
        prop_assert!(set.is_subset(&once));
    }
}

/// One-vs-rest logistic regression on binary bag-of-words features.
fn bag_of_words_micro_f1(ds: &data::Dataset, level: Level) -> f64 {
    let sp = split(&ds.documents, [0.8, 0.1, 0.1], SplitMode::Chronological, 0).unwrap();
    let v = ds.tokenizer.len();
    let labels = ds.catalog.level(level).len();
    let features = |d: &Document| {
        let mut f: Vec<usize> = d.tokens.iter().map(|&t| t as usize).collect();
        f.sort_unstable();
        f.dedup();
        f
    };
    let train: Vec<(Vec<usize>, &LabelSet)> = sp.train.iter().map(|&i| (features(&ds.documents[i]), ds.documents[i].labels(level))).collect();
    let mut w = vec![0.0; labels * v];
    let mut b = vec![0.0; labels];
    for _ in 0..40 {
        let lr = 0.5;
        for (f, gold) in &train {
            for l in 0..labels {
                let z = b[l] + f.iter().map(|&t| w[l * v + t]).sum::<f64>();
                let g = 1.0 / (1.0 + (-z).exp()) - f64::from(u8::from(gold.contains(&l)));
                b[l] -= lr * g;
                for &t in f {
                    w[l * v + t] -= lr * g;
                }
            }
        }
    }
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for &i in &sp.test {
        let d = &ds.documents[i];
        let f = features(d);
        for l in 0..labels {
            let z = b[l] + f.iter().map(|&t| w[l * v + t]).sum::<f64>();
            match (z > 0.0, d.labels(level).contains(&l)) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                _ => {}
            }
        }
    }
    2.0 * tp / (2.0 * tp + fp + fn_)
}

#[test]
fn default_presets_are_learnable_from_bags_of_words() {
    for spec in [DatasetSpec::separable(), DatasetSpec::uklex_like(), DatasetSpec::planted()] {
        let ds = data::generate(&spec).unwrap();
        let levels: &[Level] = if spec.num_labels_l2 == 0 { &[Level::L1] } else { &[Level::L1, Level::L2] };
        for &level in levels {
            let f1 = bag_of_words_micro_f1(&ds, level);
            assert!(f1 >= 0.8, "{} {level}: bag-of-words micro-F1 {f1:.3}", spec.name);
        }
    }
}
