//! Synthetic two-level multi-label corpora and JSONL ingestion.
//!
//! Level-1 labels are independent Bernoulli draws with Zipfian rates,
//! conditioned on at least one being active. Level-2 label `j` is a child of
//! level-1 label `j % |L1|` and can only fire when its parent is active.
//! Planted pairs `(a, b, lift)` make `b` depend on `a` so that
//! `P(a ∧ b) = lift · P(a) · P(b)` while both marginals stay unchanged.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelspace::{Label, LabelCatalog, LabelSet, Level};
use crate::rng::Prng;
use crate::tokenizer::Tokenizer;

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const LABELS_FILE: &str = "labels.tsv";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const SPEC_FILE: &str = "spec.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DependencyPair {
    pub level: Level,
    pub a: usize,
    pub b: usize,
    pub lift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    pub num_docs: usize,
    pub num_labels_l1: usize,
    pub num_labels_l2: usize,
    /// Average gold labels per document at level 1 (at least 1).
    pub mean_labels_l1: f64,
    pub mean_labels_l2: f64,
    pub zipf_exponent: f64,
    pub dependency_pairs: Vec<DependencyPair>,
    /// Inclusive token count range.
    pub doc_length: [usize; 2],
    /// Number of label-neutral filler word types.
    pub background_vocab: usize,
    /// Signature word types per label.
    pub signature_tokens: usize,
    /// Probability that a position carries a signature token of an active label.
    pub signature_rate: f64,
    pub seed: u64,
}

impl DatasetSpec {
    /// Label statistics shaped like a UK legislation corpus.
    pub fn uklex_like() -> Self {
        Self {
            name: "uklex_like".into(),
            num_docs: 2000,
            num_labels_l1: 18,
            num_labels_l2: 69,
            mean_labels_l1: 1.2,
            mean_labels_l2: 1.5,
            zipf_exponent: 1.0,
            dependency_pairs: Vec::new(),
            doc_length: [40, 200],
            background_vocab: 500,
            signature_tokens: 3,
            signature_rate: 0.15,
            seed: 0,
        }
    }

    /// Level-2 heavy corpus with planted label dependencies.
    pub fn planted() -> Self {
        let pair = |a, b| DependencyPair {
            level: Level::L2,
            a,
            b,
            lift: 5.0,
        };
        Self {
            name: "planted".into(),
            num_docs: 10_000,
            num_labels_l1: 12,
            num_labels_l2: 60,
            mean_labels_l1: 1.2,
            mean_labels_l2: 1.5,
            zipf_exponent: 1.1,
            dependency_pairs: vec![pair(2, 12), pair(3, 25), pair(5, 38), pair(7, 24)],
            doc_length: [16, 48],
            background_vocab: 300,
            signature_tokens: 3,
            signature_rate: 0.2,
            seed: 0,
        }
    }

    /// Small, easily separable level-1 task.
    pub fn separable() -> Self {
        Self {
            name: "separable".into(),
            num_docs: 200,
            num_labels_l1: 8,
            num_labels_l2: 0,
            mean_labels_l1: 1.3,
            mean_labels_l2: 0.0,
            zipf_exponent: 0.0,
            dependency_pairs: Vec::new(),
            doc_length: [8, 16],
            background_vocab: 40,
            signature_tokens: 3,
            signature_rate: 0.5,
            seed: 0,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "uklex_like" => Some(Self::uklex_like()),
            "planted" => Some(Self::planted()),
            "separable" => Some(Self::separable()),
            _ => None,
        }
    }

    pub fn num_labels(&self, level: Level) -> usize {
        match level {
            Level::L1 => self.num_labels_l1,
            Level::L2 => self.num_labels_l2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Spec(m));
        if self.num_docs == 0 {
            return fail("num_docs must be positive".into());
        }
        if self.num_labels_l1 == 0 {
            return fail("num_labels_l1 must be positive".into());
        }
        if self.num_labels_l1 == 1 && self.mean_labels_l1 != 1.0 {
            return fail("with a single level-1 label, mean_labels_l1 must be 1".into());
        }
        if self.num_labels_l1 > 1
            && !(self.mean_labels_l1 > 1.0 && self.mean_labels_l1 < self.num_labels_l1 as f64)
        {
            return fail(format!(
                "mean_labels_l1 {} must lie strictly between 1 and {}",
                self.mean_labels_l1, self.num_labels_l1
            ));
        }
        if self.num_labels_l2 == 0 && self.mean_labels_l2 != 0.0 {
            return fail("mean_labels_l2 must be 0 without level-2 labels".into());
        }
        if self.num_labels_l2 > 0 && !(self.mean_labels_l2 > 0.0 && self.mean_labels_l2 <= self.num_labels_l2 as f64) {
            return fail(format!(
                "mean_labels_l2 {} must lie in (0, {}]",
                self.mean_labels_l2, self.num_labels_l2
            ));
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            return fail(format!("zipf_exponent {} must be finite and >= 0", self.zipf_exponent));
        }
        let [lo, hi] = self.doc_length;
        if lo == 0 || lo > hi {
            return fail(format!("doc_length range {lo}..={hi} is empty or starts at 0"));
        }
        if self.signature_tokens < 3 {
            return fail("each label needs at least 3 signature tokens".into());
        }
        if self.background_vocab == 0 {
            return fail("background_vocab must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.signature_rate) {
            return fail(format!("signature_rate {} outside [0, 1]", self.signature_rate));
        }
        let mut used: HashMap<Level, BTreeSet<usize>> = HashMap::new();
        for p in &self.dependency_pairs {
            let n = self.num_labels(p.level);
            if p.a >= n || p.b >= n || p.a == p.b {
                return fail(format!(
                    "dependency pair ({}, {}) is invalid for {} labels at {}",
                    p.a, p.b, n, p.level
                ));
            }
            if !(p.lift > 1.0 && p.lift.is_finite()) {
                return fail(format!("dependency lift {} must exceed 1", p.lift));
            }
            let set = used.entry(p.level).or_default();
            if !set.insert(p.a) || !set.insert(p.b) {
                return fail(format!("{} label in pair ({}, {}) already used by another pair", p.level, p.a, p.b));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: u64,
    pub tokens: Vec<u32>,
    pub labels_l1: LabelSet,
    pub labels_l2: LabelSet,
    pub timestamp: i64,
}

impl Document {
    pub fn labels(&self, level: Level) -> &LabelSet {
        match level {
            Level::L1 => &self.labels_l1,
            Level::L2 => &self.labels_l2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub catalog: LabelCatalog,
    pub tokenizer: Tokenizer,
    pub documents: Vec<Document>,
}

fn zipf_weights(n: usize, s: f64) -> Vec<f64> {
    (0..n).map(|i| ((i + 1) as f64).powf(-s)).collect()
}

/// Smallest `c` in `[0, hi]` with `f(c) ≈ target`, for increasing `f`.
fn bisect(f: impl Fn(f64) -> f64, target: f64, hi: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, hi);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Conditional rates for a planted dependency: `b` fires with `with_a` when
/// `a` is active and `without_a` otherwise.
#[derive(Clone, Copy, Debug)]
struct Planted {
    a: usize,
    with_a: f64,
    without_a: f64,
}

/// Per-label sampling rates derived from a spec.
#[derive(Clone, Debug)]
pub struct SamplingPlan {
    p1: Vec<f64>,
    q2: Vec<f64>,
    planted1: HashMap<usize, Planted>,
    planted2: HashMap<usize, Planted>,
}

impl SamplingPlan {
    pub fn new(spec: &DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let n1 = spec.num_labels_l1;
        let w1 = zipf_weights(n1, spec.zipf_exponent);
        let p1: Vec<f64> = if n1 == 1 {
            vec![1.0]
        } else {
            let rates = |c: f64| w1.iter().map(|w| (c * w).min(1.0)).collect::<Vec<_>>();
            let cond_mean = |c: f64| {
                let p = rates(c);
                let none: f64 = p.iter().map(|x| 1.0 - x).product();
                if none >= 1.0 {
                    1.0
                } else {
                    p.iter().sum::<f64>() / (1.0 - none)
                }
            };
            let hi = 1.0 / w1[n1 - 1];
            let c = bisect(cond_mean, spec.mean_labels_l1, hi);
            rates(c)
        };
        let z = 1.0 - p1.iter().map(|x| 1.0 - x).product::<f64>();
        // P(parent active) under the non-empty conditioning.
        let parent_marginal: Vec<f64> = p1.iter().map(|p| p / z).collect();

        let n2 = spec.num_labels_l2;
        let w2 = zipf_weights(n2, spec.zipf_exponent);
        let parent = |j: usize| j % n1;
        let q2: Vec<f64> = if n2 == 0 {
            Vec::new()
        } else {
            let max: f64 = (0..n2).map(|j| parent_marginal[parent(j)]).sum();
            if spec.mean_labels_l2 > max + 1e-9 {
                return Err(Error::Spec(format!(
                    "mean_labels_l2 {} unreachable; level-1 parents allow at most {max:.3}",
                    spec.mean_labels_l2
                )));
            }
            let rates = |c: f64| {
                (0..n2)
                    .map(|j| (c * w2[j] / parent_marginal[parent(j)]).min(1.0))
                    .collect::<Vec<_>>()
            };
            let mean = |c: f64| {
                rates(c)
                    .iter()
                    .enumerate()
                    .map(|(j, q)| q * parent_marginal[parent(j)])
                    .sum::<f64>()
            };
            let hi = (0..n2).map(|j| parent_marginal[parent(j)] / w2[j]).fold(0.0, f64::max) * 2.0;
            rates(bisect(mean, spec.mean_labels_l2, hi))
        };

        let mut planted1 = HashMap::new();
        let mut planted2 = HashMap::new();
        for pair in &spec.dependency_pairs {
            let (a, b) = (pair.a.min(pair.b), pair.a.max(pair.b));
            let lift = pair.lift;
            let (with_a, without_a) = match pair.level {
                Level::L1 => {
                    let (pa, pb) = (p1[a], p1[b]);
                    (lift * pb, pb * (1.0 - lift * pa) / (1.0 - pa))
                }
                Level::L2 => {
                    let (pa_par, pb_par) = (parent(a), parent(b));
                    // P(parent_b | a) and P(a | parent_b), both exact under the
                    // level-1 model.
                    let (pb_given_a, a_given_pb) = if pa_par == pb_par || n1 == 1 {
                        (1.0, q2[a])
                    } else {
                        (p1[pb_par], q2[a] * p1[pa_par])
                    };
                    let qb = q2[b];
                    let r = lift * qb * parent_marginal[pb_par] / pb_given_a;
                    (r, (qb - a_given_pb * r) / (1.0 - a_given_pb))
                }
            };
            if !(with_a <= 1.0 && without_a >= 0.0) {
                return Err(Error::Spec(format!(
                    "lift {lift} between {} labels {a} and {b} is infeasible for their frequencies",
                    pair.level
                )));
            }
            let planted = Planted { a, with_a, without_a };
            match pair.level {
                Level::L1 => planted1.insert(b, planted),
                Level::L2 => planted2.insert(b, planted),
            };
        }
        Ok(Self {
            p1,
            q2,
            planted1,
            planted2,
        })
    }

    /// Marginal probability of each label at a level.
    pub fn marginals(&self, level: Level) -> Vec<f64> {
        let z = 1.0 - self.p1.iter().map(|x| 1.0 - x).product::<f64>();
        let m1: Vec<f64> = self.p1.iter().map(|p| p / z).collect();
        match level {
            Level::L1 => m1,
            Level::L2 => {
                let n1 = self.p1.len();
                self.q2.iter().enumerate().map(|(j, q)| q * m1[j % n1]).collect()
            }
        }
    }

    fn sample(&self, rng: &mut Prng) -> (LabelSet, LabelSet) {
        let l1 = loop {
            let mut set = LabelSet::new();
            for (i, &p) in self.p1.iter().enumerate() {
                let p = match self.planted1.get(&i) {
                    Some(d) if set.contains(&d.a) => d.with_a,
                    Some(d) => d.without_a,
                    None => p,
                };
                if rng.bernoulli(p) {
                    set.insert(i);
                }
            }
            if !set.is_empty() {
                break set;
            }
        };
        let n1 = self.p1.len();
        let mut l2 = LabelSet::new();
        for (j, &q) in self.q2.iter().enumerate() {
            if !l1.contains(&(j % n1)) {
                continue;
            }
            let q = match self.planted2.get(&j) {
                Some(d) if l2.contains(&d.a) => d.with_a,
                Some(d) => d.without_a,
                None => q,
            };
            if rng.bernoulli(q) {
                l2.insert(j);
            }
        }
        (l1, l2)
    }
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const TOPICS: [&str; 8] = ["law", "policy", "affairs", "rights", "trade", "health", "security", "services"];

fn syllables(mut index: usize, count: usize) -> String {
    let mut out = String::new();
    for _ in 0..count {
        let s = index % 70;
        index /= 70;
        out.push(CONSONANTS[s / 5] as char);
        out.push(VOWELS[s % 5] as char);
    }
    out
}

/// Deterministic descriptors: level-1 names have two syllables, level-2
/// names three, scrambled so alphabetical and id order differ.
pub fn synthetic_catalog(num_l1: usize, num_l2: usize) -> Result<LabelCatalog> {
    let mut labels = Vec::new();
    for (level, n, count, space) in [(Level::L1, num_l1, 2, 4900usize), (Level::L2, num_l2, 3, 343_000)] {
        if n > space {
            return Err(Error::Spec(format!("at most {space} {level} labels are supported")));
        }
        for id in 0..n {
            let name = syllables((id * 2713 + 101) % space, count);
            labels.push(Label {
                id,
                level,
                original: format!("{name} {}", TOPICS[id % TOPICS.len()]),
                simplified: name,
                pseudo: format!("<label_{}>", id + 1),
            });
        }
    }
    LabelCatalog::new(labels)
}

fn signature_word(level: Level, label: usize, k: usize) -> String {
    format!("s{}x{label}x{k}", level.number())
}

pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    let plan = SamplingPlan::new(spec)?;
    let catalog = synthetic_catalog(spec.num_labels_l1, spec.num_labels_l2)?;
    let mut words = catalog.words();
    words.extend((0..spec.background_vocab).map(|i| format!("w{i}")));
    for level in [Level::L1, Level::L2] {
        for l in 0..spec.num_labels(level) {
            words.extend((0..spec.signature_tokens).map(|k| signature_word(level, l, k)));
        }
    }
    let tokenizer = Tokenizer::new(&words, catalog.special_tokens())?;
    let id = |w: &str| tokenizer.id(w).expect("word was added to the vocabulary");
    let background: Vec<u32> = (0..spec.background_vocab).map(|i| id(&format!("w{i}"))).collect();
    let signatures = |level: Level| -> Vec<Vec<u32>> {
        (0..spec.num_labels(level))
            .map(|l| (0..spec.signature_tokens).map(|k| id(&signature_word(level, l, k))).collect())
            .collect()
    };
    let (sig1, sig2) = (signatures(Level::L1), signatures(Level::L2));

    let mut rng = Prng::new(spec.seed);
    let mut documents = Vec::with_capacity(spec.num_docs);
    for doc_id in 0..spec.num_docs {
        let (labels_l1, labels_l2) = plan.sample(&mut rng);
        let active: Vec<&Vec<u32>> = labels_l1
            .iter()
            .map(|&l| &sig1[l])
            .chain(labels_l2.iter().map(|&l| &sig2[l]))
            .collect();
        let len = rng.range_inclusive(spec.doc_length[0], spec.doc_length[1]);
        let tokens = (0..len)
            .map(|_| {
                if rng.bernoulli(spec.signature_rate) {
                    let sig = active[rng.below(active.len())];
                    sig[rng.below(sig.len())]
                } else {
                    background[rng.below(background.len())]
                }
            })
            .collect();
        let timestamp = rng.below(1_000_000_000) as i64;
        documents.push(Document {
            id: doc_id as u64,
            tokens,
            labels_l1,
            labels_l2,
            timestamp,
        });
    }
    Ok(Dataset {
        catalog,
        tokenizer,
        documents,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    Chronological,
    Random,
}

/// Positions into [`Dataset::documents`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
}

/// Orders documents by timestamp (ties by id) or by a seeded shuffle, then
/// slices off train, dev and test.
pub fn split(docs: &[Document], fractions: [f64; 3], mode: SplitMode, seed: u64) -> Result<Split> {
    if fractions.iter().any(|f| !(*f > 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be positive and sum to 1")));
    }
    if docs.len() < 3 {
        return Err(Error::Data(format!("cannot split {} documents three ways", docs.len())));
    }
    let mut order: Vec<usize> = (0..docs.len()).collect();
    match mode {
        SplitMode::Chronological => order.sort_by_key(|&i| (docs[i].timestamp, docs[i].id)),
        SplitMode::Random => Prng::new(seed).shuffle(&mut order),
    }
    let n = docs.len();
    let n_train = ((fractions[0] * n as f64).round() as usize).clamp(1, n - 2);
    let n_dev = ((fractions[1] * n as f64).round() as usize).clamp(1, n - n_train - 1);
    Ok(Split {
        train: order[..n_train].to_vec(),
        dev: order[n_train..n_train + n_dev].to_vec(),
        test: order[n_train + n_dev..].to_vec(),
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tokens: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    labels_l1: Vec<String>,
    #[serde(default)]
    labels_l2: Vec<String>,
    #[serde(default)]
    timestamp: Option<i64>,
}

impl Dataset {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let names = |level: Level, set: &LabelSet| -> Vec<String> {
            let labels = self.catalog.level(level);
            set.iter().map(|&l| labels[l].original.clone()).collect()
        };
        for d in &self.documents {
            let rec = Record {
                id: Some(d.id),
                tokens: Some(d.tokens.clone()),
                text: None,
                labels_l1: names(Level::L1, &d.labels_l1),
                labels_l2: names(Level::L2, &d.labels_l2),
                timestamp: Some(d.timestamp),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Reads records against an existing catalog and tokenizer. Labels are
    /// given by their original descriptors.
    pub fn read_jsonl<R: BufRead>(r: R, catalog: LabelCatalog, tokenizer: Tokenizer) -> Result<Self> {
        let lookup = |level: Level| -> HashMap<&str, usize> {
            catalog.level(level).iter().map(|l| (l.original.as_str(), l.id)).collect()
        };
        let (by_name1, by_name2) = (lookup(Level::L1), lookup(Level::L2));
        let mut documents = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line_no = i + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: String| Error::Parse { line: line_no, message };
            let rec: Record = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            let tokens = match (rec.tokens, rec.text) {
                (Some(t), None) => {
                    if let Some(&x) = t.iter().find(|&&x| x as usize >= tokenizer.len()) {
                        return Err(bad(format!("token id {x} outside vocabulary of {}", tokenizer.len())));
                    }
                    t
                }
                (None, Some(text)) => tokenizer.encode(&text),
                (Some(_), Some(_)) => return Err(bad("record has both `tokens` and `text`".into())),
                (None, None) => return Err(bad("record needs `tokens` or `text`".into())),
            };
            if tokens.is_empty() {
                return Err(bad("document has no tokens".into()));
            }
            let resolve = |names: &[String], map: &HashMap<&str, usize>, level: Level| -> Result<LabelSet> {
                let unknown: Vec<&str> = names.iter().map(String::as_str).filter(|n| !map.contains_key(n)).collect();
                if !unknown.is_empty() {
                    return Err(Error::Data(format!("line {line_no}: unknown {level} labels {unknown:?}")));
                }
                Ok(names.iter().map(|n| map[n.as_str()]).collect())
            };
            let labels_l1 = resolve(&rec.labels_l1, &by_name1, Level::L1)?;
            if labels_l1.is_empty() {
                return Err(bad("document has no level-1 labels".into()));
            }
            let labels_l2 = resolve(&rec.labels_l2, &by_name2, Level::L2)?;
            documents.push(Document {
                id: rec.id.unwrap_or(i as u64),
                tokens,
                labels_l1,
                labels_l2,
                timestamp: rec.timestamp.unwrap_or(0),
            });
        }
        Ok(Self {
            catalog,
            tokenizer,
            documents,
        })
    }

    /// Writes corpus, label catalog and vocabulary into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join(CORPUS_FILE))?);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        self.catalog.save(&dir.join(LABELS_FILE))?;
        self.tokenizer.save(&dir.join(VOCAB_FILE))
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let catalog = LabelCatalog::load(&dir.join(LABELS_FILE))?;
        let tokenizer = Tokenizer::load(&dir.join(VOCAB_FILE))?;
        let file = std::fs::File::open(dir.join(CORPUS_FILE))?;
        Self::read_jsonl(std::io::BufReader::new(file), catalog, tokenizer)
    }

    pub fn subset(&self, positions: &[usize]) -> Vec<&Document> {
        positions.iter().map(|&i| &self.documents[i]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small(seed: u64) -> DatasetSpec {
        DatasetSpec {
            num_docs: 300,
            seed,
            ..DatasetSpec::uklex_like()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small(3)).unwrap();
        let b = generate(&small(3)).unwrap();
        let c = generate(&small(4)).unwrap();
        let bytes = |d: &Dataset| {
            let mut v = Vec::new();
            d.write_jsonl(&mut v).unwrap();
            v
        };
        assert_eq!(bytes(&a), bytes(&b));
        assert_ne!(bytes(&a), bytes(&c));
    }

    #[test]
    fn documents_satisfy_invariants() {
        let spec = small(1);
        let d = generate(&spec).unwrap();
        for doc in &d.documents {
            assert!(!doc.labels_l1.is_empty());
            assert!(doc.tokens.len() >= spec.doc_length[0] && doc.tokens.len() <= spec.doc_length[1]);
            assert!(doc.labels_l1.iter().all(|&l| l < 18));
            for &l in &doc.labels_l2 {
                assert!(l < 69);
                assert!(doc.labels_l1.contains(&(l % 18)), "level-2 label without parent");
            }
        }
    }

    #[test]
    fn uklex_like_matches_labels_per_document() {
        let spec = DatasetSpec::uklex_like();
        let d = generate(&spec).unwrap();
        let n = d.documents.len() as f64;
        let l1 = d.documents.iter().map(|x| x.labels_l1.len()).sum::<usize>() as f64 / n;
        let l2 = d.documents.iter().map(|x| x.labels_l2.len()).sum::<usize>() as f64 / n;
        assert!((l1 - 1.2).abs() <= 0.1, "L1 L/D {l1}");
        assert!((l2 - 1.5).abs() <= 0.15, "L2 L/D {l2}");
        let plan = SamplingPlan::new(&spec).unwrap();
        assert!((plan.marginals(Level::L1).iter().sum::<f64>() - 1.2).abs() < 1e-6);
        assert!((plan.marginals(Level::L2).iter().sum::<f64>() - 1.5).abs() < 1e-6);
    }

    #[test]
    fn zero_exponent_gives_uniform_frequencies() {
        let spec = DatasetSpec {
            num_docs: 4000,
            num_labels_l2: 0,
            mean_labels_l2: 0.0,
            zipf_exponent: 0.0,
            doc_length: [1, 2],
            ..DatasetSpec::uklex_like()
        };
        let d = generate(&spec).unwrap();
        let mut counts = vec![0usize; 18];
        for doc in &d.documents {
            for &l in &doc.labels_l1 {
                counts[l] += 1;
            }
        }
        let n = d.documents.len() as f64;
        let p = 1.2 / 18.0;
        let sigma = (n * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n * p).abs() <= 3.0 * sigma, "count {c} vs {}", n * p);
        }
    }

    #[test]
    fn planted_pairs_reach_their_lift() {
        let spec = DatasetSpec::planted();
        let plan = SamplingPlan::new(&spec).unwrap();
        let m = plan.marginals(Level::L2);
        assert!((m.iter().sum::<f64>() - 1.5).abs() < 1e-6);
        let d = generate(&spec).unwrap();
        let n = d.documents.len() as f64;
        for pair in &spec.dependency_pairs {
            let (mut na, mut nb, mut nab) = (0.0, 0.0, 0.0);
            for doc in &d.documents {
                let a = doc.labels_l2.contains(&pair.a);
                let b = doc.labels_l2.contains(&pair.b);
                na += f64::from(u8::from(a));
                nb += f64::from(u8::from(b));
                nab += f64::from(u8::from(a && b));
            }
            let lift = (nab / n) / ((na / n) * (nb / n));
            assert!((3.0..=7.0).contains(&lift), "pair {pair:?}: lift {lift}");
            // Marginal of b stays at its unplanted value.
            let sigma = (n * m[pair.b] * (1.0 - m[pair.b])).sqrt();
            assert!((nb - n * m[pair.b]).abs() < 4.0 * sigma);
        }
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        let mut spec = small(0);
        spec.mean_labels_l2 = 60.0;
        assert!(matches!(generate(&spec), Err(Error::Spec(_))));
        let mut spec = small(0);
        spec.mean_labels_l1 = 0.5;
        assert!(matches!(generate(&spec), Err(Error::Spec(_))));
        let mut spec = small(0);
        spec.dependency_pairs = vec![DependencyPair {
            level: Level::L1,
            a: 0,
            b: 1,
            lift: 50.0,
        }];
        assert!(matches!(generate(&spec), Err(Error::Spec(_))));
        let mut spec = small(0);
        spec.dependency_pairs = vec![DependencyPair {
            level: Level::L2,
            a: 0,
            b: 100,
            lift: 2.0,
        }];
        assert!(matches!(generate(&spec), Err(Error::Spec(_))));
    }

    fn doc(id: u64, timestamp: i64) -> Document {
        Document {
            id,
            tokens: vec![5],
            labels_l1: [0].into_iter().collect(),
            labels_l2: LabelSet::new(),
            timestamp,
        }
    }

    #[test]
    fn split_sizes_and_errors() {
        let docs: Vec<Document> = (0..8).map(|i| doc(i, 100 - i as i64)).collect();
        let s = split(&docs, [0.5, 0.25, 0.25], SplitMode::Chronological, 0).unwrap();
        assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (4, 2, 2));
        assert_eq!(s.train, vec![7, 6, 5, 4]);
        assert!(split(&docs[..2], [0.5, 0.25, 0.25], SplitMode::Random, 0).is_err());
        assert!(split(&docs, [0.5, 0.5, 0.5], SplitMode::Random, 0).is_err());
        let r1 = split(&docs, [0.5, 0.25, 0.25], SplitMode::Random, 9).unwrap();
        let r2 = split(&docs, [0.5, 0.25, 0.25], SplitMode::Random, 9).unwrap();
        assert_eq!(r1, r2);
    }

    proptest! {
        #[test]
        fn chronological_split_is_ordered_partition(ts in prop::collection::vec(0i64..50, 3..60)) {
            let docs: Vec<Document> = ts.iter().enumerate().map(|(i, &t)| doc(i as u64, t)).collect();
            let s = split(&docs, [0.6, 0.2, 0.2], SplitMode::Chronological, 0).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.dev).chain(&s.test).copied().collect();
            all.sort();
            prop_assert_eq!(all, (0..docs.len()).collect::<Vec<_>>());
            let max = |v: &[usize]| v.iter().map(|&i| docs[i].timestamp).max().unwrap();
            let min = |v: &[usize]| v.iter().map(|&i| docs[i].timestamp).min().unwrap();
            prop_assert!(max(&s.train) <= min(&s.dev));
            prop_assert!(max(&s.dev) <= min(&s.test));
        }
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let d = generate(&small(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.save_dir(dir.path()).unwrap();
        assert_eq!(Dataset::load_dir(dir.path()).unwrap(), d);

        let cat = d.catalog.clone();
        let tok = d.tokenizer.clone();
        let name = cat.level(Level::L1)[0].original.clone();
        let sig = tok.token(d.documents[0].tokens[0]).unwrap().to_string();
        let good = format!(
            "{{\"id\":1,\"text\":\"{sig} w3 nope\",\"labels_l1\":[\"{name}\"]}}\n{{\"tokens\":[{}],\"labels_l1\":[\"{name}\"],\"timestamp\":5}}\n",
            tok.id("w3").unwrap()
        );
        let loaded = Dataset::read_jsonl(good.as_bytes(), cat.clone(), tok.clone()).unwrap();
        assert_eq!(
            loaded.documents[0].tokens,
            vec![tok.id(&sig).unwrap(), tok.id("w3").unwrap(), crate::tokenizer::UNK_ID]
        );
        assert_eq!(loaded.documents[1].tokens, vec![tok.id("w3").unwrap()]);
        assert_eq!(loaded.documents[1].id, 1);

        let missing = format!("{{\"text\":\"w1\",\"labels_l1\":[\"{name}\"]}}\n{{\"text\":\"w1\"}}\n");
        match Dataset::read_jsonl(missing.as_bytes(), cat.clone(), tok.clone()) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("labels_l1"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
        let unknown = "{\"text\":\"w1\",\"labels_l1\":[\"nonsense label\"]}\n";
        let err = Dataset::read_jsonl(unknown.as_bytes(), cat, tok).unwrap_err();
        assert!(matches!(err, Error::Data(ref m) if m.contains("nonsense label")), "{err}");
    }

    #[test]
    fn catalog_names_are_scrambled_and_single_token() {
        let c = synthetic_catalog(18, 69).unwrap();
        let names: Vec<&str> = c.level(Level::L1).iter().map(|l| l.simplified.as_str()).collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_ne!(names, sorted);
        assert!(c.level(Level::L2).iter().all(|l| l.simplified.len() == 6));
    }
}
