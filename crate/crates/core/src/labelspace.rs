//! Label catalogs, descriptor schemes, and the text format used for
//! generated label sequences.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::Tokenizer;

/// A set of label ids within one level.
pub type LabelSet = BTreeSet<usize>;

/// Granularity level of a label taxonomy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Level {
    L1,
    L2,
}

impl Level {
    pub fn number(self) -> u8 {
        match self {
            Level::L1 => 1,
            Level::L2 => 2,
        }
    }
}

impl TryFrom<u8> for Level {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Level::L1),
            2 => Ok(Level::L2),
            other => Err(format!("level must be 1 or 2, got {other}")),
        }
    }
}

impl From<Level> for u8 {
    fn from(l: Level) -> u8 {
        l.number()
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}", self.number())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescriptorScheme {
    Original,
    Simplified,
    Numeric,
    Pseudo,
}

impl DescriptorScheme {
    pub fn name(self) -> &'static str {
        match self {
            DescriptorScheme::Original => "original",
            DescriptorScheme::Simplified => "simplified",
            DescriptorScheme::Numeric => "numeric",
            DescriptorScheme::Pseudo => "pseudo",
        }
    }

    /// Schemes whose descriptors are guaranteed to be a single token.
    pub fn is_single_token(self) -> bool {
        matches!(self, DescriptorScheme::Simplified | DescriptorScheme::Pseudo)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Label {
    pub id: usize,
    pub level: Level,
    pub original: String,
    pub simplified: String,
    pub pseudo: String,
}

impl Label {
    /// Decimal string of `id + 1`.
    pub fn numeric(&self) -> String {
        (self.id + 1).to_string()
    }

    pub fn descriptor(&self, scheme: DescriptorScheme) -> String {
        match scheme {
            DescriptorScheme::Original => self.original.clone(),
            DescriptorScheme::Simplified => self.simplified.clone(),
            DescriptorScheme::Numeric => self.numeric(),
            DescriptorScheme::Pseudo => self.pseudo.clone(),
        }
    }
}

/// All labels of both levels, validated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelCatalog {
    l1: Vec<Label>,
    l2: Vec<Label>,
}

impl LabelCatalog {
    pub fn new(labels: Vec<Label>) -> Result<Self> {
        let (mut l1, mut l2): (Vec<Label>, Vec<Label>) =
            labels.into_iter().partition(|l| l.level == Level::L1);
        for (level, labels) in [(Level::L1, &mut l1), (Level::L2, &mut l2)] {
            labels.sort_by_key(|l| l.id);
            for (i, l) in labels.iter().enumerate() {
                if l.id != i {
                    return Err(Error::Data(format!(
                        "{level} label ids must be 0..{} without gaps or duplicates, found {}",
                        labels.len(),
                        l.id
                    )));
                }
            }
            for scheme in [
                DescriptorScheme::Original,
                DescriptorScheme::Simplified,
                DescriptorScheme::Pseudo,
            ] {
                let mut seen = HashSet::new();
                for l in labels.iter() {
                    let d = l.descriptor(scheme);
                    validate_descriptor(l, scheme, &d)?;
                    if !seen.insert(d.clone()) {
                        return Err(Error::Data(format!(
                            "duplicate {} descriptor {d:?} at {level}",
                            scheme.name()
                        )));
                    }
                }
            }
        }
        if l1.is_empty() {
            return Err(Error::Data("label catalog has no level-1 labels".into()));
        }
        Ok(Self { l1, l2 })
    }

    pub fn level(&self, level: Level) -> &[Label] {
        match level {
            Level::L1 => &self.l1,
            Level::L2 => &self.l2,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Label> {
        self.l1.iter().chain(&self.l2)
    }

    /// Natural-language words needed to spell every non-pseudo descriptor.
    pub fn words(&self) -> Vec<String> {
        let mut out = Vec::new();
        for l in self.iter() {
            out.extend(l.original.split_whitespace().map(str::to_string));
            out.push(l.simplified.clone());
            out.push(l.numeric());
        }
        out
    }

    /// Pseudo descriptor tokens, deduplicated, in catalog order.
    pub fn special_tokens(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.iter()
            .filter(|l| seen.insert(l.pseudo.clone()))
            .map(|l| l.pseudo.clone())
            .collect()
    }

    /// Parses `id<TAB>level<TAB>original<TAB>simplified<TAB>pseudo` records.
    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut labels = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected 5 tab-separated fields, got {}", fields.len()),
                });
            }
            let bad = |what: &str| Error::Parse {
                line: line_no,
                message: format!("invalid {what}"),
            };
            let id: usize = fields[0].parse().map_err(|_| bad("id"))?;
            let level: u8 = fields[1].parse().map_err(|_| bad("level"))?;
            let level = Level::try_from(level).map_err(|_| bad("level"))?;
            labels.push(Label {
                id,
                level,
                original: fields[2].to_string(),
                simplified: fields[3].to_string(),
                pseudo: fields[4].to_string(),
            });
        }
        Self::new(labels)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for l in self.iter() {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                l.id,
                l.level.number(),
                l.original,
                l.simplified,
                l.pseudo
            ));
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_tsv(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_tsv().as_bytes())?;
        Ok(())
    }
}

fn validate_descriptor(label: &Label, scheme: DescriptorScheme, d: &str) -> Result<()> {
    let who = format!("{} label {} ({:?})", label.level, label.id, label.original);
    if d.trim().is_empty() {
        return Err(Error::Data(format!("{who}: empty {} descriptor", scheme.name())));
    }
    if d.contains(',') {
        return Err(Error::Data(format!(
            "{who}: {} descriptor {d:?} contains a comma; provide a comma-free alias",
            scheme.name()
        )));
    }
    if d.contains(['\t', '\n']) || d.trim() != d {
        return Err(Error::Data(format!("{who}: malformed {} descriptor {d:?}", scheme.name())));
    }
    if scheme.is_single_token() && d.contains(char::is_whitespace) {
        return Err(Error::Data(format!(
            "{who}: {} descriptor {d:?} must be a single token",
            scheme.name()
        )));
    }
    Ok(())
}

/// Outcome of parsing a generated label sequence.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParsedPrediction {
    pub labels: LabelSet,
    /// Non-empty comma-separated fragments seen.
    pub fragments: usize,
    /// Fragments that matched no descriptor, in order of appearance.
    pub novel: Vec<String>,
}

/// The labels of one level, viewed through one descriptor scheme.
#[derive(Clone, Debug)]
pub struct LabelVocabulary {
    level: Level,
    scheme: DescriptorScheme,
    descriptors: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl LabelVocabulary {
    pub fn new(catalog: &LabelCatalog, level: Level, scheme: DescriptorScheme) -> Result<Self> {
        let labels = catalog.level(level);
        if labels.is_empty() {
            return Err(Error::Config(format!("no labels at {level}")));
        }
        let descriptors: Vec<String> = labels.iter().map(|l| l.descriptor(scheme)).collect();
        let lookup = descriptors
            .iter()
            .enumerate()
            .map(|(i, d)| (d.clone(), i))
            .collect();
        Ok(Self {
            level,
            scheme,
            descriptors,
            lookup,
        })
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn scheme(&self) -> DescriptorScheme {
        self.scheme
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    pub fn descriptor(&self, id: usize) -> Option<&str> {
        self.descriptors.get(id).map(String::as_str)
    }

    pub fn lookup(&self, descriptor: &str) -> Option<usize> {
        self.lookup.get(descriptor).copied()
    }

    /// Descriptors sorted byte-wise and joined with `", "`.
    pub fn format_target<'a, I: IntoIterator<Item = &'a usize>>(&self, labels: I) -> Result<String> {
        let mut names = Vec::new();
        for &id in labels {
            names.push(
                self.descriptor(id)
                    .ok_or_else(|| Error::Data(format!("unknown {} label id {id}", self.level)))?,
            );
        }
        names.sort_unstable();
        names.dedup();
        Ok(names.join(", "))
    }

    /// Splits on commas, trims each fragment and keeps exact descriptor
    /// matches. Unmatched fragments are reported as novel.
    pub fn parse_prediction(&self, text: &str) -> ParsedPrediction {
        let mut out = ParsedPrediction::default();
        for fragment in text.split(',').map(str::trim).filter(|f| !f.is_empty()) {
            out.fragments += 1;
            match self.lookup(fragment) {
                Some(id) => {
                    out.labels.insert(id);
                }
                None => out.novel.push(fragment.to_string()),
            }
        }
        out
    }

    /// The single token id spelling label `id`'s descriptor.
    pub fn descriptor_token(&self, id: usize, tokenizer: &Tokenizer) -> Result<u32> {
        let d = self
            .descriptor(id)
            .ok_or_else(|| Error::Data(format!("unknown {} label id {id}", self.level)))?;
        match self.single_token(d, tokenizer) {
            Some(t) => Ok(t),
            None => Err(Error::Config(format!(
                "label {id} {} descriptor {d:?} does not map to exactly one known token",
                self.scheme.name()
            ))),
        }
    }

    pub fn descriptor_tokens(&self, tokenizer: &Tokenizer) -> Result<Vec<u32>> {
        (0..self.len()).map(|i| self.descriptor_token(i, tokenizer)).collect()
    }

    fn single_token(&self, d: &str, tokenizer: &Tokenizer) -> Option<u32> {
        match tokenizer.encode(d).as_slice() {
            [t] if tokenizer.token(*t) == Some(d) => Some(*t),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn label(id: usize, level: Level, original: &str, simplified: &str) -> Label {
        Label {
            id,
            level,
            original: original.into(),
            simplified: simplified.into(),
            pseudo: format!("<label_{}>", id + 1),
        }
    }

    fn uklex_like() -> LabelCatalog {
        LabelCatalog::new(vec![
            label(0, Level::L1, "finance", "finance"),
            label(1, Level::L1, "EU", "EU"),
            label(2, Level::L1, "domestic violence", "violence"),
            label(3, Level::L1, "health care", "health"),
            label(0, Level::L2, "banking law", "banking"),
        ])
        .unwrap()
    }

    fn tokenizer(c: &LabelCatalog) -> Tokenizer {
        Tokenizer::new(["alpha", "beta"].iter().map(|s| s.to_string()).chain(c.words()), c.special_tokens())
            .unwrap()
    }

    #[test]
    fn alphabetical_target_with_comma_space() {
        let v = LabelVocabulary::new(&uklex_like(), Level::L1, DescriptorScheme::Original).unwrap();
        assert_eq!(v.format_target(&LabelSet::from([0, 1])).unwrap(), "EU, finance");
        assert_eq!(v.format_target(&LabelSet::new()).unwrap(), "");
        assert!(v.format_target(&LabelSet::from([9])).is_err());
    }

    #[test]
    fn parsing_drops_novel_fragments() {
        let v = LabelVocabulary::new(&uklex_like(), Level::L1, DescriptorScheme::Original).unwrap();
        let p = v.parse_prediction("EU, finance, accommodation");
        assert_eq!(p.labels, LabelSet::from([0, 1]));
        assert_eq!(p.novel, vec!["accommodation".to_string()]);
        assert_eq!(p.fragments, 3);

        let p = v.parse_prediction("finance, finance");
        assert_eq!(p.labels, LabelSet::from([0]));
        assert!(p.novel.is_empty());
        assert_eq!(v.parse_prediction(""), ParsedPrediction::default());
    }

    #[test]
    fn numeric_scheme_is_one_based() {
        let v = LabelVocabulary::new(&uklex_like(), Level::L1, DescriptorScheme::Numeric).unwrap();
        assert_eq!(v.descriptor(0), Some("1"));
        assert_eq!(v.lookup("4"), Some(3));
    }

    #[test]
    fn comma_descriptor_rejected() {
        let bad = LabelCatalog::new(vec![label(
            0,
            Level::L1,
            "Anthropology, Education, Sociology",
            "anthropology",
        )]);
        assert!(matches!(bad, Err(Error::Data(m)) if m.contains("comma")));
    }

    #[test]
    fn multi_word_simplified_rejected() {
        let bad = LabelCatalog::new(vec![label(0, Level::L1, "health care", "health care")]);
        assert!(bad.is_err());
    }

    #[test]
    fn pseudo_tokens_are_reserved_and_injective() {
        let c = uklex_like();
        let tok = tokenizer(&c);
        let v = LabelVocabulary::new(&c, Level::L1, DescriptorScheme::Pseudo).unwrap();
        let ids = v.descriptor_tokens(&tok).unwrap();
        assert!(ids.iter().all(|&i| i as usize >= tok.base_size()));
        assert_eq!(ids.iter().collect::<HashSet<_>>().len(), ids.len());
        assert_eq!(tok.token(ids[0]), Some("<label_1>"));
        for (label, &id) in ids.iter().enumerate() {
            let back = v.lookup(tok.token(id).unwrap()).unwrap();
            assert_eq!(back, label);
            assert_eq!(v.descriptor_token(back, &tok).unwrap(), id);
        }
    }

    #[test]
    fn original_multi_word_not_single_token() {
        let c = uklex_like();
        let tok = tokenizer(&c);
        let v = LabelVocabulary::new(&c, Level::L1, DescriptorScheme::Original).unwrap();
        assert!(matches!(v.descriptor_token(2, &tok), Err(Error::Config(_))));
        let s = LabelVocabulary::new(&c, Level::L1, DescriptorScheme::Simplified).unwrap();
        assert_eq!(tok.token(s.descriptor_token(2, &tok).unwrap()), Some("violence"));
    }

    #[test]
    fn tsv_round_trip_and_line_errors() {
        let c = uklex_like();
        assert_eq!(LabelCatalog::parse_tsv(&c.to_tsv()).unwrap(), c);
        let err = LabelCatalog::parse_tsv("0\t1\ta\ta\t<l>\n1\t3\tb\tb\t<m>\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    proptest! {
        #[test]
        fn format_parse_round_trip(mask in proptest::collection::vec(any::<bool>(), 4)) {
            let c = uklex_like();
            for scheme in [DescriptorScheme::Original, DescriptorScheme::Simplified, DescriptorScheme::Numeric] {
                let v = LabelVocabulary::new(&c, Level::L1, scheme).unwrap();
                let set: LabelSet = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
                let text = v.format_target(&set).unwrap();
                let parsed = v.parse_prediction(&text);
                prop_assert_eq!(&parsed.labels, &set);
                prop_assert!(parsed.novel.is_empty());
                let again = v.parse_prediction(&v.format_target(&parsed.labels).unwrap());
                prop_assert_eq!(again.labels, parsed.labels);
            }
        }
    }
}
