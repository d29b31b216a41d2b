//! Multi-label F1 scores and cross-seed aggregation.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelspace::LabelSet;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Counts {
    /// F1 from counts, 0 when nothing was gold or predicted.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub per_label: Vec<Counts>,
}

impl MetricsReport {
    pub fn from_counts(per_label: Vec<Counts>) -> Self {
        Self {
            micro_f1: micro_f1(&per_label),
            macro_f1: macro_f1(&per_label),
            per_label,
        }
    }
}

pub fn micro_f1(per_label: &[Counts]) -> f64 {
    let pooled = per_label.iter().fold(Counts::default(), |acc, c| Counts {
        tp: acc.tp + c.tp,
        fp: acc.fp + c.fp,
        fn_: acc.fn_ + c.fn_,
    });
    pooled.f1()
}

pub fn macro_f1(per_label: &[Counts]) -> f64 {
    if per_label.is_empty() {
        return 0.0;
    }
    per_label.iter().map(Counts::f1).sum::<f64>() / per_label.len() as f64
}

/// Per-label counts over paired gold and predicted sets.
pub fn count(gold: &[LabelSet], predicted: &[LabelSet], num_labels: usize) -> Result<Vec<Counts>> {
    if gold.len() != predicted.len() {
        return Err(Error::Shape {
            op: "count",
            lhs: vec![gold.len()],
            rhs: vec![predicted.len()],
        });
    }
    let mut out = vec![Counts::default(); num_labels];
    for (g, p) in gold.iter().zip(predicted) {
        if let Some(&bad) = g.iter().chain(p).find(|&&l| l >= num_labels) {
            return Err(Error::Index {
                index: bad,
                size: num_labels,
                context: "label in metric input".into(),
            });
        }
        for &l in g {
            if p.contains(&l) {
                out[l].tp += 1;
            } else {
                out[l].fn_ += 1;
            }
        }
        for &l in p.difference(g) {
            out[l].fp += 1;
        }
    }
    Ok(out)
}

pub fn evaluate(gold: &[LabelSet], predicted: &[LabelSet], num_labels: usize) -> Result<MetricsReport> {
    Ok(MetricsReport::from_counts(count(gold, predicted, num_labels)?))
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Contract("cannot summarise zero values".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Ok(Self {
            mean,
            std: var.sqrt(),
            n: values.len(),
        })
    }
}

/// One decimal each side, e.g. `80.8 ± 0.4`. Values are shown as given, so
/// pass percentages for table output.
impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.1} ± {:.1}", self.mean, self.std)
    }
}

/// Micro and macro F1 across seeds, in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub micro: Summary,
    pub macro_: Summary,
}

pub fn aggregate_seeds(reports: &[MetricsReport]) -> Result<SeedAggregate> {
    let micro: Vec<f64> = reports.iter().map(|r| 100.0 * r.micro_f1).collect();
    let macro_: Vec<f64> = reports.iter().map(|r| 100.0 * r.macro_f1).collect();
    Ok(SeedAggregate {
        micro: Summary::of(&micro)?,
        macro_: Summary::of(&macro_)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(tp: u64, fp: u64, fn_: u64) -> Counts {
        Counts { tp, fp, fn_ }
    }

    #[test]
    fn micro_reference_value() {
        assert_eq!(micro_f1(&[c(2, 1, 1)]), 2.0 / 3.0);
        assert_eq!(micro_f1(&[c(1, 1, 0), c(1, 0, 1)]), 2.0 / 3.0);
        assert_eq!(micro_f1(&[c(0, 0, 0)]), 0.0);
        assert_eq!(micro_f1(&[c(5, 0, 0), c(1, 0, 0)]), 1.0);
    }

    #[test]
    fn macro_reference_values() {
        assert_eq!(macro_f1(&[c(3, 0, 0), c(0, 2, 1)]), 0.5);
        assert_eq!(macro_f1(&[c(3, 0, 0), c(0, 0, 0)]), 0.5);
        let same = [c(2, 1, 3); 4];
        assert_eq!(macro_f1(&same), micro_f1(&same));
    }

    #[test]
    fn seed_summary_format() {
        let s = Summary::of(&[80.0, 81.0, 82.0, 81.0]).unwrap();
        assert_eq!(s.mean, 81.0);
        assert!((s.std - 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(s.to_string(), "81.0 ± 0.7");
        assert_eq!(Summary::of(&[77.25]).unwrap().std, 0.0);
        assert!(Summary::of(&[]).is_err());
    }

    #[test]
    fn count_checks_inputs() {
        let g = vec![LabelSet::from([0])];
        assert!(count(&g, &[], 2).is_err());
        assert!(count(&g, &[LabelSet::from([5])], 2).is_err());
    }

    proptest! {
        #[test]
        fn scores_stay_in_unit_interval(
            sets in prop::collection::vec((prop::collection::btree_set(0usize..6, 0..4), prop::collection::btree_set(0usize..6, 0..4)), 1..20)
        ) {
            let (g, p): (Vec<LabelSet>, Vec<LabelSet>) = sets.into_iter().unzip();
            let r = evaluate(&g, &p, 6).unwrap();
            prop_assert!((0.0..=1.0).contains(&r.micro_f1));
            prop_assert!((0.0..=1.0).contains(&r.macro_f1));
            let perfect = evaluate(&g, &g, 6).unwrap();
            if g.iter().any(|s| !s.is_empty()) {
                prop_assert_eq!(perfect.micro_f1, 1.0);
            }
        }
    }
}
