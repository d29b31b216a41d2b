//! Result tables rebuilt from stored per-seed metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use seqlabel_core::fisher::{self, LogFactorials, PairAnalysis};
use seqlabel_core::metrics::{aggregate_seeds, SeedAggregate};
use seqlabel_core::{ContingencyTable, LabelSet, Level};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::experiment::{Experiment, RunRecord};

#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub label: String,
    /// One entry per column group; `None` where the row has no runs.
    pub cells: Vec<Option<SeedAggregate>>,
}

/// Rows are methods; each column group is one dataset and level, holding a
/// micro-F1 and a macro-F1 cell.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultTable {
    pub groups: Vec<String>,
    pub rows: Vec<TableRow>,
}

fn group_name(r: &RunRecord) -> String {
    format!("{} {}", r.dataset, r.level)
}

impl ResultTable {
    /// Groups runs by method row (in rank order) and dataset column.
    pub fn from_runs(runs: &[RunRecord]) -> Result<Self> {
        if runs.is_empty() {
            return Err(CliError::Config("no runs to tabulate".into()));
        }
        let mut cells: Vec<_> = runs.iter().map(|r| r.cell).collect();
        cells.sort_by_key(|c| c.rank());
        cells.dedup();
        let labelled: Vec<(String, Vec<&RunRecord>)> = cells
            .iter()
            .map(|c| (c.label(), runs.iter().filter(|r| r.cell == *c).collect()))
            .collect();
        Self::from_rows(&labelled)
    }

    /// Builds a table from explicitly labelled rows, keeping their order.
    pub fn from_rows(rows: &[(String, Vec<&RunRecord>)]) -> Result<Self> {
        let groups: BTreeSet<String> = rows.iter().flat_map(|(_, rs)| rs.iter().map(|r| group_name(r))).collect();
        let groups: Vec<String> = groups.into_iter().collect();
        let mut out = Vec::with_capacity(rows.len());
        for (label, runs) in rows {
            let mut row_cells = Vec::with_capacity(groups.len());
            for g in &groups {
                let reports: Vec<_> = runs.iter().filter(|r| &group_name(r) == g).map(|r| r.test.clone()).collect();
                row_cells.push(if reports.is_empty() { None } else { Some(aggregate_seeds(&reports)?) });
            }
            out.push(TableRow {
                label: label.clone(),
                cells: row_cells,
            });
        }
        Ok(Self { groups, rows: out })
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["Method".to_string()];
        for g in &self.groups {
            h.push(format!("{g} micro-F1"));
            h.push(format!("{g} macro-F1"));
        }
        h
    }

    fn body(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|row| {
                let mut line = vec![row.label.clone()];
                for cell in &row.cells {
                    match cell {
                        Some(agg) => {
                            line.push(agg.micro.to_string());
                            line.push(agg.macro_.to_string());
                        }
                        None => line.extend(["-".to_string(), "-".to_string()]),
                    }
                }
                line
            })
            .collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        to_csv(&self.header(), &self.body())
    }

    /// Column-aligned plain text.
    pub fn to_text(&self) -> String {
        aligned(&self.header(), &self.body())
    }

    /// Writes `{stem}.csv` and `{stem}.txt` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        write_file(&dir.join(format!("{stem}.csv")), &self.to_csv()?)?;
        write_file(&dir.join(format!("{stem}.txt")), &self.to_text())
    }
}

pub fn to_csv(header: &[String], body: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for line in body {
        w.write_record(line)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io {
        context: "csv buffer".into(),
        source: e.into_error(),
    })?;
    Ok(String::from_utf8(bytes).expect("csv of strings is utf-8"))
}

pub fn aligned(header: &[String], body: &[Vec<String>]) -> String {
    let width = |col: usize| {
        std::iter::once(&header[col])
            .chain(body.iter().map(|l| &l[col]))
            .map(|s| s.chars().count())
            .max()
            .unwrap_or(0)
    };
    let widths: Vec<usize> = (0..header.len()).map(width).collect();
    let render = |line: &[String]| {
        let cols: Vec<String> = line
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (s, w))| {
                let pad = w - s.chars().count();
                if i == 0 {
                    format!("{s}{}", " ".repeat(pad))
                } else {
                    format!("{}{s}", " ".repeat(pad))
                }
            })
            .collect();
        cols.join("  ").trim_end().to_string()
    };
    let mut out = render(header);
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for line in body {
        out.push_str(&render(line));
        out.push('\n');
    }
    out
}

pub fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(CliError::io(path.display().to_string()))
}

/// Raw per-seed test scores at full precision, one line per run.
pub fn seed_csv(runs: &[RunRecord]) -> Result<String> {
    let header: Vec<String> = ["run", "method", "dataset", "level", "seed", "micro_f1", "macro_f1"]
        .map(String::from)
        .to_vec();
    let body: Vec<Vec<String>> = runs
        .iter()
        .map(|r| {
            vec![
                r.run.clone(),
                r.cell.label(),
                r.dataset.clone(),
                r.level.to_string(),
                r.seed.to_string(),
                r.test.micro_f1.to_string(),
                r.test.macro_f1.to_string(),
            ]
        })
        .collect();
    to_csv(&header, &body)
}

/// Novel-label telemetry per generative run.
pub fn novel_csv(runs: &[RunRecord]) -> Result<Option<String>> {
    let header: Vec<String> = ["run", "method", "seed", "documents", "fragments", "novel", "rate_percent", "distinct"]
        .map(String::from)
        .to_vec();
    let body: Vec<Vec<String>> = runs
        .iter()
        .filter_map(|r| r.novel.as_ref().map(|n| (r, n)))
        .map(|(r, n)| {
            vec![
                r.run.clone(),
                r.cell.label(),
                r.seed.to_string(),
                n.stats.documents.to_string(),
                n.stats.fragments.to_string(),
                n.stats.novel.to_string(),
                format!("{:.1}", n.rate),
                n.distinct.join("; "),
            ]
        })
        .collect();
    if body.is_empty() {
        return Ok(None);
    }
    to_csv(&header, &body).map(Some)
}

/// Writes the result table, raw seed scores and novel-label telemetry.
pub fn write_results(dir: &Path, stem: &str, runs: &[RunRecord]) -> Result<ResultTable> {
    let table = ResultTable::from_runs(runs)?;
    table.write(dir, stem)?;
    write_file(&dir.join(format!("{stem}_seeds.csv")), &seed_csv(runs)?)?;
    if let Some(text) = novel_csv(runs)? {
        write_file(&dir.join("novel_labels.csv"), &text)?;
    }
    Ok(table)
}

/// Table of labelled rows that must all cover the same seeds.
pub fn ablation_table(rows: &[(String, Vec<&RunRecord>)]) -> Result<ResultTable> {
    if rows.is_empty() || rows.iter().any(|(_, rs)| rs.is_empty()) {
        return Err(CliError::Config("ablation needs at least one run in every row".into()));
    }
    let seeds = |rs: &[&RunRecord]| rs.iter().map(|r| r.seed).collect::<BTreeSet<_>>();
    let reference = seeds(&rows[0].1);
    for (label, rs) in rows {
        let s = seeds(rs);
        if s != reference {
            return Err(CliError::Config(format!(
                "ablation row {label:?} has seeds {s:?} but {:?} has {reference:?}",
                rows[0].0
            )));
        }
    }
    ResultTable::from_rows(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub a: usize,
    pub b: usize,
    pub table: ContingencyTable,
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisherReport {
    pub dataset: String,
    pub level: Level,
    pub documents: usize,
    pub analysis: PairAnalysis,
    /// Significant pairs, most significant first.
    pub significant: Vec<PairRow>,
}

/// Pairwise association over the gold labels of the whole corpus.
pub fn fisher_report(exp: &Experiment) -> Result<FisherReport> {
    let level = exp.level();
    let n = exp.dataset.catalog.level(level).len();
    if n < 2 {
        return Err(CliError::Config(format!("{level} has {n} labels; pair analysis needs two")));
    }
    let sets: Vec<&LabelSet> = exp.dataset.documents.iter().map(|d| d.labels(level)).collect();
    let alpha = exp.config.fisher.alpha;
    let analysis = fisher::significant_pair_rate(&sets, n, alpha);
    let mut lf = LogFactorials::new(sets.len());
    let mut significant = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            let p = fisher::pair_p_value(&sets, a, b, &mut lf);
            if p < alpha {
                let table = ContingencyTable::from_sets(sets.iter().copied(), a, b);
                significant.push(PairRow { a, b, table, p });
            }
        }
    }
    significant.sort_by(|x, y| x.p.total_cmp(&y.p).then((x.a, x.b).cmp(&(y.a, y.b))));
    Ok(FisherReport {
        dataset: exp.dataset_name.clone(),
        level,
        documents: sets.len(),
        analysis,
        significant,
    })
}

impl FisherReport {
    pub fn summary(&self) -> String {
        format!(
            "{} {}: {} of {} label pairs significant at p < {} ({:.1}%) over {} documents",
            self.dataset,
            self.level,
            self.analysis.significant,
            self.analysis.pairs,
            self.analysis.alpha,
            self.analysis.rate,
            self.documents
        )
    }

    pub fn pairs_csv(&self, names: &BTreeMap<usize, String>) -> Result<String> {
        let header: Vec<String> = ["label_a", "label_b", "both", "a_only", "b_only", "neither", "p_value"]
            .map(String::from)
            .to_vec();
        let body: Vec<Vec<String>> = self
            .significant
            .iter()
            .map(|r| {
                vec![
                    names[&r.a].clone(),
                    names[&r.b].clone(),
                    r.table.a.to_string(),
                    r.table.b.to_string(),
                    r.table.c.to_string(),
                    r.table.d.to_string(),
                    format!("{:e}", r.p),
                ]
            })
            .collect();
        to_csv(&header, &body)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::Cell;
    use seqlabel_core::{AttentionScheme, Counts, MethodKind, MetricsReport, SizePreset};

    fn run(method: MethodKind, seed: u64, micro: f64) -> RunRecord {
        let report = MetricsReport {
            micro_f1: micro,
            macro_f1: micro / 2.0,
            per_label: vec![Counts::default()],
        };
        RunRecord {
            run: format!("r{seed}"),
            dataset: "toy".into(),
            level: Level::L1,
            cell: Cell::new(method),
            size: SizePreset::Small,
            seed,
            best_eval: 1,
            evaluations: 1,
            stopped_early: false,
            dev: report.clone(),
            test: report,
            novel: None,
        }
    }

    #[test]
    fn table_cells_aggregate_seeds() {
        let t5 = MethodKind::T5Enc { scheme: AttentionScheme::Causal };
        let runs = vec![
            run(t5, 0, 0.80),
            run(MethodKind::EncoderHead, 0, 0.70),
            run(t5, 1, 0.82),
            run(MethodKind::EncoderHead, 1, 0.70),
        ];
        let table = ResultTable::from_runs(&runs).unwrap();
        assert_eq!(table.rows[0].label, "Encoder+Head");
        assert_eq!(table.rows[1].label, "T5Enc (causal attention)");
        let csv = table.to_csv().unwrap();
        assert_eq!(
            csv,
            "Method,toy L1 micro-F1,toy L1 macro-F1\n\
             Encoder+Head,70.0 ± 0.0,35.0 ± 0.0\n\
             T5Enc (causal attention),81.0 ± 1.0,40.5 ± 0.5\n"
        );
        let text = table.to_text();
        assert!(text.lines().nth(3).unwrap().starts_with("T5Enc (causal attention)  "));
    }

    #[test]
    fn ablation_rejects_bad_inputs() {
        assert!(ablation_table(&[]).is_err());
        let a = run(MethodKind::EncoderHead, 0, 0.5);
        let b = run(MethodKind::T5EncSingleStep, 1, 0.5);
        let err = ablation_table(&[("x".into(), vec![&a]), ("y".into(), vec![&b])]).unwrap_err();
        assert!(err.to_string().contains("seeds"));
        assert!(ablation_table(&[("x".into(), vec![&a]), ("y".into(), vec![])]).is_err());
    }
}
