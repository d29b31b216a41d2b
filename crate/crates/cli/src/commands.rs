//! Command-line verbs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use seqlabel_core::{AttentionScheme, MethodKind};

use crate::config::{AblationGrid, DataSource, ExperimentConfig};
use crate::error::{CliError, Result};
use crate::experiment::{self, Cell, Experiment, RunRecord};
use crate::report::{self, ResultTable};

#[derive(Debug, Parser)]
#[command(name = "seqlabel", version, about = "Multi-label classification experiments with encoder-decoder transformers")]
pub struct Cli {
    /// Experiment config (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Restrict training to this seed, or set the corpus seed for generate-data.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, overriding `out` in the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Print the full default config and exit.
    #[arg(long)]
    pub print_defaults: bool,
    #[command(subcommand)]
    pub verb: Option<Verb>,
}

#[derive(Debug, Subcommand)]
pub enum Verb {
    /// Write a synthetic corpus (JSONL, label catalog, vocabulary).
    GenerateData,
    /// Train every configured method with every seed and tabulate test scores.
    Train,
    /// Re-score stored checkpoints on the test split.
    Evaluate,
    /// Run the decoder attention or depth ablation grid.
    Ablate {
        #[arg(long, value_enum)]
        grid: Option<AblationGrid>,
    },
    /// Pairwise label association with Fisher's exact test.
    Fisher,
    /// Rebuild result tables from the run directories under the output directory.
    Report,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn seeds(cli: &Cli, cfg: &ExperimentConfig) -> Vec<u64> {
    match cli.seed {
        Some(s) => vec![s],
        None => cfg.train.seeds.clone(),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir.display().to_string()))
}

/// Runs the parsed command line; the caller maps errors to exit codes.
pub fn execute(cli: &Cli) -> Result<()> {
    if cli.print_defaults {
        print!("{}", ExperimentConfig::defaults_toml());
        return Ok(());
    }
    let Some(verb) = &cli.verb else {
        return Err(CliError::Config("no verb given; see --help".into()));
    };
    let cfg = load_config(cli)?;
    match verb {
        Verb::GenerateData => generate_data(cli, cfg),
        Verb::Train => train(cli, cfg),
        Verb::Evaluate => evaluate(cli, cfg),
        Verb::Ablate { grid } => ablate(cli, cfg, *grid),
        Verb::Fisher => fisher(cli, cfg),
        Verb::Report => report(&cfg.out),
    }
}

fn generate_data(cli: &Cli, cfg: ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    let DataSource::Synthetic(mut spec) = cfg.source()? else {
        return Err(CliError::Config(format!(
            "generate-data needs a synthetic preset, not the path {:?}",
            cfg.dataset
        )));
    };
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    let dir = match &cli.out {
        Some(out) => out.clone(),
        None => cfg.out.join(&spec.name),
    };
    let ds = experiment::generate_data(&spec, &dir)?;
    println!(
        "wrote {} documents to {}",
        ds.documents.len(),
        experiment::corpus_path(&dir).display()
    );
    Ok(())
}

fn configured_cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    cfg.methods.iter().copied().map(Cell::new).collect()
}

fn train(cli: &Cli, cfg: ExperimentConfig) -> Result<()> {
    let seeds = seeds(cli, &cfg);
    let exp = Experiment::prepare(cfg)?;
    let cells = configured_cells(&exp.config);
    exp.check_cells(&cells)?;
    let out = exp.config.out.clone();
    create_dir(&out)?;
    let runs = exp.run_grid(&cells, &seeds, &out)?;
    let table = report::write_results(&out, "results", &runs)?;
    exp.write_manifest(&out, "train", &runs)?;
    print!("{}", table.to_text());
    Ok(())
}

fn evaluate(cli: &Cli, cfg: ExperimentConfig) -> Result<()> {
    let seeds = seeds(cli, &cfg);
    let exp = Experiment::prepare(cfg)?;
    let cells = configured_cells(&exp.config);
    let out = exp.config.out.clone();
    let runs = exp.evaluate_grid(&cells, &seeds, &out)?;
    let table = ResultTable::from_runs(&runs)?;
    table.write(&out, "evaluation")?;
    print!("{}", table.to_text());
    Ok(())
}

/// Cells and row labels of an ablation grid.
pub fn ablation_cells(cfg: &ExperimentConfig, grid: AblationGrid) -> Vec<(String, Cell)> {
    match grid {
        AblationGrid::Attention => {
            let t5 = |scheme| Cell::new(MethodKind::T5Enc { scheme });
            vec![
                ("Encoder+Head".into(), Cell::new(MethodKind::EncoderHead)),
                ("Single-step T5Enc".into(), Cell::new(MethodKind::T5EncSingleStep)),
                ("T5Enc".into(), t5(AttentionScheme::Causal)),
                ("No attention".into(), t5(AttentionScheme::None)),
                ("Full attention".into(), t5(AttentionScheme::Full)),
            ]
        }
        AblationGrid::Depth => cfg
            .ablation
            .depths
            .iter()
            .map(|&n| {
                let cell = Cell {
                    method: MethodKind::T5Enc {
                        scheme: AttentionScheme::Causal,
                    },
                    decoder_layers: Some(n),
                };
                (format!("N={n}"), cell)
            })
            .collect(),
    }
}

fn ablate(cli: &Cli, cfg: ExperimentConfig, grid: Option<AblationGrid>) -> Result<()> {
    let seeds = seeds(cli, &cfg);
    let grid = grid.unwrap_or(cfg.ablation.grid);
    let exp = Experiment::prepare(cfg)?;
    let rows = ablation_cells(&exp.config, grid);
    let cells: Vec<Cell> = rows.iter().map(|(_, c)| *c).collect();
    exp.check_cells(&cells)?;
    let out = exp.config.out.clone();
    create_dir(&out)?;
    let runs = exp.run_grid(&cells, &seeds, &out)?;
    let labelled: Vec<(String, Vec<&RunRecord>)> = rows
        .iter()
        .map(|(label, cell)| (label.clone(), runs.iter().filter(|r| r.cell == *cell).collect()))
        .collect();
    let table = report::ablation_table(&labelled)?;
    let stem = match grid {
        AblationGrid::Attention => "ablation_attention",
        AblationGrid::Depth => "ablation_depth",
    };
    table.write(&out, stem)?;
    exp.write_manifest(&out, stem, &runs)?;
    print!("{}", table.to_text());
    Ok(())
}

fn fisher(cli: &Cli, mut cfg: ExperimentConfig) -> Result<()> {
    if let Some(seed) = cli.seed {
        if matches!(cfg.source(), Ok(DataSource::Synthetic(_))) {
            cfg.data.insert("seed".into(), toml::Value::Integer(seed as i64));
        }
    }
    let exp = Experiment::prepare(cfg)?;
    let rep = report::fisher_report(&exp)?;
    let out = exp.config.out.clone();
    create_dir(&out)?;
    let names: BTreeMap<usize, String> = exp
        .dataset
        .catalog
        .level(exp.level())
        .iter()
        .map(|l| (l.id, l.original.clone()))
        .collect();
    experiment::write_json(&out.join("fisher.json"), &rep)?;
    report::write_file(&out.join("fisher_pairs.csv"), &rep.pairs_csv(&names)?)?;
    println!("{}", rep.summary());
    Ok(())
}

fn report(out: &Path) -> Result<()> {
    if !out.is_dir() {
        return Err(CliError::Config(format!("output directory {} does not exist", out.display())));
    }
    let runs = experiment::load_runs(out)?;
    if runs.is_empty() {
        return Err(CliError::Config(format!("no run directories under {}", out.display())));
    }
    let table = report::write_results(out, "results", &runs)?;
    print!("{}", table.to_text());
    Ok(())
}
