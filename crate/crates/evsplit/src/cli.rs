//! Command-line experiment runner: `run`, `validate`, and `ablate`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::engine::Experiment;
use crate::error::{Error, Result};
use crate::report::{console_line, emit_outputs, RunFiles};

#[derive(Debug, Parser)]
#[command(
    name = "evsplit",
    about = "Desk-scale split federated learning with evidential weighting, \
             complementary feature transfer, and dual-teacher distillation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one seeded experiment and write metrics.csv, summary.json,
    /// partition.json, and csr.json
    Run(RunArgs),
    /// Parse and validate a configuration, printing the canonical form
    Validate(ValidateArgs),
    /// Run the component-removal matrix (full, no weighting, no evidence
    /// factor, no aleatoric factor, no epistemic factor, no pairing) over
    /// consecutive seeds and summarize the ordering
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Configuration file in the flat `key = value` format; defaults apply
    /// when omitted
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Single-key override `key=value`; repeatable, wins over the file
    #[arg(long = "set", short = 's', value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Output directory; defaults to the config's `output_dir`
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print one line per round to stderr
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Number of consecutive seeds per variant, starting at the config seed
    #[arg(long, default_value_t = 10)]
    pub num_seeds: u64,
    /// Output directory; defaults to `<output_dir>/ablation`
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    raw.iter()
        .map(|item| {
            item.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))
        })
        .collect()
}

/// Loads the configuration from file-or-defaults plus overrides.
pub fn load_config(common: &CommonArgs) -> Result<ExperimentConfig> {
    let overrides = parse_overrides(&common.set)?;
    match &common.config {
        Some(path) => ExperimentConfig::load(path, &overrides),
        None => {
            let mut cfg = ExperimentConfig::default();
            for (k, v) in &overrides {
                cfg.set(k, v)?;
            }
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

/// Runs all configured rounds and writes the four run artifacts.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path, verbose: bool) -> Result<RunFiles> {
    let mut experiment = Experiment::new(cfg.clone())?;
    let mut reports = Vec::with_capacity(cfg.rounds as usize);
    for _ in 0..cfg.rounds {
        let report = experiment.run_round()?;
        if verbose {
            eprintln!("{}", console_line(&report));
        }
        reports.push(report);
    }
    emit_outputs(
        out_dir,
        cfg,
        &reports,
        &experiment.partition,
        &experiment.store,
    )
}

/// The component-removal matrix: label plus the mutation it applies.
pub const ABLATION_VARIANTS: &[&str] = &["full", "wo_ea", "wo_e", "wo_ale", "wo_epi", "wo_bcc"];

fn apply_variant(cfg: &ExperimentConfig, variant: &str) -> ExperimentConfig {
    let mut out = cfg.clone();
    match variant {
        "full" => {}
        "wo_ea" => out.enable_ea = false,
        "wo_e" => out.ea_use_evidence = false,
        "wo_ale" => out.ea_use_ale = false,
        "wo_epi" => out.ea_use_epi = false,
        "wo_bcc" => out.enable_bcc = false,
        other => unreachable!("unknown variant {other}"),
    }
    out
}

#[derive(Debug, Serialize)]
pub struct VariantSummary {
    pub variant: String,
    pub final_accuracies: Vec<f64>,
    pub mean_final_accuracy: f64,
}

#[derive(Debug, Serialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub variants: Vec<VariantSummary>,
    pub mean_drop_wo_ea: f64,
    pub mean_drop_wo_bcc: f64,
    /// Whether removing the pairing mechanism costs at least as much mean
    /// accuracy as removing the weighting mechanism.
    pub bcc_drop_at_least_ea_drop: bool,
}

/// Runs the full matrix; per-run artifacts land in
/// `<dir>/<variant>/seed_<s>/`, the cross-run table in `ablation.csv` and
/// `ablation.json`.
pub fn run_ablation(cfg: &ExperimentConfig, dir: &Path, num_seeds: u64) -> Result<AblationReport> {
    if num_seeds == 0 {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let seeds: Vec<u64> = (0..num_seeds).map(|i| cfg.seed + i).collect();
    let mut variants = Vec::new();
    for variant in ABLATION_VARIANTS {
        let mut finals = Vec::with_capacity(seeds.len());
        for &seed in &seeds {
            let mut run_cfg = apply_variant(cfg, variant);
            run_cfg.seed = seed;
            let out = dir.join(variant).join(format!("seed_{seed}"));
            let mut experiment = Experiment::new(run_cfg.clone())?;
            let reports = experiment.run_all()?;
            emit_outputs(
                &out,
                &run_cfg,
                &reports,
                &experiment.partition,
                &experiment.store,
            )?;
            finals.push(reports.last().expect("rounds >= 1").global_accuracy);
        }
        let mean = finals.iter().sum::<f64>() / finals.len() as f64;
        variants.push(VariantSummary {
            variant: variant.to_string(),
            final_accuracies: finals,
            mean_final_accuracy: mean,
        });
    }
    let mean_of = |name: &str| -> f64 {
        variants
            .iter()
            .find(|v| v.variant == name)
            .expect("variant present")
            .mean_final_accuracy
    };
    let full = mean_of("full");
    let report = AblationReport {
        seeds,
        mean_drop_wo_ea: full - mean_of("wo_ea"),
        mean_drop_wo_bcc: full - mean_of("wo_bcc"),
        bcc_drop_at_least_ea_drop: (full - mean_of("wo_bcc")) >= (full - mean_of("wo_ea")),
        variants,
    };

    let csv_path = dir.join("ablation.csv");
    let mut writer = csv::Writer::from_path(&csv_path).map_err(|source| Error::Csv {
        path: csv_path.clone(),
        source,
    })?;
    let wrap = |source: csv::Error| Error::Csv {
        path: csv_path.clone(),
        source,
    };
    writer
        .write_record(["variant", "seed", "final_accuracy"])
        .map_err(wrap)?;
    for v in &report.variants {
        for (seed, acc) in report.seeds.iter().zip(&v.final_accuracies) {
            writer
                .write_record([v.variant.clone(), seed.to_string(), acc.to_string()])
                .map_err(wrap)?;
        }
    }
    writer.flush().map_err(|source| Error::Io {
        path: csv_path.clone(),
        source,
    })?;

    let json_path = dir.join("ablation.json");
    let text = serde_json::to_string_pretty(&report).map_err(|source| Error::Json {
        path: json_path.clone(),
        source,
    })?;
    std::fs::write(&json_path, text + "\n").map_err(|source| Error::Io {
        path: json_path,
        source,
    })?;
    Ok(report)
}

/// Dispatches a parsed command line. Returns the process exit code.
pub fn execute(cli: Cli) -> i32 {
    let outcome = match cli.command {
        Command::Run(args) => match load_config(&args.common) {
            Ok(cfg) => {
                let out = args
                    .out
                    .clone()
                    .unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
                run_experiment(&cfg, &out, args.verbose).map(|files| {
                    println!("wrote {}", files.metrics_csv.display());
                    println!("wrote {}", files.summary_json.display());
                    println!("wrote {}", files.partition_json.display());
                    println!("wrote {}", files.csr_json.display());
                })
            }
            Err(e) => Err(e),
        },
        Command::Validate(args) => load_config(&args.common).map(|cfg| {
            print!("{}", cfg.serialize());
        }),
        Command::Ablate(args) => match load_config(&args.common) {
            Ok(cfg) => {
                let out = args
                    .out
                    .clone()
                    .unwrap_or_else(|| PathBuf::from(&cfg.output_dir).join("ablation"));
                run_ablation(&cfg, &out, args.num_seeds).map(|report| {
                    for v in &report.variants {
                        println!(
                            "{:<8} mean final acc {:.4}",
                            v.variant, v.mean_final_accuracy
                        );
                    }
                    println!(
                        "drop without weighting {:.4}, drop without pairing {:.4}",
                        report.mean_drop_wo_ea, report.mean_drop_wo_bcc
                    );
                })
            }
            Err(e) => Err(e),
        },
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_overrides() -> Vec<String> {
        [
            "clients=3",
            "clients_per_round=3",
            "samples_per_class=12",
            "eval_samples_per_class=6",
            "rounds=2",
            "batch_size=4",
            "hidden_dim=4",
            "aux_hidden_dim=3",
            "learning_rate=0.05",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect()
    }

    #[test]
    fn overrides_parse_and_apply() {
        let common = CommonArgs {
            config: None,
            set: tiny_overrides(),
        };
        let cfg = load_config(&common).unwrap();
        assert_eq!(cfg.clients, 3);
        assert_eq!(cfg.rounds, 2);
    }

    #[test]
    fn malformed_override_is_error() {
        let common = CommonArgs {
            config: None,
            set: vec!["clients".into()],
        };
        assert!(load_config(&common).is_err());
    }

    #[test]
    fn run_writes_artifacts_and_is_reproducible() {
        let common = CommonArgs {
            config: None,
            set: tiny_overrides(),
        };
        let cfg = load_config(&common).unwrap();
        let dir = std::env::temp_dir().join(format!("evsplit_cli_{}", std::process::id()));
        let a = run_experiment(&cfg, &dir.join("a"), false).unwrap();
        let b = run_experiment(&cfg, &dir.join("b"), false).unwrap();
        for (x, y) in [
            (&a.metrics_csv, &b.metrics_csv),
            (&a.summary_json, &b.summary_json),
            (&a.partition_json, &b.partition_json),
            (&a.csr_json, &b.csr_json),
        ] {
            let ta = std::fs::read(x).unwrap();
            let tb = std::fs::read(y).unwrap();
            assert_eq!(ta, tb, "{x:?} differs from {y:?}");
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn ablation_produces_six_variants_with_distinct_toggles() {
        let base = ExperimentConfig::default();
        let configs: Vec<ExperimentConfig> = ABLATION_VARIANTS
            .iter()
            .map(|v| apply_variant(&base, v))
            .collect();
        assert_eq!(configs.len(), 6);
        for (i, a) in configs.iter().enumerate() {
            for b in configs.iter().skip(i + 1) {
                assert_ne!(
                    (
                        a.enable_ea,
                        a.ea_use_evidence,
                        a.ea_use_ale,
                        a.ea_use_epi,
                        a.enable_bcc
                    ),
                    (
                        b.enable_ea,
                        b.ea_use_evidence,
                        b.ea_use_ale,
                        b.ea_use_epi,
                        b.enable_bcc
                    ),
                    "two variants share toggle metadata"
                );
            }
        }
    }
}
