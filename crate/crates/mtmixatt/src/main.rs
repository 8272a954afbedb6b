use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use mtmixatt::artifacts::{self, to_pretty_json};
use mtmixatt::checkpoint::Checkpoint;
use mtmixatt::experiment::ExperimentConfig;
use mtmixatt::{ablate, dataset};
use mtmixatt_core::config::ModelConfig;
use mtmixatt_core::data::{generate, Dataset};
use mtmixatt_core::train::{self, AblationRow};

#[derive(Parser)]
#[command(name = "mtmixatt", version, about = "Train, ablate and check MTmixAtt ranking models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Experiment {
    /// Experiment file (TOML); overrides --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in experiment: tiny, desk or selection.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Seed override (training seed; data seed for generate-data).
    #[arg(long)]
    seed: Option<u64>,
}

impl Experiment {
    fn load(&self) -> Result<ExperimentConfig> {
        match &self.config {
            Some(path) => ExperimentConfig::load(path),
            None => ExperimentConfig::preset(&self.preset),
        }
    }

    fn load_for_training(&self) -> Result<ExperimentConfig> {
        let mut cfg = self.load()?;
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write report, checkpoints and routing trace.
    Train {
        #[command(flatten)]
        exp: Experiment,
        /// Directory with train.ndjson and eval.ndjson; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Record elapsed time in the report (makes it non-reproducible).
        #[arg(long)]
        wall_clock: bool,
    },
    /// Train every variant of one or more ablation grids and write CSV tables.
    Ablate {
        #[command(flatten)]
        exp: Experiment,
        /// Comma-separated grids (grouping, mixing, dense_moe, scenario_moe, norm) or `all`.
        #[arg(long, default_value = "all")]
        grid: String,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads; defaults to the number of cores.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Finite-difference check of the full model gradient; exits 1 on failure.
    Gradcheck {
        #[command(flatten)]
        exp: Experiment,
        /// Random coordinates probed per parameter tensor.
        #[arg(long, default_value_t = 20)]
        probes: usize,
        /// Synthetic samples in the checked batch.
        #[arg(long, default_value_t = 24)]
        samples: usize,
    },
    /// Score a dataset with a checkpoint and print the metric report.
    Evaluate {
        #[command(flatten)]
        exp: Experiment,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory (its eval.ndjson) or a single .ndjson file.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the learnable parameter count and expert multiply-adds per token.
    CountParams {
        #[command(flatten)]
        exp: Experiment,
        /// Also print the built-in size ladder and the production-scale presets.
        #[arg(long)]
        ladder: bool,
    },
    /// Write train.ndjson and eval.ndjson for the configured synthetic data.
    GenerateData {
        #[command(flatten)]
        exp: Experiment,
        #[arg(long)]
        out: PathBuf,
    },
}

fn datasets(cfg: &ExperimentConfig, data: Option<&Path>) -> Result<(Dataset, Dataset)> {
    let (tr, ev) = match data {
        Some(dir) => dataset::load_split(dir)?,
        None => cfg.datasets()?,
    };
    tr.check_spec(&cfg.model.features)?;
    ev.check_spec(&cfg.model.features)?;
    Ok((tr, ev))
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

fn print_row(row: &AblationRow) {
    println!(
        "{:<12} ctr_auc {} ctr_gauc {} ctcvr_auc {} ctcvr_gauc {} params {}",
        row.variant,
        fmt_metric(row.ctr_auc),
        fmt_metric(row.ctr_gauc),
        fmt_metric(row.ctcvr_auc),
        fmt_metric(row.ctcvr_gauc),
        row.params
    );
}

fn count_line(name: &str, cfg: &ModelConfig) {
    println!("{name:<12} params {:>12} expert_macs_per_token {:>10}", cfg.count_params(), cfg.expert_macs_per_token());
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { exp, data, out, wall_clock } => {
            let cfg = exp.load_for_training()?;
            let (tr, ev) = datasets(&cfg, data.as_deref())?;
            let start = Instant::now();
            let mut outcome = train::train(&cfg.model, &cfg.train, &tr, &ev)?;
            if wall_clock {
                outcome.report.wall_clock_secs = Some(start.elapsed().as_secs_f64());
            }
            artifacts::write_run(&out, &outcome, &ev)?;
            let report = &outcome.report;
            print_row(&AblationRow::from_report("final", report));
            println!("best step {} ({} written to {})", report.best_step, artifacts::BEST_FILE, out.display());
        }
        Command::Ablate { exp, grid, data, out, workers } => {
            let cfg = exp.load_for_training()?;
            let kinds = ablate::parse_grids(&grid)?;
            let grids: Vec<_> = kinds.iter().map(|k| (*k, k.variants(&cfg.model))).collect();
            for (_, g) in &grids {
                train::validate_grid(g, &cfg.train)?;
            }
            let (tr, ev) = datasets(&cfg, data.as_deref())?;
            fs::create_dir_all(&out)?;
            for (kind, g) in grids {
                let name = ablate::grid_name(kind);
                let results = ablate::run(&g, &cfg.train, &tr, &ev, workers.unwrap_or_else(ablate::default_workers))?;
                let rows: Vec<AblationRow> = results.iter().map(|r| r.0.clone()).collect();
                let path = out.join(format!("{name}.csv"));
                artifacts::write_ablation_csv(&rows, fs::File::create(&path)?)?;
                let reports: Vec<_> = results.into_iter().map(|r| r.1).collect();
                fs::write(out.join(format!("{name}.reports.json")), to_pretty_json(&reports)?)?;
                println!("[{name}] -> {}", path.display());
                rows.iter().for_each(print_row);
            }
        }
        Command::Gradcheck { exp, probes, samples } => {
            let cfg = exp.load_for_training()?;
            let data = generate(&cfg.data.synthetic, samples.max(1))?;
            let outcome = train::gradcheck(&cfg.model, &data.samples, probes, cfg.train.seed, None)?;
            let r = &outcome.report;
            for t in &r.tensors {
                println!(
                    "{:<32} probes {:>4} skipped {:>3} max_rel {:.2e} max_abs {:.2e} {}",
                    t.name,
                    t.probes,
                    t.skipped,
                    t.max_rel_error,
                    t.max_abs_error,
                    if t.failures == 0 { "ok" } else { "FAIL" }
                );
            }
            if let Some(w) = &outcome.warning {
                eprintln!("warning: {w}");
            }
            println!("gradcheck {} ({} probes)", if outcome.passed() { "passed" } else { "FAILED" }, r.total_probes());
            if !outcome.passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Evaluate { exp, checkpoint, data, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let model = ck.to_model()?;
            let ev = match data {
                Some(p) if p.is_dir() => dataset::load(&p.join(dataset::EVAL_FILE))?,
                Some(p) => dataset::load(&p)?,
                None => {
                    let cfg = exp.load()?;
                    cfg.datasets().context("generating evaluation data from the config")?.1
                }
            };
            ev.check_spec(&model.cfg.features)?;
            let report = model.evaluate(&ev.samples, artifacts::ROUTING_SAMPLES)?;
            let json = to_pretty_json(&report)?;
            match out {
                Some(path) => fs::write(path, json)?,
                None => print!("{json}"),
            }
        }
        Command::CountParams { exp, ladder } => {
            let cfg = exp.load()?;
            count_line("config", &cfg.model);
            if ladder {
                for (name, c) in ModelConfig::size_ladder() {
                    count_line(&name, &c);
                }
                count_line("prod-15M", &ModelConfig::production_15m());
                count_line("prod-1B", &ModelConfig::production_1b());
            }
        }
        Command::GenerateData { exp, out } => {
            let mut cfg = exp.load()?;
            if let Some(seed) = exp.seed {
                cfg.data.synthetic.seed = seed;
            }
            let (tr, ev) = cfg.datasets()?;
            dataset::save_split(&out, &tr, &ev)?;
            println!("{} train / {} eval samples -> {}", tr.len(), ev.len(), out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
