use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use dafss_core::checkpoint;
use dafss_core::config::ExperimentConfig;
use dafss_core::eval::evaluate;
use dafss_core::experiment::{ensure_writable, run_cell, run_experiment, write_reports, CellOutcome, SeedData};
use dafss_core::gradcheck::{run_suite, TOLERANCE};
use dafss_core::model::Model;
use dafss_core::scene::{generate_pool, write_scene};
use dafss_core::CoreError;

#[derive(Parser)]
#[command(name = "dafss", version, about = "Decoupled-experts few-shot point-cloud segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the training and evaluation scene pools of every seed.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the configured `mode` once per seed and save checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train and evaluate every (mode, seed) cell and write the reports.
    Experiment {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint of the configured `mode` on the first seed's
    /// evaluation episodes.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Compare every analytic gradient against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen { config, out } => gen(&config, &out),
        Command::Train { config } => train(&config),
        Command::Experiment { config } => experiment(&config),
        Command::Eval { model, config } => eval(&model, &config),
        Command::Gradcheck { seed } => gradcheck(seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn gen(config: &Path, out: &Path) -> Result<(), CoreError> {
    let cfg = ExperimentConfig::load(config)?;
    ensure_writable(out)?;
    let mut written = 0;
    for &seed in &cfg.seeds {
        for (split, count, pool_seed) in [
            ("train", cfg.train_pool, seed.wrapping_mul(2)),
            ("test", cfg.test_pool, seed.wrapping_mul(2) + 1),
        ] {
            let dir = out.join(format!("seed{seed}")).join(split);
            fs::create_dir_all(&dir).map_err(|e| CoreError::Io { path: dir.clone(), source: e })?;
            for (i, scene) in generate_pool(&cfg.scene, count, pool_seed)?.iter().enumerate() {
                write_scene(scene, &dir.join(format!("scene{i:04}.txt")))?;
                written += 1;
            }
        }
    }
    println!("wrote {written} scenes to {}", out.display());
    Ok(())
}

fn report_cell(cell: &CellOutcome, started: Instant) {
    println!(
        "{:<14} seed {:<3} miou {:.4} macc {:.4}  ({:.1}s)",
        cell.mode.as_str(),
        cell.seed,
        cell.report.miou,
        cell.report.macc,
        started.elapsed().as_secs_f64()
    );
}

fn train(config: &Path) -> Result<(), CoreError> {
    let mut cfg = ExperimentConfig::load(config)?;
    cfg.modes = vec![cfg.mode];
    ensure_writable(&cfg.output_dir)?;
    let started = Instant::now();
    let mut cells = Vec::new();
    for &seed in &cfg.seeds {
        let named = |e: CoreError| CoreError::Cell {
            mode: cfg.mode.to_string(),
            seed,
            source: Box::new(e),
        };
        let data = SeedData::generate(&cfg, seed).map_err(named)?;
        let cell = run_cell(&cfg, cfg.mode, seed, &data).map_err(named)?;
        let path = cfg.output_dir.join(format!("{}-seed{seed}.ckpt", cfg.mode));
        checkpoint::save(&cell.model, &path)?;
        report_cell(&cell, started);
        println!("  checkpoint {}", path.display());
        cells.push(cell);
    }
    write_reports(&cfg, &cells, &cfg.output_dir)
}

fn experiment(config: &Path) -> Result<(), CoreError> {
    let cfg = ExperimentConfig::load(config)?;
    let started = Instant::now();
    let cells = run_experiment(&cfg, |cell| report_cell(cell, started))?;
    println!("{} cells, reports in {}", cells.len(), cfg.output_dir.display());
    Ok(())
}

fn eval(model_path: &Path, config: &Path) -> Result<(), CoreError> {
    let cfg = ExperimentConfig::load(config)?;
    let seed = cfg.seeds[0];
    let mut model = Model::build(&cfg.model, cfg.mode, seed)?;
    checkpoint::load(&mut model, model_path)?;
    let data = SeedData::generate(&cfg, seed)?;
    let report = evaluate(&model, &data.eval, &cfg.hash(), seed)?;
    let json = serde_json::to_string_pretty(&report).expect("metrics serialize");
    println!("{json}");
    Ok(())
}

fn gradcheck(seed: u64) -> Result<(), CoreError> {
    let started = Instant::now();
    let results = run_suite(seed)?;
    let mut failed = Vec::new();
    for r in &results {
        let ok = r.passed();
        println!(
            "{} {:<28} max rel err {:.2e} over {} entries",
            if ok { "ok  " } else { "FAIL" },
            r.name,
            r.report.max_rel_error,
            r.report.checked
        );
        if !ok {
            failed.push(r.name.clone());
        }
    }
    println!(
        "{} of {} checks within {TOLERANCE:e} in {:.1}s",
        results.len() - failed.len(),
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CoreError::Config(format!("gradient checks failed: {}", failed.join(", "))))
    }
}
