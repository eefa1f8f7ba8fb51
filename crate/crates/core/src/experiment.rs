//! Train-and-evaluate grid over (mode, seed) cells and report writing.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::episode::{Episode, EpisodeSampler};
use crate::error::{CoreError, Result};
use crate::eval::{episode_seed, eval_episodes, evaluate};
use crate::metrics::MetricsReport;
use crate::model::{Model, Variant};
use crate::scene::{base_classes, generate_pool, novel_classes, Scene};
use crate::trainer::{TrainRecord, Trainer};

/// Scene pools and episodes of one seed, shared by every mode so variants
/// are compared on identical data.
pub struct SeedData {
    pub train_pool: Vec<Scene>,
    pub test_pool: Vec<Scene>,
    pub train: Vec<Episode>,
    pub eval: Vec<Episode>,
}

const TRAIN_STREAM: usize = 1 << 20;

impl SeedData {
    pub fn generate(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let base = base_classes(cfg.fold)?;
        let novel = novel_classes(cfg.fold)?;
        let train_pool = generate_pool(&cfg.scene, cfg.train_pool, seed.wrapping_mul(2))?;
        let test_pool = generate_pool(&cfg.scene, cfg.test_pool, seed.wrapping_mul(2) + 1)?;
        let sampler = EpisodeSampler::new(cfg.n_way, cfg.k_shot, base.clone(), base.clone())?;
        let train = (0..cfg.train_episodes)
            .map(|i| sampler.sample(&train_pool, episode_seed(seed, TRAIN_STREAM, i)))
            .collect::<Result<Vec<_>>>()?;
        let eval = eval_episodes(
            &test_pool,
            &novel,
            &base,
            cfg.n_way,
            cfg.k_shot,
            cfg.eval_episodes,
            seed,
        )?;
        Ok(Self {
            train_pool,
            test_pool,
            train,
            eval,
        })
    }
}

pub struct CellOutcome {
    pub mode: Variant,
    pub seed: u64,
    pub report: MetricsReport,
    pub records: Vec<TrainRecord>,
    pub model: Model,
}

/// Builds, trains and evaluates one variant on prepared data.
pub fn run_cell(cfg: &ExperimentConfig, mode: Variant, seed: u64, data: &SeedData) -> Result<CellOutcome> {
    let model = Model::build(&cfg.model, mode, seed)?;
    let mut trainer = Trainer::new(model, cfg.adamw(), cfg.weights)?;
    let records = data
        .train
        .iter()
        .map(|ep| trainer.train_episode(ep))
        .collect::<Result<Vec<_>>>()?;
    let replay = cfg.bn_calibration.min(data.train.len());
    trainer.recalibrate(&data.train[data.train.len() - replay..])?;
    let model = trainer.model;
    let report = evaluate(&model, &data.eval, &cfg.hash(), seed)?;
    Ok(CellOutcome {
        mode,
        seed,
        report,
        records,
        model,
    })
}

#[derive(Serialize)]
struct CellJson<'a> {
    mode: &'a str,
    seed: u64,
    #[serde(flatten)]
    report: &'a MetricsReport,
}

#[derive(Serialize)]
struct MetricsJson<'a> {
    config_hash: String,
    param_counts: BTreeMap<&'a str, usize>,
    cells: Vec<CellJson<'a>>,
}

#[derive(Serialize)]
struct LogRow<'a> {
    mode: &'a str,
    seed: u64,
    step: usize,
    loss_total: f64,
    loss_seg: f64,
    loss_base: f64,
    loss_plr: f64,
    loss_dcr: f64,
    grad_norm_uf: f64,
    grad_norm_sem: f64,
    miou_train: f64,
}

#[derive(Serialize)]
struct GradRow<'a> {
    step: usize,
    grad_norm_uf: f64,
    grad_norm_sem: f64,
    mode: &'a str,
    seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub mode: String,
    pub cells: usize,
    pub miou_mean: f64,
    pub miou_std: f64,
    pub macc_mean: f64,
    pub macc_std: f64,
    pub trainable_params: usize,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(cells: &[CellOutcome], modes: &[Variant]) -> Vec<SummaryRow> {
    modes
        .iter()
        .filter_map(|&mode| {
            let of_mode: Vec<&CellOutcome> = cells.iter().filter(|c| c.mode == mode).collect();
            let first = of_mode.first()?;
            let miou: Vec<f64> = of_mode.iter().map(|c| c.report.miou).collect();
            let macc: Vec<f64> = of_mode.iter().map(|c| c.report.macc).collect();
            let (miou_mean, miou_std) = mean_std(&miou);
            let (macc_mean, macc_std) = mean_std(&macc);
            Some(SummaryRow {
                mode: mode.to_string(),
                cells: of_mode.len(),
                miou_mean,
                miou_std,
                macc_mean,
                macc_std,
                trainable_params: first.model.trainable_count(),
            })
        })
        .collect()
}

/// Fails unless `dir` exists (or can be created) and accepts a file.
pub fn ensure_writable(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let probe = dir.join(".write-probe");
    fs::write(&probe, b"").map_err(|e| CoreError::io(&probe, e))?;
    fs::remove_file(&probe).map_err(|e| CoreError::io(&probe, e))
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let to_err = |e: csv::Error| CoreError::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    for row in rows {
        w.serialize(row).map_err(to_err)?;
    }
    w.flush().map_err(|e| CoreError::io(path, e))
}

pub fn write_reports(cfg: &ExperimentConfig, cells: &[CellOutcome], dir: &Path) -> Result<()> {
    let mut param_counts = BTreeMap::new();
    for c in cells {
        param_counts.insert(c.mode.as_str(), c.model.trainable_count());
    }
    let metrics = MetricsJson {
        config_hash: cfg.hash(),
        param_counts,
        cells: cells
            .iter()
            .map(|c| CellJson {
                mode: c.mode.as_str(),
                seed: c.seed,
                report: &c.report,
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&metrics)
        .map_err(|e| CoreError::io(dir.join("metrics.json"), std::io::Error::other(e)))?;
    let path = dir.join("metrics.json");
    fs::write(&path, json + "\n").map_err(|e| CoreError::io(&path, e))?;

    write_csv(
        &dir.join("train_log.csv"),
        cells.iter().flat_map(|c| {
            c.records.iter().map(move |r| LogRow {
                mode: c.mode.as_str(),
                seed: c.seed,
                step: r.step,
                loss_total: r.loss_total,
                loss_seg: r.loss_seg,
                loss_base: r.loss_base,
                loss_plr: r.loss_plr,
                loss_dcr: r.loss_dcr,
                grad_norm_uf: r.grad_norm_uf,
                grad_norm_sem: r.grad_norm_sem,
                miou_train: r.miou_train,
            })
        }),
    )?;
    write_csv(
        &dir.join("gradnorm.csv"),
        cells.iter().flat_map(|c| {
            c.records.iter().map(move |r| GradRow {
                step: r.step,
                grad_norm_uf: r.grad_norm_uf,
                grad_norm_sem: r.grad_norm_sem,
                mode: c.mode.as_str(),
                seed: c.seed,
            })
        }),
    )?;
    write_csv(&dir.join("summary.csv"), summarize(cells, &cfg.modes))
}

/// Runs every (mode, seed) cell, then writes `metrics.json`,
/// `train_log.csv`, `gradnorm.csv` and `summary.csv` to the output
/// directory. `progress` sees each finished cell.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    mut progress: impl FnMut(&CellOutcome),
) -> Result<Vec<CellOutcome>> {
    ensure_writable(&cfg.output_dir)?;
    let mut cells = Vec::with_capacity(cfg.seeds.len() * cfg.modes.len());
    for &seed in &cfg.seeds {
        let data = SeedData::generate(cfg, seed).map_err(|e| CoreError::Cell {
            mode: "data".into(),
            seed,
            source: Box::new(e),
        })?;
        for &mode in &cfg.modes {
            let cell = run_cell(cfg, mode, seed, &data).map_err(|e| CoreError::Cell {
                mode: mode.to_string(),
                seed,
                source: Box::new(e),
            })?;
            progress(&cell);
            cells.push(cell);
        }
    }
    let rank = |m: Variant| cfg.modes.iter().position(|&x| x == m).unwrap_or(usize::MAX);
    cells.sort_by_key(|c| (rank(c.mode), cfg.seeds.iter().position(|&s| s == c.seed)));
    write_reports(cfg, &cells, &cfg.output_dir)?;
    Ok(cells)
}
