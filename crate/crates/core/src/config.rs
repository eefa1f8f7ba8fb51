//! Flat `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored, unknown keys are rejected and
//! every key has a default (see [`KEYS`]).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dafss_tensor::AdamWConfig;
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::model::{ModelConfig, Variant};
use crate::scene::{base_classes, SceneConfig};
use crate::trainer::LossWeights;

/// Every accepted key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("n_way", "1", "classes per episode"),
    ("k_shot", "1", "support scenes per class"),
    ("train_episodes", "300", "training episodes per cell"),
    ("eval_episodes", "100", "evaluation episodes per novel class"),
    ("seeds", "0,1,2,3,4", "comma-separated seeds, one cell per seed and mode"),
    ("mode", "decoupled+dam", "variant used by `train`"),
    ("modes", "fused,decoupled,decoupled+dam", "variants compared by `experiment`"),
    ("fold", "0", "class split: 0 or 1"),
    ("lambda_base", "0.1", "weight of the auxiliary base-class loss"),
    ("lambda_plr", "0.001", "weight of the prototype alignment loss"),
    ("lambda_dcr", "0.5", "weight of the consistency loss"),
    ("learning_rate", "0.0001", "AdamW step size"),
    ("weight_decay", "0.01", "AdamW decoupled weight decay"),
    ("d_uf", "32", "geometric feature width"),
    ("uf_hidden", "32", "hidden width of the geometric head"),
    ("d_if", "64", "semantic feature and text embedding width"),
    ("d_geo", "192", "geometric (and fused) expert width"),
    ("d_sem", "512", "semantic expert width"),
    ("d_arb", "192", "arbitration width"),
    ("heads", "4", "attention heads"),
    ("sam_layers", "1", "arbitration layers (1 or 2)"),
    ("knn_k", "8", "decoder neighbours"),
    ("knn_radius", "0.3", "decoder neighbourhood radius in meters"),
    ("if_norm_ratio", "4", "semantic feature norm over mean geometric norm"),
    ("if_confusion", "0.2", "mass the semantic head moves to each class's partner"),
    ("if_position_weight", "0.3", "weight of the semantic head's height term"),
    ("bn_momentum", "0.1", "running-statistics momentum"),
    ("bn_calibration", "100", "final training episodes replayed to re-estimate batch-norm statistics (0 keeps the moving averages)"),
    ("max_points", "2048", "point budget per scene"),
    ("points_min", "200", "minimum points per object"),
    ("points_max", "400", "maximum points per object"),
    ("planes_min", "1", "minimum planes per scene"),
    ("planes_max", "2", "maximum planes per scene"),
    ("boxes_min", "1", "minimum boxes per scene"),
    ("boxes_max", "2", "maximum boxes per scene"),
    ("cylinders_min", "0", "minimum cylinders per scene"),
    ("cylinders_max", "1", "maximum cylinders per scene"),
    ("noise_sigma", "0.01", "surface jitter in meters"),
    ("texture_confusion", "0.25", "chance a class borrows another shape's texture"),
    ("train_pool", "60", "scenes in the training pool"),
    ("test_pool", "40", "scenes in the evaluation pool"),
    ("output_dir", "runs", "where reports and checkpoints go"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub train_episodes: usize,
    pub eval_episodes: usize,
    pub seeds: Vec<u64>,
    pub mode: Variant,
    pub modes: Vec<Variant>,
    pub fold: usize,
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub model: ModelConfig,
    pub scene: SceneConfig,
    pub train_pool: usize,
    pub test_pool: usize,
    pub bn_calibration: usize,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::parse("").expect("defaults parse")
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| CoreError::Config(format!("line {line}: {key} = `{value}`: {e}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s, line))
        .collect()
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(String, String, usize)> = KEYS
            .iter()
            .map(|(k, v, _)| (k.to_string(), v.to_string(), 0))
            .collect();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| CoreError::Config(format!("line {line}: expected `key = value`")))?;
            let (key, value) = (key.trim(), value.trim());
            let slot = entries
                .iter_mut()
                .find(|(k, _, _)| k == key)
                .ok_or_else(|| CoreError::Config(format!("line {line}: unknown key `{key}`")))?;
            if !seen.insert(key.to_string()) {
                return Err(CoreError::Config(format!("line {line}: duplicate key `{key}`")));
            }
            slot.1 = value.to_string();
            slot.2 = line;
        }

        let mut cfg = Self::skeleton();
        for (key, value, line) in &entries {
            cfg.set(key, value, *line)?;
        }
        cfg.model.n_way = cfg.n_way;
        cfg.model.base_classes = base_classes(cfg.fold)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn skeleton() -> Self {
        Self {
            n_way: 0,
            k_shot: 0,
            train_episodes: 0,
            eval_episodes: 0,
            seeds: Vec::new(),
            mode: Variant::DecoupledDam,
            modes: Vec::new(),
            fold: 0,
            weights: LossWeights::default(),
            learning_rate: 0.0,
            weight_decay: 0.0,
            model: ModelConfig::default(),
            scene: SceneConfig::default(),
            train_pool: 0,
            test_pool: 0,
            bn_calibration: 0,
            output_dir: PathBuf::new(),
        }
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let m = &mut self.model;
        let s = &mut self.scene;
        macro_rules! v {
            () => {
                parse_value(key, value, line)?
            };
        }
        match key {
            "n_way" => self.n_way = v!(),
            "k_shot" => self.k_shot = v!(),
            "train_episodes" => self.train_episodes = v!(),
            "eval_episodes" => self.eval_episodes = v!(),
            "seeds" => self.seeds = parse_list(key, value, line)?,
            "mode" => self.mode = v!(),
            "modes" => self.modes = parse_list(key, value, line)?,
            "fold" => self.fold = v!(),
            "lambda_base" => self.weights.lambda_base = v!(),
            "lambda_plr" => self.weights.lambda_plr = v!(),
            "lambda_dcr" => self.weights.lambda_dcr = v!(),
            "learning_rate" => self.learning_rate = v!(),
            "weight_decay" => self.weight_decay = v!(),
            "d_uf" => m.d_uf = v!(),
            "uf_hidden" => m.uf_hidden = v!(),
            "d_if" => m.d_if = v!(),
            "d_geo" => m.d_geo = v!(),
            "d_sem" => m.d_sem = v!(),
            "d_arb" => m.d_arb = v!(),
            "heads" => m.heads = v!(),
            "sam_layers" => m.sam_layers = v!(),
            "knn_k" => m.knn_k = v!(),
            "knn_radius" => m.knn_radius = v!(),
            "if_norm_ratio" => m.if_norm_ratio = v!(),
            "if_confusion" => m.if_confusion = v!(),
            "if_position_weight" => m.if_position_weight = v!(),
            "bn_momentum" => m.bn_momentum = v!(),
            "bn_calibration" => self.bn_calibration = v!(),
            "max_points" => s.max_points = v!(),
            "points_min" => s.points_per_object.0 = v!(),
            "points_max" => s.points_per_object.1 = v!(),
            "planes_min" => s.planes.0 = v!(),
            "planes_max" => s.planes.1 = v!(),
            "boxes_min" => s.boxes.0 = v!(),
            "boxes_max" => s.boxes.1 = v!(),
            "cylinders_min" => s.cylinders.0 = v!(),
            "cylinders_max" => s.cylinders.1 = v!(),
            "noise_sigma" => s.noise_sigma = v!(),
            "texture_confusion" => s.texture_confusion = v!(),
            "train_pool" => self.train_pool = v!(),
            "test_pool" => self.test_pool = v!(),
            "output_dir" => self.output_dir = PathBuf::from(value),
            _ => return Err(CoreError::Config(format!("line {line}: unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_way", self.n_way),
            ("k_shot", self.k_shot),
            ("eval_episodes", self.eval_episodes),
            ("train_pool", self.train_pool),
            ("test_pool", self.test_pool),
            ("d_uf", self.model.d_uf),
            ("uf_hidden", self.model.uf_hidden),
            ("d_if", self.model.d_if),
            ("d_geo", self.model.d_geo),
            ("d_sem", self.model.d_sem),
            ("d_arb", self.model.d_arb),
            ("heads", self.model.heads),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(CoreError::Config(format!("{key} must be positive")));
            }
        }
        if self.seeds.is_empty() || self.modes.is_empty() {
            return Err(CoreError::Config("seeds and modes must not be empty".into()));
        }
        for (key, v) in [
            ("learning_rate", self.learning_rate),
            ("weight_decay", self.weight_decay),
            ("knn_radius", self.model.knn_radius),
            ("if_norm_ratio", self.model.if_norm_ratio),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(CoreError::Config(format!("{key} must be finite and >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.model.bn_momentum) {
            return Err(CoreError::Config("bn_momentum must be in [0, 1]".into()));
        }
        self.weights.validate()?;
        self.scene.validate()
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig::default()
            .learning_rate(self.learning_rate)
            .weight_decay(self.weight_decay)
    }

    /// Every setting except `output_dir`, one `key = value` per line in
    /// [`KEYS`] order.
    pub fn canonical(&self) -> String {
        let join = |v: Vec<String>| v.join(",");
        let m = &self.model;
        let s = &self.scene;
        let values: Vec<(&str, String)> = vec![
            ("n_way", self.n_way.to_string()),
            ("k_shot", self.k_shot.to_string()),
            ("train_episodes", self.train_episodes.to_string()),
            ("eval_episodes", self.eval_episodes.to_string()),
            ("seeds", join(self.seeds.iter().map(u64::to_string).collect())),
            ("mode", self.mode.to_string()),
            ("modes", join(self.modes.iter().map(Variant::to_string).collect())),
            ("fold", self.fold.to_string()),
            ("lambda_base", self.weights.lambda_base.to_string()),
            ("lambda_plr", self.weights.lambda_plr.to_string()),
            ("lambda_dcr", self.weights.lambda_dcr.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("d_uf", m.d_uf.to_string()),
            ("uf_hidden", m.uf_hidden.to_string()),
            ("d_if", m.d_if.to_string()),
            ("d_geo", m.d_geo.to_string()),
            ("d_sem", m.d_sem.to_string()),
            ("d_arb", m.d_arb.to_string()),
            ("heads", m.heads.to_string()),
            ("sam_layers", m.sam_layers.to_string()),
            ("knn_k", m.knn_k.to_string()),
            ("knn_radius", m.knn_radius.to_string()),
            ("if_norm_ratio", m.if_norm_ratio.to_string()),
            ("if_confusion", m.if_confusion.to_string()),
            ("if_position_weight", m.if_position_weight.to_string()),
            ("bn_momentum", m.bn_momentum.to_string()),
            ("bn_calibration", self.bn_calibration.to_string()),
            ("max_points", s.max_points.to_string()),
            ("points_min", s.points_per_object.0.to_string()),
            ("points_max", s.points_per_object.1.to_string()),
            ("planes_min", s.planes.0.to_string()),
            ("planes_max", s.planes.1.to_string()),
            ("boxes_min", s.boxes.0.to_string()),
            ("boxes_max", s.boxes.1.to_string()),
            ("cylinders_min", s.cylinders.0.to_string()),
            ("cylinders_max", s.cylinders.1.to_string()),
            ("noise_sigma", s.noise_sigma.to_string()),
            ("texture_confusion", s.texture_confusion.to_string()),
            ("train_pool", self.train_pool.to_string()),
            ("test_pool", self.test_pool.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Hex SHA-256 of [`ExperimentConfig::canonical`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_form_covers_every_key_but_output_dir() {
        let canon = ExperimentConfig::default().canonical();
        let keys: Vec<&str> = canon.lines().map(|l| l.split(" = ").next().unwrap()).collect();
        let expected: Vec<&str> = KEYS
            .iter()
            .map(|k| k.0)
            .filter(|k| *k != "output_dir")
            .collect();
        assert_eq!(keys, expected);
    }

    #[test]
    fn canonical_text_parses_back_to_the_same_config() {
        let cfg = ExperimentConfig::parse("d_geo = 24\nseeds = 3, 9\nmodes = fused\n").unwrap();
        let again = ExperimentConfig::parse(&cfg.canonical()).unwrap();
        assert_eq!(cfg.hash(), again.hash());
        assert_eq!(again.seeds, vec![3, 9]);
    }
}
