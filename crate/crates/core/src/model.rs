//! Full pipeline: feature heads, correlations, experts, alignment losses,
//! arbitration and decoding, in three ablation variants.

use std::fmt;
use std::str::FromStr;

use dafss_tensor::{BatchStats, BnMode, Graph, ParamId, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dam::{dcr_loss, plr_loss};
use crate::episode::Episode;
use crate::error::{CoreError, Result};
use crate::experts::Expert;
use crate::features::{
    compute_correlations, extract_prototypes, partner_confusion, text_guidance, IfHead, TextStub,
    UfHead,
};
use crate::layers::Linear;
use crate::sam::{Decoder, Sam};
use crate::scene::{generate_scene, Scene, SceneConfig, CLASS_COUNT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// One expert over the summed correlations, no alignment losses.
    Fused,
    /// Two experts on separate correlations, no alignment losses.
    Decoupled,
    /// Two experts plus prototype and consistency alignment.
    DecoupledDam,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Fused, Variant::Decoupled, Variant::DecoupledDam];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Fused => "fused",
            Variant::Decoupled => "decoupled",
            Variant::DecoupledDam => "decoupled+dam",
        }
    }

    pub fn is_decoupled(self) -> bool {
        self != Variant::Fused
    }

    pub fn uses_dam(self) -> bool {
        self == Variant::DecoupledDam
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                CoreError::Config(format!(
                    "unknown mode `{s}` (expected fused, decoupled or decoupled+dam)"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_way: usize,
    pub d_uf: usize,
    pub uf_hidden: usize,
    pub d_if: usize,
    pub d_geo: usize,
    pub d_sem: usize,
    pub d_arb: usize,
    pub heads: usize,
    pub sam_layers: usize,
    pub knn_k: usize,
    pub knn_radius: f64,
    pub if_norm_ratio: f64,
    pub if_confusion: f64,
    pub if_position_weight: f64,
    pub bn_momentum: f64,
    pub base_classes: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_way: 1,
            d_uf: 32,
            uf_hidden: 32,
            d_if: 64,
            d_geo: 192,
            d_sem: 512,
            d_arb: 192,
            heads: 4,
            sam_layers: 1,
            knn_k: 8,
            knn_radius: 0.3,
            if_norm_ratio: 4.0,
            if_confusion: 0.2,
            if_position_weight: 0.3,
            bn_momentum: 0.1,
            base_classes: vec![0, 1, 2, 4, 6, 8],
        }
    }
}

impl ModelConfig {
    /// Small widths for fast tests and gradient checks.
    pub fn tiny() -> Self {
        Self {
            d_uf: 8,
            uf_hidden: 8,
            d_if: 8,
            d_geo: 16,
            d_sem: 32,
            d_arb: 16,
            heads: 2,
            knn_k: 4,
            ..Self::default()
        }
    }
}

/// Disjoint parameter groups covering every trainable parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pathway {
    /// Geometric head and the geometric (or single fused) expert.
    Uf,
    /// Semantic expert.
    Sem,
    /// Projection, arbitration, decoder and auxiliary head.
    Shared,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub variant: Variant,
    pub config: ModelConfig,
    pub store: ParamStore,
    pub uf: UfHead,
    pub if_head: IfHead,
    pub text: TextStub,
    /// The geometric expert, or the single expert of the fused variant.
    pub geo: Expert,
    pub sem: Option<Expert>,
    pub proj: Option<Linear>,
    pub sam: Sam,
    pub decoder: Decoder,
    pub aux: Linear,
}

/// Everything one forward pass produces.
#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Var,
    pub aux_logits: Option<Var>,
    pub plr: Option<Var>,
    pub dcr: Option<Var>,
    pub bn_batch: Option<BatchStats>,
    pub c_u: Var,
    pub c_i: Var,
    pub r_geo: Var,
    pub r_sem: Option<Var>,
    pub p_u: Var,
    pub p_i: Var,
    pub merged: Var,
}

impl Model {
    pub fn build(config: &ModelConfig, variant: Variant, seed: u64) -> Result<Self> {
        if config.n_way == 0 {
            return Err(CoreError::Config("n_way must be positive".into()));
        }
        if config.base_classes.is_empty() || config.base_classes.iter().any(|&c| c >= CLASS_COUNT) {
            return Err(CoreError::Config(format!(
                "base classes must be a non-empty subset of 0..{CLASS_COUNT}"
            )));
        }
        if !(0.0..=1.0).contains(&config.if_confusion) {
            return Err(CoreError::Config(format!(
                "if_confusion must be in [0, 1], got {}",
                config.if_confusion
            )));
        }
        let n_s = config.n_way + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();

        // Frozen tables first so their values do not depend on the variant.
        let if_head = IfHead::new(
            &mut store,
            &mut rng,
            config.d_if,
            partner_confusion(config.if_confusion),
            config.if_position_weight,
        )?;
        let text = TextStub::new(&mut store, &mut rng, CLASS_COUNT, config.d_if)?;
        let uf = UfHead::new(&mut store, &mut rng, config.uf_hidden, config.d_uf)?;

        let (geo, sem, proj) = if variant.is_decoupled() {
            let geo = Expert::new(&mut store, &mut rng, "expert.geo", n_s, config.d_geo, config.heads)?;
            let sem = Expert::new(&mut store, &mut rng, "expert.sem", n_s, config.d_sem, config.heads)?;
            let proj = if variant.uses_dam() {
                Some(Linear::new(&mut store, &mut rng, "dam.proj", config.d_uf, config.d_if, true)?)
            } else {
                None
            };
            (geo, Some(sem), proj)
        } else {
            let single =
                Expert::new(&mut store, &mut rng, "expert.fused", n_s, config.d_geo, config.heads)?;
            (single, None, None)
        };
        let d_in = config.d_geo + if variant.is_decoupled() { config.d_sem } else { 0 };
        let sam = Sam::new(
            &mut store,
            &mut rng,
            d_in,
            config.d_arb,
            config.d_if,
            config.sam_layers,
            config.heads,
            config.bn_momentum,
        )?;
        let decoder = Decoder::new(
            &mut store,
            &mut rng,
            config.d_arb,
            n_s,
            config.knn_k,
            config.knn_radius,
        )?;
        let aux = Linear::new(
            &mut store,
            &mut rng,
            "aux.base",
            config.d_arb,
            config.base_classes.len(),
            true,
        )?;

        let mut model = Self {
            variant,
            config: config.clone(),
            store,
            uf,
            if_head,
            text,
            geo,
            sem,
            proj,
            sam,
            decoder,
            aux,
        };
        let reference = generate_scene(&SceneConfig::small(), seed ^ 0x5eed)?;
        let uf_norm = model.mean_uf_norm(&reference)?;
        let scale = config.if_norm_ratio * uf_norm;
        model.if_head.set_norm_scale(&mut model.store, scale);
        Ok(model)
    }

    /// Mean row norm of the geometric features of `scene`.
    pub fn mean_uf_norm(&self, scene: &Scene) -> Result<f64> {
        let mut g = Graph::new();
        let f = self.uf.encode(&mut g, &self.store, scene)?;
        let t = g.value(f);
        let (rows, _) = t.dims2("uf")?;
        let total: f64 = (0..rows)
            .map(|r| t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .sum();
        Ok(total / rows as f64)
    }

    pub fn n_s(&self) -> usize {
        self.config.n_way + 1
    }

    pub fn group(&self, pathway: Pathway) -> Vec<ParamId> {
        let ids = match pathway {
            Pathway::Uf => {
                let mut p = self.uf.params();
                p.extend(self.geo.params());
                p
            }
            Pathway::Sem => self.sem.as_ref().map(Expert::params).unwrap_or_default(),
            Pathway::Shared => {
                let mut p: Vec<ParamId> = self.proj.iter().flat_map(Linear::params).collect();
                p.extend(self.sam.params());
                p.extend(self.decoder.params());
                p.extend(self.aux.params());
                p
            }
        };
        ids.into_iter()
            .filter(|&id| self.store.get(id).trainable)
            .collect()
    }

    pub fn frozen_params(&self) -> Vec<ParamId> {
        let mut p = self.if_head.params();
        p.push(self.text.table);
        p
    }

    pub fn trainable_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// Support features stacked over all shots, with the per-way masks.
    fn support_inputs(&self, episode: &Episode) -> Result<(Scene, Vec<Vec<bool>>)> {
        let mut scene = Scene {
            points: Vec::new(),
            texture: Vec::new(),
            labels: Vec::new(),
            class_set: Vec::new(),
            seed: 0,
        };
        let mut masks = vec![Vec::new(); episode.n_way];
        for shot in &episode.support {
            scene.points.extend_from_slice(&shot.scene.points);
            scene.texture.extend_from_slice(&shot.scene.texture);
            scene.labels.extend_from_slice(&shot.scene.labels);
            for (w, m) in shot.masks.iter().enumerate() {
                masks[w].extend_from_slice(m);
            }
        }
        Ok((scene, masks))
    }

    /// Builds the whole pipeline on `g`. Alignment losses and the auxiliary
    /// head exist only in train mode.
    pub fn forward(&self, g: &mut Graph, episode: &Episode, mode: Mode) -> Result<Forward> {
        self.forward_with(&self.store, g, episode, mode)
    }

    /// [`Model::forward`] reading parameter values from `store`, which must
    /// have this model's layout.
    pub fn forward_with(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        episode: &Episode,
        mode: Mode,
    ) -> Result<Forward> {
        if episode.n_way != self.config.n_way {
            return Err(CoreError::Config(format!(
                "model built for {}-way episodes, got {}-way",
                self.config.n_way, episode.n_way
            )));
        }
        let (support, masks) = self.support_inputs(episode)?;
        let s_uf = self.uf.encode(g, store, &support)?;
        let s_if = self.if_head.encode(store, &support)?;
        let (p_u, p_i) = extract_prototypes(g, s_uf, &s_if, &masks)?;

        let q_uf = self.uf.encode(g, store, &episode.query)?;
        let q_if = self.if_head.encode(store, &episode.query)?;
        let (c_u, c_i) = compute_correlations(g, q_uf, &q_if, p_u, p_i)?;

        let train = mode == Mode::Train;
        let mut plr = None;
        let mut dcr = None;
        let (r_geo, r_sem, parts) = match &self.sem {
            Some(sem) => {
                let dam = train && self.variant.uses_dam();
                let (r_geo, r_sem) = if dam {
                    let geo = self.geo.forward(g, store, c_u)?;
                    let se = sem.forward(g, store, c_i)?;
                    dcr = Some(dcr_loss(g, geo.probs, se.probs)?);
                    let proj = self.proj.as_ref().expect("alignment variant has a projection");
                    plr = Some(plr_loss(g, store, p_u, p_i, proj)?);
                    (geo.refined, se.refined)
                } else {
                    (self.geo.refine(g, store, c_u)?, sem.refine(g, store, c_i)?)
                };
                (r_geo, Some(r_sem), vec![r_geo, r_sem])
            }
            None => {
                let summed = g.add(c_u, c_i)?;
                let r = self.geo.refine(g, store, summed)?;
                (r, None, vec![r])
            }
        };

        let bn_mode = if train { BnMode::Train } else { BnMode::Eval };
        let (merged, bn_batch) = self.sam.merge.forward(g, store, &parts, bn_mode)?;
        let aux_logits = if train {
            Some(self.aux.forward(g, store, merged)?)
        } else {
            None
        };
        let (g_base, g_q) =
            text_guidance(store, &self.text, &self.config.base_classes, &episode.novel_classes)?;
        let r_final = self.sam.arbitrate(g, store, merged, &g_base, &g_q)?;
        let logits = self.decoder.forward(g, store, r_final, &episode.query.points)?;

        Ok(Forward {
            logits,
            aux_logits,
            plr,
            dcr,
            bn_batch,
            c_u,
            c_i,
            r_geo,
            r_sem,
            p_u,
            p_i,
            merged,
        })
    }

    /// Per-point argmax class in `0..=n_way`.
    pub fn predict(&self, episode: &Episode) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, episode, Mode::Eval)?;
        Ok(argmax_rows(g.value(f.logits)))
    }

    pub fn apply_batch_stats(&mut self, stats: &BatchStats) {
        self.sam.merge.running.update(stats);
    }
}

pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let cols = t.shape()[1];
    t.data()
        .chunks(cols)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}
