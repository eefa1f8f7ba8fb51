//! Compound objective and the episodic training step.

use dafss_tensor::{AdamW, AdamWConfig, GradMap, Graph, ParamId, Tensor, Var};
use serde::Serialize;

use crate::episode::Episode;
use crate::error::{CoreError, Result};
use crate::metrics::{confusion_matrix, miou};
use crate::model::{argmax_rows, Mode, Model, Pathway};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_base: f64,
    pub lambda_plr: f64,
    pub lambda_dcr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_base: 0.1,
            lambda_plr: 0.001,
            lambda_dcr: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_base", self.lambda_base),
            ("lambda_plr", self.lambda_plr),
            ("lambda_dcr", self.lambda_dcr),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(CoreError::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Mean cross-entropy of the decoder logits against remapped labels.
pub fn seg_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let targets: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
    Ok(g.cross_entropy(logits, &targets)?)
}

/// Mean cross-entropy of the auxiliary head over base-labelled points; an
/// exact 0 when there are none.
pub fn base_loss(g: &mut Graph, aux_logits: Var, targets: &[Option<usize>]) -> Result<Var> {
    Ok(g.cross_entropy(aux_logits, targets)?)
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub seg: Var,
    pub base: Option<Var>,
    pub plr: Option<Var>,
    pub dcr: Option<Var>,
}

/// `seg + λ_base base + λ_plr plr + λ_dcr dcr`. Terms that are absent or
/// weighted by zero are not added at all, so with every weight at zero the
/// result is `seg` itself.
pub fn total_loss(g: &mut Graph, terms: &LossTerms, w: &LossWeights) -> Result<Var> {
    let mut total = terms.seg;
    for (term, lambda) in [
        (terms.base, w.lambda_base),
        (terms.plr, w.lambda_plr),
        (terms.dcr, w.lambda_dcr),
    ] {
        if let Some(t) = term.filter(|_| lambda != 0.0) {
            let scaled = g.scale(t, lambda)?;
            total = g.add(total, scaled)?;
        }
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainRecord {
    pub step: usize,
    pub loss_total: f64,
    pub loss_seg: f64,
    pub loss_base: f64,
    pub loss_plr: f64,
    pub loss_dcr: f64,
    pub grad_norm_uf: f64,
    pub grad_norm_sem: f64,
    pub miou_train: f64,
}

impl TrainRecord {
    /// The objective recomputed from the logged components.
    pub fn recomposed(&self, w: &LossWeights) -> f64 {
        self.loss_seg
            + w.lambda_base * self.loss_base
            + w.lambda_plr * self.loss_plr
            + w.lambda_dcr * self.loss_dcr
    }
}

/// L2 norm of the gradients of `group`; parameters the pass did not reach
/// contribute zero.
pub fn grad_norm_monitor(grads: &GradMap, group: &[ParamId]) -> Result<f64> {
    if grads.is_empty() {
        return Err(CoreError::Monitor("no gradients recorded; run backward first".into()));
    }
    Ok(group
        .iter()
        .filter_map(|&id| grads.get(id))
        .flat_map(|g| g.iter())
        .fold(0.0, |acc, v| acc + v * v)
        .sqrt())
}

pub struct Trainer {
    pub model: Model,
    pub optimizer: AdamW,
    pub weights: LossWeights,
    pub step: usize,
}

impl Trainer {
    pub fn new(model: Model, adamw: AdamWConfig, weights: LossWeights) -> Result<Self> {
        weights.validate()?;
        let optimizer = AdamW::new(adamw, &model.store);
        Ok(Self {
            model,
            optimizer,
            weights,
            step: 0,
        })
    }

    /// Forward, backward, one optimizer step. Gradient norms are measured
    /// before the step.
    pub fn train_episode(&mut self, episode: &Episode) -> Result<TrainRecord> {
        let model = &self.model;
        let mut g = Graph::new();
        let f = model.forward(&mut g, episode, Mode::Train)?;
        let seg = seg_loss(&mut g, f.logits, &episode.query_labels)?;
        let base = match f.aux_logits {
            Some(aux) => Some(base_loss(&mut g, aux, &episode.base_targets(&model.config.base_classes))?),
            None => None,
        };
        let terms = LossTerms {
            seg,
            base,
            plr: f.plr,
            dcr: f.dcr,
        };
        let total = total_loss(&mut g, &terms, &self.weights)?;

        let value = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
        let (loss_total, loss_seg) = (g.value(total).item(), g.value(seg).item());
        let (loss_base, loss_plr, loss_dcr) = (value(base), value(f.plr), value(f.dcr));
        if ![loss_total, loss_seg, loss_base, loss_plr, loss_dcr]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(CoreError::NonFiniteLoss {
                step: self.step,
                components: format!(
                    "total={loss_total} seg={loss_seg} base={loss_base} plr={loss_plr} dcr={loss_dcr}"
                ),
            });
        }
        let preds = argmax_rows(g.value(f.logits));
        let cm = confusion_matrix(&preds, &episode.query_labels, model.n_s())?;
        let fg: Vec<usize> = (1..model.n_s()).collect();
        let miou_train = miou(&cm, &fg).map_or(0.0, |(_, m)| m);

        let grads = g.backward(total)?;
        let grad_norm_uf = grad_norm_monitor(&grads, &model.group(Pathway::Uf))?;
        let grad_norm_sem = grad_norm_monitor(&grads, &model.group(Pathway::Sem))?;

        let store = &mut self.model.store;
        store.accumulate(&grads)?;
        let stepped = self.optimizer.step(store);
        store.zero_grad();
        stepped?;
        if let Some(stats) = &f.bn_batch {
            self.model.apply_batch_stats(stats);
        }

        let record = TrainRecord {
            step: self.step,
            loss_total,
            loss_seg,
            loss_base,
            loss_plr,
            loss_dcr,
            grad_norm_uf,
            grad_norm_sem,
            miou_train,
        };
        self.step += 1;
        Ok(record)
    }

    /// Re-estimates the batch-norm running statistics with the current
    /// weights, pooling the batch statistics of `episodes`. The moving
    /// averages gathered during training lag behind the weights they were
    /// computed with; evaluation should not inherit that lag.
    pub fn recalibrate(&mut self, episodes: &[Episode]) -> Result<()> {
        let batches = episodes
            .iter()
            .map(|ep| {
                let mut g = Graph::new();
                let f = self.model.forward(&mut g, ep, Mode::Train)?;
                f.bn_batch
                    .ok_or_else(|| CoreError::Config("train-mode forward produced no batch statistics".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        self.model.sam.merge.running.set_pooled(&batches);
        Ok(())
    }
}

/// Snapshot of the given parameters, for bitwise before/after comparisons.
pub fn snapshot(model: &Model, ids: &[ParamId]) -> Vec<Tensor> {
    ids.iter().map(|&id| model.store.value(id).clone()).collect()
}
