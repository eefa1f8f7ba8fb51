//! Arbitration of the expert outputs and the point decoder.
//!
//! Token layout: every query point is one token; its first `d_bg` channels
//! carry background evidence and are rewritten with the base-class guidance
//! before each attention layer, the remaining channels pass through as-is.

use dafss_tensor::{BatchStats, BnMode, Graph, ParamId, ParamStore, RunningStats, Tensor, Var};
use rand::Rng;

use crate::error::{CoreError, Result};
use crate::layers::{Linear, ResidualAttention};

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Merge {
    pub bn_gamma: ParamId,
    pub bn_beta: ParamId,
    pub running: RunningStats,
    pub conv: Linear,
}

impl Merge {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        d_in: usize,
        d_arb: usize,
        momentum: f64,
    ) -> Result<Self> {
        Ok(Self {
            bn_gamma: store.add("sam.merge.bn.gamma", Tensor::filled(&[d_in], 1.0))?,
            bn_beta: store.add("sam.merge.bn.beta", Tensor::zeros(&[d_in]))?,
            running: RunningStats::new(d_in, momentum),
            conv: Linear::new(store, rng, "sam.merge.conv", d_in, d_arb, true)?,
        })
    }

    /// `ReLU(conv(BN([parts...])))`. In train mode the batch statistics are
    /// returned for the caller to fold into the running averages.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        parts: &[Var],
        mode: BnMode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let x = if parts.len() == 1 { parts[0] } else { g.concat(parts, 1)? };
        let gamma = g.param(store, self.bn_gamma);
        let beta = g.param(store, self.bn_beta);
        let (normed, stats) = match mode {
            BnMode::Train => {
                let (v, s) = g.batch_norm_train(x, gamma, beta, BN_EPS)?;
                (v, Some(s))
            }
            BnMode::Eval => (g.batch_norm_eval(x, gamma, beta, &self.running, BN_EPS)?, None),
        };
        let y = self.conv.forward(g, store, normed)?;
        Ok((g.relu(y)?, stats))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.bn_gamma, self.bn_beta];
        p.extend(self.conv.params());
        p
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArbitrationLayer {
    pub inject: Linear,
    pub block: ResidualAttention,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sam {
    pub merge: Merge,
    pub layers: Vec<ArbitrationLayer>,
    pub gate: Linear,
    pub d_arb: usize,
    pub d_bg: usize,
}

impl Sam {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        d_in: usize,
        d_arb: usize,
        d_if: usize,
        layers: usize,
        heads: usize,
        momentum: f64,
    ) -> Result<Self> {
        if !(1..=2).contains(&layers) {
            return Err(CoreError::Config(format!(
                "arbitration depth must be 1 or 2, got {layers}"
            )));
        }
        let d_bg = d_arb / 4;
        if d_bg == 0 {
            return Err(CoreError::Config(format!(
                "arbitration width {d_arb} leaves no background channels"
            )));
        }
        let merge = Merge::new(store, rng, d_in, d_arb, momentum)?;
        let layers = (0..layers)
            .map(|i| {
                Ok(ArbitrationLayer {
                    inject: Linear::new(store, rng, &format!("sam.layer{i}.inject"), d_bg + d_if, d_bg, true)?,
                    block: ResidualAttention::new(store, rng, &format!("sam.layer{i}"), d_arb, heads)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            merge,
            layers,
            gate: Linear::new(store, rng, "sam.gate", d_if, d_arb, true)?,
            d_arb,
            d_bg,
        })
    }

    /// Merged features through every (injection, attention) layer and the
    /// semantic gate.
    pub fn arbitrate(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        merged: Var,
        g_base: &Tensor,
        g_q: &Tensor,
    ) -> Result<Var> {
        let mut r = merged;
        for layer in &self.layers {
            r = inject_background_guidance(g, store, r, g_base, &layer.inject, self.d_bg)?;
            r = layer.block.forward(g, store, r)?;
        }
        semantic_gate(g, store, r, g_q, &self.gate)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.merge.params();
        for l in &self.layers {
            p.extend(l.inject.params());
            p.extend(l.block.params());
        }
        p.extend(self.gate.params());
        p
    }
}

/// Replaces the background channels of every token with
/// `inject([R_bg || G_base])`; the foreground channels are copied unchanged.
pub fn inject_background_guidance(
    g: &mut Graph,
    store: &ParamStore,
    r: Var,
    g_base: &Tensor,
    inject: &Linear,
    d_bg: usize,
) -> Result<Var> {
    let (t, d) = g.value(r).dims2("inject_background_guidance")?;
    let d_if = g_base.numel();
    if inject.fan_in != d_bg + d_if || inject.fan_out != d_bg || d_bg > d {
        return Err(CoreError::Config(format!(
            "injection map {}→{} does not fit {d_bg} background + {d_if} guidance channels",
            inject.fan_in, inject.fan_out
        )));
    }
    let bg = g.narrow(r, 1, 0, d_bg)?;
    let fg = g.narrow(r, 1, d_bg, d - d_bg)?;
    let tiled: Vec<f64> = (0..t).flat_map(|_| g_base.data().iter().copied()).collect();
    let guide = g.constant(Tensor::new(vec![t, d_if], tiled)?);
    let joined = g.concat(&[bg, guide], 1)?;
    let new_bg = inject.forward(g, store, joined)?;
    Ok(g.concat(&[new_bg, fg], 1)?)
}

/// `R ⊙ (1 + σ(gate(G_q)))`, the gate averaged over ways.
pub fn semantic_gate(
    g: &mut Graph,
    store: &ParamStore,
    r: Var,
    g_q: &Tensor,
    gate: &Linear,
) -> Result<Var> {
    let q = g.constant(g_q.clone());
    let logits = gate.forward(g, store, q)?;
    let s = g.sigmoid(logits)?;
    let s = g.mean_rows(s)?;
    let factor = g.affine(s, 1.0, 1.0)?;
    Ok(g.mul_row(r, factor)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub conv: Linear,
    pub classifier: Linear,
    pub k: usize,
    pub radius: f64,
}

/// Distance offset keeping the self weight finite.
pub const IDW_OFFSET: f64 = 0.05;

impl Decoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        d_arb: usize,
        classes: usize,
        k: usize,
        radius: f64,
    ) -> Result<Self> {
        if k == 0 || radius.is_nan() || radius <= 0.0 {
            return Err(CoreError::Config(format!(
                "decoder needs k >= 1 and radius > 0, got k={k} radius={radius}"
            )));
        }
        Ok(Self {
            conv: Linear::new(store, rng, "decoder.conv", d_arb, d_arb, true)?,
            classifier: Linear::new(store, rng, "decoder.classifier", d_arb, classes, true)?,
            k,
            radius,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        r: Var,
        points: &[[f64; 3]],
    ) -> Result<Var> {
        let w = g.constant(neighbor_weights(points, self.k, self.radius)?);
        let agg = g.matmul(w, r)?;
        let h = self.conv.forward(g, store, agg)?;
        let h = g.relu(h)?;
        self.classifier.forward(g, store, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.conv.params();
        p.extend(self.classifier.params());
        p
    }
}

/// Row-normalized inverse-distance weights over each point's `k` nearest
/// neighbours (itself included) within `radius`; N × N.
pub fn neighbor_weights(points: &[[f64; 3]], k: usize, radius: f64) -> Result<Tensor> {
    let n = points.len();
    if k > n {
        return Err(CoreError::Config(format!(
            "decoder k = {k} exceeds the {n} query points"
        )));
    }
    let mut m = Tensor::zeros(&[n, n]);
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        dist.clear();
        dist.extend(points.iter().enumerate().map(|(j, q)| {
            let d2: f64 = (0..3).map(|a| (points[i][a] - q[a]).powi(2)).sum();
            // Self first on ties so it is always kept.
            (if i == j { -1.0 } else { d2.sqrt() }, j)
        }));
        dist.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let row = &mut m.data_mut()[i * n..(i + 1) * n];
        let mut total = 0.0;
        for &(d, j) in &dist[..k] {
            if d > radius {
                continue;
            }
            let w = 1.0 / (d.max(0.0) + IDW_OFFSET);
            row[j] = w;
            total += w;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok(m)
}
