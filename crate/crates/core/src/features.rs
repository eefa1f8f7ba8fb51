//! Point feature heads, prototype pooling and prototype correlations.
//!
//! The geometric head is a trainable per-point MLP. The semantic head and the
//! text table are frozen seeded stand-ins for pretrained encoders: the
//! semantic head keys on texture ids, mixes class embeddings through a fixed
//! row-stochastic confusion matrix and rescales every feature to a large,
//! constant norm.

use dafss_tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CoreError, Result};
use crate::layers::Linear;
use crate::scene::{Scene, TEXTURE_COUNT};

/// Height buckets of the semantic head's coarse position term.
pub const HEIGHT_BUCKETS: usize = 8;
const BUCKET_HEIGHT: f64 = 0.5;

/// Per-point inputs of the geometric head: coordinates then a texture one-hot.
pub fn point_inputs(scene: &Scene) -> Result<Tensor> {
    let width = 3 + TEXTURE_COUNT;
    let mut data = vec![0.0; scene.len() * width];
    for (i, (p, &t)) in scene.points.iter().zip(&scene.texture).enumerate() {
        if t >= TEXTURE_COUNT {
            return Err(CoreError::Lookup {
                table: "texture",
                id: t,
                len: TEXTURE_COUNT,
            });
        }
        data[i * width..i * width + 3].copy_from_slice(p);
        data[i * width + 3 + t] = 1.0;
    }
    Ok(Tensor::new(vec![scene.len(), width], data)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct UfHead {
    pub hidden: Linear,
    pub out: Linear,
}

impl UfHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        hidden: usize,
        d_uf: usize,
    ) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, rng, "uf.hidden", 3 + TEXTURE_COUNT, hidden, true)?,
            out: Linear::new(store, rng, "uf.out", hidden, d_uf, true)?,
        })
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, scene: &Scene) -> Result<Var> {
        if scene.is_empty() {
            return Err(CoreError::Config("cannot encode an empty scene".into()));
        }
        let x = g.constant(point_inputs(scene)?);
        let h = self.hidden.forward(g, store, x)?;
        let h = g.relu(h)?;
        self.out.forward(g, store, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.hidden.params();
        p.extend(self.out.params());
        p
    }
}

/// Confusion matrix `(1 - kappa) I + kappa P` where P swaps each class with a
/// fixed partner of a different shape.
pub fn partner_confusion(kappa: f64) -> Tensor {
    let n = TEXTURE_COUNT;
    let mut m = Tensor::zeros(&[n, n]);
    for c in 0..n {
        let partner = (c + n / 2) % n;
        m.data_mut()[c * n + c] += 1.0 - kappa;
        m.data_mut()[c * n + partner] += kappa;
    }
    m
}

#[derive(Clone, Debug, PartialEq)]
pub struct IfHead {
    pub texture_table: ParamId,
    pub confusion: ParamId,
    pub height_table: ParamId,
    pub position_weight: ParamId,
    pub norm_scale: ParamId,
    pub dim: usize,
}

impl IfHead {
    /// Registers the frozen tables. `norm_scale` is set later with
    /// [`IfHead::set_norm_scale`] once the geometric head exists.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        dim: usize,
        confusion: Tensor,
        position_weight: f64,
    ) -> Result<Self> {
        check_row_stochastic(&confusion)?;
        let mut normal = |rows: usize| {
            let data = (0..rows * dim)
                .map(|_| StandardNormal.sample(rng))
                .collect::<Vec<f64>>();
            Tensor::new(vec![rows, dim], data)
        };
        let texture_table = normal(TEXTURE_COUNT)?;
        let height_table = normal(HEIGHT_BUCKETS)?;
        Ok(Self {
            texture_table: store.add_frozen("if.texture_table", texture_table)?,
            confusion: store.add_frozen("if.confusion", confusion)?,
            height_table: store.add_frozen("if.height_table", height_table)?,
            position_weight: store.add_frozen("if.position_weight", Tensor::scalar(position_weight))?,
            norm_scale: store.add_frozen("if.norm_scale", Tensor::scalar(1.0))?,
            dim,
        })
    }

    pub fn set_norm_scale(&self, store: &mut ParamStore, scale: f64) {
        store.value_mut(self.norm_scale).data_mut()[0] = scale;
    }

    pub fn norm_scale(&self, store: &ParamStore) -> f64 {
        store.value(self.norm_scale).item()
    }

    /// Per-point semantic features; a plain tensor, so nothing can flow back.
    pub fn encode(&self, store: &ParamStore, scene: &Scene) -> Result<Tensor> {
        if scene.is_empty() {
            return Err(CoreError::Config("cannot encode an empty scene".into()));
        }
        let d = self.dim;
        let mixed = store.value(self.confusion).matmul(store.value(self.texture_table))?;
        let heights = store.value(self.height_table);
        let w = store.value(self.position_weight).item();
        let scale = self.norm_scale(store);
        let mut out = vec![0.0; scene.len() * d];
        for (i, (p, &t)) in scene.points.iter().zip(&scene.texture).enumerate() {
            if t >= TEXTURE_COUNT {
                return Err(CoreError::Lookup {
                    table: "texture",
                    id: t,
                    len: TEXTURE_COUNT,
                });
            }
            let bucket = ((p[2] / BUCKET_HEIGHT).floor().max(0.0) as usize).min(HEIGHT_BUCKETS - 1);
            let row = &mut out[i * d..(i + 1) * d];
            for (j, v) in row.iter_mut().enumerate() {
                *v = mixed.at(t, j) + w * heights.at(bucket, j);
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > dafss_tensor::NORM_EPS {
                row.iter_mut().for_each(|v| *v *= scale / norm);
            }
        }
        Ok(Tensor::new(vec![scene.len(), d], out)?)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![
            self.texture_table,
            self.confusion,
            self.height_table,
            self.position_weight,
            self.norm_scale,
        ]
    }
}

pub fn check_row_stochastic(m: &Tensor) -> Result<()> {
    let (r, c) = m.dims2("confusion")?;
    if r != TEXTURE_COUNT || c != TEXTURE_COUNT {
        return Err(CoreError::Config(format!(
            "confusion matrix must be {TEXTURE_COUNT}x{TEXTURE_COUNT}, got {r}x{c}"
        )));
    }
    for i in 0..r {
        let row = m.row(i);
        let sum: f64 = row.iter().sum();
        if row.iter().any(|v| *v < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(CoreError::Config(format!(
                "confusion row {i} is not a probability vector (sum {sum})"
            )));
        }
    }
    Ok(())
}

/// Frozen class-name embedding table.
#[derive(Clone, Debug, PartialEq)]
pub struct TextStub {
    pub table: ParamId,
    pub classes: usize,
    pub dim: usize,
}

impl TextStub {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        classes: usize,
        dim: usize,
    ) -> Result<Self> {
        let s = 1.0 / (dim as f64).sqrt();
        let data = (0..classes * dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                s * z
            })
            .collect();
        Ok(Self {
            table: store.add_frozen("text.embeddings", Tensor::new(vec![classes, dim], data)?)?,
            classes,
            dim,
        })
    }

    pub fn embedding<'a>(&self, store: &'a ParamStore, class: usize) -> Result<&'a [f64]> {
        if class >= self.classes {
            return Err(CoreError::Lookup {
                table: "text embedding",
                id: class,
                len: self.classes,
            });
        }
        Ok(store.value(self.table).row(class))
    }
}

/// Background guidance (mean base-class embedding) and one embedding per way.
pub fn text_guidance(
    store: &ParamStore,
    stub: &TextStub,
    base: &[usize],
    novel: &[usize],
) -> Result<(Tensor, Tensor)> {
    if base.is_empty() || novel.is_empty() {
        return Err(CoreError::Config("text guidance needs base and novel classes".into()));
    }
    let mut g_base = vec![0.0; stub.dim];
    for &c in base {
        for (a, v) in g_base.iter_mut().zip(stub.embedding(store, c)?) {
            *a += v;
        }
    }
    g_base.iter_mut().for_each(|v| *v /= base.len() as f64);
    let rows = novel
        .iter()
        .map(|&c| stub.embedding(store, c).map(<[f64]>::to_vec))
        .collect::<Result<Vec<_>>>()?;
    Ok((Tensor::vector(g_base), Tensor::from_rows(&rows)?))
}

/// Averaging matrix over support points: row 0 pools the background (points
/// in no mask), row `w + 1` pools the points of way `w`.
pub fn pooling_matrix(masks: &[Vec<bool>], points: usize) -> Result<Tensor> {
    let n_s = masks.len() + 1;
    let mut m = Tensor::zeros(&[n_s, points]);
    for mask in masks {
        if mask.len() != points {
            return Err(CoreError::Config(format!(
                "mask covers {} points, support has {points}",
                mask.len()
            )));
        }
    }
    let background: Vec<bool> = (0..points).map(|i| masks.iter().all(|m| !m[i])).collect();
    for (row, mask) in std::iter::once(&background).chain(masks).enumerate() {
        let count = mask.iter().filter(|v| **v).count();
        if count == 0 {
            return Err(match row {
                0 => CoreError::Config("support has no background points".into()),
                _ => CoreError::DegenerateSupport { way: row - 1 },
            });
        }
        let w = 1.0 / count as f64;
        for (i, _) in mask.iter().enumerate().filter(|(_, v)| **v) {
            m.data_mut()[row * points + i] = w;
        }
    }
    Ok(m)
}

/// Masked average pooling of both modalities. `P_u` stays on the tape; `P_i`
/// is a constant.
pub fn extract_prototypes(
    g: &mut Graph,
    support_uf: Var,
    support_if: &Tensor,
    masks: &[Vec<bool>],
) -> Result<(Var, Var)> {
    let (points, _) = g.value(support_uf).dims2("extract_prototypes")?;
    let pool = pooling_matrix(masks, points)?;
    let p_i = pool.matmul(support_if)?;
    let pool = g.constant(pool);
    let p_u = g.matmul(pool, support_uf)?;
    Ok((p_u, g.constant(p_i)))
}

/// Cosine similarity of every row of `q` with every row of `p`; zero-norm
/// rows give 0.
pub fn cosine_correlation(g: &mut Graph, q: Var, p: Var) -> Result<Var> {
    let qn = g.normalize_rows(q)?;
    let pn = g.normalize_rows(p)?;
    let pt = g.transpose(pn)?;
    Ok(g.matmul(qn, pt)?)
}

/// `(C^u, C^i)`: geometric and semantic correlations of query points
/// against the prototypes, each N_q × N_s.
pub fn compute_correlations(
    g: &mut Graph,
    query_uf: Var,
    query_if: &Tensor,
    p_u: Var,
    p_i: Var,
) -> Result<(Var, Var)> {
    let du = g.shape(query_uf)[1];
    let di = query_if.dims2("compute_correlations")?.1;
    for (a, b) in [(du, g.shape(p_u)[1]), (di, g.shape(p_i)[1])] {
        if a != b {
            return Err(CoreError::Tensor(dafss_tensor::TensorError::Shape {
                op: "compute_correlations",
                lhs: vec![a],
                rhs: vec![b],
            }));
        }
    }
    let c_u = cosine_correlation(g, query_uf, p_u)?;
    let qi = g.constant(query_if.clone());
    let p_i = g.stop_gradient(p_i)?;
    let c_i = cosine_correlation(g, qi, p_i)?;
    Ok((c_u, c_i))
}
