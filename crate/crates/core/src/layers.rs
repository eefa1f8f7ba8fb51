//! Parameterized building blocks shared by the model components.

use dafss_tensor::init::xavier_uniform;
use dafss_tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

use crate::error::{CoreError, Result};

pub const LN_EPS: f64 = 1e-5;

/// Row-wise affine map `x W + b` with W stored as fan_in × fan_out.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), xavier_uniform(rng, fan_in, fan_out))?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                Ok(g.add_row(y, b)?)
            }
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(&[dim], 1.0))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        Ok(g.layer_norm(x, gamma, beta, LN_EPS)?)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// Multi-head self-attention with bias-free projections.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub dim: usize,
    pub heads: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(CoreError::Config(format!(
                "{name}: model dimension {dim} is not divisible by {heads} heads"
            )));
        }
        let mut proj = |suffix: &str| store.add(format!("{name}.{suffix}"), xavier_uniform(rng, dim, dim));
        Ok(Self {
            wq: proj("wq")?,
            wk: proj("wk")?,
            wv: proj("wv")?,
            wo: proj("wo")?,
            dim,
            heads,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let [wq, wk, wv, wo] = [self.wq, self.wk, self.wv, self.wo].map(|id| g.param(store, id));
        mhsa(g, x, wq, wk, wv, wo, self.heads)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.wq, self.wk, self.wv, self.wo]
    }
}

/// Scaled dot-product self-attention over the rows of `x`, split into
/// `heads` column blocks, concatenated and projected by `wo`.
pub fn mhsa(
    g: &mut Graph,
    x: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    heads: usize,
) -> Result<Var> {
    let (_, d) = g.value(x).dims2("mhsa")?;
    if heads == 0 || d % heads != 0 {
        return Err(CoreError::Config(format!(
            "attention dimension {d} is not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = g.matmul(x, wq)?;
    let k = g.matmul(x, wk)?;
    let v = g.matmul(x, wv)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.narrow(q, 1, h * dh, dh)?;
        let kh = g.narrow(k, 1, h * dh, dh)?;
        let vh = g.narrow(v, 1, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale)?;
        let attn = g.softmax(scores, 1)?;
        outs.push(g.matmul(attn, vh)?);
    }
    let cat = if heads == 1 { outs[0] } else { g.concat(&outs, 1)? };
    Ok(g.matmul(cat, wo)?)
}

/// `LN(x + MHSA(x))`, the residual attention block used by the experts and
/// the arbitration layers.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualAttention {
    pub attention: Attention,
    pub norm: LayerNorm,
}

impl ResidualAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(Self {
            attention: Attention::new(store, rng, &format!("{name}.attn"), dim, heads)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let a = self.attention.forward(g, store, x)?;
        let r = g.add(x, a)?;
        self.norm.forward(g, store, r)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.attention.params();
        p.extend(self.norm.params());
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_applies_weight_then_bias() {
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), "l", 2, 1, true).unwrap();
        *store.value_mut(lin.weight) = Tensor::new(vec![2, 1], vec![2.0, -1.0]).unwrap();
        *store.value_mut(lin.bias.unwrap()) = Tensor::vector(vec![0.5]);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 2], vec![1.0, 1.0, 3.0, 0.0]).unwrap());
        let y = lin.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y).data(), &[1.5, 6.5]);
        assert_eq!(lin.params().len(), 2);
    }

    #[test]
    fn layer_norm_starts_as_plain_standardization() {
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "n", 2).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap());
        let y = ln.forward(&mut g, &store, x).unwrap();
        let s = 1.0 / (1.0 + LN_EPS).sqrt();
        assert!((g.value(y).data()[0] + s).abs() < 1e-12);
        assert!((g.value(y).data()[1] - s).abs() < 1e-12);
    }

    #[test]
    fn heads_must_divide_the_width() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Attention::new(&mut store, &mut rng, "a", 6, 4).is_err());
        assert!(Attention::new(&mut store, &mut rng, "b", 8, 4).is_ok());
    }
}
