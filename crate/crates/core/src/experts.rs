//! Correlation experts: a linear lift of one correlation map followed by a
//! residual attention block, with an optional per-expert classifier.

use dafss_tensor::{Graph, ParamId, ParamStore, Var};
use rand::Rng;

use crate::error::{CoreError, Result};
use crate::layers::{Linear, ResidualAttention};

#[derive(Clone, Debug, PartialEq)]
pub struct Expert {
    pub name: String,
    pub lift: Linear,
    pub block: ResidualAttention,
    pub classifier: Linear,
    pub d_model: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ExpertOutput {
    pub refined: Var,
    pub logits: Var,
    pub probs: Var,
}

impl Expert {
    /// `n_s` correlation columns in, `n_s` class scores out.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        n_s: usize,
        d_model: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            lift: Linear::new(store, rng, &format!("{name}.lift"), n_s, d_model, true)?,
            block: ResidualAttention::new(store, rng, name, d_model, heads)?,
            classifier: Linear::new(store, rng, &format!("{name}.classifier"), d_model, n_s, true)?,
            d_model,
        })
    }

    /// `LN(H + MHSA(H))` with `H = lift(c)`.
    pub fn refine(&self, g: &mut Graph, store: &ParamStore, c: Var) -> Result<Var> {
        let (_, cols) = g.value(c).dims2("expert")?;
        if cols != self.lift.fan_in {
            return Err(CoreError::Config(format!(
                "{}: correlation has {cols} columns, lift expects {}",
                self.name, self.lift.fan_in
            )));
        }
        let h = self.lift.forward(g, store, c)?;
        self.block.forward(g, store, h)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, c: Var) -> Result<ExpertOutput> {
        let refined = self.refine(g, store, c)?;
        let (logits, probs) = expert_probs(g, store, refined, &self.classifier)?;
        Ok(ExpertOutput {
            refined,
            logits,
            probs,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.lift.params();
        p.extend(self.block.params());
        p.extend(self.classifier.params());
        p
    }
}

/// Classifier logits and their row softmax.
pub fn expert_probs(
    g: &mut Graph,
    store: &ParamStore,
    refined: Var,
    classifier: &Linear,
) -> Result<(Var, Var)> {
    let logits = classifier.forward(g, store, refined)?;
    let probs = g.softmax(logits, 1)?;
    Ok((logits, probs))
}
