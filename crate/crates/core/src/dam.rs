//! Alignment losses between the two pathways, both anchored with
//! stop-gradient so each pathway is pulled toward the other without being
//! dragged by it.

use dafss_tensor::{Graph, ParamStore, Var};

use crate::error::{CoreError, Result};
use crate::layers::Linear;

pub const PROB_FLOOR: f64 = 1e-12;

/// Mean over prototype pairs of `||proj(P_u) - sg(P_i)||^2`.
pub fn plr_loss(
    g: &mut Graph,
    store: &ParamStore,
    p_u: Var,
    p_i: Var,
    proj: &Linear,
) -> Result<Var> {
    let (nu, _) = g.value(p_u).dims2("plr_loss")?;
    let (ni, _) = g.value(p_i).dims2("plr_loss")?;
    if nu != ni {
        return Err(CoreError::Pairing {
            left: nu,
            right: ni,
        });
    }
    let projected = proj.forward(g, store, p_u)?;
    let anchor = g.stop_gradient(p_i)?;
    let diff = g.sub(projected, anchor)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum(sq)?;
    Ok(g.scale(total, 1.0 / nu as f64)?)
}

/// Mean over rows of `KL(p || sg(q))`, with `q` floored inside the log.
pub fn kl_to_anchor(g: &mut Graph, p: Var, q: Var) -> Result<Var> {
    let (rows, _) = g.value(p).dims2("kl")?;
    let anchor = g.stop_gradient(q)?;
    let fp = g.clamp_min(p, PROB_FLOOR)?;
    let fq = g.clamp_min(anchor, PROB_FLOOR)?;
    let lp = g.log(fp)?;
    let lq = g.log(fq)?;
    let d = g.sub(lp, lq)?;
    let t = g.mul(p, d)?;
    let s = g.sum(t)?;
    Ok(g.scale(s, 1.0 / rows as f64)?)
}

/// `½ KL(p_geo || sg p_sem) + ½ KL(p_sem || sg p_geo)`, averaged over points.
pub fn dcr_loss(g: &mut Graph, p_geo: Var, p_sem: Var) -> Result<Var> {
    if g.shape(p_geo) != g.shape(p_sem) {
        return Err(CoreError::Tensor(dafss_tensor::TensorError::Shape {
            op: "dcr_loss",
            lhs: g.shape(p_geo).to_vec(),
            rhs: g.shape(p_sem).to_vec(),
        }));
    }
    let a = kl_to_anchor(g, p_geo, p_sem)?;
    let b = kl_to_anchor(g, p_sem, p_geo)?;
    let s = g.add(a, b)?;
    Ok(g.scale(s, 0.5)?)
}

/// `lambda_plr * plr + lambda_dcr * dcr`; an exact constant 0 when both
/// weights are zero.
pub fn dam_total(
    g: &mut Graph,
    plr: Var,
    dcr: Var,
    lambda_plr: f64,
    lambda_dcr: f64,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (loss, lambda) in [(plr, lambda_plr), (dcr, lambda_dcr)] {
        if lambda != 0.0 {
            let term = g.scale(loss, lambda)?;
            total = Some(match total {
                Some(t) => g.add(t, term)?,
                None => term,
            });
        }
    }
    Ok(match total {
        Some(t) => t,
        None => g.constant(dafss_tensor::Tensor::scalar(0.0)),
    })
}
