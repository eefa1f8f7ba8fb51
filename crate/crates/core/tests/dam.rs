mod common;

use dafss_core::dam::{dam_total, dcr_loss, kl_to_anchor, plr_loss};
use dafss_core::layers::Linear;
use dafss_tensor::{Graph, ParamStore, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn projection(weight: Tensor, bias: Vec<f64>) -> (ParamStore, Linear) {
    let mut store = ParamStore::new();
    let (i, o) = (weight.shape()[0], weight.shape()[1]);
    let lin = Linear::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), "proj", i, o, true).unwrap();
    *store.value_mut(lin.weight) = weight;
    *store.value_mut(lin.bias.unwrap()) = Tensor::vector(bias);
    (store, lin)
}

fn rows(r: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a * (a / b).ln()).sum()
}

#[test]
fn aligned_prototypes_cost_nothing() {
    let (store, proj) = projection(Tensor::identity(3), vec![0.0; 3]);
    let p = rows(&[&[0.3, -1.0, 2.0], &[1.0, 0.5, 0.0]]);
    let mut g = Graph::new();
    let (u, i) = (g.constant(p.clone()), g.constant(p));
    let l = plr_loss(&mut g, &store, u, i, &proj).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
}

#[test]
fn alignment_loss_matches_hand_value() {
    // proj([1,1]) = [2,1] against [0,0]; proj([0,1]) = [0,1] against [0,3].
    let (store, proj) = projection(rows(&[&[2.0, 0.0], &[0.0, 1.0]]), vec![0.0, 0.0]);
    let mut g = Graph::new();
    let u = g.constant(rows(&[&[1.0, 1.0], &[0.0, 1.0]]));
    let i = g.constant(rows(&[&[0.0, 0.0], &[0.0, 3.0]]));
    let l = plr_loss(&mut g, &store, u, i, &proj).unwrap();
    assert!((g.value(l).item() - 4.5).abs() < 1e-12);
}

#[test]
fn alignment_rejects_unpaired_prototypes() {
    let (store, proj) = projection(Tensor::identity(2), vec![0.0; 2]);
    let mut g = Graph::new();
    let u = g.constant(Tensor::zeros(&[2, 2]));
    let i = g.constant(Tensor::zeros(&[3, 2]));
    assert!(plr_loss(&mut g, &store, u, i, &proj).is_err());
}

#[test]
fn alignment_never_moves_the_semantic_prototypes() {
    let (store, proj) = projection(rows(&[&[0.5, 1.0], &[-1.0, 2.0]]), vec![0.1, -0.2]);
    let mut g = Graph::new();
    let u = g.leaf(rows(&[&[1.0, 2.0], &[0.5, -1.0]]), true);
    let i = g.leaf(rows(&[&[3.0, 1.0], &[-2.0, 0.0]]), true);
    let l = plr_loss(&mut g, &store, u, i, &proj).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(g.grad(i).is_none_or(|d| d.iter().all(|&v| v == 0.0)));
    assert!(g.grad(u).unwrap().iter().any(|&v| v != 0.0));
    assert!(grads.get(proj.weight).unwrap().iter().any(|&v| v != 0.0));
}

#[test]
fn consistency_matches_closed_form() {
    let (p, q) = ([0.5, 0.5], [0.9, 0.1]);
    let mut g = Graph::new();
    let a = g.constant(rows(&[&p]));
    let b = g.constant(rows(&[&q]));
    let l = dcr_loss(&mut g, a, b).unwrap();
    let oracle = 0.5 * kl(&p, &q) + 0.5 * kl(&q, &p);
    assert!((g.value(l).item() - oracle).abs() < 1e-10);
}

#[test]
fn consistency_averages_over_points() {
    let p = [[0.2, 0.8], [0.6, 0.4], [0.5, 0.5]];
    let q = [[0.7, 0.3], [0.6, 0.4], [0.1, 0.9]];
    let mut g = Graph::new();
    let a = g.constant(rows(&p.iter().map(|r| &r[..]).collect::<Vec<_>>()));
    let b = g.constant(rows(&q.iter().map(|r| &r[..]).collect::<Vec<_>>()));
    let l = dcr_loss(&mut g, a, b).unwrap();
    let oracle = p.iter().zip(&q).map(|(x, y)| 0.5 * kl(x, y) + 0.5 * kl(y, x)).sum::<f64>() / 3.0;
    assert!((g.value(l).item() - oracle).abs() < 1e-12);
}

#[test]
fn identical_distributions_are_consistent() {
    let mut g = Graph::new();
    let p = rows(&[&[0.3, 0.7], &[1.0, 0.0]]);
    let (a, b) = (g.constant(p.clone()), g.constant(p));
    let l = dcr_loss(&mut g, a, b).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
}

#[test]
fn consistency_rejects_mismatched_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::filled(&[3, 2], 0.5));
    let b = g.constant(Tensor::filled(&[2, 2], 0.5));
    assert!(dcr_loss(&mut g, a, b).is_err());
}

#[test]
fn divergence_term_holds_its_anchor_fixed() {
    let mut g = Graph::new();
    let p = g.leaf(rows(&[&[0.2, 0.8]]), true);
    let q = g.leaf(rows(&[&[0.6, 0.4]]), true);
    let l = kl_to_anchor(&mut g, p, q).unwrap();
    g.backward(l).unwrap();
    assert!(g.grad(q).is_none_or(|d| d.iter().all(|&v| v == 0.0)));
    // d/dp_k of sum p log(p/q) is log(p_k/q_k) + 1.
    let gp = g.grad(p).unwrap();
    assert!((gp[0] - ((0.2f64 / 0.6).ln() + 1.0)).abs() < 1e-12);
    assert!((gp[1] - ((0.8f64 / 0.4).ln() + 1.0)).abs() < 1e-12);
}

fn softmax_pair(g: &mut Graph, a: &[f64], b: &[f64]) -> (Var, Var, Var, Var) {
    let la = g.leaf(rows(&[a]), true);
    let lb = g.leaf(rows(&[b]), true);
    let pa = g.softmax(la, 1).unwrap();
    let pb = g.softmax(lb, 1).unwrap();
    (la, lb, pa, pb)
}

#[test]
fn consistency_pulls_on_both_sides() {
    let mut g = Graph::new();
    let (la, lb, pa, pb) = softmax_pair(&mut g, &[1.0, -0.5, 0.2], &[-0.3, 0.8, 0.0]);
    let l = dcr_loss(&mut g, pa, pb).unwrap();
    g.backward(l).unwrap();
    assert!(g.grad(la).unwrap().iter().any(|v| v.abs() > 1e-6));
    assert!(g.grad(lb).unwrap().iter().any(|v| v.abs() > 1e-6));
}

#[test]
fn a_step_toward_the_anchor_reduces_divergence() {
    let (a0, b) = ([1.5, -0.5], [-0.2, 0.9]);
    let mut g = Graph::new();
    let (la, _, pa, pb) = softmax_pair(&mut g, &a0, &b);
    let l = kl_to_anchor(&mut g, pa, pb).unwrap();
    let before = g.value(l).item();
    g.backward(l).unwrap();
    let grad = g.grad(la).unwrap().to_vec();
    let a1: Vec<f64> = a0.iter().zip(&grad).map(|(a, d)| a - 0.1 * d).collect();
    let mut h = Graph::new();
    let (_, _, pa, pb) = softmax_pair(&mut h, &a1, &b);
    let l = kl_to_anchor(&mut h, pa, pb).unwrap();
    assert!(h.value(l).item() < before);
}

#[test]
fn combined_alignment_weights() {
    let mut g = Graph::new();
    let (plr, dcr) = (g.constant(Tensor::scalar(2.0)), g.constant(Tensor::scalar(0.4)));
    let off = dam_total(&mut g, plr, dcr, 0.0, 0.0).unwrap();
    assert_eq!(g.value(off).item(), 0.0);
    let on = dam_total(&mut g, plr, dcr, 0.001, 0.5).unwrap();
    assert!((g.value(on).item() - 0.202).abs() < 1e-12);
}

#[test]
fn disabled_alignment_sends_no_gradient() {
    let mut g = Graph::new();
    let plr = g.leaf(Tensor::scalar(3.0), true);
    let dcr = g.leaf(Tensor::scalar(1.0), true);
    let t = dam_total(&mut g, plr, dcr, 0.0, 0.0).unwrap();
    g.backward(t).unwrap();
    assert!(g.grad(plr).is_none_or(|d| d == [0.0]));
    assert!(g.grad(dcr).is_none_or(|d| d == [0.0]));
}

proptest! {
    #[test]
    fn combined_alignment_is_linear(
        plr in 0.0f64..10.0, dcr in 0.0f64..5.0,
        lp in 0.0f64..1.0, ld in 0.0f64..1.0, k in 0.0f64..4.0,
    ) {
        let mut g = Graph::new();
        let (a, b) = (g.constant(Tensor::scalar(plr)), g.constant(Tensor::scalar(dcr)));
        let base = dam_total(&mut g, a, b, lp, ld).unwrap();
        let scaled = dam_total(&mut g, a, b, k * lp, k * ld).unwrap();
        let (base, scaled) = (g.value(base).item(), g.value(scaled).item());
        prop_assert!((base - (lp * plr + ld * dcr)).abs() < 1e-12);
        prop_assert!((scaled - k * base).abs() < 1e-9);
    }

    #[test]
    fn consistency_is_symmetric_and_nonnegative(
        a in prop::collection::vec(-3.0f64..3.0, 3),
        b in prop::collection::vec(-3.0f64..3.0, 3),
    ) {
        let mut g = Graph::new();
        let (_, _, pa, pb) = softmax_pair(&mut g, &a, &b);
        let ab = dcr_loss(&mut g, pa, pb).unwrap();
        let ba = dcr_loss(&mut g, pb, pa).unwrap();
        let (ab, ba) = (g.value(ab).item(), g.value(ba).item());
        prop_assert!(ab >= -1e-15);
        prop_assert!((ab - ba).abs() < 1e-12);
    }
}
