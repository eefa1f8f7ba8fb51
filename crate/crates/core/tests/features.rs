mod common;

use dafss_core::error::CoreError;
use dafss_core::features::{
    compute_correlations, cosine_correlation, extract_prototypes, partner_confusion, point_inputs,
    pooling_matrix, text_guidance, IfHead, TextStub, UfHead,
};
use dafss_core::scene::{generate_scene, Scene, SceneConfig, TEXTURE_COUNT};
use dafss_tensor::gradcheck::{check_params, FD_EPS};
use dafss_tensor::{Graph, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn scene(seed: u64, confusion: f64) -> Scene {
    generate_scene(
        &SceneConfig {
            texture_confusion: confusion,
            ..SceneConfig::small()
        },
        seed,
    )
    .unwrap()
}

fn if_head(store: &mut ParamStore, confusion: Tensor, position_weight: f64, dim: usize) -> IfHead {
    let head = IfHead::new(store, &mut rng(3), dim, confusion, position_weight).unwrap();
    head.set_norm_scale(store, 5.0);
    head
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn geometric_head_is_permutation_equivariant() {
    let mut store = ParamStore::new();
    let head = UfHead::new(&mut store, &mut rng(1), 16, 8).unwrap();
    let s = scene(4, 0.0);
    let perm: Vec<usize> = (0..s.len()).rev().collect();
    let mut g = Graph::new();
    let a = head.encode(&mut g, &store, &s).unwrap();
    let b = head.encode(&mut g, &store, &s.select(&perm)).unwrap();
    for (i, &p) in perm.iter().enumerate() {
        assert_eq!(g.value(b).row(i), g.value(a).row(p));
    }
}

#[test]
fn geometric_head_output_shape() {
    let mut store = ParamStore::new();
    let head = UfHead::new(&mut store, &mut rng(1), 32, 32).unwrap();
    let s = Scene {
        points: (0..512).map(|i| [i as f64 * 0.01, 0.0, 1.0]).collect(),
        texture: vec![2; 512],
        labels: vec![2; 512],
        class_set: vec![2],
        seed: 0,
    };
    let mut g = Graph::new();
    let out = head.encode(&mut g, &store, &s).unwrap();
    assert_eq!(g.shape(out), &[512, 32]);
}

#[test]
fn geometric_head_gradients_match_finite_differences() {
    let mut store = ParamStore::new();
    let head = UfHead::new(&mut store, &mut rng(2), 6, 4).unwrap();
    let s = scene(5, 0.0).select(&[0, 7, 19, 40, 63]);
    let ids = head.params();
    let report = check_params(&mut store, &ids, None, 0, FD_EPS, |store, g| {
        let f = head.encode(g, store, &s).map_err(common::wrap)?;
        let sq = g.mul(f, f)?;
        let t = g.sigmoid(sq)?;
        g.sum(t)
    })
    .unwrap();
    assert!(report.passes(1e-3), "{report:?}");
}

#[test]
fn semantic_head_never_receives_gradients() {
    let mut store = ParamStore::new();
    let uf = UfHead::new(&mut store, &mut rng(1), 8, 8).unwrap();
    let head = if_head(&mut store, partner_confusion(0.2), 0.3, 8);
    let text = TextStub::new(&mut store, &mut rng(9), 10, 8).unwrap();
    for id in head.params().into_iter().chain([text.table]) {
        assert!(!store.get(id).trainable, "{}", store.name(id));
    }
    let s = scene(6, 0.5);
    let class = s.class_set[0];
    let masks = vec![s.labels.iter().map(|&l| l == class).collect::<Vec<bool>>()];
    if masks[0].iter().all(|&m| m) {
        return;
    }
    let mut g = Graph::new();
    let su = uf.encode(&mut g, &store, &s).unwrap();
    let si = head.encode(&store, &s).unwrap();
    let (pu, pi) = extract_prototypes(&mut g, su, &si, &masks).unwrap();
    let (cu, ci) = compute_correlations(&mut g, su, &si, pu, pi).unwrap();
    let both = g.add(cu, ci).unwrap();
    let loss = g.sum(both).unwrap();
    let grads = g.backward(loss).unwrap();
    for id in head.params().into_iter().chain([text.table]) {
        assert!(!grads.contains(id));
    }
    assert!(uf.params().iter().all(|&id| grads.contains(id)));
}

#[test]
fn semantic_features_have_the_configured_norm() {
    let mut store = ParamStore::new();
    let head = if_head(&mut store, partner_confusion(0.2), 0.3, 16);
    let f = head.encode(&store, &scene(1, 0.0)).unwrap();
    for r in 0..f.shape()[0] {
        let n = f.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 5.0).abs() < 1e-9);
    }
}

#[test]
fn identity_confusion_separates_classes() {
    let mut store = ParamStore::new();
    let head = if_head(&mut store, Tensor::identity(TEXTURE_COUNT), 0.3, 64);
    let s = scene(12, 0.0);
    assert!(s.class_set.len() >= 2);
    let f = head.encode(&store, &s).unwrap();
    let rows = |c: usize| -> Vec<usize> { (0..s.len()).filter(|&i| s.labels[i] == c).collect() };
    let mean_cos = |a: &[usize], b: &[usize]| {
        let mut total = 0.0;
        for &i in a {
            for &j in b {
                total += cosine(f.row(i), f.row(j));
            }
        }
        total / (a.len() * b.len()) as f64
    };
    for &a in &s.class_set {
        let within = mean_cos(&rows(a), &rows(a));
        for &b in s.class_set.iter().filter(|&&b| b != a) {
            let cross = mean_cos(&rows(a), &rows(b));
            assert!(within > cross, "classes {a},{b}: {within} vs {cross}");
        }
    }
}

#[test]
fn uniform_confusion_erases_class_identity() {
    let mut store = ParamStore::new();
    let uniform = Tensor::filled(&[TEXTURE_COUNT, TEXTURE_COUNT], 1.0 / TEXTURE_COUNT as f64);
    let head = if_head(&mut store, uniform, 0.0, 16);
    let s = scene(12, 0.0);
    let f = head.encode(&store, &s).unwrap();
    let class_mean = |c: usize| -> Vec<f64> {
        let rows: Vec<usize> = (0..s.len()).filter(|&i| s.labels[i] == c).collect();
        (0..16)
            .map(|j| rows.iter().map(|&i| f.at(i, j)).sum::<f64>() / rows.len() as f64)
            .collect()
    };
    let first = class_mean(s.class_set[0]);
    for &c in &s.class_set[1..] {
        for (a, b) in first.iter().zip(class_mean(c)) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn confusion_matrices_must_be_row_stochastic() {
    let m = partner_confusion(0.3);
    for r in 0..TEXTURE_COUNT {
        assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    let mut bad = Tensor::identity(TEXTURE_COUNT);
    bad.data_mut()[0] = 0.5;
    let mut store = ParamStore::new();
    assert!(IfHead::new(&mut store, &mut rng(0), 8, bad, 0.0).is_err());
}

#[test]
fn unknown_texture_is_a_lookup_error() {
    let mut s = scene(1, 0.0);
    s.texture[0] = TEXTURE_COUNT;
    assert!(matches!(point_inputs(&s), Err(CoreError::Lookup { id: 10, .. })));
    let mut store = ParamStore::new();
    let head = if_head(&mut store, partner_confusion(0.2), 0.3, 8);
    assert!(matches!(head.encode(&store, &s), Err(CoreError::Lookup { .. })));
}

fn prototypes(feats: &[Vec<f64>], mask: &[bool]) -> (Tensor, Tensor) {
    let t = Tensor::from_rows(feats).unwrap();
    let mut g = Graph::new();
    let v = g.leaf(t.clone(), true);
    let (pu, pi) = extract_prototypes(&mut g, v, &t, &[mask.to_vec()]).unwrap();
    (g.value(pu).clone(), g.value(pi).clone())
}

#[test]
fn singleton_mask_prototype_is_that_point() {
    let feats = vec![vec![1.0, 2.0], vec![-3.0, 0.5], vec![4.0, 4.0]];
    let (pu, pi) = prototypes(&feats, &[false, true, false]);
    assert_eq!(pu.row(1), &[-3.0, 0.5]);
    assert_eq!(pi.row(1), &[-3.0, 0.5]);
    assert_eq!(pu.row(0), &[2.5, 3.0]);
}

#[test]
fn duplicated_support_point_leaves_prototype_unchanged() {
    let one = prototypes(&[vec![0.3, -0.7], vec![9.0, 9.0]], &[true, false]);
    let two = prototypes(&[vec![0.3, -0.7], vec![0.3, -0.7], vec![9.0, 9.0]], &[true, true, false]);
    assert_eq!(one.0.row(1), two.0.row(1));
}

#[test]
fn three_point_prototype_is_the_mean() {
    let feats = vec![vec![1.0, 0.0, 2.0], vec![0.5, -1.0, 4.0], vec![-0.25, 3.0, 0.0], vec![7.0, 7.0, 7.0]];
    let (pu, _) = prototypes(&feats, &[true, true, true, false]);
    let expected = [1.25 / 3.0, 2.0 / 3.0, 2.0];
    for (a, b) in pu.row(1).iter().zip(expected) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn empty_mask_names_the_way() {
    let masks = vec![vec![true, false, false], vec![false, false, false]];
    assert!(matches!(pooling_matrix(&masks, 3), Err(CoreError::DegenerateSupport { way: 1 })));
    assert!(pooling_matrix(&[vec![true, true]], 2).is_err());
}

fn correlate(q: &[Vec<f64>], p: &[Vec<f64>]) -> Tensor {
    let mut g = Graph::new();
    let q = g.constant(Tensor::from_rows(q).unwrap());
    let p = g.constant(Tensor::from_rows(p).unwrap());
    let c = cosine_correlation(&mut g, q, p).unwrap();
    g.value(c).clone()
}

#[test]
fn correlation_fixtures() {
    let c = correlate(&[vec![1.0, 2.0, 3.0]], &[vec![0.0, 0.0, 1.0], vec![1.0, 2.0, 3.0]]);
    assert!((c.at(0, 1) - 1.0).abs() < 1e-15);
    let c = correlate(&[vec![1.0, 0.0]], &[vec![0.0, 2.0]]);
    assert_eq!(c.at(0, 0), 0.0);
    let c = correlate(&[vec![0.0, 0.0]], &[vec![1.0, 2.0]]);
    assert_eq!(c.at(0, 0), 0.0);

    let q = vec![vec![1.0, 2.0, -1.0], vec![0.5, 0.5, 0.5], vec![-3.0, 1.0, 0.0], vec![2.0, -2.0, 4.0]];
    let p = vec![vec![1.0, 1.0, 1.0], vec![0.0, -1.0, 2.0]];
    let c = correlate(&q, &p);
    assert_eq!(c.shape(), &[4, 2]);
    for (i, qi) in q.iter().enumerate() {
        for (j, pj) in p.iter().enumerate() {
            assert!((c.at(i, j) - cosine(qi, pj)).abs() < 1e-12);
        }
    }
}

#[test]
fn semantic_correlation_ignores_feature_scale() {
    let mut store = ParamStore::new();
    let head = if_head(&mut store, partner_confusion(0.2), 0.3, 16);
    let uf = UfHead::new(&mut store, &mut rng(1), 8, 8).unwrap();
    let s = scene(21, 0.5);
    let q = scene(22, 0.5);
    let class = s.class_set[0];
    let masks = vec![s.labels.iter().map(|&l| l == class).collect::<Vec<bool>>()];
    let run = |scale: f64| {
        let mut g = Graph::new();
        let su = uf.encode(&mut g, &store, &s).unwrap();
        let qu = uf.encode(&mut g, &store, &q).unwrap();
        let mut si = head.encode(&store, &s).unwrap();
        let mut qi = head.encode(&store, &q).unwrap();
        si.data_mut().iter_mut().for_each(|v| *v *= scale);
        qi.data_mut().iter_mut().for_each(|v| *v *= scale);
        let (pu, pi) = extract_prototypes(&mut g, su, &si, &masks).unwrap();
        let (cu, ci) = compute_correlations(&mut g, qu, &qi, pu, pi).unwrap();
        assert!(g.value(cu).data().iter().all(|v| v.abs() <= 1.0 + 1e-12));
        g.value(ci).clone()
    };
    let (a, b) = (run(1.0), run(7.5));
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-12);
        assert!(x.abs() <= 1.0 + 1e-12);
    }
}

#[test]
fn support_points_prefer_their_own_prototype_without_confusion() {
    let mut store = ParamStore::new();
    let head = if_head(&mut store, Tensor::identity(TEXTURE_COUNT), 0.0, 32);
    // Three classes, four points each, textures equal to labels.
    let labels: Vec<usize> = [0, 4, 8].iter().flat_map(|&c| [c; 4]).collect();
    let s = Scene {
        points: (0..12).map(|i| [i as f64 * 0.1, 0.0, (i % 4) as f64 * 0.6]).collect(),
        texture: labels.clone(),
        labels: labels.clone(),
        class_set: vec![0, 4, 8],
        seed: 0,
    };
    let f = head.encode(&store, &s).unwrap();
    let masks: Vec<Vec<bool>> = [4, 8].iter().map(|&c| labels.iter().map(|&l| l == c).collect()).collect();
    let mut g = Graph::new();
    let v = g.constant(f.clone());
    let (pu, pi) = extract_prototypes(&mut g, v, &f, &masks).unwrap();
    let (_, ci) = compute_correlations(&mut g, v, &f, pu, pi).unwrap();
    let c = g.value(ci);
    for (i, &l) in labels.iter().enumerate() {
        let own = match l {
            0 => 0,
            4 => 1,
            _ => 2,
        };
        let best = (0..3).max_by(|&a, &b| c.at(i, a).total_cmp(&c.at(i, b))).unwrap();
        assert_eq!(best, own, "point {i}");
    }
}

#[test]
fn text_guidance_fixtures() {
    let mut store = ParamStore::new();
    let stub = TextStub::new(&mut store, &mut rng(4), 10, 3).unwrap();
    {
        let t = store.value_mut(stub.table);
        t.data_mut()[0..3].copy_from_slice(&[1.0, -2.0, 0.5]);
        t.data_mut()[3..6].copy_from_slice(&[-1.0, 2.0, -0.5]);
        t.data_mut()[6..9].copy_from_slice(&[0.25, 4.0, 3.0]);
    }
    let (g_base, g_q) = text_guidance(&store, &stub, &[2], &[5, 7]).unwrap();
    assert_eq!(g_base.data(), store.value(stub.table).row(2));
    assert_eq!(g_q.shape(), &[2, 3]);
    assert_eq!(g_q.row(1), store.value(stub.table).row(7));

    let (g_base, _) = text_guidance(&store, &stub, &[0, 1], &[3]).unwrap();
    assert!(g_base.data().iter().all(|v| *v == 0.0));

    let (g_base, _) = text_guidance(&store, &stub, &[0, 1, 2], &[3]).unwrap();
    for (a, b) in g_base.data().iter().zip([0.25 / 3.0, 4.0 / 3.0, 1.0]) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(matches!(
        text_guidance(&store, &stub, &[0, 10], &[3]),
        Err(CoreError::Lookup { id: 10, .. })
    ));
}

#[test]
fn text_stub_is_deterministic_per_seed() {
    let build = |seed| {
        let mut store = ParamStore::new();
        let stub = TextStub::new(&mut store, &mut rng(seed), 10, 6).unwrap();
        store.value(stub.table).clone()
    };
    assert_eq!(build(1), build(1));
    assert_ne!(build(1), build(2));
}
