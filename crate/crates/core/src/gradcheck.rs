//! Finite-difference suite over every differentiable operation, the model
//! components and the whole pipeline at miniature size.

use dafss_tensor::gradcheck::{check_inputs, check_params, GradCheckReport, FD_EPS};
use dafss_tensor::{Graph, ParamStore, RunningStats, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dam::{dcr_loss, plr_loss};
use crate::episode::{Episode, EpisodeSampler};
use crate::error::Result;
use crate::experts::Expert;
use crate::features::cosine_correlation;
use crate::layers::{mhsa, Linear};
use crate::model::{Mode, Model, ModelConfig, Variant};
use crate::sam::{inject_background_guidance, neighbor_weights, semantic_gate};
use crate::scene::{generate_pool, SceneConfig};
use crate::trainer::{base_loss, seg_loss, total_loss, LossTerms, LossWeights};

pub const TOLERANCE: f64 = 1e-3;

/// Query points of the miniature pipeline check.
pub const MINI_QUERY_POINTS: usize = 32;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub report: GradCheckReport,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.report.passes(TOLERANCE)
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
        .expect("matching length")
}

/// Contracts an arbitrary output with fixed random weights so every output
/// entry influences the checked scalar.
fn readout(g: &mut Graph, y: Var, seed: u64) -> dafss_tensor::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, g.shape(y), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> dafss_tensor::Result<Var>>;

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor>, OpFn)> {
    let m34 = rand_tensor(rng, &[3, 4], -1.0, 1.0);
    let m42 = rand_tensor(rng, &[4, 2], -1.0, 1.0);
    let a = rand_tensor(rng, &[3, 4], -1.0, 1.0);
    let pos = rand_tensor(rng, &[3, 4], 0.2, 2.0);
    let row4 = rand_tensor(rng, &[4], -1.0, 1.0);
    let g5 = rand_tensor(rng, &[5], 0.5, 1.5);
    let b5 = rand_tensor(rng, &[5], -0.5, 0.5);
    let x45 = rand_tensor(rng, &[4, 5], -2.0, 2.0);
    let logits = rand_tensor(rng, &[4, 3], -2.0, 2.0);

    let unary = |f: fn(&mut Graph, Var) -> dafss_tensor::Result<Var>, seed: u64| -> OpFn {
        Box::new(move |g, v| {
            let y = f(g, v[0])?;
            readout(g, y, seed)
        })
    };
    vec![
        ("matmul", vec![m34.clone(), m42], Box::new(|g, v| {
            let y = g.matmul(v[0], v[1])?;
            readout(g, y, 1)
        })),
        ("transpose", vec![m34.clone()], unary(|g, x| g.transpose(x), 2)),
        ("add", vec![m34.clone(), a.clone()], Box::new(|g, v| {
            let y = g.add(v[0], v[1])?;
            readout(g, y, 3)
        })),
        ("sub", vec![m34.clone(), a.clone()], Box::new(|g, v| {
            let y = g.sub(v[0], v[1])?;
            readout(g, y, 4)
        })),
        ("mul", vec![m34.clone(), a.clone()], Box::new(|g, v| {
            let y = g.mul(v[0], v[1])?;
            readout(g, y, 5)
        })),
        ("affine", vec![m34.clone()], unary(|g, x| g.affine(x, -1.5, 0.25), 6)),
        ("add_row", vec![m34.clone(), row4.clone()], Box::new(|g, v| {
            let y = g.add_row(v[0], v[1])?;
            readout(g, y, 7)
        })),
        ("mul_row", vec![m34.clone(), row4], Box::new(|g, v| {
            let y = g.mul_row(v[0], v[1])?;
            readout(g, y, 8)
        })),
        ("relu", vec![m34.clone()], unary(|g, x| g.relu(x), 9)),
        ("sigmoid", vec![m34.clone()], unary(|g, x| g.sigmoid(x), 10)),
        ("exp", vec![m34.clone()], unary(|g, x| g.exp(x), 11)),
        ("log", vec![pos.clone()], unary(|g, x| g.log(x), 12)),
        ("clamp_min", vec![m34.clone()], unary(|g, x| g.clamp_min(x, 0.1), 13)),
        ("softmax", vec![m34.clone()], unary(|g, x| g.softmax(x, 1), 14)),
        ("softmax_axis0", vec![m34.clone()], unary(|g, x| g.softmax(x, 0), 15)),
        ("layer_norm", vec![x45.clone(), g5.clone(), b5.clone()], Box::new(|g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            readout(g, y, 16)
        })),
        ("batch_norm_train", vec![x45.clone(), g5.clone(), b5.clone()], Box::new(|g, v| {
            let (y, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
            readout(g, y, 17)
        })),
        ("batch_norm_eval", vec![x45.clone(), g5, b5], Box::new(|g, v| {
            let stats = RunningStats {
                mean: vec![0.1, -0.2, 0.0, 0.3, 0.05],
                var: vec![1.2, 0.8, 1.0, 0.5, 2.0],
                momentum: 0.1,
            };
            let y = g.batch_norm_eval(v[0], v[1], v[2], &stats, 1e-5)?;
            readout(g, y, 18)
        })),
        ("concat", vec![m34.clone(), a.clone()], Box::new(|g, v| {
            let y = g.concat(&[v[0], v[1]], 1)?;
            readout(g, y, 19)
        })),
        ("narrow", vec![x45.clone()], unary(|g, x| g.narrow(x, 1, 1, 3), 20)),
        ("sum", vec![m34.clone()], Box::new(|g, v| g.sum(v[0]))),
        ("mean", vec![m34.clone()], Box::new(|g, v| g.mean(v[0]))),
        ("mean_rows", vec![m34.clone()], unary(|g, x| g.mean_rows(x), 21)),
        ("normalize_rows", vec![m34.clone()], unary(|g, x| g.normalize_rows(x), 22)),
        ("cross_entropy", vec![logits], Box::new(|g, v| {
            g.cross_entropy(v[0], &[Some(0), Some(2), None, Some(1)])
        })),
        ("stop_gradient", vec![m34.clone(), a], Box::new(|g, v| {
            let s = g.stop_gradient(v[0])?;
            let y = g.mul(s, v[1])?;
            let z = g.add(y, v[0])?;
            readout(g, z, 23)
        })),
        ("mhsa", vec![rand_tensor(rng, &[3, 8], -1.0, 1.0)], Box::new(|g, v| {
            let mut r = ChaCha8Rng::seed_from_u64(24);
            let w: Vec<Var> = (0..4)
                .map(|_| g.constant(rand_tensor(&mut r, &[8, 8], -0.5, 0.5)))
                .collect();
            let y = mhsa(g, v[0], w[0], w[1], w[2], w[3], 2)
                .map_err(|e| dafss_tensor::TensorError::Graph(e.to_string()))?;
            readout(g, y, 25)
        })),
        ("cosine_correlation", vec![m34.clone(), rand_tensor(rng, &[2, 4], -1.0, 1.0)], Box::new(|g, v| {
            let y = cosine_correlation(g, v[0], v[1])
                .map_err(|e| dafss_tensor::TensorError::Graph(e.to_string()))?;
            readout(g, y, 26)
        })),
        ("dcr_loss", vec![rand_tensor(rng, &[4, 3], -1.0, 1.0), rand_tensor(rng, &[4, 3], -1.0, 1.0)], Box::new(|g, v| {
            let p = g.softmax(v[0], 1)?;
            let q = g.softmax(v[1], 1)?;
            dcr_loss(g, p, q).map_err(|e| dafss_tensor::TensorError::Graph(e.to_string()))
        })),
    ]
}

/// A 1-way 1-shot episode whose query is cut down to `query_points`.
pub fn miniature_episode(seed: u64, query_points: usize) -> Result<Episode> {
    let scene_cfg = SceneConfig {
        points_per_object: (10, 16),
        max_points: 96,
        texture_confusion: 0.5,
        ..SceneConfig::default()
    };
    let pool = generate_pool(&scene_cfg, 24, seed)?;
    let base = ModelConfig::default().base_classes;
    let sampler = EpisodeSampler::new(1, 1, vec![3, 5, 7, 9], base)?;
    let mut ep = sampler.sample(&pool, seed)?;
    // Keep target points first so the cut query still contains the class.
    let mut order: Vec<usize> = (0..ep.query.len()).collect();
    order.sort_by_key(|&i| (ep.query_labels[i] == 0, i));
    let mut keep: Vec<usize> = order.into_iter().take(query_points).collect();
    keep.sort_unstable();
    ep.query = ep.query.select(&keep);
    ep.query_labels = keep.iter().map(|&i| ep.query_labels[i]).collect();
    ep.base_class_labels = keep.iter().map(|&i| ep.base_class_labels[i]).collect();
    Ok(ep)
}

/// Miniature widths of the pipeline check.
pub fn miniature_config() -> ModelConfig {
    ModelConfig::tiny()
}

fn pipeline_check(variant: Variant, seed: u64) -> Result<CheckResult> {
    let episode = miniature_episode(seed, MINI_QUERY_POINTS)?;
    let mut model = Model::build(&miniature_config(), variant, seed)?;
    let weights = LossWeights::default();
    let ids: Vec<_> = model
        .store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    let shape = model.clone();
    let loss = |store: &ParamStore, g: &mut Graph| -> dafss_tensor::Result<Var> {
        let run = |g: &mut Graph| -> Result<Var> {
            let f = shape.forward_with(store, g, &episode, Mode::Train)?;
            let seg = seg_loss(g, f.logits, &episode.query_labels)?;
            let base = match f.aux_logits {
                Some(aux) => Some(base_loss(g, aux, &episode.base_targets(&shape.config.base_classes))?),
                None => None,
            };
            total_loss(g, &LossTerms { seg, base, plr: f.plr, dcr: f.dcr }, &weights)
        };
        run(g).map_err(|e| dafss_tensor::TensorError::Graph(e.to_string()))
    };
    let report = check_params(&mut model.store, &ids, Some(4), seed, FD_EPS, loss)?;
    Ok(CheckResult {
        name: format!("pipeline[{variant}]"),
        report,
    })
}

fn component_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let expert = Expert::new(&mut store, &mut rng, "expert", 3, 8, 2)?;
    let proj = Linear::new(&mut store, &mut rng, "proj", 4, 6, true)?;
    let inject = Linear::new(&mut store, &mut rng, "inject", 2 + 5, 2, true)?;
    let gate = Linear::new(&mut store, &mut rng, "gate", 5, 8, true)?;
    let c = rand_tensor(&mut rng, &[5, 3], -1.0, 1.0);
    let p_u = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let p_i = rand_tensor(&mut rng, &[3, 6], -2.0, 2.0);
    let r = rand_tensor(&mut rng, &[5, 8], -1.0, 1.0);
    let g_base = rand_tensor(&mut rng, &[5], -1.0, 1.0);
    let g_q = rand_tensor(&mut rng, &[2, 5], -1.0, 1.0);
    let points: Vec<[f64; 3]> = (0..5)
        .map(|_| std::array::from_fn(|_| rng.random_range(0.0..0.4)))
        .collect();

    let wrap = |e: crate::error::CoreError| dafss_tensor::TensorError::Graph(e.to_string());
    let mut run = |name: &str,
                   ids: Vec<dafss_tensor::ParamId>,
                   f: &dyn Fn(&ParamStore, &mut Graph) -> Result<Var>|
     -> Result<()> {
        let report = check_params(&mut store, &ids, None, seed, FD_EPS, |s, g| f(s, g).map_err(wrap))?;
        out.push(CheckResult {
            name: name.to_string(),
            report,
        });
        Ok(())
    };

    run("expert", expert.params(), &|s, g| {
        let x = g.constant(c.clone());
        let o = expert.forward(g, s, x)?;
        let y = g.add(o.refined, o.refined)?;
        let a = readout(g, y, 30)?;
        let b = readout(g, o.probs, 31)?;
        Ok(g.add(a, b)?)
    })?;
    run("plr_loss", proj.params(), &|s, g| {
        let pu = g.constant(p_u.clone());
        let pi = g.constant(p_i.clone());
        plr_loss(g, s, pu, pi, &proj)
    })?;
    run("inject_background_guidance", inject.params(), &|s, g| {
        let x = g.constant(r.clone());
        let y = inject_background_guidance(g, s, x, &g_base, &inject, 2)?;
        Ok(readout(g, y, 32)?)
    })?;
    run("semantic_gate", gate.params(), &|s, g| {
        let x = g.constant(r.clone());
        let y = semantic_gate(g, s, x, &g_q, &gate)?;
        Ok(readout(g, y, 33)?)
    })?;

    // Input-side checks for components whose inputs carry gradient.
    let inputs = |name: &str, ts: Vec<Tensor>, f: OpFn| -> Result<CheckResult> {
        Ok(CheckResult {
            name: name.to_string(),
            report: check_inputs(f, &ts, FD_EPS)?,
        })
    };
    let w = neighbor_weights(&points, 3, 0.3)?;
    out.push(inputs(
        "decoder_aggregation",
        vec![r.clone()],
        Box::new(move |g, v| {
            let wv = g.constant(w.clone());
            let y = g.matmul(wv, v[0])?;
            readout(g, y, 34)
        }),
    )?);
    let store_c = store.clone();
    let proj_c = proj.clone();
    out.push(inputs(
        "plr_loss_prototypes",
        vec![p_u.clone()],
        Box::new(move |g, v| {
            let pi = g.constant(p_i.clone());
            plr_loss(g, &store_c, v[0], pi, &proj_c).map_err(wrap)
        }),
    )?);
    Ok(out)
}

/// Runs the whole suite. Results are returned in a fixed order.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, inputs, f) in primitive_cases(&mut rng) {
        out.push(CheckResult {
            name: name.to_string(),
            report: check_inputs(f, &inputs, FD_EPS)?,
        });
    }
    out.extend(component_checks(seed)?);
    for variant in Variant::ALL {
        out.push(pipeline_check(variant, seed)?);
    }
    Ok(out)
}
