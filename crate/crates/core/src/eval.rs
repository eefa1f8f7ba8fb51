//! Episodic evaluation over a global confusion matrix.

use crate::episode::{Episode, EpisodeSampler};
use crate::error::{CoreError, Result};
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::model::Model;
use crate::scene::Scene;

/// Confusion matrix in the remapped `0..=n_way` space summed over episodes.
pub fn accumulate<'a, I>(model: &Model, episodes: I) -> Result<(ConfusionMatrix, usize)>
where
    I: IntoIterator<Item = &'a Episode>,
{
    let mut m = ConfusionMatrix::new(model.n_s());
    let mut count = 0;
    for ep in episodes {
        let preds = model.predict(ep)?;
        m.add(&preds, &ep.query_labels)?;
        count += 1;
    }
    Ok((m, count))
}

pub fn evaluate<'a, I>(model: &Model, episodes: I, config_hash: &str, seed: u64) -> Result<MetricsReport>
where
    I: IntoIterator<Item = &'a Episode>,
{
    let (m, count) = accumulate(model, episodes)?;
    if count == 0 {
        return Err(CoreError::UndefinedMetric("empty episode stream".into()));
    }
    MetricsReport::from_matrix(&m, count, config_hash, seed)
}

/// Evaluation episodes: `per_class` episodes for each novel class in the
/// 1-way setting (the class is the target), otherwise `per_class` times the
/// class count with random class combinations.
pub fn eval_episodes(
    pool: &[Scene],
    novel: &[usize],
    base: &[usize],
    n_way: usize,
    k_shot: usize,
    per_class: usize,
    seed: u64,
) -> Result<Vec<Episode>> {
    let mut out = Vec::with_capacity(per_class * novel.len());
    if n_way == 1 {
        for (ci, &class) in novel.iter().enumerate() {
            let sampler = EpisodeSampler::new(1, k_shot, vec![class], base.to_vec())?;
            for e in 0..per_class {
                out.push(sampler.sample(pool, episode_seed(seed, ci, e))?);
            }
        }
    } else {
        let sampler = EpisodeSampler::new(n_way, k_shot, novel.to_vec(), base.to_vec())?;
        for e in 0..per_class * novel.len() {
            out.push(sampler.sample(pool, episode_seed(seed, usize::MAX, e))?);
        }
    }
    Ok(out)
}

pub(crate) fn episode_seed(seed: u64, stream: usize, index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (stream as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
        ^ (index as u64).wrapping_mul(0x94d0_49bb_1331_11eb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_pool, SceneConfig};

    #[test]
    fn streams_and_indices_get_distinct_seeds() {
        let seeds: std::collections::HashSet<u64> = (0..3)
            .flat_map(|s| (0..4).flat_map(move |t| (0..50).map(move |i| episode_seed(s, t, i))))
            .collect();
        assert_eq!(seeds.len(), 3 * 4 * 50);
    }

    #[test]
    fn one_way_evaluation_targets_each_novel_class_equally() {
        let pool = generate_pool(&SceneConfig::small(), 30, 1).unwrap();
        let novel = [3, 5, 7, 9];
        let base = [0, 1, 2, 4, 6, 8];
        let eps = eval_episodes(&pool, &novel, &base, 1, 1, 3, 0).unwrap();
        assert_eq!(eps.len(), 12);
        for (i, &c) in novel.iter().enumerate() {
            assert!(eps[i * 3..(i + 1) * 3].iter().all(|e| e.novel_classes == vec![c]));
        }
    }
}
