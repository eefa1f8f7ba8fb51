//! N-way K-shot episode sampling from a scene pool.

use rand::seq::index::sample;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::scene::Scene;

/// One support scene with a binary mask per way.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportShot {
    pub scene: Scene,
    /// Index of the pool scene, for disjointness checks.
    pub pool_index: usize,
    /// Way this shot was drawn for (0-based).
    pub way: usize,
    pub masks: Vec<Vec<bool>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub support: Vec<SupportShot>,
    pub query: Scene,
    pub query_pool_index: usize,
    /// Per query point: 0 for background, n for `novel_classes[n - 1]`.
    pub query_labels: Vec<usize>,
    pub n_way: usize,
    pub k_shot: usize,
    pub novel_classes: Vec<usize>,
    /// Per query point: the point's class when it is a base class.
    pub base_class_labels: Vec<Option<usize>>,
}

impl Episode {
    /// Per query point index into `base` for base-class points.
    pub fn base_targets(&self, base: &[usize]) -> Vec<Option<usize>> {
        self.base_class_labels
            .iter()
            .map(|l| l.and_then(|c| base.iter().position(|&b| b == c)))
            .collect()
    }
}

/// Draws episodes whose novel classes come from `candidates`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeSampler {
    pub n_way: usize,
    pub k_shot: usize,
    pub candidates: Vec<usize>,
    pub base_classes: Vec<usize>,
}

impl EpisodeSampler {
    pub fn new(
        n_way: usize,
        k_shot: usize,
        candidates: Vec<usize>,
        base_classes: Vec<usize>,
    ) -> Result<Self> {
        if n_way == 0 || k_shot == 0 {
            return Err(CoreError::Config(format!(
                "n_way and k_shot must be positive, got {n_way} and {k_shot}"
            )));
        }
        Ok(Self {
            n_way,
            k_shot,
            candidates,
            base_classes,
        })
    }

    /// Classes with at least `k_shot + 1` scenes containing them.
    pub fn eligible(&self, pool: &[Scene]) -> Vec<usize> {
        self.candidates
            .iter()
            .copied()
            .filter(|&c| scenes_with(pool, c).len() > self.k_shot)
            .collect()
    }

    pub fn sample(&self, pool: &[Scene], seed: u64) -> Result<Episode> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eligible = self.eligible(pool);
        if eligible.len() < self.n_way {
            let short = self
                .candidates
                .iter()
                .find(|c| !eligible.contains(c))
                .map(|&c| {
                    format!(
                        "class {c} appears in {} scenes but needs {} ({} shots + query)",
                        scenes_with(pool, c).len(),
                        self.k_shot + 1,
                        self.k_shot
                    )
                })
                .unwrap_or_else(|| format!("only {} candidate classes", self.candidates.len()));
            return Err(CoreError::Sampling(format!(
                "{}-way needs {} eligible classes, found {}: {short}",
                self.n_way,
                self.n_way,
                eligible.len()
            )));
        }
        let novel: Vec<usize> = sample(&mut rng, eligible.len(), self.n_way)
            .into_iter()
            .map(|i| eligible[i])
            .collect();

        let mut used = vec![false; pool.len()];
        let mut support = Vec::with_capacity(self.n_way * self.k_shot);
        for (way, &class) in novel.iter().enumerate() {
            let free: Vec<usize> = scenes_with(pool, class)
                .into_iter()
                .filter(|&i| !used[i])
                .collect();
            // Keep one scene of this class back so a query can still be found.
            if free.len() < self.k_shot {
                return Err(CoreError::Sampling(format!(
                    "class {class} has {} unused scenes left for {} shots",
                    free.len(),
                    self.k_shot
                )));
            }
            for j in sample(&mut rng, free.len(), self.k_shot) {
                let index = free[j];
                used[index] = true;
                support.push(SupportShot {
                    masks: masks_for(&pool[index], &novel),
                    scene: pool[index].clone(),
                    pool_index: index,
                    way,
                });
            }
        }

        let query_candidates: Vec<usize> = (0..pool.len())
            .filter(|&i| !used[i] && novel.iter().any(|&c| pool[i].contains_class(c)))
            .collect();
        let &query_index = query_candidates.choose(&mut rng).ok_or_else(|| {
            CoreError::Sampling(format!(
                "no query scene left containing any of classes {novel:?}"
            ))
        })?;
        let query = pool[query_index].clone();
        let query_labels = query
            .labels
            .iter()
            .map(|l| novel.iter().position(|c| c == l).map_or(0, |w| w + 1))
            .collect();
        let base_class_labels = query
            .labels
            .iter()
            .map(|l| self.base_classes.contains(l).then_some(*l))
            .collect();

        Ok(Episode {
            support,
            query,
            query_pool_index: query_index,
            query_labels,
            n_way: self.n_way,
            k_shot: self.k_shot,
            novel_classes: novel,
            base_class_labels,
        })
    }
}

fn scenes_with(pool: &[Scene], class: usize) -> Vec<usize> {
    (0..pool.len())
        .filter(|&i| pool[i].contains_class(class))
        .collect()
}

fn masks_for(scene: &Scene, novel: &[usize]) -> Vec<Vec<bool>> {
    novel
        .iter()
        .map(|&c| scene.labels.iter().map(|&l| l == c).collect())
        .collect()
}
