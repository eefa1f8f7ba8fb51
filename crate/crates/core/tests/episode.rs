use dafss_core::episode::EpisodeSampler;
use dafss_core::scene::{generate_pool, generate_scene, SceneConfig, Scene};

fn pool(n: usize) -> Vec<Scene> {
    generate_pool(&SceneConfig::small(), n, 11).unwrap()
}

#[test]
fn support_and_query_are_disjoint_in_a_three_scene_pool() {
    let cfg = SceneConfig::small();
    // Find three scenes sharing a class so a 1-shot episode is possible.
    let scenes: Vec<Scene> = (0..200).map(|s| generate_scene(&cfg, s).unwrap()).collect();
    let class = (0..10)
        .find(|&c| scenes.iter().filter(|s| s.contains_class(c)).count() >= 3)
        .unwrap();
    let three: Vec<Scene> = scenes.into_iter().filter(|s| s.contains_class(class)).take(3).collect();
    let sampler = EpisodeSampler::new(1, 1, vec![class], vec![]).unwrap();
    for seed in 0..50 {
        let ep = sampler.sample(&three, seed).unwrap();
        assert!(ep.support.iter().all(|s| s.pool_index != ep.query_pool_index));
    }
}

#[test]
fn two_way_episodes_have_two_distinct_classes() {
    let p = pool(40);
    let sampler = EpisodeSampler::new(2, 1, vec![3, 5, 7, 9], vec![0, 1, 2, 4, 6, 8]).unwrap();
    for seed in 0..50 {
        let ep = sampler.sample(&p, seed).unwrap();
        assert_eq!(ep.novel_classes.len(), 2);
        assert_ne!(ep.novel_classes[0], ep.novel_classes[1]);
        assert_eq!(ep.support.len(), 2);
        for shot in &ep.support {
            assert_eq!(shot.masks.len(), 2);
            let class = ep.novel_classes[shot.way];
            assert!(shot.masks[shot.way].iter().any(|&m| m), "shot lacks its class {class}");
        }
        let mut idx: Vec<usize> = ep.support.iter().map(|s| s.pool_index).collect();
        idx.push(ep.query_pool_index);
        idx.sort_unstable();
        idx.dedup();
        assert_eq!(idx.len(), 3);
        // Label remapping is a bijection onto 0..=n_way.
        for (l, &t) in ep.query.labels.iter().zip(&ep.query_labels) {
            match ep.novel_classes.iter().position(|c| c == l) {
                Some(w) => assert_eq!(t, w + 1),
                None => assert_eq!(t, 0),
            }
        }
    }
}

#[test]
fn classes_are_drawn_uniformly() {
    let p = pool(60);
    let candidates = vec![3, 5, 7, 9];
    let sampler = EpisodeSampler::new(1, 1, candidates.clone(), vec![]).unwrap();
    let eligible = sampler.eligible(&p);
    assert_eq!(eligible, candidates);
    let mut counts = [0usize; 10];
    let draws = 1000;
    for seed in 0..draws {
        counts[sampler.sample(&p, seed).unwrap().novel_classes[0]] += 1;
    }
    let expected = 1.0 / eligible.len() as f64;
    for &c in &eligible {
        let freq = counts[c] as f64 / draws as f64;
        assert!((freq - expected).abs() < 0.05, "class {c}: {freq} vs {expected}");
    }
}

#[test]
fn sampling_is_deterministic() {
    let p = pool(30);
    let sampler = EpisodeSampler::new(1, 2, vec![3, 5, 7, 9], vec![0, 1, 2, 4, 6, 8]).unwrap();
    assert_eq!(sampler.sample(&p, 4).unwrap(), sampler.sample(&p, 4).unwrap());
}

#[test]
fn support_masks_never_mark_query_points() {
    // Masks are built from support scenes only, and sized to them.
    let p = pool(30);
    let sampler = EpisodeSampler::new(1, 1, vec![3, 5, 7, 9], vec![]).unwrap();
    for seed in 0..20 {
        let ep = sampler.sample(&p, seed).unwrap();
        for shot in &ep.support {
            assert_eq!(shot.masks[0].len(), shot.scene.len());
            let class = ep.novel_classes[0];
            for (m, l) in shot.masks[0].iter().zip(&shot.scene.labels) {
                assert_eq!(*m, *l == class);
            }
        }
    }
}
