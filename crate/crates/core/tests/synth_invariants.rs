use std::collections::HashSet;

use compcos::feasibility::{feasibility_scores, Mixing};
use compcos::io::{load_embeddings, load_features, load_manifest, MissingPolicy};
use compcos::space::Split;
use compcos::synth::{generate_synthetic, load_truth, write_synthetic, GenConfig, EMBEDDINGS_FILE, FEATURES_FILE, MANIFEST_FILE, TRUTH_FILE};
use compcos::Error;
use proptest::prelude::*;

fn configs() -> impl Strategy<Value = GenConfig> {
    (3usize..9, 3usize..9, 0.4f64..1.0, 0.3f64..0.9, 1usize..4, any::<u64>()).prop_map(
        |(n_states, n_objects, feasible_fraction, seen_fraction, cluster_size, seed)| GenConfig {
            n_states,
            n_objects,
            feasible_fraction,
            seen_fraction,
            samples_per_seen: 2,
            samples_per_unseen_test: 2,
            d_feature: 24,
            cluster_size,
            seed,
            ..GenConfig::default()
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn generated_data_respects_its_contract(cfg in configs()) {
        let data = match generate_synthetic(&cfg) {
            Ok(d) => d,
            Err(Error::InfeasibleConfig(_)) => return Ok(()),
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        let space = &data.space;
        prop_assert!(data.dataset.validate(space, data.features.nrows()).is_empty());

        let states: HashSet<usize> = space.seen_pairs().map(|p| p.state).collect();
        let objects: HashSet<usize> = space.seen_pairs().map(|p| p.object).collect();
        prop_assert_eq!(states.len(), cfg.n_states);
        prop_assert_eq!(objects.len(), cfg.n_objects);

        for i in 0..space.len() {
            if space.is_seen(i) {
                prop_assert!(data.truth.feasible[i]);
            }
        }
        for s in data.dataset.samples.iter() {
            let idx = space.index_of(s.pair).unwrap();
            prop_assert!(data.truth.feasible[idx]);
            if s.split == Split::Train {
                prop_assert!(space.is_seen(idx));
            }
        }
    }

    #[test]
    fn noiseless_embeddings_rank_feasible_pairs_first(cfg in configs()) {
        let cfg = GenConfig { noise_sigma: 0.0, ..cfg };
        let Ok(data) = generate_synthetic(&cfg) else { return Ok(()) };
        prop_assume!(data.truth.block_cover);
        let feas = feasibility_scores(&data.embeddings, &data.space, Mixing::Avg, 0).unwrap();
        let unseen: Vec<usize> = (0..data.space.len()).filter(|&i| !data.space.is_seen(i)).collect();
        let lowest_good = unseen.iter().filter(|&&i| data.truth.feasible[i]).map(|&i| feas.rho[i]).fold(f64::INFINITY, f64::min);
        let highest_bad = unseen.iter().filter(|&&i| !data.truth.feasible[i]).map(|&i| feas.rho[i]).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lowest_good > highest_bad, "{} vs {}", lowest_good, highest_bad);
    }
}

#[test]
fn default_config_uses_the_block_cover() {
    for seed in 0..10 {
        let data = generate_synthetic(&GenConfig { seed, ..GenConfig::default() }).unwrap();
        assert!(data.truth.block_cover, "seed {seed}");
    }
}

#[test]
fn written_files_reload_to_the_in_memory_data() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_synthetic(&GenConfig::default()).unwrap();
    write_synthetic(&data, dir.path()).unwrap();

    let (space, dataset) = load_manifest(dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(space.target(), data.space.target());
    assert_eq!(space.seen_flags(), data.space.seen_flags());
    assert_eq!(dataset, data.dataset);
    assert_eq!(load_features(dir.path().join(FEATURES_FILE)).unwrap(), data.features);
    let emb = load_embeddings(dir.path().join(EMBEDDINGS_FILE), space.vocab(), MissingPolicy::Error).unwrap();
    assert_eq!(emb, data.embeddings);
    assert_eq!(load_truth(dir.path().join(TRUTH_FILE)).unwrap().feasible, data.truth.feasible);
}

#[test]
fn same_seed_writes_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = GenConfig { seed: 17, ..GenConfig::default() };
    write_synthetic(&generate_synthetic(&cfg).unwrap(), a.path()).unwrap();
    write_synthetic(&generate_synthetic(&cfg).unwrap(), b.path()).unwrap();
    for f in [MANIFEST_FILE, FEATURES_FILE, EMBEDDINGS_FILE, TRUTH_FILE] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}
