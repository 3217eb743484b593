//! Synthetic compositional datasets with a planted feasible set.
//!
//! States and objects are grouped into clusters. Cluster centres are
//! orthonormal (states and objects use disjoint directions) and each primitive
//! prototype is its centre plus a unit direction of length `spread` in a shared
//! residual subspace. A random affinity between state and object clusters
//! decides which cluster blocks are truly feasible; every pair in a feasible
//! block is feasible. Seen pairs cover every row and column of every feasible
//! block, so with noiseless embeddings an unseen pair's nearest seen
//! neighbours share its clusters exactly when the pair is feasible.
//!
//! Image features are `state prototype + object prototype + N(0, sigma^2)` per
//! dimension. Word embeddings are the prototypes plus noise of expected norm
//! `sigma` (`N(0, sigma^2 / d)` per dimension).

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embed::PrimitiveTable;
use crate::error::{Error, Result};
use crate::feasibility::{FeasibilityTable, Mixing};
use crate::io::embeddings::save_embeddings;
use crate::io::report::save_json;
use crate::io::{save_features, save_manifest};
use crate::space::{CompositionSpace, Dataset, Pair, Sample, Split, Vocabulary, WorldMode};

const COVERAGE_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_states: usize,
    pub n_objects: usize,
    /// Fraction of cluster blocks (hence of pairs, up to rounding) that are feasible.
    pub feasible_fraction: f64,
    /// Fraction of feasible pairs that are seen in training.
    pub seen_fraction: f64,
    /// Training samples per seen pair.
    pub samples_per_seen: usize,
    /// Samples per pair in each evaluation split.
    pub samples_per_unseen_test: usize,
    pub noise_sigma: f64,
    pub d_feature: usize,
    /// Primitives per cluster.
    pub cluster_size: usize,
    /// Distance of a prototype from its cluster centre; below `1/sqrt(2)`.
    pub spread: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_states: 12,
            n_objects: 15,
            feasible_fraction: 0.6,
            seen_fraction: 0.4,
            samples_per_seen: 30,
            samples_per_unseen_test: 10,
            noise_sigma: 0.3,
            d_feature: 32,
            cluster_size: 3,
            spread: 0.5,
            seed: 0,
        }
    }
}

impl GenConfig {
    fn clusters(&self) -> (usize, usize) {
        (self.n_states.div_ceil(self.cluster_size), self.n_objects.div_ceil(self.cluster_size))
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_states < 2 || self.n_objects < 2 {
            return bad("need at least 2 states and 2 objects".into());
        }
        for (name, f) in [("feasible_fraction", self.feasible_fraction), ("seen_fraction", self.seen_fraction)] {
            if !(f > 0.0 && f <= 1.0) {
                return bad(format!("{name} must lie in (0, 1]"));
            }
        }
        if self.samples_per_seen == 0 || self.samples_per_unseen_test == 0 {
            return bad("sample counts must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and non-negative".into());
        }
        if self.cluster_size == 0 {
            return bad("cluster_size must be positive".into());
        }
        if !(self.spread > 0.0 && self.spread < std::f64::consts::FRAC_1_SQRT_2) {
            return bad("spread must lie in (0, 1/sqrt(2))".into());
        }
        let (ks, ko) = self.clusters();
        if self.d_feature < ks + ko + 2 {
            return bad(format!("d_feature must be at least {} for {ks} + {ko} clusters", ks + ko + 2));
        }
        Ok(())
    }
}

/// The planted feasible set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Target-order flags over the open-world space.
    pub feasible: Vec<bool>,
    pub state_cluster: Vec<usize>,
    pub object_cluster: Vec<usize>,
    /// Whether the seen pairs cover every row and column of every feasible
    /// block. Without the cover, noiseless feasibility need not separate the
    /// feasible set.
    pub block_cover: bool,
}

impl GroundTruth {
    pub fn distractors(&self) -> impl Iterator<Item = usize> + '_ {
        self.feasible.iter().enumerate().filter(|(_, &f)| !f).map(|(i, _)| i)
    }

    /// The true feasible set as a ranking: 1 for feasible pairs, -1 for
    /// distractors. Any threshold in [-1, 1) recovers the set as a hard mask.
    pub fn as_ranking(&self, space: &CompositionSpace) -> Result<FeasibilityTable> {
        if self.feasible.len() != space.len() {
            return Err(Error::LengthMismatch {
                expected: space.len(),
                actual: self.feasible.len(),
            });
        }
        Ok(FeasibilityTable {
            rho: self.feasible.iter().map(|&f| if f { 1.0 } else { -1.0 }).collect(),
            rho_state: vec![None; space.len()],
            rho_obj: vec![None; space.len()],
            mixing: Mixing::default(),
            epoch_tag: 0,
        })
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub space: CompositionSpace,
    pub dataset: Dataset,
    pub features: Array2<f64>,
    pub embeddings: PrimitiveTable,
    pub truth: GroundTruth,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn random_unit<R: Rng>(dim: usize, rng: &mut R) -> Array1<f64> {
    loop {
        let v: Array1<f64> = Array1::from_shape_simple_fn(dim, || StandardNormal.sample(rng));
        let n = v.dot(&v).sqrt();
        if n > 1e-6 {
            return v / n;
        }
    }
}

fn prototypes<R: Rng>(n: usize, cluster_of: &[usize], centre_offset: usize, cfg: &GenConfig, rng: &mut R) -> Array2<f64> {
    let (ks, ko) = cfg.clusters();
    let residual = ks + ko;
    let mut out = Array2::zeros((n, cfg.d_feature));
    for i in 0..n {
        out[[i, centre_offset + cluster_of[i]]] = 1.0;
        let u = random_unit(cfg.d_feature - residual, rng);
        out.row_mut(i).slice_mut(ndarray::s![residual..]).assign(&(u * cfg.spread));
    }
    out
}

/// Feasible cluster blocks: the top-affinity ones, resampled until every
/// state and object cluster has at least one.
fn feasible_blocks<R: Rng>(ks: usize, ko: usize, fraction: f64, rng: &mut R) -> Result<Vec<Vec<bool>>> {
    let n_blocks = ((fraction * (ks * ko) as f64).round() as usize).clamp(ks.max(ko), ks * ko);
    for _ in 0..COVERAGE_ATTEMPTS {
        let a: Vec<f64> = (0..ks * ko).map(|_| StandardNormal.sample(rng)).collect();
        let mut order: Vec<usize> = (0..ks * ko).collect();
        order.sort_by(|&x, &y| a[y].total_cmp(&a[x]).then(x.cmp(&y)));
        let mut blocks = vec![vec![false; ko]; ks];
        for &b in &order[..n_blocks] {
            blocks[b / ko][b % ko] = true;
        }
        let rows_ok = blocks.iter().all(|r| r.iter().any(|&f| f));
        let cols_ok = (0..ko).all(|c| blocks.iter().any(|r| r[c]));
        if rows_ok && cols_ok {
            return Ok(blocks);
        }
    }
    Err(Error::InfeasibleConfig("no block layout covers every cluster".into()))
}

/// Seen pairs covering each row and column of every feasible block, topped up
/// at random to the requested count. Falls back to plain primitive coverage
/// when the block cover alone exceeds the budget.
fn seen_pairs<R: Rng>(
    feasible: &[Pair],
    state_members: &[Vec<usize>],
    object_members: &[Vec<usize>],
    blocks: &[Vec<bool>],
    budget: usize,
    rng: &mut R,
) -> Result<(Vec<Pair>, bool)> {
    let n_states: usize = state_members.iter().map(Vec::len).sum();
    let n_objects: usize = object_members.iter().map(Vec::len).sum();
    let mut cover = Vec::new();
    for (cs, row) in blocks.iter().enumerate() {
        for (co, _) in row.iter().enumerate().filter(|(_, &f)| f) {
            let mut ss = state_members[cs].clone();
            let mut oo = object_members[co].clone();
            ss.shuffle(rng);
            oo.shuffle(rng);
            let k = ss.len().max(oo.len());
            cover.extend((0..k).map(|i| Pair::new(ss[i % ss.len()], oo[i % oo.len()])));
        }
    }
    if cover.len() <= budget {
        cover.sort_unstable();
        let mut rest: Vec<Pair> = feasible.iter().filter(|p| cover.binary_search(p).is_err()).copied().collect();
        rest.shuffle(rng);
        cover.extend(rest.into_iter().take(budget - cover.len()));
        cover.sort_unstable();
        return Ok((cover, true));
    }
    for _ in 0..COVERAGE_ATTEMPTS {
        let mut pick: Vec<Pair> = feasible.choose_multiple(rng, budget).copied().collect();
        let mut s_cov = vec![false; n_states];
        let mut o_cov = vec![false; n_objects];
        for p in &pick {
            s_cov[p.state] = true;
            o_cov[p.object] = true;
        }
        if s_cov.iter().all(|&c| c) && o_cov.iter().all(|&c| c) {
            pick.sort_unstable();
            return Ok((pick, false));
        }
    }
    Err(Error::InfeasibleConfig(format!(
        "{budget} seen pairs cannot cover all {n_states} states and {n_objects} objects"
    )))
}

pub fn generate_synthetic(cfg: &GenConfig) -> Result<SynthData> {
    cfg.check()?;
    let (ks, ko) = cfg.clusters();
    let state_cluster: Vec<usize> = (0..cfg.n_states).map(|i| i / cfg.cluster_size).collect();
    let object_cluster: Vec<usize> = (0..cfg.n_objects).map(|i| i / cfg.cluster_size).collect();
    let members = |cluster_of: &[usize], k: usize| -> Vec<Vec<usize>> {
        (0..k).map(|c| (0..cluster_of.len()).filter(|&i| cluster_of[i] == c).collect()).collect()
    };
    let state_members = members(&state_cluster, ks);
    let object_members = members(&object_cluster, ko);

    let mut rng = stream_rng(cfg.seed, 0);
    let state_protos = prototypes(cfg.n_states, &state_cluster, 0, cfg, &mut rng);
    let object_protos = prototypes(cfg.n_objects, &object_cluster, ks, cfg, &mut rng);

    let blocks = feasible_blocks(ks, ko, cfg.feasible_fraction, &mut stream_rng(cfg.seed, 1))?;
    let all: Vec<Pair> = (0..cfg.n_states)
        .flat_map(|s| (0..cfg.n_objects).map(move |o| Pair::new(s, o)))
        .collect();
    let feasible_flags: Vec<bool> = all
        .iter()
        .map(|p| blocks[state_cluster[p.state]][object_cluster[p.object]])
        .collect();
    let feasible: Vec<Pair> = all.iter().zip(&feasible_flags).filter(|(_, &f)| f).map(|(p, _)| *p).collect();

    let budget = ((cfg.seen_fraction * feasible.len() as f64).round() as usize).clamp(1, feasible.len());
    let mut rng = stream_rng(cfg.seed, 2);
    let (seen, block_cover) = seen_pairs(
        &feasible,
        &state_members,
        &object_members,
        &blocks,
        budget,
        &mut rng,
    )?;

    let names = |prefix: &str, n: usize| -> Vec<String> { (0..n).map(|i| format!("{prefix}{i:02}")).collect() };
    let vocab = Vocabulary::new(names("s", cfg.n_states), names("o", cfg.n_objects))?;
    let space = CompositionSpace::from_indices(vocab, seen.clone(), None, WorldMode::OpenWorld)?;

    // unseen feasible pairs go half to validation, half to test
    let mut unseen: Vec<Pair> = feasible.iter().filter(|p| seen.binary_search(p).is_err()).copied().collect();
    unseen.shuffle(&mut rng);
    let n_val = unseen.len() / 2;
    let (val_unseen, test_unseen) = unseen.split_at(n_val);
    let mut val_unseen = val_unseen.to_vec();
    let mut test_unseen = test_unseen.to_vec();
    val_unseen.sort_unstable();
    test_unseen.sort_unstable();

    let mut labels: Vec<(Pair, Split)> = Vec::new();
    for &p in &seen {
        labels.extend(std::iter::repeat_n((p, Split::Train), cfg.samples_per_seen));
    }
    for (split, extra) in [(Split::Val, &val_unseen), (Split::Test, &test_unseen)] {
        let mut pairs: Vec<Pair> = seen.iter().chain(extra.iter()).copied().collect();
        pairs.sort_unstable();
        for p in pairs {
            labels.extend(std::iter::repeat_n((p, split), cfg.samples_per_unseen_test));
        }
    }

    let mut rng = stream_rng(cfg.seed, 3);
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("checked sigma");
    let mut features = Array2::zeros((labels.len(), cfg.d_feature));
    let mut samples = Vec::with_capacity(labels.len());
    for (row, &(pair, split)) in labels.iter().enumerate() {
        let mut f = &state_protos.row(pair.state) + &object_protos.row(pair.object);
        // Rounded to f32 so the in-memory data equals what the feature store holds.
        f.mapv_inplace(|v| (v + noise.sample(&mut rng)) as f32 as f64);
        features.row_mut(row).assign(&f);
        samples.push(Sample {
            feature_row: row,
            pair,
            split,
        });
    }

    let mut rng = stream_rng(cfg.seed, 4);
    let emb_noise = Normal::new(0.0, cfg.noise_sigma / (cfg.d_feature as f64).sqrt()).expect("checked sigma");
    let mut jitter = |protos: &Array2<f64>| protos.mapv(|v| v + emb_noise.sample(&mut rng));
    let embeddings = PrimitiveTable::new(jitter(&state_protos), jitter(&object_protos))?;

    Ok(SynthData {
        space,
        dataset: Dataset::new(samples),
        features,
        embeddings,
        truth: GroundTruth {
            feasible: feasible_flags,
            state_cluster,
            object_cluster,
            block_cover,
        },
    })
}

/// File names used by [`write_synthetic`].
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FEATURES_FILE: &str = "features.czsf";
pub const EMBEDDINGS_FILE: &str = "embeddings.txt";
pub const TRUTH_FILE: &str = "truth.json";

/// Writes manifest, features, embeddings, and ground truth into `dir`.
pub fn write_synthetic(data: &SynthData, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    save_manifest(dir.join(MANIFEST_FILE), &data.space, &data.dataset)?;
    save_features(dir.join(FEATURES_FILE), &data.features)?;
    let vocab = data.space.vocab();
    let rows = vocab
        .states()
        .iter()
        .zip(data.embeddings.states.rows())
        .chain(vocab.objects().iter().zip(data.embeddings.objects.rows()))
        .map(|(n, r)| (n.as_str(), r));
    save_embeddings(dir.join(EMBEDDINGS_FILE), rows)?;
    save_json(dir.join(TRUTH_FILE), &data.truth)
}

pub fn load_truth(path: impl AsRef<Path>) -> Result<GroundTruth> {
    let path = path.as_ref();
    let text = crate::io::read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, format!("line {}, column {}", e.line(), e.column()), e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feasibility::{feasibility_scores, Mixing};

    #[test]
    fn default_config_covers_every_primitive() {
        let data = generate_synthetic(&GenConfig::default()).unwrap();
        assert_eq!(data.space.len(), 180);
        let mut s = [false; 12];
        let mut o = [false; 15];
        for p in data.space.seen_pairs() {
            s[p.state] = true;
            o[p.object] = true;
        }
        assert!(s.iter().all(|&c| c) && o.iter().all(|&c| c));
        let n_feasible = data.truth.feasible.iter().filter(|&&f| f).count();
        assert_eq!(n_feasible, 12 * 9);
        assert_eq!(data.space.n_seen(), 43);
        assert!(data.dataset.validate(&data.space, data.features.nrows()).is_empty());
    }

    #[test]
    fn fully_feasible_has_no_distractors() {
        let cfg = GenConfig {
            feasible_fraction: 1.0,
            ..GenConfig::default()
        };
        let data = generate_synthetic(&cfg).unwrap();
        assert_eq!(data.truth.distractors().count(), 0);
    }

    #[test]
    fn seen_and_evaluation_labels_are_feasible() {
        let data = generate_synthetic(&GenConfig::default()).unwrap();
        for s in &data.dataset.samples {
            assert!(data.truth.feasible[data.space.index_of(s.pair).unwrap()]);
        }
        assert!(data.dataset.has_split(Split::Val) && data.dataset.has_split(Split::Test));
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic(&GenConfig::default()).unwrap();
        let b = generate_synthetic(&GenConfig::default()).unwrap();
        assert_eq!(a.features, b.features);
        assert_eq!(a.embeddings, b.embeddings);
        assert_eq!(a.dataset, b.dataset);
        let c = generate_synthetic(&GenConfig { seed: 1, ..GenConfig::default() }).unwrap();
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn noiseless_embeddings_separate_the_feasible_set() {
        for seed in 0..5 {
            let cfg = GenConfig {
                noise_sigma: 0.0,
                seed,
                ..GenConfig::default()
            };
            let data = generate_synthetic(&cfg).unwrap();
            let feas = feasibility_scores(&data.embeddings, &data.space, Mixing::Avg, 0).unwrap();
            let unseen = (0..data.space.len()).filter(|&i| !data.space.is_seen(i));
            let (good, bad): (Vec<usize>, Vec<usize>) = unseen.partition(|&i| data.truth.feasible[i]);
            let lowest_good = good.iter().map(|&i| feas.rho[i]).fold(f64::INFINITY, f64::min);
            let highest_bad = bad.iter().map(|&i| feas.rho[i]).fold(f64::NEG_INFINITY, f64::max);
            assert!(lowest_good > highest_bad, "seed {seed}: {lowest_good} vs {highest_bad}");
        }
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            GenConfig { n_states: 1, ..GenConfig::default() },
            GenConfig { feasible_fraction: 0.0, ..GenConfig::default() },
            GenConfig { seen_fraction: 1.5, ..GenConfig::default() },
            GenConfig { d_feature: 4, ..GenConfig::default() },
            GenConfig { spread: 0.8, ..GenConfig::default() },
        ];
        for cfg in bad {
            assert!(matches!(generate_synthetic(&cfg), Err(Error::InvalidConfig(_))), "{cfg:?}");
        }
    }

    #[test]
    fn tiny_budget_falls_back_or_fails() {
        // one seen pair cannot cover two states
        let cfg = GenConfig {
            n_states: 2,
            n_objects: 2,
            cluster_size: 1,
            feasible_fraction: 0.5,
            seen_fraction: 0.1,
            ..GenConfig::default()
        };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::InfeasibleConfig(_))));
    }
}
