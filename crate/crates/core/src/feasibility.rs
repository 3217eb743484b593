//! Feasibility of unseen compositions from primitive similarities.
//!
//! The object branch of `(s, o)` is the largest cosine between `o` and any
//! object seen with `s` in training; the state branch mirrors it over states
//! seen with `o`. Seen compositions score exactly 1. A mixing function merges
//! the two branches.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::embed::{cosine, PrimitiveTable};
use crate::error::{Error, Result};
use crate::eval::{evaluate, ScoreMatrix};
use crate::space::{CompositionSpace, Pair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mixing {
    #[default]
    Avg,
    Max,
    StateOnly,
    ObjOnly,
}

impl fmt::Display for Mixing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mixing::Avg => "avg",
            Mixing::Max => "max",
            Mixing::StateOnly => "state_only",
            Mixing::ObjOnly => "obj_only",
        })
    }
}

impl std::str::FromStr for Mixing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg" => Ok(Mixing::Avg),
            "max" => Ok(Mixing::Max),
            "state_only" => Ok(Mixing::StateOnly),
            "obj_only" => Ok(Mixing::ObjOnly),
            other => Err(Error::InvalidConfig(format!("unknown mixing `{other}`"))),
        }
    }
}

impl Mixing {
    /// Merges branch values; `None` marks a branch with empty support.
    pub fn mix(self, state: Option<f64>, obj: Option<f64>) -> f64 {
        let (state, obj) = match self {
            Mixing::StateOnly => (state, None),
            Mixing::ObjOnly => (None, obj),
            _ => (state, obj),
        };
        match (state, obj) {
            (Some(x), Some(y)) => match self {
                Mixing::Max => x.max(y),
                _ => (x + y) / 2.0,
            },
            (Some(x), None) | (None, Some(x)) => x,
            (None, None) => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityTable {
    pub rho: Vec<f64>,
    pub rho_state: Vec<Option<f64>>,
    pub rho_obj: Vec<Option<f64>>,
    pub mixing: Mixing,
    pub epoch_tag: usize,
}

impl FeasibilityTable {
    pub fn len(&self) -> usize {
        self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }

    /// Feasibility values of the unseen target compositions, in target order.
    pub fn unseen_values(&self, space: &CompositionSpace) -> Vec<f64> {
        self.rho
            .iter()
            .zip(space.seen_flags())
            .filter(|(_, &seen)| !seen)
            .map(|(&r, _)| r)
            .collect()
    }
}

/// Objects seen with `state` in training.
pub fn state_support(space: &CompositionSpace, state: usize) -> Result<Vec<usize>> {
    check(state, space.vocab().n_states())?;
    Ok(space.seen_pairs().filter(|p| p.state == state).map(|p| p.object).collect())
}

/// States seen with `object` in training.
pub fn object_support(space: &CompositionSpace, object: usize) -> Result<Vec<usize>> {
    check(object, space.vocab().n_objects())?;
    Ok(space.seen_pairs().filter(|p| p.object == object).map(|p| p.state).collect())
}

fn check(index: usize, len: usize) -> Result<()> {
    if index >= len {
        return Err(Error::IndexOutOfRange { index, len });
    }
    Ok(())
}

fn is_seen(space: &CompositionSpace, pair: Pair) -> bool {
    space.index_of(pair).is_some_and(|i| space.is_seen(i))
}

/// Object-branch feasibility, or `None` when `state` has no seen objects.
pub fn rho_obj(
    primitives: &PrimitiveTable,
    space: &CompositionSpace,
    state: usize,
    object: usize,
) -> Result<Option<f64>> {
    let support = state_support(space, state)?;
    let target = primitives.object(object)?;
    if is_seen(space, Pair::new(state, object)) {
        return Ok(Some(1.0));
    }
    max_similarity(support.iter().map(|&o| cosine(target, primitives.object(o)?)))
}

/// State-branch feasibility, or `None` when `object` has no seen states.
pub fn rho_state(
    primitives: &PrimitiveTable,
    space: &CompositionSpace,
    state: usize,
    object: usize,
) -> Result<Option<f64>> {
    let support = object_support(space, object)?;
    let target = primitives.state(state)?;
    if is_seen(space, Pair::new(state, object)) {
        return Ok(Some(1.0));
    }
    max_similarity(support.iter().map(|&s| cosine(target, primitives.state(s)?)))
}

fn max_similarity(values: impl Iterator<Item = Result<f64>>) -> Result<Option<f64>> {
    let mut best: Option<f64> = None;
    for v in values {
        let v = v?;
        best = Some(best.map_or(v, |b| b.max(v)));
    }
    Ok(best)
}

/// Pairwise cosines between rows of one primitive matrix, computed once.
fn similarity_table(rows: &ndarray::Array2<f64>) -> Result<Vec<Vec<f64>>> {
    let n = rows.nrows();
    let mut table = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            table[i][j] = cosine(rows.row(i), rows.row(j))?;
        }
    }
    Ok(table)
}

/// Feasibility of every target composition, tagged with the producing epoch.
pub fn feasibility_scores(
    primitives: &PrimitiveTable,
    space: &CompositionSpace,
    mixing: Mixing,
    epoch_tag: usize,
) -> Result<FeasibilityTable> {
    let vocab = space.vocab();
    if primitives.states.nrows() != vocab.n_states() || primitives.objects.nrows() != vocab.n_objects() {
        return Err(Error::ShapeMismatch("primitive table vs vocabulary".into()));
    }
    let obj_sim = similarity_table(&primitives.objects)?;
    let state_sim = similarity_table(&primitives.states)?;
    let objects_of: Vec<Vec<usize>> = (0..vocab.n_states())
        .map(|s| state_support(space, s))
        .collect::<Result<_>>()?;
    let states_of: Vec<Vec<usize>> = (0..vocab.n_objects())
        .map(|o| object_support(space, o))
        .collect::<Result<_>>()?;

    let branch = |support: &[usize], sims: &[f64]| -> Option<f64> {
        support.iter().map(|&k| sims[k]).reduce(f64::max)
    };

    let n = space.len();
    let mut table = FeasibilityTable {
        rho: Vec::with_capacity(n),
        rho_state: Vec::with_capacity(n),
        rho_obj: Vec::with_capacity(n),
        mixing,
        epoch_tag,
    };
    for (idx, p) in space.target().iter().enumerate() {
        let (rs, ro) = if space.is_seen(idx) {
            (Some(1.0), Some(1.0))
        } else {
            (
                branch(&states_of[p.object], &state_sim[p.state]),
                branch(&objects_of[p.state], &obj_sim[p.object]),
            )
        };
        table.rho_state.push(rs);
        table.rho_obj.push(ro);
        table.rho.push(if space.is_seen(idx) { 1.0 } else { mixing.mix(rs, ro) });
    }
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskConfig {
    pub tau: f64,
    pub keep_seen: bool,
}

impl MaskConfig {
    pub fn new(tau: f64) -> Result<Self> {
        if !(-1.0..=1.0).contains(&tau) {
            return Err(Error::InvalidConfig(format!("tau {tau} outside [-1, 1]")));
        }
        Ok(MaskConfig { tau, keep_seen: true })
    }
}

/// Admissible compositions: every seen one plus unseen ones with `rho > tau`.
pub fn hard_mask(feas: &FeasibilityTable, space: &CompositionSpace, cfg: MaskConfig) -> Vec<bool> {
    feas.rho
        .iter()
        .zip(space.seen_flags())
        .map(|(&r, &seen)| (cfg.keep_seen && seen) || r > cfg.tau)
        .collect()
}

/// Linear-interpolation quantile of an unsorted sample.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    quantile_sorted(&sorted, q)
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return -1.0;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Masks keeping unseen compositions above the median feasibility, and the
/// complementary mask keeping those at or below it. Seen compositions stay in both.
pub fn median_masks(feas: &FeasibilityTable, space: &CompositionSpace) -> (Vec<bool>, Vec<bool>) {
    let median = quantile(&feas.unseen_values(space), 0.5);
    let above = feas
        .rho
        .iter()
        .zip(space.seen_flags())
        .map(|(&r, &seen)| seen || r > median)
        .collect();
    let below = feas
        .rho
        .iter()
        .zip(space.seen_flags())
        .map(|(&r, &seen)| seen || r <= median)
        .collect();
    (above, below)
}

#[derive(Debug, Clone, PartialEq)]
pub enum CandidatePolicy {
    /// `steps + 1` evenly spaced quantiles of the unseen feasibility values, plus -1.
    Quantiles { steps: usize },
    Explicit(Vec<f64>),
}

impl Default for CandidatePolicy {
    fn default() -> Self {
        CandidatePolicy::Quantiles { steps: 20 }
    }
}

impl CandidatePolicy {
    pub fn candidates(&self, feas: &FeasibilityTable, space: &CompositionSpace) -> Vec<f64> {
        match self {
            CandidatePolicy::Quantiles { steps } => {
                let mut unseen = feas.unseen_values(space);
                unseen.sort_by(f64::total_cmp);
                let steps = (*steps).max(1);
                std::iter::once(-1.0)
                    .chain((0..=steps).map(|i| quantile_sorted(&unseen, i as f64 / steps as f64)))
                    .collect()
            }
            CandidatePolicy::Explicit(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdChoice {
    pub tau: f64,
    pub auc: f64,
    /// Every evaluated `(tau, auc)`, in candidate order.
    pub evaluated: Vec<(f64, f64)>,
}

/// Picks the threshold maximising validation AUC under hard masking; ties
/// resolve to the smaller threshold.
pub fn tune_threshold(
    feas: &FeasibilityTable,
    val_scores: &ScoreMatrix,
    space: &CompositionSpace,
    policy: &CandidatePolicy,
) -> Result<ThresholdChoice> {
    if feas.len() != space.len() || val_scores.n_compositions() != space.len() {
        return Err(Error::LengthMismatch {
            expected: space.len(),
            actual: feas.len().min(val_scores.n_compositions()),
        });
    }
    let mut evaluated = Vec::new();
    let mut best: Option<(f64, f64)> = None;
    for tau in policy.candidates(feas, space) {
        let mask = hard_mask(feas, space, MaskConfig { tau, keep_seen: true });
        let auc = evaluate(val_scores, Some(&mask))?.auc;
        evaluated.push((tau, auc));
        let better = match best {
            None => true,
            Some((bt, ba)) => auc > ba || (auc == ba && tau < bt),
        };
        if better {
            best = Some((tau, auc));
        }
    }
    let (tau, auc) = best.ok_or_else(|| Error::InvalidConfig("no threshold candidates".into()))?;
    Ok(ThresholdChoice { tau, auc, evaluated })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{Vocabulary, WorldMode};
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn names(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    fn space_with(ns: usize, no: usize, seen: &[(usize, usize)]) -> CompositionSpace {
        let vocab = Vocabulary::new(names("s", ns), names("o", no)).unwrap();
        let seen = seen.iter().map(|&(s, o)| Pair::new(s, o)).collect();
        CompositionSpace::from_indices(vocab, seen, None, WorldMode::OpenWorld).unwrap()
    }

    fn random_table(ns: usize, no: usize, d: usize, seed: u64) -> PrimitiveTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let states = Array2::from_shape_simple_fn((ns, d), || StandardNormal.sample(&mut rng));
        let objects = Array2::from_shape_simple_fn((no, d), || StandardNormal.sample(&mut rng));
        PrimitiveTable::new(states, objects).unwrap()
    }

    #[test]
    fn support_sets() {
        let space = space_with(2, 3, &[(0, 0), (0, 1), (1, 2)]);
        assert_eq!(state_support(&space, 0).unwrap(), vec![0, 1]);
        assert_eq!(object_support(&space, 0).unwrap(), vec![0]);
        assert_eq!(state_support(&space, 1).unwrap(), vec![2]);
        assert!(matches!(state_support(&space, 2), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn branch_examples() {
        // objects o0=(1,0), o1=(0.8,0.6): cos = 0.8
        // states s0=(1,0), s1=(-0.25, sqrt(1-0.0625)): cos = -0.25
        let table = PrimitiveTable::new(
            array![[1.0, 0.0], [-0.25, (1.0f64 - 0.0625).sqrt()]],
            array![[1.0, 0.0], [0.8, 0.6]],
        )
        .unwrap();
        let space = space_with(2, 2, &[(0, 0), (1, 1)]);
        assert_eq!(rho_obj(&table, &space, 0, 0).unwrap(), Some(1.0));
        assert_eq!(rho_state(&table, &space, 1, 1).unwrap(), Some(1.0));
        let ro = rho_obj(&table, &space, 0, 1).unwrap().unwrap();
        assert!((ro - 0.8).abs() < 1e-12);
        // state branch of (s0, o1): only s1 is seen with o1
        let rs = rho_state(&table, &space, 0, 1).unwrap().unwrap();
        assert!((rs + 0.25).abs() < 1e-12);
    }

    #[test]
    fn mixing_examples() {
        assert!((Mixing::Avg.mix(Some(0.2), Some(0.6)) - 0.4).abs() < 1e-15);
        assert_eq!(Mixing::Max.mix(Some(0.2), Some(0.6)), 0.6);
        assert_eq!(Mixing::StateOnly.mix(Some(0.2), Some(0.6)), 0.2);
        assert_eq!(Mixing::ObjOnly.mix(Some(0.2), Some(0.6)), 0.6);
        assert_eq!(Mixing::Avg.mix(None, Some(0.6)), 0.6);
        assert_eq!(Mixing::Max.mix(Some(-0.3), None), -0.3);
        assert_eq!(Mixing::Avg.mix(None, None), -1.0);
        assert_eq!(Mixing::StateOnly.mix(None, Some(0.6)), -1.0);
    }

    #[test]
    fn seen_compositions_score_one() {
        let table = random_table(4, 5, 6, 1);
        let space = space_with(4, 5, &[(0, 0), (1, 1), (2, 2), (3, 3), (3, 4), (0, 4)]);
        for mixing in [Mixing::Avg, Mixing::Max, Mixing::StateOnly, Mixing::ObjOnly] {
            let f = feasibility_scores(&table, &space, mixing, 0).unwrap();
            for &i in space.seen_indices() {
                assert_eq!(f.rho[i], 1.0);
            }
            assert!(f.rho.iter().all(|r| (-1.0..=1.0).contains(r)));
        }
    }

    #[test]
    fn mask_extremes() {
        let table = random_table(4, 4, 5, 2);
        let space = space_with(4, 4, &[(0, 0), (1, 1), (2, 2), (3, 3)]);
        let f = feasibility_scores(&table, &space, Mixing::Avg, 0).unwrap();
        let top = hard_mask(&f, &space, MaskConfig::new(1.0).unwrap());
        assert_eq!(top, space.seen_flags());
        let all = hard_mask(&f, &space, MaskConfig::new(-1.0).unwrap());
        assert!(all.iter().zip(&f.rho).all(|(&m, &r)| m == (r > -1.0 || r == 1.0)));
        assert!(all.iter().all(|&m| m));
        assert!(MaskConfig::new(1.5).is_err());
    }

    #[test]
    fn exact_minus_one_is_masked() {
        let space = space_with(2, 2, &[(0, 0), (1, 1)]);
        let f = FeasibilityTable {
            rho: vec![1.0, -1.0, 0.2, 1.0],
            rho_state: vec![None; 4],
            rho_obj: vec![None; 4],
            mixing: Mixing::Avg,
            epoch_tag: 0,
        };
        assert_eq!(hard_mask(&f, &space, MaskConfig::new(-1.0).unwrap()), vec![true, false, true, true]);
    }

    #[test]
    fn median_mask_matches_sort_oracle() {
        let table = random_table(6, 7, 5, 3);
        let seen: Vec<(usize, usize)> = (0..7).map(|o| (o % 6, o)).collect();
        let space = space_with(6, 7, &seen);
        let f = feasibility_scores(&table, &space, Mixing::Avg, 0).unwrap();
        let mut unseen = f.unseen_values(&space);
        unseen.sort_by(f64::total_cmp);
        let n = unseen.len();
        let median = if n % 2 == 1 {
            unseen[n / 2]
        } else {
            (unseen[n / 2 - 1] + unseen[n / 2]) / 2.0
        };
        let mask = hard_mask(&f, &space, MaskConfig::new(median).unwrap());
        let (above, below) = median_masks(&f, &space);
        assert_eq!(mask, above);
        let kept_unseen = (0..space.len()).filter(|&i| !space.is_seen(i) && mask[i]).count();
        assert_eq!(kept_unseen, unseen.iter().filter(|&&r| r > median).count());
        for i in 0..space.len() {
            if !space.is_seen(i) {
                assert_ne!(above[i], below[i]);
            }
        }
    }

    #[test]
    fn quantile_candidates_shape() {
        let space = space_with(10, 21, &(0..21).map(|o| (o % 10, o)).collect::<Vec<_>>());
        let table = random_table(10, 21, 4, 5);
        let f = feasibility_scores(&table, &space, Mixing::Avg, 0).unwrap();
        assert_eq!(f.unseen_values(&space).len(), 189);
        let c = CandidatePolicy::default().candidates(&f, &space);
        assert_eq!(c.len(), 22);
        assert_eq!(c[0], -1.0);
    }

    #[test]
    fn perfect_model_keeps_everything() {
        let space = space_with(2, 2, &[(0, 0), (1, 1)]);
        let table = random_table(2, 2, 3, 7);
        let f = feasibility_scores(&table, &space, Mixing::Avg, 0).unwrap();
        let labels = vec![0, 1, 2, 3];
        let scores = Array2::from_shape_fn((4, 4), |(i, j)| if labels[i] == j { 1.0 } else { 0.0 });
        let val = ScoreMatrix::new(scores, labels, &space).unwrap();
        let choice = tune_threshold(&f, &val, &space, &CandidatePolicy::default()).unwrap();
        assert_eq!(choice.tau, -1.0);
        assert_eq!(choice.auc, 1.0);
        assert_eq!(choice.evaluated.len(), 22);
    }

    proptest! {
        #[test]
        fn masks_are_nested(seed in 0u64..500, t1 in -1.0f64..1.0, t2 in -1.0f64..1.0) {
            let table = random_table(4, 5, 3, seed);
            let space = space_with(4, 5, &[(0, 0), (1, 1), (2, 2), (3, 3), (0, 4)]);
            let f = feasibility_scores(&table, &space, Mixing::Avg, 0).unwrap();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let a = hard_mask(&f, &space, MaskConfig::new(lo).unwrap());
            let b = hard_mask(&f, &space, MaskConfig::new(hi).unwrap());
            prop_assert!(a.iter().zip(&b).all(|(&x, &y)| x || !y));
        }

        #[test]
        fn average_is_mean_of_branches(seed in 0u64..500) {
            let table = random_table(5, 4, 3, seed);
            let space = space_with(5, 4, &[(0, 0), (1, 1), (2, 2), (3, 3), (4, 0)]);
            let avg = feasibility_scores(&table, &space, Mixing::Avg, 0).unwrap();
            let st = feasibility_scores(&table, &space, Mixing::StateOnly, 0).unwrap();
            let ob = feasibility_scores(&table, &space, Mixing::ObjOnly, 0).unwrap();
            for i in 0..space.len() {
                prop_assert_eq!(avg.rho[i], (st.rho[i] + ob.rho[i]) / 2.0);
            }
            prop_assert_eq!(&avg, &feasibility_scores(&table, &space, Mixing::Avg, 0).unwrap());
        }
    }
}
