//! Primitive vocabularies, composition spaces, and dataset validation.
//!
//! Every score vector, mask, and feasibility table in the crate is indexed by
//! position in [`CompositionSpace::target`], which is always sorted state-major
//! (`state_idx * n_objects + object_idx` order for the open world).

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    states: Vec<String>,
    objects: Vec<String>,
}

impl Vocabulary {
    pub fn new<S: Into<String>>(
        states: impl IntoIterator<Item = S>,
        objects: impl IntoIterator<Item = S>,
    ) -> Result<Self> {
        let states = check_names(states.into_iter().map(Into::into).collect())?;
        let objects = check_names(objects.into_iter().map(Into::into).collect())?;
        Ok(Vocabulary { states, objects })
    }

    pub fn states(&self) -> &[String] {
        &self.states
    }

    pub fn objects(&self) -> &[String] {
        &self.objects
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn n_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn state_index(&self, name: &str) -> Result<usize> {
        self.states
            .iter()
            .position(|s| s == name)
            .ok_or_else(|| Error::UnknownPrimitive(name.to_owned()))
    }

    pub fn object_index(&self, name: &str) -> Result<usize> {
        self.objects
            .iter()
            .position(|o| o == name)
            .ok_or_else(|| Error::UnknownPrimitive(name.to_owned()))
    }
}

fn check_names(names: Vec<String>) -> Result<Vec<String>> {
    let mut seen = HashSet::new();
    names
        .into_iter()
        .map(|n| {
            let n = n.trim().to_owned();
            if n.is_empty() {
                return Err(Error::EmptyPrimitive);
            }
            if !seen.insert(n.clone()) {
                return Err(Error::DuplicatePrimitive(n));
            }
            Ok(n)
        })
        .collect()
}

/// A (state index, object index) composition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Pair {
    pub state: usize,
    pub object: usize,
}

impl Pair {
    pub fn new(state: usize, object: usize) -> Self {
        Pair { state, object }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorldMode {
    ClosedWorld,
    OpenWorld,
}

impl fmt::Display for WorldMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WorldMode::ClosedWorld => f.write_str("closed"),
            WorldMode::OpenWorld => f.write_str("open"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CompositionSpace {
    vocab: Vocabulary,
    mode: WorldMode,
    target: Vec<Pair>,
    seen_flags: Vec<bool>,
    seen_indices: Vec<usize>,
    // dense |states| x |objects| lookup into `target`
    lookup: Vec<Option<usize>>,
}

impl CompositionSpace {
    /// Builds a space from primitive names.
    ///
    /// In the open world the target is the full product of the vocabulary;
    /// in the closed world `target_pairs` must be given and contain every seen
    /// pair.
    pub fn build(
        vocab: Vocabulary,
        seen_pairs: &[(&str, &str)],
        target_pairs: Option<&[(&str, &str)]>,
        mode: WorldMode,
    ) -> Result<Self> {
        let resolve = |pairs: &[(&str, &str)]| -> Result<Vec<Pair>> {
            pairs
                .iter()
                .map(|(s, o)| Ok(Pair::new(vocab.state_index(s)?, vocab.object_index(o)?)))
                .collect()
        };
        let seen = resolve(seen_pairs)?;
        let target = match target_pairs {
            Some(t) => Some(resolve(t)?),
            None => None,
        };
        Self::from_indices(vocab, seen, target, mode)
    }

    pub fn from_indices(
        vocab: Vocabulary,
        seen: Vec<Pair>,
        target: Option<Vec<Pair>>,
        mode: WorldMode,
    ) -> Result<Self> {
        let (ns, no) = (vocab.n_states(), vocab.n_objects());
        let check = |p: &Pair| -> Result<()> {
            if p.state >= ns {
                return Err(Error::IndexOutOfRange { index: p.state, len: ns });
            }
            if p.object >= no {
                return Err(Error::IndexOutOfRange { index: p.object, len: no });
            }
            Ok(())
        };
        let dedup = |mut pairs: Vec<Pair>| -> Result<Vec<Pair>> {
            pairs.iter().try_for_each(check)?;
            pairs.sort_unstable();
            if let Some(w) = pairs.windows(2).find(|w| w[0] == w[1]) {
                return Err(Error::DuplicatePair(
                    vocab.states[w[0].state].clone(),
                    vocab.objects[w[0].object].clone(),
                ));
            }
            Ok(pairs)
        };
        let seen = dedup(seen)?;
        let target = match mode {
            WorldMode::OpenWorld => (0..ns)
                .flat_map(|s| (0..no).map(move |o| Pair::new(s, o)))
                .collect(),
            WorldMode::ClosedWorld => dedup(target.ok_or(Error::MissingTarget)?)?,
        };

        let mut lookup = vec![None; ns * no];
        for (i, p) in target.iter().enumerate() {
            lookup[p.state * no + p.object] = Some(i);
        }
        let mut seen_flags = vec![false; target.len()];
        let mut seen_indices = Vec::with_capacity(seen.len());
        for p in &seen {
            let idx = lookup[p.state * no + p.object].ok_or_else(|| {
                Error::SeenNotInTarget(
                    vocab.states[p.state].clone(),
                    vocab.objects[p.object].clone(),
                )
            })?;
            seen_flags[idx] = true;
            seen_indices.push(idx);
        }

        let mut state_cov = vec![false; ns];
        let mut object_cov = vec![false; no];
        for p in &seen {
            state_cov[p.state] = true;
            object_cov[p.object] = true;
        }
        if let Some(s) = state_cov.iter().position(|c| !c) {
            return Err(Error::UncoveredPrimitive(vocab.states[s].clone()));
        }
        if let Some(o) = object_cov.iter().position(|c| !c) {
            return Err(Error::UncoveredPrimitive(vocab.objects[o].clone()));
        }

        Ok(CompositionSpace {
            vocab,
            mode,
            target,
            seen_flags,
            seen_indices,
            lookup,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn mode(&self) -> WorldMode {
        self.mode
    }

    pub fn target(&self) -> &[Pair] {
        &self.target
    }

    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    /// Seen compositions in target order.
    pub fn seen_pairs(&self) -> impl Iterator<Item = Pair> + '_ {
        self.seen_indices.iter().map(|&i| self.target[i])
    }

    /// Target positions of the seen compositions, ascending.
    pub fn seen_indices(&self) -> &[usize] {
        &self.seen_indices
    }

    pub fn seen_flags(&self) -> &[bool] {
        &self.seen_flags
    }

    pub fn n_seen(&self) -> usize {
        self.seen_indices.len()
    }

    pub fn is_seen(&self, idx: usize) -> bool {
        self.seen_flags[idx]
    }

    pub fn index_of(&self, pair: Pair) -> Option<usize> {
        if pair.state >= self.vocab.n_states() || pair.object >= self.vocab.n_objects() {
            return None;
        }
        self.lookup[pair.state * self.vocab.n_objects() + pair.object]
    }

    /// Target index of a composition given by primitive names.
    pub fn composition_index(&self, state: &str, object: &str) -> Result<usize> {
        let not_in = || Error::NotInTarget(state.to_owned(), object.to_owned());
        let s = self.vocab.state_index(state).map_err(|_| not_in())?;
        let o = self.vocab.object_index(object).map_err(|_| not_in())?;
        self.index_of(Pair::new(s, o)).ok_or_else(not_in)
    }

    /// Inverse of [`composition_index`](Self::composition_index).
    pub fn composition_names(&self, idx: usize) -> Result<(&str, &str)> {
        let p = self.target.get(idx).ok_or(Error::IndexOutOfRange {
            index: idx,
            len: self.target.len(),
        })?;
        Ok((&self.vocab.states[p.state], &self.vocab.objects[p.object]))
    }

    /// Position of a seen composition inside the seen-only subset.
    pub fn seen_position(&self, pair: Pair) -> Option<usize> {
        let idx = self.index_of(pair)?;
        self.seen_indices.binary_search(&idx).ok()
    }

    /// The same vocabulary and seen set with the full product as target.
    pub fn to_open_world(&self) -> CompositionSpace {
        let seen = self.seen_pairs().collect();
        Self::from_indices(self.vocab.clone(), seen, None, WorldMode::OpenWorld)
            .expect("a valid space stays valid in the open world")
    }

    /// A closed-world space over the seen set plus `extra` compositions.
    pub fn to_closed_world(&self, extra: impl IntoIterator<Item = Pair>) -> CompositionSpace {
        let seen: Vec<Pair> = self.seen_pairs().collect();
        let mut target: Vec<Pair> = seen.iter().copied().chain(extra).collect();
        target.sort_unstable();
        target.dedup();
        Self::from_indices(self.vocab.clone(), seen, Some(target), WorldMode::ClosedWorld)
            .expect("extra pairs come from the same vocabulary")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sample {
    pub feature_row: usize,
    pub pair: Pair,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    TrainLabelUnseen,
    LabelNotInTarget,
    FeatureOutOfRange,
}

impl ViolationKind {
    pub fn code(self) -> &'static str {
        match self {
            ViolationKind::TrainLabelUnseen => "train-label-unseen",
            ViolationKind::LabelNotInTarget => "label-not-in-target",
            ViolationKind::FeatureOutOfRange => "feature-out-of-range",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Violation {
    pub sample: usize,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sample {}: {}", self.sample, self.kind.code())
    }
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Dataset { samples }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> + '_ {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn has_split(&self, split: Split) -> bool {
        self.samples.iter().any(|s| s.split == split)
    }

    /// Lists every broken dataset invariant; empty iff the dataset is valid.
    pub fn validate(&self, space: &CompositionSpace, n_feature_rows: usize) -> Vec<Violation> {
        let mut out = Vec::new();
        for (i, s) in self.samples.iter().enumerate() {
            match (s.split, space.index_of(s.pair)) {
                (Split::Train, Some(idx)) if space.is_seen(idx) => {}
                (Split::Train, _) => out.push(Violation {
                    sample: i,
                    kind: ViolationKind::TrainLabelUnseen,
                }),
                (_, None) => out.push(Violation {
                    sample: i,
                    kind: ViolationKind::LabelNotInTarget,
                }),
                _ => {}
            }
            if s.feature_row >= n_feature_rows {
                out.push(Violation {
                    sample: i,
                    kind: ViolationKind::FeatureOutOfRange,
                });
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab2() -> Vocabulary {
        Vocabulary::new(["s0", "s1"], ["o0", "o1"]).unwrap()
    }

    fn open2() -> CompositionSpace {
        CompositionSpace::build(vocab2(), &[("s0", "o0"), ("s1", "o1")], None, WorldMode::OpenWorld)
            .unwrap()
    }

    #[test]
    fn open_world_is_full_product() {
        let space = open2();
        assert_eq!(space.len(), 4);
        assert_eq!(space.n_seen(), 2);
        assert_eq!(space.seen_indices(), &[0, 3]);
    }

    #[test]
    fn uncovered_primitive_is_rejected() {
        let err = CompositionSpace::build(vocab2(), &[("s0", "o0")], None, WorldMode::OpenWorld)
            .unwrap_err();
        assert!(matches!(err, Error::UncoveredPrimitive(ref n) if n == "s1"));
    }

    #[test]
    fn unknown_and_duplicate_names() {
        assert!(matches!(
            CompositionSpace::build(vocab2(), &[("s9", "o0")], None, WorldMode::OpenWorld),
            Err(Error::UnknownPrimitive(_))
        ));
        assert!(matches!(
            Vocabulary::new(["a", "a"], ["b"]),
            Err(Error::DuplicatePrimitive(_))
        ));
        assert!(matches!(Vocabulary::new([" "], ["b"]), Err(Error::EmptyPrimitive)));
        // names are trimmed but case is kept
        let v = Vocabulary::new([" Wet "], ["dog"]).unwrap();
        assert_eq!(v.states(), &["Wet".to_owned()]);
    }

    #[test]
    fn closed_world_needs_seen_in_target() {
        let err = CompositionSpace::build(
            vocab2(),
            &[("s0", "o0"), ("s1", "o1")],
            Some(&[("s0", "o0"), ("s1", "o0")]),
            WorldMode::ClosedWorld,
        )
        .unwrap_err();
        assert!(matches!(err, Error::SeenNotInTarget(..)));
        assert!(matches!(
            CompositionSpace::build(vocab2(), &[("s0", "o0"), ("s1", "o1")], None, WorldMode::ClosedWorld),
            Err(Error::MissingTarget)
        ));
    }

    #[test]
    fn composition_index_examples() {
        let space = open2();
        assert_eq!(space.composition_index("s0", "o0").unwrap(), 0);
        assert_eq!(space.composition_index("s1", "o1").unwrap(), 3);

        let closed = CompositionSpace::build(
            vocab2(),
            &[("s0", "o0"), ("s1", "o1")],
            Some(&[("s0", "o0"), ("s1", "o1"), ("s0", "o1")]),
            WorldMode::ClosedWorld,
        )
        .unwrap();
        assert_eq!(closed.len(), 3);
        assert!(matches!(
            closed.composition_index("s1", "o0"),
            Err(Error::NotInTarget(..))
        ));
    }

    #[test]
    fn index_round_trip() {
        let v = Vocabulary::new(["a", "b", "c"], ["x", "y", "z", "w"]).unwrap();
        let space = CompositionSpace::build(
            v,
            &[("a", "x"), ("b", "y"), ("c", "z"), ("a", "w")],
            None,
            WorldMode::OpenWorld,
        )
        .unwrap();
        for i in 0..space.len() {
            let (s, o) = space.composition_names(i).unwrap();
            assert_eq!(space.composition_index(s, o).unwrap(), i);
        }
    }

    #[test]
    fn validation_report() {
        let space = open2();
        let ok = Dataset::new(vec![
            Sample { feature_row: 0, pair: Pair::new(0, 0), split: Split::Train },
            Sample { feature_row: 1, pair: Pair::new(0, 1), split: Split::Test },
        ]);
        assert!(ok.validate(&space, 2).is_empty());

        let bad_label = Dataset::new(vec![Sample {
            feature_row: 0,
            pair: Pair::new(1, 0),
            split: Split::Train,
        }]);
        let v = bad_label.validate(&space, 2);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind.code(), "train-label-unseen");

        let bad_row = Dataset::new(vec![Sample {
            feature_row: 2,
            pair: Pair::new(0, 0),
            split: Split::Val,
        }]);
        let v = bad_row.validate(&space, 2);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind.code(), "feature-out-of-range");
    }

    #[test]
    fn mit_states_shape() {
        let states: Vec<String> = (0..115).map(|i| format!("s{i}")).collect();
        let objects: Vec<String> = (0..245).map(|i| format!("o{i}")).collect();
        let vocab = Vocabulary::new(states, objects).unwrap();
        let seen: Vec<Pair> = (0..245).map(|o| Pair::new(o % 115, o)).collect();
        let space = CompositionSpace::from_indices(vocab, seen, None, WorldMode::OpenWorld).unwrap();
        assert_eq!(space.len(), 28175);
    }

    #[test]
    fn closed_world_conversion() {
        let space = open2();
        let closed = space.to_closed_world([Pair::new(1, 0)]);
        assert_eq!(closed.len(), 3);
        assert_eq!(closed.n_seen(), 2);
        assert_eq!(closed.to_open_world().len(), 4);
    }
}
