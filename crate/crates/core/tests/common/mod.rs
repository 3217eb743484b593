//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use compcos::embed::PrimitiveTable;
use compcos::eval::ScoreMatrix;
use compcos::feasibility::Mixing;
use compcos::space::{CompositionSpace, Vocabulary, WorldMode};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

/// Open-world space of random size with every primitive seen at least once.
pub fn random_space<R: Rng>(rng: &mut R, max_states: usize, max_objects: usize, max_pairs: usize) -> CompositionSpace {
    loop {
        let ns = rng.random_range(1..=max_states);
        let no = rng.random_range(1..=max_objects);
        if ns * no > max_pairs || ns * no < 2 {
            continue;
        }
        let mut seen = vec![vec![false; no]; ns];
        for row in seen.iter_mut() {
            row[rng.random_range(0..no)] = true;
        }
        for o in 0..no {
            seen[rng.random_range(0..ns)][o] = true;
        }
        let extra = rng.random_range(0.0..0.5);
        for row in seen.iter_mut() {
            for cell in row.iter_mut() {
                if rng.random_bool(extra) {
                    *cell = true;
                }
            }
        }
        let n_seen = seen.iter().flatten().filter(|&&b| b).count();
        if n_seen == ns * no {
            continue;
        }
        let states: Vec<String> = (0..ns).map(|i| format!("s{i}")).collect();
        let objects: Vec<String> = (0..no).map(|i| format!("o{i}")).collect();
        let mut pairs = Vec::new();
        for s in 0..ns {
            for o in 0..no {
                if seen[s][o] {
                    pairs.push((states[s].clone(), objects[o].clone()));
                }
            }
        }
        pairs.shuffle(rng);
        let refs: Vec<(&str, &str)> = pairs.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        let vocab = Vocabulary::new(states.clone(), objects.clone()).unwrap();
        return CompositionSpace::build(vocab, &refs, None, WorldMode::OpenWorld).unwrap();
    }
}

pub fn random_table<R: Rng>(rng: &mut R, space: &CompositionSpace, dim: usize) -> PrimitiveTable {
    let v = space.vocab();
    let mut draw = |n: usize| Array2::from_shape_simple_fn((n, dim), || rng.sample::<f64, _>(StandardNormal));
    PrimitiveTable::new(draw(v.n_states()), draw(v.n_objects())).unwrap()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
    }
    for x in a {
        na += x * x;
    }
    for x in b {
        nb += x * x;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// Feasibility by scanning the seen list for every target composition.
pub fn feasibility_oracle(table: &PrimitiveTable, space: &CompositionSpace, mixing: Mixing) -> Vec<f64> {
    let row = |m: &Array2<f64>, i: usize| m.row(i).to_vec();
    let mut out = Vec::with_capacity(space.len());
    for (idx, c) in space.target().iter().enumerate() {
        if space.is_seen(idx) {
            out.push(1.0);
            continue;
        }
        let mut obj_branch: Option<f64> = None;
        let mut state_branch: Option<f64> = None;
        for p in space.seen_pairs() {
            if p.state == c.state {
                let v = cos(&row(&table.objects, c.object), &row(&table.objects, p.object));
                obj_branch = Some(obj_branch.map_or(v, |b| b.max(v)));
            }
            if p.object == c.object {
                let v = cos(&row(&table.states, c.state), &row(&table.states, p.state));
                state_branch = Some(state_branch.map_or(v, |b| b.max(v)));
            }
        }
        let rho = match mixing {
            Mixing::StateOnly => state_branch.unwrap_or(-1.0),
            Mixing::ObjOnly => obj_branch.unwrap_or(-1.0),
            Mixing::Avg | Mixing::Max => match (state_branch, obj_branch) {
                (Some(a), Some(b)) if mixing == Mixing::Avg => (a + b) / 2.0,
                (Some(a), Some(b)) => a.max(b),
                (Some(a), None) | (None, Some(a)) => a,
                (None, None) => -1.0,
            },
        };
        out.push(rho);
    }
    out
}

/// Middle value of the sorted list, or the mean of the two middle values.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Random scores on a 1/64 lattice in [-1, 1], so every switch point is a
/// multiple of 1/64 and ties are common. At least one seen and one unseen
/// label are present.
pub fn random_scores<R: Rng>(rng: &mut R, space: &CompositionSpace, max_samples: usize) -> ScoreMatrix {
    let n = rng.random_range(2..=max_samples);
    let seen: Vec<usize> = (0..space.len()).filter(|&i| space.is_seen(i)).collect();
    let unseen: Vec<usize> = (0..space.len()).filter(|&i| !space.is_seen(i)).collect();
    let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..space.len())).collect();
    labels[0] = seen[rng.random_range(0..seen.len())];
    labels[1] = unseen[rng.random_range(0..unseen.len())];
    let scores = Array2::from_shape_simple_fn((n, space.len()), || rng.random_range(-64i32..=64) as f64 / 64.0);
    ScoreMatrix::new(scores, labels, space).unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridResult {
    pub best_seen: f64,
    pub best_unseen: f64,
    pub best_hm: f64,
    pub auc: f64,
}

pub const GRID_POINTS: usize = 100_001;

/// Sweeps `GRID_POINTS` biases over [-2.5, 2.5], shifted off the 1/64
/// lattice, predicting every sample at every bias with a full masked argmax
/// (ties to the lowest index).
pub fn grid_oracle(m: &ScoreMatrix, mask: Option<&[bool]>) -> GridResult {
    let k = m.n_compositions();
    let allowed = |j: usize| mask.is_none_or(|mm| mm[j]);
    let seen = m.seen_flags();
    let labels = m.labels();
    // Per-row group maxima are constant in the bias, so hoist them.
    let groups: Vec<(Option<(f64, usize)>, Option<(f64, usize)>)> = (0..m.n_samples())
        .map(|i| {
            let row = m.scores().row(i);
            let mut best_s: Option<(f64, usize)> = None;
            let mut best_u: Option<(f64, usize)> = None;
            for j in (0..k).filter(|&j| allowed(j)) {
                let slot = if seen[j] { &mut best_s } else { &mut best_u };
                if slot.is_none_or(|(v, _)| row[j] > v) {
                    *slot = Some((row[j], j));
                }
            }
            (best_s, best_u)
        })
        .collect();
    let n_seen = labels.iter().filter(|&&l| seen[l]).count();
    let n_unseen = labels.len() - n_seen;

    let lo = -2.5 + 1.3e-5;
    let step = 5.0 / (GRID_POINTS - 1) as f64;
    let mut points = Vec::with_capacity(GRID_POINTS);
    for g in 0..GRID_POINTS {
        let bias = lo + g as f64 * step;
        let (mut hit_s, mut hit_u) = (0usize, 0usize);
        for (i, &(bs, bu)) in groups.iter().enumerate() {
            let pred = match (bs, bu) {
                (Some((vs, js)), Some((vu, ju))) => {
                    let vu = vu + bias;
                    if vs > vu {
                        js
                    } else if vu > vs {
                        ju
                    } else {
                        js.min(ju)
                    }
                }
                (Some((_, j)), None) | (None, Some((_, j))) => j,
                (None, None) => unreachable!("seen compositions are never masked"),
            };
            if pred == labels[i] {
                if seen[labels[i]] {
                    hit_s += 1;
                } else {
                    hit_u += 1;
                }
            }
        }
        let acc = |h: usize, n: usize| if n == 0 { 0.0 } else { h as f64 / n as f64 };
        points.push((acc(hit_s, n_seen), acc(hit_u, n_unseen)));
    }

    let best_seen = points.iter().map(|p| p.0).fold(0.0, f64::max);
    let best_unseen = points.iter().map(|p| p.1).fold(0.0, f64::max);
    let best_hm = points
        .iter()
        .map(|&(s, u)| if s + u > 0.0 { 2.0 * s * u / (s + u) } else { 0.0 })
        .fold(0.0, f64::max);

    // Area under seen-vs-unseen: keep the highest seen accuracy per unseen
    // accuracy, anchor at unseen = 0, then trapezoids.
    let mut frontier: Vec<(f64, f64)> = Vec::new();
    let mut by_unseen = points.iter().map(|&(s, u)| (u, s)).collect::<Vec<_>>();
    by_unseen.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(b.1.partial_cmp(&a.1).unwrap()));
    for (u, s) in by_unseen {
        if frontier.last().is_none_or(|&(pu, _)| pu != u) {
            frontier.push((u, s));
        }
    }
    let mut auc = frontier[0].0 * frontier[0].1;
    for w in frontier.windows(2) {
        auc += (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0;
    }
    GridResult {
        best_seen,
        best_unseen,
        best_hm,
        auc,
    }
}

