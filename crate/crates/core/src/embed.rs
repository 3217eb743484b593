//! The shared embedding space.
//!
//! Images enter as precomputed backbone features and are mapped by a two-layer
//! MLP (`Linear -> LayerNorm -> ReLU -> Dropout -> Linear`). A composition
//! `(s, o)` is embedded as `[phi(s); phi(o)]^T W`, and the compatibility of an
//! image with a composition is the cosine between the two embeddings.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::space::{CompositionSpace, Pair};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subset {
    Seen,
    Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualEmbedder {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub ln_gain: Array1<f64>,
    pub ln_shift: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub dropout: f64,
}

impl VisualEmbedder {
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        hidden_dim: usize,
        output_dim: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        VisualEmbedder {
            w1: uniform_fan_in(input_dim, hidden_dim, rng),
            b1: uniform_fan_in(input_dim, hidden_dim, rng).row(0).to_owned(),
            ln_gain: Array1::ones(hidden_dim),
            ln_shift: Array1::zeros(hidden_dim),
            w2: uniform_fan_in(hidden_dim, output_dim, rng),
            b2: uniform_fan_in(hidden_dim, output_dim, rng).row(0).to_owned(),
            dropout,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.ncols()
    }
}

/// Word-embedding-initialised vectors for every state and object.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimitiveTable {
    pub states: Array2<f64>,
    pub objects: Array2<f64>,
}

impl PrimitiveTable {
    pub fn new(states: Array2<f64>, objects: Array2<f64>) -> Result<Self> {
        if states.ncols() != objects.ncols() {
            return Err(Error::DimensionMismatch {
                expected: states.ncols(),
                actual: objects.ncols(),
            });
        }
        for row in states.rows().into_iter().chain(objects.rows()) {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteInput("primitive embedding"));
            }
            if row.iter().all(|&v| v == 0.0) {
                return Err(Error::ZeroVector);
            }
        }
        Ok(PrimitiveTable { states, objects })
    }

    pub fn dim(&self) -> usize {
        self.states.ncols()
    }

    pub fn state(&self, idx: usize) -> Result<ArrayView1<'_, f64>> {
        check_index(idx, self.states.nrows())?;
        Ok(self.states.row(idx))
    }

    pub fn object(&self, idx: usize) -> Result<ArrayView1<'_, f64>> {
        check_index(idx, self.objects.nrows())?;
        Ok(self.objects.row(idx))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub visual: VisualEmbedder,
    pub primitives: PrimitiveTable,
    /// `2d x d` composition projection.
    pub projector: Array2<f64>,
    pub temperature: f64,
}

/// Names of the trainable tensors, in the order used by [`ModelParams::tensors`].
pub const TENSOR_NAMES: [&str; 9] = [
    "visual.w1",
    "visual.b1",
    "visual.ln_gain",
    "visual.ln_shift",
    "visual.w2",
    "visual.b2",
    "primitives.states",
    "primitives.objects",
    "projector",
];

/// Index of the primitive-table tensors within [`TENSOR_NAMES`].
pub const PRIMITIVE_TENSORS: [usize; 2] = [6, 7];

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        hidden_dim: usize,
        primitives: PrimitiveTable,
        dropout: f64,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let d = primitives.dim();
        let params = ModelParams {
            visual: VisualEmbedder::init(input_dim, hidden_dim, d, dropout, rng),
            projector: uniform_fan_in(2 * d, d, rng),
            primitives,
            temperature,
        };
        params.check()?;
        Ok(params)
    }

    pub fn dim(&self) -> usize {
        self.primitives.dim()
    }

    pub fn check(&self) -> Result<()> {
        let v = &self.visual;
        let d = self.primitives.dim();
        let h = v.hidden_dim();
        let shape_ok = v.b1.len() == h
            && v.ln_gain.len() == h
            && v.ln_shift.len() == h
            && v.w2.nrows() == h
            && v.w2.ncols() == d
            && v.b2.len() == d
            && self.projector.dim() == (2 * d, d);
        if !shape_ok {
            return Err(Error::ShapeMismatch("model parameters".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        if !(0.0..1.0).contains(&v.dropout) {
            return Err(Error::InvalidConfig("dropout rate must lie in [0, 1)".into()));
        }
        if self.tensors().iter().any(|t| t.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFiniteInput("model parameters"));
        }
        Ok(())
    }

    /// Flat views of every trainable tensor, ordered as [`TENSOR_NAMES`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        let v = &self.visual;
        vec![
            v.w1.as_slice().expect("standard layout"),
            v.b1.as_slice().expect("standard layout"),
            v.ln_gain.as_slice().expect("standard layout"),
            v.ln_shift.as_slice().expect("standard layout"),
            v.w2.as_slice().expect("standard layout"),
            v.b2.as_slice().expect("standard layout"),
            self.primitives.states.as_slice().expect("standard layout"),
            self.primitives.objects.as_slice().expect("standard layout"),
            self.projector.as_slice().expect("standard layout"),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let v = &mut self.visual;
        vec![
            v.w1.as_slice_mut().expect("standard layout"),
            v.b1.as_slice_mut().expect("standard layout"),
            v.ln_gain.as_slice_mut().expect("standard layout"),
            v.ln_shift.as_slice_mut().expect("standard layout"),
            v.w2.as_slice_mut().expect("standard layout"),
            v.b2.as_slice_mut().expect("standard layout"),
            self.primitives.states.as_slice_mut().expect("standard layout"),
            self.primitives.objects.as_slice_mut().expect("standard layout"),
            self.projector.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn n_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

fn uniform_fan_in<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Array2<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array2::from_shape_simple_fn((fan_in, fan_out), || dist.sample(rng))
}

fn check_index(index: usize, len: usize) -> Result<()> {
    if index >= len {
        Err(Error::IndexOutOfRange { index, len })
    } else {
        Ok(())
    }
}

/// Inverted-dropout scale factors (`0` or `1 / (1 - rate)`), drawn sample-major.
pub fn draw_dropout<R: Rng + ?Sized>(rows: usize, hidden: usize, rate: f64, rng: &mut R) -> Array2<f64> {
    if rate == 0.0 {
        return Array2::ones((rows, hidden));
    }
    let keep = 1.0 / (1.0 - rate);
    Array2::from_shape_simple_fn((rows, hidden), || {
        if rng.random::<f64>() < rate {
            0.0
        } else {
            keep
        }
    })
}

/// Intermediate values of a batched visual forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct VisualForward {
    pub input: Array2<f64>,
    pub normalized: Array2<f64>,
    pub inv_std: Array1<f64>,
    pub activated: Array2<f64>,
    pub dropout: Array2<f64>,
    pub hidden: Array2<f64>,
    pub output: Array2<f64>,
}

/// Batched visual embedding; `dropout` holds per-unit scale factors or `None`
/// for evaluation.
pub fn visual_forward(
    visual: &VisualEmbedder,
    features: ArrayView2<'_, f64>,
    dropout: Option<Array2<f64>>,
) -> Result<VisualForward> {
    if features.ncols() != visual.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: visual.input_dim(),
            actual: features.ncols(),
        });
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("feature"));
    }
    let n = features.nrows();
    let h = visual.hidden_dim();
    let pre = features.dot(&visual.w1) + &visual.b1;

    let mut normalized = Array2::zeros((n, h));
    let mut inv_std = Array1::zeros(n);
    for (i, row) in pre.rows().into_iter().enumerate() {
        let mean = row.sum() / h as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / h as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[i] = is;
        normalized.row_mut(i).assign(&row.mapv(|v| (v - mean) * is));
    }
    let activated = (&normalized * &visual.ln_gain + &visual.ln_shift).mapv(|v| v.max(0.0));
    let dropout = match dropout {
        Some(mask) => {
            if mask.dim() != (n, h) {
                return Err(Error::ShapeMismatch("dropout mask".into()));
            }
            mask
        }
        None => Array2::ones((n, h)),
    };
    let hidden = &activated * &dropout;
    let output = hidden.dot(&visual.w2) + &visual.b2;
    Ok(VisualForward {
        input: features.to_owned(),
        normalized,
        inv_std,
        activated,
        dropout,
        hidden,
        output,
    })
}

/// `omega(x)` for a single feature vector.
pub fn visual_embed<R: Rng + ?Sized>(
    params: &ModelParams,
    feature: ArrayView1<'_, f64>,
    mode: Mode,
    rng: &mut R,
) -> Result<Array1<f64>> {
    let x = feature.insert_axis(Axis(0));
    let mask = match mode {
        Mode::Train => Some(draw_dropout(1, params.visual.hidden_dim(), params.visual.dropout, rng)),
        Mode::Eval => None,
    };
    let fwd = visual_forward(&params.visual, x, mask)?;
    Ok(fwd.output.row(0).to_owned())
}

/// `phi(c) = [phi(s); phi(o)]^T W`.
pub fn compose_embed(params: &ModelParams, state: usize, object: usize) -> Result<Array1<f64>> {
    let d = params.dim();
    let mut cat = Array1::zeros(2 * d);
    cat.slice_mut(s![..d]).assign(&params.primitives.state(state)?);
    cat.slice_mut(s![d..]).assign(&params.primitives.object(object)?);
    Ok(cat.dot(&params.projector))
}

/// Concatenated primitive rows `[phi(s); phi(o)]` for each pair (`K x 2d`).
pub fn stacked_primitives(params: &ModelParams, pairs: &[Pair]) -> Result<Array2<f64>> {
    let d = params.dim();
    let mut cat = Array2::zeros((pairs.len(), 2 * d));
    for (i, p) in pairs.iter().enumerate() {
        cat.slice_mut(s![i, ..d]).assign(&params.primitives.state(p.state)?);
        cat.slice_mut(s![i, d..]).assign(&params.primitives.object(p.object)?);
    }
    Ok(cat)
}

/// Composition embeddings for every pair, one row each.
pub fn compose_all(params: &ModelParams, pairs: &[Pair]) -> Result<Array2<f64>> {
    Ok(stacked_primitives(params, pairs)?.dot(&params.projector))
}

pub fn cosine(u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            actual: v.len(),
        });
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu <= COSINE_EPS || nv <= COSINE_EPS {
        return Err(Error::ZeroVector);
    }
    let dot: f64 = u.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

pub(crate) fn norm(v: ArrayView1<'_, f64>) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Row norms, failing on any row at or below the cosine epsilon.
pub(crate) fn row_norms(m: &Array2<f64>) -> Result<Array1<f64>> {
    let norms: Array1<f64> = m.rows().into_iter().map(norm).collect();
    if norms.iter().any(|&n| n <= COSINE_EPS) {
        return Err(Error::ZeroVector);
    }
    Ok(norms)
}

/// Cosine between every row of `a` and every row of `b`.
pub fn cosine_matrix(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    let na = row_norms(a)?;
    let nb = row_norms(b)?;
    let mut dots = a.dot(&b.t());
    for ((i, j), v) in dots.indexed_iter_mut() {
        *v = (*v / (na[i] * nb[j])).clamp(-1.0, 1.0);
    }
    Ok(dots)
}

fn subset_pairs(space: &CompositionSpace, subset: Subset) -> Vec<Pair> {
    match subset {
        Subset::Seen => space.seen_pairs().collect(),
        Subset::Target => space.target().to_vec(),
    }
}

/// Scores `p(x, c)` for every composition of the chosen subset.
pub fn score_all<R: Rng + ?Sized>(
    params: &ModelParams,
    feature: ArrayView1<'_, f64>,
    space: &CompositionSpace,
    subset: Subset,
    mode: Mode,
    rng: &mut R,
) -> Result<Array1<f64>> {
    let z = visual_embed(params, feature, mode, rng)?;
    let comps = compose_all(params, &subset_pairs(space, subset))?;
    let scores = cosine_matrix(&z.insert_axis(Axis(0)), &comps)?;
    Ok(scores.row(0).to_owned())
}

/// Eval-mode scores for a batch of features (`n x |subset|`).
pub fn score_matrix(
    params: &ModelParams,
    features: ArrayView2<'_, f64>,
    space: &CompositionSpace,
    subset: Subset,
) -> Result<Array2<f64>> {
    let fwd = visual_forward(&params.visual, features, None)?;
    let comps = compose_all(params, &subset_pairs(space, subset))?;
    cosine_matrix(&fwd.output, &comps)
}

/// Index of the largest admissible entry; ties go to the lowest index.
pub fn masked_argmax(scores: ArrayView1<'_, f64>, mask: Option<&[bool]>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in scores.iter().enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Eval-mode prediction over the target set, optionally restricted by a mask.
pub fn predict(
    params: &ModelParams,
    feature: ArrayView1<'_, f64>,
    space: &CompositionSpace,
    mask: Option<&[bool]>,
) -> Result<Pair> {
    if let Some(m) = mask {
        if m.len() != space.len() {
            return Err(Error::LengthMismatch {
                expected: space.len(),
                actual: m.len(),
            });
        }
        if !m.iter().any(|&b| b) {
            return Err(Error::EmptyMask);
        }
    }
    let scores = score_matrix(params, feature.insert_axis(Axis(0)), space, Subset::Target)?;
    let idx = masked_argmax(scores.row(0), mask).ok_or(Error::EmptyMask)?;
    Ok(space.target()[idx])
}
