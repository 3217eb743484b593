//! Training objectives and the optimisation loop.
//!
//! The loss is a temperature-scaled cross-entropy over cosine logits. In the
//! closed world the softmax runs over seen compositions only; the open-world
//! objectives run it over the whole target set, optionally lowering each unseen
//! logit by `alpha * rho(c)` where `rho` is the feasibility score refreshed at
//! the start of every epoch.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::{draw_dropout, row_norms, score_matrix, stacked_primitives, visual_forward, ModelParams, Subset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, ScoreMatrix};
use crate::feasibility::{feasibility_scores, FeasibilityTable, Mixing};
use crate::optim::{AdamConfig, AdamState};
use crate::space::{CompositionSpace, Dataset, Pair, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Softmax over seen compositions only.
    ClosedWorld,
    /// Softmax over the full target set, no margins.
    OpenWorldNoMargin,
    /// Softmax over the full target set with feasibility margins.
    OpenWorldMargin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub temperature: f64,
    pub alpha_max: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub decay_primitives: bool,
    pub mixing: Mixing,
    pub hidden_dim: Option<usize>,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::OpenWorldMargin,
            temperature: 0.05,
            alpha_max: 0.4,
            warmup_epochs: 15,
            epochs: 50,
            batch_size: 128,
            learning_rate: 5e-5,
            weight_decay: 5e-5,
            decay_primitives: true,
            mixing: Mixing::Avg,
            hidden_dim: None,
            dropout: 0.3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.warmup_epochs < 1 {
            return bad("warmup_epochs must be at least 1");
        }
        if !(self.alpha_max >= 0.0) {
            return bad("alpha_max must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            decay_primitives: self.decay_primitives,
        }
    }
}

/// Margin factor for an epoch: linear warmup from 0 to `alpha_max`.
pub fn alpha_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.alpha_max * (epoch as f64 / cfg.warmup_epochs as f64).min(1.0)
}

/// Lowers every unseen score by `alpha * rho`; seen scores pass through.
pub fn margin_scores(
    scores: &[f64],
    feas: &FeasibilityTable,
    alpha: f64,
    space: &CompositionSpace,
) -> Result<Vec<f64>> {
    for len in [feas.len(), space.len()] {
        if len != scores.len() {
            return Err(Error::LengthMismatch {
                expected: scores.len(),
                actual: len,
            });
        }
    }
    Ok(scores
        .iter()
        .zip(&feas.rho)
        .zip(space.seen_flags())
        .map(|((&s, &r), &seen)| if seen { s } else { s - alpha * r })
        .collect())
}

/// `(log-sum-exp, -log softmax[label])` of a logit vector, with the largest
/// term factored out so a dominant correct logit keeps its tiny loss.
fn softmax_xent(logits: &[f64], label: usize) -> (f64, f64) {
    let mut top = 0;
    for (k, &l) in logits.iter().enumerate() {
        if l > logits[top] {
            top = k;
        }
    }
    let max = logits[top];
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != top)
        .map(|(_, &l)| (l - max).exp())
        .sum();
    let tail = rest.ln_1p();
    (max + tail, (max - logits[label]) + tail)
}

/// `-log softmax(scores / T)[label]`.
pub fn xent_loss(scores: &[f64], label: usize, temperature: f64) -> Result<f64> {
    if label >= scores.len() {
        return Err(Error::IndexOutOfRange {
            index: label,
            len: scores.len(),
        });
    }
    let logits: Vec<f64> = scores.iter().map(|s| s / temperature).collect();
    Ok(softmax_xent(&logits, label).1)
}

/// Gradient of the loss with respect to every trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub ln_gain: Array1<f64>,
    pub ln_shift: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub states: Array2<f64>,
    pub objects: Array2<f64>,
    pub projector: Array2<f64>,
}

impl Gradients {
    /// Flat views ordered like [`ModelParams::tensors`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        [
            self.w1.as_slice(),
            self.b1.as_slice(),
            self.ln_gain.as_slice(),
            self.ln_shift.as_slice(),
            self.w2.as_slice(),
            self.b2.as_slice(),
            self.states.as_slice(),
            self.objects.as_slice(),
            self.projector.as_slice(),
        ]
        .into_iter()
        .map(|t| t.expect("standard layout"))
        .collect()
    }
}

/// What the softmax runs over and how unseen logits are shifted.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    pub mode: TrainMode,
    pub space: &'a CompositionSpace,
    pub feasibility: Option<&'a FeasibilityTable>,
    pub alpha: f64,
}

impl Objective<'_> {
    fn columns(&self) -> Vec<Pair> {
        match self.mode {
            TrainMode::ClosedWorld => self.space.seen_pairs().collect(),
            _ => self.space.target().to_vec(),
        }
    }

    fn label_column(&self, pair: Pair) -> Result<usize> {
        let col = match self.mode {
            TrainMode::ClosedWorld => self.space.seen_position(pair),
            _ => self.space.index_of(pair).filter(|&i| self.space.is_seen(i)),
        };
        col.ok_or_else(|| {
            let (s, o) = (pair.state, pair.object);
            Error::Validation(format!("training label ({s}, {o}) is not a seen composition"))
        })
    }

    /// Per-column additive shift applied to the cosine scores.
    fn shifts(&self, n_columns: usize) -> Result<Vec<f64>> {
        if self.mode != TrainMode::OpenWorldMargin || self.alpha == 0.0 {
            return Ok(vec![0.0; n_columns]);
        }
        let feas = self
            .feasibility
            .ok_or_else(|| Error::InvalidConfig("margin objective needs a feasibility table".into()))?;
        let zeros = vec![0.0; n_columns];
        let shifted = margin_scores(&zeros, feas, self.alpha, self.space)?;
        Ok(shifted)
    }
}

/// A batch of training inputs: feature rows, labels, and optional dropout scales.
#[derive(Debug, Clone)]
pub struct BatchInputs {
    pub features: Array2<f64>,
    pub labels: Vec<Pair>,
    pub dropout: Option<Array2<f64>>,
}

/// Mean loss over the batch and its gradient.
pub fn loss_and_grad(params: &ModelParams, batch: &BatchInputs, obj: &Objective<'_>) -> Result<(f64, Gradients)> {
    let n = batch.labels.len();
    if n == 0 {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    if batch.features.nrows() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            actual: batch.features.nrows(),
        });
    }
    let d = params.dim();
    let temp = params.temperature;
    let v = &params.visual;

    let fwd = visual_forward(v, batch.features.view(), batch.dropout.clone())?;
    let columns = obj.columns();
    let stacked = stacked_primitives(params, &columns)?;
    let comps = stacked.dot(&params.projector);

    let z_norm = row_norms(&fwd.output)?;
    let c_norm = row_norms(&comps)?;
    let z_unit = &fwd.output / &z_norm.view().insert_axis(Axis(1));
    let c_unit = &comps / &c_norm.view().insert_axis(Axis(1));
    let cos = z_unit.dot(&c_unit.t());
    let shifts = obj.shifts(columns.len())?;

    let mut loss = 0.0;
    let mut d_cos = Array2::zeros(cos.dim());
    for (i, label) in batch.labels.iter().enumerate() {
        let col = obj.label_column(*label)?;
        let logits: Vec<f64> = cos
            .row(i)
            .iter()
            .zip(&shifts)
            .map(|(c, sh)| (c + sh) / temp)
            .collect();
        let (lse, sample_loss) = softmax_xent(&logits, col);
        loss += sample_loss;
        let mut row = d_cos.row_mut(i);
        for (k, l) in logits.iter().enumerate() {
            row[k] = (l - lse).exp();
        }
        row[col] -= 1.0;
    }
    let scale = 1.0 / (n as f64 * temp);
    d_cos *= scale;
    loss /= n as f64;

    // cosine backward: d(u/|u|) -> du
    let unit_backward = |d_unit: Array2<f64>, unit: &Array2<f64>, norms: &Array1<f64>| {
        let radial = (&d_unit * unit).sum_axis(Axis(1)).insert_axis(Axis(1));
        (d_unit - unit * &radial) / &norms.view().insert_axis(Axis(1))
    };
    let d_z = unit_backward(d_cos.dot(&c_unit), &z_unit, &z_norm);
    let d_comps = unit_backward(d_cos.t().dot(&z_unit), &c_unit, &c_norm);

    let projector = stacked.t().dot(&d_comps);
    let d_stacked = d_comps.dot(&params.projector.t());
    let mut states = Array2::zeros(params.primitives.states.dim());
    let mut objects = Array2::zeros(params.primitives.objects.dim());
    for (k, p) in columns.iter().enumerate() {
        let mut srow = states.row_mut(p.state);
        srow += &d_stacked.slice(s![k, ..d]);
        let mut orow = objects.row_mut(p.object);
        orow += &d_stacked.slice(s![k, d..]);
    }

    let w2 = fwd.hidden.t().dot(&d_z);
    let b2 = d_z.sum_axis(Axis(0));
    let d_hidden = d_z.dot(&v.w2.t());
    let relu = fwd.activated.mapv(|a| if a > 0.0 { 1.0 } else { 0.0 });
    let d_ln = &d_hidden * &fwd.dropout * &relu;
    let ln_gain = (&d_ln * &fwd.normalized).sum_axis(Axis(0));
    let ln_shift = d_ln.sum_axis(Axis(0));
    let d_norm = &d_ln * &v.ln_gain;
    let h = v.hidden_dim() as f64;
    let mean_d = d_norm.sum_axis(Axis(1)) / h;
    let mean_dx = (&d_norm * &fwd.normalized).sum_axis(Axis(1)) / h;
    let d_pre = (&d_norm
        - &mean_d.insert_axis(Axis(1))
        - &fwd.normalized * &mean_dx.insert_axis(Axis(1)))
        * &fwd.inv_std.view().insert_axis(Axis(1));
    let w1 = fwd.input.t().dot(&d_pre);
    let b1 = d_pre.sum_axis(Axis(0));

    Ok((
        loss,
        Gradients {
            w1,
            b1,
            ln_gain,
            ln_shift,
            w2,
            b2,
            states,
            objects,
            projector,
        },
    ))
}

/// Loss only, with no gradient bookkeeping beyond the shared forward pass.
pub fn batch_loss_value(params: &ModelParams, batch: &BatchInputs, obj: &Objective<'_>) -> Result<f64> {
    loss_and_grad(params, batch, obj).map(|(l, _)| l)
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam: AdamState,
    pub epoch: usize,
    pub feasibility: Option<FeasibilityTable>,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(params: ModelParams, seed: u64) -> Self {
        TrainState {
            adam: AdamState::for_params(&params),
            params,
            epoch: 0,
            feasibility: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

/// Loss and gradients for a batch of sample indices, drawing dropout from the
/// state's generator in sample order.
pub fn batch_loss(
    state: &mut TrainState,
    features: ArrayView2<'_, f64>,
    batch: &[(usize, Pair)],
    space: &CompositionSpace,
    cfg: &TrainConfig,
    alpha: f64,
) -> Result<(f64, Gradients)> {
    let rows: Vec<usize> = batch.iter().map(|(r, _)| *r).collect();
    let inputs = BatchInputs {
        features: features.select(Axis(0), &rows),
        labels: batch.iter().map(|(_, p)| *p).collect(),
        dropout: Some(draw_dropout(
            batch.len(),
            state.params.visual.hidden_dim(),
            state.params.visual.dropout,
            &mut state.rng,
        )),
    };
    let obj = Objective {
        mode: cfg.mode,
        space,
        feasibility: state.feasibility.as_ref(),
        alpha,
    };
    loss_and_grad(&state.params, &inputs, &obj)
}

pub fn optimizer_step(state: &mut TrainState, grads: &Gradients, cfg: &TrainConfig) -> Result<()> {
    state.adam.step(&mut state.params, &grads.tensors(), &cfg.adam())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub alpha: f64,
    pub train_loss: f64,
    pub val_auc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Epoch with the best validation AUC (the last epoch without validation data).
    pub best_epoch: Option<usize>,
    pub best_params: ModelParams,
    pub best_feasibility: Option<FeasibilityTable>,
    pub log: Vec<EpochLog>,
}

/// Rows and labels of one split, in dataset order.
pub fn split_rows(dataset: &Dataset, split: Split) -> (Vec<usize>, Vec<Pair>) {
    dataset.split(split).map(|s| (s.feature_row, s.pair)).unzip()
}

/// Eval-mode score matrix for one split over a space's target set.
/// Target indices of the `split` labels, in dataset order.
pub fn split_labels(dataset: &Dataset, space: &CompositionSpace, split: Split) -> Result<Vec<usize>> {
    dataset
        .split(split)
        .map(|s| {
            space.index_of(s.pair).ok_or_else(|| {
                Error::Validation(format!("{split} label ({}, {}) outside the target set", s.pair.state, s.pair.object))
            })
        })
        .collect()
}

pub fn split_scores(
    params: &ModelParams,
    dataset: &Dataset,
    features: ArrayView2<'_, f64>,
    space: &CompositionSpace,
    split: Split,
) -> Result<ScoreMatrix> {
    let (rows, _) = split_rows(dataset, split);
    let labels = split_labels(dataset, space, split)?;
    let scores = score_matrix(params, features.select(Axis(0), &rows).view(), space, Subset::Target)?;
    ScoreMatrix::new(scores, labels, space)
}

fn validation_auc(
    params: &ModelParams,
    dataset: &Dataset,
    features: ArrayView2<'_, f64>,
    space: &CompositionSpace,
) -> Result<Option<f64>> {
    if !dataset.has_split(Split::Val) || space.n_seen() == space.len() {
        return Ok(None);
    }
    let m = split_scores(params, dataset, features, space, Split::Val)?;
    Ok(Some(evaluate(&m, None)?.auc))
}

fn shuffle_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + epoch as u64);
    rng
}

/// Trains from `init` for `cfg.epochs` epochs and keeps the parameters with
/// the best validation AUC.
pub fn train(
    dataset: &Dataset,
    features: ArrayView2<'_, f64>,
    space: &CompositionSpace,
    init: ModelParams,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.check()?;
    let violations = dataset.validate(space, features.nrows());
    if let Some(v) = violations.first() {
        return Err(Error::Validation(format!("{} violation(s), first: {v}", violations.len())));
    }
    let mut params = init;
    params.temperature = cfg.temperature;
    params.visual.dropout = cfg.dropout;
    params.check()?;

    let mut state = TrainState::new(params, cfg.seed);
    let train_samples: Vec<(usize, Pair)> = dataset
        .split(Split::Train)
        .map(|s| (s.feature_row, s.pair))
        .collect();
    if cfg.epochs > 0 && train_samples.is_empty() {
        return Err(Error::Validation("no training samples".into()));
    }

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ModelParams, Option<FeasibilityTable>)> = None;
    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        state.feasibility = Some(feasibility_scores(&state.params.primitives, space, cfg.mixing, epoch)?);
        let alpha = alpha_at(epoch, cfg);

        let mut order = train_samples.clone();
        order.shuffle(&mut shuffle_rng(cfg.seed, epoch));
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (loss, grads) = batch_loss(&mut state, features, chunk, space, cfg, alpha)?;
            optimizer_step(&mut state, &grads, cfg)?;
            total += loss * chunk.len() as f64;
        }
        state.epoch = epoch + 1;

        let val_auc = validation_auc(&state.params, dataset, features, space)?;
        if let Some(auc) = val_auc {
            if best.as_ref().is_none_or(|(b, ..)| auc > *b) {
                best = Some((auc, epoch, state.params.clone(), state.feasibility.clone()));
            }
        }
        log.push(EpochLog {
            epoch,
            alpha,
            train_loss: total / order.len() as f64,
            val_auc,
        });
    }

    let (best_epoch, best_params, best_feasibility) = match best {
        Some((_, e, p, f)) => (Some(e), p, f),
        None => (cfg.epochs.checked_sub(1), state.params.clone(), state.feasibility.clone()),
    };
    Ok(TrainOutcome {
        state,
        best_epoch,
        best_params,
        best_feasibility,
        log,
    })
}
