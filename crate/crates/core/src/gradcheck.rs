//! Central finite-difference verification of the analytic gradients.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::embed::{ModelParams, PrimitiveTable, TENSOR_NAMES};
use crate::error::Result;
use crate::feasibility::{feasibility_scores, FeasibilityTable, Mixing};
use crate::space::{CompositionSpace, Pair, Vocabulary, WorldMode};
use crate::train::{batch_loss_value, loss_and_grad, BatchInputs, Objective, TrainMode};

pub const DEFAULT_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckResult {
    pub max_rel_error: f64,
    /// Tensor name and flat index of the worst entry.
    pub worst: (&'static str, usize),
    pub n_checked: usize,
}

/// Compares the analytic gradient with central differences over every
/// parameter. Dropout is ignored (the batch must not carry a dropout mask).
pub fn grad_check(
    params: &ModelParams,
    batch: &BatchInputs,
    obj: &Objective<'_>,
    epsilon: f64,
) -> Result<GradCheckResult> {
    let batch = BatchInputs {
        dropout: None,
        ..batch.clone()
    };
    let (_, grads) = loss_and_grad(params, &batch, obj)?;
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();

    let mut probe = params.clone();
    let mut result = GradCheckResult {
        max_rel_error: 0.0,
        worst: (TENSOR_NAMES[0], 0),
        n_checked: 0,
    };
    for (t, name) in TENSOR_NAMES.iter().enumerate() {
        for j in 0..analytic[t].len() {
            let orig = probe.tensors()[t][j];
            probe.tensors_mut()[t][j] = orig + epsilon;
            let plus = batch_loss_value(&probe, &batch, obj)?;
            probe.tensors_mut()[t][j] = orig - epsilon;
            let minus = batch_loss_value(&probe, &batch, obj)?;
            probe.tensors_mut()[t][j] = orig;

            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic[t][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > result.max_rel_error {
                result.max_rel_error = rel;
                result.worst = (name, j);
            }
            result.n_checked += 1;
        }
    }
    Ok(result)
}

/// A small random model, space, batch, and feasibility table for gradient checks.
#[derive(Debug, Clone)]
pub struct ToyInstance {
    pub params: ModelParams,
    pub space: CompositionSpace,
    pub batch: BatchInputs,
    pub feasibility: FeasibilityTable,
}

impl ToyInstance {
    /// Shared dim `d <= 8` and at most 20 target compositions.
    pub fn random(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_states = rng.random_range(2..=4);
        let n_objects = rng.random_range(2..=20 / n_states);
        let d = rng.random_range(2..=8);
        let d_in = rng.random_range(2..=6);
        let hidden = rng.random_range(2..=8);

        let names = |p: &str, n: usize| (0..n).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
        let vocab = Vocabulary::new(names("s", n_states), names("o", n_objects))?;
        // a diagonal-ish cover plus a few random extra seen pairs
        let mut seen: Vec<Pair> = (0..n_states.max(n_objects))
            .map(|i| Pair::new(i % n_states, i % n_objects))
            .collect();
        for _ in 0..rng.random_range(0..3) {
            seen.push(Pair::new(rng.random_range(0..n_states), rng.random_range(0..n_objects)));
        }
        seen.sort_unstable();
        seen.dedup();
        let space = CompositionSpace::from_indices(vocab, seen, None, WorldMode::OpenWorld)?;

        let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
        let states = Array2::from_shape_simple_fn((n_states, d), &mut normal);
        let objects = Array2::from_shape_simple_fn((n_objects, d), &mut normal);
        let table = PrimitiveTable::new(states, objects)?;
        let feasibility = feasibility_scores(&table, &space, Mixing::Avg, 0)?;

        let temperature = rng.random_range(0.1..1.0);
        let mut params = ModelParams::init(d_in, hidden, table, 0.0, temperature, &mut rng)?;
        // non-trivial layer-norm affine parameters
        params.visual.ln_gain.mapv_inplace(|_| rng.random_range(0.5..1.5));
        params.visual.ln_shift.mapv_inplace(|_| rng.random_range(-0.2..0.2));

        let n_batch = rng.random_range(1..=6);
        let seen_pairs: Vec<Pair> = space.seen_pairs().collect();
        let labels = (0..n_batch)
            .map(|_| seen_pairs[rng.random_range(0..seen_pairs.len())])
            .collect();
        let features = Array2::from_shape_simple_fn((n_batch, d_in), || StandardNormal.sample(&mut rng));
        Ok(ToyInstance {
            params,
            space,
            batch: BatchInputs {
                features,
                labels,
                dropout: None,
            },
            feasibility,
        })
    }

    pub fn objective(&self, mode: TrainMode, alpha: f64) -> Objective<'_> {
        Objective {
            mode,
            space: &self.space,
            feasibility: Some(&self.feasibility),
            alpha,
        }
    }

    pub fn check(&self, mode: TrainMode, alpha: f64) -> Result<GradCheckResult> {
        grad_check(&self.params, &self.batch, &self.objective(mode, alpha), DEFAULT_EPSILON)
    }
}

/// Worst relative error over all three objectives on one random toy instance.
pub fn check_all_modes(seed: u64, alpha: f64) -> Result<f64> {
    let toy = ToyInstance::random(seed)?;
    let mut worst = 0.0f64;
    for mode in [TrainMode::ClosedWorld, TrainMode::OpenWorldNoMargin, TrainMode::OpenWorldMargin] {
        worst = worst.max(toy.check(mode, alpha)?.max_rel_error);
    }
    Ok(worst)
}
