use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DecisionInstance, NpeError, NpeHyper, NpeModel, NegativeStrategy, PoiFactors, POI_SLOTS};
use crate::geo::haversine_km;
use crate::numerics::{Matrix, Optimizer, Scalar, SgdMomentum};

/// Offset added to distances before inverting them, in kilometres.
const NEARBY_EPS_KM: f64 = 1e-3;

/// Epoch window used for the plateau check.
const SMOOTHING_WINDOW: usize = 5;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NpeTrainLog {
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Learning rate in effect during each epoch.
    pub learning_rate: Vec<f64>,
}

/// Builds `count` negatives from a positive decision by swapping its POI
/// factors for those of other POIs drawn from `pool` without replacement.
pub fn generate_negatives(
    instance: &DecisionInstance,
    pool: &[PoiFactors],
    strategy: NegativeStrategy,
    count: usize,
    seed: u64,
) -> Result<Vec<DecisionInstance>, NpeError> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let visited_id = instance.poi.as_deref().ok_or(NpeError::MissingPoi)?;
    let visited = pool.iter().find(|p| p.poi_id == visited_id).ok_or(NpeError::MissingPoi)?;
    if instance.factors.len() <= POI_SLOTS.iter().copied().max().unwrap_or(0) {
        return Err(NpeError::TooFewFactors(instance.factors.len()));
    }
    let mut candidates: Vec<&PoiFactors> = pool
        .iter()
        .filter(|p| p.poi_id != visited_id)
        .filter(|p| strategy != NegativeStrategy::SameCategory || p.category == visited.category)
        .collect();
    if candidates.len() < count {
        return Err(NpeError::PoolTooSmall {
            available: candidates.len(),
            requested: count,
        });
    }
    let mut weights: Vec<f64> = match strategy {
        NegativeStrategy::Nearby => candidates
            .iter()
            .map(|p| 1.0 / (haversine_km(visited.loc, p.loc) + NEARBY_EPS_KM))
            .collect(),
        NegativeStrategy::SameCategory => vec![1.0; candidates.len()],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let dist = WeightedIndex::new(&weights).expect("positive weights");
        let k = dist.sample(&mut rng);
        let alt = candidates.swap_remove(k);
        weights.swap_remove(k);
        let mut neg = instance.clone();
        for (slot, &f) in POI_SLOTS.iter().zip(&alt.factors) {
            neg.factors[*slot] = f;
        }
        neg.positive = false;
        neg.poi = Some(alt.poi_id.clone());
        out.push(neg);
    }
    Ok(out)
}

/// Trains on positives plus negatives synthesized from `pool` with the
/// configured strategy and ratio.
pub fn train_npe<T: Scalar>(
    positives: &[DecisionInstance],
    pool: &[PoiFactors],
    vocab_len: usize,
    hyper: &NpeHyper,
    seed: u64,
) -> Result<(NpeModel<T>, NpeTrainLog), NpeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e65_6761_7469_7665);
    let mut negatives = Vec::new();
    for p in positives {
        negatives.extend(generate_negatives(
            p,
            pool,
            hyper.negative_strategy,
            hyper.negatives_per_positive,
            rng.gen(),
        )?);
    }
    train_npe_with_negatives(positives, &negatives, vocab_len, hyper, seed)
}

/// Mini-batch SGD with momentum on the summed cross-entropy objective. The
/// learning rate halves whenever the 5-epoch moving average of the epoch loss
/// goes up.
pub fn train_npe_with_negatives<T: Scalar>(
    positives: &[DecisionInstance],
    negatives: &[DecisionInstance],
    vocab_len: usize,
    hyper: &NpeHyper,
    seed: u64,
) -> Result<(NpeModel<T>, NpeTrainLog), NpeError> {
    if positives.is_empty() {
        return Err(NpeError::NoPositives);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = NpeModel::<T>::init(vocab_len, hyper.clone(), rng.gen());
    let data: Vec<&DecisionInstance> = positives.iter().chain(negatives).collect();
    for inst in &data {
        inst.validate(vocab_len)?;
    }
    let mut opt = SgdMomentum::<T>::new(hyper.lr, hyper.momentum);
    let mut log = NpeTrainLog::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let batch_size = hyper.batch_size.max(1);

    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<DecisionInstance> = chunk.iter().map(|&i| data[i].clone()).collect();
            let (loss, mut grads) = loop {
                match model.objective_and_grads(&batch, Some(rng.gen())) {
                    Ok(v) => break v,
                    Err(NpeError::DegenerateEmbedding(row)) => {
                        let fresh = Matrix::<T>::glorot(1, hyper.dim, &mut rng);
                        model.embeddings.row_mut(row).copy_from_slice(fresh.as_slice());
                    }
                    Err(e) => return Err(e),
                }
            };
            let loss = loss.as_f64();
            if !loss.is_finite() {
                return Err(NpeError::NonFinite {
                    epoch,
                    batch: format!("{batch:?}"),
                });
            }
            total += loss;
            let scale = T::lit(1.0 / batch.len() as f64);
            for g in &mut grads {
                *g = g.scale(scale);
            }
            clip_global_norm(&mut grads, hyper.grad_clip);
            let mut params = model.params_mut();
            opt.step(&mut params, &grads, &NpeModel::<T>::PARAM_NAMES)
                .map_err(|_| NpeError::NonFinite {
                    epoch,
                    batch: format!("{batch:?}"),
                })?;
        }
        log.learning_rate.push(opt.learning_rate());
        log.epoch_loss.push(total / data.len() as f64);
        if plateaued(&log.epoch_loss) {
            opt.set_learning_rate(opt.learning_rate() / 2.0);
        }
    }
    Ok((model, log))
}

/// True when the latest 5-epoch moving average exceeds the previous one.
pub(crate) fn plateaued(losses: &[f64]) -> bool {
    let n = losses.len();
    if n <= SMOOTHING_WINDOW {
        return false;
    }
    let now: f64 = losses[n - SMOOTHING_WINDOW..].iter().sum();
    let before: f64 = losses[n - SMOOTHING_WINDOW - 1..n - 1].iter().sum();
    now > before
}

pub(crate) fn clip_global_norm<T: Scalar>(grads: &mut [Matrix<T>], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let sq: f64 = grads.iter().map(|g| g.as_slice().iter().map(|v| v.as_f64().powi(2)).sum::<f64>()).sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            *g = g.scale(s);
        }
    }
}
