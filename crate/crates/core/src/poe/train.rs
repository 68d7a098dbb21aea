use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{PoeError, PoeHyper, PoeModel, PoeVocab};
use crate::dataset::{CheckInLog, Metadata, SplitCorpus};
use crate::metrics::{mean_average_precision, RankedResult};
use crate::numerics::{dot, Adam, Matrix, Optimizer, Scalar};
use crate::pretrain::init_user_embeddings;

/// One observed move `prev -> next` of a user.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transition {
    pub user: usize,
    pub prev: usize,
    pub next: usize,
    pub t_prev: i64,
    pub t: i64,
}

/// A transition with its candidate list; candidate 0 is the true next POI.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainExample {
    pub user: usize,
    pub prev: usize,
    pub t_prev: i64,
    pub t: i64,
    pub candidates: Vec<usize>,
}

/// Transitions whose target lies in `targets`, with each user's records in
/// `context` available as earlier history. Records outside the vocabulary are
/// skipped.
pub fn transitions(context: &CheckInLog, targets: &CheckInLog, vocab: &PoeVocab) -> Vec<Transition> {
    let ctx: HashMap<&str, _> = context.by_user().into_iter().collect();
    let mut out = Vec::new();
    for (user_id, recs) in targets.by_user() {
        let Some(user) = vocab.user(user_id) else { continue };
        let mut prev = ctx
            .get(user_id)
            .and_then(|h| h.last())
            .and_then(|r| vocab.poi(&r.poi_id).map(|p| (p, r.timestamp)));
        for r in recs {
            let Some(next) = vocab.poi(&r.poi_id) else { continue };
            if let Some((p, tp)) = prev {
                out.push(Transition {
                    user,
                    prev: p,
                    next,
                    t_prev: tp,
                    t: r.timestamp,
                });
            }
            prev = Some((next, r.timestamp));
        }
    }
    out
}

/// Expected MAP of a uniformly random ranking of `n` items with one relevant
/// item: `H_n / n`.
pub fn random_baseline_map(n: usize) -> f64 {
    (1..=n).map(|r| 1.0 / r as f64).sum::<f64>() / n as f64
}

/// Pretrained POI rows keyed by id; user rows are then derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainedInit<T> {
    pub ids: Vec<String>,
    pub table: Matrix<T>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PoeTrainLog {
    pub epoch_loss: Vec<f64>,
    pub validation_map: Vec<f64>,
    /// MAP of the returned model; the initialization's when no epoch ran.
    pub best_map: f64,
    /// 1-based epoch of the returned model, 0 for the initialization.
    pub best_epoch: usize,
    /// Users given a random row because they have no usable training record.
    pub cold_users: Vec<String>,
}

impl<T: Scalar> PoeModel<T> {
    /// Every POI ranked for each query, with the true next POI as the only
    /// relevant item.
    pub fn rankings(&self, queries: &[Transition]) -> Result<Vec<RankedResult<T>>, PoeError> {
        let cands = self.candidate_intents()?;
        let mut results = Vec::with_capacity(queries.len());
        for q in queries {
            let (dq, du) = self.query_intents(q.user, q.prev, q.t_prev, q.t)?;
            let h: Vec<T> = dq.iter().zip(&du).map(|(&a, &b)| a + b).collect();
            let scored: Vec<(String, T)> =
                (0..cands.rows()).map(|p| (self.vocab.pois[p].clone(), dot(&h, cands.row(p)))).collect();
            results.push(RankedResult {
                ranked: super::sort_ranked(scored, usize::MAX),
                relevant: BTreeSet::from([self.vocab.pois[q.next].clone()]),
            });
        }
        Ok(results)
    }

    /// MAP over `queries`, ranking every POI in the vocabulary.
    pub fn evaluate_map(&self, queries: &[Transition]) -> Result<f64, PoeError> {
        if queries.is_empty() {
            return Ok(0.0);
        }
        mean_average_precision(&self.rankings(queries)?).map_err(|e| PoeError::Hyper(e.to_string()))
    }
}

fn apply_pretrained<T: Scalar>(model: &mut PoeModel<T>, init: &PretrainedInit<T>, train: &CheckInLog, seed: u64) -> Vec<String> {
    let rows: HashMap<&str, usize> = init.ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let dim = model.hyper.dim.min(init.table.cols());
    for (p, id) in model.vocab.pois.iter().enumerate() {
        if let Some(&r) = rows.get(id.as_str()) {
            model.poi_emb.row_mut(p)[..dim].copy_from_slice(&init.table.row(r)[..dim]);
        }
    }
    let poi_index: HashMap<String, usize> = model.vocab.pois.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
    let (users, cold) = init_user_embeddings(train, &model.vocab.users, &poi_index, &model.poi_emb, seed);
    model.user_emb = users;
    cold
}

/// Adam on sampled-softmax cross-entropy over training transitions with
/// uniform negatives. Returns the epoch with the best validation MAP.
pub fn train_poe<T: Scalar>(
    corpus: &SplitCorpus,
    meta: &Metadata,
    hyper: &PoeHyper,
    pretrained: Option<&PretrainedInit<T>>,
    seed: u64,
) -> Result<(PoeModel<T>, PoeTrainLog), PoeError> {
    hyper.validate()?;
    let all = CheckInLog::concat(&[&corpus.train, &corpus.validation, &corpus.test]);
    let users: Vec<String> = all.users().into_iter().map(str::to_string).collect();
    let pois: Vec<String> = all.pois().into_iter().map(str::to_string).collect();
    let vocab = PoeVocab::build(users, pois, meta);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = PoeModel::<T>::init(vocab, hyper.clone(), rng.gen());
    let mut log = PoeTrainLog::default();
    if let Some(init) = pretrained {
        log.cold_users = apply_pretrained(&mut model, init, &corpus.train, rng.gen());
    }

    let train = transitions(&CheckInLog::default(), &corpus.train, &model.vocab);
    if train.is_empty() {
        return Err(PoeError::NoTransitions);
    }
    let valid = transitions(&corpus.train, &corpus.validation, &model.vocab);
    let n_poi = model.vocab.pois.len();
    let mut best = model.clone();
    log.best_map = model.evaluate_map(&valid)?;
    let mut opt = Adam::<T>::new(hyper.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(hyper.batch_size.max(1)) {
            let batch: Vec<TrainExample> = chunk
                .iter()
                .map(|&i| {
                    let tr = train[i];
                    let mut candidates = vec![tr.next];
                    while n_poi > 1 && candidates.len() <= hyper.negatives {
                        let c = rng.gen_range(0..n_poi);
                        if c != tr.next {
                            candidates.push(c);
                        }
                    }
                    TrainExample {
                        user: tr.user,
                        prev: tr.prev,
                        t_prev: tr.t_prev,
                        t: tr.t,
                        candidates,
                    }
                })
                .collect();
            let (loss, grads) = model.loss_and_grads(&batch)?;
            let loss = loss.as_f64();
            if !loss.is_finite() {
                return Err(PoeError::NonFinite {
                    epoch,
                    detail: format!("batch of {} starting at transition {}", batch.len(), chunk[0]),
                });
            }
            total += loss * batch.len() as f64;
            let mut params = model.params_mut();
            opt.step(&mut params, &grads, &PoeModel::<T>::PARAM_NAMES)
                .map_err(|e| PoeError::NonFinite {
                    epoch,
                    detail: e.to_string(),
                })?;
        }
        log.epoch_loss.push(total / train.len() as f64);
        let map = model.evaluate_map(&valid)?;
        log.validation_map.push(map);
        if map > log.best_map {
            log.best_map = map;
            log.best_epoch = epoch + 1;
            best = model.clone();
        }
    }
    Ok((best, log))
}
