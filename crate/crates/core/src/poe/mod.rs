//! Next-POI evaluation model: intent vectors for the previous POI, the user
//! and each candidate, optionally fused with metadata and time context, scored
//! by an inner product.

mod train;
mod vocab;

#[cfg(test)]
mod tests;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{dot, sigmoid, Checkpoint, Matrix, NumericsError, Scalar, Tape, Var};

pub use train::{
    random_baseline_map, train_poe, transitions, PoeTrainLog, PretrainedInit, TrainExample, Transition,
};
pub use vocab::PoeVocab;

#[derive(Debug, Error)]
pub enum PoeError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("user {0} has no history")]
    ColdStart(String),
    #[error("unknown POI {0}")]
    UnknownPoi(String),
    #[error("unknown metadata item {0}")]
    UnknownItem(String),
    #[error("empty candidate set")]
    NoCandidates,
    #[error("training split has no transitions")]
    NoTransitions,
    #[error("invalid hyperparameter: {0}")]
    Hyper(String),
    #[error("non-finite loss in epoch {epoch}: {detail}")]
    NonFinite { epoch: usize, detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoeHyper {
    pub dim: usize,
    /// Weight of the POI embedding against its metadata vector.
    pub alpha: f64,
    /// Weight of the user embedding against its metadata vector.
    pub beta: f64,
    /// Interval threshold of the time-dependent transfer matrix, in seconds.
    pub pi_secs: f64,
    /// Time-of-day buckets.
    pub buckets: usize,
    pub use_meta: bool,
    pub use_time: bool,
    pub negatives: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Gate threshold on the mean sigmoid score.
    pub threshold: f64,
    pub top_k: usize,
}

impl Default for PoeHyper {
    fn default() -> Self {
        Self {
            dim: 16,
            alpha: 0.8,
            beta: 0.8,
            pi_secs: 21_600.0,
            buckets: 24,
            use_meta: true,
            use_time: true,
            negatives: 10,
            lr: 0.01,
            epochs: 15,
            batch_size: 64,
            threshold: 0.5,
            top_k: 10,
        }
    }
}

impl PoeHyper {
    pub fn validate(&self) -> Result<(), PoeError> {
        let bad = |m: &str| Err(PoeError::Hyper(m.to_string()));
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.beta) {
            return bad("alpha and beta must lie in [0, 1]");
        }
        if self.pi_secs.is_nan() || self.pi_secs <= 0.0 {
            return bad("pi_secs must be positive");
        }
        if self.buckets == 0 || self.dim == 0 {
            return bad("buckets and dim must be positive");
        }
        Ok(())
    }

    /// Time-of-day bucket of a UTC timestamp.
    pub fn bucket(&self, t: i64) -> usize {
        (t.rem_euclid(86_400) as usize * self.buckets) / 86_400
    }

    /// Interpolation weight of the long-interval matrix, `min(dt / pi, 1)`.
    pub fn interval_weight(&self, dt: i64) -> f64 {
        (dt.max(0) as f64 / self.pi_secs).min(1.0)
    }
}

/// A scoring query: the user's history up to the previous visit and the time
/// of the visit to predict.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRequest {
    pub user_id: String,
    /// `(poi_id, timestamp)` in time order.
    pub history: Vec<(String, i64)>,
    pub query_time: i64,
    pub candidates: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoeVerdict {
    pub pass: bool,
    pub aggregate: f64,
}

/// Passes when the mean sigmoid of the scores reaches `threshold`.
pub fn poe_gate<T: Scalar>(scores: &[T], threshold: f64) -> PoeVerdict {
    let aggregate = if scores.is_empty() {
        0.0
    } else {
        scores.iter().map(|&s| sigmoid(s.as_f64())).sum::<f64>() / scores.len() as f64
    };
    PoeVerdict {
        pass: aggregate >= threshold,
        aggregate,
    }
}

/// Mean of the item embeddings; `None` flags an empty item set.
pub fn metadata_vector<T: Scalar>(items: &[usize], table: &Matrix<T>) -> Result<Option<Vec<T>>, PoeError> {
    if items.is_empty() {
        return Ok(None);
    }
    let mut out = vec![T::zero(); table.cols()];
    let w = T::lit(1.0 / items.len() as f64);
    for &i in items {
        if i >= table.rows() {
            return Err(NumericsError::Index {
                index: i,
                len: table.rows(),
            }
            .into());
        }
        for (o, &x) in out.iter_mut().zip(table.row(i)) {
            *o = *o + w * x;
        }
    }
    Ok(Some(out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoeModel<T> {
    pub vocab: PoeVocab,
    pub user_emb: Matrix<T>,
    pub poi_emb: Matrix<T>,
    pub user_item_emb: Matrix<T>,
    pub poi_item_emb: Matrix<T>,
    /// Transfer matrix at interval 0 (and the only one without time context).
    pub w0: Matrix<T>,
    /// Transfer matrix at intervals of `pi_secs` and beyond.
    pub wpi: Matrix<T>,
    pub w2: Matrix<T>,
    pub w3: Matrix<T>,
    pub b1: Matrix<T>,
    pub b2: Matrix<T>,
    pub b3: Matrix<T>,
    /// One bias row per time-of-day bucket; replaces `b1` with time context.
    pub bucket_bias: Matrix<T>,
    pub hyper: PoeHyper,
}

pub(crate) struct Leaves {
    vars: [Var; 12],
}

impl Leaves {
    fn get(&self, name: &str) -> Var {
        let i = PoeModel::<f64>::PARAM_NAMES.iter().position(|n| *n == name).expect("known parameter");
        self.vars[i]
    }
}

impl<T: Scalar> PoeModel<T> {
    pub const PARAM_NAMES: [&'static str; 12] = [
        "user_emb",
        "poi_emb",
        "user_item_emb",
        "poi_item_emb",
        "w0",
        "wpi",
        "w2",
        "w3",
        "b1",
        "b2",
        "b3",
        "bucket_bias",
    ];

    pub fn init(vocab: PoeVocab, hyper: PoeHyper, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let d = hyper.dim;
        let emb = 0.5 / (d as f64).sqrt();
        let w0 = Matrix::glorot(d, d, &mut rng);
        Self {
            user_emb: Matrix::uniform(vocab.users.len(), d, emb, &mut rng),
            poi_emb: Matrix::uniform(vocab.pois.len(), d, emb, &mut rng),
            user_item_emb: Matrix::uniform(vocab.user_items.len(), d, emb, &mut rng),
            poi_item_emb: Matrix::uniform(vocab.poi_items.len(), d, emb, &mut rng),
            wpi: w0.clone(),
            w0,
            w2: Matrix::glorot(d, d, &mut rng),
            w3: Matrix::glorot(d, d, &mut rng),
            b1: Matrix::zeros(1, d),
            b2: Matrix::zeros(1, d),
            b3: Matrix::zeros(1, d),
            bucket_bias: Matrix::zeros(hyper.buckets, d),
            vocab,
            hyper,
        }
    }

    pub fn params(&self) -> [&Matrix<T>; 12] {
        [
            &self.user_emb,
            &self.poi_emb,
            &self.user_item_emb,
            &self.poi_item_emb,
            &self.w0,
            &self.wpi,
            &self.w2,
            &self.w3,
            &self.b1,
            &self.b2,
            &self.b3,
            &self.bucket_bias,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Matrix<T>; 12] {
        [
            &mut self.user_emb,
            &mut self.poi_emb,
            &mut self.user_item_emb,
            &mut self.poi_item_emb,
            &mut self.w0,
            &mut self.wpi,
            &mut self.w2,
            &mut self.w3,
            &mut self.b1,
            &mut self.b2,
            &mut self.b3,
            &mut self.bucket_bias,
        ]
    }

    /// `W_pi(dt)`: linear from `w0` at 0 to `wpi` at `pi_secs`, constant after.
    pub fn transfer_matrix(&self, dt: i64) -> Matrix<T> {
        let s = T::lit(self.hyper.interval_weight(dt));
        self.w0.zip_map(&self.wpi, "transfer", |a, b| a + s * (b - a)).expect("same shape")
    }

    fn blend(&self, own: &[T], meta: Option<Vec<T>>, weight: f64) -> Vec<T> {
        match meta {
            Some(m) if self.hyper.use_meta && weight < 1.0 => {
                let (a, b) = (T::lit(weight), T::lit(1.0 - weight));
                own.iter().zip(m).map(|(&x, y)| a * x + b * y).collect()
            }
            _ if self.hyper.use_meta && weight < 1.0 => own.iter().map(|&x| T::lit(weight) * x).collect(),
            _ => own.to_vec(),
        }
    }

    fn poi_input(&self, p: usize) -> Result<Vec<T>, PoeError> {
        let meta = metadata_vector(&self.vocab.poi_meta[p], &self.poi_item_emb)?;
        Ok(self.blend(self.poi_emb.row(p), meta, self.hyper.alpha))
    }

    fn user_input(&self, u: usize) -> Result<Vec<T>, PoeError> {
        let meta = metadata_vector(&self.vocab.user_meta[u], &self.user_item_emb)?;
        Ok(self.blend(self.user_emb.row(u), meta, self.hyper.beta))
    }

    /// `ReLU(x W + b)` for a single row.
    fn dense_relu(x: &[T], w: &Matrix<T>, b: &[T]) -> Vec<T> {
        let xm = Matrix::row_vector(x.to_vec());
        let h = xm.matmul(w).expect("dims agree");
        h.as_slice().iter().zip(b).map(|(&v, &bb)| crate::numerics::relu(v + bb)).collect()
    }

    /// `(d^q, d^u)` for a user whose previous visit was `prev` at `t_prev`,
    /// queried at `t`.
    pub fn query_intents(&self, user: usize, prev: usize, t_prev: i64, t: i64) -> Result<(Vec<T>, Vec<T>), PoeError> {
        let xq = self.poi_input(prev)?;
        let dq = if self.hyper.use_time {
            let xm = Matrix::row_vector(xq);
            let a = xm.matmul(&self.w0)?;
            let b = xm.matmul(&self.wpi)?;
            let s = T::lit(self.hyper.interval_weight(t - t_prev));
            let bias = self.bucket_bias.row(self.hyper.bucket(t));
            a.as_slice()
                .iter()
                .zip(b.as_slice())
                .zip(bias)
                .map(|((&a, &b), &c)| crate::numerics::relu(a + (b - a) * s + c))
                .collect()
        } else {
            Self::dense_relu(&xq, &self.w0, self.b1.as_slice())
        };
        let du = Self::dense_relu(&self.user_input(user)?, &self.w2, self.b2.as_slice());
        Ok((dq, du))
    }

    /// `c_l` for one candidate.
    pub fn candidate_intent(&self, poi: usize) -> Result<Vec<T>, PoeError> {
        Ok(Self::dense_relu(&self.poi_input(poi)?, &self.w3, self.b3.as_slice()))
    }

    /// Candidate intents of every POI, one row each.
    pub fn candidate_intents(&self) -> Result<Matrix<T>, PoeError> {
        let n = self.vocab.pois.len();
        let mut data = Vec::with_capacity(n * self.hyper.dim);
        for p in 0..n {
            data.extend(self.candidate_intent(p)?);
        }
        Ok(Matrix::from_vec(n, self.hyper.dim, data)?)
    }

    fn resolve(&self, req: &ScoreRequest) -> Result<(usize, usize, i64), PoeError> {
        let user = self.vocab.user(&req.user_id).ok_or_else(|| PoeError::ColdStart(req.user_id.clone()))?;
        let (prev, t_prev) = req.history.last().ok_or_else(|| PoeError::ColdStart(req.user_id.clone()))?;
        let prev = self.vocab.poi(prev).ok_or_else(|| PoeError::UnknownPoi(prev.clone()))?;
        Ok((user, prev, *t_prev))
    }

    /// `y = (d^q + d^u) . c_l`.
    pub fn score(&self, req: &ScoreRequest, candidate: &str) -> Result<T, PoeError> {
        let (user, prev, t_prev) = self.resolve(req)?;
        let (dq, du) = self.query_intents(user, prev, t_prev, req.query_time)?;
        let c = self.vocab.poi(candidate).ok_or_else(|| PoeError::UnknownPoi(candidate.to_string()))?;
        let h: Vec<T> = dq.iter().zip(&du).map(|(&a, &b)| a + b).collect();
        Ok(dot(&h, &self.candidate_intent(c)?))
    }

    /// Candidates by descending score, ties by ascending id, cut to `top_k`.
    pub fn rank_candidates(&self, req: &ScoreRequest, top_k: usize) -> Result<Vec<(String, T)>, PoeError> {
        if req.candidates.is_empty() {
            return Err(PoeError::NoCandidates);
        }
        let (user, prev, t_prev) = self.resolve(req)?;
        let (dq, du) = self.query_intents(user, prev, t_prev, req.query_time)?;
        let h: Vec<T> = dq.iter().zip(&du).map(|(&a, &b)| a + b).collect();
        let mut scored = Vec::with_capacity(req.candidates.len());
        for c in &req.candidates {
            let idx = self.vocab.poi(c).ok_or_else(|| PoeError::UnknownPoi(c.clone()))?;
            scored.push((c.clone(), dot(&h, &self.candidate_intent(idx)?)));
        }
        Ok(sort_ranked(scored, top_k))
    }

    pub(crate) fn leaves(&self, tape: &mut Tape<T>) -> Leaves {
        let p = self.params();
        Leaves {
            vars: std::array::from_fn(|i| tape.leaf(p[i].clone())),
        }
    }

    /// Row-wise blended inputs for the given entity indices on the tape.
    #[allow(clippy::too_many_arguments)]
    fn blended_rows(
        &self,
        tape: &mut Tape<T>,
        emb: Var,
        items: Var,
        meta: &[Vec<usize>],
        n_items: usize,
        idx: &[usize],
        weight: f64,
    ) -> Result<Var, PoeError> {
        let own = tape.gather_rows(emb, idx)?;
        if !self.hyper.use_meta || weight >= 1.0 {
            return Ok(own);
        }
        let mut avg = Matrix::zeros(idx.len(), n_items);
        for (r, &e) in idx.iter().enumerate() {
            let its = &meta[e];
            for &it in its {
                avg.set(r, it, avg.get(r, it) + T::lit(1.0 / its.len() as f64));
            }
        }
        let avg = tape.leaf(avg);
        let m = tape.matmul(avg, items)?;
        let a = tape.scale(own, T::lit(weight))?;
        let b = tape.scale(m, T::lit(1.0 - weight))?;
        Ok(tape.add(a, b)?)
    }

    /// Mean sampled-softmax cross-entropy of a batch on the tape.
    pub(crate) fn batch_loss(&self, tape: &mut Tape<T>, l: &Leaves, batch: &[TrainExample]) -> Result<Var, PoeError> {
        let n = batch.len();
        let k = batch[0].candidates.len();
        let users: Vec<usize> = batch.iter().map(|e| e.user).collect();
        let prevs: Vec<usize> = batch.iter().map(|e| e.prev).collect();
        let v = &self.vocab;

        let xq = self.blended_rows(
            tape,
            l.get("poi_emb"),
            l.get("poi_item_emb"),
            &v.poi_meta,
            v.poi_items.len(),
            &prevs,
            self.hyper.alpha,
        )?;
        let pre_q = if self.hyper.use_time {
            let a = tape.matmul(xq, l.get("w0"))?;
            let b = tape.matmul(xq, l.get("wpi"))?;
            let diff = tape.sub(b, a)?;
            let mut s = Matrix::zeros(n, self.hyper.dim);
            for (r, e) in batch.iter().enumerate() {
                let w = T::lit(self.hyper.interval_weight(e.t - e.t_prev));
                s.row_mut(r).iter_mut().for_each(|x| *x = w);
            }
            let s = tape.leaf(s);
            let mixed = tape.hadamard(diff, s)?;
            let lin = tape.add(a, mixed)?;
            let buckets: Vec<usize> = batch.iter().map(|e| self.hyper.bucket(e.t)).collect();
            let bias = tape.gather_rows(l.get("bucket_bias"), &buckets)?;
            tape.add(lin, bias)?
        } else {
            let a = tape.matmul(xq, l.get("w0"))?;
            tape.add_row(a, l.get("b1"))?
        };
        let dq = tape.relu(pre_q)?;

        let xu = self.blended_rows(
            tape,
            l.get("user_emb"),
            l.get("user_item_emb"),
            &v.user_meta,
            v.user_items.len(),
            &users,
            self.hyper.beta,
        )?;
        let hu = tape.matmul(xu, l.get("w2"))?;
        let hu = tape.add_row(hu, l.get("b2"))?;
        let du = tape.relu(hu)?;
        let h = tape.add(dq, du)?;

        let cand_idx: Vec<usize> = (0..k).flat_map(|j| batch.iter().map(move |e| e.candidates[j])).collect();
        let xc = self.blended_rows(
            tape,
            l.get("poi_emb"),
            l.get("poi_item_emb"),
            &v.poi_meta,
            v.poi_items.len(),
            &cand_idx,
            self.hyper.alpha,
        )?;
        let hc = tape.matmul(xc, l.get("w3"))?;
        let hc = tape.add_row(hc, l.get("b3"))?;
        let c = tape.relu(hc)?;
        let ones = tape.leaf(Matrix::filled(self.hyper.dim, 1, T::one()));
        let mut scores: Option<Var> = None;
        let mut first = None;
        for j in 0..k {
            let rows: Vec<usize> = (j * n..(j + 1) * n).collect();
            let cj = tape.gather_rows(c, &rows)?;
            let prod = tape.hadamard(h, cj)?;
            let y = tape.matmul(prod, ones)?;
            if j == 0 {
                first = Some(y);
            }
            scores = Some(match scores {
                None => y,
                Some(acc) => tape.concat_cols(acc, y)?,
            });
        }
        let scores = scores.expect("at least one candidate");
        let lse = tape.log_sum_exp_rows(scores)?;
        let lse = tape.sum_all(lse)?;
        let pos = tape.sum_all(first.expect("positive column"))?;
        let total = tape.sub(lse, pos)?;
        Ok(tape.scale(total, T::lit(1.0 / n as f64))?)
    }

    /// Mean loss of `batch`; candidate 0 of every example is the true next POI.
    pub fn loss(&self, batch: &[TrainExample]) -> Result<T, PoeError> {
        let mut tape = Tape::new();
        let l = self.leaves(&mut tape);
        let loss = self.batch_loss(&mut tape, &l, batch)?;
        Ok(tape.value(loss)?.scalar())
    }

    pub fn loss_and_grads(&self, batch: &[TrainExample]) -> Result<(T, Vec<Matrix<T>>), PoeError> {
        let mut tape = Tape::new();
        let l = self.leaves(&mut tape);
        let loss = self.batch_loss(&mut tape, &l, batch)?;
        let g = tape.backward(loss)?;
        let grads = l.vars.iter().map(|&v| g.wrt(v)).collect::<Result<Vec<_>, _>>()?;
        Ok((tape.value(loss)?.scalar(), grads))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        let h = &self.hyper;
        for (k, v) in [
            ("dim", h.dim as f64),
            ("alpha", h.alpha),
            ("beta", h.beta),
            ("pi_secs", h.pi_secs),
            ("buckets", h.buckets as f64),
            ("use_meta", f64::from(u8::from(h.use_meta))),
            ("use_time", f64::from(u8::from(h.use_time))),
            ("threshold", h.threshold),
            ("top_k", h.top_k as f64),
        ] {
            ck.meta.insert(k.into(), format!("{v:?}"));
        }
        self.vocab.write_meta(&mut ck.meta);
        for (name, m) in Self::PARAM_NAMES.iter().zip(self.params()) {
            ck.push(name, m);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, PoeError> {
        let hyper = PoeHyper {
            dim: ck.meta_f64("dim")? as usize,
            alpha: ck.meta_f64("alpha")?,
            beta: ck.meta_f64("beta")?,
            pi_secs: ck.meta_f64("pi_secs")?,
            buckets: ck.meta_f64("buckets")? as usize,
            use_meta: ck.meta_f64("use_meta")? != 0.0,
            use_time: ck.meta_f64("use_time")? != 0.0,
            threshold: ck.meta_f64("threshold")?,
            top_k: ck.meta_f64("top_k")? as usize,
            ..PoeHyper::default()
        };
        let vocab = PoeVocab::read_meta(&ck.meta)?;
        let mut model = Self::init(vocab, hyper, 0);
        for (name, slot) in Self::PARAM_NAMES.iter().zip(model.params_mut()) {
            let m = ck.get::<T>(name)?;
            if m.shape() != slot.shape() {
                return Err(NumericsError::Checkpoint {
                    line: 0,
                    msg: format!("tensor {name} has shape {:?}, expected {:?}", m.shape(), slot.shape()),
                }
                .into());
            }
            *slot = m;
        }
        Ok(model)
    }
}

pub(crate) fn sort_ranked<T: Scalar>(mut scored: Vec<(String, T)>, top_k: usize) -> Vec<(String, T)> {
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    scored.truncate(top_k);
    scored
}

/// Visit counts per POI in `log`, used as the cold-start ranking.
pub fn popularity(log: &crate::dataset::CheckInLog) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for r in log.records() {
        *out.entry(r.poi_id.clone()).or_default() += 1;
    }
    out
}
