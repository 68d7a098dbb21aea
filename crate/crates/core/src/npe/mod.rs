//! Key-factor evaluation model.
//!
//! A decision is a set of factor embeddings `F` (one row per factor). Each
//! factor gets an intent embedding from self-projection attention, a small
//! MLP scores how likely each factor is to be a key factor, sparsemax turns the
//! scores into a sparse weight vector `l_hat`, and the decision is scored by
//! the scalar projection of the factor sum onto the aggregate `d = l_hat^T F`.

mod factors;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{self, Checkpoint, Matrix, NumericsError, Scalar, Tape, Var};

pub use factors::{
    distance_bucket, popularity_bucket, DecisionInstance, FactorVocab, NegativeStrategy, PoiFactors, FAMILIES,
    POI_SLOTS,
};
pub use train::{generate_negatives, train_npe, train_npe_with_negatives, NpeTrainLog};

/// Norm below which an embedding or aggregate is treated as zero.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum NpeError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("embedding of factor row {0} has zero norm")]
    DegenerateEmbedding(usize),
    #[error("a decision needs at least 2 factors, got {0}")]
    TooFewFactors(usize),
    #[error("factor id {0} is not in the vocabulary")]
    UnknownFactor(usize),
    #[error("factor vocabulary: {0}")]
    Vocabulary(String),
    #[error("negative pool has {available} alternatives, {requested} requested")]
    PoolTooSmall { available: usize, requested: usize },
    #[error("positive instance has no POI to replace")]
    MissingPoi,
    #[error("no positive instances to train on")]
    NoPositives,
    #[error("non-finite loss at epoch {epoch}; offending batch: {batch}")]
    NonFinite { epoch: usize, batch: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NpeHyper {
    /// Factor embedding width.
    pub dim: usize,
    /// MLP hidden width.
    pub hidden: usize,
    /// Sparsemax temperature: likelihoods are `sparsemax(l / temperature)`.
    pub temperature: f64,
    pub dropout: f64,
    /// Gate threshold on the scalar projection.
    pub threshold: f64,
    /// Weight of the `|d| / |sum f|` regularizer.
    pub sparsity_weight: f64,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub negatives_per_positive: usize,
    pub negative_strategy: NegativeStrategy,
}

impl Default for NpeHyper {
    fn default() -> Self {
        Self {
            dim: 16,
            hidden: 16,
            temperature: 1.0,
            dropout: 0.1,
            threshold: 0.0,
            sparsity_weight: 0.0,
            lr: 0.05,
            momentum: 0.9,
            epochs: 30,
            batch_size: 16,
            grad_clip: 5.0,
            negatives_per_positive: 4,
            negative_strategy: NegativeStrategy::Nearby,
        }
    }
}

/// Parameters of the key-factor model. MLP weights act on row vectors:
/// `h = x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct NpeModel<T> {
    /// `vocab x dim`.
    pub embeddings: Matrix<T>,
    /// `2 dim x hidden`, applied to `[F_hat | F]`.
    pub w1: Matrix<T>,
    pub b1: Matrix<T>,
    /// `hidden x hidden`.
    pub w2: Matrix<T>,
    pub b2: Matrix<T>,
    /// `hidden x 1`: one unnormalized likelihood per factor.
    pub w3: Matrix<T>,
    pub hyper: NpeHyper,
}

/// Likelihoods, aggregate and visit rate of one decision.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyFactorReport<T> {
    /// Raw MLP scores `l`, one per factor.
    pub raw: Vec<T>,
    /// `sparsemax(l / temperature)`.
    pub likelihoods: Vec<T>,
    /// `d = l_hat^T F`.
    pub aggregate: Vec<T>,
    /// `f_hat^T d / |d|` with `f_hat = sum_i f_i`.
    pub projection: T,
    /// `sigmoid(projection)`.
    pub visit_rate: T,
    /// Set when `|d|` vanished; projection is then 0 and the visit rate 0.5.
    pub degenerate: bool,
}

impl<T: Scalar> KeyFactorReport<T> {
    /// Factor positions ordered by likelihood, ties broken by raw score and then
    /// by position.
    pub fn ranked_factors(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.likelihoods.len()).collect();
        idx.sort_by(|&a, &b| {
            self.likelihoods[b]
                .partial_cmp(&self.likelihoods[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(self.raw[b].partial_cmp(&self.raw[a]).unwrap_or(std::cmp::Ordering::Equal))
                .then(a.cmp(&b))
        });
        idx
    }

    pub fn support_size(&self) -> usize {
        self.likelihoods.iter().filter(|&&v| v > T::zero()).count()
    }
}

/// Scalar projection matrix: `P[i][j] = f_i . f_j / |f_i|`.
pub fn projection_matrix<T: Scalar>(f: &Matrix<T>) -> Result<Matrix<T>, NpeError> {
    let mut p = f.matmul(&f.transpose())?;
    for i in 0..f.rows() {
        let n = numerics::norm(f.row(i));
        if n < T::lit(DEGENERATE_NORM) {
            return Err(NpeError::DegenerateEmbedding(i));
        }
        for x in p.row_mut(i) {
            *x = *x / n;
        }
    }
    Ok(p)
}

/// `F_hat = softmax_rows(P) F`.
pub fn intent_embeddings<T: Scalar>(f: &Matrix<T>, p: &Matrix<T>) -> Result<Matrix<T>, NpeError> {
    Ok(numerics::softmax_rows(p).matmul(f)?)
}

/// Tape handles of the model parameters.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Leaves {
    pub emb: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub w3: Var,
}

/// Tape handles of one decision's forward pass.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ForwardVars {
    pub raw: Var,
    pub lhat: Var,
    pub d: Var,
    pub proj: Var,
    pub d_norm: Var,
    pub f_sum_norm: Var,
}

impl<T: Scalar> NpeModel<T> {
    pub const PARAM_NAMES: [&'static str; 6] = ["embeddings", "w1", "b1", "w2", "b2", "w3"];

    /// Glorot-uniform weights, zero biases.
    pub fn init(vocab_len: usize, hyper: NpeHyper, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h) = (hyper.dim, hyper.hidden);
        Self {
            embeddings: Matrix::glorot(vocab_len, d, &mut rng),
            w1: Matrix::glorot(2 * d, h, &mut rng),
            b1: Matrix::zeros(1, h),
            w2: Matrix::glorot(h, h, &mut rng),
            b2: Matrix::zeros(1, h),
            w3: Matrix::glorot(h, 1, &mut rng),
            hyper,
        }
    }

    pub fn params(&self) -> [&Matrix<T>; 6] {
        [&self.embeddings, &self.w1, &self.b1, &self.w2, &self.b2, &self.w3]
    }

    pub fn params_mut(&mut self) -> [&mut Matrix<T>; 6] {
        [
            &mut self.embeddings,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
        ]
    }

    pub fn vocab_len(&self) -> usize {
        self.embeddings.rows()
    }

    /// Factor embedding matrix of a decision, one row per factor.
    pub fn factor_matrix(&self, instance: &DecisionInstance) -> Result<Matrix<T>, NpeError> {
        instance.validate(self.vocab_len())?;
        Ok(self.embeddings.gather_rows(&instance.factors)?)
    }

    pub(crate) fn leaves(&self, tape: &mut Tape<T>) -> Leaves {
        Leaves {
            emb: tape.leaf(self.embeddings.clone()),
            w1: tape.leaf(self.w1.clone()),
            b1: tape.leaf(self.b1.clone()),
            w2: tape.leaf(self.w2.clone()),
            b2: tape.leaf(self.b2.clone()),
            w3: tape.leaf(self.w3.clone()),
        }
    }

    /// `l = Dropout(ReLU(Dropout(ReLU([F_hat | F] W1 + b1)) W2 + b2)) W3`,
    /// returned as a `1 x n` row together with `sparsemax(l / temperature)`.
    pub(crate) fn likelihood_vars<R: Rng>(
        &self,
        tape: &mut Tape<T>,
        leaves: &Leaves,
        f: Var,
        fhat: Var,
        mut dropout: Option<&mut R>,
    ) -> Result<(Var, Var), NpeError> {
        let x = tape.concat_cols(fhat, f)?;
        let h = tape.matmul(x, leaves.w1)?;
        let h = tape.add_row(h, leaves.b1)?;
        let h = tape.relu(h)?;
        let h = self.dropout_var(tape, h, dropout.as_deref_mut())?;
        let h = tape.matmul(h, leaves.w2)?;
        let h = tape.add_row(h, leaves.b2)?;
        let h = tape.relu(h)?;
        let h = self.dropout_var(tape, h, dropout)?;
        let l = tape.matmul(h, leaves.w3)?;
        let raw = tape.transpose(l)?;
        let scaled = tape.scale(raw, T::one() / T::lit(self.hyper.temperature))?;
        let lhat = tape.sparsemax_rows(scaled)?;
        Ok((raw, lhat))
    }

    fn dropout_var<R: Rng>(&self, tape: &mut Tape<T>, h: Var, rng: Option<&mut R>) -> Result<Var, NpeError> {
        match rng {
            Some(rng) if self.hyper.dropout > 0.0 => {
                let (r, c) = tape.value(h)?.shape();
                let mask = tape.leaf(numerics::dropout_mask(r, c, self.hyper.dropout, rng));
                Ok(tape.hadamard(h, mask)?)
            }
            _ => Ok(h),
        }
    }

    /// Full forward pass of one decision on `tape`.
    pub(crate) fn forward<R: Rng>(
        &self,
        tape: &mut Tape<T>,
        leaves: &Leaves,
        instance: &DecisionInstance,
        dropout: Option<&mut R>,
    ) -> Result<ForwardVars, NpeError> {
        instance.validate(self.vocab_len())?;
        let f = tape.gather_rows(leaves.emb, &instance.factors)?;
        let norms = tape.row_norms(f)?;
        if let Some(i) = tape.value(norms)?.as_slice().iter().position(|&n| n < T::lit(DEGENERATE_NORM)) {
            return Err(NpeError::DegenerateEmbedding(instance.factors[i]));
        }
        let ft = tape.transpose(f)?;
        let gram = tape.matmul(f, ft)?;
        let p = tape.div_rows(gram, norms)?;
        let p_hat = tape.softmax_rows(p)?;
        let fhat = tape.matmul(p_hat, f)?;
        let (raw, lhat) = self.likelihood_vars(tape, leaves, f, fhat, dropout)?;
        let d = tape.matmul(lhat, f)?;
        let f_sum = tape.sum_rows(f)?;
        let d_norm = tape.row_norms(d)?;
        let f_sum_norm = tape.row_norms(f_sum)?;
        let dt = tape.transpose(d)?;
        let dot = tape.matmul(f_sum, dt)?;
        let proj = if tape.value(d_norm)?.scalar() < T::lit(DEGENERATE_NORM) {
            tape.leaf(Matrix::zeros(1, 1))
        } else {
            tape.div(dot, d_norm)?
        };
        Ok(ForwardVars {
            raw,
            lhat,
            d,
            proj,
            d_norm,
            f_sum_norm,
        })
    }

    /// Scores one decision (inference mode, no dropout).
    pub fn visit_rate(&self, instance: &DecisionInstance) -> Result<KeyFactorReport<T>, NpeError> {
        let mut tape = Tape::new();
        let leaves = self.leaves(&mut tape);
        let fw = self.forward::<ChaCha8Rng>(&mut tape, &leaves, instance, None)?;
        let degenerate = tape.value(fw.d_norm)?.scalar() < T::lit(DEGENERATE_NORM);
        let projection = tape.value(fw.proj)?.scalar();
        Ok(KeyFactorReport {
            raw: tape.value(fw.raw)?.as_slice().to_vec(),
            likelihoods: tape.value(fw.lhat)?.as_slice().to_vec(),
            aggregate: tape.value(fw.d)?.as_slice().to_vec(),
            projection,
            visit_rate: if degenerate { T::lit(0.5) } else { numerics::sigmoid(projection) },
            degenerate,
        })
    }

    /// Likelihoods from explicit factor and intent embeddings.
    pub fn factor_likelihoods(&self, f: &Matrix<T>, fhat: &Matrix<T>) -> Result<(Vec<T>, Vec<T>), NpeError> {
        let mut tape = Tape::new();
        let leaves = self.leaves(&mut tape);
        let fv = tape.leaf(f.clone());
        let fh = tape.leaf(fhat.clone());
        let (raw, lhat) = self.likelihood_vars::<ChaCha8Rng>(&mut tape, &leaves, fv, fh, None)?;
        Ok((tape.value(raw)?.as_slice().to_vec(), tape.value(lhat)?.as_slice().to_vec()))
    }

    /// Per-decision loss node: `-log VR` for positives, `-log(1 - VR)` for
    /// negatives, plus the optional sparsity term. `None` for a degenerate
    /// aggregate, whose loss is the constant `ln 2`.
    pub(crate) fn loss_var<R: Rng>(
        &self,
        tape: &mut Tape<T>,
        leaves: &Leaves,
        instance: &DecisionInstance,
        dropout: Option<&mut R>,
    ) -> Result<Option<Var>, NpeError> {
        let fw = self.forward(tape, leaves, instance, dropout)?;
        if tape.value(fw.d_norm)?.scalar() < T::lit(DEGENERATE_NORM) {
            return Ok(None);
        }
        let sign = if instance.positive { T::one() } else { -T::one() };
        let signed = tape.scale(fw.proj, sign)?;
        let ls = tape.log_sigmoid(signed)?;
        let mut loss = tape.scale(ls, -T::one())?;
        if self.hyper.sparsity_weight > 0.0 && tape.value(fw.f_sum_norm)?.scalar() >= T::lit(DEGENERATE_NORM) {
            let ratio = tape.div(fw.d_norm, fw.f_sum_norm)?;
            let reg = tape.scale(ratio, T::lit(self.hyper.sparsity_weight))?;
            loss = tape.add(loss, reg)?;
        }
        Ok(Some(loss))
    }

    /// Training objective summed over `instances`:
    /// `-sum_pos log VR(D) - sum_neg log(1 - VR(D))`, inference mode.
    pub fn objective(&self, instances: &[DecisionInstance]) -> Result<T, NpeError> {
        Ok(self.objective_and_grads(instances, None)?.0)
    }

    /// Objective and its gradient for every parameter, in
    /// [`Self::PARAM_NAMES`] order. `dropout_seed` enables training-mode
    /// dropout.
    pub fn objective_and_grads(
        &self,
        instances: &[DecisionInstance],
        dropout_seed: Option<u64>,
    ) -> Result<(T, Vec<Matrix<T>>), NpeError> {
        let mut tape = Tape::new();
        let leaves = self.leaves(&mut tape);
        let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
        let mut total: Option<Var> = None;
        let mut constant = T::zero();
        for inst in instances {
            match self.loss_var(&mut tape, &leaves, inst, rng.as_mut())? {
                Some(l) => {
                    total = Some(match total {
                        Some(t) => tape.add(t, l)?,
                        None => l,
                    })
                }
                None => constant = constant + T::lit(std::f64::consts::LN_2),
            }
        }
        let Some(total) = total else {
            let grads = self.params().iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
            return Ok((constant, grads));
        };
        let value = tape.value(total)?.scalar() + constant;
        let g = tape.backward(total)?;
        let grads = [leaves.emb, leaves.w1, leaves.b1, leaves.w2, leaves.b2, leaves.w3]
            .iter()
            .map(|&v| g.wrt(v))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((value, grads))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        let h = &self.hyper;
        for (k, v) in [
            ("dim", h.dim as f64),
            ("hidden", h.hidden as f64),
            ("temperature", h.temperature),
            ("dropout", h.dropout),
            ("threshold", h.threshold),
            ("sparsity_weight", h.sparsity_weight),
        ] {
            ck.meta.insert(k.to_string(), format!("{v:?}"));
        }
        ck.meta.insert("model".into(), "npe".into());
        for (name, p) in Self::PARAM_NAMES.iter().zip(self.params()) {
            ck.push(name, p);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, NpeError> {
        let hyper = NpeHyper {
            dim: ck.meta_f64("dim")? as usize,
            hidden: ck.meta_f64("hidden")? as usize,
            temperature: ck.meta_f64("temperature")?,
            dropout: ck.meta_f64("dropout")?,
            threshold: ck.meta_f64("threshold")?,
            sparsity_weight: ck.meta_f64("sparsity_weight")?,
            ..NpeHyper::default()
        };
        Ok(Self {
            embeddings: ck.get("embeddings")?,
            w1: ck.get("w1")?,
            b1: ck.get("b1")?,
            w2: ck.get("w2")?,
            b2: ck.get("b2")?,
            w3: ck.get("w3")?,
            hyper,
        })
    }
}

/// Passes iff the report is non-degenerate and its scalar projection reaches
/// `threshold`.
pub fn npe_gate<T: Scalar>(report: &KeyFactorReport<T>, threshold: f64) -> bool {
    !report.degenerate && report.projection.as_f64() >= threshold
}
