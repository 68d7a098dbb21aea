//! POI-embedding pre-training: a transition graph mixed with a geographic
//! kernel, random walks over it, skip-gram with negative sampling, and
//! frequency-weighted user initialization.

use std::collections::{BTreeMap, HashMap};

use log::warn;
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::CheckInLog;
use crate::geo::{haversine_km, LatLon};
use crate::numerics::{sigmoid, Checkpoint, Matrix, NumericsError, Scalar};

/// Floor applied to a vanishing distance deviation.
pub const SIGMA_FLOOR: f64 = 1e-6;
/// Default number of nearest POIs kept in the geographic term.
pub const DEFAULT_NEAREST: usize = 200;

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error("graph has no nodes")]
    EmptyGraph,
    #[error("node {0} has no outgoing transitions and rho = 0")]
    DegenerateNode(usize),
    #[error("every node is degenerate at rho = {0}")]
    NoLiveNodes(f64),
    #[error("rho {0} outside [0, 1]")]
    Rho(f64),
    #[error("walk corpus is empty")]
    NoWalks,
    #[error("non-finite value during skip-gram epoch {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// POIs with observed consecutive-visit counts and the distance statistics
/// of the observed transitions.
#[derive(Debug, Clone)]
pub struct PoiGraph {
    ids: Vec<String>,
    locs: Vec<LatLon>,
    index: HashMap<String, usize>,
    /// Out-transition counts per node, self-loops excluded.
    counts: Vec<BTreeMap<usize, f64>>,
    /// Kernel values to the nearest other nodes.
    geo: Vec<Vec<(usize, f64)>>,
    mu: f64,
    sigma: f64,
}

pub fn geo_kernel(d: f64, mu: f64, sigma: f64) -> f64 {
    1.0 / (1.0 + ((d - mu) / sigma).exp())
}

impl PoiGraph {
    /// Nodes are all of `pois`; counts come from consecutive check-ins of
    /// each user in `train`.
    pub fn build(pois: &BTreeMap<String, LatLon>, train: &CheckInLog, nearest: usize) -> Result<Self, PretrainError> {
        let ids: Vec<String> = pois.keys().cloned().collect();
        let index: HashMap<String, usize> = ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        let mut counts = vec![BTreeMap::new(); ids.len()];
        for (_, recs) in train.by_user() {
            for w in recs.windows(2) {
                let (Some(&a), Some(&b)) = (index.get(&w[0].poi_id), index.get(&w[1].poi_id)) else {
                    continue;
                };
                if a != b {
                    *counts[a].entry(b).or_insert(0.0) += 1.0;
                }
            }
        }
        Self::from_counts(ids, pois.values().copied().collect(), counts, nearest)
    }

    pub fn from_counts(
        ids: Vec<String>,
        locs: Vec<LatLon>,
        counts: Vec<BTreeMap<usize, f64>>,
        nearest: usize,
    ) -> Result<Self, PretrainError> {
        if ids.is_empty() {
            return Err(PretrainError::EmptyGraph);
        }
        let dists: Vec<f64> = counts
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.keys().map(move |&j| (i, j)))
            .map(|(i, j)| haversine_km(locs[i], locs[j]))
            .collect();
        let (mu, mut sigma) = if dists.is_empty() {
            (0.0, 0.0)
        } else {
            let n = dists.len() as f64;
            let mu = dists.iter().sum::<f64>() / n;
            (mu, (dists.iter().map(|d| (d - mu).powi(2)).sum::<f64>() / n).sqrt())
        };
        if sigma < SIGMA_FLOOR {
            warn!("transition distance deviation {sigma} clamped to {SIGMA_FLOOR}");
            sigma = SIGMA_FLOOR;
        }
        let geo = (0..ids.len())
            .map(|i| {
                let mut near: Vec<(usize, f64)> = (0..ids.len())
                    .filter(|&j| j != i)
                    .map(|j| (j, haversine_km(locs[i], locs[j])))
                    .collect();
                near.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite distance").then(a.0.cmp(&b.0)));
                near.truncate(nearest);
                let mut row: Vec<(usize, f64)> = near.into_iter().map(|(j, d)| (j, geo_kernel(d, mu, sigma))).collect();
                row.sort_by_key(|&(j, _)| j);
                row
            })
            .collect();
        let index = ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        Ok(Self {
            ids,
            locs,
            index,
            counts,
            geo,
            mu,
            sigma,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn loc(&self, i: usize) -> LatLon {
        self.locs[i]
    }

    pub fn distance_stats(&self) -> (f64, f64) {
        (self.mu, self.sigma)
    }

    pub fn out_counts(&self, i: usize) -> &BTreeMap<usize, f64> {
        &self.counts[i]
    }

    /// Next-node distribution of node `i`: `rho` times the normalized
    /// kernel plus `1 - rho` times the normalized transition counts. A node
    /// without observed transitions falls back to the kernel term alone.
    pub fn transition_distribution(&self, i: usize, rho: f64) -> Result<Vec<(usize, f64)>, PretrainError> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(PretrainError::Rho(rho));
        }
        let freq_total: f64 = self.counts[i].values().sum();
        let geo_total: f64 = self.geo[i].iter().map(|&(_, k)| k).sum();
        let (w_geo, w_freq) = match (freq_total > 0.0, geo_total > 0.0) {
            (true, true) => (rho, 1.0 - rho),
            (true, false) => (0.0, 1.0),
            (false, true) if rho > 0.0 => (1.0, 0.0),
            _ => return Err(PretrainError::DegenerateNode(i)),
        };
        let mut row: BTreeMap<usize, f64> = BTreeMap::new();
        if w_geo > 0.0 {
            for &(j, k) in &self.geo[i] {
                *row.entry(j).or_default() += w_geo * k / geo_total;
            }
        }
        if w_freq > 0.0 {
            for (&j, &c) in &self.counts[i] {
                *row.entry(j).or_default() += w_freq * c / freq_total;
            }
        }
        Ok(row.into_iter().filter(|&(_, p)| p > 0.0).collect())
    }
}

/// Random-walk and skip-gram settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WalkConfig {
    pub rho: f64,
    /// Nodes per walk, start node included.
    pub walk_length: usize,
    pub walks_per_node: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub lr: f64,
    pub nearest: usize,
    pub seed: u64,
}

impl Default for WalkConfig {
    fn default() -> Self {
        Self {
            rho: 0.0,
            walk_length: 20,
            walks_per_node: 10,
            window: 3,
            negatives: 5,
            epochs: 5,
            lr: 0.025,
            nearest: DEFAULT_NEAREST,
            seed: 0,
        }
    }
}

/// Precomputed samplers for every node at a fixed `rho`.
pub struct TransitionTable {
    rows: Vec<Option<(Vec<usize>, WeightedIndex<f64>)>>,
}

impl TransitionTable {
    pub fn new(graph: &PoiGraph, rho: f64) -> Result<Self, PretrainError> {
        let mut rows = Vec::with_capacity(graph.len());
        for i in 0..graph.len() {
            match graph.transition_distribution(i, rho) {
                Ok(row) => {
                    let (next, p): (Vec<usize>, Vec<f64>) = row.into_iter().unzip();
                    rows.push(Some((next, WeightedIndex::new(p).expect("positive row"))));
                }
                Err(PretrainError::DegenerateNode(_)) => rows.push(None),
                Err(e) => return Err(e),
            }
        }
        if rows.iter().all(Option::is_none) {
            return Err(PretrainError::NoLiveNodes(rho));
        }
        Ok(Self { rows })
    }

    /// Next node after `i`, or `None` when `i` is degenerate.
    pub fn step<R: Rng>(&self, i: usize, rng: &mut R) -> Option<usize> {
        self.rows[i].as_ref().map(|(next, dist)| next[dist.sample(rng)])
    }
}

/// `walks_per_node` walks from every node. Each walk draws from its own
/// ChaCha stream; a walk reaching a degenerate node restarts at a uniform
/// random node.
pub fn random_walks(graph: &PoiGraph, cfg: &WalkConfig) -> Result<Vec<Vec<usize>>, PretrainError> {
    if graph.is_empty() {
        return Err(PretrainError::EmptyGraph);
    }
    let table = TransitionTable::new(graph, cfg.rho)?;
    let mut walks = Vec::with_capacity(graph.len() * cfg.walks_per_node);
    for w in 0..cfg.walks_per_node {
        for start in 0..graph.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream((w * graph.len() + start) as u64);
            let mut walk = Vec::with_capacity(cfg.walk_length);
            let mut at = start;
            while walk.len() < cfg.walk_length {
                walk.push(at);
                at = match table.step(at, &mut rng) {
                    Some(n) => n,
                    None => rng.gen_range(0..graph.len()),
                };
            }
            walks.push(walk);
        }
    }
    Ok(walks)
}

/// Skip-gram with negative sampling over `walks`. Returns the input table
/// and the mean loss of each epoch.
pub fn skipgram_train<T: Scalar>(
    walks: &[Vec<usize>],
    n_nodes: usize,
    dim: usize,
    cfg: &WalkConfig,
) -> Result<(Matrix<T>, Vec<f64>), PretrainError> {
    if walks.iter().all(Vec::is_empty) {
        return Err(PretrainError::NoWalks);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x736b_6970);
    let mut input = Matrix::<T>::uniform(n_nodes, dim, 0.5 / dim as f64, &mut rng);
    let mut output = Matrix::<T>::zeros(n_nodes, dim);
    let mut freq = vec![0.0f64; n_nodes];
    for &n in walks.iter().flatten() {
        freq[n] += 1.0;
    }
    let noise = WeightedIndex::new(freq.iter().map(|f| f.powf(0.75))).expect("non-empty corpus");
    let pairs_per_epoch: usize = walks.iter().map(|w| w.len() * 2 * cfg.window).sum::<usize>().max(1);
    let total_steps = (cfg.epochs * pairs_per_epoch) as f64;
    let mut step = 0usize;
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut grad_in = vec![T::zero(); dim];

    for epoch in 0..cfg.epochs {
        let mut loss = 0.0;
        let mut pairs = 0usize;
        for walk in walks {
            for (ci, &center) in walk.iter().enumerate() {
                let lo = ci.saturating_sub(cfg.window);
                let hi = (ci + cfg.window + 1).min(walk.len());
                for (xi, &context) in walk.iter().enumerate().take(hi).skip(lo) {
                    if xi == ci {
                        continue;
                    }
                    let lr = T::lit(cfg.lr * (1.0 - step as f64 / total_steps).max(1e-4));
                    step += 1;
                    grad_in.iter_mut().for_each(|g| *g = T::zero());
                    let targets = std::iter::once((context, true))
                        .chain((0..cfg.negatives).map(|_| (noise.sample(&mut rng), false)));
                    for (target, label) in targets {
                        if !label && target == context {
                            continue;
                        }
                        let score = crate::numerics::dot(input.row(center), output.row(target));
                        let s = sigmoid(score);
                        let p = if label { s } else { T::one() - s };
                        loss -= p.as_f64().max(1e-300).ln();
                        let g = if label { s - T::one() } else { s };
                        for (k, gi) in grad_in.iter_mut().enumerate() {
                            *gi = *gi + g * output.get(target, k);
                        }
                        let row_in: Vec<T> = input.row(center).to_vec();
                        for (o, x) in output.row_mut(target).iter_mut().zip(row_in) {
                            *o = *o - lr * g * x;
                        }
                    }
                    for (x, g) in input.row_mut(center).iter_mut().zip(&grad_in) {
                        *x = *x - lr * *g;
                    }
                    pairs += 1;
                }
            }
        }
        let mean = loss / pairs.max(1) as f64;
        if !mean.is_finite() || !input.is_finite() {
            return Err(PretrainError::NonFinite(epoch));
        }
        losses.push(mean);
    }
    Ok((input, losses))
}

/// Walks plus skip-gram in one call.
pub fn pretrain_poi_embeddings<T: Scalar>(
    graph: &PoiGraph,
    dim: usize,
    cfg: &WalkConfig,
) -> Result<(Matrix<T>, Vec<f64>), PretrainError> {
    let walks = random_walks(graph, cfg)?;
    skipgram_train(&walks, graph.len(), dim, cfg)
}

/// Each user's embedding is the visit-count weighted mean of the embeddings
/// of the POIs they visited in `train`. Users with no usable check-in get a
/// random row and are listed in the second return value.
pub fn init_user_embeddings<T: Scalar>(
    train: &CheckInLog,
    users: &[String],
    poi_index: &HashMap<String, usize>,
    poi_emb: &Matrix<T>,
    seed: u64,
) -> (Matrix<T>, Vec<String>) {
    let dim = poi_emb.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let by_user: HashMap<&str, _> = train.by_user().into_iter().collect();
    let mut out = Matrix::zeros(users.len(), dim);
    let mut cold = Vec::new();
    for (u, user) in users.iter().enumerate() {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for r in by_user.get(user.as_str()).copied().unwrap_or(&[]) {
            if let Some(&j) = poi_index.get(&r.poi_id) {
                *counts.entry(j).or_default() += 1;
            }
        }
        let total: usize = counts.values().sum();
        if total == 0 {
            let fresh = Matrix::<T>::uniform(1, dim, 0.5 / dim as f64, &mut rng);
            out.row_mut(u).copy_from_slice(fresh.as_slice());
            cold.push(user.clone());
            continue;
        }
        let row = out.row_mut(u);
        for (&j, &c) in &counts {
            let w = T::lit(c as f64 / total as f64);
            for (x, q) in row.iter_mut().zip(poi_emb.row(j)) {
                *x = *x + w * *q;
            }
        }
    }
    (out, cold)
}

/// Embedding table with its row ids, in the checkpoint format.
pub fn embedding_checkpoint<T: Scalar>(ids: &[String], table: &Matrix<T>) -> Checkpoint {
    let mut ck = Checkpoint::default();
    ck.meta.insert("ids".into(), ids.join(","));
    ck.push("poi_embeddings", table);
    ck
}

pub fn embedding_from_checkpoint<T: Scalar>(ck: &Checkpoint) -> Result<(Vec<String>, Matrix<T>), PretrainError> {
    let table = ck.get::<T>("poi_embeddings")?;
    let ids: Vec<String> = ck
        .meta
        .get("ids")
        .map(|s| s.split(',').map(str::to_string).collect())
        .unwrap_or_default();
    if ids.len() != table.rows() {
        return Err(NumericsError::Checkpoint {
            line: 0,
            msg: format!("{} ids for {} embedding rows", ids.len(), table.rows()),
        }
        .into());
    }
    Ok((ids, table))
}
