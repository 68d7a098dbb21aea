use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    handle_request, AnonymizeConfig, ClientState, DecisionFactory, Evaluator, FinalResponse, ModelEvaluator,
    PipelineConfig, PipelineError, PoiCatalog, RequestContext, Servers, TraceRecord,
};
use crate::anonymize::ServiceRequest;
use crate::dataset::{CheckInLog, Metadata, SplitCorpus};
use crate::metrics::{auc, mean_average_precision, precision_recall_f1, MetricRow};
use crate::npe::{generate_negatives, train_npe, NpeHyper, NpeModel, NpeTrainLog};
use crate::numerics::{Matrix, Scalar};
use crate::poe::{train_poe, transitions, PoeHyper, PoeModel, PretrainedInit};
use crate::pretrain::{pretrain_poi_embeddings, PoiGraph, WalkConfig};

/// One request per move in `targets`: the user stands at the previous POI
/// and asks for POIs of the category of the one visited next.
pub fn build_requests(context: &CheckInLog, targets: &CheckInLog, catalog: &PoiCatalog) -> Vec<RequestContext> {
    let ctx: HashMap<&str, _> = context.by_user().into_iter().collect();
    let mut out = Vec::new();
    for (user, recs) in targets.by_user() {
        let mut history: Vec<(String, i64)> = ctx
            .get(user)
            .map(|h| h.iter().map(|r| (r.poi_id.clone(), r.timestamp)).collect())
            .unwrap_or_default();
        let mut at = ctx.get(user).and_then(|h| h.last()).map(|r| r.loc());
        for r in recs {
            if let (Some(loc), Some(next)) = (at, catalog.get(&r.poi_id)) {
                out.push(RequestContext {
                    request: ServiceRequest {
                        user_id: user.to_string(),
                        loc,
                        attribute: next.category.clone(),
                        time: r.timestamp,
                    },
                    history: history.clone(),
                    target: Some(r.poi_id.clone()),
                });
            }
            history.push((r.poi_id.clone(), r.timestamp));
            at = Some(r.loc());
        }
    }
    out
}

/// The largest value such that at least `rate` of `values` reach it.
pub fn quantile_threshold(values: &[f64], rate: f64) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let keep = ((rate.clamp(0.0, 1.0) * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Some(v[v.len() - keep])
}

/// Ungated NPE and POE values of cloud answers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawScores {
    pub npe: Vec<f64>,
    pub poe: Vec<f64>,
}

/// Thresholds from cloud answers to `requests`. Each gate keeps the square
/// root of `cfg.acceptance_rate` so that the staged pair keeps about
/// `acceptance_rate`. Configured thresholds are kept as they are.
pub fn calibrate<T: Scalar>(
    evaluator: &ModelEvaluator<'_, T>,
    requests: &[RequestContext],
    servers: &Servers,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<(f64, f64, RawScores), PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut raw = RawScores::default();
    for ctx in requests {
        let answer = servers.cloud.query(&servers.catalog, ctx.request.loc, &ctx.request.attribute, cfg.top_k, &mut rng);
        raw.npe.push(evaluator.npe_outcome(ctx, &answer.candidates, f64::INFINITY)?.value);
        raw.poe.push(evaluator.poe_outcome(ctx, &answer.candidates, f64::INFINITY)?.value);
    }
    let per_gate = cfg.acceptance_rate.clamp(0.0, 1.0).sqrt();
    let fallback = || PipelineError::Config("no finite score to calibrate against".into());
    let t1 = match cfg.thre_1 {
        Some(t) => t,
        None => quantile_threshold(&raw.npe, per_gate).ok_or_else(fallback)?,
    };
    let t2 = match cfg.thre_2 {
        Some(t) => t,
        None => quantile_threshold(&raw.poe, per_gate).ok_or_else(fallback)?,
    };
    Ok((t1, t2, raw))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimulationSummary {
    pub requests: usize,
    pub edge_accepted: usize,
    pub cloud_queried: usize,
    pub cloud_chosen: usize,
    pub low_confidence: usize,
    pub degraded: usize,
    pub total_latency_ms: f64,
    /// Requests whose returned list holds the POI visited next.
    pub hits: usize,
}

impl SimulationSummary {
    pub fn rows(&self) -> Vec<MetricRow> {
        let n = self.requests.max(1) as f64;
        vec![
            MetricRow::new("sim_requests", None, self.requests as f64),
            MetricRow::new("sim_edge_accept_rate", None, self.edge_accepted as f64 / n),
            MetricRow::new("sim_cloud_query_rate", None, self.cloud_queried as f64 / n),
            MetricRow::new("sim_cloud_chosen_rate", None, self.cloud_chosen as f64 / n),
            MetricRow::new("sim_low_confidence_rate", None, self.low_confidence as f64 / n),
            MetricRow::new("sim_degraded_rate", None, self.degraded as f64 / n),
            MetricRow::new("sim_mean_latency_ms", None, self.total_latency_ms / n),
            MetricRow::new("sim_hit_rate", None, self.hits as f64 / n),
        ]
    }
}

/// Runs every request in order through one client.
pub fn simulate(
    requests: &[RequestContext],
    client: &mut ClientState,
    servers: &Servers,
    evaluator: &dyn Evaluator,
    anon: &AnonymizeConfig,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<(SimulationSummary, Vec<FinalResponse>, Vec<TraceRecord>), PipelineError> {
    let mut summary = SimulationSummary::default();
    let mut responses = Vec::with_capacity(requests.len());
    let mut trace = Vec::new();
    for ctx in requests {
        let (resp, t) = handle_request(ctx, client, servers, evaluator, anon, cfg, seed)?;
        summary.requests += 1;
        summary.edge_accepted += usize::from(!resp.cloud_queried);
        summary.cloud_queried += usize::from(resp.cloud_queried);
        summary.cloud_chosen += usize::from(resp.route.source == super::ServerKind::Cloud);
        summary.low_confidence += usize::from(resp.route.low_confidence);
        summary.degraded += usize::from(resp.route.degraded);
        summary.total_latency_ms += resp.latency_ms;
        summary.hits += usize::from(ctx.target.as_ref().is_some_and(|t| resp.candidates.contains(t)));
        responses.push(resp);
        trace.extend(t);
    }
    Ok((summary, responses, trace))
}

/// NPE trained on the moves of the training split.
pub fn train_npe_on_corpus<T: Scalar>(
    corpus: &SplitCorpus,
    factory: &DecisionFactory,
    hyper: &NpeHyper,
    seed: u64,
) -> Result<(NpeModel<T>, NpeTrainLog), PipelineError> {
    let positives = factory.positives(&CheckInLog::default(), &corpus.train);
    Ok(train_npe(&positives, &factory.pool(), factory.vocab().len(), hyper, seed)?)
}

/// AUC of visit rates on the moves of `targets` against one synthesized
/// negative each.
pub fn npe_auc<T: Scalar>(
    model: &NpeModel<T>,
    factory: &DecisionFactory,
    context: &CheckInLog,
    targets: &CheckInLog,
    seed: u64,
) -> Result<f64, PipelineError> {
    let positives = factory.positives(context, targets);
    let pool = factory.pool();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for p in &positives {
        pos.push(model.visit_rate(p)?.visit_rate);
        for n in generate_negatives(p, &pool, model.hyper.negative_strategy, 1, rng.gen())? {
            neg.push(model.visit_rate(&n)?.visit_rate);
        }
    }
    Ok(auc(&pos, &neg)?)
}

/// MAP and mean precision, recall and F1 at `k` on the test split.
pub fn poe_metrics<T: Scalar>(model: &PoeModel<T>, corpus: &SplitCorpus, k: usize) -> Result<Vec<MetricRow>, PipelineError> {
    let context = CheckInLog::concat(&[&corpus.train, &corpus.validation]);
    let queries = transitions(&context, &corpus.test, &model.vocab);
    let results = model.rankings(&queries)?;
    if results.is_empty() {
        return Err(PipelineError::Config("test split has no transitions".into()));
    }
    let n = results.len() as f64;
    let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
    for res in &results {
        let m = precision_recall_f1(res, k)?;
        p += m.precision;
        r += m.recall;
        f += m.f1;
    }
    Ok(vec![
        MetricRow::new("map", None, mean_average_precision(&results)?),
        MetricRow::new("precision", Some(k), p / n),
        MetricRow::new("recall", Some(k), r / n),
        MetricRow::new("f1", Some(k), f / n),
    ])
}

/// Sweep settings. An empty grid produces an empty report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Adds the random-initialization row `-` to the rho table.
    pub include_random: bool,
    pub rho: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub dim: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            include_random: true,
            rho: vec![0.0, 0.3, 0.5, 0.7, 1.0],
            alpha: vec![0.2, 0.5, 0.8],
            beta: vec![0.2, 0.5, 0.8],
            dim: vec![5, 10, 20, 50],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    /// Setting values in column order.
    pub setting: Vec<String>,
    pub validation_map: f64,
    pub test_map: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentReport {
    pub rho: Vec<GridRow>,
    pub alpha_beta: Vec<GridRow>,
    pub dim: Vec<GridRow>,
}

fn table(header: &str, rows: &[GridRow]) -> String {
    let mut out = format!("{header},validation_map,test_map\n");
    for r in rows {
        let _ = writeln!(out, "{},{:.6},{:.6}", r.setting.join(","), r.validation_map, r.test_map);
    }
    out
}

impl ExperimentReport {
    pub fn is_empty(&self) -> bool {
        self.rho.is_empty() && self.alpha_beta.is_empty() && self.dim.is_empty()
    }

    pub fn rho_csv(&self) -> String {
        table("rho", &self.rho)
    }

    pub fn alpha_beta_csv(&self) -> String {
        table("alpha,beta", &self.alpha_beta)
    }

    pub fn dim_csv(&self) -> String {
        table("dim", &self.dim)
    }
}

struct Runner<'a> {
    corpus: &'a SplitCorpus,
    meta: &'a Metadata,
    walk: &'a WalkConfig,
    graph: PoiGraph,
    seed: u64,
    /// Pretrained tables by `(rho bits, dim)`.
    cache: BTreeMap<(u64, usize), Matrix<f64>>,
}

impl Runner<'_> {
    fn pretrained(&mut self, rho: f64, dim: usize) -> Result<PretrainedInit<f64>, PipelineError> {
        let key = (rho.to_bits(), dim);
        if !self.cache.contains_key(&key) {
            let cfg = WalkConfig {
                rho,
                seed: self.seed,
                ..self.walk.clone()
            };
            let (table, _) = pretrain_poi_embeddings::<f64>(&self.graph, dim, &cfg)?;
            self.cache.insert(key, table);
        }
        Ok(PretrainedInit {
            ids: self.graph.ids().to_vec(),
            table: self.cache[&key].clone(),
        })
    }

    fn run(&mut self, setting: Vec<String>, hyper: &PoeHyper, rho: Option<f64>) -> Result<GridRow, PipelineError> {
        let init = rho.map(|r| self.pretrained(r, hyper.dim)).transpose()?;
        let (model, log) = train_poe::<f64>(self.corpus, self.meta, hyper, init.as_ref(), self.seed)?;
        let context = CheckInLog::concat(&[&self.corpus.train, &self.corpus.validation]);
        let test = transitions(&context, &self.corpus.test, &model.vocab);
        Ok(GridRow {
            setting,
            validation_map: log.best_map,
            test_map: model.evaluate_map(&test)?,
        })
    }
}

/// The rho table (random init plus each pretraining rho), the alpha/beta grid
/// and the dimension sweep. The last two use pretraining at `walk.rho`.
pub fn run_experiment(
    corpus: &SplitCorpus,
    meta: &Metadata,
    poe: &PoeHyper,
    walk: &WalkConfig,
    grid: &ExperimentConfig,
    seed: u64,
) -> Result<ExperimentReport, PipelineError> {
    let mut report = ExperimentReport::default();
    let ab_cells = grid.alpha.len() * grid.beta.len();
    if !grid.include_random && grid.rho.is_empty() && ab_cells == 0 && grid.dim.is_empty() {
        return Ok(report);
    }
    let all = CheckInLog::concat(&[&corpus.train, &corpus.validation, &corpus.test]);
    let mut runner = Runner {
        corpus,
        meta,
        walk,
        graph: PoiGraph::build(&all.poi_locations(), &corpus.train, walk.nearest)?,
        seed,
        cache: BTreeMap::new(),
    };
    if grid.include_random {
        report.rho.push(runner.run(vec!["-".into()], poe, None)?);
    }
    for &rho in &grid.rho {
        report.rho.push(runner.run(vec![rho.to_string()], poe, Some(rho))?);
    }
    for &alpha in &grid.alpha {
        for &beta in &grid.beta {
            let hyper = PoeHyper { alpha, beta, ..poe.clone() };
            report.alpha_beta.push(runner.run(vec![alpha.to_string(), beta.to_string()], &hyper, Some(walk.rho))?);
        }
    }
    for &dim in &grid.dim {
        let hyper = PoeHyper { dim, ..poe.clone() };
        report.dim.push(runner.run(vec![dim.to_string()], &hyper, Some(walk.rho))?);
    }
    Ok(report)
}
