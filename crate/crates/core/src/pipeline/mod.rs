//! Edge-first query routing: a client anonymizes a request, the edge server
//! answers, two gates judge the answer and failing answers escalate to the
//! cloud.

mod decisions;
mod experiment;
mod server;

#[cfg(test)]
mod tests;

use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::anonymize::{deanonymize, k_anonymize, AnonymizeError, CloakRegion, PseudonymTable, ServiceRequest};
use crate::crypto::{encrypt, keygen_with_exponent, Ciphertext, CryptoError, RsaKeyPair};
use crate::geo::LatLon;
use crate::npe::{npe_gate, NpeError, NpeModel};
use crate::numerics::Scalar;
use crate::poe::{poe_gate, PoeError, PoeModel, ScoreRequest};

pub use decisions::{hour_of_day, DecisionFactory};
pub use experiment::{
    build_requests, calibrate, npe_auc, poe_metrics, quantile_threshold, run_experiment, simulate, train_npe_on_corpus,
    ExperimentConfig, ExperimentReport, GridRow, RawScores, SimulationSummary,
};
pub use server::{PoiCatalog, PoiRecord, ServerAnswer, ServerConfig, ServerKind, Servers, SimServer, UNCATEGORIZED};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Anonymize(#[from] AnonymizeError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Npe(#[from] NpeError),
    #[error(transparent)]
    Poe(#[from] PoeError),
    #[error(transparent)]
    Pretrain(#[from] crate::pretrain::PretrainError),
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
    #[error(transparent)]
    Metric(#[from] crate::metrics::MetricError),
    #[error("{0}")]
    Config(String),
}

/// Client and routing settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Length of every returned candidate list.
    pub top_k: usize,
    /// NPE gate on the best scalar projection among the candidates; `None`
    /// means calibrate.
    pub thre_1: Option<f64>,
    /// POE gate on the mean sigmoid score; `None` means calibrate.
    pub thre_2: Option<f64>,
    /// Share of validation answers both gates should accept when calibrating.
    pub acceptance_rate: f64,
    /// RSA modulus size for the client's encrypted location store; 0 stores
    /// nothing.
    pub key_bits: u64,
    pub servers: ServerConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            top_k: 10,
            thre_1: None,
            thre_2: None,
            acceptance_rate: 0.7,
            key_bits: 512,
            servers: ServerConfig::default(),
        }
    }
}

/// Client-side anonymization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnonymizeConfig {
    pub k: usize,
    /// Half side of the square cloaking region around the user, in km.
    pub region_half_km: f64,
    pub perturbation: f64,
}

impl Default for AnonymizeConfig {
    fn default() -> Self {
        Self {
            k: 5,
            region_half_km: 1.0,
            perturbation: crate::anonymize::DEFAULT_PERTURBATION,
        }
    }
}

/// A service request plus what the trusted client knows about the user.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestContext {
    pub request: ServiceRequest,
    /// Earlier visits `(poi_id, timestamp)` in time order.
    pub history: Vec<(String, i64)>,
    /// The POI actually visited next, when known.
    pub target: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GateOutcome {
    pub pass: bool,
    pub value: f64,
}

/// Gate results for one server's answer. `poe` is `None` when the NPE gate
/// already failed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvaluationVerdict {
    pub server: ServerKind,
    pub npe: GateOutcome,
    pub poe: Option<GateOutcome>,
}

impl EvaluationVerdict {
    pub fn passed(&self) -> bool {
        self.npe.pass && self.poe.is_some_and(|p| p.pass)
    }

    /// The POE aggregate used to compare answers; minus infinity when POE
    /// was not reached.
    pub fn aggregate(&self) -> f64 {
        self.poe.map_or(f64::NEG_INFINITY, |p| p.value)
    }
}

/// Judges a server's candidate list for a request.
pub trait Evaluator {
    fn evaluate(&self, ctx: &RequestContext, candidates: &[String], server: ServerKind) -> Result<EvaluationVerdict, PipelineError>;
}

/// The two trained models behind their thresholds.
pub struct ModelEvaluator<'a, T> {
    pub npe: &'a NpeModel<T>,
    pub poe: &'a PoeModel<T>,
    pub factory: &'a DecisionFactory,
    pub thre_1: f64,
    pub thre_2: f64,
}

impl<T: Scalar> ModelEvaluator<'_, T> {
    /// Best scalar projection among the candidates, with whether that
    /// candidate passes the NPE gate at `threshold`.
    pub fn npe_outcome(&self, ctx: &RequestContext, candidates: &[String], threshold: f64) -> Result<GateOutcome, PipelineError> {
        let mut best = GateOutcome {
            pass: false,
            value: f64::NEG_INFINITY,
        };
        for c in candidates {
            let Some(inst) = self.factory.instance(c, ctx.request.loc, ctx.request.time, true) else {
                continue;
            };
            let report = self.npe.visit_rate(&inst)?;
            let value = if report.degenerate { f64::NEG_INFINITY } else { report.projection.as_f64() };
            if value > best.value {
                best = GateOutcome {
                    pass: npe_gate(&report, threshold),
                    value,
                };
            }
        }
        Ok(best)
    }

    /// Mean sigmoid score of the candidates. A user without usable history
    /// gets the neutral aggregate 0.5.
    pub fn poe_outcome(&self, ctx: &RequestContext, candidates: &[String], threshold: f64) -> Result<GateOutcome, PipelineError> {
        let req = ScoreRequest {
            user_id: ctx.request.user_id.clone(),
            history: ctx.history.clone(),
            query_time: ctx.request.time,
            candidates: candidates.to_vec(),
        };
        let v = match self.poe.rank_candidates(&req, candidates.len()) {
            Ok(ranked) => poe_gate(&ranked.iter().map(|(_, s)| *s).collect::<Vec<T>>(), threshold),
            Err(PoeError::ColdStart(_)) => crate::poe::PoeVerdict {
                pass: 0.5 >= threshold,
                aggregate: 0.5,
            },
            Err(PoeError::NoCandidates) => crate::poe::PoeVerdict {
                pass: false,
                aggregate: f64::NEG_INFINITY,
            },
            Err(e) => return Err(e.into()),
        };
        Ok(GateOutcome {
            pass: v.pass,
            value: v.aggregate,
        })
    }
}

impl<T: Scalar> Evaluator for ModelEvaluator<'_, T> {
    fn evaluate(&self, ctx: &RequestContext, candidates: &[String], server: ServerKind) -> Result<EvaluationVerdict, PipelineError> {
        let npe = self.npe_outcome(ctx, candidates, self.thre_1)?;
        let poe = if npe.pass { Some(self.poe_outcome(ctx, candidates, self.thre_2)?) } else { None };
        Ok(EvaluationVerdict { server, npe, poe })
    }
}

/// Which answer the client returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Route {
    pub source: ServerKind,
    /// Neither answer passed both gates.
    pub low_confidence: bool,
    /// The cloud was needed but unreachable.
    pub degraded: bool,
}

/// Routing rule. `cloud` is `None` when the edge passed (cloud not asked) or
/// when the cloud was unreachable; `cloud_asked` tells the two apart.
pub fn route(edge: &EvaluationVerdict, cloud: Option<&EvaluationVerdict>, cloud_asked: bool) -> Route {
    let pick = |source, low_confidence, degraded| Route {
        source,
        low_confidence,
        degraded,
    };
    if edge.passed() {
        return pick(ServerKind::Edge, false, false);
    }
    let Some(cloud) = cloud else {
        return pick(ServerKind::Edge, true, cloud_asked);
    };
    if cloud.passed() {
        pick(ServerKind::Cloud, false, false)
    } else if cloud.aggregate() > edge.aggregate() {
        pick(ServerKind::Cloud, true, false)
    } else {
        pick(ServerKind::Edge, true, false)
    }
}

/// One line of the decision trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRecord {
    pub batch: u64,
    pub stage: &'static str,
    pub detail: serde_json::Value,
}

impl TraceRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trace records serialize")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinalResponse {
    pub candidates: Vec<String>,
    pub route: Route,
    pub edge: EvaluationVerdict,
    pub cloud: Option<EvaluationVerdict>,
    pub cloud_queried: bool,
    pub latency_ms: f64,
}

/// What the client keeps between requests.
#[derive(Debug, Default)]
pub struct ClientState {
    pub pseudonyms: PseudonymTable,
    pub next_batch: u64,
    pub key: Option<RsaKeyPair>,
    /// Encrypted `(lat, lon)` of past requests.
    pub location_store: Vec<(Ciphertext, Ciphertext)>,
}

/// Public exponent of the client's store key. With e = 3 a micro-degree
/// coordinate cubed stays below the modulus and an integer cube root would
/// recover it.
pub const STORE_EXPONENT: u32 = 65_537;

/// Key pair for the client's encrypted location store.
pub fn client_key(bits: u64, seed: u64) -> Result<RsaKeyPair, PipelineError> {
    Ok(keygen_with_exponent(bits, seed, Some(BigUint::from(STORE_EXPONENT)))?)
}

/// Micro-degrees shifted to be non-negative.
pub fn encode_coordinate(deg: f64, offset: f64) -> BigUint {
    BigUint::from(((deg + offset) * 1e6).round().max(0.0) as u64)
}

impl ClientState {
    pub fn new(key: Option<RsaKeyPair>) -> Self {
        Self {
            key,
            ..Self::default()
        }
    }

    fn store_location(&mut self, loc: LatLon) -> Result<Option<u64>, PipelineError> {
        let Some(key) = &self.key else { return Ok(None) };
        let public = key.public();
        let lat = encrypt(&encode_coordinate(loc.lat, 90.0), &public)?;
        let lon = encrypt(&encode_coordinate(loc.lon, 180.0), &public)?;
        let bits = lat.value().bits().max(lon.value().bits());
        self.location_store.push((lat, lon));
        Ok(Some(bits))
    }
}

fn gate_json(v: &EvaluationVerdict) -> serde_json::Value {
    let num = |x: f64| if x.is_finite() { json!(x) } else { json!(null) };
    json!({
        "server": v.server.as_str(),
        "npe": { "pass": v.npe.pass, "value": num(v.npe.value) },
        "poe": v.poe.map(|p| json!({ "pass": p.pass, "value": num(p.value) })),
        "passed": v.passed(),
    })
}

/// Sends the anonymized batch to `server` and keeps the answer addressed to
/// the real pseudonym.
fn ask<R: Rng>(
    server: &SimServer,
    catalog: &PoiCatalog,
    batch: &crate::anonymize::AnonymizedBatch,
    table: &PseudonymTable,
    batch_id: u64,
    top_k: usize,
    rng: &mut R,
) -> Result<ServerAnswer, PipelineError> {
    let answers: Vec<(String, ServerAnswer)> = batch
        .entries
        .iter()
        .map(|e| (e.fid.clone(), server.query(catalog, e.loc, &e.attribute, top_k, rng)))
        .collect();
    Ok(deanonymize(answers, table, batch_id)?)
}

/// Runs one request through anonymization, the edge, the gates and, when an
/// edge gate fails, the cloud. The trace starts after anonymization and never
/// carries the user id.
pub fn handle_request(
    ctx: &RequestContext,
    client: &mut ClientState,
    servers: &Servers,
    evaluator: &dyn Evaluator,
    anon: &AnonymizeConfig,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<(FinalResponse, Vec<TraceRecord>), PipelineError> {
    let batch_id = client.next_batch;
    client.next_batch += 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(batch_id);
    let mut trace = Vec::new();
    let mut log = |stage, detail| {
        trace.push(TraceRecord {
            batch: batch_id,
            stage,
            detail,
        })
    };

    let region = CloakRegion::square_km(ctx.request.loc, anon.region_half_km)?;
    let attributes = servers.catalog.categories();
    let batch = k_anonymize(&ctx.request, &region, anon.k, &attributes, anon.perturbation, rng.gen())?;
    client.pseudonyms.record(batch_id, &batch, &ctx.request.user_id);
    let fids: Vec<&str> = batch.entries.iter().map(|e| e.fid.as_str()).collect();
    log("anonymize", json!({ "k": batch.k, "fids": fids }));
    if let Some(bits) = client.store_location(ctx.request.loc)? {
        log("encrypt", json!({ "ciphertext_bits": bits }));
    }

    let edge_answer = ask(&servers.edge, &servers.catalog, &batch, &client.pseudonyms, batch_id, cfg.top_k, &mut rng)?;
    log(
        "edge_query",
        json!({ "candidates": edge_answer.candidates, "degraded": edge_answer.degraded, "latency_ms": servers.edge.latency_ms }),
    );
    let edge = evaluator.evaluate(ctx, &edge_answer.candidates, ServerKind::Edge)?;
    log("edge_eval", gate_json(&edge));

    let mut latency = servers.edge.latency_ms;
    let mut cloud = None;
    let mut cloud_answer = None;
    let cloud_queried = !edge.passed();
    if cloud_queried {
        latency += servers.cloud.latency_ms;
        if servers.cloud.reachable {
            let answer = ask(&servers.cloud, &servers.catalog, &batch, &client.pseudonyms, batch_id, cfg.top_k, &mut rng)?;
            log(
                "cloud_query",
                json!({ "candidates": answer.candidates, "degraded": answer.degraded, "latency_ms": servers.cloud.latency_ms }),
            );
            let verdict = evaluator.evaluate(ctx, &answer.candidates, ServerKind::Cloud)?;
            log("cloud_eval", gate_json(&verdict));
            cloud = Some(verdict);
            cloud_answer = Some(answer);
        } else {
            log("cloud_query", json!({ "reachable": false, "latency_ms": servers.cloud.latency_ms }));
        }
    }

    let route = route(&edge, cloud.as_ref(), cloud_queried);
    let candidates = match (route.source, cloud_answer) {
        (ServerKind::Cloud, Some(a)) => a.candidates,
        _ => edge_answer.candidates,
    };
    log(
        "decision",
        json!({
            "source": route.source.as_str(),
            "low_confidence": route.low_confidence,
            "degraded": route.degraded,
            "latency_ms": latency,
        }),
    );
    client.pseudonyms.forget(batch_id);
    Ok((
        FinalResponse {
            candidates,
            route,
            edge,
            cloud,
            cloud_queried,
            latency_ms: latency,
        },
        trace,
    ))
}
