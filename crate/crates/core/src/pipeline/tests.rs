use std::cell::RefCell;

use super::*;
use crate::dataset::{generate_synthetic, split, SplitRatios, SynthSpec};

struct Scripted {
    edge_npe: bool,
    edge_poe: bool,
    cloud: bool,
    calls: RefCell<Vec<ServerKind>>,
}

impl Evaluator for Scripted {
    fn evaluate(&self, _: &RequestContext, _: &[String], server: ServerKind) -> Result<EvaluationVerdict, PipelineError> {
        self.calls.borrow_mut().push(server);
        let (npe, poe, agg) = match server {
            ServerKind::Edge => (self.edge_npe, self.edge_poe, if self.edge_poe { 0.9 } else { 0.2 }),
            ServerKind::Cloud => (true, self.cloud, if self.cloud { 0.8 } else { 0.3 }),
        };
        Ok(EvaluationVerdict {
            server,
            npe: GateOutcome { pass: npe, value: 1.0 },
            poe: npe.then_some(GateOutcome { pass: poe, value: agg }),
        })
    }
}

fn fixture() -> (Servers, Vec<RequestContext>) {
    let spec = SynthSpec {
        users: 6,
        pois: 40,
        length: 12,
        ..SynthSpec::default()
    };
    let out = generate_synthetic(&spec, 3).unwrap();
    let corpus = split(&out.log, SplitRatios::default()).unwrap();
    let catalog = PoiCatalog::build(&out.log, &corpus.train, &out.meta);
    let requests = build_requests(&corpus.train, &corpus.validation, &catalog);
    (Servers::new(catalog, &ServerConfig::default()), requests)
}

fn no_key() -> PipelineConfig {
    PipelineConfig {
        key_bits: 0,
        ..PipelineConfig::default()
    }
}

#[test]
fn routing_table_over_all_gate_outcomes() {
    let (servers, requests) = fixture();
    let ctx = &requests[0];
    // (edge npe, edge poe, cloud) -> (source, low confidence, cloud queried)
    let table = [
        ((true, true, true), (ServerKind::Edge, false, false)),
        ((true, true, false), (ServerKind::Edge, false, false)),
        ((true, false, true), (ServerKind::Cloud, false, true)),
        ((true, false, false), (ServerKind::Cloud, true, true)),
        ((false, true, true), (ServerKind::Cloud, false, true)),
        ((false, true, false), (ServerKind::Cloud, true, true)),
        ((false, false, true), (ServerKind::Cloud, false, true)),
        ((false, false, false), (ServerKind::Cloud, true, true)),
    ];
    for ((edge_npe, edge_poe, cloud), (source, low, queried)) in table {
        let ev = Scripted {
            edge_npe,
            edge_poe,
            cloud,
            calls: RefCell::new(Vec::new()),
        };
        let mut client = ClientState::default();
        let (resp, trace) =
            handle_request(ctx, &mut client, &servers, &ev, &AnonymizeConfig::default(), &no_key(), 9).unwrap();
        assert_eq!(resp.route.source, source, "{edge_npe} {edge_poe} {cloud}");
        assert_eq!(resp.route.low_confidence, low);
        assert_eq!(resp.cloud_queried, queried);
        assert_eq!(ev.calls.borrow().contains(&ServerKind::Cloud), queried);
        assert_eq!(trace.iter().any(|r| r.stage == "cloud_query"), queried);
        let expect_ms = if queried { 140.0 } else { 20.0 };
        assert_eq!(resp.latency_ms, expect_ms);
    }
}

#[test]
fn ties_prefer_the_edge() {
    let v = |server, agg| EvaluationVerdict {
        server,
        npe: GateOutcome { pass: true, value: 0.0 },
        poe: Some(GateOutcome { pass: false, value: agg }),
    };
    let r = route(&v(ServerKind::Edge, 0.4), Some(&v(ServerKind::Cloud, 0.4)), true);
    assert_eq!(r.source, ServerKind::Edge);
    assert!(r.low_confidence);
    let r = route(&v(ServerKind::Edge, 0.4), Some(&v(ServerKind::Cloud, 0.41)), true);
    assert_eq!(r.source, ServerKind::Cloud);
}

#[test]
fn unreachable_cloud_returns_degraded_edge_answer() {
    let (mut servers, requests) = fixture();
    servers.cloud.reachable = false;
    let ev = Scripted {
        edge_npe: false,
        edge_poe: false,
        cloud: true,
        calls: RefCell::new(Vec::new()),
    };
    let mut client = ClientState::default();
    let (resp, _) =
        handle_request(&requests[0], &mut client, &servers, &ev, &AnonymizeConfig::default(), &no_key(), 1).unwrap();
    assert_eq!(resp.route.source, ServerKind::Edge);
    assert!(resp.route.degraded);
    assert!(resp.cloud.is_none());
    assert_eq!(*ev.calls.borrow(), vec![ServerKind::Edge]);
}

#[test]
fn trace_never_holds_the_user_id() {
    let (servers, requests) = fixture();
    let ev = Scripted {
        edge_npe: true,
        edge_poe: false,
        cloud: false,
        calls: RefCell::new(Vec::new()),
    };
    let mut client = ClientState::new(Some(client_key(256, 5).unwrap()));
    for ctx in &requests {
        let (_, trace) =
            handle_request(ctx, &mut client, &servers, &ev, &AnonymizeConfig::default(), &PipelineConfig::default(), 2)
                .unwrap();
        assert_eq!(trace.first().unwrap().stage, "anonymize");
        let bytes: Vec<u8> = trace.iter().flat_map(|r| r.to_json_line().into_bytes()).collect();
        let id = ctx.request.user_id.as_bytes();
        assert!(!bytes.windows(id.len()).any(|w| w == id));
    }
    assert_eq!(client.location_store.len(), requests.len());
    let key = client.key.as_ref().unwrap().private();
    let (lat, _) = &client.location_store[0];
    assert!(lat.value().bits() > 200);
    assert_eq!(crate::crypto::decrypt(lat, &key).unwrap(), encode_coordinate(requests[0].request.loc.lat, 90.0));
    assert!(client.pseudonyms.real_pseudonym(0).is_none());
}

#[test]
fn same_seed_same_trace() {
    let (servers, requests) = fixture();
    let run = || {
        let ev = Scripted {
            edge_npe: true,
            edge_poe: false,
            cloud: true,
            calls: RefCell::new(Vec::new()),
        };
        let mut client = ClientState::default();
        let (_, _, trace) =
            simulate(&requests, &mut client, &servers, &ev, &AnonymizeConfig::default(), &no_key(), 4).unwrap();
        trace.iter().map(TraceRecord::to_json_line).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn edge_index_is_a_subset_of_the_cloud_index() {
    let (servers, _) = fixture();
    assert!(servers.edge.index.iter().all(|i| servers.cloud.index.contains(i)));
    assert_eq!(servers.edge.index.len(), servers.catalog.len().div_ceil(2));
    let min_edge = servers.edge.index.iter().map(|&i| servers.catalog.pois[i].visits).min().unwrap();
    let max_rest = (0..servers.catalog.len())
        .filter(|i| !servers.edge.index.contains(i))
        .map(|i| servers.catalog.pois[i].visits)
        .max()
        .unwrap();
    assert!(min_edge >= max_rest);
}

#[test]
fn server_answers_nearest_of_category_and_degrades() {
    let (servers, requests) = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ctx = &requests[0];
    let a = servers.cloud.query(&servers.catalog, ctx.request.loc, &ctx.request.attribute, 5, &mut rng);
    assert!(!a.degraded);
    let d: Vec<f64> = a
        .candidates
        .iter()
        .map(|c| {
            let p = servers.catalog.get(c).unwrap();
            assert_eq!(p.category, ctx.request.attribute);
            crate::geo::haversine_km(ctx.request.loc, p.loc)
        })
        .collect();
    assert!(d.windows(2).all(|w| w[0] <= w[1]));
    let bad = SimServer {
        degrade_prob: 1.0,
        ..servers.cloud.clone()
    };
    let a = bad.query(&servers.catalog, ctx.request.loc, &ctx.request.attribute, 5, &mut rng);
    assert!(a.degraded);
    assert_eq!(a.candidates.len(), 3);
}

#[test]
fn quantile_threshold_keeps_the_requested_share() {
    let v: Vec<f64> = (1..=10).map(f64::from).collect();
    assert_eq!(quantile_threshold(&v, 0.7), Some(4.0));
    assert_eq!(quantile_threshold(&v, 1.0), Some(1.0));
    assert_eq!(quantile_threshold(&v, 0.0), Some(10.0));
    assert_eq!(quantile_threshold(&[f64::NEG_INFINITY], 0.5), None);
    let kept = v.iter().filter(|&&x| x >= 4.0).count();
    assert!(kept as f64 / v.len() as f64 >= 0.7);
}

#[test]
fn empty_grid_gives_empty_report() {
    let out = generate_synthetic(
        &SynthSpec {
            users: 4,
            pois: 20,
            length: 10,
            ..SynthSpec::default()
        },
        1,
    )
    .unwrap();
    let corpus = split(&out.log, SplitRatios::default()).unwrap();
    let grid = ExperimentConfig {
        include_random: false,
        rho: vec![],
        alpha: vec![],
        beta: vec![],
        dim: vec![],
    };
    let r = run_experiment(&corpus, &out.meta, &crate::poe::PoeHyper::default(), &Default::default(), &grid, 0).unwrap();
    assert!(r.is_empty());
    assert_eq!(r.rho_csv(), "rho,validation_map,test_map\n");
}

#[test]
fn coordinates_encode_as_non_negative_micro_degrees() {
    assert_eq!(encode_coordinate(-90.0, 90.0), BigUint::from(0u32));
    assert_eq!(encode_coordinate(22.543096, 90.0), BigUint::from(112_543_096u64));
}
