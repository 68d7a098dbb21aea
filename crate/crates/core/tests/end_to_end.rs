use lbsguard::dataset::{filter_sparse, generate_synthetic, split, SplitCorpus, SplitRatios, SynthSpec};
use lbsguard::npe::NpeHyper;
use lbsguard::numerics::{read_checkpoint, write_checkpoint};
use lbsguard::pipeline::{
    build_requests, calibrate, client_key, simulate, train_npe_on_corpus, AnonymizeConfig, ClientState,
    DecisionFactory, ModelEvaluator, PipelineConfig, PoiCatalog, ServerConfig, Servers,
};
use lbsguard::poe::{train_poe, PoeHyper};
use lbsguard::{NpeModel, PoeModel};

fn small_corpus() -> (lbsguard::dataset::SynthOutput, SplitCorpus) {
    let spec = SynthSpec {
        users: 20,
        pois: 80,
        clusters: 3,
        length: 15,
        ..SynthSpec::default()
    };
    let out = generate_synthetic(&spec, 21).unwrap();
    let log = filter_sparse(&out.log, 10, 1);
    let corpus = split(&log, SplitRatios::default()).unwrap();
    (out, corpus)
}

fn quick_npe() -> NpeHyper {
    NpeHyper {
        dim: 8,
        hidden: 8,
        epochs: 3,
        negatives_per_positive: 1,
        ..NpeHyper::default()
    }
}

fn quick_poe() -> PoeHyper {
    PoeHyper {
        dim: 8,
        epochs: 3,
        ..PoeHyper::default()
    }
}

#[test]
fn trained_models_survive_a_checkpoint_round_trip() {
    let (out, corpus) = small_corpus();
    let catalog = PoiCatalog::build(&out.log, &corpus.train, &out.meta);
    let factory = DecisionFactory::build(&catalog);
    let (npe, _) = train_npe_on_corpus::<f64>(&corpus, &factory, &quick_npe(), 1).unwrap();
    let (poe, _) = train_poe::<f64>(&corpus, &out.meta, &quick_poe(), None, 1).unwrap();

    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &npe.to_checkpoint()).unwrap();
    let back = NpeModel::from_checkpoint(&read_checkpoint(buf.as_slice()).unwrap()).unwrap();
    assert_eq!(back.params(), npe.params());
    for inst in factory.positives(&corpus.train, &corpus.validation).iter().take(20) {
        assert_eq!(back.visit_rate(inst).unwrap(), npe.visit_rate(inst).unwrap());
    }

    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &poe.to_checkpoint()).unwrap();
    let back = PoeModel::from_checkpoint(&read_checkpoint(buf.as_slice()).unwrap()).unwrap();
    assert_eq!(back.params(), poe.params());
    assert_eq!(back.vocab, poe.vocab);
}

#[test]
fn simulation_routes_every_request_and_is_reproducible() {
    let (out, corpus) = small_corpus();
    let catalog = PoiCatalog::build(&out.log, &corpus.train, &out.meta);
    let factory = DecisionFactory::build(&catalog);
    let (npe, _) = train_npe_on_corpus::<f64>(&corpus, &factory, &quick_npe(), 2).unwrap();
    let (poe, _) = train_poe::<f64>(&corpus, &out.meta, &quick_poe(), None, 2).unwrap();
    let servers = Servers::new(catalog.clone(), &ServerConfig::default());
    let cfg = PipelineConfig {
        key_bits: 256,
        ..PipelineConfig::default()
    };

    let validation = build_requests(&corpus.train, &corpus.validation, &catalog);
    let mut evaluator = ModelEvaluator {
        npe: &npe,
        poe: &poe,
        factory: &factory,
        thre_1: 0.0,
        thre_2: 0.0,
    };
    let (t1, t2, raw) = calibrate(&evaluator, &validation, &servers, &cfg, 3).unwrap();
    assert_eq!(raw.npe.len(), validation.len());
    assert!(t1.is_finite() && t2.is_finite());
    evaluator.thre_1 = t1;
    evaluator.thre_2 = t2;

    let context = lbsguard::dataset::CheckInLog::concat(&[&corpus.train, &corpus.validation]);
    let requests = build_requests(&context, &corpus.test, &catalog);
    assert!(!requests.is_empty());
    let run = || {
        let mut client = ClientState::new(Some(client_key(256, 4).unwrap()));
        let (summary, responses, trace) =
            simulate(&requests, &mut client, &servers, &evaluator, &AnonymizeConfig::default(), &cfg, 5).unwrap();
        let lines: Vec<String> = trace.iter().map(|r| r.to_json_line()).collect();
        (summary, responses.len(), lines)
    };
    let (summary, n, lines) = run();
    assert_eq!(summary.requests, requests.len());
    assert_eq!(n, requests.len());
    assert_eq!(summary.edge_accepted + summary.cloud_queried, summary.requests);
    assert!(summary.cloud_chosen <= summary.cloud_queried);
    assert!(summary.hits <= summary.requests);
    assert_eq!(run().2, lines);
}
