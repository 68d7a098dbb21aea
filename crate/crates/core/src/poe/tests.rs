use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dataset::{generate_synthetic, split, Metadata, SplitRatios, SynthSpec};

fn plain_hyper(dim: usize) -> PoeHyper {
    PoeHyper {
        dim,
        use_meta: false,
        use_time: false,
        ..PoeHyper::default()
    }
}

fn tiny_meta() -> Metadata {
    let mut m = Metadata::default();
    m.poi_meta.insert("a".into(), BTreeSet::from(["x".to_string(), "y".to_string()]));
    m.poi_meta.insert("b".into(), BTreeSet::from(["y".to_string()]));
    m.user_meta.insert("u".into(), BTreeSet::from(["g".to_string()]));
    m
}

fn tiny(hyper: PoeHyper) -> PoeModel<f64> {
    let vocab = PoeVocab::build(vec!["u".into(), "v".into()], vec!["a".into(), "b".into(), "c".into()], &tiny_meta());
    PoeModel::init(vocab, hyper, 3)
}

fn req(user: &str, prev: &str, t_prev: i64, t: i64, cands: &[&str]) -> ScoreRequest {
    ScoreRequest {
        user_id: user.into(),
        history: vec![(prev.into(), t_prev)],
        query_time: t,
        candidates: cands.iter().map(|s| s.to_string()).collect(),
    }
}

#[test]
fn metadata_vector_examples() {
    let table = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    assert_eq!(metadata_vector(&[1], &table).unwrap(), Some(vec![0.0, 1.0]));
    assert_eq!(metadata_vector(&[0, 1], &table).unwrap(), Some(vec![0.5, 0.5]));
    assert_eq!(metadata_vector::<f64>(&[], &table).unwrap(), None);
    assert!(metadata_vector(&[2], &table).is_err());
}

#[test]
fn identity_example() {
    let mut m = tiny(plain_hyper(2));
    for w in [&mut m.w0, &mut m.wpi, &mut m.w2, &mut m.w3] {
        *w = Matrix::identity(2);
    }
    m.poi_emb = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap();
    m.user_emb = Matrix::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
    let (dq, du) = m.query_intents(0, 0, 0, 10).unwrap();
    assert_eq!((dq, du), (vec![1.0, 0.0], vec![0.0, 1.0]));
    assert_eq!(m.candidate_intent(1).unwrap(), vec![1.0, 1.0]);
    assert_eq!(m.score(&req("u", "a", 0, 10, &[]), "b").unwrap(), 2.0);

    // c_l = 0 gives a zero score for everyone
    m.w3 = Matrix::zeros(2, 2);
    assert_eq!(m.score(&req("u", "a", 0, 10, &[]), "b").unwrap(), 0.0);
    assert_eq!(m.score(&req("v", "b", 0, 10, &[]), "a").unwrap(), 0.0);
}

#[test]
fn positive_shift_recomputation() {
    let mut m = tiny(plain_hyper(3));
    m.b1 = Matrix::filled(1, 3, 10.0);
    let r = req("u", "a", 0, 10, &[]);
    let base = m.score(&r, "b").unwrap();
    let c: f64 = m.candidate_intent(1).unwrap().iter().sum();
    m.b1 = Matrix::filled(1, 3, 11.0);
    assert!((m.score(&r, "b").unwrap() - (base + c)).abs() < 1e-12);
}

#[test]
fn transfer_matrix_boundaries() {
    let mut m = tiny(PoeHyper {
        pi_secs: 100.0,
        ..plain_hyper(3)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    m.wpi = Matrix::uniform(3, 3, 1.0, &mut rng);
    assert_eq!(m.transfer_matrix(0), m.w0);
    assert!(m.transfer_matrix(100).sub(&m.wpi).unwrap().frobenius_norm() < 1e-15);
    let avg = m.w0.add(&m.wpi).unwrap().scale(0.5);
    assert!(m.transfer_matrix(50).sub(&avg).unwrap().frobenius_norm() < 1e-15);
    assert_eq!(m.transfer_matrix(100), m.transfer_matrix(10_000));
    let gap = m.transfer_matrix(99).sub(&m.transfer_matrix(100)).unwrap().frobenius_norm();
    assert!(gap < 0.05);
}

#[test]
fn alpha_one_ignores_poi_metadata() {
    let mut m = tiny(PoeHyper {
        alpha: 1.0,
        beta: 1.0,
        use_meta: true,
        ..plain_hyper(3)
    });
    let r = req("u", "a", 0, 10, &[]);
    let before = m.score(&r, "b").unwrap();
    m.poi_item_emb = m.poi_item_emb.scale(-7.0);
    m.user_item_emb = m.user_item_emb.scale(3.0);
    assert_eq!(m.score(&r, "b").unwrap(), before);
}

#[test]
fn extensions_reduce_to_base_model() {
    let base = tiny(plain_hyper(4));
    let mut ext = base.clone();
    ext.hyper = PoeHyper {
        alpha: 1.0,
        beta: 1.0,
        use_meta: true,
        use_time: true,
        buckets: 1,
        ..base.hyper.clone()
    };
    ext.bucket_bias = Matrix::zeros(1, 4);
    for (u, p, tp, t) in [("u", "a", 0, 50), ("v", "c", 1000, 90_000)] {
        let r = req(u, p, tp, t, &["a", "b", "c"]);
        assert_eq!(base.rank_candidates(&r, 3).unwrap(), ext.rank_candidates(&r, 3).unwrap());
    }
}

#[test]
fn ranking_rules() {
    let mut m = tiny(plain_hyper(2));
    let r = req("u", "a", 0, 10, &["b"]);
    assert_eq!(m.rank_candidates(&r, 5).unwrap()[0].0, "b");
    m.w3 = Matrix::zeros(2, 2);
    let r = req("u", "a", 0, 10, &["c", "a", "b"]);
    for _ in 0..100 {
        let ids: Vec<String> = m.rank_candidates(&r, 3).unwrap().into_iter().map(|x| x.0).collect();
        assert_eq!(ids, vec!["a", "b", "c"]);
    }
    assert!(matches!(m.rank_candidates(&req("u", "a", 0, 1, &[]), 3), Err(PoeError::NoCandidates)));
    let cold = ScoreRequest {
        history: Vec::new(),
        ..req("u", "a", 0, 1, &["a"])
    };
    assert!(matches!(m.rank_candidates(&cold, 3), Err(PoeError::ColdStart(_))));
    assert!(matches!(m.rank_candidates(&req("w", "a", 0, 1, &["a"]), 3), Err(PoeError::ColdStart(_))));
}

#[test]
fn sorted_scores_rank_in_order() {
    let scored = vec![("b".to_string(), 1.0), ("a".to_string(), 2.0)];
    let r = sort_ranked(scored, 5);
    assert_eq!(r[0].0, "a");
}

#[test]
fn gate_examples() {
    assert!(poe_gate(&[1e3, 800.0], 1.0).pass);
    assert!(poe_gate(&[-50.0], 0.0).pass);
    let v = poe_gate(&[0.0, 0.0], 0.6);
    assert_eq!(v.aggregate, 0.5);
    assert!(!v.pass);
}

fn max_rel_err(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for (use_meta, use_time) in [(false, false), (true, true), (true, false)] {
        let mut m = tiny(PoeHyper {
            alpha: 0.7,
            beta: 0.6,
            use_meta,
            use_time,
            pi_secs: 1000.0,
            buckets: 4,
            ..plain_hyper(5)
        });
        m.wpi = Matrix::glorot(5, 5, &mut rng);
        m.b1 = Matrix::uniform(1, 5, 0.5, &mut rng);
        m.b2 = Matrix::uniform(1, 5, 0.5, &mut rng);
        m.b3 = Matrix::uniform(1, 5, 0.5, &mut rng);
        m.bucket_bias = Matrix::uniform(4, 5, 0.5, &mut rng);
        let batch: Vec<TrainExample> = (0..4)
            .map(|_| TrainExample {
                user: rng.gen_range(0..2),
                prev: rng.gen_range(0..3),
                t_prev: 0,
                t: rng.gen_range(0..2000),
                candidates: (0..3).map(|_| rng.gen_range(0..3)).collect(),
            })
            .collect();
        let (_, grads) = m.loss_and_grads(&batch).unwrap();
        let h = 1e-5;
        for (pi, g) in grads.iter().enumerate() {
            let mut fd = Matrix::zeros(g.rows(), g.cols());
            for e in 0..g.len() {
                let mut plus = m.clone();
                plus.params_mut()[pi].as_mut_slice()[e] += h;
                let mut minus = m.clone();
                minus.params_mut()[pi].as_mut_slice()[e] -= h;
                fd.as_mut_slice()[e] = (plus.loss(&batch).unwrap() - minus.loss(&batch).unwrap()) / (2.0 * h);
            }
            let err = max_rel_err(g, &fd);
            assert!(err < 1e-4, "{} ({use_meta},{use_time}) err {err}", PoeModel::<f64>::PARAM_NAMES[pi]);
        }
    }
}

#[test]
fn tape_and_direct_scores_agree() {
    let mut m = tiny(PoeHyper {
        alpha: 0.5,
        beta: 0.3,
        use_meta: true,
        use_time: true,
        pi_secs: 500.0,
        ..plain_hyper(4)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    m.wpi = Matrix::glorot(4, 4, &mut rng);
    m.bucket_bias = Matrix::uniform(24, 4, 0.3, &mut rng);
    let ex = TrainExample {
        user: 0,
        prev: 0,
        t_prev: 100,
        t: 400,
        candidates: vec![1, 2],
    };
    let r = req("u", "a", 100, 400, &[]);
    let (y1, y2) = (m.score(&r, "b").unwrap(), m.score(&r, "c").unwrap());
    let expect = (y1.exp() + y2.exp()).ln() - y1;
    assert!((m.loss(&[ex]).unwrap() - expect).abs() < 1e-12);
}

fn synth_corpus() -> (crate::dataset::SplitCorpus, Metadata) {
    let out = generate_synthetic(&SynthSpec::default(), 1).unwrap();
    (split(&out.log, SplitRatios::default()).unwrap(), out.meta)
}

#[test]
fn zero_epochs_returns_initialization() {
    let (corpus, meta) = synth_corpus();
    let h = PoeHyper {
        epochs: 0,
        ..PoeHyper::default()
    };
    let (m, log) = train_poe::<f64>(&corpus, &meta, &h, None, 9).unwrap();
    let init = PoeModel::<f64>::init(m.vocab.clone(), h, ChaCha8Rng::seed_from_u64(9).gen());
    assert_eq!(m, init);
    assert_eq!(log.best_epoch, 0);
}

#[test]
fn training_beats_untrained_and_random_baseline() {
    let (corpus, meta) = synth_corpus();
    let h = PoeHyper {
        epochs: 6,
        ..PoeHyper::default()
    };
    let (m, log) = train_poe::<f64>(&corpus, &meta, &h, None, 2).unwrap();
    let valid = transitions(&corpus.train, &corpus.validation, &m.vocab);
    let untrained = PoeModel::<f64>::init(m.vocab.clone(), h.clone(), 123).evaluate_map(&valid).unwrap();
    let trained = m.evaluate_map(&valid).unwrap();
    assert_eq!(trained, log.best_map);
    assert!(trained > untrained, "{trained} vs {untrained}");
    assert!(trained >= 2.0 * random_baseline_map(m.vocab.pois.len()), "{trained}");
}

#[test]
fn checkpoint_roundtrip() {
    let m = tiny(PoeHyper {
        use_meta: true,
        ..plain_hyper(3)
    });
    let mut buf = Vec::new();
    crate::numerics::write_checkpoint(&mut buf, &m.to_checkpoint()).unwrap();
    let back = PoeModel::<f64>::from_checkpoint(&crate::numerics::read_checkpoint(buf.as_slice()).unwrap()).unwrap();
    assert_eq!(back.params(), m.params());
    assert_eq!(back.vocab, m.vocab);
    assert_eq!(back.hyper.alpha, m.hyper.alpha);
}

#[test]
fn random_baseline_values() {
    assert_eq!(random_baseline_map(1), 1.0);
    assert!((random_baseline_map(2) - 0.75).abs() < 1e-15);
}
