use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use lbsguard::dataset::{
    filter_sparse, generate_synthetic, parse_checkins, parse_metadata, split, write_checkins, write_metadata,
    CheckInLog, ColumnSpec, Metadata, SplitCorpus,
};
use lbsguard::metrics::{write_report, MetricRow};
use lbsguard::npe::NpeModel;
use lbsguard::numerics::{read_checkpoint, write_checkpoint, Checkpoint};
use lbsguard::pipeline::{
    build_requests, calibrate, client_key, npe_auc, poe_metrics, run_experiment, simulate, train_npe_on_corpus, ClientState,
    DecisionFactory, ModelEvaluator, PoiCatalog, Servers,
};
use lbsguard::poe::{train_poe, PoeModel, PretrainedInit};
use lbsguard::pretrain::{embedding_checkpoint, embedding_from_checkpoint, pretrain_poi_embeddings, PoiGraph};
use serde_json::json;

use crate::config::{load, sha256_hex, Config};
use crate::{CliError, Command, Common, DataArgs, Overrides};

fn data_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn lib_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

/// Output directory, its manifest entries and the run's settings.
struct Run {
    command: &'static str,
    out: PathBuf,
    config_path: PathBuf,
    config_sha256: String,
    cfg: Config,
    seed: Option<u64>,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    extra: BTreeMap<String, serde_json::Value>,
}

impl Run {
    fn start(command: &'static str, common: &Common, needs_seed: bool) -> Result<Self, CliError> {
        if needs_seed && common.seed.is_none() {
            return Err(CliError::Usage(format!("`{command}` draws random numbers and needs --seed")));
        }
        let loaded = load(&common.config)?;
        fs::create_dir_all(&common.out).map_err(|e| data_err(&common.out, e))?;
        Ok(Self {
            command,
            out: common.out.clone(),
            config_path: common.config.clone(),
            config_sha256: loaded.sha256,
            cfg: loaded.config,
            seed: common.seed,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            extra: BTreeMap::new(),
        })
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn apply(&mut self, o: &Overrides) {
        if let Some(r) = o.rho {
            self.cfg.pretrain.rho = r;
        }
        if let Some(a) = o.alpha {
            self.cfg.poe.alpha = a;
        }
        if let Some(b) = o.beta {
            self.cfg.poe.beta = b;
        }
        if let Some(d) = o.dim {
            self.cfg.poe.dim = d;
        }
        if let Some(k) = o.k {
            self.cfg.poe.top_k = k;
            self.cfg.pipeline.top_k = k;
        }
        let set: BTreeMap<&str, serde_json::Value> = [
            ("rho", o.rho.map(|v| json!(v))),
            ("alpha", o.alpha.map(|v| json!(v))),
            ("beta", o.beta.map(|v| json!(v))),
            ("dim", o.dim.map(|v| json!(v))),
            ("k", o.k.map(|v| json!(v))),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .collect();
        self.extra.insert("overrides".into(), json!(set));
    }

    fn input(&mut self, path: &Path) -> Result<Vec<u8>, CliError> {
        let bytes = fs::read(path).map_err(|e| data_err(path, e))?;
        self.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    fn write(&mut self, name: &str, f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<(), CliError> {
        let path = self.out.join(name);
        let file = File::create(&path).map_err(|e| data_err(&path, e))?;
        let mut w = BufWriter::new(file);
        f(&mut w).and_then(|_| w.flush()).map_err(|e| data_err(&path, e))?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn write_str(&mut self, name: &str, s: &str) -> Result<(), CliError> {
        self.write(name, |w| w.write_all(s.as_bytes()))
    }

    fn write_checkpoint(&mut self, name: &str, ck: &Checkpoint) -> Result<(), CliError> {
        self.write(name, |w| write_checkpoint(w, ck).map_err(std::io::Error::other))
    }

    fn write_metrics(&mut self, name: &str, rows: &[MetricRow]) -> Result<(), CliError> {
        self.write(name, |w| write_report(w, rows))
    }

    fn finish(mut self) -> Result<(), CliError> {
        let manifest = json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "config": self.config_path.display().to_string(),
            "config_sha256": self.config_sha256,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "settings": self.extra,
        });
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        self.outputs.clear();
        self.write_str("manifest.json", &text)
    }

    fn read_log(&mut self, path: &Path) -> Result<CheckInLog, CliError> {
        let bytes = self.input(path)?;
        let (log, report) = parse_checkins(BufReader::new(bytes.as_slice()), &ColumnSpec::default()).map_err(|e| {
            match &e {
                lbsguard::dataset::DatasetError::Format { first_line, .. } => {
                    CliError::Data(format!("{}:{first_line}: {e}", path.display()))
                }
                _ => data_err(path, e),
            }
        })?;
        if let Some(line) = report.first_malformed_line {
            eprintln!("{}:{line}: skipped {} malformed line(s)", path.display(), report.malformed);
        }
        Ok(log)
    }

    fn read_meta(&mut self, path: &Path) -> Result<BTreeMap<String, std::collections::BTreeSet<String>>, CliError> {
        let bytes = self.input(path)?;
        parse_metadata(BufReader::new(bytes.as_slice())).map_err(|e| match &e {
            lbsguard::dataset::DatasetError::Metadata { line } => {
                CliError::Data(format!("{}:{line}: {e}", path.display()))
            }
            _ => data_err(path, e),
        })
    }

    /// Split corpus and metadata from `--data`, or synthesized from
    /// `[synth]` and filtered and split per `[data]`.
    fn corpus(&mut self, data: &DataArgs) -> Result<(SplitCorpus, Metadata), CliError> {
        if let Some(dir) = &data.data {
            let corpus = SplitCorpus {
                train: self.read_log(&dir.join("train.tsv"))?,
                validation: self.read_log(&dir.join("validation.tsv"))?,
                test: self.read_log(&dir.join("test.tsv"))?,
                ratios: self.cfg.data.split,
            };
            let meta = Metadata {
                poi_meta: self.read_meta(&dir.join("poi_meta.tsv"))?,
                user_meta: self.read_meta(&dir.join("user_meta.tsv"))?,
            };
            return Ok((corpus, meta));
        }
        let synth = generate_synthetic(&self.cfg.synth, self.seed()).map_err(lib_err)?;
        let log = filter_sparse(&synth.log, self.cfg.data.min_user_records, self.cfg.data.min_poi_visits);
        let corpus = split(&log, self.cfg.data.split).map_err(lib_err)?;
        Ok((corpus, synth.meta))
    }

    fn read_checkpoint(&mut self, path: &Path) -> Result<Checkpoint, CliError> {
        let bytes = self.input(path)?;
        read_checkpoint(BufReader::new(bytes.as_slice())).map_err(|e| data_err(path, e))
    }
}

fn all_of(c: &SplitCorpus) -> CheckInLog {
    CheckInLog::concat(&[&c.train, &c.validation, &c.test])
}

fn pretrained(run: &Run, corpus: &SplitCorpus) -> Result<PretrainedInit<f64>, CliError> {
    let graph = PoiGraph::build(&all_of(corpus).poi_locations(), &corpus.train, run.cfg.pretrain.nearest).map_err(lib_err)?;
    let walk = lbsguard::pretrain::WalkConfig {
        seed: run.seed(),
        ..run.cfg.pretrain.clone()
    };
    let (table, _) = pretrain_poi_embeddings::<f64>(&graph, run.cfg.poe.dim, &walk).map_err(lib_err)?;
    Ok(PretrainedInit {
        ids: graph.ids().to_vec(),
        table,
    })
}

fn simulation(
    run: &mut Run,
    corpus: &SplitCorpus,
    meta: &Metadata,
    npe: &NpeModel<f64>,
    poe: &PoeModel<f64>,
    factory: &DecisionFactory,
) -> Result<Vec<MetricRow>, CliError> {
    let catalog = PoiCatalog::build(&all_of(corpus), &corpus.train, meta);
    let servers = Servers::new(catalog, &run.cfg.pipeline.servers);
    let mut evaluator = ModelEvaluator {
        npe,
        poe,
        factory,
        thre_1: 0.0,
        thre_2: 0.0,
    };
    let validation = build_requests(&corpus.train, &corpus.validation, &servers.catalog);
    let (t1, t2, _) = calibrate(&evaluator, &validation, &servers, &run.cfg.pipeline, run.seed()).map_err(lib_err)?;
    evaluator.thre_1 = t1;
    evaluator.thre_2 = t2;
    let context = CheckInLog::concat(&[&corpus.train, &corpus.validation]);
    let requests = build_requests(&context, &corpus.test, &servers.catalog);
    let key = match run.cfg.pipeline.key_bits {
        0 => None,
        bits => Some(client_key(bits, run.seed()).map_err(lib_err)?),
    };
    let mut client = ClientState::new(key);
    let (summary, _, trace) =
        simulate(&requests, &mut client, &servers, &evaluator, &run.cfg.anonymize, &run.cfg.pipeline, run.seed())
            .map_err(lib_err)?;
    run.write("trace.jsonl", |w| {
        for r in &trace {
            writeln!(w, "{}", r.to_json_line())?;
        }
        Ok(())
    })?;
    let mut rows = vec![MetricRow::new("thre_1", None, t1), MetricRow::new("thre_2", None, t2)];
    rows.extend(summary.rows());
    Ok(rows)
}

fn npe_from(ck: &Checkpoint, factory: &DecisionFactory, path: &Path) -> Result<NpeModel<f64>, CliError> {
    let model = NpeModel::<f64>::from_checkpoint(ck).map_err(|e| data_err(path, e))?;
    if model.vocab_len() != factory.vocab().len() {
        return Err(data_err(
            path,
            format!("model has {} factors, the corpus defines {}", model.vocab_len(), factory.vocab().len()),
        ));
    }
    Ok(model)
}

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenSynth { common } => {
            let mut run = Run::start("gen-synth", &common, true)?;
            let out = generate_synthetic(&run.cfg.synth, run.seed()).map_err(lib_err)?;
            run.write("checkins.tsv", |w| write_checkins(w, &out.log))?;
            run.write("poi_meta.tsv", |w| write_metadata(w, &out.meta.poi_meta))?;
            run.write("user_meta.tsv", |w| write_metadata(w, &out.meta.user_meta))?;
            run.write_str("truth.json", &(out.truth_json() + "\n"))?;
            run.write("decisions.jsonl", |w| {
                for d in &out.decisions.instances {
                    writeln!(w, "{}", serde_json::to_string(d).expect("decision serializes"))?;
                }
                Ok(())
            })?;
            run.write("decision_factors.tsv", |w| out.decisions.vocab.write_tsv(w))?;
            run.finish()
        }
        Command::Prep {
            common,
            checkins,
            poi_meta,
            user_meta,
        } => {
            let mut run = Run::start("prep", &common, false)?;
            let log = run.read_log(&checkins)?;
            let before = log.len();
            let log = filter_sparse(&log, run.cfg.data.min_user_records, run.cfg.data.min_poi_visits);
            let corpus = split(&log, run.cfg.data.split).map_err(lib_err)?;
            run.write("train.tsv", |w| write_checkins(w, &corpus.train))?;
            run.write("validation.tsv", |w| write_checkins(w, &corpus.validation))?;
            run.write("test.tsv", |w| write_checkins(w, &corpus.test))?;
            let poi = match &poi_meta {
                Some(p) => run.read_meta(p)?,
                None => BTreeMap::new(),
            };
            let user = match &user_meta {
                Some(p) => run.read_meta(p)?,
                None => BTreeMap::new(),
            };
            run.write("poi_meta.tsv", |w| write_metadata(w, &poi))?;
            run.write("user_meta.tsv", |w| write_metadata(w, &user))?;
            let (tr, va, te) = corpus.counts();
            run.extra.insert(
                "records".into(),
                json!({ "input": before, "kept": log.len(), "train": tr, "validation": va, "test": te }),
            );
            run.finish()
        }
        Command::Pretrain {
            common,
            data,
            overrides,
        } => {
            let mut run = Run::start("pretrain", &common, true)?;
            run.apply(&overrides);
            let (corpus, _) = run.corpus(&data)?;
            let init = pretrained(&run, &corpus)?;
            run.write_checkpoint("poi_embeddings.ckpt", &embedding_checkpoint(&init.ids, &init.table))?;
            run.finish()
        }
        Command::TrainNpe { common, data } => {
            let mut run = Run::start("train-npe", &common, true)?;
            let (corpus, meta) = run.corpus(&data)?;
            let factory = DecisionFactory::build(&PoiCatalog::build(&all_of(&corpus), &corpus.train, &meta));
            let (model, log) = train_npe_on_corpus::<f64>(&corpus, &factory, &run.cfg.npe, run.seed()).map_err(lib_err)?;
            let auc = npe_auc(&model, &factory, &corpus.train, &corpus.validation, run.seed()).map_err(lib_err)?;
            run.write_checkpoint("npe.ckpt", &model.to_checkpoint())?;
            run.write("factors.tsv", |w| factory.vocab().write_tsv(w))?;
            let mut rows = vec![MetricRow::new("npe_validation_auc", None, auc)];
            rows.extend(log.epoch_loss.iter().enumerate().map(|(e, &l)| MetricRow::new("npe_epoch_loss", Some(e + 1), l)));
            run.write_metrics("metrics.csv", &rows)?;
            run.finish()
        }
        Command::TrainPoe {
            common,
            data,
            overrides,
            pretrained: init_path,
        } => {
            let mut run = Run::start("train-poe", &common, true)?;
            run.apply(&overrides);
            let (corpus, meta) = run.corpus(&data)?;
            let init = match &init_path {
                Some(p) => {
                    let ck = run.read_checkpoint(p)?;
                    let (ids, table) = embedding_from_checkpoint::<f64>(&ck).map_err(|e| data_err(p, e))?;
                    Some(PretrainedInit { ids, table })
                }
                None => None,
            };
            let (model, log) =
                train_poe::<f64>(&corpus, &meta, &run.cfg.poe, init.as_ref(), run.seed()).map_err(lib_err)?;
            run.write_checkpoint("poe.ckpt", &model.to_checkpoint())?;
            let mut rows = vec![
                MetricRow::new("poe_validation_map", None, log.best_map),
                MetricRow::new("poe_best_epoch", None, log.best_epoch as f64),
            ];
            rows.extend(poe_metrics(&model, &corpus, run.cfg.poe.top_k).map_err(lib_err)?);
            run.write_metrics("metrics.csv", &rows)?;
            run.finish()
        }
        Command::Simulate {
            common,
            data,
            overrides,
            npe,
            poe,
        } => {
            let mut run = Run::start("simulate", &common, true)?;
            run.apply(&overrides);
            let (corpus, meta) = run.corpus(&data)?;
            let factory = DecisionFactory::build(&PoiCatalog::build(&all_of(&corpus), &corpus.train, &meta));
            let npe_ck = run.read_checkpoint(&npe)?;
            let npe_model = npe_from(&npe_ck, &factory, &npe)?;
            let poe_ck = run.read_checkpoint(&poe)?;
            let poe_model = PoeModel::<f64>::from_checkpoint(&poe_ck).map_err(|e| data_err(&poe, e))?;
            let rows = simulation(&mut run, &corpus, &meta, &npe_model, &poe_model, &factory)?;
            run.write_metrics("simulation.csv", &rows)?;
            run.finish()
        }
        Command::Evaluate {
            common,
            data,
            overrides,
            poe,
            npe,
        } => {
            let mut run = Run::start("evaluate", &common, true)?;
            run.apply(&overrides);
            let (corpus, meta) = run.corpus(&data)?;
            let poe_ck = run.read_checkpoint(&poe)?;
            let poe_model = PoeModel::<f64>::from_checkpoint(&poe_ck).map_err(|e| data_err(&poe, e))?;
            let mut rows = poe_metrics(&poe_model, &corpus, run.cfg.poe.top_k).map_err(lib_err)?;
            if let Some(path) = &npe {
                let factory = DecisionFactory::build(&PoiCatalog::build(&all_of(&corpus), &corpus.train, &meta));
                let ck = run.read_checkpoint(path)?;
                let model = npe_from(&ck, &factory, path)?;
                let context = CheckInLog::concat(&[&corpus.train, &corpus.validation]);
                let auc = npe_auc(&model, &factory, &context, &corpus.test, run.seed()).map_err(lib_err)?;
                rows.push(MetricRow::new("npe_auc", None, auc));
            }
            run.write_metrics("metrics.csv", &rows)?;
            run.finish()
        }
        Command::Experiment {
            common,
            data,
            overrides,
        } => {
            let mut run = Run::start("experiment", &common, true)?;
            run.apply(&overrides);
            let (corpus, meta) = run.corpus(&data)?;
            let walk = lbsguard::pretrain::WalkConfig {
                seed: run.seed(),
                ..run.cfg.pretrain.clone()
            };
            let report = run_experiment(&corpus, &meta, &run.cfg.poe, &walk, &run.cfg.experiment, run.seed())
                .map_err(lib_err)?;
            run.write_str("rho.csv", &report.rho_csv())?;
            run.write_str("alpha_beta.csv", &report.alpha_beta_csv())?;
            run.write_str("dim.csv", &report.dim_csv())?;

            let init = pretrained(&run, &corpus)?;
            run.write_checkpoint("poi_embeddings.ckpt", &embedding_checkpoint(&init.ids, &init.table))?;
            let (poe_model, poe_log) =
                train_poe::<f64>(&corpus, &meta, &run.cfg.poe, Some(&init), run.seed()).map_err(lib_err)?;
            run.write_checkpoint("poe.ckpt", &poe_model.to_checkpoint())?;
            let factory = DecisionFactory::build(&PoiCatalog::build(&all_of(&corpus), &corpus.train, &meta));
            let (npe_model, _) =
                train_npe_on_corpus::<f64>(&corpus, &factory, &run.cfg.npe, run.seed()).map_err(lib_err)?;
            run.write_checkpoint("npe.ckpt", &npe_model.to_checkpoint())?;
            let context = CheckInLog::concat(&[&corpus.train, &corpus.validation]);

            let mut rows = vec![MetricRow::new("poe_validation_map", None, poe_log.best_map)];
            rows.extend(poe_metrics(&poe_model, &corpus, run.cfg.poe.top_k).map_err(lib_err)?);
            rows.push(MetricRow::new(
                "npe_auc",
                None,
                npe_auc(&npe_model, &factory, &context, &corpus.test, run.seed()).map_err(lib_err)?,
            ));
            rows.extend(simulation(&mut run, &corpus, &meta, &npe_model, &poe_model, &factory)?);
            run.write_metrics("metrics.csv", &rows)?;
            run.finish()
        }
    }
}
