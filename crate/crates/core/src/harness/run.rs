use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::data::{gen_synthetic, load_corpus, Corpus, Split, SynthConfig};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::model::{tokenize, BeamConfig, SumModel, Vocab};
use crate::numcore::{Parameterized, Tensor};
use crate::trainer::{train, CollapseReport, EvalPoint, StepLog, TrainObserver};

pub const CONFIG_FILE: &str = "config.toml";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const STEPS_FILE: &str = "steps.csv";
pub const EVALS_FILE: &str = "evals.csv";
pub const PARAMS_FILE: &str = "params.json";
pub const DECODED_FILE: &str = "decoded.txt";
pub const REPORT_FILE: &str = "report.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const ERROR_FILE: &str = "error.json";

/// Written next to partial artifacts when a run fails.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorManifest {
    pub stage: String,
    pub message: String,
    pub numeric: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub preset: Option<String>,
    pub n_train: usize,
    pub steps_run: usize,
    pub stopped_early: bool,
    pub initial_eval: Option<EvalPoint>,
    pub final_eval: Option<EvalPoint>,
    pub collapse: CollapseReport,
    pub rouge1: Option<f64>,
    pub rouge2: Option<f64>,
    #[serde(rename = "rougeL")]
    pub rouge_l: Option<f64>,
    pub train_seconds: f64,
}

pub fn synth_config(cfg: &RunConfig) -> SynthConfig {
    SynthConfig {
        vocab: cfg.synth_vocab,
        doc_max: cfg.synth_doc_max,
        summary_max: cfg.synth_summary_max,
        train: cfg.synth_train,
        val: cfg.synth_val,
        test: cfg.synth_test,
    }
}

/// Train, val and test corpora: the configured files, or the generator
/// when no training files are listed.
pub fn load_data(cfg: &RunConfig) -> Result<(Corpus, Corpus, Corpus)> {
    if cfg.train_files.is_empty() {
        return Ok(gen_synthetic(&synth_config(cfg), cfg.synth_seed));
    }
    let train = load_corpus(&cfg.train_files, Split::Train)?;
    let val = load_corpus(&cfg.val_files, Split::Val)?;
    let test = load_corpus(&cfg.test_files, Split::Test)?;
    if train.is_empty() {
        return Err(Error::EmptyInput("training corpus has no examples".into()));
    }
    Ok((train, val, test))
}

/// Writes the synthetic splits as JSONL under `data_dir`.
pub fn gen_data(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let dir = Path::new(&cfg.data_dir);
    std::fs::create_dir_all(dir)?;
    let (train, val, test) = gen_synthetic(&synth_config(cfg), cfg.synth_seed);
    let mut paths = Vec::new();
    for c in [&train, &val, &test] {
        let p = dir.join(format!("{}.jsonl", c.split));
        c.write_jsonl(&p)?;
        paths.push(p);
    }
    Ok(paths)
}

pub fn build_vocab(cfg: &RunConfig, train: &Corpus) -> Result<Vocab> {
    match &cfg.vocab_path {
        Some(p) => Vocab::load(Path::new(p)),
        None => Ok(Vocab::build(
            train
                .examples
                .iter()
                .flat_map(|p| [p.document.as_str(), p.summary.as_str()]),
            cfg.max_vocab,
        )),
    }
}

/// Fresh model for `cfg`; the seed fixes the initialization.
pub fn init_model(cfg: &RunConfig, vocab: &Vocab) -> Result<SumModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    SumModel::new(cfg.model_config(vocab.len()), &mut rng)
}

pub fn save_params(model: &SumModel, path: &Path) -> Result<()> {
    let map: BTreeMap<&str, &Tensor> = model.params().into_iter().map(|p| (p.name.as_str(), &p.value)).collect();
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut f, &map)?;
    f.flush()?;
    Ok(())
}

pub fn load_params(model: &mut SumModel, path: &Path) -> Result<()> {
    let mut map: BTreeMap<String, Tensor> = serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?;
    for p in model.params_mut() {
        let t = map
            .remove(&p.name)
            .ok_or_else(|| Error::Contract(format!("{} has no entry for `{}`", path.display(), p.name)))?;
        if t.shape() != p.value.shape() {
            return Err(Error::Shape {
                op: "load_params",
                lhs: p.value.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        p.value = t;
    }
    if let Some(extra) = map.keys().next() {
        return Err(Error::Contract(format!("{} has unknown parameter `{extra}`", path.display())));
    }
    Ok(())
}

/// Beam-decodes every document and scores against the reference summaries.
pub fn decode_corpus(
    model: &SumModel,
    vocab: &Vocab,
    corpus: &Corpus,
    cfg: &RunConfig,
    beam: &BeamConfig,
) -> Result<(Vec<String>, EvalReport)> {
    let examples = corpus.encode(vocab, cfg.max_source_tokens, cfg.max_target_tokens)?;
    let mut decoded = Vec::with_capacity(examples.len());
    let mut pairs = Vec::with_capacity(examples.len());
    for (ex, pair) in examples.iter().zip(&corpus.examples) {
        let hyp = model.summarize(ex, beam)?;
        let cand: Vec<String> = hyp.tokens.iter().map(|&t| vocab.token(t).to_string()).collect();
        decoded.push(cand.join(" "));
        pairs.push((cand, tokenize(&pair.summary)));
    }
    let report = EvalReport::from_pairs(&pairs, cfg.rep_window)?;
    Ok((decoded, report))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

/// Appends step and eval rows as training runs, so a crash keeps them.
struct CsvObserver {
    steps: csv::Writer<File>,
    evals: csv::Writer<File>,
    failure: Option<Error>,
}

impl CsvObserver {
    fn record(&mut self, r: std::result::Result<(), csv::Error>) {
        if let (Err(e), None) = (r, &self.failure) {
            self.failure = Some(e.into());
        }
    }
}

impl TrainObserver for CsvObserver {
    fn on_step(&mut self, log: &StepLog, _model: &SumModel) {
        let r = self.steps.serialize(log).and_then(|_| Ok(self.steps.flush()?));
        self.record(r);
    }

    fn on_eval(&mut self, point: &EvalPoint) {
        let r = self.evals.serialize(point).and_then(|_| Ok(self.evals.flush()?));
        self.record(r);
    }
}

pub fn run_dir(cfg: &RunConfig) -> PathBuf {
    Path::new(&cfg.out_dir).join(&cfg.name)
}

/// Loads the config (with `FLOWVI_*` overrides) and runs it.
pub fn run_experiment(config_path: &Path) -> Result<RunSummary> {
    let cfg = RunConfig::load(config_path)?;
    run_config(&cfg)
}

/// Trains, decodes the test split and writes every artifact under
/// `out_dir/name`. On failure an `error.json` names the stage.
pub fn run_config(cfg: &RunConfig) -> Result<RunSummary> {
    let dir = run_dir(cfg);
    std::fs::create_dir_all(&dir)?;
    let stale = dir.join(ERROR_FILE);
    if stale.exists() {
        std::fs::remove_file(&stale)?;
    }
    let mut stage = "config";
    let result = run_stages(cfg, &dir, &mut stage);
    if let Err(e) = &result {
        let manifest = ErrorManifest {
            stage: stage.to_string(),
            message: e.to_string(),
            numeric: e.is_numeric(),
        };
        write_json(&dir.join(ERROR_FILE), &manifest)?;
    }
    result
}

fn run_stages(cfg: &RunConfig, dir: &Path, stage: &mut &'static str) -> Result<RunSummary> {
    std::fs::write(dir.join(CONFIG_FILE), cfg.to_toml()?)?;

    *stage = "data";
    let (train_c, val_c, test_c) = load_data(cfg)?;
    let vocab = build_vocab(cfg, &train_c)?;
    vocab.save(&dir.join(VOCAB_FILE))?;
    let train_set = train_c.encode(&vocab, cfg.max_source_tokens, cfg.max_target_tokens)?;
    let val_set = val_c.encode(&vocab, cfg.max_source_tokens, cfg.max_target_tokens)?;

    *stage = "model";
    let mut model = init_model(cfg, &vocab)?;

    *stage = "train";
    let tcfg = cfg.train_config(train_set.len());
    let mut obs = CsvObserver {
        steps: csv::Writer::from_path(dir.join(STEPS_FILE))?,
        evals: csv::Writer::from_path(dir.join(EVALS_FILE))?,
        failure: None,
    };
    let start = Instant::now();
    let outcome = train(&mut model, &train_set, &val_set, &tcfg, &mut obs);
    let train_seconds = start.elapsed().as_secs_f64();
    // Keep whatever parameters were reached, even after a failure.
    save_params(&model, &dir.join(PARAMS_FILE))?;
    let outcome = outcome?;
    if let Some(e) = obs.failure {
        return Err(e);
    }

    *stage = "decode";
    let (decoded, report) = if test_c.is_empty() {
        (Vec::new(), None)
    } else {
        let (d, r) = decode_corpus(&model, &vocab, &test_c, cfg, &cfg.beam_config())?;
        (d, Some(r))
    };
    let mut f = BufWriter::new(File::create(dir.join(DECODED_FILE))?);
    for line in &decoded {
        writeln!(f, "{line}")?;
    }
    f.flush()?;

    *stage = "report";
    if let Some(r) = &report {
        write_json(&dir.join(REPORT_FILE), r)?;
    }
    let summary = RunSummary {
        name: cfg.name.clone(),
        preset: cfg.preset.clone(),
        n_train: train_set.len(),
        steps_run: outcome.steps_run,
        stopped_early: outcome.stopped_early,
        initial_eval: outcome.evals.first().copied(),
        final_eval: outcome.evals.last().copied(),
        collapse: outcome.collapse,
        rouge1: report.as_ref().map(|r| r.rouge1),
        rouge2: report.as_ref().map(|r| r.rouge2),
        rouge_l: report.as_ref().map(|r| r.rouge_l),
        train_seconds,
    };
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// A finished run restored from its directory.
pub struct LoadedRun {
    pub config: RunConfig,
    pub vocab: Vocab,
    pub model: SumModel,
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let text = std::fs::read_to_string(dir.join(CONFIG_FILE))?;
    let config = RunConfig::parse(&text, &BTreeMap::new())?;
    let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
    let mut model = init_model(&config, &vocab)?;
    load_params(&mut model, &dir.join(PARAMS_FILE))?;
    Ok(LoadedRun { config, vocab, model })
}

/// Decodes `corpus_path` with a stored run and returns the scores.
pub fn evaluate_run(dir: &Path, corpus_path: &Path) -> Result<(Vec<String>, EvalReport)> {
    let run = load_run(dir)?;
    let corpus = load_corpus(&[corpus_path], Split::Test)?;
    if corpus.is_empty() {
        return Err(Error::EmptyInput(format!("{} has no examples", corpus_path.display())));
    }
    decode_corpus(&run.model, &run.vocab, &corpus, &run.config, &run.config.beam_config())
}
