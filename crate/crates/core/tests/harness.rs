use std::collections::BTreeMap;
use std::path::Path;

use flowvi::harness::{
    dump_latents, evaluate_run, gen_synthetic, load_corpus, load_run, preset_names, run_config, run_dir, Corpus,
    ErrorManifest, Provenance, RunConfig, Split, SynthConfig, MARKER,
};
use flowvi::flows::FlowKind;
use flowvi::metrics::EvalReport;
use flowvi::model::{tokenize, Example, ModelConfig, SumModel};
use flowvi::numcore::{Parameterized, Tensor};
use flowvi::trainer::Strategy;
use flowvi::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn no_env() -> BTreeMap<String, String> {
    BTreeMap::new()
}

#[test]
fn config_round_trips_for_every_preset() {
    for name in preset_names() {
        let cfg = RunConfig::parse(&format!("preset = \"{name}\""), &no_env()).unwrap();
        let again = RunConfig::parse(&cfg.to_toml().unwrap(), &no_env()).unwrap();
        assert_eq!(cfg, again, "{name}");
    }
    let d = RunConfig::parse("", &no_env()).unwrap();
    assert_eq!(d, RunConfig::default());
}

#[test]
fn unknown_keys_and_presets_are_rejected() {
    let e = RunConfig::parse("learning_rate = 0.1", &no_env()).unwrap_err();
    assert!(matches!(e, Error::Config(ref m) if m.contains("learning_rate")), "{e}");
    assert!(RunConfig::parse("preset = \"nope\"", &no_env()).is_err());
    let env = BTreeMap::from([("FLOWVI_NOT_A_KEY".to_string(), "1".to_string())]);
    assert!(RunConfig::parse("", &env).is_err());
    assert!(RunConfig::parse("heads = 5", &no_env()).is_err());
}

#[test]
fn precedence_is_defaults_preset_file_env() {
    let cfg = RunConfig::parse("preset = \"table7-planar-standard\"", &no_env()).unwrap();
    assert_eq!(cfg.flow, FlowKind::Planar);
    assert_eq!(cfg.strategy, Strategy::Standard);
    assert_eq!(cfg.lr, 1e-3);

    let cfg = RunConfig::parse("preset = \"table7-planar-standard\"\nlr = 2\nflow_layers = 3", &no_env()).unwrap();
    assert_eq!(cfg.lr, 2.0);
    assert_eq!(cfg.flow_layers, 3);

    let env = BTreeMap::from([
        ("FLOWVI_LR".to_string(), "0.5".to_string()),
        ("FLOWVI_FLOW".to_string(), "iaf".to_string()),
        ("FLOWVI_FLOW_HIDDEN".to_string(), "[7, 9]".to_string()),
        ("OTHER".to_string(), "x".to_string()),
    ]);
    let cfg = RunConfig::parse("preset = \"table7-planar-standard\"\nlr = 2", &env).unwrap();
    assert_eq!(cfg.lr, 0.5);
    assert_eq!(cfg.flow, FlowKind::Iaf);
    assert_eq!(cfg.model_config(50).flow_hidden, Some(vec![7, 9]));
}

#[test]
fn presets_map_to_training_schedules() {
    let cfg = RunConfig::parse("preset = \"flowsum-rqnsf-caat\"", &no_env()).unwrap();
    let t = cfg.train_config(1000);
    assert_eq!((t.n_max, t.n_agg, t.n_alt), (375, 125, 15));
    assert_eq!(cfg.model_config(200).flow_layers, 4);
    assert!(!cfg.scale_note.is_empty());
    let v = RunConfig::parse("preset = \"vedsum\"", &no_env()).unwrap();
    assert_eq!(v.flow_layers, 0);
    assert_eq!(v.train_config(1000).n_agg, 0);
    let s = RunConfig::parse("preset = \"table7-sylvester-betac\"\nmax_steps = 7", &no_env()).unwrap();
    assert_eq!(s.train_config(1000).n_max, 7);
    assert_eq!(s.strategy, Strategy::BetaC);
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn corpus_loading_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let a = write(
        dir.path(),
        "a.jsonl",
        "{\"document\": \"one two\", \"summary\": \"one\"}\n\n{\"document\": \"three\", \"summary\": \"\"}\n",
    );
    let b = write(dir.path(), "b.jsonl", "{\"summary\": \"s\", \"document\": \"four, five\"}\n");
    let c = load_corpus(&[&a], Split::Train).unwrap();
    assert_eq!(c.len(), 2);
    let both = load_corpus(&[&a, &b], Split::Train).unwrap();
    assert_eq!(both.len(), 3);
    assert_eq!(both.examples[2].document, "four, five");
    assert_eq!(both.examples[..2], c.examples[..]);
    match &both.provenance {
        Provenance::Files(v) => assert_eq!(v[1], (a.clone(), 3)),
        p => panic!("{p:?}"),
    }

    let cases = [
        ("{\"document\": \"x\", \"summary\": \"y\"}\n{\"document\": \"  \", \"summary\": \"y\"}\n", 2, "empty"),
        ("{\"document\": \"x\", \"summary\": \"y\"}\n{oops\n", 2, "malformed"),
        ("{\"document\": \"x\"}\n", 1, "missing key \"summary\""),
        ("[1, 2]\n", 1, "object"),
        ("{\"document\": 3, \"summary\": \"y\"}\n", 1, "string"),
    ];
    for (i, (text, line, what)) in cases.iter().enumerate() {
        let p = write(dir.path(), &format!("bad{i}.jsonl"), text);
        match load_corpus(&[&p], Split::Val).unwrap_err() {
            Error::Parse { line: l, message, path } => {
                assert_eq!(l, *line, "{message}");
                assert!(message.contains(what), "{message}");
                assert_eq!(path, p);
            }
            e => panic!("{e}"),
        }
    }
}

fn marked(doc: &str) -> Vec<String> {
    let t = tokenize(doc);
    t.windows(2).filter(|w| w[0] == MARKER).map(|w| w[1].clone()).collect()
}

#[test]
fn synthetic_corpus_contract() {
    let cfg = SynthConfig::default();
    let (tr, va, te) = gen_synthetic(&cfg, 3);
    assert_eq!((tr.len(), va.len(), te.len()), (1000, 100, 100));
    let (tr2, _, te2) = gen_synthetic(&cfg, 3);
    assert_eq!(tr, tr2);
    assert_eq!(te, te2);
    assert_ne!(gen_synthetic(&cfg, 4).0.examples, tr.examples);
    let mut words = std::collections::HashSet::new();
    for c in [&tr, &va, &te] {
        for p in &c.examples {
            let doc = tokenize(&p.document);
            let sum = tokenize(&p.summary);
            assert!(!doc.is_empty() && doc.len() <= 64);
            assert!(!sum.is_empty() && sum.len() <= 16);
            assert!(sum.iter().all(|t| doc.contains(t)));
            assert_eq!(sum, marked(&p.document));
            assert_ne!(doc.last().unwrap(), MARKER);
            words.extend(doc);
        }
    }
    assert!(words.len() + 4 <= 200, "{}", words.len());
    // A document never appears in two splits.
    let train_docs: std::collections::HashSet<_> = tr.examples.iter().map(|p| &p.document).collect();
    assert!(va.examples.iter().chain(&te.examples).all(|p| !train_docs.contains(&p.document)));
}

#[test]
fn synthetic_corpus_round_trips_through_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        train: 5,
        ..SynthConfig::default()
    };
    let (tr, _, _) = gen_synthetic(&cfg, 0);
    let p = dir.path().join("t.jsonl");
    tr.write_jsonl(&p).unwrap();
    let back: Corpus = load_corpus(&[&p], Split::Train).unwrap();
    assert_eq!(back.examples, tr.examples);
}

fn latent_model(flow_layers: usize) -> SumModel {
    let cfg = ModelConfig {
        vocab_size: 30,
        d_model: 8,
        embed_dim: 8,
        heads: 2,
        ffn_dim: 8,
        enc_layers: 1,
        dec_layers: 1,
        latent_dim: 3,
        inference_hidden: 8,
        flow: FlowKind::Realnvp,
        flow_layers,
        ..ModelConfig::default()
    };
    SumModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
}

fn examples(n: usize) -> Vec<Example> {
    (0..n)
        .map(|i| Example {
            source: vec![4 + i % 20, 5],
            target: vec![6],
            bow: vec![(4 + i % 20, 1.0), (5, 1.0)],
        })
        .collect()
}

fn read_rows(p: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut r = csv::Reader::from_path(p).unwrap();
    let header = r.headers().unwrap().iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(|x| x.parse().unwrap()).collect())
        .collect();
    (header, rows)
}

#[test]
fn latent_dump_shapes_and_identity_flow() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("z.csv");
    let model = latent_model(0);
    let n = dump_latents(&model, &examples(7), 3, &p, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(n, 21);
    let (header, rows) = read_rows(&p);
    assert_eq!(header, ["doc_id", "sample_id", "z0_0", "z0_1", "z0_2", "zk_0", "zk_1", "zk_2"]);
    assert_eq!(rows.len(), 21);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!((r[0], r[1]), ((i / 3) as f64, (i % 3) as f64));
        assert_eq!(r[2..5], r[5..8]);
    }
    let flowed = latent_model(2);
    dump_latents(&flowed, &examples(2), 2, &p, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let (_, rows) = read_rows(&p);
    assert!(rows.iter().any(|r| r[2..5] != r[5..8]));
    assert!(dump_latents(&model, &examples(1), 0, &p, &mut ChaCha8Rng::seed_from_u64(2)).is_err());
}

#[test]
fn standard_posterior_samples_are_centred() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("z.csv");
    let mut model = latent_model(0);
    // All-zero inference weights give μ0 = 0 and σ0 = 1 exactly.
    for q in model.inference.params_mut() {
        q.value = Tensor::zeros(q.value.shape());
    }
    let n = 4000;
    dump_latents(&model, &examples(40), n / 40, &p, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let (_, rows) = read_rows(&p);
    for d in 0..3 {
        let mean = rows.iter().map(|r| r[2 + d]).sum::<f64>() / n as f64;
        assert!(mean.abs() <= 3.0 / (n as f64).sqrt(), "dim {d}: {mean}");
    }
}

fn smoke_config(out: &Path, name: &str) -> RunConfig {
    let text = format!(
        "preset = \"smoke\"\nname = \"{name}\"\nout_dir = \"{}\"\nsynth_train = 24\nsynth_val = 6\nsynth_test = 4\n",
        out.display()
    );
    RunConfig::parse(&text, &no_env()).unwrap()
}

#[test]
fn runs_are_reproducible_and_self_describing() {
    let dir = tempfile::tempdir().unwrap();
    let a = smoke_config(dir.path(), "a");
    let sa = run_config(&a).unwrap();
    let ra = run_dir(&a);
    for f in [
        "config.toml",
        "vocab.txt",
        "steps.csv",
        "evals.csv",
        "params.json",
        "decoded.txt",
        "report.json",
        "summary.json",
    ] {
        assert!(ra.join(f).exists(), "{f}");
    }
    assert!(!ra.join("error.json").exists());
    assert_eq!(sa.steps_run, 3);

    // Re-run from the resolved copy, redirected to a new name.
    let text = std::fs::read_to_string(ra.join("config.toml")).unwrap();
    let env = BTreeMap::from([("FLOWVI_NAME".to_string(), "b".to_string())]);
    let b = RunConfig::parse(&text, &env).unwrap();
    run_config(&b).unwrap();
    let rb = run_dir(&b);
    for f in ["steps.csv", "evals.csv", "params.json", "decoded.txt", "report.json"] {
        assert_eq!(
            std::fs::read(ra.join(f)).unwrap(),
            std::fs::read(rb.join(f)).unwrap(),
            "{f}"
        );
    }

    let decoded = std::fs::read_to_string(ra.join("decoded.txt")).unwrap();
    assert_eq!(decoded.lines().count(), 4);
    let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(ra.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.examples.len(), 4);

    // A stored run decodes the same way after reloading.
    let loaded = load_run(&ra).unwrap();
    assert_eq!(loaded.config, a);
    let test = dir.path().join("test.jsonl");
    let (_, _, te) = flowvi::harness::load_data(&a).unwrap();
    te.write_jsonl(&test).unwrap();
    let (lines, again) = evaluate_run(&ra, &test).unwrap();
    assert_eq!(again, report);
    assert_eq!(lines.join("\n") + "\n", decoded);
}

#[test]
fn failed_runs_leave_an_error_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke_config(dir.path(), "broken");
    cfg.train_files = vec![dir.path().join("missing.jsonl").display().to_string()];
    assert!(run_config(&cfg).is_err());
    let rd = run_dir(&cfg);
    let m: ErrorManifest = serde_json::from_str(&std::fs::read_to_string(rd.join("error.json")).unwrap()).unwrap();
    assert_eq!(m.stage, "data");
    assert!(!m.numeric);
    assert!(rd.join("config.toml").exists());
}
