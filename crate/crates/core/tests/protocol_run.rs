mod common;

use std::fs;

use rtransfer::corpus::{file_name, Side, Split};
use rtransfer::io::sha256_file;
use rtransfer::protocol::{run_protocol, Protocol, ProtocolError, Setting};

#[test]
fn builds_runs_and_resumes() {
    let t = tempfile::tempdir().unwrap();
    let cfg = common::setup_experiment(
        t.path(),
        &["fr-en", "de-en"],
        "fr-en",
        40,
        common::IDENTITY_TRANSLATOR,
    );
    let p = Protocol::load(&cfg).unwrap();
    let s = p.run().unwrap();
    assert_eq!(s.trained.len(), 4);
    assert_eq!(s.scored.len(), 4 * 4 * 2);
    assert!(s.report.is_complete());
    let out = t.path().join("run");
    for f in [
        "report.md",
        "grid.csv",
        "deltas.tsv",
        "state.json",
        "report.json",
        "effective_config.toml",
    ] {
        assert!(out.join(f).is_file(), "{f}");
    }

    // training dirs: only the attacked train source differs from clean
    let attacked = "fr-en".parse().unwrap();
    let clean = p.train_dir(Setting::Clean);
    let mut names: Vec<String> = fs::read_dir(&clean)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names.len(), 2 * 2 * 2);
    for name in &names {
        assert_eq!(
            sha256_file(&clean.join(name)).unwrap(),
            sha256_file(&t.path().join("data").join(name)).unwrap()
        );
    }
    let target = file_name(Split::Train, &attacked, Side::Src);
    for s in [
        Setting::CharAttack,
        Setting::WordAttack,
        Setting::MultiAttack,
    ] {
        let dir = p.train_dir(s);
        for name in &names {
            let same =
                sha256_file(&dir.join(name)).unwrap() == sha256_file(&clean.join(name)).unwrap();
            assert_eq!(same, *name != target, "{s} {name}");
        }
    }
    let a = fs::read_to_string(p.train_dir(Setting::CharAttack).join(&target)).unwrap();
    let c = fs::read_to_string(clean.join(&target)).unwrap();
    for (x, y) in a.lines().zip(c.lines()) {
        assert_eq!(x.split(' ').count(), y.split(' ').count());
    }

    // second run reuses everything
    let s2 = run_protocol(&cfg).unwrap();
    assert!(s2.trained.is_empty() && s2.scored.is_empty());
    assert_eq!(s2.reused, 32);
    assert_eq!(
        s2.report.cells.iter().map(|c| c.bleu).collect::<Vec<_>>(),
        s.report.cells.iter().map(|c| c.bleu).collect::<Vec<_>>()
    );

    // a tampered hypothesis is recomputed
    let hyp = p.hyp_path(
        Setting::WordAttack,
        Setting::Clean,
        &"de-en".parse().unwrap(),
    );
    fs::write(&hyp, "x\n").unwrap();
    let s3 = run_protocol(&cfg).unwrap();
    assert_eq!(s3.scored, vec!["word/clean/de-en".to_string()]);

    let ex = p.extract_examples(&attacked, &[0, 3]).unwrap();
    assert!(ex.contains("== fr-en line 3"));
    assert!(ex.contains("char noisy source\t"));
}

#[test]
fn hook_failures_are_reported() {
    let t = tempfile::tempdir().unwrap();
    let cfg = common::setup_experiment(
        t.path(),
        &["fr-en", "de-en"],
        "fr-en",
        10,
        "echo broken model >&2; exit 3 # {model_dir} {src_file} {out_file} {direction}",
    );
    match run_protocol(&cfg) {
        Err(ProtocolError::HookFailure { stderr, .. }) => assert!(stderr.contains("broken model")),
        other => panic!("expected hook failure, got {other:?}"),
    }
    let t = tempfile::tempdir().unwrap();
    let cfg = common::setup_experiment(
        t.path(),
        &["fr-en", "de-en"],
        "fr-en",
        10,
        "true {model_dir} {src_file} {out_file} {direction}",
    );
    assert!(matches!(
        run_protocol(&cfg),
        Err(ProtocolError::MissingOutput(_))
    ));
}

#[test]
fn changed_config_starts_over() {
    let t = tempfile::tempdir().unwrap();
    let cfg = common::setup_experiment(
        t.path(),
        &["fr-en", "de-en"],
        "fr-en",
        10,
        common::IDENTITY_TRANSLATOR,
    );
    run_protocol(&cfg).unwrap();
    let text = fs::read_to_string(&cfg)
        .unwrap()
        .replace("global_seed = 42", "global_seed = 43");
    fs::write(&cfg, text).unwrap();
    let s = run_protocol(&cfg).unwrap();
    assert_eq!(s.built_train.len(), 4);
    assert_eq!(s.trained.len(), 4);
    assert_eq!(s.scored.len(), 32);
}

#[test]
fn shipped_example_config_is_valid() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../hooks/experiment.toml");
    let cfg = rtransfer::protocol::ExperimentConfig::load(&path).unwrap();
    assert_eq!(cfg.settings.len(), 4);
    assert_eq!(cfg.embeddings.paths.len(), 4);
}
