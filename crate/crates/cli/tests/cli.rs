use std::path::Path;
use std::process::{Command, Output};

fn prespec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prespec")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_corpus(dir: &Path) -> std::path::PathBuf {
    let conf = dir.join("synth.conf");
    std::fs::write(&conf, "n_train=300\nn_test=30\nentity_count=80\nentity_alphabet=10\n").unwrap();
    let data = dir.join("data");
    let o = prespec(&["synth-gen", "--seed", "3", "--out-dir", path(&data), "--config", path(&conf)]);
    assert!(o.status.success(), "{}", stderr(&o));
    data
}

const SMALL_MODEL: &str = "layers=1\nmodel_dim=16\nff_dim=32\nheads=2\nepochs=1\nbpe_merges=200\nbeam_size=2\n";

#[test]
fn usage_errors_exit_with_two() {
    let o = prespec(&["annotate", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    let o = prespec(&[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn annotate_training_and_test_mode() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("a.src"), "我 爱 香港\n他 去 澳门\n").unwrap();
    std::fs::write(d.join("a.tgt"), "i love hong kong\nhe goes to macau\n").unwrap();
    std::fs::write(d.join("lex.tsv"), "香港\thong kong\t0.9\n").unwrap();

    let o = prespec(&[
        "annotate",
        "--src",
        path(&d.join("a.src")),
        "--tgt",
        path(&d.join("a.tgt")),
        "--lexicon",
        path(&d.join("lex.tsv")),
        "--scheme",
        "tm",
        "--extra",
        "--out-prefix",
        path(&d.join("train")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let src = std::fs::read_to_string(d.join("train.src")).unwrap();
    assert_eq!(src, "我 爱 <start> 香港 <middle> hong kong <end>\n他 去 澳门\n");
    assert_eq!(
        std::fs::read_to_string(d.join("train.tgt")).unwrap(),
        "i love <start> hong kong <end>\nhe goes to macau\n"
    );
    assert_eq!(std::fs::read_to_string(d.join("train.types")).unwrap(), "n n n s n t t n\nn n n\n");

    let o = prespec(&[
        "annotate",
        "--test-mode",
        "--src",
        path(&d.join("a.src")),
        "--lexicon",
        path(&d.join("lex.tsv")),
        "--scheme",
        "r",
        "--out-prefix",
        path(&d.join("test")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(d.join("test.src")).unwrap(), "我 爱 hong kong\n他 去 澳门\n");
    assert!(!d.join("test.tgt").exists());
    let sidecar = std::fs::read_to_string(d.join("test.constraints.tsv")).unwrap();
    assert!(sidecar.contains("hong kong"), "{sidecar}");

    // a target in test mode is refused
    let o = prespec(&[
        "annotate",
        "--test-mode",
        "--src",
        path(&d.join("a.src")),
        "--tgt",
        path(&d.join("a.tgt")),
        "--lexicon",
        path(&d.join("lex.tsv")),
        "--out-prefix",
        path(&d.join("bad")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("stage=annotate"), "{}", stderr(&o));
}

#[test]
fn evaluate_names_both_files_on_line_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("hyp.txt"), "a b\nc d\n").unwrap();
    std::fs::write(d.join("ref.txt"), "a b\n").unwrap();
    std::fs::write(d.join("side.tsv"), "#lines=2\n").unwrap();
    let o = prespec(&[
        "evaluate",
        "--hyp",
        path(&d.join("hyp.txt")),
        "--refs",
        path(&d.join("ref.txt")),
        "--sidecar",
        path(&d.join("side.tsv")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.starts_with("error: stage=evaluate"), "{err}");
    assert!(err.contains("hyp.txt") && err.contains("ref.txt"), "{err}");
    assert_eq!(err.lines().count(), 1, "{err}");
}

#[test]
fn grad_check_passes() {
    let o = prespec(&["grad-check", "--seed", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn pipeline_runs_and_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = small_corpus(d);
    let conf = d.join("model.conf");
    std::fs::write(&conf, SMALL_MODEL).unwrap();

    let run = |out: &Path, extra: &[&str]| {
        let mut args = vec![
            "pipeline",
            "--data-dir",
            path(&data),
            "--out-dir",
            path(out),
            "--scheme",
            "tm",
            "--extra",
            "--config",
            path(&conf),
        ];
        args.extend_from_slice(extra);
        let o = prespec(&args);
        assert!(o.status.success(), "{}", stderr(&o));
    };
    let (a, b) = (d.join("run-a"), d.join("run-b"));
    run(&a, &[]);
    run(&b, &[]);

    for f in ["report.txt", "model.ckpt", "test.hyp", "vocab.txt", "bpe.model"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f} differs between identical runs"
        );
    }
    let manifest = std::fs::read_to_string(a.join("manifest.txt")).unwrap();
    for key in ["scheme=T&M&E", "stage.train.cmd=", "config.epochs=1", "output.model.ckpt.sha256=", "result.phrase_rate="] {
        assert!(manifest.contains(key), "{key} missing from manifest");
    }
    let report = std::fs::read_to_string(a.join("report.txt")).unwrap();
    assert!(report.contains("bleu="), "{report}");
    // no scratch directory is left behind
    let leftovers = std::fs::read_dir(d).unwrap().filter(|e| {
        e.as_ref().unwrap().file_name().to_string_lossy().contains(".partial-")
    });
    assert_eq!(leftovers.count(), 0);

    // an existing output directory is refused without --force
    let o = prespec(&["pipeline", "--data-dir", path(&data), "--out-dir", path(&a), "--config", path(&conf)]);
    assert_eq!(o.status.code(), Some(1));

    // mined lexicon variant
    let c = d.join("run-mined");
    run(&c, &["--mine"]);
    assert!(c.join("lexicon.mined.tsv").is_file());
}
