use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cu_core::dataio::{load_corpus, load_pseudo_labels};
use cu_core::evalkit::load_records;

const SMALL_CONFIG: &str = "\
batch_size = 8
clusters_per_batch = 2
num_clusters = 3
model_dim = 8
hidden_dim = 8
epochs = 2
explicit_epochs = 2
";

fn cu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cu")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = cu(args);
    assert_eq!(
        out.status.code(),
        Some(0),
        "cu {args:?}\nstderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let config = root.join("small.toml");
        std::fs::write(&config, SMALL_CONFIG).unwrap();
        Self { _tmp: tmp, root, config }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn gen(&self, name: &str, samples: &str, extra: &[&str]) -> PathBuf {
        let out = self.p(name);
        let mut args = vec!["gen", "--out", s(&out), "--samples", samples];
        args.extend_from_slice(extra);
        ok(&args);
        out
    }
}

#[test]
fn gen_requires_out() {
    let out = cu(&["gen", "--samples", "4"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--out"));
}

#[test]
fn gen_is_reproducible() {
    let f = Fixture::new();
    let a = f.gen("a", "6", &["--seed", "3"]);
    let b = f.gen("b", "6", &["--seed", "3"]);
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 1 + 6 * 3);
    for n in names {
        assert_eq!(std::fs::read(a.join(&n)).unwrap(), std::fs::read(b.join(&n)).unwrap(), "{n:?}");
    }
    let c = load_corpus(&a).unwrap();
    assert_eq!(c.len(), 6);
}

#[test]
fn gen_holdout_continues_the_same_draw() {
    let f = Fixture::new();
    let plain = load_corpus(&f.gen("plain", "6", &[])).unwrap();
    let held_dir = f.p("held");
    let main = load_corpus(&f.gen("main", "6", &["--holdout", "3", "--holdout-out", s(&held_dir)])).unwrap();
    let held = load_corpus(&held_dir).unwrap();
    assert_eq!(main.samples, plain.samples);
    let ids: Vec<&str> = held.samples.iter().map(|s| s.id.as_str()).collect();
    assert_eq!(ids, ["s00006", "s00007", "s00008"]);

    let out = cu(&["gen", "--out", s(&f.p("x")), "--holdout", "3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--holdout-out"));
}

#[test]
fn gen_rejects_bad_settings_as_data_error() {
    let f = Fixture::new();
    let out = cu(&["gen", "--out", s(&f.p("c")), "--clusters", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("clusters"));
}

#[test]
fn label_rejects_unknown_distribution() {
    let out = cu(&["label", "--corpus", "x", "--out", "y", "--dist", "triangular"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("uniform") && err.contains("gaussian"), "{err}");
}

#[test]
fn label_places_clips_inside_ground_truth() {
    let f = Fixture::new();
    let c = f.gen("c", "20", &[]);
    let single = f.p("single");
    ok(&["label", "--corpus", s(&c), "--out", s(&single), "--dist", "uniform", "--dur", "0"]);
    for smp in load_corpus(&single).unwrap().samples {
        let l = smp.label.unwrap();
        assert!(l.is_single_frame());
        assert!(smp.gt.unwrap().contains(&l.interval()));
    }
    let clips = f.p("clips");
    ok(&["label", "--corpus", s(&c), "--out", s(&clips), "--dist", "gaussian", "--dur", "2", "--seed", "4"]);
    for smp in load_corpus(&clips).unwrap().samples {
        let l = smp.label.unwrap();
        assert_eq!(l.range, 2.0 * smp.fps);
        assert!(smp.gt.unwrap().contains(&l.interval()));
    }
}

#[test]
fn missing_input_file_is_a_data_error() {
    let f = Fixture::new();
    let out = cu(&["label", "--corpus", s(&f.p("nope")), "--out", s(&f.p("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("nope"));
}

#[test]
fn export_requires_checkpoint() {
    let out = cu(&["export-pseudo", "--corpus", "c", "--out", "p.txt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--ckpt"));
}

#[test]
fn flags_must_name_known_losses() {
    let out = cu(&["train-implicit", "--corpus", "c", "--out", "m", "--flags", "raml,bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("bogus"));
    let out = cu(&["train-implicit", "--corpus", "c", "--out", "m", "--flags", ""]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stage_by_stage_pipeline() {
    let f = Fixture::new();
    let c = f.gen("c", "16", &[]);
    let test = f.gen("t", "6", &["--seed", "8", "--id-offset", "16"]);
    let labelled = f.p("labelled");
    ok(&["label", "--corpus", s(&c), "--out", s(&labelled)]);

    let ckpt = f.p("implicit.ckpt");
    let log = f.p("implicit.jsonl");
    ok(&[
        "train-implicit",
        "--corpus",
        s(&labelled),
        "--out",
        s(&ckpt),
        "--config",
        s(&f.config),
        "--flags",
        "raml",
        "--log",
        s(&log),
    ]);
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 2);

    let pseudo = f.p("pseudo.txt");
    ok(&["export-pseudo", "--ckpt", s(&ckpt), "--corpus", s(&labelled), "--out", s(&pseudo)]);
    assert_eq!(load_pseudo_labels(&pseudo).unwrap().len(), 16);

    let xckpt = f.p("explicit.ckpt");
    ok(&[
        "train-explicit",
        "--corpus",
        s(&c),
        "--pseudo",
        s(&pseudo),
        "--out",
        s(&xckpt),
        "--config",
        s(&f.config),
    ]);
    // an implicit checkpoint is not an explicit one
    let wrong = cu(&["infer", "--ckpt", s(&ckpt), "--corpus", s(&test), "--out", s(&f.p("x.txt"))]);
    assert_eq!(wrong.status.code(), Some(1));

    let pred = f.p("pred.txt");
    ok(&["infer", "--ckpt", s(&xckpt), "--corpus", s(&test), "--out", s(&pred)]);
    let table = ok(&["eval", "--pred", s(&pred), "--gt", s(&test)]);
    let table = String::from_utf8(table.stdout).unwrap();
    let header = table.lines().next().unwrap();
    for col in ["R@0.3", "R@0.5", "R@0.7", "mIoU"] {
        assert!(header.contains(col), "{header}");
    }
    let rec = f.p("eval.txt");
    ok(&["eval", "--pred", s(&pred), "--gt", s(&test), "--format", "records", "--tag", "held", "--out", s(&rec)]);
    let reports = load_records(&rec).unwrap();
    assert_eq!(reports[0].tag, "held");
    assert_eq!(reports[0].n, 6);

    // predictions for the test corpus scored against the training corpus
    let out = cu(&["eval", "--pred", s(&pred), "--gt", s(&c)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("s00016"), "{}", stderr(&out));
}

#[test]
fn two_stage_writes_every_artifact() {
    let f = Fixture::new();
    let c = f.gen("c", "16", &[]);
    let test = f.gen("t", "6", &["--seed", "8", "--id-offset", "16"]);
    let out = f.p("run");
    let o = ok(&[
        "run-two-stage",
        "--train",
        s(&c),
        "--test",
        s(&test),
        "--out",
        s(&out),
        "--config",
        s(&f.config),
    ]);
    assert!(String::from_utf8(o.stdout).unwrap().contains("pseudo"));
    for name in [
        "config.toml",
        "implicit.ckpt",
        "explicit.ckpt",
        "pseudo.txt",
        "predictions.txt",
        "eval.txt",
        "implicit.log.jsonl",
        "explicit.log.jsonl",
    ] {
        assert!(out.join(name).exists(), "{name}");
    }
    let tags: Vec<String> = load_records(&out.join("eval.txt")).unwrap().into_iter().map(|r| r.tag).collect();
    assert_eq!(tags, ["pseudo", "test"]);

    let clash = cu(&["run-two-stage", "--train", s(&c), "--test", s(&c), "--out", s(&f.p("r2"))]);
    assert_eq!(clash.status.code(), Some(1));
}

fn table_rows(stdout: &[u8]) -> Vec<String> {
    String::from_utf8_lossy(stdout)
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split_whitespace().next().unwrap().to_string())
        .collect()
}

#[test]
fn grids_have_fixed_rows_and_resume() {
    let f = Fixture::new();
    let c = f.gen("c", "16", &[]);
    let out = f.p("grid");
    let cfg = ["--config", s(&f.config), "--epochs", "1", "--seeds", "1"];
    let mut args = vec!["ablate", "--corpus", s(&c), "--out", s(&out)];
    args.extend_from_slice(&cfg);
    let first = ok(&args);
    assert_eq!(table_rows(&first.stdout), ["A1", "A2", "A3", "A4", "A5", "A6"]);
    let cells = out.join("cells");
    assert_eq!(std::fs::read_dir(&cells).unwrap().count(), 6);

    // a finished cell is reused, not retrained
    let stamps = |dir: &Path| -> Vec<_> {
        let mut v: Vec<_> = std::fs::read_dir(dir)
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path().join("report.txt");
                (p.clone(), std::fs::metadata(&p).unwrap().modified().unwrap())
            })
            .collect();
        v.sort();
        v
    };
    let before = stamps(&cells);
    let again = ok(&args);
    assert_eq!(again.stdout, first.stdout);
    assert_eq!(stamps(&cells), before);

    let mut args = vec!["robustness", "--corpus", s(&c), "--out", s(&out)];
    args.extend_from_slice(&cfg);
    let rob = ok(&args);
    assert_eq!(
        table_rows(&rob.stdout),
        ["uniform-1", "uniform-2", "uniform-3", "gaussian", "2s", "3s", "4s"]
    );
    // uniform-1 shares its cell with A6
    assert_eq!(std::fs::read_dir(&cells).unwrap().count(), 6 + 6);
}

#[test]
fn invalid_thread_count_is_rejected() {
    let f = Fixture::new();
    let c = f.gen("c", "16", &[]);
    let out = Command::new(env!("CARGO_BIN_EXE_cu"))
        .args(["ablate", "--corpus", s(&c), "--out", s(&f.p("g")), "--seeds", "1"])
        .env("CU_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("CU_THREADS"));
}
