mod common;

use std::fs;
use std::path::Path;

use common::*;
use paed::config::RunConfig;
use paed::datasets::load_annotations;
use tempfile::TempDir;

/// A generated tiny corpus and a model trained on it.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new(extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let conf = write_config(dir.path(), "tiny.conf", &format!("{TINY}{extra}"));
        let corpus = dir.path().join("corpus");
        let run = dir.path().join("run");
        ok(paed(&["gen", "--config", s(&conf), "--out", s(&corpus)]));
        ok(paed(&[
            "train",
            "--config",
            s(&conf),
            "--corpus",
            s(&corpus),
            "--out",
            s(&run),
        ]));
        Self { dir }
    }

    fn path(&self, rel: &str) -> std::path::PathBuf {
        self.dir.path().join(rel)
    }

    fn ckpt(&self) -> std::path::PathBuf {
        self.path("run/model.ckpt")
    }

    fn test_wav(&self) -> std::path::PathBuf {
        self.path("corpus/test/test_000.wav")
    }
}

#[test]
fn help_version_and_usage_errors() {
    assert_eq!(code(&paed(&["--help"])), 0);
    assert_eq!(code(&paed(&["--version"])), 0);
    assert_eq!(code(&paed(&["train", "--help"])), 0);
    assert_eq!(code(&paed(&[])), 1);
    assert_eq!(code(&paed(&["frobnicate"])), 1);
    assert_eq!(code(&paed(&["gen"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c");
    let bad_key = paed(&["gen", "--set", "colour=blue", "--out", s(&out)]);
    assert_eq!(code(&bad_key), 1);
    assert!(stderr(&bad_key).contains("colour"));
    assert_eq!(code(&paed(&["gen", "--set", "seed", "--out", s(&out)])), 1);
    assert_eq!(
        code(&paed(&[
            "gen",
            "--config",
            "/no/such/file",
            "--out",
            s(&out)
        ])),
        1
    );
    assert_eq!(
        code(&paed_env(
            &["gen", "--out", s(&out)],
            &[("PAED_COLOUR", "blue")]
        )),
        1
    );
    assert!(!out.exists());
}

#[test]
fn indivisible_task_count_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), "t.conf", TINY);
    let corpus = dir.path().join("corpus");
    ok(paed(&["gen", "--config", s(&conf), "--out", s(&corpus)]));
    let out = paed(&[
        "train",
        "--config",
        s(&conf),
        "--set",
        "tasks=3",
        "--corpus",
        s(&corpus),
        "--out",
        s(&dir.path().join("r")),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("divide"), "{}", stderr(&out));
    let default16 = paed(&[
        "train",
        "--set",
        "tasks=3",
        "--corpus",
        s(&corpus),
        "--out",
        s(&dir.path().join("r")),
    ]);
    assert_eq!(code(&default16), 1);
}

#[test]
fn missing_or_damaged_inputs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), "t.conf", TINY);
    let missing = dir.path().join("missing");
    let r = dir.path().join("r");
    assert_eq!(
        code(&paed(&[
            "train",
            "--config",
            s(&conf),
            "--corpus",
            s(&missing),
            "--out",
            s(&r)
        ])),
        2
    );
    let junk = write_config(dir.path(), "junk.ckpt", "not a checkpoint");
    let out = paed(&[
        "eval",
        "--checkpoint",
        s(&junk),
        "--corpus",
        s(&missing),
        "--out",
        s(&r),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("magic"));
    let p = dir.path().join("p.txt");
    assert_eq!(
        code(&paed(&[
            "predict",
            "--checkpoint",
            s(&junk),
            "--wav",
            "/no.wav",
            "--out",
            s(&p)
        ])),
        2
    );
}

#[test]
fn gen_creates_the_directory_and_echoes_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), "t.conf", TINY);
    let out = dir.path().join("a/b/corpus");
    ok(paed(&["gen", "--config", s(&conf), "--out", s(&out)]));
    for (split, n) in [("train", 2), ("val", 1), ("test", 1)] {
        let wavs = fs::read_dir(out.join(split))
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "wav")
            .count();
        assert_eq!(wavs, n, "{split}");
    }
    let echo = fs::read_to_string(out.join("config.txt")).unwrap();
    let mut want = RunConfig::default();
    want.apply_text(TINY, "tiny").unwrap();
    assert_eq!(RunConfig::parse(&echo).unwrap(), want);
    assert_eq!(fs::read_to_string(out.join("corpus.meta")).unwrap(), echo);
}

#[test]
fn default_gen_splits_sixty_twenty_twenty() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("corpus");
    ok(paed(&[
        "gen",
        "--set",
        "duration=2",
        "--set",
        "events=2",
        "--set",
        "event_max=1",
        "--out",
        s(&out),
    ]));
    for (split, n) in [("train", 60), ("val", 20), ("test", 20)] {
        let txts = fs::read_dir(out.join(split))
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "txt")
            .count();
        assert_eq!(txts, n, "{split}");
    }
}

#[test]
fn flags_override_environment_override_file() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), "t.conf", &format!("{TINY}seed = 1\n"));
    let echo = |args: &[&str], env: &[(&str, &str)]| {
        let out = dir.path().join("c");
        let _ = fs::remove_dir_all(&out);
        let mut all = vec!["gen", "--config", s(&conf), "--out", s(&out)];
        all.extend_from_slice(args);
        ok(paed_env(&all, env));
        RunConfig::parse(&fs::read_to_string(out.join("config.txt")).unwrap()).unwrap()
    };
    assert_eq!(echo(&[], &[]).seed, 1);
    let env = [("PAED_SEED", "2"), ("PAED_EVENTS", "3")];
    let e = echo(&[], &env);
    assert_eq!((e.seed, e.events), (2, 3));
    let f = echo(&["--seed", "3", "--set", "events=1"], &env);
    assert_eq!((f.seed, f.events), (3, 1));
}

#[test]
fn gen_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), "t.conf", TINY);
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        ok(paed(&[
            "gen",
            "--config",
            s(&conf),
            "--seed",
            seed,
            "--out",
            s(&out),
        ]));
        tree(&out)
    };
    let a = run("a", "5");
    assert_eq!(a, run("b", "5"));
    assert_ne!(a, run("c", "6"));
}

#[test]
fn train_eval_artifacts() {
    let fx = Fixture::new("");
    let run = fx.path("run");
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("epoch,step,train_loss,val_microF1"));
    assert!(lines.next().unwrap().starts_with("1,3,"));
    let echo = fs::read_to_string(run.join("config.txt")).unwrap();

    let ev = fx.path("ev");
    let out = ok(paed(&[
        "eval",
        "--checkpoint",
        s(&fx.ckpt()),
        "--corpus",
        s(&fx.path("corpus")),
        "--out",
        s(&ev),
    ]));
    let summary = stdout(&out);
    assert!(
        summary.contains("macro F1") && summary.contains("micro F1"),
        "{summary}"
    );
    assert_eq!(fs::read_to_string(ev.join("config.txt")).unwrap(), echo);

    let per_class = fs::read_to_string(ev.join("per_class.csv")).unwrap();
    let rows: Vec<&str> = per_class.lines().collect();
    assert_eq!(rows[0], "name,TP,FP,FN,P,R,F1");
    let cfg = RunConfig::parse(&echo).unwrap();
    for (row, name) in rows[1..5].iter().zip(&cfg.categories) {
        assert!(row.starts_with(&format!("{name},")), "{row}");
    }
    assert!(rows[5].starts_with("micro,") && rows[6].starts_with("macro,"));
    let by_degree = fs::read_to_string(ev.join("by_degree.csv")).unwrap();
    let degrees: Vec<&str> = by_degree
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(degrees, ["1", "2", "3", "4", "5", "6"]);

    let again = fx.path("ev2");
    ok(paed(&[
        "eval",
        "--checkpoint",
        s(&fx.ckpt()),
        "--corpus",
        s(&fx.path("corpus")),
        "--out",
        s(&again),
    ]));
    assert_eq!(tree(&ev), tree(&again));

    let bad_split = paed(&[
        "eval",
        "--checkpoint",
        s(&fx.ckpt()),
        "--corpus",
        s(&fx.path("corpus")),
        "--split",
        "dev",
        "--out",
        s(&again),
    ]);
    assert_eq!(code(&bad_split), 1);
}

#[test]
fn eval_rejects_a_corpus_with_other_categories() {
    let fx = Fixture::new("");
    let dir = fx.path("other");
    let conf = write_config(
        fx.dir.path(),
        "o.conf",
        &TINY.replace("categories = 4", "categories = 6"),
    );
    ok(paed(&[
        "gen",
        "--config",
        s(&conf),
        "--seed",
        "3",
        "--out",
        s(&dir),
    ]));
    let out = paed(&[
        "eval",
        "--checkpoint",
        s(&fx.ckpt()),
        "--corpus",
        s(&dir),
        "--out",
        s(&fx.path("ev")),
    ]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn predict_writes_parseable_annotations() {
    let fx = Fixture::new("");
    let out = fx.path("pred/test_000.txt");
    ok(paed(&[
        "predict",
        "--checkpoint",
        s(&fx.ckpt()),
        "--wav",
        s(&fx.test_wav()),
        "--out",
        s(&out),
    ]));
    let cfg = RunConfig::parse(&fs::read_to_string(fx.path("run/config.txt")).unwrap()).unwrap();
    let anns = load_annotations(&out, &cfg.category_set().unwrap()).unwrap();
    assert!(anns
        .iter()
        .all(|a| a.onset < a.offset && a.offset <= 4.0 + 1e-9));
    assert_eq!(
        fs::read_to_string(fx.path("pred/test_000.txt.config")).unwrap(),
        fs::read_to_string(fx.path("run/config.txt")).unwrap()
    );
}

#[test]
fn baseline_above_certain_threshold_predicts_nothing() {
    let fx = Fixture::new("model = baseline\nthreshold = 1\n");
    let out = fx.path("p.txt");
    ok(paed(&[
        "predict",
        "--checkpoint",
        s(&fx.ckpt()),
        "--wav",
        s(&fx.test_wav()),
        "--out",
        s(&out),
    ]));
    assert_eq!(fs::read_to_string(&out).unwrap(), "");

    let dump = paed(&[
        "attn-dump",
        "--checkpoint",
        s(&fx.ckpt()),
        "--wav",
        s(&fx.test_wav()),
        "--task",
        "1",
        "--level",
        "1",
        "--out",
        s(&fx.path("att")),
    ]);
    assert_eq!(code(&dump), 2);
}

fn csv_values(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn attn_dump_grids_and_images() {
    let fx = Fixture::new("");
    let dump = |task: &str, level: &str, seg: &str, out: &str| {
        paed(&[
            "attn-dump",
            "--checkpoint",
            s(&fx.ckpt()),
            "--wav",
            s(&fx.test_wav()),
            "--task",
            task,
            "--level",
            level,
            "--segment",
            seg,
            "--out",
            s(&fx.path(out)),
        ])
    };
    ok(dump("1", "1", "1", "att"));
    let tf = csv_values(&fx.path("att/tf_mask.csv"));
    assert_eq!(tf.len(), 128);
    assert!(tf.iter().all(|r| r.len() == 64));
    let ch = csv_values(&fx.path("att/channel_mask.csv"));
    assert_eq!((ch.len(), ch[0].len()), (1, 4));
    assert!(tf.iter().chain(&ch).flatten().all(|&v| v > 0.0 && v < 1.0));
    let pgm = fs::read(fx.path("att/tf_mask.pgm")).unwrap();
    let header = b"P5\n128 64\n255\n";
    assert_eq!(&pgm[..header.len()], header);
    assert_eq!(pgm.len(), header.len() + 128 * 64);
    assert!(fx.path("att/channel_mask.pgm").exists() && fx.path("att/config.txt").exists());

    ok(dump("2", "5", "2", "att5"));
    let tf5 = csv_values(&fx.path("att5/tf_mask.csv"));
    assert_eq!((tf5.len(), tf5[0].len()), (128, 4));
    assert_eq!(csv_values(&fx.path("att5/channel_mask.csv"))[0].len(), 8);

    for (task, level, seg) in [
        ("0", "1", "1"),
        ("3", "1", "1"),
        ("1", "0", "1"),
        ("1", "6", "1"),
        ("1", "1", "3"),
    ] {
        assert_eq!(
            code(&dump(task, level, seg, "bad")),
            1,
            "{task} {level} {seg}"
        );
    }
}

#[test]
fn training_is_reproducible() {
    let a = Fixture::new("");
    let b = Fixture::new("");
    assert_eq!(tree(&a.path("run")), tree(&b.path("run")));
    let c = Fixture::new("seed = 8\n");
    assert_ne!(fs::read(a.ckpt()).unwrap(), fs::read(c.ckpt()).unwrap());
}

#[test]
fn high_precision_runs_end_to_end() {
    let fx = Fixture::new("precision = high\n");
    ok(paed(&[
        "eval",
        "--checkpoint",
        s(&fx.ckpt()),
        "--corpus",
        s(&fx.path("corpus")),
        "--split",
        "val",
        "--out",
        s(&fx.path("ev")),
    ]));
}
