use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set=train.steps=60",
    "--set=train.clf_steps=20",
    "--set=model.hidden=16",
    "--set=eval.n_samples=12",
    "--set=eval.n_seeds=1",
    "--set=eval.steps=10",
    "--set=sample.steps=10",
    "--set=sample.count=3",
];

fn emoguide(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emoguide"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn run_ok(out: &Path, args: &[&str]) -> PathBuf {
    let o = emoguide(out, args);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(
        o.status.success(),
        "{args:?}: {}\n{}",
        stdout,
        String::from_utf8_lossy(&o.stderr)
    );
    let line = stdout
        .lines()
        .find_map(|l| l.strip_prefix("run directory: "))
        .expect("run directory reported");
    PathBuf::from(line)
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(SMALL.iter().copied()).collect()
}

#[test]
fn verify_passes_on_a_fresh_install() {
    let tmp = tempfile::tempdir().unwrap();
    let o = emoguide(tmp.path(), &["verify"]);
    assert_eq!(o.status.code(), Some(0));
    let out = String::from_utf8(o.stdout).unwrap();
    for name in ["gradcheck", "score_oracle", "bayes_identity"] {
        assert!(
            out.lines()
                .any(|l| l.starts_with(name) && l.contains(" ok ")),
            "{out}"
        );
    }
    assert!(out.contains("all 3 oracle checks passed"));
}

#[test]
fn usage_and_config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let o = emoguide(tmp.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));

    let cfg = tmp.path().join("bad.ini");
    fs::write(&cfg, "seed = 1\n[train]\nlearning_rate = 0.1\n").unwrap();
    let o = emoguide(tmp.path(), &["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(
        err.contains("line 3") && err.contains("train.learning_rate"),
        "{err}"
    );

    let o = emoguide(tmp.path(), &["train", "--set", "world.speakers=many"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("none.bin");
    for cmd in ["sample", "eval", "sweep", "train-clf"] {
        let o = emoguide(
            tmp.path(),
            &[cmd, "--checkpoint", missing.to_str().unwrap()],
        );
        assert_eq!(o.status.code(), Some(3), "{cmd}");
    }
}

/// Files whose bytes must repeat exactly when a run is re-executed.
fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

#[test]
fn full_pipeline_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();

    let data = run_ok(out, &with_small(&["gen-data"]));
    assert!(data.join("world.txt").is_file());
    let world = emoguide::synthworld::World::from_text(
        &fs::read_to_string(data.join("world.txt")).unwrap(),
    )
    .unwrap();

    let train = run_ok(out, &with_small(&["train"]));
    for f in [
        "config.resolved",
        "checkpoint.bin",
        "losses.jsonl",
        "metrics.csv",
        "styles.tsv",
    ] {
        assert!(train.join(f).is_file(), "{f}");
    }
    assert_eq!(
        fs::read_to_string(train.join("losses.jsonl"))
            .unwrap()
            .lines()
            .count(),
        60
    );
    let ck = train.join("checkpoint.bin");
    let ck = ck.to_str().unwrap();
    let loaded = emoguide::training::Checkpoint::load(Path::new(ck)).unwrap();
    assert_eq!(loaded.world_hash, world.hash());

    let clf = run_ok(out, &with_small(&["train-clf", "--checkpoint", ck]));
    let ck2 = clf.join("checkpoint.bin");
    let ck2 = ck2.to_str().unwrap();
    assert!(emoguide::training::Checkpoint::load(Path::new(ck2))
        .unwrap()
        .classifier
        .is_some());

    let sample = run_ok(
        out,
        &with_small(&["sample", "--checkpoint", ck2, "--set", "sample.mode=cg"]),
    );
    assert_eq!(
        fs::read_to_string(sample.join("samples.jsonl"))
            .unwrap()
            .lines()
            .count(),
        3
    );

    let eval = run_ok(out, &with_small(&["eval", "--checkpoint", ck2]));
    let csv = fs::read_to_string(eval.join("metrics.csv")).unwrap();
    // seen and unseen x (unguided, two CFG scales, CG)
    assert_eq!(csv.lines().count(), 1 + 2 * 4, "{csv}");

    let sweep = run_ok(
        out,
        &with_small(&["sweep", "--checkpoint", ck, "--gammas", "0,0.5,1.0,1.5,2.0"]),
    );
    let csv = fs::read_to_string(sweep.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert_eq!(csv.lines().next().unwrap(), emoguide::eval::SWEEP_HEADER);

    // The world read from disk reproduces the generated one.
    let from_file = run_ok(
        out,
        &with_small(&[
            "sweep",
            "--checkpoint",
            ck,
            "--world",
            data.join("world.txt").to_str().unwrap(),
        ]),
    );
    assert!(!fs::read(from_file.join("metrics.csv")).unwrap().is_empty());

    for (first, args) in [
        (&data, with_small(&["gen-data"])),
        (&train, with_small(&["train"])),
        (&clf, with_small(&["train-clf", "--checkpoint", ck])),
        (
            &sample,
            with_small(&["sample", "--checkpoint", ck2, "--set", "sample.mode=cg"]),
        ),
        (&eval, with_small(&["eval", "--checkpoint", ck2])),
        (
            &sweep,
            with_small(&["sweep", "--checkpoint", ck, "--gammas", "0,0.5,1.0,1.5,2.0"]),
        ),
    ] {
        let again = run_ok(out, &args);
        assert_ne!(&again, first);
        assert_eq!(artifacts(first), artifacts(&again), "{args:?}");
    }

    // A checkpoint from another world is refused.
    let o = emoguide(
        out,
        &with_small(&["eval", "--checkpoint", ck, "--set", "seed=9"]),
    );
    assert_eq!(o.status.code(), Some(1));
}
