//! End-to-end checks of the `entsiam` binary: every subcommand runs against
//! a real (tiny) corpus, artifacts land where they should, identical
//! invocations write identical bytes, and bad input exits nonzero.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_entsiam"));
    // Keep an ambient config file from leaking into the tests.
    cmd.env_remove("ENTSIAM_CONFIG");
    cmd
}

/// Run to completion, insist on exit 0, hand back stdout.
fn ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawning entsiam");
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

/// Run to completion, insist on a nonzero exit, hand back stderr.
fn fail(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawning entsiam");
    assert!(
        !out.status.success(),
        "expected failure, got success\nstdout: {}",
        String::from_utf8_lossy(&out.stdout)
    );
    String::from_utf8(out.stderr).expect("utf-8 stderr")
}

/// 4 families x 6 samples, enough for 2-way episodes with a few queries.
fn synth(dir: &Path, seed: u64) -> PathBuf {
    ok(bin()
        .args(["synth", "--families", "4", "--per-family", "6"])
        .arg("--out")
        .arg(dir)
        .args(["--seed", &seed.to_string()]));
    dir.join("manifest.tsv")
}

fn data_lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .map(str::to_owned)
        .collect()
}

#[test]
fn synth_is_reproducible_and_ingestable() {
    let tmp = tempfile::tempdir().unwrap();
    let a = synth(&tmp.path().join("a"), 11);
    let b = synth(&tmp.path().join("b"), 11);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    // Every sample file matches too, byte for byte.
    for line in data_lines(&a) {
        let rel = line.split('\t').nth(3).unwrap();
        assert_eq!(
            std::fs::read(tmp.path().join("a").join(rel)).unwrap(),
            std::fs::read(tmp.path().join("b").join(rel)).unwrap(),
            "{rel}"
        );
    }

    // Re-scanning the tree finds the same samples (scan derives its own
    // origin ids, so compare family, path and lineage).
    let scanned = tmp.path().join("scanned.tsv");
    let stdout = ok(bin()
        .arg("ingest")
        .arg(tmp.path().join("a"))
        .arg("--manifest")
        .arg(&scanned));
    assert!(stdout.contains("24 samples in 4 families"), "{stdout}");
    let key = |line: &String| {
        let f: Vec<&str> = line.split('\t').collect();
        (f[2].to_owned(), f[3].to_owned(), f[4].to_owned())
    };
    assert_eq!(
        data_lines(&a).iter().map(key).collect::<Vec<_>>(),
        data_lines(&scanned).iter().map(key).collect::<Vec<_>>()
    );
}

#[test]
fn obfuscate_appends_variants_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(tmp.path(), 12);
    let mut outs = Vec::new();
    for name in ["obf1.tsv", "obf2.tsv"] {
        let out = tmp.path().join(name);
        let stdout = ok(bin()
            .arg("obfuscate")
            .arg("--manifest")
            .arg(&manifest)
            .args(["--frequency", "200", "--frequency", "400", "--seed", "9"])
            .arg("--out-manifest")
            .arg(&out));
        assert!(stdout.contains("72 entries (48 new variants)"), "{stdout}");
        outs.push(data_lines(&out));
    }
    assert_eq!(outs[0], outs[1]);

    // Variant samples really are on disk, 200 bytes longer than the parent.
    let first_variant = outs[0]
        .iter()
        .find(|l| l.contains("nop200"))
        .unwrap()
        .split('\t')
        .nth(3)
        .unwrap()
        .to_owned();
    let parent = first_variant.replace(".nop200", "");
    let variant_len = std::fs::read(tmp.path().join(&first_variant)).unwrap().len();
    let parent_len = std::fs::read(tmp.path().join(&parent)).unwrap().len();
    assert_eq!(variant_len, parent_len + 200);
}

#[test]
fn render_writes_pgms_and_stats() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(tmp.path(), 13);
    let images = tmp.path().join("images");
    ok(bin()
        .arg("render")
        .arg("--manifest")
        .arg(&manifest)
        .arg("--out")
        .arg(&images));

    let pgms: Vec<_> = (0..4)
        .flat_map(|f| {
            std::fs::read_dir(images.join(format!("fam{f:02}")))
                .unwrap()
                .map(|e| e.unwrap().path())
        })
        .collect();
    assert_eq!(pgms.len(), 24);
    let head = std::fs::read(&pgms[0]).unwrap();
    assert!(head.starts_with(b"P5\n"), "not a binary PGM");
    assert!(head.windows(12).any(|w| w == b"105 105\n255\n"), "wrong size");

    let stats = std::fs::read_to_string(images.join("stats.tsv")).unwrap();
    assert!(stats.contains("# block_size = 256"), "{stats}");
    assert!(stats.contains("mean\tstd\timages\tpixels"), "{stats}");
}

#[test]
fn train_eval_embed_roundtrip() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(tmp.path(), 14);

    let train_args = [
        "--episodes", "25", "--channels", "4", "--head-dim", "16",
        "--queries", "4", "--test-classes", "2", "--seed", "3",
    ];
    let mut ckpts = Vec::new();
    for name in ["m1.ckpt", "m2.ckpt"] {
        let ckpt = tmp.path().join(name);
        let losses = tmp.path().join(format!("{name}.losses.tsv"));
        let stdout = ok(bin()
            .arg("train")
            .arg("--manifest")
            .arg(&manifest)
            .arg("--out")
            .arg(&ckpt)
            .arg("--losses")
            .arg(&losses)
            .args(train_args));
        assert!(stdout.contains("trained 25 episodes on 2 classes"), "{stdout}");
        let log = std::fs::read_to_string(&losses).unwrap();
        assert!(log.contains("# channels=4"), "{log}");
        assert!(log.contains("# train_classes="), "{log}");
        assert_eq!(data_lines(&losses).len(), 26, "header + one row per episode");
        ckpts.push(std::fs::read(&ckpt).unwrap());
    }
    // Identical invocations write identical checkpoints.
    assert_eq!(ckpts[0], ckpts[1]);

    let ckpt = tmp.path().join("m1.ckpt");
    let report = tmp.path().join("report.txt");
    let stdout = ok(bin()
        .arg("eval")
        .arg("--manifest")
        .arg(&manifest)
        .arg("--checkpoint")
        .arg(&ckpt)
        .args(["--queries", "4", "--eval-episodes", "10", "--runs", "2",
               "--test-classes", "2", "--seed", "3"])
        .arg("--report")
        .arg(&report));
    let line = stdout.trim();
    assert!(
        line.starts_with("2-way 1-shot: 0.") && line.contains(" ± "),
        "unexpected summary: {line}"
    );
    let report = std::fs::read_to_string(&report).unwrap();
    assert!(report.contains("# channels=4"), "architecture from checkpoint:\n{report}");
    assert!(report.contains("run\t0\t"), "{report}");

    // Obfuscated-lineage evaluation against an extended manifest.
    let obf = tmp.path().join("obf.tsv");
    ok(bin()
        .arg("obfuscate")
        .arg("--manifest")
        .arg(&manifest)
        .args(["--frequency", "200", "--seed", "9"])
        .arg("--out-manifest")
        .arg(&obf));
    let stdout = ok(bin()
        .arg("eval")
        .arg("--manifest")
        .arg(&obf)
        .arg("--checkpoint")
        .arg(&ckpt)
        .args(["--lineage", "obfuscated:200", "--queries", "4",
               "--eval-episodes", "10", "--runs", "2", "--test-classes", "2",
               "--seed", "3"]));
    assert!(stdout.trim().starts_with("2-way 1-shot: 0."), "{stdout}");

    let emb = tmp.path().join("emb.tsv");
    ok(bin()
        .arg("embed")
        .arg("--manifest")
        .arg(&manifest)
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--out")
        .arg(&emb));
    let lines = std::fs::read_to_string(&emb).unwrap().lines().count();
    assert_eq!(lines, 25, "header + one row per sample");
}

#[test]
fn config_file_layers_under_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(tmp.path(), 15);
    let conf = tmp.path().join("run.conf");
    std::fs::write(
        &conf,
        "episodes_train = 6\nqueries = 3\nchannels = 4\nhead_dim = 16\nseed = 5\ntest_classes = 2\n",
    )
    .unwrap();

    // --queries overrides the file; everything else comes from it.
    let losses = tmp.path().join("losses.tsv");
    ok(bin()
        .arg("train")
        .arg("--manifest")
        .arg(&manifest)
        .arg("--config")
        .arg(&conf)
        .args(["--queries", "5"])
        .arg("--out")
        .arg(tmp.path().join("m.ckpt"))
        .arg("--losses")
        .arg(&losses));
    let log = std::fs::read_to_string(&losses).unwrap();
    assert!(log.contains("# queries=5"), "{log}");
    assert!(log.contains("# channels=4"), "{log}");
    assert!(log.contains("# episodes_train=6"), "{log}");

    // The environment variable names the default config file.
    let losses_env = tmp.path().join("losses-env.tsv");
    ok(bin()
        .arg("train")
        .arg("--manifest")
        .arg(&manifest)
        .env("ENTSIAM_CONFIG", &conf)
        .arg("--out")
        .arg(tmp.path().join("m-env.ckpt"))
        .arg("--losses")
        .arg(&losses_env));
    let log = std::fs::read_to_string(&losses_env).unwrap();
    assert!(log.contains("# queries=3"), "{log}");
    assert!(log.contains("# channels=4"), "{log}");
}

#[test]
fn bad_inputs_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();

    let err = fail(bin().arg("ingest").arg(tmp.path().join("no-such-root")));
    assert!(err.contains("no-such-root"), "{err}");

    let manifest = synth(tmp.path(), 16);
    let err = fail(bin()
        .arg("train")
        .arg("--manifest")
        .arg(&manifest)
        .args(["--lambda", "2.0"]));
    assert!(err.contains("lambda"), "{err}");

    let conf = tmp.path().join("bad.conf");
    std::fs::write(&conf, "warp = 9\n").unwrap();
    let err = fail(bin()
        .arg("train")
        .arg("--manifest")
        .arg(&manifest)
        .arg("--config")
        .arg(&conf));
    assert!(err.contains("unknown config key `warp`"), "{err}");

    let err = fail(bin()
        .arg("eval")
        .arg("--manifest")
        .arg(&manifest)
        .arg("--checkpoint")
        .arg(tmp.path().join("missing.ckpt"))
        .args(["--lineage", "sideways"]));
    assert!(!err.is_empty());
}
