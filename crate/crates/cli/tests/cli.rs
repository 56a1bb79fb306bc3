use std::fs;
use std::path::Path;
use std::process::{Command, Output};

macro_rules! args {
    ($($a:expr),* $(,)?) => {
        vec![$(AsRef::<std::ffi::OsStr>::as_ref(&$a).to_owned()),*]
    };
}

fn pilrecon<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pilrecon"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok<S: AsRef<std::ffi::OsStr> + std::fmt::Debug>(args: &[S]) -> String {
    let out = pilrecon(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synth(dir: &Path, seed: u64) {
    ok(&args![
        "synth",
        "--height",
        "32",
        "--width",
        "64",
        "--seed",
        seed.to_string(),
        "--polar-strength",
        "4",
        "--outdir",
        dir,
    ]);
}

const QUICK: [&str; 6] = [
    "--members",
    "2",
    "--iterations",
    "150",
    "--batch-size",
    "256",
];

#[test]
fn synth_is_byte_identical_across_runs() {
    let t = tempfile::tempdir().unwrap();
    synth(&t.path().join("a"), 7);
    synth(&t.path().join("b"), 7);
    for f in ["target.pgm", "pil.pgm", "filaments.pgm"] {
        assert_eq!(
            fs::read(t.path().join("a").join(f)).unwrap(),
            fs::read(t.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn bad_rho_is_a_usage_error() {
    let t = tempfile::tempdir().unwrap();
    let out = pilrecon(&args![
        "synth",
        "--rho",
        "1.2",
        "--outdir",
        t.path().to_path_buf()
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!t.path().join("target.pgm").exists());
}

#[test]
fn missing_input_is_an_io_error() {
    let t = tempfile::tempdir().unwrap();
    let out = pilrecon(&args![
        "reconstruct",
        "--filaments",
        t.path().join("absent.pgm"),
        "--outdir",
        t.path().join("out"),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn grid_step_without_target_is_a_usage_error() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), 1);
    let out = pilrecon(&args![
        "reconstruct",
        "--filaments",
        t.path().join("filaments.pgm"),
        "--grid-step",
        "8",
        "--outdir",
        t.path().join("out"),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn reconstruct_then_replay_reproduces_outputs() {
    let t = tempfile::tempdir().unwrap();
    let src = t.path().join("s");
    synth(&src, 3);
    let out = t.path().join("run");
    let mut args = args![
        "reconstruct",
        "--map-id",
        "m3",
        "--filaments",
        src.join("filaments.pgm"),
        "--target",
        src.join("target.pgm"),
        "--grid-step",
        "8",
        "--pole-north",
        "1",
        "--pole-south",
        "-1",
        "--outdir",
        out,
    ];
    args.extend(QUICK.map(Into::into));
    let stdout = ok(&args);
    assert!(stdout.starts_with("m3 "), "{stdout}");
    let manifest = fs::read_to_string(out.join("manifest")).unwrap();
    assert!(manifest.contains("config.grid_step = 8"));
    assert!(manifest.contains("poles = 1 -1"));
    assert!(manifest.contains("seeds = 0 1"));
    for line in manifest.lines().filter_map(|l| l.strip_prefix("output = ")) {
        assert!(out.join(line).exists(), "{line} listed but not written");
    }

    let again = t.path().join("replay");
    ok(&args![
        "replay",
        "--manifest",
        out.join("manifest"),
        "--outdir",
        again
    ]);
    for f in [
        "binarized.pgm",
        "mean.conf.pgm",
        "member_000.params",
        "member_001.params",
        "report.txt",
    ] {
        assert_eq!(
            fs::read(out.join(f)).unwrap(),
            fs::read(again.join(f)).unwrap(),
            "{f}"
        );
    }

    // a changed input is refused
    fs::write(src.join("filaments.pgm"), b"P5\n64 32\n255\n").unwrap();
    let r = pilrecon(&args![
        "replay",
        "--manifest",
        out.join("manifest"),
        "--outdir",
        again
    ]);
    assert_eq!(r.status.code(), Some(3));
}

#[test]
fn batch_writes_summary_and_chains_warm_starts() {
    let t = tempfile::tempdir().unwrap();
    for k in 0..3 {
        synth(&t.path().join(format!("m{k}")), k);
    }
    fs::write(
        t.path().join("maps.txt"),
        "# relative to this file\nm0 m0/filaments.pgm m0/target.pgm m0/pil.pgm\nm1 m1/filaments.pgm m1/target.pgm\nm2 m2/filaments.pgm m2/target.pgm\n",
    )
    .unwrap();
    let out = t.path().join("out");
    let mut args = args![
        "batch",
        "--list",
        t.path().join("maps.txt"),
        "--outdir",
        out,
        "--chain-warm-start",
        "--grid-step",
        "8",
    ];
    args.extend(QUICK.map(Into::into));
    let stdout = ok(&args);
    assert!(stdout.contains("succeeded = 3"), "{stdout}");
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.contains("pearson_ratio_e_total = "));
    let report = fs::read_to_string(out.join("report.txt")).unwrap();
    assert_eq!(report.lines().filter(|l| !l.starts_with('#')).count(), 3);
    let m0 = fs::read_to_string(out.join("m0/manifest")).unwrap();
    let m2 = fs::read_to_string(out.join("m2/manifest")).unwrap();
    assert!(m0.contains("warm_start = none"));
    assert!(
        m2.lines().any(|l| l.starts_with("warm_start = m1 ")),
        "{m2}"
    );
}

#[test]
fn batch_continues_past_a_failing_map() {
    let t = tempfile::tempdir().unwrap();
    synth(&t.path().join("good"), 5);
    fs::write(
        t.path().join("maps.txt"),
        "good good/filaments.pgm good/target.pgm\nbad missing.pgm\n",
    )
    .unwrap();
    let out = t.path().join("out");
    let mut args = args![
        "batch",
        "--list",
        t.path().join("maps.txt"),
        "--outdir",
        out
    ];
    args.extend(QUICK.map(Into::into));
    let r = pilrecon(&args);
    assert_eq!(r.status.code(), Some(5));
    assert!(out.join("good/binarized.pgm").exists());
    let failures = fs::read_to_string(out.join("failures.txt")).unwrap();
    assert!(failures.starts_with("bad "));
}
