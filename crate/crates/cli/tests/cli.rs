use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lobcq::tensor::{save_tensor, synth_tensor, DistSpec};

fn lobcq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lobcq"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tensor(dir: &Path, name: &str, len: usize, seed: u64) -> PathBuf {
    let p = dir.join(name);
    save_tensor(&synth_tensor(DistSpec::DEFAULT_OUTLIERS, len, seed).unwrap(), &p).unwrap();
    p
}

fn family(dir: &Path, name: &str, nc: &str, seed: &str) -> PathBuf {
    let p = dir.join(name);
    let o = lobcq(&[
        "calibrate", "--synth", "outliers", "--len", "8192", "--Nc", nc, "--iters", "10", "--seed", seed,
        "--out-family", s(&p),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    p
}

#[test]
fn calibrate_writes_family_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let fam = family(dir.path(), "fam.json", "16", "0");
    let f = lobcq::calib::load_family(&fam).unwrap();
    assert_eq!(f.num_codebooks(), 16);
    assert!(f.books().iter().all(|b| b.len() == 16));
    assert!(f.is_frozen());
    let trace: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("fam.trace.json")).unwrap()).unwrap();
    assert!(trace["j"].as_array().unwrap().len() <= 10);
}

#[test]
fn validation_errors_exit_2_and_name_the_flag() {
    let o = lobcq(&["calibrate", "--synth", "outliers", "--Nc", "3", "--out-family", "/nonexistent/x.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Nc must be a power of two"), "{}", stderr(&o));
    let o = lobcq(&["calibrate", "--synth", "outliers", "--iters", "200", "--out-family", "x.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--iters"));
    let o = lobcq(&["calibrate", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_input_is_a_data_error() {
    let o = lobcq(&["calibrate", "--input", "/nonexistent.bcqt", "--out-family", "x.json"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn encode_reports_payload_bits_per_scalar() {
    let dir = tempfile::tempdir().unwrap();
    let fam = family(dir.path(), "fam.json", "8", "0");
    let t = tensor(dir.path(), "t.bcqt", 128, 1);
    let out = dir.path().join("t.bcqc");
    let o = lobcq(&["encode", "--input", s(&t), "--family", s(&fam), "--out", s(&out), "--La", "64"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("4.5 bits/scalar"), "{}", stdout(&o));
}

#[test]
fn round_trip_nmse_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let fam = family(dir.path(), "fam.json", "16", "0");
    let t = tensor(dir.path(), "t.bcqt", 4096, 2);
    let enc = dir.path().join("t.bcqc");
    let dec = dir.path().join("t.out.bcqt");
    assert!(lobcq(&["encode", "--input", s(&t), "--family", s(&fam), "--out", s(&enc)]).status.success());
    let o = lobcq(&["decode", "--input", s(&enc), "--family", s(&fam), "--out", s(&dec), "--compare", s(&t)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let family = lobcq::calib::load_family(&fam).unwrap();
    let x = lobcq::tensor::load_tensor(&t).unwrap();
    let cfg = lobcq::QuantConfig::new(8, 64, 16, 4);
    let y = lobcq::codec::fake_quantize(&x, &family, &cfg).unwrap();
    let expected = lobcq::eval::sig6(lobcq::baselines::nmse_slices(x.data(), &y).unwrap());
    assert!(stdout(&o).contains(&format!("nmse {expected}")), "{} vs {expected}", stdout(&o));
}

#[test]
fn wrong_family_exits_4_and_corrupt_stream_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let fam = family(dir.path(), "a.json", "4", "0");
    let other = family(dir.path(), "b.json", "4", "1");
    let t = tensor(dir.path(), "t.bcqt", 1024, 3);
    let enc = dir.path().join("t.bcqc");
    assert!(lobcq(&["encode", "--input", s(&t), "--family", s(&fam), "--out", s(&enc)]).status.success());
    let dec = dir.path().join("d.bcqt");
    let o = lobcq(&["decode", "--input", s(&enc), "--family", s(&other), "--out", s(&dec)]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));

    let mut bytes = std::fs::read(&enc).unwrap();
    bytes.push(0);
    std::fs::write(&enc, &bytes).unwrap();
    let o = lobcq(&["decode", "--input", s(&enc), "--family", s(&fam), "--out", s(&dec)]);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
}

#[test]
fn thread_count_does_not_change_output() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for threads in ["1", "2"] {
        let p = dir.path().join(format!("f{threads}.json"));
        let o = lobcq(&[
            "calibrate", "--synth", "gaussian", "--len", "8192", "--Nc", "4", "--iters", "20", "--threads", threads,
            "--out-family", s(&p),
        ]);
        assert!(o.status.success());
        outputs.push(std::fs::read(&p).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn sweep_prints_the_published_grid() {
    let o = lobcq(&["sweep", "--format", "csv"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 13);
    assert!(lines[1..].iter().all(|l| l.contains(",true,")), "{text}");
    assert!(lines.iter().any(|l| l.starts_with("8,64,16,37/8,4.625")));
    let o = lobcq(&["sweep", "--Nc", "3"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_runs_an_experiment_file() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("e.json");
    std::fs::write(
        &spec,
        r#"{"dataset": [{"synth": {"dist": "outliers", "len": 4096}}], "methods": [{"baseline": "vsq-g16"}]}"#,
    )
    .unwrap();
    let out = dir.path().join("r.csv");
    let o = lobcq(&["eval", "--spec", s(&spec), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("vsq-g16: median nmse"));
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 2);

    std::fs::write(&spec, "{\"dataset\": [\n  {\"synth\": ]}").unwrap();
    let o = lobcq(&["eval", "--spec", s(&spec)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn info_describes_each_file_kind() {
    let dir = tempfile::tempdir().unwrap();
    let fam = family(dir.path(), "fam.json", "16", "0");
    let t = tensor(dir.path(), "t.bcqt", 256, 4);
    let enc = dir.path().join("t.bcqc");
    assert!(lobcq(&["encode", "--input", s(&t), "--family", s(&fam), "--out", s(&enc)]).status.success());
    assert!(stdout(&lobcq(&["info", "--input", s(&fam)])).contains("192 bytes of codewords"));
    assert!(stdout(&lobcq(&["info", "--input", s(&t)])).contains("256 scalars"));
    assert!(stdout(&lobcq(&["info", "--input", s(&enc)])).contains("4.625 bits/scalar"));
}

#[test]
fn freeze_rounds_an_unfrozen_family() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.json");
    let o = lobcq(&[
        "calibrate", "--synth", "gaussian", "--len", "4096", "--Nc", "2", "--iters", "5", "--unfrozen",
        "--out-family", s(&raw),
    ]);
    assert!(o.status.success());
    assert!(!lobcq::calib::load_family(&raw).unwrap().is_frozen());
    let frozen = dir.path().join("frozen.json");
    assert!(lobcq(&["freeze", "--family", s(&raw), "--out", s(&frozen)]).status.success());
    let f = lobcq::calib::load_family(&frozen).unwrap();
    assert!(f.is_frozen());
    assert!(f.books().iter().flat_map(|b| b.codewords()).all(|c| c.fract() == 0.0));
}

#[test]
fn block_sampling_is_seeded_and_validated() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, k: &str| {
        let p = dir.path().join(name);
        let o = lobcq(&[
            "calibrate", "--synth", "gaussian", "--len", "16384", "--Nc", "4", "--iters", "10", "--sample-blocks", k,
            "--out-family", s(&p),
        ]);
        (o, p)
    };
    let (a, pa) = run("a.json", "256");
    let (b, pb) = run("b.json", "256");
    assert!(a.status.success() && b.status.success(), "{}", stderr(&a));
    assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
    let (z, _) = run("z.json", "0");
    assert_eq!(z.status.code(), Some(2));
    assert!(stderr(&z).contains("--sample-blocks"));
}
