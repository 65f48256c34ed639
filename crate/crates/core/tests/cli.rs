use std::fs;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_passive-bb84"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn field(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(key).filter(|r| r.starts_with(' ')).map(|r| r.trim().to_string()))
        .unwrap_or_else(|| panic!("no `{key}` in\n{text}"))
}

fn data_files(dir: &Path, prefix: &str) -> Vec<std::path::PathBuf> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_str().unwrap().starts_with(prefix))
        .collect();
    v.sort();
    v
}

#[test]
fn analyze_operating_point() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "analyze",
        "--loss-db",
        "6.7",
        "--mu",
        "0.15",
        "--qber",
        "0.058",
        "--output-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert_eq!(field(&text, "regime"), "Secure");
    let rate: f64 = field(&text, "secret_rate_hz").parse().unwrap();
    assert!(rate > 5.0 && rate < 45.0, "{rate}");
    assert_eq!(fs::read_to_string(dir.path().join("report.txt")).unwrap(), text);
    let manifest = fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    assert!(manifest.contains("results sha256"));
    assert!(manifest.contains("mode = \"analyze\""));
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let args = ["simulate", "--seed", "7", "--emissions", "200000", "--loss-db", "0", "--output-dir", d];
    let first = run(&args);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let report = fs::read(dir.path().join("report.txt")).unwrap();
    let manifest = fs::read(dir.path().join("manifest.txt")).unwrap();
    let session = fs::read(&data_files(dir.path(), "session_")[0]).unwrap();
    for p in data_files(dir.path(), "session_") {
        fs::remove_file(p).unwrap();
    }

    let second = run(&args);
    assert_eq!(first.stdout, second.stdout);
    assert_eq!(report, fs::read(dir.path().join("report.txt")).unwrap());
    assert_eq!(manifest, fs::read(dir.path().join("manifest.txt")).unwrap());
    assert_eq!(session, fs::read(&data_files(dir.path(), "session_")[0]).unwrap());

    // the manifest alone reproduces the run
    let again = tempfile::tempdir().unwrap();
    let replay = run(&[
        "--config",
        dir.path().join("manifest.txt").to_str().unwrap(),
        "--output-dir",
        again.path().to_str().unwrap(),
    ]);
    assert!(replay.status.success(), "{}", String::from_utf8_lossy(&replay.stderr));
    assert_eq!(report, fs::read(again.path().join("report.txt")).unwrap());
}

#[test]
fn sweep_writes_one_row_per_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "sweep",
        "--variable",
        "channel_loss_db",
        "--grid",
        "0:14:0.5",
        "--output-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = data_files(dir.path(), "sweep_channel_loss_db_");
    assert_eq!(csv.len(), 2);
    let table = fs::read_to_string(csv.iter().find(|p| p.extension().unwrap() == "csv").unwrap()).unwrap();
    assert_eq!(table.lines().count(), 1 + 29);
    let nd = fs::read_to_string(csv.iter().find(|p| p.extension().unwrap() == "ndjson").unwrap()).unwrap();
    assert_eq!(nd.lines().count(), 29);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    assert_eq!(run(&["analyze", "--mu=-0.1", "--output-dir", d]).status.code(), Some(2));
    assert_eq!(run(&["analyze", "--no-such-flag"]).status.code(), Some(2));

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[link]\nfoo = 1\n").unwrap();
    let o = run(&["--config", cfg.to_str().unwrap(), "analyze", "--output-dir", d]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("foo"));

    assert_eq!(run(&["analyze", "--loss-db", "30", "--output-dir", d]).status.code(), Some(0));
    assert_eq!(
        run(&["--strict", "analyze", "--loss-db", "30", "--output-dir", d]).status.code(),
        Some(1)
    );
    assert_eq!(run(&["--strict", "analyze", "--output-dir", d]).status.code(), Some(0));
    assert_eq!(run(&["--strict", "simulate", "--output-dir", d]).status.code(), Some(2));
    assert_eq!(
        run(&["--strict", "optimize", "--loss-db", "20", "--mu-bounds", "0.05:0.15", "--output-dir", d])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn optimize_and_tradeoff() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let o = run(&[
        "optimize", "--loss-db", "10", "--qber", "0.05", "--ec-efficiency", "1", "--mu-bounds", "0.0001:0.15",
        "--output-dir", d,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mu: f64 = field(&stdout(&o), "mu").parse().unwrap();
    assert!(mu > 0.0 && mu <= 0.15);

    let o = run(&["tradeoff", "--thresholds", "1.8:1.99:0.01", "--output-dir", d]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().count(), 1 + 20);
    assert_eq!(run(&["tradeoff", "--thresholds", "1.0:1.5:0.1", "--output-dir", d]).status.code(), Some(1));
}

#[test]
fn two_process_session_matches_in_process() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("127.0.0.1:{port}");
    let alice_dir = tempfile::tempdir().unwrap();
    let bob_dir = tempfile::tempdir().unwrap();
    let local_dir = tempfile::tempdir().unwrap();
    let common = ["--seed", "11", "--emissions", "100000", "--loss-db", "0"];

    let alice = bin()
        .arg("serve-alice")
        .args(common)
        .args(["--address", &addr, "--output-dir", alice_dir.path().to_str().unwrap()])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let bob = run(&["serve-bob", "--address", &addr, "--output-dir", bob_dir.path().to_str().unwrap()]);
    let alice = alice.wait_with_output().unwrap();
    assert!(alice.status.success(), "{}", String::from_utf8_lossy(&alice.stderr));
    assert!(bob.status.success(), "{}", String::from_utf8_lossy(&bob.stderr));

    let local = run(&[&["simulate"][..], &common[..], &["--output-dir", local_dir.path().to_str().unwrap()]].concat());
    assert!(local.status.success());
    let (a, b, l) = (stdout(&alice), stdout(&bob), stdout(&local));
    let digest = field(&l, "final_key_sha256");
    assert_eq!(field(&a, "final_key_sha256"), digest);
    assert_eq!(field(&b, "final_key_sha256"), digest);
    assert_ne!(field(&l, "final_key_bits"), "0");
    for key in ["sifted", "disclosed", "errors_in_disclosed", "leak_ec_bits", "secret_rate_hz"] {
        assert_eq!(field(&a, key), field(&l, key), "{key}");
        assert_eq!(field(&b, key), field(&l, key), "{key}");
    }
    // the receiver's manifest records the parameters it was sent
    let m = fs::read_to_string(bob_dir.path().join("manifest.txt")).unwrap();
    assert!(m.contains("seed = 11") && m.contains("emissions = 100000"), "{m}");
}
