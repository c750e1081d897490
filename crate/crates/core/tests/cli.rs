use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn tabula(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tabula")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

#[test]
fn dealer_server_client_over_tcp() {
    let dir = tempfile::tempdir().unwrap();
    let model = fixture("mlp_mnist_16.json");
    let out = tabula(&["dealer", "--model", s(&model), "--out", s(dir.path()), "--seed", "7"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let client_b = dir.path().join("client.tbpp");
    let server_b = dir.path().join("server.tbpp");
    assert!(client_b.exists() && server_b.exists());

    let addr = format!("127.0.0.1:{}", free_port());
    let server_report = dir.path().join("server.json");
    let mut server = Command::new(env!("CARGO_BIN_EXE_tabula"))
        .args(["server", "--model", s(&model), "--bundle", s(&server_b), "--listen", &addr])
        .args(["--report", s(&server_report)])
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let client_report = dir.path().join("client.json");
    let out = tabula(&[
        "client",
        "--model",
        s(&model),
        "--bundle",
        s(&client_b),
        "--input",
        s(&fixture("input0.json")),
        "--connect",
        &addr,
        "--report",
        s(&client_report),
    ]);
    assert!(server.wait().unwrap().success());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("logits: ["), "{stdout}");
    assert!(stdout.contains("argmax: "), "{stdout}");

    let c: Value = serde_json::from_str(&std::fs::read_to_string(&client_report).unwrap()).unwrap();
    let sv: Value = serde_json::from_str(&std::fs::read_to_string(&server_report).unwrap()).unwrap();
    assert_eq!(c["payload"]["activation"], 16 * 32);
    assert_eq!(c["rounds"]["total"], 5);
    assert_eq!(c["payload"], sv["payload"]);
    assert!(c["argmax"].is_u64());

    // second use of the same bundle is refused before connecting
    let again = tabula(&[
        "client",
        "--model",
        s(&model),
        "--bundle",
        s(&client_b),
        "--input",
        s(&fixture("input0.json")),
        "--connect",
        &addr,
    ]);
    assert_eq!(again.status.code(), Some(4));
}

#[test]
fn dealer_trials_make_subdirectories_and_are_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let model = fixture("conv_digits.json");
    for d in [&a, &b] {
        let out = tabula(&["dealer", "--model", s(&model), "--out", s(d.path()), "--seed", "3", "--trials", "2"]);
        assert!(out.status.success());
    }
    for t in ["trial-0000", "trial-0001"] {
        for f in ["client.tbpp", "server.tbpp"] {
            let x = std::fs::read(a.path().join(t).join(f)).unwrap();
            let y = std::fs::read(b.path().join(t).join(f)).unwrap();
            assert_eq!(x, y);
        }
    }
    let t0 = std::fs::read(a.path().join("trial-0000/client.tbpp")).unwrap();
    let t1 = std::fs::read(a.path().join("trial-0001/client.tbpp")).unwrap();
    assert_ne!(t0, t1);
}

#[test]
fn schema_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"format":"tabula-model","version":1,"input_shape":[4],"num_classes":2,"layers":[{"type":"dense","inputs":3,"outputs":2}]}"#).unwrap();
    let out = tabula(&["dealer", "--model", s(&bad), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("layer 0"));
}

#[test]
fn bundle_errors_exit_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.tbpp");
    std::fs::write(&junk, b"nope").unwrap();
    let out = tabula(&[
        "client",
        "--model",
        s(&fixture("mlp_mnist_16.json")),
        "--bundle",
        s(&junk),
        "--input",
        s(&fixture("input0.json")),
        "--connect",
        "127.0.0.1:1",
    ]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn dead_server_is_a_protocol_abort() {
    let dir = tempfile::tempdir().unwrap();
    let model = fixture("mlp_mnist_16.json");
    assert!(tabula(&["dealer", "--model", s(&model), "--out", s(dir.path())]).status.success());
    // accept and immediately hang up
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let t = std::thread::spawn(move || drop(listener.accept().unwrap()));
    let out = tabula(&[
        "client",
        "--model",
        s(&model),
        "--bundle",
        s(&dir.path().join("client.tbpp")),
        "--input",
        s(&fixture("input0.json")),
        "--connect",
        &addr,
    ]);
    t.join().unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(!String::from_utf8_lossy(&out.stdout).contains("logits"));
}

#[test]
fn sweep_prints_csv() {
    let out = tabula(&[
        "sweep",
        "--model",
        s(&fixture("mlp_mnist_16.json")),
        "--dataset",
        s(&fixture("digits_test.json")),
        "--k-min",
        "2",
        "--k-max",
        "5",
    ]);
    assert!(out.status.success());
    let csv = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], "k,accuracy,table_bytes_per_party,comm_bytes_online");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("2,"));
    // 2^2 * 32 activations * 8 bytes
    assert_eq!(lines[1].split(',').nth(2), Some("1024"));
}

#[test]
fn bench_reports_json() {
    for transport in ["loopback", "tcp"] {
        let out =
            tabula(&["bench", "--model", s(&fixture("conv_digits.json")), "--trials", "2", "--transport", transport]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let r: Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(r["payload"]["activation"], 16 * 256);
        assert_eq!(r["rounds"]["total"], 4);
        assert_eq!(r["counts_identical_across_trials"], true);
        assert_eq!(r["published"]["lenet_total_bytes"], 3_500_000);
    }
}
