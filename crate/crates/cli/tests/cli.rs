use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde_json::Value;

fn pir() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_pir"));
    c.env_remove("PIR_SEED").env_remove("PIR_PRIME").env_remove("RUST_LOG");
    c
}

fn run(args: &[&str]) -> Output {
    pir().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn setup_example(dir: &Path) {
    let o = run(&["setup", "--n", "5", "--k", "3", "--m", "3", "--p", "7", "--seed", "1", "--out", dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn setup_writes_storage_layout() {
    let dir = tempfile::tempdir().unwrap();
    setup_example(dir.path());
    for t in 0..5 {
        let s = read_json(&dir.path().join(format!("storage/block-0/server-{t}.json")));
        assert_eq!(s["server_index"], t);
        let frags = s["fragments"].as_array().unwrap();
        assert_eq!(frags.len(), 3);
        assert!(frags.iter().all(|f| f.as_array().unwrap().len() == 2));
    }
    assert!(!dir.path().join("storage/block-0/server-5.json").exists());
    for i in 0..3 {
        assert!(dir.path().join(format!("sources/file-{i}.json")).exists());
    }
}

#[test]
fn setup_rejects_bad_parameters() {
    let o = run(&["setup", "--n", "5", "--k", "3", "--m", "3", "--p", "4", "--out", "unused"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("prime"), "{}", stderr(&o));
    let o = run(&["setup", "--n", "3", "--k", "3", "--m", "2", "--out", "unused"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["setup", "--n", "5"]);
    assert_eq!(o.status.code(), Some(2));
}

/// Seed 0 draws a master query whose realization downloads 12 elements at
/// (5,3,3), theta = 0, with per-server loads 2,2,3,3,2.
#[test]
fn retrieve_in_process_reproduces_worked_example_download() {
    let dir = tempfile::tempdir().unwrap();
    setup_example(dir.path());
    let d = dir.path().to_str().unwrap();
    let o = run(&["retrieve", "--storage", d, "--theta", "0", "--seed", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("download: 12 elements (per server 2,2,3,3,2)"), "{text}");

    let o = run(&["retrieve", "--storage", d, "--theta", "0", "--seed", "0", "--format", "json"]);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    let source = read_json(&dir.path().join("sources/file-0.json"));
    assert_eq!(v["rows"], source["blocks"]);
    assert_eq!(v["download"], 12);

    let o = run(&["retrieve", "--storage", d, "--theta", "3"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = run(&["retrieve", "--storage", "/nonexistent/pir", "--theta", "0"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn ingest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let inputs: Vec<Vec<u8>> = vec![(0..=255u8).cycle().take(1000).collect(), Vec::new(), b"hello".to_vec()];
    let mut args = vec!["setup", "--n", "4", "--k", "2", "--m", "3"];
    let paths: Vec<String> = inputs
        .iter()
        .enumerate()
        .map(|(i, bytes)| {
            let p = dir.path().join(format!("in-{i}"));
            std::fs::write(&p, bytes).unwrap();
            p.to_str().unwrap().to_owned()
        })
        .collect();
    for p in &paths {
        args.extend(["--ingest", p.as_str()]);
    }
    let out = dir.path().join("d");
    args.extend(["--out", out.to_str().unwrap()]);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));

    for (i, bytes) in inputs.iter().enumerate() {
        let dest = dir.path().join(format!("out-{i}"));
        let o = run(&[
            "retrieve",
            "--storage",
            out.to_str().unwrap(),
            "--theta",
            &i.to_string(),
            "--seed",
            "7",
            "--output",
            dest.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert_eq!(&std::fs::read(&dest).unwrap(), bytes);
    }
}

#[test]
fn ingest_empty_file_gives_one_zero_block() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    std::fs::write(&empty, b"").unwrap();
    let e = empty.to_str().unwrap();
    let out = dir.path().join("d");
    let o = run(&["setup", "--n", "3", "--k", "2", "--m", "2", "--ingest", e, "--ingest", e, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let catalog = read_json(&out.join("catalog.json"));
    assert_eq!(catalog["blocks"], 1);
    let src = read_json(&out.join("sources/file-0.json"));
    assert!(src["blocks"][0].as_array().unwrap().iter().flat_map(|r| r.as_array().unwrap()).all(|v| v == 0));
}

#[test]
fn verify_modes() {
    let o = run(&["verify", "--mode", "capacity", "--n", "5", "--k", "3", "--m", "3"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("R = C = 25/49: PASS"), "{}", stdout(&o));

    let o = run(&["verify", "--mode", "bound", "--n", "5", "--k", "3", "--m", "3"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("L=6, bound=6, tight"), "{}", stdout(&o));

    let o = run(&["verify", "--mode", "privacy", "--n", "2", "--k", "1", "--m", "2"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("for 4 of 4 (theta,t) pairs: PASS"), "{}", stdout(&o));

    let o = run(&["verify", "--mode", "enumerate", "--n", "3", "--k", "2", "--m", "2", "--format", "json"]);
    assert!(o.status.success());
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["pass"], true);
    assert_eq!(v["details"]["enumerated"], v["details"]["formula"]);

    let o = run(&["verify", "--mode", "rank", "--n", "4", "--k", "2", "--m", "3", "--realizations", "50"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("on 50 of 50 realizations"));

    let o = run(&["verify", "--mode", "capacity", "--n", "5", "--k", "3", "--m", "3", "--format", "csv"]);
    assert_eq!(stdout(&o), "check,N,K,M,p,pass\ncapacity,5,3,3,257,true\n");
}

#[test]
fn budget_exceeded_is_not_a_check_failure() {
    let o = run(&["verify", "--mode", "enumerate", "--n", "5", "--k", "3", "--m", "3", "--budget", "10"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("budget"), "{}", stderr(&o));
}

#[test]
fn env_and_flag_precedence() {
    let o = pir()
        .args(["verify", "--mode", "capacity", "--n", "5", "--k", "3", "--m", "3", "--format", "json"])
        .env("PIR_PRIME", "11")
        .output()
        .unwrap();
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["params"]["p"], 11);
    let o = pir()
        .args(["verify", "--mode", "capacity", "--n", "5", "--k", "3", "--m", "3", "--p", "13", "--format", "json"])
        .env("PIR_PRIME", "11")
        .output()
        .unwrap();
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["params"]["p"], 13);

    let dir = tempfile::tempdir().unwrap();
    setup_example(dir.path());
    let d = dir.path().to_str().unwrap();
    let by_env = pir()
        .args(["retrieve", "--storage", d, "--theta", "1", "--format", "json"])
        .env("PIR_SEED", "9")
        .output()
        .unwrap();
    let by_flag = run(&["retrieve", "--storage", d, "--theta", "1", "--seed", "9", "--format", "json"]);
    assert_eq!(by_env.stdout, by_flag.stdout);
}

#[test]
fn bench_tables() {
    let o = run(&["bench", "--grid", "5,3,3;3,3,2", "--trials", "0", "--format", "csv"]);
    assert!(o.status.success());
    assert_eq!(
        stdout(&o),
        "N,K,M,p,L,trials,mean_download,exact_download,empirical_rate,capacity,bound,tight\n\
         5,3,3,257,6,0,,294/25,,25/49,6,true\n"
    );
    assert!(stderr(&o).contains("skipped (3,3,2)"), "{}", stderr(&o));

    let a = run(&["bench", "--grid", "5,3,3;4,2,3", "--trials", "3000", "--seed", "4", "--format", "json", "--jobs", "1"]);
    let b = run(&["bench", "--grid", "5,3,3;4,2,3", "--trials", "3000", "--seed", "4", "--format", "json", "--jobs", "4"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);

    let o = run(&["bench", "--grid", "5,3"]);
    assert_eq!(o.status.code(), Some(2));
}

struct Servers(Vec<Child>);

impl Drop for Servers {
    fn drop(&mut self) {
        for c in &mut self.0 {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn wait_for(addr: &str) {
    let start = Instant::now();
    while TcpStream::connect(addr).is_err() {
        assert!(start.elapsed() < Duration::from_secs(10), "server at {addr} never came up");
        thread::sleep(Duration::from_millis(20));
    }
}

#[test]
fn networked_retrieve_matches_in_process() {
    let dir = tempfile::tempdir().unwrap();
    setup_example(dir.path());
    let addrs: Vec<String> = (0..5).map(|_| format!("127.0.0.1:{}", free_port())).collect();
    let mut servers = Servers(Vec::new());
    for (t, addr) in addrs.iter().enumerate() {
        let storage = dir.path().join(format!("storage/block-0/server-{t}.json"));
        let child = pir()
            .args(["serve", "--storage", storage.to_str().unwrap(), "--listen", addr])
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        servers.0.push(child);
    }
    addrs.iter().for_each(|a| wait_for(a));

    let list = addrs.join(",");
    let params = ["--n", "5", "--k", "3", "--m", "3", "--p", "7"];
    for seed in ["0", "5", "6"] {
        let mut args = vec!["retrieve", "--servers", &list, "--theta", "2", "--seed", seed, "--format", "json"];
        args.extend(params);
        let net = run(&args);
        assert!(net.status.success(), "{}", stderr(&net));
        let local = run(&["retrieve", "--storage", dir.path().to_str().unwrap(), "--theta", "2", "--seed", seed, "--format", "json"]);
        let (net, local): (Value, Value) = (serde_json::from_slice(&net.stdout).unwrap(), serde_json::from_slice(&local.stdout).unwrap());
        assert_eq!(net["rows"], local["rows"]);
        assert_eq!(net["per_server"], local["per_server"]);
        assert!(net["bytes_received"].as_u64().unwrap() > 0);
    }

    let four = addrs[..4].join(",");
    let mut args = vec!["retrieve", "--servers", &four, "--theta", "0"];
    args.extend(params);
    assert_eq!(run(&args).status.code(), Some(2));

    servers.0[3].kill().unwrap();
    servers.0[3].wait().unwrap();
    let mut args = vec!["retrieve", "--servers", &list, "--theta", "0", "--timeout-ms", "2000"];
    args.extend(params);
    let o = run(&args);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("server 3"), "{}", stderr(&o));
}
