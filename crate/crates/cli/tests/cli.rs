//! End-to-end tests of the `dsa` binary: exit codes, file formats and
//! deterministic outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dsa_core::complexity::{parse_csv, parse_json, render_csv, render_json};

const CONFIG: &str = r#"{"layers":2,"d_model":8,"d_ff":16,"heads":2,"attention":"dilated",
"window":{"look_back":2,"look_ahead":1},
"dilation":{"mechanism":"attn_pool_pp","chunk":3,"pool_heads":2,"d_in":4},
"input_dim":5,"seed":7}"#;

const FEATURES: &str = "1,2,3,4,5\n0.5,0,1,2,3\n1,1,1,1,1\n2,0,2,0,2\n-1,0.25,3,1,0\n";

fn dsa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsa"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Workspace {
            dir: tempfile::tempdir().unwrap(),
        };
        ws.write("config.json", CONFIG.as_bytes());
        ws.write("x.csv", FEATURES.as_bytes());
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn write(&self, name: &str, bytes: &[u8]) {
        fs::write(self.path(name), bytes).unwrap();
    }

    fn init(&self, config: &str, weights: &str) -> Output {
        dsa(&[
            "init-weights",
            "--config",
            &self.arg(config),
            "--output",
            &self.arg(weights),
        ])
    }

    fn encode(&self, config: &str, weights: &str, input: &str, output: &str) -> Output {
        dsa(&[
            "encode",
            "--config",
            &self.arg(config),
            "--weights",
            &self.arg(weights),
            "--input",
            &self.arg(input),
            "--output",
            &self.arg(output),
        ])
    }
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap()
}

#[test]
fn encode_is_deterministic() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.init("config.json", "w1.bin")), 0);
    assert_eq!(code(&ws.init("config.json", "w2.bin")), 0);
    assert_eq!(read(&ws.path("w1.bin")), read(&ws.path("w2.bin")));
    assert_eq!(code(&ws.encode("config.json", "w1.bin", "x.csv", "y1.bin")), 0);
    assert_eq!(code(&ws.encode("config.json", "w2.bin", "x.csv", "y2.bin")), 0);
    let y = read(&ws.path("y1.bin"));
    assert_eq!(y, read(&ws.path("y2.bin")));
    assert_eq!(&y[..4], b"DSA8");
    assert_eq!(u32::from_le_bytes(y[4..8].try_into().unwrap()), 5);
    assert_eq!(u32::from_le_bytes(y[8..12].try_into().unwrap()), 8);
    assert_eq!(y.len(), 12 + 5 * 8 * 8);
}

#[test]
fn encode_accepts_binary_features() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.init("config.json", "w.bin")), 0);
    assert_eq!(code(&ws.encode("config.json", "w.bin", "x.csv", "y.bin")), 0);
    // Re-encoding through the binary feature path gives the same output.
    let mut bin = b"DSA8".to_vec();
    bin.extend_from_slice(&5u32.to_le_bytes());
    bin.extend_from_slice(&5u32.to_le_bytes());
    for v in FEATURES.split([',', '\n']).filter(|s| !s.is_empty()) {
        bin.extend_from_slice(&v.parse::<f64>().unwrap().to_le_bytes());
    }
    ws.write("x.bin", &bin);
    assert_eq!(code(&ws.encode("config.json", "w.bin", "x.bin", "z.bin")), 0);
    assert_eq!(read(&ws.path("y.bin")), read(&ws.path("z.bin")));
}

#[test]
fn corrupted_weights_are_format_errors() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.init("config.json", "w.bin")), 0);
    let mut w = read(&ws.path("w.bin"));
    let mid = w.len() / 2;
    w[mid] ^= 0x55;
    ws.write("bad.bin", &w);
    assert_eq!(code(&ws.encode("config.json", "bad.bin", "x.csv", "y.bin")), 3);
    let w = read(&ws.path("w.bin"));
    ws.write("short.bin", &w[..w.len() - 3]);
    assert_eq!(code(&ws.encode("config.json", "short.bin", "x.csv", "y.bin")), 3);
}

#[test]
fn mismatched_configuration_exits_4() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.init("config.json", "w.bin")), 0);
    ws.write("wide.json", CONFIG.replace("\"d_ff\":16", "\"d_ff\":32").as_bytes());
    assert_eq!(code(&ws.encode("wide.json", "w.bin", "x.csv", "y.bin")), 4);
    ws.write("narrow.csv", b"1,2,3\n4,5,6\n");
    assert_eq!(code(&ws.encode("config.json", "w.bin", "narrow.csv", "y.bin")), 4);
}

#[test]
fn bad_inputs_exit_3() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.init("config.json", "w.bin")), 0);
    ws.write(
        "unknown.json",
        CONFIG.replace("\"seed\":7", "\"seed\":7,\"extra\":1").as_bytes(),
    );
    assert_eq!(code(&ws.init("unknown.json", "u.bin")), 3);
    ws.write("garbage.csv", b"1,2,x,4,5\n");
    assert_eq!(code(&ws.encode("config.json", "w.bin", "garbage.csv", "y.bin")), 3);
    assert_eq!(code(&ws.encode("config.json", "w.bin", "missing.csv", "y.bin")), 3);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&dsa(&[])), 2);
    assert_eq!(code(&dsa(&["complexity", "--preset", "wsj", "--n", "10"])), 2);
    assert_eq!(code(&dsa(&["complexity", "--preset", "timit"])), 2);
    assert_eq!(code(&dsa(&["streaming-cost", "--past-seconds", "-2"])), 2);
    assert_eq!(code(&dsa(&["bench", "--n-list", "64,32"])), 2);
}

#[test]
fn verify_exit_codes() {
    let ok = dsa(&["verify", "--suite", "streaming"]);
    assert_eq!(code(&ok), 0);
    assert!(stdout(&ok).ends_with("4 checks, 0 failed\n"));
    // The complexity suite includes the published-column comparison, which
    // has one row the formula cannot reproduce.
    let red = dsa(&["verify", "--suite", "complexity"]);
    assert_eq!(code(&red), 1);
    let text = stdout(&red);
    assert!(text.contains("FAIL librispeech preset"));
    assert!(text.contains("PASS instrumented count equals exact estimate"));
}

#[test]
fn complexity_tables_round_trip() {
    let csv = stdout(&dsa(&["complexity", "--preset", "wsj", "--format", "csv"]));
    assert_eq!(render_csv(&parse_csv(&csv).unwrap()), csv);
    let json = stdout(&dsa(&["complexity", "--preset", "wsj", "--format", "json"]));
    let records = parse_json(&json).unwrap();
    assert_eq!(render_json(&records), json);
    let r21 = records
        .iter()
        .find(|r| r.label == "restricted" && r.r == Some(21))
        .unwrap();
    assert_eq!(r21.total, 1_048_320);
    assert_eq!(parse_csv(&csv).unwrap(), records);
}

#[test]
fn complexity_runs_are_repeatable() {
    let a = dsa(&["complexity", "--preset", "librispeech"]);
    let b = dsa(&["complexity", "--preset", "librispeech"]);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    assert!(stdout(&a).contains("49.2M"));
}
