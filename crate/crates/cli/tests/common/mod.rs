#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// The `cqr` binary with every `COTRAIN_*` override removed from its environment.
pub fn cqr() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cqr"));
    for (key, _) in std::env::vars() {
        if key.starts_with("COTRAIN_") {
            cmd.env_remove(key);
        }
    }
    cmd
}

pub fn run(args: &[&str]) -> Output {
    cqr().args(args).output().expect("cqr runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

const COTRAIN: [&str; 7] = [
    "mode = \"FEW_SHOT\"",
    "max_iterations = 1",
    "warmup_epochs = 3",
    "iter_epochs = 1",
    "batch_size = 4",
    "learning_rate = 0.003",
    "max_len = 12",
];

fn key(line: &str) -> &str {
    line.split('=').next().unwrap_or("").trim()
}

/// A small few-shot synthetic config; `extra` lines go into `[cotrain]` and
/// replace base lines with the same key.
pub fn tiny_config(dir: &Path, run_dir: &str, extra: &str) -> PathBuf {
    let overridden: Vec<&str> = extra.lines().map(key).collect();
    let mut cotrain: Vec<&str> = COTRAIN
        .iter()
        .copied()
        .filter(|l| !overridden.contains(&key(l)))
        .collect();
    cotrain.extend(extra.lines());
    let text = format!(
        r#"[data]
run_dir = "{run_dir}"
synthetic = {{ sessions = 8, turns = 3, labeled_sessions = 4, test_sessions = 4, seed = 3 }}

[cotrain]
{}

[model]
d_model = 16
heads = 2
ffn_dim = 32
encoder_layers = 1
decoder_layers = 1
"#,
        cotrain.join("\n")
    );
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p
}
