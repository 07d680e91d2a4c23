#![allow(dead_code)]
pub mod stub_http;

use std::path::Path;
use std::process::{Command, Output};

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Run {
    pub fn ok(self) -> Self {
        assert_eq!(self.code, 0, "stderr: {}", self.stderr);
        self
    }
}

pub fn skybench(cwd: &Path, args: &[&str]) -> Run {
    let Output { status, stdout, stderr } =
        Command::new(env!("CARGO_BIN_EXE_skybench")).args(args).current_dir(cwd).output().expect("binary runs");
    Run {
        code: status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&stdout).into_owned(),
        stderr: String::from_utf8_lossy(&stderr).into_owned(),
    }
}

/// Reduced site: 10 ground, 36 aerial, 8 satellite views.
pub fn reduced_site(cwd: &Path, dir: &str, seed: &str) -> Run {
    skybench(
        cwd,
        &["--seed", seed, "--out-dir", dir, "gen-site", "--ground-n", "10", "--aerial-frames", "2,4,6", "--satellite-n", "8"],
    )
}
