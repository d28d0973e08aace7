//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn lest(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lest"))
        .args(args)
        .env_remove("LEST_THREADS")
        .output()
        .expect("spawn lest")
}

pub fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

pub fn read_json(path: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    serde_json::from_str(&text).unwrap()
}

/// gen → train-sig → train-sst → harmonize → synthesize → evaluate under `root`.
pub fn smoke(root: &Path, seed: &str) {
    let data = root.join("data");
    let sig = root.join("sig");
    let ebm = root.join("ebm");
    let harm = root.join("harm");
    let synth = root.join("synth");
    ok(&lest(&[
        "gen",
        "--sites",
        "4",
        "--per-site",
        "50",
        "--seed",
        seed,
        "--out",
        p(&data),
    ]));
    ok(&lest(&[
        "train-sig",
        "--data",
        p(&data),
        "--epochs",
        "2",
        "--seed",
        seed,
        "--out",
        p(&sig),
    ]));
    ok(&lest(&[
        "train-sst",
        "--sig",
        p(&sig),
        "--source",
        p(&data),
        "--target",
        p(&data),
        "--epochs",
        "2",
        "--seed",
        seed,
        "--out",
        p(&ebm),
    ]));
    ok(&lest(&[
        "harmonize",
        "--ebm",
        p(&ebm),
        "--in",
        p(&data),
        "--out",
        p(&harm),
    ]));
    ok(&lest(&[
        "synthesize",
        "--ebm",
        p(&ebm),
        "-n",
        "8",
        "--seed",
        seed,
        "--out",
        p(&synth),
    ]));
    for task in ["hist", "probe", "seg", "travel", "embed", "rank"] {
        ok(&lest(&[
            "evaluate",
            "--task",
            task,
            "--raw",
            p(&data),
            "--harmonized",
            p(&harm),
            "--out",
            p(&root.join(format!("eval_{task}"))),
        ]));
    }
    ok(&lest(&[
        "evaluate",
        "--task",
        "synth",
        "--raw",
        p(&data),
        "--synth",
        p(&synth),
        "--out",
        p(&root.join("eval_synth")),
    ]));
}

/// Files of a smoke run that must not depend on where it ran. The resolved
/// configs record the output path and are left out.
pub fn smoke_artifacts(root: &Path) -> Vec<PathBuf> {
    let mut files = Vec::new();
    let mut dirs: Vec<String> = ["sig", "ebm", "harm/images/site00", "synth"].map(String::from).to_vec();
    dirs.extend(["hist", "probe", "seg", "travel", "embed", "rank", "synth"].map(|t| format!("eval_{t}")));
    for sub in dirs {
        for e in std::fs::read_dir(root.join(&sub)).unwrap() {
            let name = e.unwrap().file_name();
            if name != "config.json" {
                files.push(Path::new(&sub).join(name));
            }
        }
    }
    files.sort();
    files
}
