//! Running the binary inside scratch directories.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const BIN: &str = env!("CARGO_BIN_EXE_fusiondet");

pub fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).args(args).current_dir(dir).output().expect("binary runs")
}

/// Stdout of a command that must succeed.
pub fn ok_in(dir: &Path, args: &[&str]) -> String {
    let out = run_in(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed with {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Every file under `root`, keyed by relative path.
pub fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Every subcommand in sequence with relative paths inside `dir`: gen,
/// train, fuse, detect, eval, both experiments and the alignment demo.
/// Returns everything written plus the concatenated stdout.
pub fn pipeline(dir: &Path) -> (BTreeMap<PathBuf, Vec<u8>>, String) {
    let mut stdout = String::new();
    for args in [
        &["gen", "--out", "data", "--seed", "3", "--scenes", "4", "--eval-scenes", "2"][..],
        &["train", "--data", "data", "--iterations", "5", "--seed", "1", "--out", "run"],
        &["fuse", "--data", "data", "--model", "run/model.json", "--out", "fused"],
        &["detect", "--data", "data", "--model", "run/model.json", "--seed", "1", "--out", "preds"],
        &["eval", "--data", "data", "--preds", "preds", "--fused", "fused", "--out", "report"],
        &["exp-gmta", "--data", "data", "--iterations", "3", "--seeds", "0,1", "--out", "exp-gmta"],
        &["exp-branches", "--data", "data", "--iterations", "2", "--seeds", "0", "--sets", "0;0,1", "--out", "exp-br"],
        &["gmta-demo", "--rows", "5", "--seed", "4"],
    ] {
        stdout.push_str(&ok_in(dir, args));
    }
    (snapshot(dir), stdout)
}
