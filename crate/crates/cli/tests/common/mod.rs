#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cemmaf_core::{Activation, Attribute, DenseNet, Image, ModelBundle, Tensor};

pub fn cemmaf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cemmaf"))
        .args(args)
        .current_dir(dir)
        .env_remove("CEMMAF_LOG")
        .output()
        .expect("failed to launch cemmaf")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("terminated by signal")
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn linear(rows: usize, cols: usize, w: Vec<f64>, b: Vec<f64>) -> DenseNet {
    DenseNet::linear(
        Tensor::matrix(rows, cols, w).unwrap(),
        Tensor::vector(b).unwrap(),
        Activation::Identity,
    )
    .unwrap()
}

/// 2x2 grayscale bundle whose classifier ignores the image entirely.
pub fn constant_bundle(dir: &Path) -> PathBuf {
    let bundle = ModelBundle::new(
        [2, 2, 1],
        4,
        vec!["always".into(), "never".into()],
        linear(2, 4, vec![0.0; 8], vec![1.0, 0.0]),
        DenseNet::identity(4).unwrap(),
        None,
        vec![Attribute::new("mean", linear(1, 4, vec![0.25; 4], vec![0.0]), 0.0, 1.0).unwrap()],
    )
    .unwrap();
    let path = dir.join("constant");
    bundle.save(&path).unwrap();
    path
}

/// 2x2 image for the bundles above.
pub fn small_image(dir: &Path, name: &str) -> PathBuf {
    let path = dir.join(name);
    let image = Image::new(2, 2, 1, vec![0.2, 0.4, 0.6, 0.8]).unwrap();
    cemmaf_core::image::write_image(&path, &image).unwrap();
    path
}

/// Every regular file under `root`, relative, sorted.
pub fn tree(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

/// Relative paths of files that differ (or exist on one side only).
pub fn tree_diff(a: &Path, b: &Path) -> Vec<PathBuf> {
    let (ta, tb) = (tree(a), tree(b));
    let mut diff: Vec<PathBuf> = ta
        .iter()
        .filter(|p| !tb.contains(p) || std::fs::read(a.join(p)).unwrap() != std::fs::read(b.join(p)).unwrap())
        .cloned()
        .collect();
    diff.extend(tb.iter().filter(|p| !ta.contains(p)).cloned());
    diff
}

/// fixtures -> pn -> pp -> eval with relative paths inside `dir`.
pub fn full_pipeline(dir: &Path) -> Result<(), String> {
    let steps: [&[&str]; 4] = [
        &["fixtures", "--seed", "7", "--out", "fx"],
        &["pn", "--bundle", "fx/bundle", "--images", "fx/images", "--out", "reports", "--jobs", "4"],
        &["pp", "--bundle", "fx/bundle", "--images", "fx/images", "--out", "reports"],
        &["eval", "--reports", "reports", "--bundle", "fx/bundle", "--out", "eval"],
    ];
    for args in steps {
        let out = cemmaf(dir, args);
        if code(&out) != 0 {
            return Err(format!("{args:?} exited {}: {}", code(&out), stderr(&out)));
        }
    }
    Ok(())
}
