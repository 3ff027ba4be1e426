#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use moge::data::{write_idx_images, write_idx_labels, ImageDataset};
use moge::rng::Rng;

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

pub fn moge() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_moge"));
    cmd.current_dir(repo_root());
    cmd
}

pub fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("moge binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// 28x28 images whose brightest row encodes the label, for classes
/// `0..classes`.
pub fn synthetic(n: usize, classes: u8, seed: u64) -> ImageDataset {
    let mut rng = Rng::new(seed);
    let mut images = Vec::with_capacity(n * 784);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % classes as usize) as u8;
        for r in 0..28 {
            for _ in 0..28 {
                let base = if r == 3 + 2 * label as usize { 0.9 } else { 0.05 };
                images.push(((base + 0.1 * rng.uniform()) * 255.0).round() / 255.0);
            }
        }
        labels.push(label);
    }
    ImageDataset::new(28, 28, images, labels).unwrap()
}

/// Writes train/test IDX files in the standard Fashion-MNIST layout.
pub fn write_synthetic_dir(dir: &Path, train: usize, test: usize, classes: u8) {
    std::fs::create_dir_all(dir).unwrap();
    for (prefix, n, seed) in [("train", train, 1), ("t10k", test, 2)] {
        let ds = synthetic(n, classes, seed);
        write_idx_images(&dir.join(format!("{prefix}-images-idx3-ubyte.gz")), &ds, true).unwrap();
        write_idx_labels(&dir.join(format!("{prefix}-labels-idx1-ubyte.gz")), &ds, true).unwrap();
    }
}

/// The real dataset directory, if it has been downloaded.
pub fn real_data_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("MOGE_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| repo_root().join("data/fashion-mnist"));
    let (images, labels) = moge::data::split_paths(&dir, false);
    (images.exists() && labels.exists()).then_some(dir)
}
