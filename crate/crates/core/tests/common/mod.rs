//! Small synthetic datasets written in the on-disk formats the harness reads.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use lstwm::harness::ExperimentConfig;
use lstwm::SeededRng;

fn idx_images(n: usize, rng: &mut SeededRng) -> (Vec<u8>, Vec<u8>) {
    let mut images = Vec::new();
    images.extend_from_slice(&0x0803u32.to_be_bytes());
    for d in [n as u32, 28, 28] {
        images.extend_from_slice(&d.to_be_bytes());
    }
    let mut labels = Vec::new();
    labels.extend_from_slice(&0x0801u32.to_be_bytes());
    labels.extend_from_slice(&(n as u32).to_be_bytes());
    for _ in 0..n {
        let label = rng.below(10) as u8;
        labels.push(label);
        // a bright vertical bar whose position encodes the label, plus speckle
        for r in 0..28 {
            for c in 0..28 {
                let bar = c / 2 == label as usize + 2;
                let v = if bar { 200 + rng.below(56) } else { rng.below(30) };
                let _ = r;
                images.push(v as u8);
            }
        }
    }
    (images, labels)
}

/// Writes a tiny MNIST-format dataset (`train` and `test` images) into `dir`.
pub fn write_mnist(dir: &Path, train: usize, test: usize) {
    let mut rng = SeededRng::new(2024);
    std::fs::create_dir_all(dir).unwrap();
    for (n, img, lab) in [
        (train, "train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        (test, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    ] {
        let (i, l) = idx_images(n, &mut rng);
        std::fs::write(dir.join(img), i).unwrap();
        std::fs::write(dir.join(lab), l).unwrap();
    }
}

/// Writes a repetitive ASCII corpus and returns its path.
pub fn write_corpus(dir: &Path, bytes: usize) -> PathBuf {
    let phrase = b"the quick brown fox jumps over the lazy dog. ";
    let text: Vec<u8> = phrase.iter().copied().cycle().take(bytes).collect();
    let path = dir.join("corpus.txt");
    std::fs::write(&path, text).unwrap();
    path
}

pub fn digit_config(mnist: &Path, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.widths = vec![6, 5];
    cfg.batch_size = 4;
    cfg.epochs = 2;
    cfg.train_samples = 40;
    cfg.test_samples = 12;
    cfg.log_every = 3;
    cfg.mnist_dir = Some(mnist.to_path_buf());
    cfg.output_dir = out.to_path_buf();
    cfg
}

pub fn text_config(corpus: &Path, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.set("task", "text").unwrap();
    cfg.widths = vec![8];
    cfg.batch_size = 3;
    cfg.epochs = 2;
    cfg.pretrain_len = 10;
    cfg.main_len = 30;
    cfg.log_every = 5;
    cfg.corpus_path = Some(corpus.to_path_buf());
    cfg.output_dir = out.to_path_buf();
    cfg
}
