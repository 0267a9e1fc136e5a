#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ghvit::data::{encode_idx_images, encode_idx_labels};
use ghvit::rng::Rng;
use ghvit::Tensor;

pub fn ghvit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ghvit"))
        .args(args)
        .current_dir(dir)
        .env_remove("GHVIT_DATA_DIR")
        .output()
        .expect("spawn ghvit")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// 8x8 images: a fixed random prototype per class blended with noise.
/// Writes `<dir>/synthetic/{train,t10k}-*-ubyte` and returns the root.
pub fn write_synthetic(dir: &Path, train: usize, test: usize) -> PathBuf {
    let mut rng = Rng::new(11);
    let prototypes: Vec<Vec<f64>> = (0..10).map(|_| (0..64).map(|_| rng.uniform()).collect()).collect();
    let root = dir.join("synthetic");
    std::fs::create_dir_all(&root).unwrap();
    for (count, images, labels) in [
        (train, "train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        (test, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    ] {
        let mut pixels = Vec::new();
        let mut ys = Vec::new();
        for i in 0..count {
            let y = i % 10;
            pixels.extend(prototypes[y].iter().map(|p| ((0.7 * p + 0.3 * rng.uniform()) * 255.0).round() as f32 / 255.0));
            ys.push(y);
        }
        let t = Tensor::new([count, 8, 8, 1], pixels).unwrap();
        std::fs::write(root.join(images), encode_idx_images(&t)).unwrap();
        std::fs::write(root.join(labels), encode_idx_labels(&ys)).unwrap();
    }
    root
}

/// Config for a tiny run over [`write_synthetic`] output.
pub fn tiny_config(root: &Path, epochs: usize) -> String {
    let r = root.display();
    format!(
        "# tiny synthetic run\nvariant=gcn_hvit_1\n\
         train_images={r}/train-images-idx3-ubyte\ntrain_labels={r}/train-labels-idx1-ubyte\n\
         test_images={r}/t10k-images-idx3-ubyte\ntest_labels={r}/t10k-labels-idx1-ubyte\n\
         embed_dim=16\nlayers=1\nheads=2\nbatch_size=16\nepochs={epochs}\nseed=4\n"
    )
}
