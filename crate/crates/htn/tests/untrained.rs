//! Untrained models on real MNIST should sit at the obvious baselines.
//! Reads `$HTN_DATA_DIR/mnist`, default `<workspace>/data/mnist`.

use std::path::{Path, PathBuf};

use htn::config::ExperimentConfig;
use htn::experiments::{load_split, run_autoencode, run_classify};

fn mnist_config(body: &str) -> ExperimentConfig {
    let root = std::env::var_os("HTN_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"));
    let text = format!("data.dir = {}\ndata.train_limit = 2000\ndata.test_limit = 2000\ntrain.epochs = 0\n{body}", root.join("mnist").display());
    ExperimentConfig::parse(&text, Path::new(".")).unwrap()
}

#[test]
fn zero_epoch_classifier_is_at_chance() {
    let tmp = tempfile::tempdir().unwrap();
    let mut accs = Vec::new();
    for seed in 1..=5 {
        let cfg = mnist_config(&format!("seed = {seed}\noutput.checkpoint = false\n"));
        accs.push(run_classify(&cfg, &tmp.path().join(seed.to_string())).unwrap().test_accuracy);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 0.1).abs() <= 0.03, "{accs:?}");
}

/// Mean per-image PSNR of predicting `guess(i)` for every test image.
fn constant_psnr(images: &[Vec<f64>], guess: impl Fn(usize) -> f64) -> f64 {
    let total: f64 = images
        .iter()
        .map(|x| {
            let mse = x.iter().enumerate().map(|(i, a)| (a - guess(i)).powi(2)).sum::<f64>() / x.len() as f64;
            let peak = x.iter().cloned().fold(0.0, f64::max);
            10.0 * (peak * peak / mse).log10()
        })
        .sum();
    total / images.len() as f64
}

// Tree features start near zero and decoder biases at zero, so the sigmoid
// head emits flat 0.5 gray. That sits well below the mean-image baseline.
#[test]
fn untrained_autoencoder_outputs_flat_gray() {
    let cfg = mnist_config("autoencode.bottleneck = 8\noutput.checkpoint = false\noutput.samples = 0\n");
    let (train, test) = load_split(&cfg).unwrap();
    let n = train.images.image(0).len();
    let mut mean = vec![0.0; n];
    for i in 0..train.len() {
        for (m, p) in mean.iter_mut().zip(train.images.image(i)) {
            *m += p / train.len() as f64;
        }
    }
    let images: Vec<Vec<f64>> = (0..test.len()).map(|i| test.images.image(i)).collect();
    let gray = constant_psnr(&images, |_| 0.5);
    let mean_image = constant_psnr(&images, |i| mean[i]);

    let tmp = tempfile::tempdir().unwrap();
    let psnr = run_autoencode(&cfg, tmp.path()).unwrap().psnr;
    println!("untrained {psnr:.3} dB, flat gray {gray:.3} dB, mean image {mean_image:.3} dB");
    assert!((psnr - gray).abs() < 0.05, "untrained {psnr:.3} dB, flat gray {gray:.3} dB");
    assert!(psnr < mean_image);
}
