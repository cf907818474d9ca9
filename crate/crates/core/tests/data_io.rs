mod common;

use htn_core::checkpoint;
use htn_core::data::{
    batch_iter, encode_idx_images, encode_idx_labels, load_idx_images, load_idx_labels, IdxImages, LabeledImageSet,
};
use htn_core::layers::InputSpec;
use htn_core::model::Model;
use htn_core::optim::Optimizer;
use htn_core::train::{evaluate, train_epoch, ImageDataset, ImageTask, TrainConfig};
use htn_core::Loss;
use proptest::prelude::*;
use rand::Rng;

fn fixture(count: usize, seed: u64) -> (IdxImages, Vec<u8>) {
    let mut r = common::rng(seed);
    let pixels = (0..count * 784).map(|_| r.gen()).collect();
    let labels = (0..count).map(|_| r.gen_range(0..10)).collect();
    (IdxImages { count, rows: 28, cols: 28, pixels }, labels)
}

fn write_fixture(dir: &std::path::Path, count: usize, seed: u64) -> (IdxImages, Vec<u8>) {
    let (images, labels) = fixture(count, seed);
    std::fs::write(dir.join("images.idx"), encode_idx_images(&images)).unwrap();
    std::fs::write(dir.join("labels.idx"), encode_idx_labels(&labels)).unwrap();
    (images, labels)
}

#[test]
fn idx_fixture_roundtrips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels) = write_fixture(dir.path(), 17, 5);
    let bytes = std::fs::read(dir.path().join("images.idx")).unwrap();
    assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
    assert_eq!(load_idx_images(dir.path().join("images.idx")).unwrap(), images);
    assert_eq!(load_idx_labels(dir.path().join("labels.idx")).unwrap(), labels);
    assert_eq!(encode_idx_images(&load_idx_images(dir.path().join("images.idx")).unwrap()), bytes);

    let set = LabeledImageSet::load(dir.path().join("images.idx"), dir.path().join("labels.idx")).unwrap();
    assert_eq!(set.len(), 17);
    assert_eq!(set.provenance.len(), 2);
    for i in 0..17 {
        let img = set.images.image(i);
        for r in 0..28 {
            for c in 0..28 {
                assert_eq!(img[(r + 2) * 32 + c + 2], f64::from(images.image(i)[r * 28 + c]) / 255.0);
            }
        }
    }
}

#[test]
fn missing_file_is_an_io_error() {
    let err = load_idx_images("/nonexistent/htn/images.idx").unwrap_err();
    assert!(matches!(err, htn_core::data::DataError::Io { .. }));
}

proptest! {
    #[test]
    fn batches_partition_the_index_set(len in 1usize..300, batch in 1usize..64, seed in any::<u64>()) {
        let batches = batch_iter(len, batch, seed).unwrap();
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        prop_assert_eq!(seen.len(), len);
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..len).collect::<Vec<_>>());
        prop_assert_eq!(batches.len(), len.div_ceil(batch));
        for b in &batches[..batches.len() - 1] {
            prop_assert_eq!(b.len(), batch);
        }
    }

    #[test]
    fn idx_encoding_roundtrips(count in 0usize..4, seed in any::<u64>()) {
        let (images, labels) = fixture(count, seed);
        let parsed = htn_core::data::parse_idx_images(&encode_idx_images(&images)).unwrap();
        prop_assert_eq!(parsed, images);
        prop_assert_eq!(htn_core::data::parse_idx_labels(&encode_idx_labels(&labels)).unwrap(), labels);
    }
}

#[test]
fn checkpoint_preserves_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), 24, 8);
    let set = LabeledImageSet::load(dir.path().join("images.idx"), dir.path().join("labels.idx")).unwrap();
    let input = InputSpec::ProductState { height: 32, width: 32, d: 2 };
    let spec = htn_core::ModelSpec::new(
        input.clone(),
        vec![
            htn_core::LayerSpec::Ttn { out_dim: 2 },
            htn_core::LayerSpec::Ttn { out_dim: 1 },
            htn_core::LayerSpec::Flatten,
            htn_core::LayerSpec::Dense { out_features: 10 },
        ],
    )
    .unwrap();
    let data = ImageDataset { set: &set, input, task: ImageTask::Classify };
    let mut model = Model::new(spec, 1);
    let mut opt = Optimizer::adam(&model, 1e-3);
    train_epoch(&mut model, &data, Loss::SoftmaxCrossEntropy, &mut opt, &TrainConfig { batch_size: 8, clip_norm: None }, 0)
        .unwrap();
    let before = evaluate(&model, &data, Loss::SoftmaxCrossEntropy).unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&path, &model, Some(&opt)).unwrap();
    let (restored, restored_opt) = checkpoint::load(&path).unwrap();
    let after = evaluate(&restored, &data, Loss::SoftmaxCrossEntropy).unwrap();
    assert_eq!(before, after);
    assert_eq!(restored_opt, Some(opt));
}
