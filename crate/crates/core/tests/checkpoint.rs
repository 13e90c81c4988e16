use std::fs;

use pmlm::encoder::{Model, ModelConfig, ModelError};
use pmlm::masking::MaskingConfig;
use pmlm::trainer::{load_checkpoint, load_checkpoint_into, save_checkpoint, TrainConfig, TrainError, TrainState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(cfg: ModelConfig, seed: u64) -> Model<f32> {
    Model::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn bits(m: &Model<f32>) -> Vec<(String, Vec<u32>)> {
    m.params
        .iter()
        .map(|(_, name, t)| (name.to_string(), t.data().iter().map(|x| x.to_bits()).collect()))
        .collect()
}

#[test]
fn round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = model(ModelConfig::tiny(), 3);
    let mut state = TrainState::new(&m.params);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for v in state.m.iter_mut().chain(state.v.iter_mut()) {
        v.iter_mut().for_each(|x| *x = rng.gen());
    }
    state.step = 17;
    let masking = MaskingConfig {
        mask_prob: 0.3,
        ..Default::default()
    };
    let train = TrainConfig {
        total_steps: 99,
        ..Default::default()
    };
    save_checkpoint(&m, Some(&state), Some(&masking), Some(&train), &path).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(bits(&ck.model), bits(&m));
    assert_eq!(ck.model.config, m.config);
    let loaded = ck.state.unwrap();
    assert_eq!(loaded.step, 17);
    assert_eq!(loaded.m, state.m);
    assert_eq!(loaded.v, state.v);
    assert_eq!(ck.masking.unwrap(), masking);
    assert_eq!(ck.train.unwrap(), train);

    let again = dir.path().join("again.ckpt");
    save_checkpoint(&ck.model, Some(&loaded), Some(&masking), Some(&train), &again).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn truncated_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&model(ModelConfig::tiny(), 1), None, None, None, &path).unwrap();
    let bytes = fs::read(&path).unwrap();
    for cut in [bytes.len() - 1, bytes.len() - 4096.min(bytes.len() / 2), 30] {
        fs::write(&path, &bytes[..cut]).unwrap();
        let err = load_checkpoint(&path).err().unwrap();
        assert!(
            matches!(err, TrainError::Truncated { .. } | TrainError::Format(_)),
            "cut {cut}: {err}"
        );
    }
    fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
    assert!(load_checkpoint(&path).err().unwrap().to_string().contains("truncated checkpoint"));
}

#[test]
fn version_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&model(ModelConfig::tiny(), 1), None, None, None, &path).unwrap();
    let mut bytes = fs::read(&path).unwrap();
    let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
    bytes[nl - 1] = b'7';
    fs::write(&path, &bytes).unwrap();
    match load_checkpoint(&path) {
        Err(TrainError::Version { found, .. }) => assert_eq!(found, 7),
        other => panic!("{:?}", other.err()),
    }
}

#[test]
fn shape_mismatch_names_first_array() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let wide = ModelConfig {
        max_len: 12,
        ..ModelConfig::desk()
    };
    save_checkpoint(&model(wide.clone(), 1), None, None, None, &path).unwrap();
    let narrow = ModelConfig {
        hidden_dim: 32,
        ffn_dim: 128,
        ..wide
    };
    match load_checkpoint_into(&path, &narrow) {
        Err(TrainError::Model(ModelError::ShapeMismatch { name, .. })) => assert_eq!(name, "embed.tokens"),
        other => panic!("{:?}", other.err()),
    }
}

#[test]
fn missing_file_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_checkpoint(&dir.path().join("none")), Err(TrainError::Io(_))));
}
