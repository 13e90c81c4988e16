use pmlm::encoder::ModelConfig;
use pmlm::masking::MaskingConfig;
use pmlm::synthgen::{sample_sequences, CoupledModelSpec, SamplerMode};
use pmlm::trainer::{pretrain, Dataset, RunOutputs, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn run(data: &Dataset, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let mut log = Vec::new();
    let cfg = TrainConfig {
        total_steps: 12,
        warmup_steps: 3,
        validate_every: 4,
        batch_size: 8,
        seed,
        ..Default::default()
    };
    let model = ModelConfig {
        max_len: 10,
        ..ModelConfig::tiny()
    };
    pretrain(
        data,
        &model,
        &MaskingConfig::default(),
        &cfg,
        RunOutputs {
            log: Some(&mut log),
            checkpoint: Some(&ckpt),
        },
    )
    .unwrap();
    (log, std::fs::read(&ckpt).unwrap())
}

#[test]
fn seeded_runs_are_byte_identical() {
    let spec = CoupledModelSpec::accept_l8();
    let seqs = sample_sequences(&spec, 200, &SamplerMode::Exact, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let data = Dataset::split(seqs, 0.1);
    let (log_a, ck_a) = run(&data, 5);
    let (log_b, ck_b) = run(&data, 5);
    assert!(!log_a.is_empty());
    assert_eq!(log_a, log_b);
    assert_eq!(ck_a, ck_b);
    let (log_c, _) = run(&data, 6);
    assert_ne!(log_a, log_c);
}
