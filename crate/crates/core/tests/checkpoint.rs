use prodial_core::checkpoint::Checkpoint;
use prodial_core::mamba::{model_forward, BlockDims, Model, ModelDims};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dims() -> ModelDims {
    ModelDims {
        block: BlockDims {
            d_model: 6,
            d_inner: 12,
            n_state: 3,
            dt_rank: 2,
            conv_k: 4,
        },
        layers: 3,
        vocab: 9,
        classes: 4,
    }
}

#[test]
fn model_survives_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.pdlb");
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let model = Model::init(dims(), &mut rng).unwrap();
    let config = serde_json::json!({"task": "seq_transfer", "seed": 21});
    let ckpt = Checkpoint::from_model(&model, config.clone(), 21, 500);
    ckpt.save(&path).unwrap();

    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ckpt);
    assert_eq!(loaded.config, config);
    assert_eq!(loaded.step, 500);
    let back = loaded.to_model(dims()).unwrap();
    assert_eq!(back, model);
    let toks = vec![vec![1, 2, 3, 4], vec![8, 0, 0, 5]];
    assert_eq!(model_forward(&back, &toks).unwrap(), model_forward(&model, &toks).unwrap());
    // save again gives the same bytes
    assert_eq!(std::fs::read(&path).unwrap(), back_bytes(&back, config));
    assert!(std::fs::read_dir(dir.path()).unwrap().count() == 1);
}

fn back_bytes(m: &Model, config: serde_json::Value) -> Vec<u8> {
    Checkpoint::from_model(m, config, 21, 500).to_bytes().unwrap()
}

#[test]
fn truncated_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.pdlb");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = Model::init(dims(), &mut rng).unwrap();
    let bytes = Checkpoint::from_model(&model, serde_json::Value::Null, 2, 0)
        .to_bytes()
        .unwrap();
    for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
        std::fs::write(&path, &bytes[..cut]).unwrap();
        assert!(Checkpoint::load(&path).is_err(), "cut at {cut}");
    }
    assert!(Checkpoint::load(&dir.path().join("missing.pdlb")).is_err());
}

#[test]
fn wrong_dims_fail_to_rebuild() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = Model::init(dims(), &mut rng).unwrap();
    let ckpt = Checkpoint::from_model(&model, serde_json::Value::Null, 3, 0);
    let mut other = dims();
    other.layers = 4;
    assert!(ckpt.to_model(other).is_err());
}
