use std::path::Path;

use mttt::checkpoint::{peek_dtype, Checkpoint, MAGIC};
use mttt::config::Config;
use mttt::Error;
use mttt_core::optim::Optimizer;
use mttt_core::rng::Rng;
use mttt_core::{DType, Real};

fn sample<S: Real>(overrides: &[&str]) -> Checkpoint<S> {
    let mut config = Config::default();
    config.apply_overrides(&["model.depth=2", "model.width=8", "model.tokens=patch:7"]).unwrap();
    config.apply_overrides(overrides).unwrap();
    let mut params = config.build_model::<S>().unwrap().params;
    let mut optimizer = Optimizer::new(config.train.optimizer, config.train.weight_decay, &params);
    let mut rng = Rng::new(9);
    let grads: Vec<_> = params.iter().map(|p| rng.normal_tensor(p.value.rows(), p.value.cols(), 1.0)).collect();
    optimizer.update(&mut params, &grads, 0.01).unwrap();
    Checkpoint { config, epoch: 3, rng_state: 0xdead_beef, params, optimizer }
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for overrides in [&[][..], &["train.optimizer=sgd", "train.momentum=0.7"][..], &["model.layer=ttt-mlp", "ttt.train_w0=true"][..]] {
        let a = dir.path().join("a.bin");
        let b = dir.path().join("b.bin");
        let c64 = sample::<f64>(overrides);
        c64.save(&a).unwrap();
        let back = Checkpoint::<f64>::load(&a).unwrap();
        assert_eq!(back, c64);
        back.save(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(peek_dtype(&a).unwrap(), DType::F64);

        let c32 = sample::<f32>(overrides);
        let bytes = c32.to_bytes();
        let back = Checkpoint::<f32>::from_bytes(&bytes, Path::new("m")).unwrap();
        assert_eq!(back.to_bytes(), bytes);
    }
}

#[test]
fn header_layout() {
    let bytes = sample::<f64>(&[]).to_bytes();
    assert_eq!(&bytes[..8], MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
    let c = sample::<f64>(&[]);
    let records = 4 + c.params.len() * 3;
    assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize, records);
    // First record: name "config", text kind.
    assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 6);
    assert_eq!(&bytes[20..26], b"config");
    assert_eq!(bytes[26], 3);
}

#[test]
fn corrupt_files_are_rejected() {
    let bytes = sample::<f64>(&[]).to_bytes();
    let p = Path::new("ck");
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::<f64>::from_bytes(&bad, p), Err(Error::Format { .. })));
    assert!(matches!(Checkpoint::<f64>::from_bytes(&bytes[..bytes.len() - 5], p), Err(Error::Truncated { .. })));
    assert!(Checkpoint::<f32>::from_bytes(&bytes, p).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::<f64>::from_bytes(&extra, p).is_err());
}
