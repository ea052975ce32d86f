use hebbseg::checkpoint::{load_checkpoint, save_checkpoint};
use hebbseg::data::{
    gen_synthetic, load_dataset, split_regime, train_val_split, write_dataset, RegimeSpec, Split, SyntheticData,
    SyntheticTaskSpec,
};
use hebbseg::finetune::{finetune, linear_probe, mean_dice, FinetuneOptions, SGDConfig};
use hebbseg::pretrain::{pretrain, PretrainOptions};
use hebbseg::segnet::{Network, NetworkSpec};
use hebbseg::{CheckpointError, Error, HebbianConfig};

fn blobs(n: usize, seed: u64) -> Vec<hebbseg::data::Sample> {
    let SyntheticData::Blobs { samples } = gen_synthetic(&SyntheticTaskSpec::blobs(n, 16, seed)).unwrap() else {
        panic!("expected blobs");
    };
    samples
}

#[test]
fn dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let samples = blobs(10, 3);
    let (_, val_idx) = train_val_split(samples.len(), 0.2, 3);
    let splits: Vec<Split> = (0..samples.len())
        .map(|i| if val_idx.contains(&i) { Split::Val } else { Split::Train })
        .collect();
    write_dataset(dir.path(), &samples, &splits).unwrap();
    let (train, val) = load_dataset(dir.path(), None, 0).unwrap();
    assert_eq!(train.len() + val.len(), 10);
    assert_eq!(val.len(), val_idx.len());
    for s in train.iter().chain(&val) {
        let orig = samples.iter().find(|o| o.id == s.id).unwrap();
        assert_eq!(s.mask, orig.mask);
        assert!(s.image.max_abs_diff(&orig.image).unwrap() <= 0.5 / 255.0 + 1e-6);
    }
}

#[test]
fn pretrain_finetune_probe_and_reload() {
    let samples = blobs(12, 1);
    let (train, val) = samples.split_at(9);
    let spec = NetworkSpec::new(1, vec![4, 8], 2);
    let mut net = Network::init(spec.clone(), 1).unwrap();
    let head_before = net.head().clone();
    let images: Vec<_> = train.iter().map(|s| s.image.clone()).collect();
    let opts = PretrainOptions { epochs: 2, batch_size: 3, seed: 1, decay: None };
    let rows = pretrain(&mut net, &images, &HebbianConfig::swta(0.05, 0.1), &opts).unwrap();
    assert!(!rows.is_empty());
    assert_eq!(net.head(), &head_before, "the head is not pre-trained");

    let split = split_regime(train.len(), &RegimeSpec { r: 50.0, seed: 1 }).unwrap();
    let labeled: Vec<_> = split.labeled.iter().map(|&i| train[i].clone()).collect();
    let sgd = SGDConfig { epochs: 3, decay_every: 2, ..SGDConfig::default() };
    let result = finetune(net.clone(), &labeled, val, &sgd, &FinetuneOptions { augment: true, seed: 1 }).unwrap();
    assert_eq!(result.history.len(), 3);
    let dc = mean_dice(&result.net, val).unwrap();
    assert!((dc - result.best_val_dc).abs() < 1e-9);

    let frozen = net.clone();
    let probe = linear_probe(&net, &labeled, val, &sgd, 1).unwrap();
    assert_eq!(net.layers(), frozen.layers());
    assert!((0.0..=1.0).contains(&probe.val_dc));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    save_checkpoint(&result.net, &path).unwrap();
    let reloaded = load_checkpoint(&path, &spec).unwrap();
    assert_eq!(reloaded.layers(), result.net.layers());
    let x = &val[0].image;
    assert_eq!(reloaded.predict(x).unwrap(), result.net.predict(x).unwrap());
}

#[test]
fn corrupt_checkpoint_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let spec = NetworkSpec::new(1, vec![2], 2);
    let net = Network::init(spec.clone(), 0).unwrap();
    let path = dir.path().join("a.ckpt");
    save_checkpoint(&net, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    std::fs::write(&path, &flipped).unwrap();
    assert!(matches!(load_checkpoint(&path, &spec), Err(Error::Checkpoint(CheckpointError::Crc { .. }))));

    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(load_checkpoint(&path, &spec).is_err());

    std::fs::write(&path, &bytes).unwrap();
    let other = NetworkSpec::new(1, vec![3], 2);
    assert!(matches!(
        load_checkpoint(&path, &other),
        Err(Error::Checkpoint(CheckpointError::ShapeMismatch { .. }))
    ));
}
