use hcrnet::weights::{
    init_from_pretrained, load_checkpoint, pretrained_shapes, save_checkpoint, WeightArchive,
};
use hcrnet::{build_hcrnet, Error, Fill, Phase, Tensor};

fn pretrained_archive(seed: u64) -> WeightArchive {
    let mut a = WeightArchive::new();
    let mut shapes: Vec<_> = pretrained_shapes().into_iter().collect();
    shapes.sort();
    for (k, (name, shape)) in shapes.into_iter().enumerate() {
        let t = Tensor::<f32>::create(&shape, Fill::Uniform { lo: -0.1, hi: 0.1, seed: seed + k as u64 }).unwrap();
        a.push_tensor(name, &t).unwrap();
    }
    a
}

#[test]
fn pretrained_import_touches_only_backbone() {
    let archive = pretrained_archive(10);
    assert_eq!(archive.len(), 18);
    let exported: usize = archive.entries().iter().map(|e| e.data.len()).sum();
    assert_eq!(exported, 5_275_456);

    let mut net = build_hcrnet(10, 1).unwrap();
    net.set_phase(Phase::Two);
    let before = save_checkpoint(&net).unwrap();
    init_from_pretrained(&mut net, &archive).unwrap();
    assert_eq!(net.phase(), Phase::One);
    assert_eq!(net.param_count().total, 9_744_202);
    let after = save_checkpoint(&net).unwrap();
    let mut replaced = 0;
    for (b, a) in before.entries().iter().zip(after.entries()) {
        if let Some(src) = archive.get(&a.name) {
            assert_eq!(a.data, src.data, "{}", a.name);
            replaced += 1;
        } else {
            assert_eq!(a, b, "{} changed", a.name);
        }
    }
    assert_eq!(replaced, 18);
    assert_eq!(after.get("block4_conv2.weight").unwrap().shape, vec![3, 3, 512, 512]);
}

#[test]
fn pretrained_shape_mismatch_names_layer() {
    let mut archive = WeightArchive::new();
    for e in pretrained_archive(0).entries() {
        if e.name == "block3_conv2.weight" {
            archive.push(&e.name, vec![3, 3, 256, 128], e.data[..3 * 3 * 256 * 128].to_vec()).unwrap();
        } else {
            archive.push(&e.name, e.shape.clone(), e.data.clone()).unwrap();
        }
    }
    let mut net = build_hcrnet(10, 1).unwrap();
    match init_from_pretrained(&mut net, &archive) {
        Err(Error::WeightShape { name, expected, found }) => {
            assert_eq!(name, "block3_conv2.weight");
            assert_eq!(expected, vec![3, 3, 256, 256]);
            assert_eq!(found, vec![3, 3, 256, 128]);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn checkpoint_file_round_trip_preserves_inference() {
    let mut net = build_hcrnet(4, 2).unwrap();
    // Move BatchNorm statistics away from their initial values.
    let x = Tensor::create(&[6, 32, 32, 3], Fill::Uniform { lo: 0.0, hi: 1.0, seed: 3 }).unwrap();
    net.forward(&x, hcrnet::layers::Mode::Train, 1).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.hcrw");
    save_checkpoint(&net).unwrap().write(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let archive = WeightArchive::read(&path).unwrap();
    assert_eq!(archive.to_bytes(), bytes);

    let mut restored = build_hcrnet(4, 99).unwrap();
    load_checkpoint(&mut restored, &archive).unwrap();
    let a = net.infer(&x).unwrap();
    let b = restored.infer(&x).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn checkpoint_with_missing_or_extra_entries_rejected() {
    let net = build_hcrnet(3, 0).unwrap();
    let full = save_checkpoint(&net).unwrap();
    let mut missing = WeightArchive::new();
    for e in full.entries().iter().filter(|e| e.name != "batch_normalization_1.moving_variance") {
        missing.push(&e.name, e.shape.clone(), e.data.clone()).unwrap();
    }
    let mut target = build_hcrnet(3, 1).unwrap();
    assert!(matches!(load_checkpoint(&mut target, &missing), Err(Error::MissingEntry(_))));
    let mut extra = full.clone();
    extra.push("stray", vec![1], vec![0.0]).unwrap();
    assert!(load_checkpoint(&mut target, &extra).is_err());
}
