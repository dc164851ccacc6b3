use fsdet::checkpoint::{self, CheckpointMeta};
use fsdet_core::autograd::OpKind;
use fsdet_core::detector::{Detector, DetectorConfig};
use fsdet_core::gradcheck::{gradcheck_all, FdConfig};

#[test]
fn gradcheck_report_is_stable_and_faults_hit_exactly_their_rows() {
    let a = gradcheck_all(3, FdConfig::default()).unwrap();
    let b = gradcheck_all(3, FdConfig::default()).unwrap();
    assert_eq!(a, b);
    assert!(a.passed(), "{:?}", a.failures());
    for op in [OpKind::Softmax, OpKind::Conv2d, OpKind::RoiAlign, OpKind::MatMul] {
        let r = gradcheck_all(3, FdConfig { fault: Some(op), ..FdConfig::default() }).unwrap();
        let expected: Vec<&str> =
            a.rows.iter().filter(|row| row.ops.iter().any(|o| o == op.name())).map(|row| row.name.as_str()).collect();
        assert!(!expected.is_empty());
        assert_eq!(r.failures(), expected, "fault in {}", op.name());
    }
}

fn meta() -> CheckpointMeta {
    CheckpointMeta {
        model: DetectorConfig::default(),
        phase: "meta_train".into(),
        dataset_seed: 7,
        split: 1,
        k: None,
        run_index: None,
        steps: 0,
    }
}

#[test]
fn checkpoint_roundtrip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = Detector::<f32>::new(DetectorConfig::default(), 11).unwrap();
    checkpoint::save(&path, &model, &meta()).unwrap();
    let (back, m) = checkpoint::load::<f32>(&path).unwrap();
    assert_eq!(m, meta());
    assert_eq!(checkpoint::snapshot(&back), checkpoint::snapshot(&model));

    // stored precision is converted on load
    let (wide, _) = checkpoint::load::<f64>(&path).unwrap();
    assert_eq!(checkpoint::snapshot(&wide), checkpoint::snapshot(&model));

    let bytes = std::fs::read(&path).unwrap();
    assert!(checkpoint::read_from::<f32>(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(checkpoint::read_from::<f32>(&bad).is_err());
    let trailing = [bytes.as_slice(), b"junk"].concat();
    assert!(checkpoint::read_from::<f32>(&trailing).is_err());
}
