use kneealign::geometry::Point2;
use kneealign::hourglass::{HourglassConfig, HourglassModel};
use kneealign::landmarks::{parse_pts, read_pts, write_pts};
use kneealign::tensor::{read_weights, write_weights, NamedTensor, Tensor};
use proptest::prelude::*;

#[test]
fn weights_survive_a_write_read_cycle_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.kaw");
    let special = vec![0.0, -0.0, f32::MIN_POSITIVE / 4.0, f32::MAX, -1.5e-30, 1.0 / 3.0];
    let tensors: Vec<NamedTensor> = vec![
        ("a".into(), Tensor::from_vec(&[2, 3], special).unwrap()),
        ("block.conv.w".into(), Tensor::from_vec(&[1, 1, 1, 1], vec![7.25]).unwrap()),
        ("empty".into(), Tensor::zeros(&[0])),
    ];
    write_weights(&path, &tensors).unwrap();
    let back = read_weights(&path).unwrap();
    assert_eq!(back.len(), tensors.len());
    for ((n1, t1), (n2, t2)) in tensors.iter().zip(&back) {
        assert_eq!(n1, n2);
        assert_eq!(t1.shape(), t2.shape());
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(t1), bits(t2));
    }
}

#[test]
fn model_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("global.kaw");
    let m = HourglassModel::new(HourglassConfig::global_default()).unwrap();
    m.save(&path).unwrap();
    let back = HourglassModel::load(&path).unwrap();
    assert_eq!(back, m);
    // a sidecar that disagrees with the tensors is refused
    let cfg = HourglassModel::sidecar_path(&path);
    let text = std::fs::read_to_string(&cfg).unwrap().replace("width = 8", "width = 16");
    std::fs::write(&cfg, text).unwrap();
    assert!(HourglassModel::load(&path).is_err());
}

#[test]
fn truncated_weights_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.kaw");
    write_weights(&path, &[("x".into(), Tensor::full(&[4], 1.0f32))]).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(read_weights(&path).is_err());
}

proptest! {
    #[test]
    fn pts_files_round_trip_value_exactly(
        pts in proptest::collection::vec((-1e6f64..1e6, -1e6f64..1e6), 1..60),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pts");
        let points: Vec<Point2> = pts.iter().map(|&(x, y)| Point2::new(x, y)).collect();
        write_pts(&path, &points).unwrap();
        prop_assert_eq!(read_pts(&path).unwrap(), points);
    }
}

#[test]
fn malformed_pts_are_rejected() {
    for text in [
        "",
        "version: 2\nn_points: 1\n{\n1 2\n}\n",
        "version: 1\nn_points: 2\n{\n1 2\n}\n",
        "version: 1\nn_points: 1\n{\n1 nan\n}\n",
        "version: 1\nn_points: 1\n{\n1 2 3\n}\n",
        "version: 1\nn_points: 1\n{\n1 2\n",
    ] {
        assert!(parse_pts(text).is_err(), "{text:?}");
    }
}
