use transfer_core::nn::{build_micro_resnet, checkpoint, BASE_GROUPS, HEAD_GROUP};
use transfer_core::Tensor;

fn block(cin: usize, cout: usize, stride: usize) -> usize {
    let main = 9 * cin * cout + 2 * cout + 9 * cout * cout + 2 * cout;
    let skip = if cin != cout || stride != 1 { cin * cout + 2 * cout } else { 0 };
    main + skip
}

/// Hand-derived trainable parameter count (running statistics excluded).
fn expected_params(c: usize, w: usize, k: usize) -> usize {
    let stem = 9 * c * w + 2 * w;
    let s1 = 2 * block(w, w, 1);
    let s2 = block(w, 2 * w, 2) + block(2 * w, 2 * w, 1);
    let s3 = block(2 * w, 4 * w, 2) + block(4 * w, 4 * w, 1);
    let head = 4 * w * k + k;
    stem + s1 + s2 + s3 + head
}

#[test]
fn parameter_counts_match_closed_form() {
    for (c, w, k) in [(1, 4, 3), (1, 8, 4), (3, 16, 37)] {
        let m = build_micro_resnet([c, 16, 16], k, w, 0).unwrap();
        assert_eq!(m.param_count(), expected_params(c, w, k), "c={c} w={w} k={k}");
    }
}

#[test]
fn groups_are_named_in_order() {
    let m = build_micro_resnet([1, 16, 16], 3, 2, 0).unwrap();
    let mut expected: Vec<String> = BASE_GROUPS.iter().map(|s| s.to_string()).collect();
    expected.push(HEAD_GROUP.to_string());
    assert_eq!(m.group_names(), expected);
}

#[test]
fn checkpoint_file_round_trip_preserves_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested").join("m.ckpt");
    let mut m = build_micro_resnet([1, 20, 18], 5, 3, 11).unwrap();
    m.set_trainable(&["stem", "stage1"], false).unwrap();
    m.set_learning_rates(&[1e-5, 2e-5, 3e-5, 4e-5, 5e-5]).unwrap();
    checkpoint::save(&m, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back.checksum(), m.checksum());
    assert_eq!(back.learning_rates(), m.learning_rates());
    assert_eq!(
        back.groups().iter().map(|g| g.trainable).collect::<Vec<_>>(),
        m.groups().iter().map(|g| g.trainable).collect::<Vec<_>>()
    );
    let x = Tensor::from_fn(&[2, 1, 20, 18], |i| (i % 17) as f64 / 17.0);
    assert_eq!(back.predict(x.clone()).unwrap(), m.predict(x).unwrap());
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let m = build_micro_resnet([1, 16, 16], 2, 2, 0).unwrap();
    let bytes = checkpoint::encode(&m);
    for cut in [0, 7, 8, bytes.len() / 2, bytes.len() - 1] {
        assert!(checkpoint::decode(&bytes[..cut]).is_err(), "cut at {cut}");
    }
}
