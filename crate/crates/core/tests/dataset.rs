mod common;

use pmp::dataset::{
    encode_operation, fingerprint, generate, read_dataset, write_dataset, DatasetSpec, Operation, Rollout,
    FEATURE_DIM,
};
use pmp::Error;

#[test]
fn generation_is_deterministic_and_indexable() {
    let spec = DatasetSpec::in_distribution(7, 30);
    let a = generate(&spec).unwrap();
    assert_eq!(a, generate(&spec).unwrap());
    // rollout i does not depend on how many come before or after it
    let few = generate(&DatasetSpec { count: 5, ..spec }).unwrap();
    assert_eq!(&a[..5], &few[..]);
    assert_ne!(a, generate(&DatasetSpec::in_distribution(8, 30)).unwrap());
}

#[test]
fn rollouts_have_the_requested_shape() {
    for spec in [DatasetSpec::in_distribution(1, 50), DatasetSpec::out_of_distribution(1, 50)] {
        for r in generate(&spec).unwrap() {
            assert_eq!(r.array_len(), spec.array_len);
            assert_eq!(r.update_count(), spec.updates);
            assert_eq!(r.ops.len(), spec.updates + spec.queries);
            // updates come first, queries only name existing versions
            assert!(r.ops[..spec.updates].iter().all(Operation::is_update));
            for op in &r.ops[spec.updates..] {
                let Operation::Query { a, b, s } = *op else { panic!("update after query") };
                assert!(a <= b && b < spec.array_len && s <= spec.updates);
            }
            assert_eq!(Rollout::from_ops(r.initial_array.clone(), r.ops.clone()).unwrap(), r);
        }
    }
}

#[test]
fn file_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let data = generate(&DatasetSpec::out_of_distribution(3, 12)).unwrap();
    write_dataset(&data, &path).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), data);
    assert_eq!(fingerprint(&read_dataset(&path).unwrap()).unwrap(), fingerprint(&data).unwrap());

    let text = std::fs::read_to_string(&path).unwrap();
    let bumped = text.replacen("\"schema_version\":1", "\"schema_version\":2", 1);
    std::fs::write(&path, bumped).unwrap();
    assert!(matches!(read_dataset(&path), Err(Error::SchemaVersion { expected: 1, found: 2 })));

    let mut lines: Vec<&str> = text.lines().collect();
    lines[2] = "{not json";
    std::fs::write(&path, lines.join("\n")).unwrap();
    assert!(matches!(read_dataset(&path), Err(Error::Parse { line: 3, .. })));
    assert!(read_dataset(&dir.path().join("missing.jsonl")).is_err());
}

#[test]
fn node_growth_matches_path_lengths() {
    // K=5: paths to indices 0,1 have 4 nodes, to 2,3,4 have 3
    let data = generate(&DatasetSpec::in_distribution(11, 1000)).unwrap();
    for (u, m) in common::mean_growth(&data).into_iter().enumerate() {
        let want = 9.0 + 3.4 * (u + 1) as f64;
        assert!((m - want).abs() < 0.3, "after update {}: {m} vs {want}", u + 1);
    }
}

#[test]
fn features_expand_through_lineage() {
    let r = Rollout::from_ops(vec![5, 2, 8, 1, 7], vec![Operation::Update { k: 0, x: 9 }]).unwrap();
    let tree = r.replay().unwrap();
    let shape = tree.shape();
    let op = Operation::Query { a: 1, b: 3, s: 1 };
    let lineage: Vec<usize> = (0..9).chain([0, 2, 4, 8]).collect();
    let x = encode_operation(&shape, &op, &lineage).unwrap();
    assert_eq!(x.shape(), (13, FEATURE_DIM));
    for (j, &e) in lineage.iter().enumerate() {
        assert_eq!(x.row(j), x.row(e));
    }
    assert!(encode_operation(&shape, &op, &[0, 99]).is_err());
}
