use groundloc_harness::formats::{
    bundle_to_nets, nets_to_bundle, read_corpus, read_map, read_scenario, read_weights, write_scenario, write_weights,
};
use groundloc_harness::HarnessError;
use groundloc_core::learn::{coarse_backbone, init_side_tuned, DeskGeometry, TrainConfig};
use groundloc_core::world::{gen_scenario, ScenarioConfig};

#[test]
fn scenario_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let sc = gen_scenario(5, &ScenarioConfig::default()).unwrap();
    let path = write_scenario(dir.path(), 0, &sc).unwrap();
    let back = read_scenario(&path).unwrap();
    assert_eq!(back.digest(), sc.digest());
    assert!(back == sc);
    let map = read_map(&dir.path().join("map_0000.bevm")).unwrap();
    assert!(map == sc.map);
    let corpus = read_corpus(dir.path()).unwrap();
    assert_eq!(corpus.len(), 1);
    assert!(corpus[0] == sc);
}

#[test]
fn corpus_is_read_in_index_order() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen_scenario(1, &ScenarioConfig::default()).unwrap();
    let b = gen_scenario(2, &ScenarioConfig::default()).unwrap();
    write_scenario(dir.path(), 1, &b).unwrap();
    write_scenario(dir.path(), 0, &a).unwrap();
    let digests: Vec<String> = read_corpus(dir.path()).unwrap().iter().map(|s| s.digest()).collect();
    assert_eq!(digests, vec![a.digest(), b.digest()]);
}

#[test]
fn tampered_map_fails_the_digest_check() {
    let dir = tempfile::tempdir().unwrap();
    let sc = gen_scenario(6, &ScenarioConfig::default()).unwrap();
    let path = write_scenario(dir.path(), 0, &sc).unwrap();
    let map_path = dir.path().join("map_0000.bevm");
    let mut bytes = std::fs::read(&map_path).unwrap();
    let n = bytes.len();
    bytes[n - 2] ^= 0x40;
    std::fs::write(&map_path, bytes).unwrap();
    let err = read_scenario(&path).unwrap_err();
    assert!(err.to_string().contains("map_0000.bevm") || err.to_string().contains("scenario_0000.json"), "{err}");
}

#[test]
fn truncated_files_report_their_path() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.bevm");
    std::fs::write(&p, b"BEVM\x01").unwrap();
    let err = read_map(&p).unwrap_err();
    assert!(matches!(err, HarnessError::Format { .. }));
    assert!(err.to_string().contains("bad.bevm"));
    let missing = dir.path().join("none.lpw");
    assert!(matches!(read_weights(&missing).unwrap_err(), HarnessError::Io { .. }));
}

#[test]
fn learned_nets_round_trip_through_weights_file() {
    let dir = tempfile::tempdir().unwrap();
    let geometry = DeskGeometry::default();
    let base = coarse_backbone(geometry.coarse_slices + 1, 9).unwrap();
    let nets = init_side_tuned(&base, &TrainConfig::default()).unwrap();
    let bundle = nets_to_bundle(&nets);
    let p = dir.path().join("w.lpw");
    write_weights(&p, &bundle).unwrap();
    let back = read_weights(&p).unwrap();
    assert_eq!(back.stacks.len(), bundle.stacks.len());
    for ((ta, a), (tb, b)) in bundle.stacks.iter().zip(&back.stacks) {
        assert_eq!(ta, tb);
        assert_eq!(a.frozen, b.frozen);
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            for (x, y) in la.weight.iter().chain(&la.bias).zip(lb.weight.iter().chain(&lb.bias)) {
                assert_eq!(*y, f64::from(*x as f32));
            }
        }
    }
    // Stored values are f32, so a second pass is bit-exact.
    let nets2 = bundle_to_nets(&back, &geometry).unwrap();
    let q = dir.path().join("w2.lpw");
    write_weights(&q, &nets_to_bundle(&nets2)).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
    assert!(read_weights(&q).unwrap() == back);
}
