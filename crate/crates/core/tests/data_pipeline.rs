//! Dataset ingestion, splitting, and round-trip behavior on synthetic clips.

use stylesplat_core::data::{ingest, load_png_rgb, AvatarDataset};
use stylesplat_core::error::Error;
use stylesplat_core::synth::{synth_generate, SynthSpec};

fn spec() -> SynthSpec {
    SynthSpec { frames: 10, resolution: 32, expression_dim: 4, seed: 3 }
}

#[test]
fn valid_fixture_splits_80_20() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth_generate(&spec(), dir.path()).unwrap();
    assert_eq!(ds.len(), 10);
    let (train, test) = ds.train_test();
    assert_eq!(train.len(), 8);
    assert_eq!(test.len(), 2);
    assert_eq!(test, vec![8, 9], "held-out frames must be the tail");

    let (all, none) = ds.split(1.0, 0);
    assert_eq!(all.len(), 10);
    assert!(none.is_empty());

    // deterministic regardless of seed
    assert_eq!(ds.split(0.8, 1), ds.split(0.8, 99));
}

#[test]
fn frame_count_mismatch_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    synth_generate(&spec(), dir.path()).unwrap();
    // drop one record from tracking.json
    let path = dir.path().join("tracking.json");
    let mut records: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    records.pop();
    std::fs::write(&path, serde_json::to_string(&records).unwrap()).unwrap();
    match ingest(dir.path()) {
        Err(Error::FrameCountMismatch { frames: 10, records: 9 }) => {}
        other => panic!("expected FrameCountMismatch, got {other:?}"),
    }
}

#[test]
fn bad_box_names_the_frame() {
    let dir = tempfile::tempdir().unwrap();
    synth_generate(&spec(), dir.path()).unwrap();
    let path = dir.path().join("tracking.json");
    let mut records: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    records[4]["boxes"]["mouth"] = serde_json::json!([10.0, 10.0, 500.0, 20.0]);
    std::fs::write(&path, serde_json::to_string(&records).unwrap()).unwrap();
    match ingest(dir.path()) {
        Err(Error::BadBox { frame: 4, .. }) => {}
        other => panic!("expected BadBox for frame 4, got {other:?}"),
    }
}

#[test]
fn missing_tracking_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    synth_generate(&spec(), dir.path()).unwrap();
    std::fs::remove_file(dir.path().join("tracking.json")).unwrap();
    assert!(matches!(ingest(dir.path()), Err(Error::MissingTracking(_))));
}

#[test]
fn ingest_serialize_ingest_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth_generate(&spec(), dir.path()).unwrap();
    let dir2 = tempfile::tempdir().unwrap();
    ds.write_to(dir2.path()).unwrap();
    let ds2 = ingest(dir2.path()).unwrap();
    assert_eq!(ds.len(), ds2.len());
    for i in 0..ds.len() {
        assert_eq!(ds.load_image(i).unwrap(), ds2.load_image(i).unwrap(), "frame {i}");
        let a = serde_json::to_string(&ds.frames[i].record).unwrap();
        let b = serde_json::to_string(&ds2.frames[i].record).unwrap();
        assert_eq!(a, b, "record {i}");
    }
    assert_eq!(ds.landmarks, ds2.landmarks);
}

#[test]
fn images_are_unit_range_and_uv_shapes_match(){
    let dir = tempfile::tempdir().unwrap();
    let ds = synth_generate(&spec(), dir.path()).unwrap();
    for i in 0..ds.len() {
        let img = ds.load_image(i).unwrap();
        assert_eq!(img.shape(), &[3, 32, 32]);
        assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let cond = ds.conditioning(i, true).unwrap();
        let uv = cond.uv.expect("uv present");
        assert_eq!(uv.shape(), &[3, 32, 32]);
    }
}

#[test]
fn conditioning_is_loadable_without_uv() {
    let dir = tempfile::tempdir().unwrap();
    let ds: AvatarDataset = synth_generate(&spec(), dir.path()).unwrap();
    let cond = ds.conditioning(3, false).unwrap();
    assert!(cond.uv.is_none());
    assert_eq!(cond.expression.len(), 4);
    assert_eq!(cond.frame_id, 3);
}

#[test]
fn png_round_trip_is_exact_u8() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth_generate(&spec(), dir.path()).unwrap();
    let img = ds.load_image(0).unwrap();
    let path = dir.path().join("copy.png");
    stylesplat_core::data::save_png_rgb(&img, &path).unwrap();
    assert_eq!(load_png_rgb(&path).unwrap(), img);
}
