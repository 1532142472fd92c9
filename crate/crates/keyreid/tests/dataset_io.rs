//! Manifest/PNG/keypoint round-trips and loader error reporting.

use keyreid::dataset::{load_dataset, save_dataset, MANIFEST_NAME};
use keyreid::synth::{generate, SynthConfig};
use keyreid::PipelineError;

fn cfg() -> SynthConfig {
    SynthConfig {
        num_ids: 3,
        cams: 2,
        tracklets_per_id_cam: 3,
        frames_per_tracklet: 5,
        h: 64,
        w: 32,
        seed: 11,
    }
}

#[test]
fn save_load_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let original = generate(&cfg()).unwrap();
    let manifest = save_dataset(&original, dir.path()).unwrap();
    let loaded = load_dataset(&manifest, None).unwrap();

    assert_eq!(loaded.identity_labels, original.identity_labels);
    assert_eq!(loaded.camera_labels, original.camera_labels);
    assert_eq!(loaded.train.len(), original.train.len());
    assert_eq!(loaded.query.len(), original.query.len());
    assert_eq!(loaded.gallery.len(), original.gallery.len());
    for (a, b) in original
        .train
        .iter()
        .chain(&original.query)
        .chain(&original.gallery)
        .zip(loaded.train.iter().chain(&loaded.query).chain(&loaded.gallery))
    {
        assert_eq!(a.key, b.key);
        assert_eq!(a.person_id, b.person_id);
        assert_eq!(a.camera_id, b.camera_id);
        assert_eq!(a.keypoints, b.keypoints);
        assert_eq!(a.frames, b.frames, "frames differ for {}", a.key);
    }
}

#[test]
fn identity_labels_are_reindexed_densely() {
    let dir = tempfile::tempdir().unwrap();
    let original = generate(&cfg()).unwrap();
    let manifest = save_dataset(&original, dir.path()).unwrap();
    let loaded = load_dataset(&manifest, None).unwrap();
    // the generator writes sparse original labels (100, 107, ...)
    assert_eq!(loaded.identity_labels, vec![100, 107, 114]);
    let mut seen: Vec<usize> = loaded
        .train
        .iter()
        .chain(&loaded.query)
        .chain(&loaded.gallery)
        .map(|t| t.person_id)
        .collect();
    seen.sort_unstable();
    seen.dedup();
    assert_eq!(seen, vec![0, 1, 2]);
}

#[test]
fn missing_keypoint_file_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let original = generate(&cfg()).unwrap();
    let manifest = save_dataset(&original, dir.path()).unwrap();
    // break one entry's keypoint file
    let victim = dir.path().join(&original.query[0].key).join("keypoints.txt");
    std::fs::remove_file(&victim).unwrap();
    let err = load_dataset(&manifest, None).unwrap_err();
    let msg = err.to_string();
    assert!(
        msg.contains(&original.query[0].key) || msg.contains("keypoints.txt"),
        "error should name the entry: {msg}"
    );
}

#[test]
fn malformed_manifest_line_is_located() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join(MANIFEST_NAME);
    std::fs::write(&manifest, "only\tthree\tfields\n").unwrap();
    let err = load_dataset(&manifest, None).unwrap_err();
    match err {
        PipelineError::Manifest { line, .. } => assert_eq!(line, 1),
        other => panic!("expected manifest error, got {other}"),
    }
}

#[test]
fn frame_keypoint_count_mismatch_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let original = generate(&cfg()).unwrap();
    let manifest = save_dataset(&original, dir.path()).unwrap();
    // drop one frame's joints from a keypoint file
    let victim = dir.path().join(&original.train[0].key).join("keypoints.txt");
    let text = std::fs::read_to_string(&victim).unwrap();
    let trimmed: Vec<&str> = text.lines().filter(|l| !l.starts_with("4 ")).collect();
    std::fs::write(&victim, trimmed.join("\n")).unwrap();
    assert!(load_dataset(&manifest, None).is_err());
}

#[test]
fn resize_scales_keypoints() {
    let dir = tempfile::tempdir().unwrap();
    let original = generate(&cfg()).unwrap();
    let manifest = save_dataset(&original, dir.path()).unwrap();
    let loaded = load_dataset(&manifest, Some((32, 16))).unwrap();
    let a = &original.query[0];
    let b = loaded.query.iter().find(|t| t.key == a.key).unwrap();
    assert_eq!(b.frames[0].h, 32);
    assert_eq!(b.frames[0].w, 16);
    for (ja, jb) in a.keypoints[0].joints.iter().zip(&b.keypoints[0].joints) {
        assert!((jb.x - ja.x * 0.5).abs() < 1e-9);
        assert!((jb.y - ja.y * 0.5).abs() < 1e-9);
    }
}
