use pcd::dataset::{load_dataset, save_dataset, MANIFEST};
use pcd_core::trainer::synth_dataset;

#[test]
fn store_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_dataset(5, 16, 3).unwrap();
    save_dataset(&data, dir.path()).unwrap();
    assert!(dir.path().join(MANIFEST).exists());
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.meta, data.meta);
    assert_eq!((back.size, back.seed), (16, 3));
    for (a, b) in back.images.iter().zip(&data.images) {
        assert!(a.bit_eq(b));
    }
}

#[test]
fn corrupt_image_file_fails_the_load() {
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&synth_dataset(2, 16, 0).unwrap(), dir.path()).unwrap();
    let f = dir.path().join("img_000001.pcd");
    let mut bytes = std::fs::read(&f).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&f, bytes).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(pcd::Error::Truncated { .. })));
}

#[test]
fn missing_manifest() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(pcd::Error::Io { .. })));
}
