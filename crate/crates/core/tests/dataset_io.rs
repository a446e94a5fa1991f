use std::fs;

use instarec::dataset::{
    load_dataset, load_images, save_dataset, save_images, sort_samples, META_FILE,
};
use instarec::synth::{
    synthesize, write_synth, SynthConfig, BACKGROUND_TEST_DIR, MULTIVIEW_DIR, SINGLEVIEW_DIR,
};
use instarec::Error;

fn small() -> SynthConfig {
    SynthConfig {
        num_objects: 5,
        multiview_objects: 2,
        azimuths: 6,
        classlevel_categories: 2,
        classlevel_objects_per_category: 2,
        classlevel_views: 3,
        backgrounds_train: 2,
        backgrounds_test: 3,
        ..SynthConfig::default()
    }
}

#[test]
fn synthetic_dataset_round_trips_through_disk() {
    let ds = synthesize(&small(), 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_synth(&ds, dir.path()).unwrap();

    let single = load_dataset(&dir.path().join(SINGLEVIEW_DIR)).unwrap();
    let mut expect = ds.singleview.clone();
    sort_samples(&mut expect);
    assert_eq!(single, expect);
    assert_eq!(single.len(), 3 * 6 * 2);
    assert!(single.iter().all(|s| s.mask.is_some()));

    let multi = load_dataset(&dir.path().join(MULTIVIEW_DIR)).unwrap();
    assert_eq!(multi.len(), 2 * 6 * 2);

    let bgs = load_images(&dir.path().join(BACKGROUND_TEST_DIR)).unwrap();
    assert_eq!(bgs, ds.backgrounds_test);
}

#[test]
fn save_load_save_is_stable() {
    let ds = synthesize(&small(), 9).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    save_dataset(a.path(), &ds.multiview).unwrap();
    let first = load_dataset(a.path()).unwrap();
    save_dataset(b.path(), &first).unwrap();
    let second = load_dataset(b.path()).unwrap();
    assert_eq!(first, second);

    let name = fs::read_dir(a.path())
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .file_name();
    let meta_a = fs::read(a.path().join(&name).join(META_FILE)).unwrap();
    let meta_b = fs::read(b.path().join(&name).join(META_FILE)).unwrap();
    assert_eq!(meta_a, meta_b);
}

#[test]
fn images_round_trip() {
    let ds = synthesize(&small(), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_images(dir.path(), &ds.backgrounds_train).unwrap();
    assert_eq!(load_images(dir.path()).unwrap(), ds.backgrounds_train);
}

#[test]
fn broken_layouts_are_reported_with_paths() {
    let ds = synthesize(&small(), 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &ds.singleview).unwrap();
    let obj = fs::read_dir(dir.path())
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();

    let meta = obj.join(META_FILE);
    let good = fs::read_to_string(&meta).unwrap();
    fs::write(&meta, "{ \"instance_id\": 0, ").unwrap();
    match load_dataset(dir.path()) {
        Err(Error::Parse { path, .. }) => assert_eq!(path, meta),
        other => panic!("expected a parse error, got {other:?}"),
    }
    fs::write(&meta, good).unwrap();

    let png = fs::read_dir(&obj)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_string_lossy().starts_with('v'))
        .unwrap();
    fs::remove_file(&png).unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(
        err.to_string()
            .contains(&*png.file_name().unwrap().to_string_lossy()),
        "{err}"
    );

    assert!(load_dataset(&dir.path().join("absent")).is_err());
}
