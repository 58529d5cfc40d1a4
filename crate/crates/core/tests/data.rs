mod common;

use std::fs;

use dsdseg::data::io::{read_pair, read_raw, write_pair, write_raw, RawVolume, VolumeData};
use dsdseg::data::synth::{generate_phantom, plan_structures, PhantomSpec};
use dsdseg::data::{generate_dataset, load_split, DatasetSpec, Manifest, Split, SplitSpec};
use dsdseg::error::{Error, FormatError};
use ndarray::Array3;

#[test]
fn pair_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = PhantomSpec::new(12, 3, 0.3, 5);
    spec.spacing = [0.8, 1.0, 2.5];
    let pair = generate_phantom(&spec).unwrap();
    let (img, lbl) = (dir.path().join("a.vseg"), dir.path().join("b.vseg"));
    write_pair(&pair, &img, &lbl).unwrap();
    let back = read_pair(&img, &lbl).unwrap();
    assert_eq!(back.image, pair.image);
    assert_eq!(back.label, pair.label);
    assert_eq!(back.spacing, [0.8, 1.0, 2.5]);
}

#[test]
fn corrupt_files_are_rejected_with_distinct_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.vseg");
    let vol = RawVolume {
        data: VolumeData::U8(Array3::from_elem((4, 4, 4), 1u8).into_dyn()),
        spacing: [1.0; 3],
    };
    write_raw(&vol, &path).unwrap();
    let good = fs::read(&path).unwrap();

    let kind = |bytes: &[u8]| {
        fs::write(&path, bytes).unwrap();
        match read_raw(&path) {
            Err(Error::Format { kind, .. }) => kind,
            other => panic!("expected a format error, got {other:?}"),
        }
    };
    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    assert!(matches!(kind(&bad_magic), FormatError::BadMagic(_)));
    assert!(matches!(kind(&good[..good.len() - 3]), FormatError::Truncated { .. }));
    let mut trailing = good.clone();
    trailing.push(0);
    assert!(matches!(kind(&trailing), FormatError::TrailingBytes(1)));
    assert!(matches!(read_raw(&dir.path().join("missing.vseg")), Err(Error::Io { .. })));
}

#[test]
fn labels_match_the_planned_ellipsoids() {
    let spec = PhantomSpec::new(16, 4, 0.0, 21);
    let plan = plan_structures(&spec).unwrap();
    let pair = generate_phantom(&spec).unwrap();
    for ((i, j, k), &label) in pair.label.indexed_iter() {
        // Later structures paint over earlier ones.
        let expected = plan.iter().rev().find(|e| e.contains(i, j, k)).map_or(0, |e| e.class_id);
        assert_eq!(label, expected, "voxel {:?}", (i, j, k));
    }
    // Noise-free intensity is the class mean.
    for (idx, &label) in pair.label.indexed_iter() {
        let v = pair.image[[0, idx.0, idx.1, idx.2]] as f64;
        assert!((v - spec.intensity_means[label as usize]).abs() < 1e-6);
    }
}

#[test]
fn default_split_is_sixty_twenty_twenty() {
    let dir = tempfile::tempdir().unwrap();
    let spec = DatasetSpec {
        phantom: PhantomSpec::new(8, 4, 0.5, 7),
        num_samples: 20,
        split: SplitSpec::default(),
    };
    let m = generate_dataset(dir.path(), &spec).unwrap();
    assert_eq!(m.split_sizes(), [12, 4, 4]);
    let reloaded = Manifest::load(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(reloaded, m);
    let val = load_split(&dir.path().join("manifest.json"), &m, Split::Val).unwrap();
    assert_eq!(val.len(), 4);
}

#[test]
fn generation_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let spec = DatasetSpec {
        phantom: PhantomSpec::new(8, 3, 0.4, 3),
        num_samples: 5,
        split: SplitSpec::default(),
    };
    generate_dataset(a.path(), &spec).unwrap();
    generate_dataset(b.path(), &spec).unwrap();
    let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 11);
    for n in names {
        assert_eq!(fs::read(a.path().join(&n)).unwrap(), fs::read(b.path().join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn single_class_phantoms_are_rejected() {
    assert!(PhantomSpec::new(8, 1, 0.1, 0).validate().is_err());
}
