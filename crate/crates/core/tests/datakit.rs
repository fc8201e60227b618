use std::collections::BTreeSet;
use std::path::Path;

use proptest::prelude::*;
use ragan::datakit::*;
use ragan::{Image32, RaceLabel, RaganError};

const SOURCE_CODE: [(RaceLabel, u8); 4] = [
    (RaceLabel::White, 0),
    (RaceLabel::Black, 1),
    (RaceLabel::Asian, 2),
    (RaceLabel::Indian, 3),
];

/// Empty files with coded names; only the names are read.
fn populate(dir: &Path, per_race: [(RaceLabel, usize); 4], extra: &[&str]) {
    for (race, n) in per_race {
        let code = SOURCE_CODE.iter().find(|c| c.0 == race).unwrap().1;
        for i in 0..n {
            let age = 1 + i % 100;
            let name = format!("{age}_{}_{code}_2017{i:08}.jpg", i % 2);
            std::fs::write(dir.join(name), b"").unwrap();
        }
    }
    for name in extra {
        std::fs::write(dir.join(name), b"").unwrap();
    }
}

fn full_targets(pad: usize) -> [(RaceLabel, usize); 4] {
    SPLIT_TARGETS.map(|(r, tr, te)| (r, tr + te + pad))
}

#[test]
fn full_build_hits_every_target_exactly() {
    let dir = tempfile::tempdir().unwrap();
    populate(
        dir.path(),
        full_targets(20),
        &["30_1_4_20170101.jpg", "bad_name.jpg", "notes.txt"],
    );
    let data = build_balanced_dataset(dir.path(), 11, BuildOptions { strict: true }).unwrap();
    assert_eq!(data.meta.scale, 1.0);
    assert_eq!(data.meta.unlabeled_race, 1);
    assert_eq!(data.meta.skipped, vec!["bad_name.jpg".to_string()]);
    for (race, tr, te) in SPLIT_TARGETS {
        let count = |s: Split| {
            data.faces
                .iter()
                .filter(|f| f.race == race && f.split == s)
                .count()
        };
        assert_eq!(
            (count(Split::Train), count(Split::Test)),
            (tr, te),
            "{race}"
        );
    }
    assert_eq!(
        data.faces.len(),
        SPLIT_TARGETS.iter().map(|t| t.1 + t.2).sum::<usize>()
    );
    let train: BTreeSet<_> = data
        .faces
        .iter()
        .filter(|f| f.split == Split::Train)
        .map(|f| &f.path)
        .collect();
    let test: BTreeSet<_> = data
        .faces
        .iter()
        .filter(|f| f.split == Split::Test)
        .map(|f| &f.path)
        .collect();
    assert!(train.is_disjoint(&test));
    assert_eq!(train.len() + test.len(), data.faces.len());
    assert_eq!(
        data.meta.age_histogram.values().sum::<usize>(),
        data.faces.len()
    );
}

#[test]
fn shortfall_scales_all_races_together() {
    let dir = tempfile::tempdir().unwrap();
    let avail = [
        (RaceLabel::Indian, 800),
        (RaceLabel::White, 1530),
        (RaceLabel::Asian, 1412),
        (RaceLabel::Black, 1428),
    ];
    populate(dir.path(), avail, &[]);
    let data = build_balanced_dataset(dir.path(), 3, BuildOptions::default()).unwrap();
    let scale = 800.0 / 1600.0;
    assert_eq!(data.meta.scale, scale);
    for (race, tr, te) in SPLIT_TARGETS {
        let n = data.faces.iter().filter(|f| f.race == race).count();
        let n_train = data
            .faces
            .iter()
            .filter(|f| f.race == race && f.split == Split::Train)
            .count();
        let want = scale * (tr + te) as f64;
        assert!((n as f64 - want).abs() <= 1.0, "{race}: {n} vs {want}");
        let want_train = scale * tr as f64;
        assert!(
            (n_train as f64 - want_train).abs() <= 1.0,
            "{race}: {n_train} vs {want_train}"
        );
    }
    assert!(matches!(
        build_balanced_dataset(dir.path(), 3, BuildOptions { strict: true }),
        Err(RaganError::Shortfall(_))
    ));
}

#[test]
fn missing_race_is_a_shortfall() {
    let dir = tempfile::tempdir().unwrap();
    populate(
        dir.path(),
        [
            (RaceLabel::Indian, 10),
            (RaceLabel::White, 10),
            (RaceLabel::Asian, 10),
            (RaceLabel::Black, 0),
        ],
        &[],
    );
    assert!(matches!(
        build_balanced_dataset(dir.path(), 0, BuildOptions::default()),
        Err(RaganError::Shortfall(_))
    ));
}

#[test]
fn manifest_is_byte_identical_per_seed_and_round_trips() {
    let src = tempfile::tempdir().unwrap();
    populate(
        src.path(),
        [
            (RaceLabel::Indian, 40),
            (RaceLabel::White, 40),
            (RaceLabel::Asian, 40),
            (RaceLabel::Black, 40),
        ],
        &[],
    );
    let write = |seed| {
        let out = tempfile::tempdir().unwrap();
        let data = build_balanced_dataset(src.path(), seed, BuildOptions::default()).unwrap();
        write_manifest(out.path(), &data).unwrap();
        let bytes = std::fs::read(out.path().join(MANIFEST_FILE)).unwrap();
        let meta = std::fs::read(out.path().join(META_FILE)).unwrap();
        let back = read_manifest(&out.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(back, data.faces);
        (bytes, meta)
    };
    assert_eq!(write(5), write(5));
    assert_ne!(write(5).0, write(6).0);
}

fn plane_image(h: usize, w: usize) -> Image32 {
    let plane: Vec<f32> = (0..h * w).map(|i| i as f32).collect();
    let data = [
        plane.clone(),
        plane.iter().map(|v| v + 100.0).collect(),
        plane.iter().map(|v| -v).collect(),
    ]
    .concat();
    Image32::new(3, h, w, data).unwrap()
}

#[test]
fn mirror_canvas_hand_computed() {
    // Row `a b c d` becomes `b a | a b c d | d c`; columns likewise.
    let x = plane_image(4, 4);
    let c = mirror_canvas(&x).unwrap();
    assert_eq!((c.height(), c.width()), (8, 8));
    let src = [1, 0, 0, 1, 2, 3, 3, 2];
    for ch in 0..3 {
        for y in 0..8 {
            for xx in 0..8 {
                assert_eq!(
                    c.at(ch, y, xx),
                    x.at(ch, src[y], src[xx]),
                    "({ch},{y},{xx})"
                );
            }
        }
    }
}

#[test]
fn mirror_canvas_of_wide_crop_is_centred() {
    let x = plane_image(2, 5);
    let c = mirror_canvas(&x).unwrap();
    // Side 5 + 2·3 = 11, crop rows start at (11 − 2) / 2 = 4, columns at 3.
    assert_eq!(c.height(), 11);
    for y in 0..2 {
        for xx in 0..5 {
            assert_eq!(c.at(0, 4 + y, 3 + xx), x.at(0, y, xx));
        }
    }
}

#[test]
fn mirror_pad_output_and_rejections() {
    let x = plane_image(6, 6).cast::<f32>();
    let y = mirror_pad(&x).unwrap();
    assert_eq!((y.channels(), y.height(), y.width()), (3, 256, 256));
    assert!(mirror_pad(&Image32::filled(3, 256, 256, 0.0).unwrap()).is_err());
    assert!(mirror_pad(&Image32::filled(3, 10, 41, 0.0).unwrap()).is_err());
    assert!(mirror_pad(&Image32::filled(3, 10, 40, 0.0).unwrap()).is_ok());
    assert!(mirror_pad(&Image32::filled(4, 10, 10, 0.0).unwrap()).is_err());
}

#[test]
fn mirror_pad_keeps_flat_images_flat() {
    let y = mirror_pad(&Image32::filled(3, 37, 21, 0.25).unwrap()).unwrap();
    assert!(y.data().iter().all(|v| (v - 0.25).abs() < 1e-6));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mirror_ring_reflects_about_crop_edges(h in 1usize..12, w in 1usize..12) {
        prop_assume!(h.max(w) <= 4 * h.min(w));
        let x = plane_image(h, w);
        let c = mirror_canvas(&x).unwrap();
        let side = c.height();
        let (top, left) = ((side - h) / 2, (side - w) / 2);
        for y in 0..side {
            for xx in 0..side {
                // Reflection about the top edge: row top − 1 − k mirrors row top + k.
                if y < top && top + (top - 1 - y) < side {
                    prop_assert_eq!(c.at(0, y, xx), c.at(0, top + (top - 1 - y), xx));
                }
                if xx < left && left + (left - 1 - xx) < side {
                    prop_assert_eq!(c.at(0, y, xx), c.at(0, y, left + (left - 1 - xx)));
                }
            }
        }
        for y in 0..h {
            for xx in 0..w {
                prop_assert_eq!(c.at(1, top + y, left + xx), x.at(1, y, xx));
            }
        }
    }
}

#[test]
fn synthetic_kinface_loads_with_published_counts() {
    for dataset in [KinDataset::KinFaceWI, KinDataset::KinFaceWII] {
        let root = tempfile::tempdir().unwrap();
        synthesize_kinface(root.path(), dataset, 8).unwrap();
        let pairs = load_kin_pairs(root.path(), dataset).unwrap();
        for r in Relation::ALL {
            let kin = pairs.iter().filter(|p| p.relation == r && p.kin).count();
            let non = pairs.iter().filter(|p| p.relation == r && !p.kin).count();
            assert_eq!(
                (kin, non),
                (dataset.expected_pairs(r), dataset.expected_pairs(r))
            );
        }
        assert!(pairs.iter().all(|p| (1..=FOLDS).contains(&p.fold)));
    }
}

#[test]
fn kinface_integrity_errors() {
    let root = tempfile::tempdir().unwrap();
    synthesize_kinface(root.path(), KinDataset::KinFaceWI, 4).unwrap();
    // The wrong benchmark's counts.
    assert!(matches!(
        load_kin_pairs(root.path(), KinDataset::KinFaceWII),
        Err(RaganError::Integrity(_))
    ));
    std::fs::remove_file(root.path().join("images/father-son/fs_001_2.png")).unwrap();
    match load_kin_pairs(root.path(), KinDataset::KinFaceWI) {
        Err(RaganError::Integrity(m)) => assert!(m.contains("fs_001_2.png"), "{m}"),
        other => panic!("{other:?}"),
    }
    std::fs::remove_file(pair_list_path(root.path(), Relation::FS)).unwrap();
    assert!(matches!(
        load_kin_pairs(root.path(), KinDataset::KinFaceWI),
        Err(RaganError::Integrity(_))
    ));
}

#[test]
fn relation_and_dataset_names_parse() {
    for r in Relation::ALL {
        assert_eq!(r.to_string().parse::<Relation>().unwrap(), r);
    }
    assert_eq!(
        "KinFaceW-II".parse::<KinDataset>().unwrap(),
        KinDataset::KinFaceWII
    );
    assert!("KinFaceW-III".parse::<KinDataset>().is_err());
}
