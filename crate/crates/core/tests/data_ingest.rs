use std::collections::BTreeSet;
use std::path::PathBuf;

use covidscreen_core::data::{
    load_manifest, patients_per_split, stratified_split, validate_image, DataError, DatasetManifest, ImageRecord,
    Label, LabelMap, Modality, Split, SplitRatios,
};
use proptest::prelude::*;

/// Reported per-class counts: (train, val, test).
const REPORTED: [(Label, [usize; 3]); 3] = [
    (Label::Covid19, [6120, 680, 1700]),
    (Label::OtherPneumonia, [543, 60, 151]),
    (Label::Normal, [3060, 340, 851]),
];

fn write_png(path: &std::path::Path, w: u32, h: u32, gray: bool) {
    if gray {
        image::GrayImage::from_pixel(w, h, image::Luma([90])).save(path).unwrap();
    } else {
        image::RgbImage::from_pixel(w, h, image::Rgb([90, 10, 200])).save(path).unwrap();
    }
}

#[test]
fn reported_split_manifest_totals() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    image::RgbImage::from_pixel(2, 2, image::Rgb([1, 2, 3]))
        .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .unwrap();
    let mut text = String::from("image_id,path,label,patient_id,modality,split\n");
    let mut n = 0;
    for (label, counts) in REPORTED {
        std::fs::create_dir_all(dir.path().join(label.as_str())).unwrap();
        for (split, count) in Split::ALL.iter().zip(counts) {
            for _ in 0..count {
                let rel = format!("{}/s{n:05}.png", label.as_str());
                std::fs::write(dir.path().join(&rel), &bytes).unwrap();
                text.push_str(&format!("s{n:05},{rel},{},p{},ct,{}\n", label.as_str(), n / 17, split.as_str()));
                n += 1;
            }
        }
    }
    let path = dir.path().join("manifest.csv");
    std::fs::write(&path, &text).unwrap();
    let m = load_manifest(&path).unwrap();
    let c = m.split_counts();
    assert_eq!(
        [c.split_total(Split::Train), c.split_total(Split::Val), c.split_total(Split::Test)],
        [9723, 1080, 2702]
    );
    assert_eq!(c.total(), 13505);
    for (label, counts) in REPORTED {
        assert_eq!(c.class_total(label), counts.iter().sum::<usize>());
    }
    assert_eq!(m.to_canonical_string(), text);

    std::fs::remove_file(dir.path().join("normal/s13504.png")).unwrap();
    assert!(matches!(load_manifest(&path), Err(DataError::MissingFile { .. })));
}

fn records(per_class: [usize; 3], per_patient: usize) -> Vec<ImageRecord> {
    let mut out = Vec::new();
    for (label, count) in Label::ALL.iter().zip(per_class) {
        for i in 0..count {
            out.push(ImageRecord::new(
                format!("{}-{i}", label.as_str()),
                PathBuf::from(format!("{}/{i}.png", label.as_str())),
                *label,
                format!("{}-p{}", label.as_str(), i / per_patient),
                Modality::Ct,
            ));
        }
    }
    out
}

#[test]
fn seventy_ten_twenty_at_reported_class_sizes() {
    let recs = records([8500, 754, 4251], 1);
    let a = stratified_split(&recs, SplitRatios::CT_DEFAULT, 3, false).unwrap();
    assert_eq!(a.assignments.len(), 13505);
    for (label, total) in [(Label::Covid19, 8500.0), (Label::OtherPneumonia, 754.0), (Label::Normal, 4251.0)] {
        for (split, r) in Split::ALL.iter().zip([0.7, 0.1, 0.2]) {
            assert!((a.counts.get(label, *split) as f64 - r * total).abs() <= 1.0);
        }
    }
}

#[test]
fn grouped_split_never_shares_patients() {
    let recs = records([170, 60, 85], 17);
    let a = stratified_split(&recs, SplitRatios::CT_DEFAULT, 5, true).unwrap();
    let mut m = DatasetManifest { records: recs, ..Default::default() };
    m.splits = a.assignments.clone();
    assert!(m.is_fully_split());
    let groups = patients_per_split(&m);
    let sets: Vec<&BTreeSet<String>> = groups.values().collect();
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            assert!(sets[i].is_disjoint(sets[j]));
        }
    }
}

#[test]
fn image_validation_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [("a.png", 484, 484, false, true), ("b.png", 1024, 1024, false, true), ("c.png", 100, 100, true, false)];
    for (name, w, h, gray, strict_ok) in cases {
        write_png(&dir.path().join(name), w, h, gray);
        let rec = ImageRecord::new(name.to_string(), PathBuf::from(name), Label::Normal, "p".to_string(), Modality::Ct);
        assert_eq!(validate_image(&rec, dir.path(), true).unwrap().passed, strict_ok, "{name}");
        assert!(validate_image(&rec, dir.path(), false).unwrap().passed, "{name}");
    }
}

#[test]
fn manifest_parse_errors() {
    let labels = LabelMap::canonical();
    assert!(DatasetManifest::parse("", PathBuf::new(), &labels).unwrap().is_empty());
    let dup = "image_id,path,label,patient_id,modality,split\na,a.png,covid19,p,ct,train\na,b.png,normal,p,ct,test\n";
    assert!(matches!(DatasetManifest::parse(dup, PathBuf::new(), &labels), Err(DataError::DuplicateId(_))));
    let unk = "image_id,path,label,patient_id,modality,split\na,a.png,flu,p,ct,train\n";
    assert!(matches!(DatasetManifest::parse(unk, PathBuf::new(), &labels), Err(DataError::UnknownLabel { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn split_partitions_and_is_pure(a in 3usize..60, b in 3usize..30, c in 3usize..40, seed in any::<u64>(), grouped in any::<bool>()) {
        let recs = records([a, b, c], 3);
        let s1 = stratified_split(&recs, SplitRatios::CT_DEFAULT, seed, grouped);
        let s2 = stratified_split(&recs, SplitRatios::CT_DEFAULT, seed, grouped);
        match (s1, s2) {
            (Ok(x), Ok(y)) => {
                prop_assert_eq!(&x, &y);
                let ids: BTreeSet<&String> = x.assignments.keys().collect();
                prop_assert_eq!(ids.len(), recs.len());
                prop_assert!(recs.iter().all(|r| x.assignments.contains_key(&r.image_id)));
            }
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "split is not a pure function"),
        }
    }
}
