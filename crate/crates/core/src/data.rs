//! Dataset manifests, image validation and stratified splitting.
//!
//! A manifest is a comma-separated table with one row per image:
//!
//! ```text
//! image_id,path,label,patient_id,modality,split
//! p001_0001,covid19/p001_0001.png,covid19,p001,ct,train
//! ```
//!
//! `path` is relative to the directory holding the manifest. `split` may be
//! empty for records that have not been assigned yet.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest accepted side length for CT-COV19 conformant images.
pub const CT_MIN_SIDE: u32 = 484;
/// Largest accepted side length for CT-COV19 conformant images.
pub const CT_MAX_SIDE: u32 = 1024;
/// Bits per pixel of CT-COV19 images (8-bit RGB).
pub const CT_BIT_DEPTH: u16 = 24;

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp", "tif", "tiff"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("image {image_id}: referenced file {path} does not exist")]
    MissingFile { image_id: String, path: PathBuf },
    #[error("duplicate image id {0:?}")]
    DuplicateId(String),
    #[error("unknown label {label:?}{}", line.map(|l| format!(" at manifest line {l}")).unwrap_or_default())]
    UnknownLabel { label: String, line: Option<usize> },
    #[error("cannot decode image {path}: {message}")]
    UndecodableImage { path: PathBuf, message: String },
    #[error("invalid split ratios: {0}")]
    InvalidRatios(String),
    #[error("class {label} has {available} record(s) but {requested} split(s) were requested")]
    InsufficientRecords {
        label: Label,
        available: usize,
        requested: usize,
    },
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Covid19,
    OtherPneumonia,
    Normal,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Covid19, Label::OtherPneumonia, Label::Normal];

    /// Output slot of this class in a three-way CT head.
    pub fn index(self) -> usize {
        match self {
            Label::Covid19 => 0,
            Label::OtherPneumonia => 1,
            Label::Normal => 2,
        }
    }

    pub fn from_index(index: usize) -> Option<Label> {
        Label::ALL.get(index).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Covid19 => "covid19",
            Label::OtherPneumonia => "other_pneumonia",
            Label::Normal => "normal",
        }
    }

    pub fn is_covid(self) -> bool {
        self == Label::Covid19
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        LabelMap::canonical().get(s).ok_or_else(|| DataError::UnknownLabel {
            label: s.to_string(),
            line: None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Ct,
    Cxr,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Ct => "ct",
            Modality::Cxr => "cxr",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ct" => Ok(Modality::Ct),
            "cxr" | "xray" | "x-ray" => Ok(Modality::Cxr),
            other => Err(format!("unsupported modality {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn index(self) -> usize {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// Maps raw class names (directory names, external label vocabularies) onto
/// [`Label`]. Lookups are case-insensitive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    entries: BTreeMap<String, Label>,
}

impl LabelMap {
    /// Canonical names plus the common spellings used by public datasets.
    pub fn canonical() -> Self {
        Self::from_pairs([
            ("covid19", Label::Covid19),
            ("covid-19", Label::Covid19),
            ("covid", Label::Covid19),
            ("other_pneumonia", Label::OtherPneumonia),
            ("other-pneumonia", Label::OtherPneumonia),
            ("other pneumonia", Label::OtherPneumonia),
            ("pneumonia", Label::OtherPneumonia),
            ("normal", Label::Normal),
        ])
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, Label)>) -> Self {
        LabelMap {
            entries: pairs
                .into_iter()
                .map(|(k, v)| (k.trim().to_ascii_lowercase(), v))
                .collect(),
        }
    }

    /// Parses `raw=label` lines (e.g. `CT_NonCOVID=normal`); `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (raw, label) = line.split_once('=').ok_or_else(|| DataError::Parse {
                line: i + 1,
                message: format!("expected raw=label, got {line:?}"),
            })?;
            let label = label.trim().parse::<Label>().map_err(|_| DataError::UnknownLabel {
                label: label.trim().to_string(),
                line: Some(i + 1),
            })?;
            entries.insert(raw.trim().to_ascii_lowercase(), label);
        }
        Ok(LabelMap { entries })
    }

    pub fn get(&self, raw: &str) -> Option<Label> {
        self.entries.get(&raw.trim().to_ascii_lowercase()).copied()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    /// Path relative to the manifest root.
    pub path: PathBuf,
    pub label: Label,
    pub patient_id: String,
    pub modality: Modality,
    /// Filled in by [`validate_image`]; not stored in the manifest file.
    pub width: Option<u32>,
    pub height: Option<u32>,
    pub bit_depth: Option<u16>,
}

impl ImageRecord {
    pub fn new(
        image_id: impl Into<String>,
        path: impl Into<PathBuf>,
        label: Label,
        patient_id: impl Into<String>,
        modality: Modality,
    ) -> Self {
        ImageRecord {
            image_id: image_id.into(),
            path: path.into(),
            label,
            patient_id: patient_id.into(),
            modality,
            width: None,
            height: None,
            bit_depth: None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    image_id: String,
    path: String,
    label: String,
    patient_id: String,
    modality: String,
    #[serde(default)]
    split: String,
}

const MANIFEST_HEADER: [&str; 6] = ["image_id", "path", "label", "patient_id", "modality", "split"];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    /// Directory the record paths are relative to.
    pub root: PathBuf,
    pub records: Vec<ImageRecord>,
    pub splits: BTreeMap<String, Split>,
}

/// Loads a manifest using the canonical label vocabulary.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    load_manifest_with(path, &LabelMap::canonical())
}

/// Loads a manifest whose `label` column uses an external vocabulary.
pub fn load_manifest_with(path: &Path, labels: &LabelMap) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = DatasetManifest::parse(&text, root, labels)?;
    for record in &manifest.records {
        let full = manifest.resolve(record);
        if !full.is_file() {
            return Err(DataError::MissingFile {
                image_id: record.image_id.clone(),
                path: full,
            });
        }
    }
    Ok(manifest)
}

impl DatasetManifest {
    /// Parses manifest text without touching the filesystem.
    pub fn parse(text: &str, root: PathBuf, labels: &LabelMap) -> Result<Self> {
        let mut manifest = DatasetManifest {
            root,
            ..Default::default()
        };
        if text.trim().is_empty() {
            return Ok(manifest);
        }
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut seen = HashSet::new();
        for (i, row) in reader.deserialize::<ManifestRow>().enumerate() {
            // header is line 1
            let line = i + 2;
            let row = row.map_err(|e| DataError::Parse {
                line,
                message: e.to_string(),
            })?;
            if row.image_id.is_empty() {
                return Err(DataError::Parse {
                    line,
                    message: "empty image_id".into(),
                });
            }
            if !seen.insert(row.image_id.clone()) {
                return Err(DataError::DuplicateId(row.image_id));
            }
            let label = labels.get(&row.label).ok_or_else(|| DataError::UnknownLabel {
                label: row.label.clone(),
                line: Some(line),
            })?;
            let modality = row
                .modality
                .parse::<Modality>()
                .map_err(|message| DataError::Parse { line, message })?;
            if !row.split.is_empty() {
                let split = row
                    .split
                    .parse::<Split>()
                    .map_err(|message| DataError::Parse { line, message })?;
                manifest.splits.insert(row.image_id.clone(), split);
            }
            manifest.records.push(ImageRecord::new(
                row.image_id,
                PathBuf::from(row.path),
                label,
                row.patient_id,
                modality,
            ));
        }
        Ok(manifest)
    }

    /// Builds a manifest from the `<root>/<class>/<image>` directory layout.
    ///
    /// Patient ids are taken from the file stem up to the first `_`; files
    /// without an underscore are treated as their own patient.
    pub fn from_layout(root: &Path, modality: Modality, labels: &LabelMap) -> Result<Self> {
        let mut records = Vec::new();
        let mut class_dirs: Vec<PathBuf> = fs::read_dir(root)
            .map_err(|source| DataError::Io {
                path: root.to_path_buf(),
                source,
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        class_dirs.sort();
        for dir in class_dirs {
            let class_name = dir.file_name().unwrap_or_default().to_string_lossy().to_string();
            let label = labels.get(&class_name).ok_or_else(|| DataError::UnknownLabel {
                label: class_name.clone(),
                line: None,
            })?;
            let mut files: Vec<PathBuf> = walkdir::WalkDir::new(&dir)
                .min_depth(1)
                .max_depth(1)
                .into_iter()
                .filter_map(|e| e.ok())
                .map(|e| e.into_path())
                .filter(|p| is_image_path(p))
                .collect();
            files.sort();
            for file in files {
                let stem = file.file_stem().unwrap_or_default().to_string_lossy().to_string();
                let patient = stem.split('_').next().unwrap_or(&stem).to_string();
                let rel = file.strip_prefix(root).unwrap_or(&file).to_path_buf();
                records.push(ImageRecord::new(
                    format!("{class_name}/{stem}"),
                    rel,
                    label,
                    patient,
                    modality,
                ));
            }
        }
        Ok(DatasetManifest {
            root: root.to_path_buf(),
            records,
            splits: BTreeMap::new(),
        })
    }

    pub fn resolve(&self, record: &ImageRecord) -> PathBuf {
        self.root.join(&record.path)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split_of(&self, image_id: &str) -> Option<Split> {
        self.splits.get(image_id).copied()
    }

    pub fn records_in(&self, split: Split) -> Vec<&ImageRecord> {
        self.records
            .iter()
            .filter(|r| self.split_of(&r.image_id) == Some(split))
            .collect()
    }

    /// True when every record has exactly one split.
    pub fn is_fully_split(&self) -> bool {
        self.records.iter().all(|r| self.splits.contains_key(&r.image_id))
            && self.splits.len() == self.records.len()
    }

    pub fn apply_split(&mut self, assignment: &SplitAssignment) {
        for record in &self.records {
            if let Some(split) = assignment.assignments.get(&record.image_id) {
                self.splits.insert(record.image_id.clone(), *split);
            }
        }
    }

    /// Per-class record counts for each assigned split.
    pub fn split_counts(&self) -> SplitCounts {
        let mut counts = SplitCounts::default();
        for record in &self.records {
            if let Some(split) = self.split_of(&record.image_id) {
                counts.add(record.label, split);
            }
        }
        counts
    }

    /// Canonical text form: fixed header, records in manifest order, canonical
    /// label and modality spellings.
    pub fn to_canonical_string(&self) -> String {
        let mut writer = csv::WriterBuilder::new().from_writer(Vec::new());
        writer.write_record(MANIFEST_HEADER).expect("in-memory write");
        for record in &self.records {
            let path = record.path.to_string_lossy().replace('\\', "/");
            let split = self.split_of(&record.image_id).map(Split::as_str).unwrap_or("");
            writer
                .write_record([
                    record.image_id.as_str(),
                    path.as_str(),
                    record.label.as_str(),
                    record.patient_id.as_str(),
                    record.modality.as_str(),
                    split,
                ])
                .expect("in-memory write");
        }
        String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("utf-8 fields")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_canonical_string()).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn is_image_path(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .map(|e| IMAGE_EXTENSIONS.contains(&e.to_string_lossy().to_ascii_lowercase().as_str()))
            .unwrap_or(false)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationResult {
    pub image_id: String,
    pub passed: bool,
    pub width: u32,
    pub height: u32,
    pub bit_depth: u16,
    pub reasons: Vec<String>,
}

/// Decodes the record's image and checks it against the CT-COV19 bounds when
/// `strict` is set. Lenient mode only requires a decodable image.
pub fn validate_image(record: &ImageRecord, root: &Path, strict: bool) -> Result<ValidationResult> {
    let path = root.join(&record.path);
    let img = image::ImageReader::open(&path)
        .map_err(|e| DataError::UndecodableImage {
            path: path.clone(),
            message: e.to_string(),
        })?
        .with_guessed_format()
        .map_err(|e| DataError::UndecodableImage {
            path: path.clone(),
            message: e.to_string(),
        })?
        .decode()
        .map_err(|e| DataError::UndecodableImage {
            path: path.clone(),
            message: e.to_string(),
        })?;
    let width = img.width();
    let height = img.height();
    let bit_depth = img.color().bits_per_pixel();
    let mut reasons = Vec::new();
    if strict {
        for (name, side) in [("width", width), ("height", height)] {
            if !(CT_MIN_SIDE..=CT_MAX_SIDE).contains(&side) {
                reasons.push(format!(
                    "{name} {side} outside [{CT_MIN_SIDE}, {CT_MAX_SIDE}]"
                ));
            }
        }
        if bit_depth != CT_BIT_DEPTH {
            reasons.push(format!("bit depth {bit_depth}, expected {CT_BIT_DEPTH}"));
        }
    }
    Ok(ValidationResult {
        image_id: record.image_id.clone(),
        passed: reasons.is_empty(),
        width,
        height,
        bit_depth,
        reasons,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    pub const CT_DEFAULT: SplitRatios = SplitRatios {
        train: 0.7,
        val: 0.1,
        test: 0.2,
    };
    pub const CXR_PROTOCOL: SplitRatios = SplitRatios {
        train: 0.7,
        val: 0.0,
        test: 0.3,
    };

    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let ratios = SplitRatios { train, val, test };
        ratios.validate()?;
        Ok(ratios)
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }

    pub fn validate(&self) -> Result<()> {
        let parts = self.as_array();
        if parts.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(DataError::InvalidRatios(format!(
                "ratios must be finite and non-negative, got {parts:?}"
            )));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DataError::InvalidRatios(format!(
                "ratios must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }

    fn active_splits(&self) -> usize {
        self.as_array().iter().filter(|r| **r > 0.0).count()
    }
}

impl FromStr for SplitRatios {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| DataError::InvalidRatios(format!("{s:?}: {e}")))?;
        match parts.as_slice() {
            [a, b, c] => SplitRatios::new(*a, *b, *c),
            _ => Err(DataError::InvalidRatios(format!(
                "expected three comma-separated ratios, got {s:?}"
            ))),
        }
    }
}

/// Per-class record counts for each split.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SplitCounts {
    pub per_class: BTreeMap<Label, [usize; 3]>,
}

impl SplitCounts {
    fn add(&mut self, label: Label, split: Split) {
        self.per_class.entry(label).or_insert([0; 3])[split.index()] += 1;
    }

    pub fn get(&self, label: Label, split: Split) -> usize {
        self.per_class.get(&label).map(|c| c[split.index()]).unwrap_or(0)
    }

    pub fn class_total(&self, label: Label) -> usize {
        self.per_class.get(&label).map(|c| c.iter().sum()).unwrap_or(0)
    }

    pub fn split_total(&self, split: Split) -> usize {
        self.per_class.values().map(|c| c[split.index()]).sum()
    }

    pub fn total(&self) -> usize {
        self.per_class.values().flat_map(|c| c.iter()).sum()
    }

    /// Renders the counts as a class-by-split table with totals.
    pub fn to_table(&self) -> String {
        let mut out = String::from("split\tcovid19\tother_pneumonia\tnormal\ttotal\n");
        for split in Split::ALL {
            out.push_str(split.as_str());
            for label in Label::ALL {
                out.push_str(&format!("\t{}", self.get(label, split)));
            }
            out.push_str(&format!("\t{}\n", self.split_total(split)));
        }
        out.push_str("total");
        for label in Label::ALL {
            out.push_str(&format!("\t{}", self.class_total(label)));
        }
        out.push_str(&format!("\t{}\n", self.total()));
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SplitAssignment {
    pub counts: SplitCounts,
    pub assignments: BTreeMap<String, Split>,
}

impl SplitAssignment {
    fn assign(&mut self, record: &ImageRecord, split: Split) {
        self.assignments.insert(record.image_id.clone(), split);
        self.counts.add(record.label, split);
    }
}

/// Largest-remainder apportionment of `n` items over the ratios; every
/// count is within one of its exact quota.
fn apportion(n: usize, ratios: &SplitRatios) -> [usize; 3] {
    let quotas = ratios.as_array().map(|r| r * n as f64);
    let mut counts = quotas.map(|q| q.floor() as usize);
    let mut remaining = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).filter(|&i| quotas[i] > 0.0).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for i in order {
        if remaining == 0 {
            break;
        }
        counts[i] += 1;
        remaining -= 1;
    }
    counts
}

fn class_rng(seed: u64, label: Label) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(label.index() as u64 + 1);
    rng
}

/// Assigns every record to a split, stratified by class.
///
/// Without patient grouping each class is apportioned to within one record of
/// its quota. With grouping, whole patients are assigned (to the class they
/// contribute most images to), so a class may deviate from its quota by up to
/// one patient's worth of images but no patient spans two splits.
pub fn stratified_split(
    records: &[ImageRecord],
    ratios: SplitRatios,
    seed: u64,
    group_by_patient: bool,
) -> Result<SplitAssignment> {
    ratios.validate()?;
    let requested = ratios.active_splits();
    let mut assignment = SplitAssignment::default();

    if !group_by_patient {
        for label in Label::ALL {
            let mut members: Vec<&ImageRecord> =
                records.iter().filter(|r| r.label == label).collect();
            if members.is_empty() {
                continue;
            }
            if members.len() < requested {
                return Err(DataError::InsufficientRecords {
                    label,
                    available: members.len(),
                    requested,
                });
            }
            members.sort_by(|a, b| a.image_id.cmp(&b.image_id));
            members.shuffle(&mut class_rng(seed, label));
            let counts = apportion(members.len(), &ratios);
            let mut it = members.into_iter();
            for split in Split::ALL {
                for record in it.by_ref().take(counts[split.index()]) {
                    assignment.assign(record, split);
                }
            }
        }
        return Ok(assignment);
    }

    // patient -> member records, in deterministic order
    let mut patients: BTreeMap<&str, Vec<&ImageRecord>> = BTreeMap::new();
    for record in records {
        patients.entry(record.patient_id.as_str()).or_default().push(record);
    }
    let primary = |members: &[&ImageRecord]| -> Label {
        let mut tally = [0usize; 3];
        for m in members {
            tally[m.label.index()] += 1;
        }
        let best = (0..3).max_by(|&a, &b| tally[a].cmp(&tally[b]).then(b.cmp(&a))).unwrap();
        Label::from_index(best).unwrap()
    };
    for label in Label::ALL {
        let mut group: Vec<(&str, &Vec<&ImageRecord>)> = patients
            .iter()
            .filter(|(_, members)| primary(members) == label)
            .map(|(id, members)| (*id, members))
            .collect();
        if group.is_empty() {
            continue;
        }
        if group.len() < requested {
            return Err(DataError::InsufficientRecords {
                label,
                available: group.len(),
                requested,
            });
        }
        group.shuffle(&mut class_rng(seed, label));
        let total: usize = group.iter().map(|(_, m)| m.len()).sum();
        let targets = ratios.as_array().map(|r| r * total as f64);
        let mut filled = [0usize; 3];
        let mut patients_in = [0usize; 3];
        let remaining_patients = group.len();
        for (k, (_, members)) in group.iter().enumerate() {
            let left = remaining_patients - k;
            let empty_active: Vec<usize> = (0..3)
                .filter(|&i| targets[i] > 0.0 && patients_in[i] == 0)
                .collect();
            // keep enough patients back so every active split gets one
            let choice = if !empty_active.is_empty() && left <= empty_active.len() {
                empty_active[0]
            } else {
                (0..3)
                    .filter(|&i| targets[i] > 0.0)
                    .max_by(|&a, &b| {
                        let da = targets[a] - filled[a] as f64;
                        let db = targets[b] - filled[b] as f64;
                        da.partial_cmp(&db).unwrap().then(b.cmp(&a))
                    })
                    .unwrap()
            };
            filled[choice] += members.len();
            patients_in[choice] += 1;
            for record in members.iter() {
                assignment.assign(record, Split::ALL[choice]);
            }
        }
    }
    Ok(assignment)
}

/// Splits the COVID-labelled CXR collection 70/30 into train and test, then
/// appends the extra other-pneumonia images to the test split only.
pub fn cxr_protocol_split(
    labelled: &[ImageRecord],
    extra_pneumonia: &[ImageRecord],
    seed: u64,
    group_by_patient: bool,
) -> Result<SplitAssignment> {
    let mut assignment =
        stratified_split(labelled, SplitRatios::CXR_PROTOCOL, seed, group_by_patient)?;
    for record in extra_pneumonia {
        if assignment.assignments.contains_key(&record.image_id) {
            return Err(DataError::DuplicateId(record.image_id.clone()));
        }
        assignment.assign(record, Split::Test);
    }
    Ok(assignment)
}

/// Distinct patients per split, for leakage reports.
pub fn patients_per_split(manifest: &DatasetManifest) -> BTreeMap<Split, BTreeSet<String>> {
    let mut out: BTreeMap<Split, BTreeSet<String>> = BTreeMap::new();
    for record in &manifest.records {
        if let Some(split) = manifest.split_of(&record.image_id) {
            out.entry(split).or_default().insert(record.patient_id.clone());
        }
    }
    out
}
