//! Race-balanced face subsets from age/gender/race-coded filenames,
//! kinship benchmark pair lists and mirror padding of tight crops.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ragan_tensor::{kernels, Scalar};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{AgeValue, ImageTensor, RaceLabel, IMAGE_SIZE};
use crate::error::{RaganError, Result};
use crate::imageio::load_face;
use crate::training::SampleSource;
use crate::weights::write_atomic;

/// Integer fields of `<age>_<gender>_<race>_<stamp>.<ext>`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SourceLabel {
    pub age: u32,
    pub gender: u8,
    pub race_code: u8,
}

/// Race codes used by the source filenames: 0 White, 1 Black, 2 Asian,
/// 3 Indian, 4 Others. Code 4 has no label and is excluded.
pub const RACE_CODES: [(u8, Option<RaceLabel>); 5] = [
    (0, Some(RaceLabel::White)),
    (1, Some(RaceLabel::Black)),
    (2, Some(RaceLabel::Asian)),
    (3, Some(RaceLabel::Indian)),
    (4, None),
];

pub fn race_from_code(code: u8) -> Option<RaceLabel> {
    RACE_CODES
        .iter()
        .find(|(c, _)| *c == code)
        .and_then(|(_, r)| *r)
}

pub fn parse_source_filename(name: &str) -> Result<SourceLabel> {
    let bad = |token: &str| RaganError::FilenameParse {
        name: name.to_string(),
        token: token.to_string(),
    };
    let mut parts = name.splitn(4, '_');
    let (age, gender, race, rest) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
        (Some(a), Some(g), Some(r), Some(s)) => (a, g, r, s),
        _ => return Err(bad(name)),
    };
    let age: u32 = age
        .parse()
        .ok()
        .filter(|a| (1..=120).contains(a))
        .ok_or_else(|| bad(age))?;
    let gender_code: u8 = gender
        .parse()
        .ok()
        .filter(|g| *g <= 1)
        .ok_or_else(|| bad(gender))?;
    let race_code: u8 = race
        .parse()
        .ok()
        .filter(|r| *r <= 4)
        .ok_or_else(|| bad(race))?;
    match rest.split_once('.') {
        Some((stamp, ext)) if !stamp.is_empty() && !ext.is_empty() => {}
        _ => return Err(bad(rest)),
    }
    Ok(SourceLabel {
        age,
        gender: gender_code,
        race_code,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledFace {
    /// Relative to the source directory.
    pub path: PathBuf,
    pub age: AgeValue,
    pub race: RaceLabel,
    pub split: Split,
}

/// Per-race (train, test) counts of the full balanced subset.
pub const SPLIT_TARGETS: [(RaceLabel, usize, usize); 4] = [
    (RaceLabel::Indian, 1284, 316),
    (RaceLabel::White, 1235, 295),
    (RaceLabel::Asian, 1138, 274),
    (RaceLabel::Black, 1170, 258),
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BuildOptions {
    /// Fail instead of downscaling when a race has fewer files than its target.
    pub strict: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaceCounts {
    pub available: usize,
    pub train: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub scanned: usize,
    pub unlabeled_race: usize,
    pub skipped: Vec<String>,
    /// Fraction of the full per-race targets that was drawn.
    pub scale: f64,
    pub races: BTreeMap<String, RaceCounts>,
    /// Selected faces per year of age, train and test together.
    pub age_histogram: BTreeMap<u32, usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BalancedDataset {
    pub faces: Vec<LabeledFace>,
    pub meta: DatasetMeta,
}

const IMAGE_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.iter().any(|x| x.eq_ignore_ascii_case(e)))
}

/// Draws the per-race train/test subset from a flat directory of coded
/// filenames. With fewer files than the targets, every race is scaled by
/// the same factor so the race balance is kept.
pub fn build_balanced_dataset(
    source_dir: &Path,
    seed: u64,
    opts: BuildOptions,
) -> Result<BalancedDataset> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(source_dir).map_err(|e| RaganError::io(source_dir, e))? {
        let entry = entry.map_err(|e| RaganError::io(source_dir, e))?;
        let path = entry.path();
        if path.is_file() && is_image(&path) {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                names.push(name.to_string());
            }
        }
    }
    names.sort();

    let mut by_race: BTreeMap<RaceLabel, Vec<(String, u32)>> = BTreeMap::new();
    let mut skipped = Vec::new();
    let mut unlabeled_race = 0;
    for name in &names {
        match parse_source_filename(name) {
            Ok(label) => match race_from_code(label.race_code) {
                Some(race) => by_race
                    .entry(race)
                    .or_default()
                    .push((name.clone(), label.age)),
                None => unlabeled_race += 1,
            },
            Err(_) => skipped.push(name.clone()),
        }
    }

    let available = |r: RaceLabel| by_race.get(&r).map_or(0, Vec::len);
    let short: Vec<String> = SPLIT_TARGETS
        .iter()
        .filter(|(r, tr, te)| available(*r) < tr + te)
        .map(|(r, tr, te)| format!("{r}: need {}, have {}", tr + te, available(*r)))
        .collect();
    if !short.is_empty() && opts.strict {
        return Err(RaganError::Shortfall(short.join("; ")));
    }
    let scale = SPLIT_TARGETS
        .iter()
        .map(|(r, tr, te)| available(*r) as f64 / (tr + te) as f64)
        .fold(1.0f64, f64::min);
    if scale == 0.0 {
        return Err(RaganError::Shortfall(short.join("; ")));
    }

    let mut faces = Vec::new();
    let mut races = BTreeMap::new();
    let mut age_histogram = BTreeMap::new();
    for (k, &(race, tr, te)) in SPLIT_TARGETS.iter().enumerate() {
        let (n_train, n_test) = scaled_split(tr, te, scale);
        let mut pool = by_race.remove(&race).unwrap_or_default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64 + 1);
        pool.shuffle(&mut rng);
        for (i, (name, age)) in pool.iter().take(n_train + n_test).enumerate() {
            let split = if i < n_train {
                Split::Train
            } else {
                Split::Test
            };
            *age_histogram.entry(*age).or_insert(0) += 1;
            faces.push(LabeledFace {
                path: PathBuf::from(name),
                age: AgeValue::new(*age as f64)?,
                race,
                split,
            });
        }
        races.insert(
            race.name().to_string(),
            RaceCounts {
                available: pool.len(),
                train: n_train,
                test: n_test,
            },
        );
    }
    faces.sort_by(|a, b| (a.split, a.race, &a.path).cmp(&(b.split, b.race, &b.path)));
    Ok(BalancedDataset {
        faces,
        meta: DatasetMeta {
            seed,
            scanned: names.len(),
            unlabeled_race,
            skipped,
            scale,
            races,
            age_histogram,
        },
    })
}

/// `(train, test)` for one race at `scale` of its full targets.
pub fn scaled_split(train: usize, test: usize, scale: f64) -> (usize, usize) {
    let full = train + test;
    if scale >= 1.0 {
        return (train, test);
    }
    let n = (scale * full as f64 + 1e-9).floor() as usize;
    let n_train = (n as f64 * train as f64 / full as f64).round() as usize;
    (n_train, n - n_train)
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const META_FILE: &str = "manifest.meta.json";

/// Writes `manifest.jsonl` (one face per line) and `manifest.meta.json`.
pub fn write_manifest(out_dir: &Path, data: &BalancedDataset) -> Result<()> {
    let mut lines = String::new();
    for f in &data.faces {
        lines.push_str(
            &serde_json::to_string(f).map_err(|e| RaganError::Validation(e.to_string()))?,
        );
        lines.push('\n');
    }
    write_atomic(&out_dir.join(MANIFEST_FILE), lines.as_bytes())?;
    let meta =
        serde_json::to_vec_pretty(&data.meta).map_err(|e| RaganError::Validation(e.to_string()))?;
    write_atomic(&out_dir.join(META_FILE), &meta)
}

pub fn read_manifest(path: &Path) -> Result<Vec<LabeledFace>> {
    let text = std::fs::read_to_string(path).map_err(|e| RaganError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                RaganError::Validation(format!("{} line {}: {e}", path.display(), i + 1))
            })
        })
        .collect()
}

/// Manifest faces of one split, decoded on demand from `root`.
#[derive(Clone, Debug)]
pub struct FaceSource {
    pub root: PathBuf,
    pub faces: Vec<LabeledFace>,
}

impl FaceSource {
    pub fn new(root: &Path, faces: &[LabeledFace], split: Split) -> Self {
        Self {
            root: root.to_path_buf(),
            faces: faces.iter().filter(|f| f.split == split).cloned().collect(),
        }
    }

    pub fn path(&self, index: usize) -> PathBuf {
        self.root.join(&self.faces[index].path)
    }
}

impl<T: Scalar> SampleSource<T> for FaceSource {
    fn len(&self) -> usize {
        self.faces.len()
    }

    fn get(&self, index: usize) -> Result<(ImageTensor<T>, AgeValue)> {
        Ok((load_face(&self.path(index))?, self.faces[index].age))
    }
}

/// Mirror index on `0..n` with the edge sample repeated at each reflection.
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period) as usize;
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

/// The crop centred on a square canvas of side `s + 2·ceil(s/2)` (`s` the
/// longer side), every border filled by reflecting the crop about its edges.
pub fn mirror_canvas<T: Scalar>(crop: &ImageTensor<T>) -> Result<ImageTensor<T>> {
    let (c, h, w) = (crop.channels(), crop.height(), crop.width());
    if c != 3 {
        return Err(RaganError::Validation(format!(
            "mirror padding needs 3 channels, got {c}"
        )));
    }
    if h == IMAGE_SIZE && w == IMAGE_SIZE {
        return Err(RaganError::Validation(
            "image is already 256×256; refusing to pad it again".into(),
        ));
    }
    let (long, short) = (h.max(w), h.min(w));
    if long > 4 * short {
        return Err(RaganError::Validation(format!(
            "aspect ratio of {h}×{w} exceeds 4:1"
        )));
    }
    let side = long + 2 * long.div_ceil(2);
    let (top, left) = ((side - h) / 2, (side - w) / 2);
    let mut data = Vec::with_capacity(c * side * side);
    for ch in 0..c {
        let plane = crop.plane(ch);
        for y in 0..side {
            let sy = reflect(y as isize - top as isize, h);
            for x in 0..side {
                data.push(plane[sy * w + reflect(x as isize - left as isize, w)]);
            }
        }
    }
    ImageTensor::new(c, side, side, data)
}

/// [`mirror_canvas`] resized bilinearly to 256×256.
pub fn mirror_pad<T: Scalar>(crop: &ImageTensor<T>) -> Result<ImageTensor<T>> {
    let canvas = mirror_canvas(crop)?;
    let s = canvas.height();
    let data = kernels::resize_bilinear(
        canvas.data(),
        canvas.channels(),
        s,
        s,
        IMAGE_SIZE,
        IMAGE_SIZE,
    );
    ImageTensor::new(canvas.channels(), IMAGE_SIZE, IMAGE_SIZE, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum KinDataset {
    #[serde(rename = "KinFaceW-I")]
    KinFaceWI,
    #[serde(rename = "KinFaceW-II")]
    KinFaceWII,
}

impl KinDataset {
    pub fn name(self) -> &'static str {
        match self {
            Self::KinFaceWI => "KinFaceW-I",
            Self::KinFaceWII => "KinFaceW-II",
        }
    }

    /// Positive pairs listed per relation.
    pub fn expected_pairs(self, relation: Relation) -> usize {
        match (self, relation) {
            (Self::KinFaceWI, Relation::FS) => 156,
            (Self::KinFaceWI, Relation::FD) => 134,
            (Self::KinFaceWI, Relation::MS) => 116,
            (Self::KinFaceWI, Relation::MD) => 127,
            (Self::KinFaceWII, _) => 250,
        }
    }
}

impl fmt::Display for KinDataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KinDataset {
    type Err = RaganError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['_', ' '], "-").as_str() {
            "kinfacew-i" | "kinfacew1" | "i" => Ok(Self::KinFaceWI),
            "kinfacew-ii" | "kinfacew2" | "ii" => Ok(Self::KinFaceWII),
            _ => Err(RaganError::Validation(format!(
                "unknown kinship dataset `{s}`"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Relation {
    FS,
    FD,
    MS,
    MD,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::FS, Relation::FD, Relation::MS, Relation::MD];

    pub fn code(self) -> &'static str {
        match self {
            Self::FS => "fs",
            Self::FD => "fd",
            Self::MS => "ms",
            Self::MD => "md",
        }
    }

    /// Image directory under `images/`.
    pub fn dir(self) -> &'static str {
        match self {
            Self::FS => "father-son",
            Self::FD => "father-dau",
            Self::MS => "mother-son",
            Self::MD => "mother-dau",
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.code().to_ascii_uppercase())
    }
}

impl FromStr for Relation {
    type Err = RaganError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.code().eq_ignore_ascii_case(s))
            .ok_or_else(|| RaganError::Validation(format!("unknown relation `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KinPair {
    pub parent: PathBuf,
    pub child: PathBuf,
    pub relation: Relation,
    pub kin: bool,
    pub fold: u8,
}

pub const FOLDS: u8 = 5;

#[derive(Deserialize)]
struct PairRow {
    fold: u8,
    kin: u8,
    parent: String,
    child: String,
}

/// Per-relation pair list path, `meta_data/<code>_pairs.csv`.
pub fn pair_list_path(root: &Path, relation: Relation) -> PathBuf {
    root.join("meta_data")
        .join(format!("{}_pairs.csv", relation.code()))
}

/// Reads the four fold lists (columns `fold,kin,parent,child`, image names
/// relative to `images/<relation dir>`) and checks them against the
/// benchmark's published positive-pair counts.
pub fn load_kin_pairs(root: &Path, dataset: KinDataset) -> Result<Vec<KinPair>> {
    let mut pairs = Vec::new();
    for relation in Relation::ALL {
        let list = pair_list_path(root, relation);
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(&list)
            .map_err(|e| RaganError::Integrity(format!("{}: {e}", list.display())))?;
        let image_dir = root.join("images").join(relation.dir());
        let mut positives = 0;
        for (i, row) in reader.deserialize::<PairRow>().enumerate() {
            let row = row.map_err(|e| {
                RaganError::Integrity(format!("{} row {}: {e}", list.display(), i + 1))
            })?;
            if !(1..=FOLDS).contains(&row.fold) || row.kin > 1 {
                return Err(RaganError::Integrity(format!(
                    "{} row {}: fold {} / kin {} out of range",
                    list.display(),
                    i + 1,
                    row.fold,
                    row.kin
                )));
            }
            let (parent, child) = (image_dir.join(&row.parent), image_dir.join(&row.child));
            for p in [&parent, &child] {
                if !p.is_file() {
                    return Err(RaganError::Integrity(format!(
                        "{relation}: missing image {}",
                        p.display()
                    )));
                }
            }
            positives += usize::from(row.kin == 1);
            pairs.push(KinPair {
                parent,
                child,
                relation,
                kin: row.kin == 1,
                fold: row.fold,
            });
        }
        let expected = dataset.expected_pairs(relation);
        if positives != expected {
            return Err(RaganError::Integrity(format!(
                "{dataset} {relation}: {positives} kin pairs listed, expected {expected}"
            )));
        }
    }
    Ok(pairs)
}

/// Writes a benchmark-shaped tree of flat-colour crops: partners of a kin
/// pair share a colour, negatives pair a parent with the next family's child.
/// Used by tests and demos in place of the real images.
pub fn synthesize_kinface(root: &Path, dataset: KinDataset, side: u32) -> Result<()> {
    for relation in Relation::ALL {
        let n = dataset.expected_pairs(relation);
        let dir = root.join("images").join(relation.dir());
        std::fs::create_dir_all(&dir).map_err(|e| RaganError::io(&dir, e))?;
        let name = |i: usize, who: u8| format!("{}_{:03}_{who}.png", relation.code(), i + 1);
        for i in 0..n {
            let base = family_colour(relation, i);
            for who in [1u8, 2] {
                let img = image::RgbImage::from_fn(side, side, |x, y| {
                    let tint = if who == 1 { (x + y) % 2 } else { (x * y) % 3 } as u8;
                    image::Rgb([base[0] + tint, base[1], base[2] + tint])
                });
                let path = dir.join(name(i, who));
                img.save(&path)
                    .map_err(|e| RaganError::Image(format!("{}: {e}", path.display())))?;
            }
        }
        let mut csv = String::from("fold,kin,parent,child\n");
        for kin in [1, 0] {
            for i in 0..n {
                let fold = i * FOLDS as usize / n + 1;
                let child = if kin == 1 { i } else { (i + 1) % n };
                csv.push_str(&format!("{fold},{kin},{},{}\n", name(i, 1), name(child, 2)));
            }
        }
        write_atomic(&pair_list_path(root, relation), csv.as_bytes())?;
    }
    Ok(())
}

/// Distinct base colour per (relation, family), leaving headroom for tints.
pub fn family_colour(relation: Relation, family: usize) -> [u8; 3] {
    let k = relation as usize * 251 + family;
    [
        (k % 7 * 36) as u8,
        (k / 7 % 7 * 36) as u8,
        (k / 49 % 25 * 10) as u8,
    ]
}
