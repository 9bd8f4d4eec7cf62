//! Study identity, filename parsing and LE/DES pairing.
//!
//! Dataset files follow `P<patient>_<L|R>_<DM|CM>_<CC|MLO>[.ext]`, where `DM`
//! marks the low-energy image and `CM` the dual-energy subtracted one.
//! Tokens are matched case-insensitively and any extension is ignored.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("expected 4 underscore-separated tokens, found {found} in {name:?}")]
    TokenCount { name: String, found: usize },
    #[error("invalid patient token {0:?}")]
    Patient(String),
    #[error("unknown side token {0:?}")]
    Side(String),
    #[error("unknown energy token {0:?}")]
    Energy(String),
    #[error("unknown view token {0:?}")]
    View(String),
    #[error("unknown label {0:?}")]
    Label(String),
    #[error("center_x and center_y must both be set or both be empty")]
    Center,
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("duplicate study keys: {}", .0.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(", "))]
    Duplicate(Vec<StudyKey>),
    #[error("empty path for {0}")]
    EmptyPath(StudyKey),
    #[error("manifest row {row}: {source}")]
    Row {
        row: usize,
        #[source]
        source: ParseError,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Energy {
    /// `DM`: low-energy image.
    LowEnergy,
    /// `CM`: dual-energy subtracted image.
    Subtracted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum View {
    CC,
    MLO,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    NonMalignant,
    Malignant,
    Unlabeled,
}

impl Side {
    pub const ALL: [Side; 2] = [Side::Left, Side::Right];
    pub fn token(self) -> &'static str {
        match self {
            Side::Left => "L",
            Side::Right => "R",
        }
    }
}

impl Energy {
    pub const ALL: [Energy; 2] = [Energy::LowEnergy, Energy::Subtracted];
    pub fn token(self) -> &'static str {
        match self {
            Energy::LowEnergy => "DM",
            Energy::Subtracted => "CM",
        }
    }
}

impl View {
    pub const ALL: [View; 2] = [View::CC, View::MLO];
    pub fn token(self) -> &'static str {
        match self {
            View::CC => "CC",
            View::MLO => "MLO",
        }
    }
}

impl Label {
    pub fn token(self) -> &'static str {
        match self {
            Label::NonMalignant => "nonmalignant",
            Label::Malignant => "malignant",
            Label::Unlabeled => "unlabeled",
        }
    }

    /// Binary class index: 1 = malignant (positive), 0 = non-malignant.
    pub fn class_index(self) -> Option<u8> {
        match self {
            Label::NonMalignant => Some(0),
            Label::Malignant => Some(1),
            Label::Unlabeled => None,
        }
    }
}

impl FromStr for Side {
    type Err = ParseError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "L" => Ok(Side::Left),
            "R" => Ok(Side::Right),
            _ => Err(ParseError::Side(s.to_string())),
        }
    }
}

impl FromStr for Energy {
    type Err = ParseError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "DM" => Ok(Energy::LowEnergy),
            "CM" => Ok(Energy::Subtracted),
            _ => Err(ParseError::Energy(s.to_string())),
        }
    }
}

impl FromStr for View {
    type Err = ParseError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "CC" => Ok(View::CC),
            "MLO" => Ok(View::MLO),
            _ => Err(ParseError::View(s.to_string())),
        }
    }
}

impl FromStr for Label {
    type Err = ParseError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "nonmalignant" => Ok(Label::NonMalignant),
            "malignant" => Ok(Label::Malignant),
            "unlabeled" => Ok(Label::Unlabeled),
            _ => Err(ParseError::Label(s.to_string())),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// Identity of one image: patient, breast side, energy and view.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StudyKey {
    pub patient_id: u32,
    pub side: Side,
    pub energy: Energy,
    pub view: View,
}

impl StudyKey {
    /// Canonical file stem, e.g. `P1_L_DM_MLO`.
    pub fn render(&self) -> String {
        format!(
            "P{}_{}_{}_{}",
            self.patient_id,
            self.side.token(),
            self.energy.token(),
            self.view.token()
        )
    }

    /// The key of the other member of the LE/DES pair.
    pub fn counterpart(&self) -> StudyKey {
        let energy = match self.energy {
            Energy::LowEnergy => Energy::Subtracted,
            Energy::Subtracted => Energy::LowEnergy,
        };
        StudyKey { energy, ..*self }
    }

    /// Stem without the energy token, e.g. `P1_L_MLO`.
    pub fn breast_view_stem(&self) -> String {
        format!("P{}_{}_{}", self.patient_id, self.side.token(), self.view.token())
    }
}

impl fmt::Display for StudyKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// Parses a dataset filename (with or without directory and extension).
pub fn parse_filename(name: &str) -> Result<StudyKey, ParseError> {
    let base = Path::new(name)
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or(name);
    let stem = match base.rfind('.') {
        Some(i) if i > 0 => &base[..i],
        _ => base,
    };
    let tokens: Vec<&str> = stem.split('_').collect();
    if tokens.len() != 4 {
        return Err(ParseError::TokenCount {
            name: name.to_string(),
            found: tokens.len(),
        });
    }
    let p = tokens[0];
    let digits = p
        .strip_prefix('P')
        .or_else(|| p.strip_prefix('p'))
        .ok_or_else(|| ParseError::Patient(p.to_string()))?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return Err(ParseError::Patient(p.to_string()));
    }
    let patient_id: u32 = digits
        .parse()
        .map_err(|_| ParseError::Patient(p.to_string()))?;
    if patient_id == 0 {
        return Err(ParseError::Patient(p.to_string()));
    }
    Ok(StudyKey {
        patient_id,
        side: tokens[1].parse()?,
        energy: tokens[2].parse()?,
        view: tokens[3].parse()?,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub key: StudyKey,
    pub path: PathBuf,
    pub label: Label,
}

/// A low-energy image together with its subtracted counterpart.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairRecord {
    le: StudyRecord,
    des: StudyRecord,
}

impl PairRecord {
    /// Panics if the records do not describe the same patient, side and view
    /// or if the energies are not LE and DES respectively.
    pub fn new(le: StudyRecord, des: StudyRecord) -> Self {
        assert_eq!(le.key.energy, Energy::LowEnergy, "first record must be LE");
        assert_eq!(des.key.energy, Energy::Subtracted, "second record must be DES");
        assert_eq!(le.key.patient_id, des.key.patient_id, "patient mismatch in pair");
        assert_eq!(le.key.side, des.key.side, "side mismatch in pair");
        assert_eq!(le.key.view, des.key.view, "view mismatch in pair");
        Self { le, des }
    }

    pub fn le(&self) -> &StudyRecord {
        &self.le
    }

    pub fn des(&self) -> &StudyRecord {
        &self.des
    }

    /// Label of the pair: taken from whichever record carries one.
    pub fn label(&self) -> Label {
        match (self.le.label, self.des.label) {
            (Label::Unlabeled, l) => l,
            (l, _) => l,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct PairManifest {
    pub pairs: Vec<PairRecord>,
    pub unmatched: Vec<StudyRecord>,
}

/// Matches every LE record with the DES record sharing its patient, side and
/// view. Output pairs are ordered by key; unmatched records keep input order.
pub fn build_pair_manifest(records: &[StudyRecord]) -> Result<PairManifest, ManifestError> {
    let mut by_key: BTreeMap<StudyKey, usize> = BTreeMap::new();
    let mut dups = Vec::new();
    for (i, r) in records.iter().enumerate() {
        if r.path.as_os_str().is_empty() {
            return Err(ManifestError::EmptyPath(r.key));
        }
        if by_key.insert(r.key, i).is_some() && !dups.contains(&r.key) {
            dups.push(r.key);
        }
    }
    if !dups.is_empty() {
        dups.sort();
        return Err(ManifestError::Duplicate(dups));
    }
    let mut paired = vec![false; records.len()];
    let mut pairs = Vec::new();
    for (key, &i) in &by_key {
        if key.energy != Energy::LowEnergy {
            continue;
        }
        if let Some(&j) = by_key.get(&key.counterpart()) {
            paired[i] = true;
            paired[j] = true;
            pairs.push(PairRecord::new(records[i].clone(), records[j].clone()));
        }
    }
    let unmatched = records
        .iter()
        .zip(&paired)
        .filter(|(_, &p)| !p)
        .map(|(r, _)| r.clone())
        .collect();
    Ok(PairManifest { pairs, unmatched })
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    path: String,
    patient_id: u32,
    side: String,
    view: String,
    energy: String,
    label: String,
}

/// Writes records as `path,patient_id,side,view,energy,label`.
pub fn write_manifest_csv<W: Write>(records: &[StudyRecord], out: W) -> Result<(), ManifestError> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(ManifestRow {
            path: r.path.display().to_string(),
            patient_id: r.key.patient_id,
            side: r.key.side.token().to_string(),
            view: r.key.view.token().to_string(),
            energy: r.key.energy.token().to_string(),
            label: r.label.token().to_string(),
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest_csv<R: Read>(input: R) -> Result<Vec<StudyRecord>, ManifestError> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<ManifestRow>().enumerate() {
        let row = row?;
        let wrap = |source| ManifestError::Row { row: i + 1, source };
        if row.patient_id == 0 {
            return Err(wrap(ParseError::Patient("0".into())));
        }
        let key = StudyKey {
            patient_id: row.patient_id,
            side: row.side.parse().map_err(wrap)?,
            energy: row.energy.parse().map_err(wrap)?,
            view: row.view.parse().map_err(wrap)?,
        };
        if row.path.is_empty() {
            return Err(ManifestError::EmptyPath(key));
        }
        out.push(StudyRecord {
            key,
            path: PathBuf::from(row.path),
            label: row.label.parse().map_err(wrap)?,
        });
    }
    Ok(out)
}

/// One row of the annotations file `patient_id,side,view,center_x,center_y,label`.
/// Rows with empty centre fields label a whole view that has no lesion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub patient_id: u32,
    pub side: Side,
    pub view: View,
    pub center: Option<(usize, usize)>,
    pub label: Label,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRow {
    patient_id: u32,
    side: String,
    view: String,
    center_x: Option<usize>,
    center_y: Option<usize>,
    label: String,
}

pub fn read_annotations_csv<R: Read>(input: R) -> Result<Vec<Annotation>, ManifestError> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<AnnotationRow>().enumerate() {
        let row = row?;
        let wrap = |source| ManifestError::Row { row: i + 1, source };
        out.push(Annotation {
            patient_id: row.patient_id,
            side: row.side.parse().map_err(wrap)?,
            view: row.view.parse().map_err(wrap)?,
            center: match (row.center_x, row.center_y) {
                (Some(x), Some(y)) => Some((x, y)),
                (None, None) => None,
                _ => return Err(wrap(ParseError::Center)),
            },
            label: row.label.parse().map_err(wrap)?,
        });
    }
    Ok(out)
}

pub fn write_annotations_csv<W: Write>(rows: &[Annotation], out: W) -> Result<(), ManifestError> {
    let mut w = csv::Writer::from_writer(out);
    for a in rows {
        w.serialize(AnnotationRow {
            patient_id: a.patient_id,
            side: a.side.token().to_string(),
            view: a.view.token().to_string(),
            center_x: a.center.map(|c| c.0),
            center_y: a.center.map(|c| c.1),
            label: a.label.token().to_string(),
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Per-breast-view label derived from annotations: malignant wins over
/// non-malignant; views without annotations stay unlabeled.
pub fn labels_from_annotations(rows: &[Annotation]) -> HashMap<(u32, Side, View), Label> {
    let mut out: HashMap<(u32, Side, View), Label> = HashMap::new();
    for a in rows {
        let slot = out
            .entry((a.patient_id, a.side, a.view))
            .or_insert(Label::Unlabeled);
        *slot = match (*slot, a.label) {
            (Label::Malignant, _) | (_, Label::Malignant) => Label::Malignant,
            (Label::NonMalignant, _) | (_, Label::NonMalignant) => Label::NonMalignant,
            _ => Label::Unlabeled,
        };
    }
    out
}
