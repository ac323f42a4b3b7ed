use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// First line of every manifest file.
pub const MANIFEST_VERSION_LINE: &str = "# lmfd-manifest v1";

const HEADER: [&str; 10] = [
    "dataset_id",
    "video_id",
    "frame_path",
    "label",
    "pai",
    "split",
    "crop_x",
    "crop_y",
    "crop_w",
    "crop_h",
];

/// PAI value used by bona fide rows.
pub const NO_PAI: &str = "none";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    BonaFide,
    Attack,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::BonaFide => "bona_fide",
            Label::Attack => "attack",
        }
    }

    /// Binary target: 1 for bona fide, 0 for attack (scores are "higher = more bona fide").
    pub fn target(self) -> f64 {
        match self {
            Label::BonaFide => 1.0,
            Label::Attack => 0.0,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bona_fide" => Ok(Label::BonaFide),
            "attack" => Ok(Label::Attack),
            other => invalid(format!("unknown label {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
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
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => invalid(format!("unknown split {other:?}")),
        }
    }
}

/// Face crop in pixels, top-left corner plus size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CropBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl CropBox {
    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.w > 0
            && self.h > 0
            && u64::from(self.x) + u64::from(self.w) <= u64::from(width)
            && u64::from(self.y) + u64::from(self.h) <= u64::from(height)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SampleRecord {
    pub dataset_id: String,
    pub video_id: String,
    /// Relative paths resolve against the manifest's directory.
    pub frame_path: PathBuf,
    pub label: Label,
    /// Attack instrument, or `"none"` for bona fide.
    pub pai: String,
    pub split: Split,
    pub crop: Option<CropBox>,
}

impl SampleRecord {
    fn check(&self) -> std::result::Result<(), String> {
        if self.dataset_id.is_empty() || self.video_id.is_empty() {
            return Err("dataset_id and video_id must be non-empty".into());
        }
        if self.frame_path.as_os_str().is_empty() {
            return Err("frame_path must be non-empty".into());
        }
        match (self.label, self.pai == NO_PAI) {
            (Label::BonaFide, false) => Err(format!(
                "bona fide frame carries pai {:?}, expected \"none\"",
                self.pai
            )),
            (Label::Attack, true) => Err("attack frame carries pai \"none\"".into()),
            _ if self.pai.is_empty() => Err("pai must be non-empty".into()),
            _ => match self.crop {
                Some(c) if c.w == 0 || c.h == 0 => Err("crop box has zero size".into()),
                _ => Ok(()),
            },
        }
    }
}

/// A structural problem found in a manifest; `row` is the 0-based record index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestIssue {
    pub row: usize,
    pub message: String,
}

impl fmt::Display for ManifestIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "record {}: {}", self.row, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleManifest {
    pub records: Vec<SampleRecord>,
    /// Directory that relative frame paths are resolved against.
    pub base_dir: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    dataset_id: String,
    video_id: String,
    frame_path: String,
    label: String,
    pai: String,
    split: String,
    crop_x: Option<u32>,
    crop_y: Option<u32>,
    crop_w: Option<u32>,
    crop_h: Option<u32>,
}

impl Row {
    fn into_record(self) -> Result<SampleRecord> {
        let crop = match (self.crop_x, self.crop_y, self.crop_w, self.crop_h) {
            (Some(x), Some(y), Some(w), Some(h)) => Some(CropBox { x, y, w, h }),
            (None, None, None, None) => None,
            _ => return invalid("crop fields must be all present or all empty"),
        };
        Ok(SampleRecord {
            dataset_id: self.dataset_id,
            video_id: self.video_id,
            frame_path: PathBuf::from(self.frame_path),
            label: self.label.parse()?,
            pai: self.pai,
            split: self.split.parse()?,
            crop,
        })
    }

    fn from_record(r: &SampleRecord) -> Self {
        Self {
            dataset_id: r.dataset_id.clone(),
            video_id: r.video_id.clone(),
            frame_path: r.frame_path.to_string_lossy().replace('\\', "/"),
            label: r.label.as_str().into(),
            pai: r.pai.clone(),
            split: r.split.as_str().into(),
            crop_x: r.crop.map(|c| c.x),
            crop_y: r.crop.map(|c| c.y),
            crop_w: r.crop.map(|c| c.w),
            crop_h: r.crop.map(|c| c.h),
        }
    }
}

impl SampleManifest {
    pub fn new(records: Vec<SampleRecord>, base_dir: impl Into<PathBuf>) -> Self {
        Self {
            records,
            base_dir: base_dir.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Parses a manifest and checks its structural invariants.
    pub fn parse(reader: impl Read, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut reader = BufReader::new(reader);
        let mut first = String::new();
        reader
            .read_line(&mut first)
            .map_err(|e| Error::Validation(format!("cannot read manifest: {e}")))?;
        if first.trim_end() != MANIFEST_VERSION_LINE {
            return invalid(format!(
                "manifest must start with {MANIFEST_VERSION_LINE:?}, found {:?}",
                first.trim_end()
            ));
        }
        let mut csv = csv::ReaderBuilder::new().from_reader(reader);
        let header = csv.headers()?.clone();
        if header.iter().ne(HEADER.iter().copied()) {
            return invalid(format!(
                "manifest header must be {:?}, found {:?}",
                HEADER.join(","),
                header.iter().collect::<Vec<_>>().join(",")
            ));
        }
        let mut records = Vec::new();
        for (i, row) in csv.deserialize::<Row>().enumerate() {
            let record = row
                .map_err(Error::from)
                .and_then(Row::into_record)
                .map_err(|e| Error::Validation(format!("record {i}: {e}")))?;
            records.push(record);
        }
        let manifest = Self::new(records, base_dir);
        if let Some(issue) = manifest.structural_issues().into_iter().next() {
            return invalid(issue.to_string());
        }
        Ok(manifest)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(file, base)
    }

    pub fn write_to(&self, writer: impl Write) -> Result<()> {
        let mut writer = writer;
        writeln!(writer, "{MANIFEST_VERSION_LINE}")
            .map_err(|e| Error::Validation(format!("cannot write manifest: {e}")))?;
        // The header row comes from `Row`'s field names, which match HEADER.
        let mut csv = csv::Writer::from_writer(writer);
        if self.records.is_empty() {
            csv.write_record(HEADER)?;
        }
        for r in &self.records {
            csv.serialize(Row::from_record(r))?;
        }
        csv.flush()
            .map_err(|e| Error::Validation(format!("cannot write manifest: {e}")))?;
        Ok(())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn resolve(&self, record: &SampleRecord) -> PathBuf {
        if record.frame_path.is_absolute() {
            record.frame_path.clone()
        } else {
            self.base_dir.join(&record.frame_path)
        }
    }

    /// Per-record invariants plus video consistency (one label, PAI, split
    /// and dataset per video).
    pub fn structural_issues(&self) -> Vec<ManifestIssue> {
        let mut issues = Vec::new();
        let mut videos: HashMap<&str, usize> = HashMap::new();
        for (row, r) in self.records.iter().enumerate() {
            if let Err(message) = r.check() {
                issues.push(ManifestIssue { row, message });
            }
            match videos.get(r.video_id.as_str()) {
                None => {
                    videos.insert(&r.video_id, row);
                }
                Some(&first) => {
                    let f = &self.records[first];
                    if (f.label, &f.pai, f.split, &f.dataset_id)
                        != (r.label, &r.pai, r.split, &r.dataset_id)
                    {
                        issues.push(ManifestIssue {
                            row,
                            message: format!(
                                "video {} disagrees with record {first} on label, pai, split or dataset",
                                r.video_id
                            ),
                        });
                    }
                }
            }
        }
        issues
    }

    /// Structural checks plus, for every record, that the frame decodes and the
    /// crop lies inside it. Only image headers are read.
    pub fn file_issues(&self) -> Vec<ManifestIssue> {
        let mut issues = self.structural_issues();
        for (row, r) in self.records.iter().enumerate() {
            let path = self.resolve(r);
            match image::image_dimensions(&path) {
                Err(e) => issues.push(ManifestIssue {
                    row,
                    message: format!("cannot read {}: {e}", path.display()),
                }),
                Ok((w, h)) => {
                    if let Some(c) = r.crop {
                        if !c.fits(w, h) {
                            issues.push(ManifestIssue {
                                row,
                                message: format!("crop {c:?} outside {w}x{h} image"),
                            });
                        }
                    }
                }
            }
        }
        issues.sort_by_key(|i| i.row);
        issues
    }

    pub fn split(&self, split: Split) -> SampleManifest {
        self.filter(|r| r.split == split)
    }

    pub fn filter(&self, keep: impl Fn(&SampleRecord) -> bool) -> SampleManifest {
        Self::new(
            self.records.iter().filter(|r| keep(r)).cloned().collect(),
            self.base_dir.clone(),
        )
    }

    /// Distinct video ids in first-appearance order.
    pub fn video_ids(&self) -> Vec<&str> {
        let mut seen = std::collections::HashSet::new();
        self.records
            .iter()
            .filter(|r| seen.insert(r.video_id.as_str()))
            .map(|r| r.video_id.as_str())
            .collect()
    }

    pub fn dataset_ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.records.iter().map(|r| r.dataset_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn count(&self, split: Split, label: Label) -> usize {
        self.records
            .iter()
            .filter(|r| r.split == split && r.label == label)
            .count()
    }

    /// Concatenates manifests, resolving every relative path against its own base.
    pub fn merge(parts: &[SampleManifest]) -> SampleManifest {
        let records = parts
            .iter()
            .flat_map(|m| {
                m.records.iter().map(move |r| SampleRecord {
                    frame_path: m.resolve(r),
                    ..r.clone()
                })
            })
            .collect();
        SampleManifest::new(records, PathBuf::new())
    }
}
