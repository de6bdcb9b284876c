//! Grid-based feature maps, their binary file format, grid-level
//! augmentation and dataset manifests.
//!
//! # GFM file layout
//!
//! All fields little-endian:
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `GFM1`                            |
//! | 4      | 4    | rows (u32)                              |
//! | 8      | 4    | cols (u32)                              |
//! | 12     | 4    | depth K (u32)                           |
//! | 16     | 4    | patch size in pixels (u32)              |
//! | 20     | 4    | reserved, must be 0 (u32)               |
//! | 24     | 4    | microns per pixel (f32, 0 = unknown)    |
//! | 28     | 4·rows·cols·K | features (f32), channel fastest |
//!
//! Cell `(i, j)` is at payload offset `(i * cols + j) * K` and corresponds to
//! the patch at pixel offset `(i * p, j * p)` of the cropped image.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor3;

pub const GFM_MAGIC: &[u8; 4] = b"GFM1";
const GFM_HEADER_LEN: usize = 28;

#[derive(Clone, Debug, PartialEq)]
pub struct GridFeatureMap {
    pub grid: Tensor3<f32>,
    pub patch_size_px: u32,
    /// 0 when unknown.
    pub microns_per_pixel: f32,
    /// Not stored in GFM files; [`read_gfm`] fills it from the file stem.
    pub source_id: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GridMeta {
    pub patch_size_px: u32,
    pub microns_per_pixel: f32,
    pub source_id: String,
}

impl GridFeatureMap {
    pub fn new(grid: Tensor3<f32>, meta: GridMeta) -> Result<Self> {
        if grid.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("grid feature values".into()));
        }
        Ok(Self {
            grid,
            patch_size_px: meta.patch_size_px,
            microns_per_pixel: meta.microns_per_pixel,
            source_id: meta.source_id,
        })
    }

    pub fn rows(&self) -> usize {
        self.grid.rows()
    }

    pub fn cols(&self) -> usize {
        self.grid.cols()
    }

    pub fn depth(&self) -> usize {
        self.grid.depth()
    }

    pub fn meta(&self) -> GridMeta {
        GridMeta {
            patch_size_px: self.patch_size_px,
            microns_per_pixel: self.microns_per_pixel,
            source_id: self.source_id.clone(),
        }
    }

    /// Pixel offset of the patch behind cell `(i, j)`.
    pub fn patch_origin(&self, i: usize, j: usize) -> (usize, usize) {
        let p = self.patch_size_px as usize;
        (i * p, j * p)
    }
}

/// Packs per-patch feature vectors into a `rows x cols x K` grid. Every cell
/// must be supplied exactly once.
pub fn pack_grid<I>(patch_features: I, rows: usize, cols: usize, meta: GridMeta) -> Result<GridFeatureMap>
where
    I: IntoIterator<Item = (usize, usize, Vec<f32>)>,
{
    if rows == 0 || cols == 0 {
        return Err(Error::dims(format!("grid must be at least 1x1, got {rows}x{cols}")));
    }
    let mut depth = None;
    let mut values: Vec<f32> = Vec::new();
    let mut seen = vec![false; rows * cols];
    for (i, j, f) in patch_features {
        if i >= rows || j >= cols {
            return Err(Error::CellOutOfRange {
                row: i,
                col: j,
                rows,
                cols,
            });
        }
        let k = *depth.get_or_insert(f.len());
        if k == 0 || f.len() != k {
            return Err(Error::dims(format!(
                "cell ({i}, {j}) has {} features, expected {k}",
                f.len()
            )));
        }
        if values.is_empty() {
            values = vec![0.0; rows * cols * k];
        }
        let c = i * cols + j;
        if std::mem::replace(&mut seen[c], true) {
            return Err(Error::DuplicateCell { row: i, col: j });
        }
        values[c * k..(c + 1) * k].copy_from_slice(&f);
    }
    if let Some(c) = seen.iter().position(|s| !s) {
        return Err(Error::IncompleteGrid {
            row: c / cols,
            col: c % cols,
        });
    }
    let k = depth.expect("complete grid has at least one cell");
    GridFeatureMap::new(Tensor3::from_vec(rows, cols, k, values)?, meta)
}

pub fn encode_gfm(g: &GridFeatureMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(GFM_HEADER_LEN + 4 * g.grid.values().len());
    out.extend_from_slice(GFM_MAGIC);
    for v in [
        g.rows() as u32,
        g.cols() as u32,
        g.depth() as u32,
        g.patch_size_px,
        0,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&g.microns_per_pixel.to_le_bytes());
    for v in g.grid.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| format_err(bytes.len(), "truncated header"))
}

pub fn decode_gfm(bytes: &[u8], source_id: &str) -> Result<GridFeatureMap> {
    let magic = bytes
        .get(..4)
        .ok_or_else(|| format_err(bytes.len(), "truncated magic"))?;
    if magic != GFM_MAGIC {
        return Err(format_err(
            0,
            format!("bad magic {:?}, expected \"GFM1\"", String::from_utf8_lossy(magic)),
        ));
    }
    let rows = read_u32(bytes, 4)? as usize;
    let cols = read_u32(bytes, 8)? as usize;
    let depth = read_u32(bytes, 12)? as usize;
    let patch = read_u32(bytes, 16)?;
    let reserved = read_u32(bytes, 20)?;
    let mpp = f32::from_bits(read_u32(bytes, 24)?);
    for (off, v, name) in [(4, rows, "rows"), (8, cols, "cols"), (12, depth, "depth")] {
        if v == 0 {
            return Err(format_err(off, format!("{name} must be positive")));
        }
    }
    if reserved != 0 {
        return Err(format_err(20, format!("reserved field is {reserved}, expected 0")));
    }
    if !(mpp.is_finite() && mpp >= 0.0) {
        return Err(format_err(24, format!("invalid microns per pixel {mpp}")));
    }
    let count = rows
        .checked_mul(cols)
        .and_then(|v| v.checked_mul(depth))
        .filter(|&c| c.checked_mul(4).is_some_and(|b| b <= usize::MAX - GFM_HEADER_LEN))
        .ok_or_else(|| format_err(4, format!("dimensions {rows}x{cols}x{depth} overflow")))?;
    let expected = GFM_HEADER_LEN + 4 * count;
    if bytes.len() < expected {
        return Err(format_err(
            bytes.len(),
            format!(
                "truncated payload: header declares {count} values, file holds {}",
                (bytes.len() - GFM_HEADER_LEN) / 4
            ),
        ));
    }
    if bytes.len() > expected {
        return Err(format_err(expected, "trailing bytes after payload"));
    }
    let values: Vec<f32> = bytes[GFM_HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
        return Err(format_err(GFM_HEADER_LEN + 4 * bad, "non-finite feature value"));
    }
    GridFeatureMap::new(
        Tensor3::from_vec(rows, cols, depth, values)?,
        GridMeta {
            patch_size_px: patch,
            microns_per_pixel: mpp,
            source_id: source_id.to_string(),
        },
    )
}

pub fn write_gfm(g: &GridFeatureMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_gfm(g)).map_err(|e| Error::io(path, e))
}

pub fn read_gfm(path: impl AsRef<Path>) -> Result<GridFeatureMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_gfm(&bytes, &id)
}

/// Spatial transforms of a grid. Rotations are clockwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Transform {
    Identity,
    HFlip,
    VFlip,
    Rot90,
    Rot180,
    Rot270,
    /// Shift along columns; positive moves content right.
    ShiftH(i32),
    /// Shift along rows; positive moves content down.
    ShiftV(i32),
}

impl Transform {
    /// The nine augmentation transforms applied to each training grid.
    pub const AUGMENTATIONS: [Transform; 9] = [
        Transform::HFlip,
        Transform::VFlip,
        Transform::Rot90,
        Transform::Rot180,
        Transform::Rot270,
        Transform::ShiftH(1),
        Transform::ShiftH(2),
        Transform::ShiftV(1),
        Transform::ShiftV(2),
    ];

    /// Exact inverse for flips and rotations; for shifts, the inverse up to
    /// the zero-filled cells.
    pub fn inverse(self) -> Transform {
        match self {
            Transform::Rot90 => Transform::Rot270,
            Transform::Rot270 => Transform::Rot90,
            Transform::ShiftH(s) => Transform::ShiftH(-s),
            Transform::ShiftV(s) => Transform::ShiftV(-s),
            other => other,
        }
    }

    pub fn tag(self) -> String {
        match self {
            Transform::Identity => String::new(),
            Transform::HFlip => "hflip".into(),
            Transform::VFlip => "vflip".into(),
            Transform::Rot90 => "rot90".into(),
            Transform::Rot180 => "rot180".into(),
            Transform::Rot270 => "rot270".into(),
            Transform::ShiftH(s) => format!("shiftH{s:+}"),
            Transform::ShiftV(s) => format!("shiftV{s:+}"),
        }
    }

    /// Applies the transform to any rows x cols x depth tensor.
    pub fn apply<T: Copy + Default>(self, t: &Tensor3<T>) -> Result<Tensor3<T>> {
        let (rows, cols, depth) = t.shape();
        let copy_cell = |out: &mut Tensor3<T>, (oi, oj): (usize, usize), (si, sj): (usize, usize)| {
            out.cell_mut(oi, oj).copy_from_slice(t.cell(si, sj));
        };
        let mut out;
        match self {
            Transform::Identity => return Ok(t.clone()),
            Transform::HFlip | Transform::VFlip | Transform::Rot180 => {
                out = Tensor3::zeros(rows, cols, depth);
                for i in 0..rows {
                    for j in 0..cols {
                        let src = match self {
                            Transform::HFlip => (i, cols - 1 - j),
                            Transform::VFlip => (rows - 1 - i, j),
                            _ => (rows - 1 - i, cols - 1 - j),
                        };
                        copy_cell(&mut out, (i, j), src);
                    }
                }
            }
            Transform::Rot90 | Transform::Rot270 => {
                out = Tensor3::zeros(cols, rows, depth);
                for i in 0..cols {
                    for j in 0..rows {
                        let src = if self == Transform::Rot90 {
                            (rows - 1 - j, i)
                        } else {
                            (j, cols - 1 - i)
                        };
                        copy_cell(&mut out, (i, j), src);
                    }
                }
            }
            Transform::ShiftH(s) | Transform::ShiftV(s) => {
                let horizontal = matches!(self, Transform::ShiftH(_));
                let dim = if horizontal { cols } else { rows };
                let mag = s.unsigned_abs() as usize;
                if mag >= dim {
                    return Err(Error::DegenerateShift {
                        magnitude: mag,
                        dim,
                    });
                }
                out = Tensor3::zeros(rows, cols, depth);
                for i in 0..rows {
                    for j in 0..cols {
                        let pos = if horizontal { j } else { i } as i64;
                        let src = pos - s as i64;
                        if src < 0 || src >= dim as i64 {
                            continue;
                        }
                        let src = src as usize;
                        let from = if horizontal { (i, src) } else { (src, j) };
                        copy_cell(&mut out, (i, j), from);
                    }
                }
            }
        }
        Ok(out)
    }
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transform::Identity => f.write_str("identity"),
            other => f.write_str(&other.tag()),
        }
    }
}

impl FromStr for Transform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let shift = |rest: &str| -> Result<i32> {
            rest.parse::<i32>()
                .map_err(|_| Error::config(format!("bad shift amount in '{s}'")))
        };
        Ok(match s {
            "" | "-" | "identity" => Transform::Identity,
            "hflip" => Transform::HFlip,
            "vflip" => Transform::VFlip,
            "rot90" => Transform::Rot90,
            "rot180" => Transform::Rot180,
            "rot270" => Transform::Rot270,
            _ if s.starts_with("shiftH") => Transform::ShiftH(shift(&s[6..])?),
            _ if s.starts_with("shiftV") => Transform::ShiftV(shift(&s[6..])?),
            other => return Err(Error::config(format!("unknown transform '{other}'"))),
        })
    }
}

pub fn augment_grid(g: &GridFeatureMap, t: Transform) -> Result<GridFeatureMap> {
    Ok(GridFeatureMap {
        grid: t.apply(&g.grid)?,
        ..g.clone()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Classification,
    Regression,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Classification => "classification",
            TaskKind::Regression => "regression",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "classification" | "cls" => Ok(TaskKind::Classification),
            "regression" | "reg" => Ok(TaskKind::Regression),
            other => Err(Error::config(format!("unknown task '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Label {
    Class(u8),
    Score(f64),
}

impl Label {
    pub fn as_f64(self) -> f64 {
        match self {
            Label::Class(c) => c as f64,
            Label::Score(s) => s,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Class(c) => write!(f, "{c}"),
            Label::Score(s) => write!(f, "{s:?}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
    Fold(u32),
}

impl Split {
    /// Records eligible for augmentation and cross-validation.
    pub fn is_training(self) -> bool {
        matches!(self, Split::Train | Split::Fold(_))
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => f.write_str("train"),
            Split::Val => f.write_str("val"),
            Split::Test => f.write_str("test"),
            Split::Fold(k) => write!(f, "{k}"),
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => other
                .parse::<u32>()
                .map(Split::Fold)
                .map_err(|_| Error::config(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub grid_path: String,
    pub label: Label,
    pub split: Split,
    pub resolution_tag: String,
    /// Empty for original (non-augmented) records.
    pub augmentation_tag: String,
}

impl SampleRecord {
    pub fn new(grid_path: impl Into<String>, label: Label, split: Split) -> Self {
        Self {
            grid_path: grid_path.into(),
            label,
            split,
            resolution_tag: String::new(),
            augmentation_tag: String::new(),
        }
    }

    pub fn is_augmented(&self) -> bool {
        !self.augmentation_tag.is_empty()
    }

    /// The grid this record was derived from. Low-resolution copies are named
    /// `<stem>.<resolution_tag>.gfm` next to `<stem>.gfm`, so the tag infix is
    /// stripped; augmented copies share the path of their source already.
    pub fn source_key(&self) -> &str {
        if !self.resolution_tag.is_empty() {
            if let Some(stem) = self
                .grid_path
                .strip_suffix(".gfm")
                .and_then(|s| s.strip_suffix(self.resolution_tag.as_str()))
                .and_then(|s| s.strip_suffix('.'))
            {
                return &self.grid_path[..stem.len()];
            }
        }
        self.grid_path.strip_suffix(".gfm").unwrap_or(&self.grid_path)
    }

    /// True for low-resolution copies of another grid.
    pub fn is_derived_resolution(&self) -> bool {
        self.source_key() != self.grid_path.strip_suffix(".gfm").unwrap_or(&self.grid_path)
    }

    pub fn transform(&self) -> Result<Transform> {
        self.augmentation_tag.parse()
    }

    /// Reads the record's grid, resolving relative paths against `base_dir`,
    /// and applies its augmentation.
    pub fn load(&self, base_dir: &Path) -> Result<GridFeatureMap> {
        let path = resolve(base_dir, &self.grid_path);
        let g = read_gfm(&path)?;
        augment_grid(&g, self.transform()?)
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub task: TaskKind,
    pub records: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn new(task: TaskKind) -> Self {
        Self {
            task,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        let mut folds = Vec::new();
        for r in &self.records {
            match (self.task, r.label) {
                (TaskKind::Classification, Label::Class(c)) if c <= 1 => {}
                (TaskKind::Regression, Label::Score(s)) if s.is_finite() => {}
                _ => {
                    return Err(Error::config(format!(
                        "label {} of {} does not fit a {} manifest",
                        r.label, r.grid_path, self.task
                    )))
                }
            }
            if !seen.insert((r.grid_path.as_str(), r.augmentation_tag.as_str())) {
                return Err(Error::config(format!(
                    "duplicate record ({}, '{}')",
                    r.grid_path, r.augmentation_tag
                )));
            }
            if let Split::Fold(f) = r.split {
                folds.push(f);
            }
        }
        folds.sort_unstable();
        folds.dedup();
        if folds.iter().enumerate().any(|(i, &f)| f as usize != i) {
            return Err(Error::config(format!(
                "fold ids {folds:?} do not form a contiguous range from 0"
            )));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut task = None;
        let mut rows = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(t) = comment.trim().strip_prefix("task=") {
                    task = Some(t.parse().map_err(|e: Error| Error::Parse {
                        line: line_no,
                        message: e.to_string(),
                    })?);
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected 5 tab-separated fields, found {}", fields.len()),
                });
            }
            rows.push((line_no, fields));
        }
        let task = match task {
            Some(t) => t,
            None if rows.iter().all(|(_, f)| matches!(f[1], "0" | "1")) => TaskKind::Classification,
            None => TaskKind::Regression,
        };
        let mut records = Vec::with_capacity(rows.len());
        for (line, f) in rows {
            let perr = |message: String| Error::Parse { line, message };
            let label = match task {
                TaskKind::Classification => Label::Class(
                    f[1].parse::<u8>()
                        .ok()
                        .filter(|&c| c <= 1)
                        .ok_or_else(|| perr(format!("class label must be 0 or 1, got '{}'", f[1])))?,
                ),
                TaskKind::Regression => Label::Score(
                    f[1].parse::<f64>()
                        .ok()
                        .filter(|s| s.is_finite())
                        .ok_or_else(|| perr(format!("score must be a finite number, got '{}'", f[1])))?,
                ),
            };
            let split = f[2].parse::<Split>().map_err(|e| perr(e.to_string()))?;
            let tag = |s: &str| if s == "-" { String::new() } else { s.to_string() };
            records.push(SampleRecord {
                grid_path: f[0].to_string(),
                label,
                split,
                resolution_tag: tag(f[3]),
                augmentation_tag: tag(f[4]),
            });
        }
        let m = Self { task, records };
        m.validate()?;
        Ok(m)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!("# task={}\n", self.task);
        let tag = |s: &str| if s.is_empty() { "-".to_string() } else { s.to_string() };
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                r.grid_path,
                r.label,
                r.split,
                tag(&r.resolution_tag),
                tag(&r.augmentation_tag)
            ));
        }
        out
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    /// Records grouped by [`SampleRecord::source_key`], in first-seen order.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for (i, r) in self.records.iter().enumerate() {
            let g = *index.entry(r.source_key()).or_insert_with(|| {
                groups.push(Vec::new());
                groups.len() - 1
            });
            groups[g].push(i);
        }
        groups
    }
}

/// Expands every original training record into itself plus one copy per
/// augmentation transform. Other splits are untouched.
pub fn expand_manifest(m: &DatasetManifest) -> DatasetManifest {
    expand_manifest_with(m, true)
}

/// As [`expand_manifest`]; `augment_lowres = false` leaves low-resolution
/// copies unaugmented.
pub fn expand_manifest_with(m: &DatasetManifest, augment_lowres: bool) -> DatasetManifest {
    let expanded: std::collections::HashSet<&str> = m
        .records
        .iter()
        .filter(|r| r.is_augmented())
        .map(|r| r.grid_path.as_str())
        .collect();
    let mut records = Vec::with_capacity(m.records.len() * 10);
    for r in &m.records {
        records.push(r.clone());
        let eligible = r.split.is_training()
            && !r.is_augmented()
            && !expanded.contains(r.grid_path.as_str())
            && (augment_lowres || !r.is_derived_resolution());
        if eligible {
            for t in Transform::AUGMENTATIONS {
                records.push(SampleRecord {
                    augmentation_tag: t.tag(),
                    ..r.clone()
                });
            }
        }
    }
    DatasetManifest {
        task: m.task,
        records,
    }
}
