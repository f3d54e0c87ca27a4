//! Scene, utterance and dataset-record types shared by every stage.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MAX_OBJECTS: usize = 24;

/// Axis-aligned box given by its center and full extents.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3 {
    pub center: [f64; 3],
    pub size: [f64; 3],
}

impl Box3 {
    pub fn new(center: [f64; 3], size: [f64; 3]) -> Self {
        Self { center, size }
    }

    pub fn min(&self) -> [f64; 3] {
        std::array::from_fn(|k| self.center[k] - 0.5 * self.size[k])
    }

    pub fn max(&self) -> [f64; 3] {
        std::array::from_fn(|k| self.center[k] + 0.5 * self.size[k])
    }

    pub fn volume(&self) -> f64 {
        self.size.iter().product()
    }

    pub fn center_distance(&self, other: &Box3) -> f64 {
        (0..3).map(|k| (self.center[k] - other.center[k]).powi(2)).sum::<f64>().sqrt()
    }

    /// Strict overlap of the xy footprints.
    pub fn overlaps_xy(&self, other: &Box3) -> bool {
        let (a0, a1, b0, b1) = (self.min(), self.max(), other.min(), other.max());
        (0..2).all(|k| a0[k] < b1[k] && b0[k] < a1[k])
    }

    /// Strict interior overlap in 3-D; touching faces do not count.
    pub fn overlaps(&self, other: &Box3) -> bool {
        let (a0, a1, b0, b1) = (self.min(), self.max(), other.min(), other.max());
        (0..3).all(|k| a0[k] < b1[k] && b0[k] < a1[k])
    }

    /// The 6-vector `(center, size)`.
    pub fn params(&self) -> [f64; 6] {
        [self.center[0], self.center[1], self.center[2], self.size[0], self.size[1], self.size[2]]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectProposal {
    pub id: usize,
    pub category: String,
    #[serde(flatten)]
    pub bbox: Box3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<ObjectProposal>,
    pub target_id: usize,
    pub seed: u64,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn target(&self) -> &ObjectProposal {
        &self.objects[self.target_id]
    }

    pub fn boxes(&self) -> Vec<Box3> {
        self.objects.iter().map(|o| o.bbox).collect()
    }

    /// Ids of all objects whose category is `category`.
    pub fn ids_of(&self, category: &str) -> Vec<usize> {
        self.objects.iter().filter(|o| o.category == category).map(|o| o.id).collect()
    }

    /// Same-category objects of the target other than the target itself.
    pub fn distractor_count(&self) -> usize {
        self.ids_of(&self.target().category).len().saturating_sub(1)
    }
}

/// Fixed, ordered category vocabulary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    names: Vec<String>,
}

/// Built-in category names, in the order the generator draws them.
pub const DEFAULT_CATEGORIES: &[&str] = &[
    "chair", "table", "desk", "pillow", "couch", "shelf", "lamp", "box", "plant", "cabinet", "door", "window",
    "monitor", "stool", "picture", "bed", "wall", "whiteboard", "refrigerator", "backpack", "bin", "sink",
    "toilet", "bookcase",
];

impl Vocabulary {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Self {
        Self { names: names.into_iter().map(Into::into).collect() }
    }

    /// The first `n` built-in categories.
    pub fn first(n: usize) -> Result<Self> {
        if n == 0 || n > DEFAULT_CATEGORIES.len() {
            return Err(Error::Config(format!("category count must be in 1..={}", DEFAULT_CATEGORIES.len())));
        }
        Ok(Self::new(DEFAULT_CATEGORIES[..n].iter().copied()))
    }

    pub fn full() -> Self {
        Self::new(DEFAULT_CATEGORIES.iter().copied())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index_of(name).is_some()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }
}

/// Unordered category pair, stored with the lexicographically smaller name first.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "(String, String)", into = "(String, String)")]
pub struct CategoryPair(String, String);

impl CategoryPair {
    pub fn new(a: impl Into<String>, b: impl Into<String>) -> Self {
        let (a, b) = (a.into(), b.into());
        if a <= b {
            Self(a, b)
        } else {
            Self(b, a)
        }
    }

    pub fn first(&self) -> &str {
        &self.0
    }

    pub fn second(&self) -> &str {
        &self.1
    }

    pub fn matches(&self, a: &str, b: &str) -> bool {
        (self.0 == a && self.1 == b) || (self.0 == b && self.1 == a)
    }
}

impl From<(String, String)> for CategoryPair {
    fn from((a, b): (String, String)) -> Self {
        Self::new(a, b)
    }
}

impl From<CategoryPair> for (String, String) {
    fn from(p: CategoryPair) -> Self {
        (p.0, p.1)
    }
}

impl fmt::Display for CategoryPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.0, self.1)
    }
}

/// Set of category pairs named by a description.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SoftRelationalLabel {
    pub pairs: BTreeSet<CategoryPair>,
}

impl SoftRelationalLabel {
    pub fn new(pairs: impl IntoIterator<Item = CategoryPair>) -> Self {
        Self { pairs: pairs.into_iter().collect() }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &CategoryPair> {
        self.pairs.iter()
    }
}

impl fmt::Display for SoftRelationalLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.pairs.iter().map(ToString::to_string).collect();
        write!(f, "({})", parts.join(", "))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub text: String,
    pub pairs: SoftRelationalLabel,
    pub target_category: String,
    pub rn: usize,
}

/// One line of a dataset file: a scene and the utterance that refers into it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    #[serde(flatten)]
    pub scene: Scene,
    #[serde(flatten)]
    pub utterance: Utterance,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    TooFewObjects(usize),
    TooManyObjects { count: usize, max: usize },
    NonContiguousId { position: usize, id: usize },
    UnknownCategory { id: usize, category: String },
    NonPositiveSize { id: usize },
    NonFiniteCenter { id: usize },
    TargetOutOfRange { target_id: usize, count: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::TooFewObjects(n) => write!(f, "too few objects ({n} < 2)"),
            Violation::TooManyObjects { count, max } => write!(f, "too many objects ({count} > {max})"),
            Violation::NonContiguousId { position, id } => write!(f, "object at position {position} has id {id}"),
            Violation::UnknownCategory { id, category } => write!(f, "object {id}: unknown category {category:?}"),
            Violation::NonPositiveSize { id } => write!(f, "object {id}: non-positive size"),
            Violation::NonFiniteCenter { id } => write!(f, "object {id}: non-finite center"),
            Violation::TargetOutOfRange { target_id, count } => {
                write!(f, "target out of range ({target_id} not in 0..{count})")
            }
        }
    }
}

/// Checks every scene invariant; an empty report means the scene is valid.
pub fn validate_scene(scene: &Scene, vocab: &Vocabulary, max_objects: usize) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = scene.objects.len();
    if n < 2 {
        out.push(Violation::TooFewObjects(n));
    }
    if n > max_objects {
        out.push(Violation::TooManyObjects { count: n, max: max_objects });
    }
    for (pos, obj) in scene.objects.iter().enumerate() {
        if obj.id != pos {
            out.push(Violation::NonContiguousId { position: pos, id: obj.id });
        }
        if !vocab.contains(&obj.category) {
            out.push(Violation::UnknownCategory { id: obj.id, category: obj.category.clone() });
        }
        if !obj.bbox.size.iter().all(|&s| s > 0.0) {
            out.push(Violation::NonPositiveSize { id: obj.id });
        }
        if !obj.bbox.center.iter().all(|c| c.is_finite()) {
            out.push(Violation::NonFiniteCenter { id: obj.id });
        }
    }
    if scene.target_id >= n {
        out.push(Violation::TargetOutOfRange { target_id: scene.target_id, count: n });
    }
    out
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| Error::Input(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.push(rec);
    }
    Ok(out)
}
