//! Domain data model: label spaces, boxes, objects, relation triples and datasets.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    Object,
    Predicate,
}

/// An ordered, duplicate-free list of label names. Index = position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSpace {
    kind: LabelKind,
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelSpace {
    /// Builds a space, rejecting empty or repeated names. The error carries the
    /// zero-based position of the first offending entry.
    pub fn new(kind: LabelKind, names: Vec<String>) -> std::result::Result<Self, (usize, String)> {
        let mut index = HashMap::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            if name.trim().is_empty() {
                return Err((i, "empty label".to_string()));
            }
            if index.insert(name.clone(), i).is_some() {
                return Err((i, format!("duplicate label {name:?}")));
            }
        }
        Ok(Self { kind, names, index })
    }

    pub fn kind(&self) -> LabelKind {
        self.kind
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

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }
}

/// The object and predicate label spaces of one dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSpaces {
    pub object: LabelSpace,
    pub predicate: LabelSpace,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite())
            && self.x1 < self.x2
            && self.y1 < self.y2
    }

    pub fn clamped(&self, width: f64, height: f64) -> Self {
        Self {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        w.max(0.0) * h.max(0.0)
    }

    /// Smallest box enclosing both.
    pub fn union_box(&self, other: &BoundingBox) -> BoundingBox {
        BoundingBox {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectInstance {
    pub object_id: u32,
    pub label: usize,
    pub bbox: BoundingBox,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub subj: u32,
    pub pred: usize,
    pub obj: u32,
}

/// Label-level identity of a triple: `(subject label, predicate, object label)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Signature {
    pub subj: usize,
    pub pred: usize,
    pub obj: usize,
}

impl From<(usize, usize, usize)> for Signature {
    fn from((subj, pred, obj): (usize, usize, usize)) -> Self {
        Self { subj, pred, obj }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneGraphAnnotation {
    pub image_id: String,
    pub width: f64,
    pub height: f64,
    pub objects: Vec<ObjectInstance>,
    pub triples: Vec<Triple>,
}

impl SceneGraphAnnotation {
    pub fn object(&self, id: u32) -> Option<&ObjectInstance> {
        self.objects.iter().find(|o| o.object_id == id)
    }

    pub fn object_index(&self, id: u32) -> Option<usize> {
        self.objects.iter().position(|o| o.object_id == id)
    }

    /// Removes repeated `(subj, pred, obj)` entries, keeping first occurrences.
    /// Returns how many were dropped.
    pub fn dedup_triples(&mut self) -> usize {
        let mut seen = HashSet::with_capacity(self.triples.len());
        let before = self.triples.len();
        self.triples.retain(|t| seen.insert(*t));
        before - self.triples.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub annotations: Vec<SceneGraphAnnotation>,
    pub spaces: LabelSpaces,
    pub d_roi: usize,
}

impl Dataset {
    pub fn triple_count(&self) -> usize {
        self.annotations.iter().map(|a| a.triples.len()).sum()
    }

    /// Every distinct label signature present in the dataset.
    pub fn signatures(&self) -> HashSet<Signature> {
        let mut out = HashSet::new();
        for a in &self.annotations {
            for t in &a.triples {
                if let Ok(sig) = triple_signature(t, a) {
                    out.insert(sig);
                }
            }
        }
        out
    }
}

/// One invariant violation found by [`validate_annotation`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    DuplicateObjectId(u32),
    ObjectLabelOutOfRange {
        object_id: u32,
        label: usize,
    },
    BadBox {
        object_id: u32,
    },
    BoxOutOfBounds {
        object_id: u32,
    },
    FeatureDimensionMismatch {
        object_id: u32,
        expected: usize,
        actual: usize,
    },
    NonFiniteFeature {
        object_id: u32,
    },
    DanglingObject(u32),
    SelfRelation(u32),
    PredicateOutOfRange(usize),
    DuplicateTriple(Triple),
    BadImageSize,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateObjectId(id) => write!(f, "duplicate object_id {id}"),
            Violation::ObjectLabelOutOfRange { object_id, label } => {
                write!(f, "object {object_id}: label {label} out of range")
            }
            Violation::BadBox { object_id } => write!(f, "object {object_id}: degenerate box"),
            Violation::BoxOutOfBounds { object_id } => {
                write!(f, "object {object_id}: box outside image bounds")
            }
            Violation::FeatureDimensionMismatch {
                object_id,
                expected,
                actual,
            } => write!(
                f,
                "object {object_id}: feature dimension mismatch (expected {expected}, got {actual})"
            ),
            Violation::NonFiniteFeature { object_id } => {
                write!(f, "object {object_id}: non-finite feature value")
            }
            Violation::DanglingObject(id) => write!(f, "dangling object_id {id}"),
            Violation::SelfRelation(id) => write!(f, "triple relates object {id} to itself"),
            Violation::PredicateOutOfRange(p) => write!(f, "predicate {p} out of range"),
            Violation::DuplicateTriple(t) => {
                write!(f, "duplicate triple ({}, {}, {})", t.subj, t.pred, t.obj)
            }
            Violation::BadImageSize => write!(f, "image width and height must be positive"),
        }
    }
}

/// Collects every invariant violation in `a`. An empty list means the
/// annotation is valid.
pub fn validate_annotation(
    a: &SceneGraphAnnotation,
    spaces: &LabelSpaces,
    d_roi: usize,
) -> Vec<Violation> {
    let mut out = Vec::new();
    if !(a.width > 0.0 && a.height > 0.0) {
        out.push(Violation::BadImageSize);
    }

    let mut ids = HashSet::with_capacity(a.objects.len());
    for o in &a.objects {
        if !ids.insert(o.object_id) {
            out.push(Violation::DuplicateObjectId(o.object_id));
        }
        if o.label >= spaces.object.len() {
            out.push(Violation::ObjectLabelOutOfRange {
                object_id: o.object_id,
                label: o.label,
            });
        }
        if !o.bbox.is_valid() {
            out.push(Violation::BadBox {
                object_id: o.object_id,
            });
        } else if o.bbox.x1 < 0.0 || o.bbox.y1 < 0.0 || o.bbox.x2 > a.width || o.bbox.y2 > a.height
        {
            out.push(Violation::BoxOutOfBounds {
                object_id: o.object_id,
            });
        }
        if o.feature.len() != d_roi {
            out.push(Violation::FeatureDimensionMismatch {
                object_id: o.object_id,
                expected: d_roi,
                actual: o.feature.len(),
            });
        } else if o.feature.iter().any(|v| !v.is_finite()) {
            out.push(Violation::NonFiniteFeature {
                object_id: o.object_id,
            });
        }
    }

    let mut seen = HashSet::with_capacity(a.triples.len());
    for t in &a.triples {
        for id in [t.subj, t.obj] {
            if !ids.contains(&id) {
                out.push(Violation::DanglingObject(id));
            }
        }
        if t.subj == t.obj {
            out.push(Violation::SelfRelation(t.subj));
        }
        if t.pred >= spaces.predicate.len() {
            out.push(Violation::PredicateOutOfRange(t.pred));
        }
        if !seen.insert(*t) {
            out.push(Violation::DuplicateTriple(*t));
        }
    }
    out
}

/// Label-level signature of `t` within `a`.
pub fn triple_signature(t: &Triple, a: &SceneGraphAnnotation) -> Result<Signature> {
    let subj = a.object(t.subj).ok_or(Error::DanglingObject(t.subj))?;
    let obj = a.object(t.obj).ok_or(Error::DanglingObject(t.obj))?;
    Ok(Signature {
        subj: subj.label,
        pred: t.pred,
        obj: obj.label,
    })
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn spaces(c_obj: usize, c_pred: usize) -> LabelSpaces {
        LabelSpaces {
            object: LabelSpace::new(
                LabelKind::Object,
                (0..c_obj).map(|i| format!("obj{i}")).collect(),
            )
            .unwrap(),
            predicate: LabelSpace::new(
                LabelKind::Predicate,
                (0..c_pred).map(|i| format!("pred{i}")).collect(),
            )
            .unwrap(),
        }
    }

    pub fn object(id: u32, label: usize, d: usize) -> ObjectInstance {
        let x = id as f64 * 10.0;
        ObjectInstance {
            object_id: id,
            label,
            bbox: BoundingBox::new(x, 0.0, x + 8.0, 8.0),
            feature: (0..d).map(|k| (k as f64 + 1.0) * 0.1 + id as f64).collect(),
        }
    }

    pub fn annotation(objects: Vec<ObjectInstance>, triples: Vec<Triple>) -> SceneGraphAnnotation {
        SceneGraphAnnotation {
            image_id: "img".into(),
            width: 1000.0,
            height: 1000.0,
            objects,
            triples,
        }
    }
}
