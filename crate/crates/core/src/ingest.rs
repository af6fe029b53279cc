//! Readers and writers for label, annotation, embedding and recall files, and
//! construction of the zero-shot signature index.
//!
//! Annotation files are JSON lines. An optional first line
//! `{"header":{"split":"train","d_roi":32}}` declares the feature dimension;
//! every other line is one image:
//!
//! ```text
//! {"image_id":"1","width":640,"height":480,
//!  "objects":[{"id":0,"label":"man","box":[1,2,30,40],"feature":[0.1,...]}],
//!  "relations":[{"subj":0,"pred":"on","obj":1}]}
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{
    validate_annotation, BoundingBox, Dataset, LabelKind, LabelSpace, LabelSpaces, ObjectInstance,
    SceneGraphAnnotation, Signature, Split, Triple,
};

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// One label per line; the zero-based line number is the label index.
pub fn load_labels(path: impl AsRef<Path>, kind: LabelKind) -> Result<LabelSpace> {
    let path = path.as_ref();
    let text = read(path)?;
    let names: Vec<String> = text.lines().map(|l| l.trim().to_string()).collect();
    LabelSpace::new(kind, names).map_err(|(i, msg)| Error::parse(path, i + 1, msg))
}

pub fn write_labels(path: impl AsRef<Path>, space: &LabelSpace) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    for name in space.names() {
        writeln!(w, "{name}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AnnotationHeader {
    pub split: Split,
    pub d_roi: usize,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: AnnotationHeader,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectRecord {
    id: u32,
    label: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    feature: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RelationRecord {
    subj: u32,
    pred: String,
    obj: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageRecord {
    image_id: String,
    width: f64,
    height: f64,
    objects: Vec<ObjectRecord>,
    relations: Vec<RelationRecord>,
}

/// Reads only the header line of an annotation file, if it has one.
pub fn read_annotation_header(path: impl AsRef<Path>) -> Result<Option<AnnotationHeader>> {
    let path = path.as_ref();
    let text = read(path)?;
    match text.lines().map(str::trim).find(|l| !l.is_empty()) {
        Some(line) if line.starts_with("{\"header\"") => serde_json::from_str::<HeaderLine>(line)
            .map(|h| Some(h.header))
            .map_err(|e| Error::parse(path, 1, e.to_string())),
        _ => Ok(None),
    }
}

/// Region feature dimension of an annotation file: the header's value, or the
/// feature length of the first object when there is no header.
pub fn annotation_d_roi(path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    if let Some(h) = read_annotation_header(path)? {
        return Ok(h.d_roi);
    }
    let text = read(path)?;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ImageRecord =
            serde_json::from_str(line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        if let Some(o) = rec.objects.first() {
            return Ok(o.feature.len());
        }
    }
    Err(Error::EmptyDataset)
}

/// Parses an annotation file into a validated [`Dataset`].
///
/// Boxes are clamped to the image, repeated triples are dropped (with a
/// warning), and the first invalid record aborts loading with its line number.
pub fn load_annotations(
    path: impl AsRef<Path>,
    split: Split,
    spaces: &LabelSpaces,
    d_roi: usize,
) -> Result<Dataset> {
    let path = path.as_ref();
    let text = read(path)?;
    let mut annotations = Vec::new();
    let mut dropped = 0usize;

    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with("{\"header\"") {
            let h: HeaderLine = serde_json::from_str(line)
                .map_err(|e| Error::parse(path, lineno, e.to_string()))?;
            if h.header.d_roi != d_roi {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!(
                        "header declares d_roi {} but {} was expected",
                        h.header.d_roi, d_roi
                    ),
                ));
            }
            continue;
        }
        let rec: ImageRecord =
            serde_json::from_str(line).map_err(|e| Error::parse(path, lineno, e.to_string()))?;
        let mut a = image_from_record(rec, spaces).map_err(|m| Error::parse(path, lineno, m))?;
        dropped += a.dedup_triples();
        let violations = validate_annotation(&a, spaces, d_roi);
        if !violations.is_empty() {
            let msg: Vec<String> = violations.iter().map(ToString::to_string).collect();
            return Err(Error::parse(
                path,
                lineno,
                format!("image {}: {}", a.image_id, msg.join("; ")),
            ));
        }
        annotations.push(a);
    }
    if dropped > 0 {
        log::warn!("{}: dropped {dropped} duplicate triples", path.display());
    }
    Ok(Dataset {
        split,
        annotations,
        spaces: spaces.clone(),
        d_roi,
    })
}

fn image_from_record(
    rec: ImageRecord,
    spaces: &LabelSpaces,
) -> std::result::Result<SceneGraphAnnotation, String> {
    let mut objects = Vec::with_capacity(rec.objects.len());
    for o in rec.objects {
        let label = spaces
            .object
            .index_of(&o.label)
            .ok_or_else(|| format!("unknown object label {:?}", o.label))?;
        let [x1, y1, x2, y2] = o.bbox;
        objects.push(ObjectInstance {
            object_id: o.id,
            label,
            bbox: BoundingBox::new(x1, y1, x2, y2).clamped(rec.width, rec.height),
            feature: o.feature,
        });
    }
    let mut triples = Vec::with_capacity(rec.relations.len());
    for r in rec.relations {
        let pred = spaces
            .predicate
            .index_of(&r.pred)
            .ok_or_else(|| format!("unknown predicate label {:?}", r.pred))?;
        triples.push(Triple {
            subj: r.subj,
            pred,
            obj: r.obj,
        });
    }
    Ok(SceneGraphAnnotation {
        image_id: rec.image_id,
        width: rec.width,
        height: rec.height,
        objects,
        triples,
    })
}

pub fn write_annotations(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let header = HeaderLine {
        header: AnnotationHeader {
            split: dataset.split,
            d_roi: dataset.d_roi,
        },
    };
    let io = |e| Error::io(path, e);
    serde_json::to_writer(&mut w, &header)?;
    writeln!(w).map_err(io)?;
    let spaces = &dataset.spaces;
    for a in &dataset.annotations {
        let rec = ImageRecord {
            image_id: a.image_id.clone(),
            width: a.width,
            height: a.height,
            objects: a
                .objects
                .iter()
                .map(|o| ObjectRecord {
                    id: o.object_id,
                    label: spaces.object.name(o.label).unwrap_or_default().to_string(),
                    bbox: [o.bbox.x1, o.bbox.y1, o.bbox.x2, o.bbox.y2],
                    feature: o.feature.clone(),
                })
                .collect(),
            relations: a
                .triples
                .iter()
                .map(|t| RelationRecord {
                    subj: t.subj,
                    pred: spaces
                        .predicate
                        .name(t.pred)
                        .unwrap_or_default()
                        .to_string(),
                    obj: t.obj,
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// One vector per label of a [`LabelSpace`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub kind: LabelKind,
    pub dim: usize,
    pub vectors: Vec<Vec<f64>>,
}

impl EmbeddingTable {
    /// Validates shapes and norms.
    pub fn new(kind: LabelKind, dim: usize, vectors: Vec<Vec<f64>>) -> Result<Self> {
        for v in &vectors {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) || v.iter().all(|&x| x == 0.0) {
                return Err(Error::ZeroNorm);
            }
        }
        Ok(Self { kind, dim, vectors })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&[f64]> {
        self.vectors.get(index).map(Vec::as_slice)
    }
}

/// Token vectors as read from an embeddings file, before pooling into labels.
#[derive(Debug, Clone, Default)]
pub struct TokenVectors {
    pub dim: usize,
    pub tokens: HashMap<String, Vec<f64>>,
}

/// Parses `token v1 v2 ... vD` lines.
pub fn load_token_vectors(path: impl AsRef<Path>) -> Result<TokenVectors> {
    let path = path.as_ref();
    let text = read(path)?;
    let mut out = TokenVectors::default();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(' ');
        let token = parts.next().unwrap_or_default().to_string();
        let values = parts
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::parse(path, lineno, format!("bad float: {e}")))?;
        if values.is_empty() {
            return Err(Error::parse(
                path,
                lineno,
                format!("token {token:?} has no values"),
            ));
        }
        if out.tokens.is_empty() {
            out.dim = values.len();
        } else if values.len() != out.dim {
            return Err(Error::parse(
                path,
                lineno,
                format!(
                    "token {token:?} has dimension {} but the file uses {}",
                    values.len(),
                    out.dim
                ),
            ));
        }
        if out.tokens.insert(token.clone(), values).is_some() {
            return Err(Error::parse(
                path,
                lineno,
                format!("duplicate token {token:?}"),
            ));
        }
    }
    Ok(out)
}

/// Resolves every label of `space` against the token vectors. Multi-word labels
/// are the mean of their token vectors.
pub fn pool_labels(tokens: &TokenVectors, space: &LabelSpace) -> Result<EmbeddingTable> {
    let mut vectors = Vec::with_capacity(space.len());
    for name in space.names() {
        let words: Vec<&str> = name.split_whitespace().collect();
        let mut acc = vec![0.0; tokens.dim];
        for w in &words {
            let v = tokens
                .tokens
                .get(*w)
                .ok_or_else(|| Error::MissingEmbedding(format!("token {w:?} of label {name:?}")))?;
            for (a, x) in acc.iter_mut().zip(v) {
                *a += x;
            }
        }
        let n = words.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        if acc.iter().all(|&x| x == 0.0) {
            return Err(Error::MissingEmbedding(format!(
                "label {name:?} pools to a zero vector"
            )));
        }
        vectors.push(acc);
    }
    EmbeddingTable::new(space.kind(), tokens.dim, vectors)
}

pub fn load_embeddings(path: impl AsRef<Path>, space: &LabelSpace) -> Result<EmbeddingTable> {
    pool_labels(&load_token_vectors(path)?, space)
}

/// Writes tokens in the given order.
pub fn write_token_vectors<'a>(
    path: impl AsRef<Path>,
    entries: impl IntoIterator<Item = (&'a str, &'a [f64])>,
) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    for (token, v) in entries {
        write!(w, "{token}").map_err(io)?;
        for x in v {
            write!(w, " {x}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Per-predicate baseline recall, indexed like the predicate space.
#[derive(Debug, Clone, PartialEq)]
pub struct RecallTable(pub Vec<f64>);

impl RecallTable {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Config(format!("recall {v} outside [0, 1]")));
        }
        Ok(Self(values))
    }

    pub fn get(&self, pred: usize) -> f64 {
        self.0[pred]
    }
}

pub fn load_recalls(path: impl AsRef<Path>, predicates: &LabelSpace) -> Result<RecallTable> {
    let path = path.as_ref();
    let map: BTreeMap<String, f64> = serde_json::from_str(&read(path)?)
        .map_err(|e| Error::parse(path, e.line(), e.to_string()))?;
    let mut values = vec![f64::NAN; predicates.len()];
    for (name, v) in &map {
        let i = predicates
            .index_of(name)
            .ok_or_else(|| Error::parse(path, 0, format!("unknown predicate {name:?}")))?;
        values[i] = *v;
    }
    if let Some(i) = values.iter().position(|v| v.is_nan()) {
        return Err(Error::parse(
            path,
            0,
            format!("no recall for predicate {:?}", predicates.names()[i]),
        ));
    }
    RecallTable::new(values).map_err(|e| Error::parse(path, 0, e.to_string()))
}

pub fn write_recalls(
    path: impl AsRef<Path>,
    table: &RecallTable,
    predicates: &LabelSpace,
) -> Result<()> {
    let path = path.as_ref();
    let map: BTreeMap<&str, f64> = predicates
        .names()
        .iter()
        .map(String::as_str)
        .zip(table.0.iter().copied())
        .collect();
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, &map)?;
    writeln!(w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Label signatures present in test but never in train.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ZeroShotIndex {
    pub signatures: BTreeSet<Signature>,
}

impl ZeroShotIndex {
    pub fn contains(&self, sig: &Signature) -> bool {
        self.signatures.contains(sig)
    }

    pub fn len(&self) -> usize {
        self.signatures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signatures.is_empty()
    }
}

pub fn build_zero_shot_index(train: &Dataset, test: &Dataset) -> Result<ZeroShotIndex> {
    if train.spaces != test.spaces {
        return Err(Error::LabelSpaceMismatch);
    }
    let seen = train.signatures();
    let signatures = test
        .signatures()
        .into_iter()
        .filter(|s| !seen.contains(s))
        .collect();
    Ok(ZeroShotIndex { signatures })
}

pub fn write_zero_shot_index(
    path: impl AsRef<Path>,
    index: &ZeroShotIndex,
    spaces: &LabelSpaces,
) -> Result<()> {
    let path = path.as_ref();
    let rows: Vec<[&str; 3]> = index
        .signatures
        .iter()
        .map(|s| {
            [
                spaces.object.name(s.subj).unwrap_or_default(),
                spaces.predicate.name(s.pred).unwrap_or_default(),
                spaces.object.name(s.obj).unwrap_or_default(),
            ]
        })
        .collect();
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, &rows)?;
    writeln!(w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_zero_shot_index(path: impl AsRef<Path>, spaces: &LabelSpaces) -> Result<ZeroShotIndex> {
    let path = path.as_ref();
    let rows: Vec<[String; 3]> = serde_json::from_str(&read(path)?)
        .map_err(|e| Error::parse(path, e.line(), e.to_string()))?;
    let mut signatures = BTreeSet::new();
    for [s, p, o] in rows {
        let lookup = |space: &LabelSpace, n: &str| {
            space
                .index_of(n)
                .ok_or_else(|| Error::parse(path, 0, format!("unknown label {n:?}")))
        };
        signatures.insert(Signature {
            subj: lookup(&spaces.object, &s)?,
            pred: lookup(&spaces.predicate, &p)?,
            obj: lookup(&spaces.object, &o)?,
        });
    }
    Ok(ZeroShotIndex { signatures })
}
