//! Scene graphs: vocabulary, boxes, validation, JSON interchange, and
//! automatic spatial-relation inference from bounding boxes.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MigsError, Result};
use crate::image::RgbImage;

/// The six mutually exclusive spatial predicates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpatialRelation {
    LeftOf,
    RightOf,
    Above,
    Below,
    Inside,
    Surrounding,
}

impl SpatialRelation {
    pub const ALL: [SpatialRelation; 6] = [
        SpatialRelation::LeftOf,
        SpatialRelation::RightOf,
        SpatialRelation::Above,
        SpatialRelation::Below,
        SpatialRelation::Inside,
        SpatialRelation::Surrounding,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SpatialRelation::LeftOf => "left of",
            SpatialRelation::RightOf => "right of",
            SpatialRelation::Above => "above",
            SpatialRelation::Below => "below",
            SpatialRelation::Inside => "inside",
            SpatialRelation::Surrounding => "surrounding",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyRepr")]
pub struct Vocabulary {
    object_categories: Vec<String>,
    predicate_categories: Vec<String>,
}

#[derive(Deserialize)]
struct VocabularyRepr {
    object_categories: Vec<String>,
    predicate_categories: Vec<String>,
}

impl TryFrom<VocabularyRepr> for Vocabulary {
    type Error = MigsError;
    fn try_from(r: VocabularyRepr) -> Result<Self> {
        Vocabulary::new(r.object_categories, r.predicate_categories)
    }
}

impl Vocabulary {
    pub fn new(object_categories: Vec<String>, predicate_categories: Vec<String>) -> Result<Self> {
        if object_categories.is_empty() || predicate_categories.is_empty() {
            return Err(MigsError::Config(
                "vocabulary lists must be non-empty".into(),
            ));
        }
        for (what, list) in [
            ("object", &object_categories),
            ("predicate", &predicate_categories),
        ] {
            let mut seen = HashSet::new();
            for name in list {
                if !seen.insert(name.as_str()) {
                    return Err(MigsError::Config(format!(
                        "duplicate {what} category {name:?}"
                    )));
                }
            }
        }
        for rel in SpatialRelation::ALL {
            if !predicate_categories.iter().any(|p| p == rel.name()) {
                return Err(MigsError::Config(format!(
                    "missing spatial predicate {:?}",
                    rel.name()
                )));
            }
        }
        Ok(Self {
            object_categories,
            predicate_categories,
        })
    }

    /// Vocabulary whose predicates are exactly the six spatial relations.
    pub fn spatial(object_categories: Vec<String>) -> Result<Self> {
        Self::new(
            object_categories,
            SpatialRelation::ALL
                .iter()
                .map(|r| r.name().to_string())
                .collect(),
        )
    }

    pub fn object_categories(&self) -> &[String] {
        &self.object_categories
    }

    pub fn predicate_categories(&self) -> &[String] {
        &self.predicate_categories
    }

    pub fn num_objects(&self) -> usize {
        self.object_categories.len()
    }

    pub fn num_predicates(&self) -> usize {
        self.predicate_categories.len()
    }

    pub fn object_index(&self, name: &str) -> Option<usize> {
        self.object_categories.iter().position(|c| c == name)
    }

    pub fn predicate_index(&self, rel: SpatialRelation) -> usize {
        self.predicate_categories
            .iter()
            .position(|p| p == rel.name())
            .expect("spatial predicates are checked at construction")
    }
}

/// Axis-aligned box in normalised image coordinates, y pointing down.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = MigsError;
    fn try_from(c: [f64; 4]) -> Result<Self> {
        BoundingBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = Self { x0, y0, x1, y1 };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(MigsError::Contract(format!(
                "invalid box {:?}",
                [x0, y0, x1, y1]
            )))
        }
    }

    pub fn is_valid(&self) -> bool {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        in_unit(self.x0)
            && in_unit(self.y0)
            && in_unit(self.x1)
            && in_unit(self.y1)
            && self.x0 < self.x1
            && self.y0 < self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) * 0.5, (self.y0 + self.y1) * 0.5)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    /// Proper containment: `other` lies within `self` and the summed side
    /// margins exceed `CONTAINMENT_MARGIN`, so equal boxes never contain
    /// each other.
    pub fn strictly_contains(&self, other: &BoundingBox) -> bool {
        let margins = [
            other.x0 - self.x0,
            other.y0 - self.y0,
            self.x1 - other.x1,
            self.y1 - other.y1,
        ];
        margins.iter().all(|&m| m >= 0.0) && margins.iter().sum::<f64>() > CONTAINMENT_MARGIN
    }

    pub fn to_array(self) -> [f64; 4] {
        self.into()
    }
}

pub const CONTAINMENT_MARGIN: f64 = 1e-6;

/// Directed `(subject, predicate, object)` edge, serialised as `[s, p, o]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct Triplet {
    pub subject: usize,
    pub predicate: usize,
    pub object: usize,
}

impl From<[usize; 3]> for Triplet {
    fn from(t: [usize; 3]) -> Self {
        Self {
            subject: t[0],
            predicate: t[1],
            object: t[2],
        }
    }
}

impl From<Triplet> for [usize; 3] {
    fn from(t: Triplet) -> Self {
        [t.subject, t.predicate, t.object]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SceneGraph {
    pub objects: Vec<usize>,
    pub edges: Vec<Triplet>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    NoObjects,
    UnknownObjectCategory { node: usize, category: usize },
    UnknownPredicate { edge: usize, predicate: usize },
    EndpointOutOfRange { edge: usize, index: usize },
    SelfEdge { edge: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoObjects => write!(f, "no objects"),
            Violation::UnknownObjectCategory { node, category } => {
                write!(f, "unknown object category {category} at node {node}")
            }
            Violation::UnknownPredicate { edge, predicate } => {
                write!(f, "unknown predicate {predicate} at edge {edge}")
            }
            Violation::EndpointOutOfRange { edge, index } => {
                write!(f, "edge {edge} references missing node {index}")
            }
            Violation::SelfEdge { edge } => write!(f, "self-edge at edge {edge}"),
        }
    }
}

/// Every invariant violation of `graph` against `vocab`; empty means valid.
pub fn validate(graph: &SceneGraph, vocab: &Vocabulary) -> Vec<Violation> {
    let mut out = Vec::new();
    if graph.objects.is_empty() {
        out.push(Violation::NoObjects);
    }
    for (node, &category) in graph.objects.iter().enumerate() {
        if category >= vocab.num_objects() {
            out.push(Violation::UnknownObjectCategory { node, category });
        }
    }
    let n = graph.objects.len();
    for (edge, t) in graph.edges.iter().enumerate() {
        if t.predicate >= vocab.num_predicates() {
            out.push(Violation::UnknownPredicate {
                edge,
                predicate: t.predicate,
            });
        }
        for index in [t.subject, t.object] {
            if index >= n {
                out.push(Violation::EndpointOutOfRange { edge, index });
            }
        }
        if t.subject == t.object {
            out.push(Violation::SelfEdge { edge });
        }
    }
    out
}

/// Like [`validate`] but folds violations into an error.
pub fn ensure_valid(graph: &SceneGraph, vocab: &Vocabulary) -> Result<()> {
    let v = validate(graph, vocab);
    if v.is_empty() {
        Ok(())
    } else {
        let msgs: Vec<String> = v.iter().map(|x| x.to_string()).collect();
        Err(MigsError::InvalidGraph(msgs.join("; ")))
    }
}

/// Relation of box `a` relative to box `b` ("a is <rel> b").
pub fn spatial_relation(a: &BoundingBox, b: &BoundingBox) -> SpatialRelation {
    if a.strictly_contains(b) {
        return SpatialRelation::Surrounding;
    }
    if b.strictly_contains(a) {
        return SpatialRelation::Inside;
    }
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    let phi = (by - ay).atan2(bx - ax).to_degrees();
    if (-45.0..45.0).contains(&phi) {
        SpatialRelation::LeftOf
    } else if (45.0..135.0).contains(&phi) {
        SpatialRelation::Above
    } else if (-135.0..-45.0).contains(&phi) {
        SpatialRelation::Below
    } else {
        SpatialRelation::RightOf
    }
}

/// One edge `(i, p, j)` for every pair `i < j`.
pub fn infer_spatial_relations(boxes: &[BoundingBox], vocab: &Vocabulary) -> Result<Vec<Triplet>> {
    if let Some(bad) = boxes.iter().find(|b| !b.is_valid()) {
        return Err(MigsError::Contract(format!(
            "invalid box {:?}",
            bad.to_array()
        )));
    }
    let mut edges = Vec::with_capacity(boxes.len() * boxes.len().saturating_sub(1) / 2);
    for i in 0..boxes.len() {
        for j in i + 1..boxes.len() {
            edges.push(Triplet {
                subject: i,
                predicate: vocab.predicate_index(spatial_relation(&boxes[i], &boxes[j])),
                object: j,
            });
        }
    }
    Ok(edges)
}

/// An image with its scene graph, per-object boxes, and task attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedScene {
    pub image: RgbImage,
    pub graph: SceneGraph,
    pub boxes: Vec<BoundingBox>,
    pub attributes: BTreeMap<String, String>,
}

/// JSON form of a scene; pixels live in a separate PNG named by `image`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub objects: Vec<usize>,
    pub edges: Vec<Triplet>,
    pub boxes: Vec<BoundingBox>,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
    pub image: String,
}

impl SceneRecord {
    pub fn graph(&self) -> SceneGraph {
        SceneGraph {
            objects: self.objects.clone(),
            edges: self.edges.clone(),
        }
    }

    fn check(&self) -> Result<()> {
        if self.objects.is_empty() {
            return Err(MigsError::InvalidGraph("scene has no objects".into()));
        }
        if self.boxes.len() != self.objects.len() {
            return Err(MigsError::InvalidGraph(format!(
                "{} boxes for {} objects",
                self.boxes.len(),
                self.objects.len()
            )));
        }
        for (k, t) in self.edges.iter().enumerate() {
            if t.subject == t.object {
                return Err(MigsError::InvalidGraph(format!("self-edge at edge {k}")));
            }
            if t.subject >= self.objects.len() || t.object >= self.objects.len() {
                return Err(MigsError::InvalidGraph(format!(
                    "edge {k} endpoint out of range"
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene records always serialise")
    }

    /// Parse and check structural invariants (vocabulary ranges are checked
    /// separately by [`validate`]).
    pub fn from_json(text: &str) -> Result<Self> {
        let rec: SceneRecord = serde_json::from_str(text).map_err(|e| MigsError::from_json(&e))?;
        rec.check()?;
        Ok(rec)
    }
}

impl AnnotatedScene {
    pub fn new(
        image: RgbImage,
        graph: SceneGraph,
        boxes: Vec<BoundingBox>,
        attributes: BTreeMap<String, String>,
    ) -> Result<Self> {
        if boxes.len() != graph.objects.len() {
            return Err(MigsError::Contract(format!(
                "{} boxes for {} objects",
                boxes.len(),
                graph.objects.len()
            )));
        }
        Ok(Self {
            image,
            graph,
            boxes,
            attributes,
        })
    }

    pub fn record(&self, image_ref: &str) -> SceneRecord {
        SceneRecord {
            objects: self.graph.objects.clone(),
            edges: self.graph.edges.clone(),
            boxes: self.boxes.clone(),
            attributes: self.attributes.clone(),
            image: image_ref.to_string(),
        }
    }

    pub fn to_json(&self, image_ref: &str) -> String {
        self.record(image_ref).to_json()
    }

    /// Rebuild a scene from its record and already-decoded pixels.
    pub fn from_record(record: SceneRecord, image: RgbImage) -> Result<Self> {
        record.check()?;
        Ok(Self {
            graph: record.graph(),
            boxes: record.boxes,
            attributes: record.attributes,
            image,
        })
    }

    /// Write `<dir>/<stem>.json` and `<dir>/<stem>.png`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let png = format!("{stem}.png");
        self.image.save_png(&dir.join(&png))?;
        let json_path = dir.join(format!("{stem}.json"));
        std::fs::write(&json_path, self.to_json(&png)).map_err(|e| MigsError::io(&json_path, e))
    }

    /// Load a scene JSON file and the PNG it references (relative to the
    /// JSON file's directory).
    pub fn load(json_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(json_path).map_err(|e| MigsError::io(json_path, e))?;
        let record = SceneRecord::from_json(&text).map_err(|e| with_path(e, json_path))?;
        let dir = json_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let image = RgbImage::load_png(&dir.join(&record.image))?;
        Self::from_record(record, image)
    }
}

fn with_path(err: MigsError, path: &Path) -> MigsError {
    match err {
        MigsError::Parse { .. } | MigsError::InvalidGraph(_) => MigsError::Format {
            path: path.to_path_buf(),
            message: err.to_string(),
        },
        other => other,
    }
}
