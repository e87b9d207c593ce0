//! Shared visual-centric memory.
//!
//! Three entity kinds live here: visual entries (embedded scene frames,
//! some flagged as keyframes), object entries with sighting histories, and
//! named place anchors. Every retrieval path returns [`NavigableResult`]s,
//! which always carry a global pose.

mod embed;
mod snapshot;

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use embed::{cosine, l2_norm, tokenize, Embedder, HashEmbedder, DEFAULT_DIM};
pub use snapshot::SNAPSHOT_SCHEMA_VERSION;

use crate::event::{EventBody, EventLog};
use crate::model::{pose_distance, FrameId, ObjectId, Pose3, RobotId, Tick};

/// Sightings of one category closer than this are the same instance.
pub const ASSOCIATION_RADIUS: f64 = 0.5;
/// Minimum cosine distance to the nearest keyframe for a frame to be novel.
pub const KEYFRAME_NOVELTY: f64 = 0.15;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MemoryError {
    #[error("text has no tokens")]
    EmptyText,
    #[error("structured filter has no populated field")]
    EmptyFilter,
    #[error("invalid filter: {0}")]
    InvalidFilter(String),
    #[error("`{0}` has never been observed")]
    NeverObserved(String),
    #[error("unknown anchor `{0}`")]
    UnknownAnchor(String),
    #[error("anchor name is empty")]
    EmptyAnchorName,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("entry has no derivable pose")]
    UnspatializedEntry,
    #[error("invalid observation: {0}")]
    InvalidFrame(String),
    #[error("snapshot: {0}")]
    Snapshot(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    #[default]
    Object,
    Person,
    Robot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationLabel {
    pub label: String,
    pub pose: Pose3,
    pub confidence: f64,
    #[serde(default)]
    pub kind: LabelKind,
    /// Free-text attributes ("sour lemon"); falls back to `label`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

impl ObservationLabel {
    pub fn text(&self) -> &str {
        self.description.as_deref().unwrap_or(&self.label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationFrame {
    pub frame_id: FrameId,
    pub robot_id: RobotId,
    pub sim_time: Tick,
    pub camera_pose: Pose3,
    pub labels: Vec<ObservationLabel>,
    pub description: String,
}

impl ObservationFrame {
    pub fn validate(&self) -> Result<(), MemoryError> {
        if !self.camera_pose.is_finite() {
            return Err(MemoryError::InvalidFrame("camera pose not finite".into()));
        }
        for l in &self.labels {
            if !(0.0..=1.0).contains(&l.confidence) {
                return Err(MemoryError::InvalidFrame(format!("confidence {} out of range", l.confidence)));
            }
            if !l.pose.is_finite() {
                return Err(MemoryError::InvalidFrame("label pose not finite".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualEntry {
    pub frame: ObservationFrame,
    pub embedding: Vec<f64>,
    pub is_keyframe: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sighting {
    pub tick: Tick,
    pub pose: Pose3,
    pub robot_id: RobotId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectEntry {
    pub object_id: ObjectId,
    pub category: String,
    pub last_pose: Pose3,
    pub last_seen: Tick,
    pub source_robot: RobotId,
    pub confidence: f64,
    pub history: Vec<Sighting>,
}

impl ObjectEntry {
    fn record(&mut self, sighting: Sighting, confidence: f64) {
        let at = self.history.partition_point(|s| s.tick <= sighting.tick);
        let is_latest = at == self.history.len();
        self.history.insert(at, sighting);
        if is_latest {
            let last = self.history.last().expect("just inserted");
            self.last_pose = last.pose;
            self.last_seen = last.tick;
            self.source_robot = last.robot_id.clone();
            self.confidence = confidence;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorSource {
    User,
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceAnchor {
    pub name: String,
    pub pose: Pose3,
    pub registered_by: AnchorSource,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Evidence {
    Frame(FrameId),
    Object(ObjectId),
    Anchor(String),
    Robot(RobotId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResultSource {
    Latent,
    Structured,
    Anchor,
}

/// Action-ready retrieval output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavigableResult {
    pub category: String,
    pub confidence: f64,
    pub evidence: Evidence,
    pub pose: Pose3,
    pub source: ResultSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observed_at: Option<Tick>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadiusFilter {
    pub center: Pose3,
    pub radius: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StructuredFilter {
    #[serde(default)]
    pub category: Option<String>,
    #[serde(default)]
    pub source_robot: Option<RobotId>,
    #[serde(default)]
    pub time_window: Option<(Tick, Tick)>,
    #[serde(default)]
    pub within_radius: Option<RadiusFilter>,
}

impl StructuredFilter {
    pub fn category(category: impl Into<String>) -> Self {
        Self { category: Some(category.into()), ..Self::default() }
    }

    pub fn is_empty(&self) -> bool {
        self.category.is_none() && self.source_robot.is_none() && self.time_window.is_none() && self.within_radius.is_none()
    }

    pub fn validate(&self) -> Result<(), MemoryError> {
        if let Some((from, to)) = self.time_window {
            if from > to {
                return Err(MemoryError::InvalidFilter(format!("time window {from} > {to}")));
            }
        }
        if let Some(r) = &self.within_radius {
            if !(r.radius > 0.0) {
                return Err(MemoryError::InvalidFilter("radius must be positive".into()));
            }
        }
        Ok(())
    }

    fn passes(&self, category: &str, robot: &RobotId, tick: Tick, pose: &Pose3) -> bool {
        self.category.as_ref().is_none_or(|c| c.eq_ignore_ascii_case(category))
            && self.source_robot.as_ref().is_none_or(|r| r == robot)
            && self.time_window.is_none_or(|(from, to)| from <= tick && tick <= to)
            && self.within_radius.as_ref().is_none_or(|r| pose_distance(&r.center, pose) <= r.radius)
    }

    fn passes_frame(&self, frame: &ObservationFrame) -> bool {
        let category_ok = self
            .category
            .as_ref()
            .is_none_or(|c| frame.labels.iter().any(|l| l.label.eq_ignore_ascii_case(c)));
        category_ok && Self { category: None, ..self.clone() }.passes("", &frame.robot_id, frame.sim_time, &frame.camera_pose)
    }
}

/// Borrowed entry handed to [`MemoryStore::normalize_result`].
pub enum RawEntry<'a> {
    Visual { entry: &'a VisualEntry, query: Option<&'a [f64]>, similarity: f64 },
    Object(&'a ObjectEntry),
    Anchor(&'a PlaceAnchor),
}

/// What one observation changed in the store.
#[derive(Debug, Clone, PartialEq)]
pub struct Insertion {
    pub visual: VisualEntry,
    pub objects: Vec<ObjectEntry>,
}

/// Keyframe rule: accept when the set is empty, when the nearest keyframe is
/// farther than [`KEYFRAME_NOVELTY`] in cosine distance, or when the frame
/// labels a category no keyframe has.
pub fn select_keyframe(candidate: &VisualEntry, existing_keyframes: &[&VisualEntry]) -> bool {
    if existing_keyframes.is_empty() {
        return true;
    }
    let nearest = existing_keyframes
        .iter()
        .map(|k| 1.0 - cosine(&candidate.embedding, &k.embedding))
        .fold(f64::INFINITY, f64::min);
    if nearest > KEYFRAME_NOVELTY {
        return true;
    }
    candidate.frame.labels.iter().any(|l| {
        !existing_keyframes
            .iter()
            .any(|k| k.frame.labels.iter().any(|kl| kl.label.eq_ignore_ascii_case(&l.label)))
    })
}

/// Ranking order for latent retrieval: similarity descending, then newer
/// frame, then smaller frame id.
pub fn semantic_order(a: (f64, Tick, FrameId), b: (f64, Tick, FrameId)) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(b.1.cmp(&a.1)).then(a.2.cmp(&b.2))
}

#[derive(Clone)]
pub struct MemoryStore {
    embedder: Arc<dyn Embedder>,
    visual: Vec<VisualEntry>,
    objects: BTreeMap<ObjectId, ObjectEntry>,
    anchors: BTreeMap<String, PlaceAnchor>,
    robot_tracks: BTreeMap<RobotId, Vec<Sighting>>,
    next_object: u64,
}

impl std::fmt::Debug for MemoryStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MemoryStore")
            .field("dim", &self.embedder.dim())
            .field("visual", &self.visual.len())
            .field("objects", &self.objects.len())
            .field("anchors", &self.anchors.len())
            .finish()
    }
}

impl Default for MemoryStore {
    fn default() -> Self {
        Self::new(Arc::new(HashEmbedder::default()))
    }
}

impl MemoryStore {
    pub fn new(embedder: Arc<dyn Embedder>) -> Self {
        Self {
            embedder,
            visual: Vec::new(),
            objects: BTreeMap::new(),
            anchors: BTreeMap::new(),
            robot_tracks: BTreeMap::new(),
            next_object: 1,
        }
    }

    pub fn dim(&self) -> usize {
        self.embedder.dim()
    }

    pub fn embed(&self, text: &str) -> Result<Vec<f64>, MemoryError> {
        self.embedder.embed(text)
    }

    pub fn visual_entries(&self) -> &[VisualEntry] {
        &self.visual
    }

    pub fn objects(&self) -> impl Iterator<Item = &ObjectEntry> {
        self.objects.values()
    }

    pub fn object(&self, id: &ObjectId) -> Option<&ObjectEntry> {
        self.objects.get(id)
    }

    pub fn anchors(&self) -> impl Iterator<Item = &PlaceAnchor> {
        self.anchors.values()
    }

    pub fn keyframes(&self) -> Vec<&VisualEntry> {
        self.visual.iter().filter(|v| v.is_keyframe).collect()
    }

    /// Most recent frame contributed by `robot`.
    pub fn latest_frame_of(&self, robot: &RobotId) -> Option<&ObservationFrame> {
        self.visual
            .iter()
            .filter(|v| &v.frame.robot_id == robot)
            .max_by_key(|v| (v.frame.sim_time, v.frame.frame_id))
            .map(|v| &v.frame)
    }

    /// Embeds and stores a frame, upserting every labeled object.
    pub fn insert_observation(&mut self, frame: ObservationFrame, log: &mut EventLog) -> Result<Insertion, MemoryError> {
        frame.validate()?;
        let embedding = self.embedder.embed(&frame.description)?;
        let mut entry = VisualEntry { frame, embedding, is_keyframe: false };
        entry.is_keyframe = select_keyframe(&entry, &self.keyframes());

        let mut touched = Vec::new();
        for label in &entry.frame.labels {
            let sighting = Sighting { tick: entry.frame.sim_time, pose: label.pose, robot_id: entry.frame.robot_id.clone() };
            if label.kind == LabelKind::Robot {
                self.push_robot_sighting(RobotId::new(label.label.clone()), sighting);
                continue;
            }
            let id = self.associate(&label.label, &label.pose);
            let obj = match id {
                Some(id) => {
                    let obj = self.objects.get_mut(&id).expect("associated id exists");
                    obj.record(sighting, label.confidence);
                    obj
                }
                None => {
                    let id = ObjectId::new(format!("obj-{}", self.next_object));
                    self.next_object += 1;
                    self.objects.entry(id.clone()).or_insert(ObjectEntry {
                        object_id: id,
                        category: label.label.clone(),
                        last_pose: label.pose,
                        last_seen: sighting.tick,
                        source_robot: sighting.robot_id.clone(),
                        confidence: label.confidence,
                        history: vec![sighting],
                    })
                }
            };
            touched.push(obj.clone());
        }

        log.emit(EventBody::MemoryInserted {
            frame_id: entry.frame.frame_id,
            robot_id: entry.frame.robot_id.clone(),
            is_keyframe: entry.is_keyframe,
            objects: touched.iter().map(|o| o.object_id.clone()).collect(),
        });
        self.visual.push(entry.clone());
        Ok(Insertion { visual: entry, objects: touched })
    }

    fn associate(&self, category: &str, pose: &Pose3) -> Option<ObjectId> {
        self.objects
            .values()
            .filter(|o| o.category.eq_ignore_ascii_case(category))
            .map(|o| (pose_distance(&o.last_pose, pose), &o.object_id))
            .filter(|(d, _)| *d <= ASSOCIATION_RADIUS)
            .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(b.1)))
            .map(|(_, id)| id.clone())
    }

    fn push_robot_sighting(&mut self, robot: RobotId, sighting: Sighting) {
        let track = self.robot_tracks.entry(robot).or_default();
        let at = track.partition_point(|s| s.tick <= sighting.tick);
        track.insert(at, sighting);
    }

    /// A robot's self-reported pose.
    pub fn report_robot_pose(&mut self, robot: &RobotId, tick: Tick, pose: Pose3) {
        self.push_robot_sighting(robot.clone(), Sighting { tick, pose, robot_id: robot.clone() });
    }

    /// Scores every scope-passing frame against the query and returns the
    /// top `k` as (frame id, similarity).
    pub fn rank_semantic(&self, query: &[f64], k: usize, scope: Option<&StructuredFilter>) -> Vec<(usize, f64)> {
        let mut scored: Vec<(usize, f64)> = self
            .visual
            .iter()
            .enumerate()
            .filter(|(_, v)| scope.is_none_or(|s| s.passes_frame(&v.frame)))
            .map(|(i, v)| (i, cosine(query, &v.embedding)))
            .collect();
        scored.sort_by(|a, b| {
            let fa = &self.visual[a.0].frame;
            let fb = &self.visual[b.0].frame;
            semantic_order((a.1, fa.sim_time, fa.frame_id), (b.1, fb.sim_time, fb.frame_id))
        });
        scored.truncate(k);
        scored
    }

    /// Latent cross-modal retrieval over visual entries.
    pub fn retrieve_semantic(&self, query: &str, k: usize, scope: Option<&StructuredFilter>) -> Result<Vec<NavigableResult>, MemoryError> {
        if k == 0 {
            return Err(MemoryError::ZeroK);
        }
        if let Some(s) = scope {
            s.validate()?;
        }
        let q = self.embedder.embed(query)?;
        self.rank_semantic(&q, k, scope)
            .into_iter()
            .map(|(i, similarity)| self.normalize_result(RawEntry::Visual { entry: &self.visual[i], query: Some(&q), similarity }))
            .collect()
    }

    /// Conjunctive metadata filter over object entries, newest first.
    pub fn retrieve_structured(&self, filter: &StructuredFilter) -> Result<Vec<NavigableResult>, MemoryError> {
        if filter.is_empty() {
            return Err(MemoryError::EmptyFilter);
        }
        filter.validate()?;
        let mut hits: Vec<&ObjectEntry> = self
            .objects
            .values()
            .filter(|o| filter.passes(&o.category, &o.source_robot, o.last_seen, &o.last_pose))
            .collect();
        hits.sort_by(|a, b| b.last_seen.cmp(&a.last_seen).then(a.object_id.cmp(&b.object_id)));
        hits.into_iter().map(|o| self.normalize_result(RawEntry::Object(o))).collect()
    }

    /// Newest pose of a robot (self-reports and sightings by others) or of an object.
    pub fn last_known_location(&self, subject: &str) -> Result<NavigableResult, MemoryError> {
        if let Some(last) = self.robot_tracks.get(&RobotId::new(subject)).and_then(|t| t.last()) {
            return Ok(NavigableResult {
                category: subject.to_owned(),
                confidence: 1.0,
                evidence: Evidence::Robot(RobotId::new(subject)),
                pose: last.pose,
                source: ResultSource::Structured,
                observed_at: Some(last.tick),
            });
        }
        let obj = self.objects.get(&ObjectId::new(subject)).ok_or_else(|| MemoryError::NeverObserved(subject.to_owned()))?;
        let mut result = self.normalize_result(RawEntry::Object(obj))?;
        result.observed_at = Some(obj.last_seen);
        Ok(result)
    }

    /// Upserts an anchor. User annotations override automatic ones, never the reverse.
    pub fn register_anchor(&mut self, name: &str, pose: Pose3, registered_by: AnchorSource) -> Result<PlaceAnchor, MemoryError> {
        let name = name.trim();
        if name.is_empty() {
            return Err(MemoryError::EmptyAnchorName);
        }
        let key = name.to_lowercase();
        if let Some(existing) = self.anchors.get(&key) {
            if existing.registered_by == AnchorSource::User && registered_by == AnchorSource::Auto {
                return Ok(existing.clone());
            }
        }
        let anchor = PlaceAnchor { name: name.to_owned(), pose, registered_by };
        self.anchors.insert(key, anchor.clone());
        Ok(anchor)
    }

    pub fn anchor(&self, name: &str) -> Option<&PlaceAnchor> {
        self.anchors.get(&name.trim().to_lowercase())
    }

    pub fn resolve_anchor(&self, name: &str) -> Result<NavigableResult, MemoryError> {
        let anchor = self.anchor(name).ok_or_else(|| MemoryError::UnknownAnchor(name.to_owned()))?;
        self.normalize_result(RawEntry::Anchor(anchor))
    }

    /// Maps any stored entry into the navigable return protocol.
    pub fn normalize_result(&self, raw: RawEntry<'_>) -> Result<NavigableResult, MemoryError> {
        let result = match raw {
            RawEntry::Object(o) => NavigableResult {
                category: o.category.clone(),
                confidence: o.confidence,
                evidence: Evidence::Object(o.object_id.clone()),
                pose: o.last_pose,
                source: ResultSource::Structured,
                observed_at: Some(o.last_seen),
            },
            RawEntry::Anchor(a) => NavigableResult {
                category: a.name.clone(),
                confidence: 1.0,
                evidence: Evidence::Anchor(a.name.clone()),
                pose: a.pose,
                source: ResultSource::Anchor,
                observed_at: None,
            },
            RawEntry::Visual { entry, query, similarity } => {
                let frame = &entry.frame;
                let matched = query.and_then(|q| self.best_label(frame, q));
                let (category, pose) = match matched {
                    Some(l) => (l.label.clone(), l.pose),
                    None => (fallback_category(&frame.description), frame.camera_pose),
                };
                NavigableResult {
                    category,
                    confidence: similarity.clamp(0.0, 1.0),
                    evidence: Evidence::Frame(frame.frame_id),
                    pose,
                    source: ResultSource::Latent,
                    observed_at: Some(frame.sim_time),
                }
            }
        };
        if !result.pose.is_finite() {
            return Err(MemoryError::UnspatializedEntry);
        }
        Ok(result)
    }

    /// Label most similar to the query; ties go to higher confidence, then
    /// label order. Labels with non-positive similarity never match.
    fn best_label<'f>(&self, frame: &'f ObservationFrame, query: &[f64]) -> Option<&'f ObservationLabel> {
        let mut best: Option<(&ObservationLabel, f64)> = None;
        for l in &frame.labels {
            let Ok(v) = self.embedder.embed(l.text()) else { continue };
            let s = cosine(query, &v);
            if s <= 0.0 {
                continue;
            }
            let better = match best {
                None => true,
                Some((b, bs)) => s > bs || (s == bs && l.confidence > b.confidence),
            };
            if better {
                best = Some((l, s));
            }
        }
        best.map(|(l, _)| l)
    }
}

/// Category for an unlabeled frame: the description up to its first comma.
fn fallback_category(description: &str) -> String {
    description.split(',').next().unwrap_or("").trim().to_owned()
}

/// Ranks free-text candidates against a query with the store's embedder.
/// Returns candidate indices by similarity descending, ties by index.
pub fn rank_texts(embedder: &dyn Embedder, query: &str, candidates: &[&str]) -> Result<Vec<(usize, f64)>, MemoryError> {
    let q = embedder.embed(query)?;
    let mut scored = Vec::with_capacity(candidates.len());
    for (i, c) in candidates.iter().enumerate() {
        scored.push((i, cosine(&q, &embedder.embed(c)?)));
    }
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    Ok(scored)
}

impl MemoryStore {
    pub fn embedder(&self) -> &dyn Embedder {
        self.embedder.as_ref()
    }
}
