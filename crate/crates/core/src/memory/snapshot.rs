//! Line-oriented memory snapshots: a header line, then one record per line.

use std::io::{BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Embedder, MemoryError, MemoryStore, ObjectEntry, PlaceAnchor, Sighting, VisualEntry};
use crate::model::RobotId;

pub const SNAPSHOT_SCHEMA_VERSION: u32 = 1;
const SNAPSHOT_SCHEMA: &str = "efleet.memory";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema: String,
    schema_version: u32,
    dim: usize,
    next_object: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record {
    Visual(VisualEntry),
    Object(ObjectEntry),
    Anchor(PlaceAnchor),
    RobotTrack { robot_id: RobotId, sightings: Vec<Sighting> },
}

fn io_err(e: impl std::fmt::Display) -> MemoryError {
    MemoryError::Snapshot(e.to_string())
}

impl MemoryStore {
    pub fn write_snapshot<W: Write>(&self, mut out: W) -> Result<(), MemoryError> {
        let header = Header {
            schema: SNAPSHOT_SCHEMA.to_owned(),
            schema_version: SNAPSHOT_SCHEMA_VERSION,
            dim: self.dim(),
            next_object: self.next_object,
        };
        write_line(&mut out, &header)?;
        for v in &self.visual {
            write_line(&mut out, &Record::Visual(v.clone()))?;
        }
        for o in self.objects.values() {
            write_line(&mut out, &Record::Object(o.clone()))?;
        }
        for a in self.anchors.values() {
            write_line(&mut out, &Record::Anchor(a.clone()))?;
        }
        for (robot_id, sightings) in &self.robot_tracks {
            write_line(&mut out, &Record::RobotTrack { robot_id: robot_id.clone(), sightings: sightings.clone() })?;
        }
        Ok(())
    }

    pub fn snapshot_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_snapshot(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("snapshot is utf-8")
    }

    /// Rebuilds a store. The embedder must match the recorded dimension.
    pub fn load_snapshot<R: BufRead>(input: R, embedder: Arc<dyn Embedder>) -> Result<Self, MemoryError> {
        let mut lines = input.lines();
        let first = lines.next().ok_or_else(|| io_err("empty snapshot"))?.map_err(io_err)?;
        let header: Header = serde_json::from_str(&first).map_err(io_err)?;
        if header.schema != SNAPSHOT_SCHEMA || header.schema_version != SNAPSHOT_SCHEMA_VERSION {
            return Err(io_err(format!("unsupported snapshot schema {} v{}", header.schema, header.schema_version)));
        }
        if header.dim != embedder.dim() {
            return Err(io_err(format!("snapshot dimension {} does not match embedder {}", header.dim, embedder.dim())));
        }
        let mut store = MemoryStore::new(embedder);
        store.next_object = header.next_object;
        for line in lines {
            let line = line.map_err(io_err)?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<Record>(&line).map_err(io_err)? {
                Record::Visual(v) => {
                    if v.embedding.len() != header.dim {
                        return Err(io_err("embedding dimension mismatch"));
                    }
                    store.visual.push(v);
                }
                Record::Object(o) => {
                    store.objects.insert(o.object_id.clone(), o);
                }
                Record::Anchor(a) => {
                    store.anchors.insert(a.name.to_lowercase(), a);
                }
                Record::RobotTrack { robot_id, sightings } => {
                    store.robot_tracks.insert(robot_id, sightings);
                }
            }
        }
        Ok(store)
    }
}

fn write_line<W: Write, T: Serialize>(out: &mut W, value: &T) -> Result<(), MemoryError> {
    let line = serde_json::to_string(value).map_err(io_err)?;
    out.write_all(line.as_bytes()).map_err(io_err)?;
    out.write_all(b"\n").map_err(io_err)
}
