//! Sparse object maps and their JSON exchange format.
//!
//! Wire format, one UTF-8 JSON object per shared map:
//!
//! ```json
//! {"robot_id": "r0", "stamp": 12.0,
//!  "objects": [{"id": 3, "p": [1.0, 2.0, 0.4], "w": 0.8, "h": 0.8, "last_seen": 11.9}]}
//! ```
//!
//! Floats are written in shortest round-trip form, so a decoded map is
//! bit-identical to the encoded one.

use std::collections::HashSet;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("malformed map message: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("object {id}: {field} must be positive and finite, got {value}")]
    InvalidExtent {
        id: u64,
        field: &'static str,
        value: f64,
    },
    #[error("object {id}: non-finite centroid or timestamp")]
    NonFinite { id: u64 },
    #[error("duplicate object id {0}")]
    DuplicateId(u64),
}

/// One mapped object, expressed in the owning robot's odometry frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectLandmark {
    pub id: u64,
    #[serde(rename = "p", with = "vec3")]
    pub centroid: Vector3<f64>,
    #[serde(rename = "w")]
    pub width: f64,
    #[serde(rename = "h")]
    pub height: f64,
    pub last_seen: f64,
}

impl ObjectLandmark {
    pub fn new(id: u64, centroid: Vector3<f64>, width: f64, height: f64, last_seen: f64) -> Self {
        Self {
            id,
            centroid,
            width,
            height,
            last_seen,
        }
    }

    /// Time since last seen, clamped at zero when clocks disagree.
    pub fn age(&self, now: f64) -> f64 {
        (now - self.last_seen).max(0.0)
    }

    fn validate(&self) -> Result<(), MapError> {
        for (field, value) in [("w", self.width), ("h", self.height)] {
            if !(value.is_finite() && value > 0.0) {
                return Err(MapError::InvalidExtent {
                    id: self.id,
                    field,
                    value,
                });
            }
        }
        if !self.centroid.iter().all(|v| v.is_finite()) || !self.last_seen.is_finite() {
            return Err(MapError::NonFinite { id: self.id });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapParams {
    /// Objects older than this many seconds are left out of shared maps.
    pub kappa: f64,
}

impl Default for MapParams {
    fn default() -> Self {
        Self { kappa: 20.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectMap {
    pub robot_id: String,
    pub stamp: f64,
    pub objects: Vec<ObjectLandmark>,
}

impl ObjectMap {
    pub fn new(robot_id: impl Into<String>) -> Self {
        Self {
            robot_id: robot_id.into(),
            stamp: 0.0,
            objects: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&ObjectLandmark> {
        self.objects.iter().find(|o| o.id == id)
    }

    /// Inserts a new object or refreshes the stored one with the same id.
    pub fn upsert(&mut self, obs: ObjectLandmark) {
        self.stamp = self.stamp.max(obs.last_seen);
        match self.objects.iter_mut().find(|o| o.id == obs.id) {
            Some(existing) => *existing = obs,
            None => self.objects.push(obs),
        }
    }

    /// Copy of the map holding only objects seen less than `kappa` seconds
    /// before `now`.
    pub fn recent_view(&self, now: f64, params: &MapParams) -> ObjectMap {
        ObjectMap {
            robot_id: self.robot_id.clone(),
            stamp: now,
            objects: self
                .objects
                .iter()
                .filter(|o| o.age(now) < params.kappa)
                .cloned()
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("map serialization cannot fail")
    }

    pub fn serialize(&self) -> Vec<u8> {
        self.to_json().into_bytes()
    }

    pub fn deserialize(bytes: &[u8]) -> Result<ObjectMap, MapError> {
        let map: ObjectMap = serde_json::from_slice(bytes)?;
        let mut seen = HashSet::with_capacity(map.objects.len());
        for o in &map.objects {
            o.validate()?;
            if !seen.insert(o.id) {
                return Err(MapError::DuplicateId(o.id));
            }
        }
        Ok(map)
    }
}

mod vec3 {
    use nalgebra::Vector3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Vector3<f64>, s: S) -> Result<S::Ok, S::Error> {
        [v.x, v.y, v.z].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector3<f64>, D::Error> {
        let [x, y, z] = <[f64; 3]>::deserialize(d)?;
        Ok(Vector3::new(x, y, z))
    }
}
