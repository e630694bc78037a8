//! Plain data carried between the simulator, the model and the evaluator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Box7, Point3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ObjectClass {
    Car,
    Pedestrian,
    Cyclist,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 3] = [ObjectClass::Car, ObjectClass::Pedestrian, ObjectClass::Cyclist];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        match self {
            ObjectClass::Car => 0,
            ObjectClass::Pedestrian => 1,
            ObjectClass::Cyclist => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Car => "Car",
            ObjectClass::Pedestrian => "Pedestrian",
            ObjectClass::Cyclist => "Cyclist",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| Error::Invalid(format!("unknown class `{s}`")))
    }
}

impl std::fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A labeled box as stored on disk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub class: ObjectClass,
    pub bbox: Box7,
    pub moving: bool,
}

/// Simulator object: an annotation plus its velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub class: ObjectClass,
    pub bbox: Box7,
    pub moving: bool,
    pub velocity: [f64; 3],
}

impl ObjectSpec {
    pub fn new(class: ObjectClass, bbox: Box7, velocity: [f64; 3]) -> Result<Self> {
        if velocity.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("non-finite velocity {velocity:?}")));
        }
        let moving = velocity.iter().any(|&v| v != 0.0);
        Ok(Self { class, bbox, moving, velocity })
    }

    pub fn annotation(&self) -> Annotation {
        Annotation { class: self.class, bbox: self.bbox, moving: self.moving }
    }

    pub fn speed(&self) -> f64 {
        self.velocity.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LidarPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

impl LidarPoint {
    pub fn pos(&self) -> Point3 {
        Point3::new(self.x, self.y, self.z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadarPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Radial velocity relative to the moving sensor, m/s.
    pub v_rel: f64,
    /// Ego-compensated radial speed, m/s, nonnegative.
    pub v_abs: f64,
    pub rcs: f64,
}

impl RadarPoint {
    pub fn pos(&self) -> Point3 {
        Point3::new(self.x, self.y, self.z)
    }
}

/// Where a simulated radar return came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RadarOrigin {
    /// Reflection inside object `index`; `dropped` marks a forced zero velocity.
    Object {
        index: usize,
        dropped: bool,
    },
    Clutter,
    Ghost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFrame {
    pub frame_id: u64,
    pub objects: Vec<ObjectSpec>,
    pub lidar: Vec<LidarPoint>,
    pub radar: Vec<RadarPoint>,
    /// Simulator provenance per radar point; empty for frames read from disk.
    pub radar_origin: Vec<RadarOrigin>,
    /// Per object: center inside the driving corridor.
    pub in_corridor: Vec<bool>,
}

impl SceneFrame {
    pub fn annotations(&self) -> Vec<Annotation> {
        self.objects.iter().map(ObjectSpec::annotation).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_names_round_trip() {
        for c in ObjectClass::ALL {
            assert_eq!(ObjectClass::from_name(c.name()).unwrap(), c);
            assert_eq!(ObjectClass::from_index(c.index()), Some(c));
        }
        assert!(ObjectClass::from_name("Truck").is_err());
    }

    #[test]
    fn moving_iff_nonzero_velocity() {
        let b = Box7::new(5.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0).unwrap();
        assert!(!ObjectSpec::new(ObjectClass::Car, b, [0.0; 3]).unwrap().moving);
        assert!(ObjectSpec::new(ObjectClass::Car, b, [0.0, 1e-3, 0.0]).unwrap().moving);
    }
}
