//! The 15 evaluation classes and their groupings.

pub const NUM_CLASSES: usize = 15;
/// Sentinel for unsupervised pixels in pseudo segmentation maps.
pub const IGNORE: u8 = 255;

pub const BICYCLE: u8 = 0;
pub const MOTORCYCLE: u8 = 1;
pub const PEDESTRIAN: u8 = 2;
pub const BUS: u8 = 3;
pub const CAR: u8 = 4;
pub const CONSTRUCTION_VEHICLE: u8 = 5;
pub const TRAILER: u8 = 6;
pub const TRUCK: u8 = 7;
pub const BARRIER: u8 = 8;
pub const TRAFFIC_CONE: u8 = 9;
pub const DRIVEABLE_SURFACE: u8 = 10;
pub const SIDEWALK: u8 = 11;
pub const TERRAIN: u8 = 12;
pub const MANMADE: u8 = 13;
pub const VEGETATION: u8 = 14;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "bicycle",
    "motorcycle",
    "pedestrian",
    "bus",
    "car",
    "construction_vehicle",
    "trailer",
    "truck",
    "barrier",
    "traffic_cone",
    "driveable_surface",
    "sidewalk",
    "terrain",
    "manmade",
    "vegetation",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassTaxonomy {
    pub names: Vec<String>,
    pub human: Vec<usize>,
    pub instance: Vec<usize>,
    pub scene: Vec<usize>,
}

impl Default for ClassTaxonomy {
    fn default() -> Self {
        ClassTaxonomy {
            names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            human: vec![0, 1, 2],
            instance: (0..10).collect(),
            scene: (10..15).collect(),
        }
    }
}

impl ClassTaxonomy {
    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

pub fn is_human(class: u8) -> bool {
    class <= PEDESTRIAN
}

/// Human or vehicle classes (the movable ones).
pub fn is_movable(class: u8) -> bool {
    class <= TRUCK
}
