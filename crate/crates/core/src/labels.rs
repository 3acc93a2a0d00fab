use serde::{Deserialize, Serialize};

use crate::geometry::BoundingBox;

/// Output vocabulary of the classification head. `NoObject` is the last
/// logit; `GazeOnly` only ever receives positive targets during warm-up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Class {
    Candida,
    GazeOnly,
    NoObject,
}

pub const NUM_CLASSES: usize = 3;

impl Class {
    pub const fn index(self) -> usize {
        match self {
            Class::Candida => 0,
            Class::GazeOnly => 1,
            Class::NoObject => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Class::Candida),
            1 => Some(Class::GazeOnly),
            2 => Some(Class::NoObject),
            _ => None,
        }
    }
}

/// Target categories a box can carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Candida,
    GazeOnly,
}

impl Category {
    pub fn class(self) -> Class {
        match self {
            Category::Candida => Class::Candida,
            Category::GazeOnly => Class::GazeOnly,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub bbox: BoundingBox,
    pub category: Category,
}

impl LabeledBox {
    pub fn candida(bbox: BoundingBox) -> Self {
        Self {
            bbox,
            category: Category::Candida,
        }
    }

    pub fn gaze_only(bbox: BoundingBox) -> Self {
        Self {
            bbox,
            category: Category::GazeOnly,
        }
    }
}
