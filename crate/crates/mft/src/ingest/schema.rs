//! Dataset flavors, context layouts and label-encoding tables.
//!
//! Categorical attributes are encoded as 0-based integers following the
//! order in which their values are listed below. The tables are fixed and
//! shipped with every checkpoint.

use serde::{Deserialize, Serialize};

use crate::error::{MftError, Result};

/// Annotation schema variant. JAAD carries head nod and road type; PIE folds
/// head nod into hand gesture and derives the stop-sign flag from signage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flavor {
    Jaad,
    Pie,
}

impl Flavor {
    pub fn name(self) -> &'static str {
        match self {
            Flavor::Jaad => "jaad",
            Flavor::Pie => "pie",
        }
    }

    pub fn parse(name: &str) -> Result<Flavor> {
        match name.to_ascii_lowercase().as_str() {
            "jaad" => Ok(Flavor::Jaad),
            "pie" => Ok(Flavor::Pie),
            other => Err(MftError::Config(format!("unknown flavor {other:?}"))),
        }
    }

    /// Column names of `context` in encoding order.
    pub fn columns(self, context: Context) -> &'static [&'static str] {
        match (context, self) {
            (Context::Behavior, Flavor::Jaad) => &[
                "motion_state",
                "gaze_state",
                "head_nod",
                "hand_gesture",
                "motion_direction",
            ],
            (Context::Behavior, Flavor::Pie) => {
                &["motion_state", "gaze_state", "hand_gesture", "motion_direction"]
            }
            (Context::Localization, _) => &["x1", "y1", "x2", "y2"],
            (Context::Vehicle, _) => &["speed"],
            (Context::Environment, Flavor::Jaad) => &[
                "lane_count",
                "intersection",
                "crosswalk",
                "traffic_light",
                "traffic_direction",
                "road_type",
                "stop_sign",
                "signage_type",
            ],
            (Context::Environment, Flavor::Pie) => &[
                "lane_count",
                "intersection",
                "crosswalk",
                "traffic_light",
                "traffic_direction",
                "stop_sign",
                "signage_type",
            ],
        }
    }

    pub fn width(self, context: Context) -> usize {
        self.columns(context).len()
    }

    /// Label-encoding table of a categorical attribute, if it applies to this flavor.
    pub fn code_table(self, attribute: &str) -> Option<&'static [&'static str]> {
        Some(match (attribute, self) {
            ("motion_state", _) => &["standing", "walking"],
            ("gaze_state", _) => &["looking", "not_looking"],
            ("head_nod", Flavor::Jaad) => &["nodding", "other"],
            ("hand_gesture", Flavor::Jaad) => &["greeting", "yielding", "right_of_way", "other"],
            ("hand_gesture", Flavor::Pie) => {
                &["greeting", "yielding", "right_of_way", "nod", "other"]
            }
            ("motion_direction", _) => &["lateral", "longitudinal", "other"],
            ("traffic_light", _) => &["red", "green", "other"],
            ("traffic_direction", _) => &["one_way", "two_way"],
            ("road_type", Flavor::Jaad) => &["street", "parking_lot", "garage"],
            ("signage_type", _) => &[
                "none",
                "pedestrian_crossing",
                "stop",
                "yield",
                "school",
                "other",
            ],
            _ => return None,
        })
    }

    /// Signage values that imply a stop sign (used to derive the PIE flag).
    pub fn stop_signage(self) -> &'static [&'static str] {
        &["stop"]
    }
}

/// The four per-frame input contexts, in token order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Context {
    /// Pedestrian behavior (P).
    Behavior,
    /// Pedestrian bounding box (L).
    Localization,
    /// Ego-vehicle speed (V).
    Vehicle,
    /// Traffic environment (E).
    Environment,
}

impl Context {
    pub const ALL: [Context; 4] = [
        Context::Behavior,
        Context::Localization,
        Context::Vehicle,
        Context::Environment,
    ];

    /// One-letter label used in parameter names and attention summaries.
    pub fn symbol(self) -> &'static str {
        match self {
            Context::Behavior => "P",
            Context::Localization => "L",
            Context::Vehicle => "V",
            Context::Environment => "E",
        }
    }
}

/// Categorical code table, serialized with checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodeTable {
    pub attribute: String,
    pub values: Vec<String>,
}

impl CodeTable {
    pub fn code(&self, value: &str) -> Option<usize> {
        self.values.iter().position(|v| v == value)
    }

    pub fn value(&self, code: usize) -> Option<&str> {
        self.values.get(code).map(String::as_str)
    }
}

/// All categorical tables of a flavor, in column order.
pub fn code_tables(flavor: Flavor) -> Vec<CodeTable> {
    Context::ALL
        .iter()
        .flat_map(|c| flavor.columns(*c))
        .filter_map(|attr| {
            flavor.code_table(attr).map(|values| CodeTable {
                attribute: attr.to_string(),
                values: values.iter().map(|v| v.to_string()).collect(),
            })
        })
        .collect()
}
