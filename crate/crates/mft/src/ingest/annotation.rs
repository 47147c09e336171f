//! Per-frame annotation records and their JSONL representation.

use std::io::{BufRead, Write};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::error::Category;

use super::schema::Flavor;
use crate::error::{MftError, Result};

/// Label-encoded pedestrian behavior attributes of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Behavior {
    pub motion_state: u8,
    pub gaze_state: u8,
    /// JAAD only.
    pub head_nod: Option<u8>,
    pub hand_gesture: u8,
    pub motion_direction: u8,
}

/// Label-encoded traffic environment attributes of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Environment {
    pub lane_count: u32,
    pub intersection: bool,
    pub crosswalk: bool,
    pub traffic_light: u8,
    pub traffic_direction: u8,
    /// JAAD only.
    pub road_type: Option<u8>,
    /// Annotated for JAAD, derived from `signage_type` for PIE.
    pub stop_sign: bool,
    pub signage_type: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameAnnotation {
    pub frame_index: i64,
    pub behavior: Behavior,
    /// `[x1, y1, x2, y2]` in pixels.
    pub bbox: [f64; 4],
    pub vehicle_speed: f64,
    pub environment: Environment,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PedestrianTrack {
    pub pedestrian_id: String,
    /// Strictly increasing by `frame_index`.
    pub frames: Vec<FrameAnnotation>,
    /// Crossing initiation frame, or the last observable frame for non-crossers.
    pub event_frame: i64,
    pub label: u8,
    pub frame_size: (u32, u32),
}

/// One line of the annotation JSONL format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub ped_id: String,
    pub frame: i64,
    pub bbox: [f64; 4],
    pub speed: f64,
    pub behavior: BehaviorRecord,
    pub environment: EnvironmentRecord,
    pub event_frame: i64,
    pub label: u8,
    pub frame_w: u32,
    pub frame_h: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BehaviorRecord {
    pub motion_state: String,
    pub gaze_state: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_nod: Option<String>,
    pub hand_gesture: String,
    pub motion_direction: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentRecord {
    pub lane_count: u32,
    pub intersection: bool,
    pub crosswalk: bool,
    pub traffic_light: String,
    pub traffic_direction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub road_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_sign: Option<bool>,
    pub signage_type: String,
}

fn encode(flavor: Flavor, attribute: &str, value: &str, line: usize) -> Result<u8> {
    let table = flavor
        .code_table(attribute)
        .expect("attribute belongs to flavor");
    table
        .iter()
        .position(|v| *v == value)
        .map(|c| c as u8)
        .ok_or_else(|| {
            MftError::Data(format!(
                "line {line}: unknown {attribute} value {value:?} (expected one of {table:?})"
            ))
        })
}

fn decode(flavor: Flavor, attribute: &str, code: u8) -> String {
    flavor.code_table(attribute).expect("attribute belongs to flavor")[code as usize].to_string()
}

impl AnnotationRecord {
    fn to_frame(&self, flavor: Flavor, line: usize) -> Result<FrameAnnotation> {
        let schema_err = |message: String| MftError::Schema { line, message };
        let b = &self.behavior;
        let e = &self.environment;
        let head_nod = match (flavor, &b.head_nod) {
            (Flavor::Jaad, Some(v)) => Some(encode(flavor, "head_nod", v, line)?),
            (Flavor::Jaad, None) => return Err(schema_err("missing field `head_nod`".into())),
            (Flavor::Pie, Some(_)) => {
                return Err(schema_err("field `head_nod` is not part of the pie flavor".into()))
            }
            (Flavor::Pie, None) => None,
        };
        let road_type = match (flavor, &e.road_type) {
            (Flavor::Jaad, Some(v)) => Some(encode(flavor, "road_type", v, line)?),
            (Flavor::Jaad, None) => return Err(schema_err("missing field `road_type`".into())),
            (Flavor::Pie, Some(_)) => {
                return Err(schema_err("field `road_type` is not part of the pie flavor".into()))
            }
            (Flavor::Pie, None) => None,
        };
        let stop_sign = match (flavor, e.stop_sign) {
            (Flavor::Jaad, Some(v)) => v,
            (Flavor::Jaad, None) => return Err(schema_err("missing field `stop_sign`".into())),
            (Flavor::Pie, Some(_)) => {
                return Err(schema_err(
                    "field `stop_sign` is derived from `signage_type` in the pie flavor".into(),
                ))
            }
            (Flavor::Pie, None) => flavor.stop_signage().contains(&e.signage_type.as_str()),
        };
        let [x1, y1, x2, y2] = self.bbox;
        if !(self.bbox.iter().all(|v| v.is_finite()) && x1 < x2 && y1 < y2) {
            return Err(MftError::Data(format!(
                "line {line}: pedestrian {} frame {}: invalid bbox {:?}",
                self.ped_id, self.frame, self.bbox
            )));
        }
        if !self.speed.is_finite() {
            return Err(MftError::Data(format!(
                "line {line}: pedestrian {} frame {}: non-finite speed",
                self.ped_id, self.frame
            )));
        }
        if e.lane_count < 1 {
            return Err(MftError::Data(format!(
                "line {line}: pedestrian {} frame {}: lane_count must be at least 1",
                self.ped_id, self.frame
            )));
        }
        if self.label > 1 {
            return Err(MftError::Data(format!(
                "line {line}: pedestrian {}: label must be 0 or 1, got {}",
                self.ped_id, self.label
            )));
        }
        Ok(FrameAnnotation {
            frame_index: self.frame,
            behavior: Behavior {
                motion_state: encode(flavor, "motion_state", &b.motion_state, line)?,
                gaze_state: encode(flavor, "gaze_state", &b.gaze_state, line)?,
                head_nod,
                hand_gesture: encode(flavor, "hand_gesture", &b.hand_gesture, line)?,
                motion_direction: encode(flavor, "motion_direction", &b.motion_direction, line)?,
            },
            bbox: self.bbox,
            vehicle_speed: self.speed,
            environment: Environment {
                lane_count: e.lane_count,
                intersection: e.intersection,
                crosswalk: e.crosswalk,
                traffic_light: encode(flavor, "traffic_light", &e.traffic_light, line)?,
                traffic_direction: encode(flavor, "traffic_direction", &e.traffic_direction, line)?,
                road_type,
                stop_sign,
                signage_type: encode(flavor, "signage_type", &e.signage_type, line)?,
            },
        })
    }

    /// Builds the record of `frame`, decoding categorical codes back to strings.
    pub fn from_frame(track: &PedestrianTrack, frame: &FrameAnnotation, flavor: Flavor) -> Self {
        let b = &frame.behavior;
        let e = &frame.environment;
        AnnotationRecord {
            ped_id: track.pedestrian_id.clone(),
            frame: frame.frame_index,
            bbox: frame.bbox,
            speed: frame.vehicle_speed,
            behavior: BehaviorRecord {
                motion_state: decode(flavor, "motion_state", b.motion_state),
                gaze_state: decode(flavor, "gaze_state", b.gaze_state),
                head_nod: match flavor {
                    Flavor::Jaad => b.head_nod.map(|c| decode(flavor, "head_nod", c)),
                    Flavor::Pie => None,
                },
                hand_gesture: decode(flavor, "hand_gesture", b.hand_gesture),
                motion_direction: decode(flavor, "motion_direction", b.motion_direction),
            },
            environment: EnvironmentRecord {
                lane_count: e.lane_count,
                intersection: e.intersection,
                crosswalk: e.crosswalk,
                traffic_light: decode(flavor, "traffic_light", e.traffic_light),
                traffic_direction: decode(flavor, "traffic_direction", e.traffic_direction),
                road_type: match flavor {
                    Flavor::Jaad => e.road_type.map(|c| decode(flavor, "road_type", c)),
                    Flavor::Pie => None,
                },
                stop_sign: match flavor {
                    Flavor::Jaad => Some(e.stop_sign),
                    Flavor::Pie => None,
                },
                signage_type: decode(flavor, "signage_type", e.signage_type),
            },
            event_frame: track.event_frame,
            label: track.label,
            frame_w: track.frame_size.0,
            frame_h: track.frame_size.1,
        }
    }
}

/// Reads line-delimited annotation records and groups them into tracks in
/// order of first appearance. Blank lines are skipped.
pub fn parse_annotations<R: BufRead>(reader: R, flavor: Flavor) -> Result<Vec<PedestrianTrack>> {
    let mut tracks: IndexMap<String, PedestrianTrack> = IndexMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: AnnotationRecord = serde_json::from_str(&line).map_err(|e| match e.classify() {
            Category::Data => MftError::Schema {
                line: line_no,
                message: e.to_string(),
            },
            _ => MftError::Parse {
                line: line_no,
                message: e.to_string(),
            },
        })?;
        let frame = record.to_frame(flavor, line_no)?;
        match tracks.get_mut(&record.ped_id) {
            Some(track) => {
                if track.event_frame != record.event_frame
                    || track.label != record.label
                    || track.frame_size != (record.frame_w, record.frame_h)
                {
                    return Err(MftError::Data(format!(
                        "line {line_no}: pedestrian {}: event_frame, label and frame size must be constant",
                        record.ped_id
                    )));
                }
                let last = track.frames.last().expect("tracks are created non-empty");
                if frame.frame_index <= last.frame_index {
                    return Err(MftError::Data(format!(
                        "line {line_no}: pedestrian {}: frame {} does not follow frame {}",
                        record.ped_id, frame.frame_index, last.frame_index
                    )));
                }
                track.frames.push(frame);
            }
            None => {
                tracks.insert(
                    record.ped_id.clone(),
                    PedestrianTrack {
                        pedestrian_id: record.ped_id.clone(),
                        frames: vec![frame],
                        event_frame: record.event_frame,
                        label: record.label,
                        frame_size: (record.frame_w, record.frame_h),
                    },
                );
            }
        }
    }
    Ok(tracks.into_values().collect())
}

pub fn read_annotations(path: &std::path::Path, flavor: Flavor) -> Result<Vec<PedestrianTrack>> {
    let file = std::fs::File::open(path)?;
    parse_annotations(std::io::BufReader::new(file), flavor)
}

/// Writes tracks as JSONL, one record per frame.
pub fn write_annotations<W: Write>(mut writer: W, tracks: &[PedestrianTrack], flavor: Flavor) -> Result<()> {
    for track in tracks {
        for frame in &track.frames {
            let record = AnnotationRecord::from_frame(track, frame, flavor);
            serde_json::to_writer(&mut writer, &record)?;
            writer.write_all(b"\n")?;
        }
    }
    writer.flush()?;
    Ok(())
}
