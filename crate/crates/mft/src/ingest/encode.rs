//! Turns raw windows into the four numeric context matrices.

use mft_autograd::Tensor;
use serde::{Deserialize, Serialize};

use super::annotation::FrameAnnotation;
use super::sampler::RawClip;
use super::schema::{code_tables, CodeTable, Context, Flavor};
use crate::error::{MftError, Result};

/// Names of the z-scored continuous features.
pub const CONTINUOUS_FEATURES: [&str; 5] = ["x1", "y1", "x2", "y2", "speed"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub name: String,
    pub mean: f64,
    pub std: f64,
    /// Zero spread on the training split; values are passed through unscaled.
    pub constant: bool,
}

impl FeatureStats {
    pub fn apply(&self, x: f64) -> f64 {
        if self.constant {
            x
        } else {
            (x - self.mean) / self.std
        }
    }
}

/// Encoding tables plus normalization statistics fitted on a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodingSchema {
    pub flavor: Flavor,
    pub tables: Vec<CodeTable>,
    /// Signage values from which the PIE stop-sign flag is derived.
    pub stop_signage: Vec<String>,
    pub continuous: Option<Vec<FeatureStats>>,
}

impl EncodingSchema {
    pub fn new(flavor: Flavor) -> Self {
        EncodingSchema {
            flavor,
            tables: code_tables(flavor),
            stop_signage: flavor.stop_signage().iter().map(|s| s.to_string()).collect(),
            continuous: None,
        }
    }

    pub fn table(&self, attribute: &str) -> Option<&CodeTable> {
        self.tables.iter().find(|t| t.attribute == attribute)
    }

    pub fn is_fitted(&self) -> bool {
        self.continuous.is_some()
    }

    /// Fits normalization statistics; see [`fit_normalizer`].
    pub fn fit(&mut self, training: &[RawClip]) -> Result<()> {
        self.continuous = Some(fit_normalizer(training)?);
        Ok(())
    }
}

fn continuous_values(frame: &FrameAnnotation) -> [f64; 5] {
    let [x1, y1, x2, y2] = frame.bbox;
    [x1, y1, x2, y2, frame.vehicle_speed]
}

/// Population mean and standard deviation of each continuous feature over
/// all frames of all training clips.
pub fn fit_normalizer(training: &[RawClip]) -> Result<Vec<FeatureStats>> {
    let count: usize = training.iter().map(|c| c.frames.len()).sum();
    if count == 0 {
        return Err(MftError::Contract(
            "cannot fit normalization on an empty training set".into(),
        ));
    }
    let frames = || training.iter().flat_map(|c| &c.frames);
    let n = count as f64;
    let mut mean = [0.0; 5];
    for f in frames() {
        for (m, v) in mean.iter_mut().zip(continuous_values(f)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = [0.0; 5];
    for f in frames() {
        for ((s, v), m) in var.iter_mut().zip(continuous_values(f)).zip(mean) {
            *s += (v - m) * (v - m);
        }
    }
    Ok(CONTINUOUS_FEATURES
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let std = (var[i] / n).sqrt();
            FeatureStats {
                name: name.to_string(),
                mean: mean[i],
                std,
                constant: std <= 1e-12 * mean[i].abs().max(1.0),
            }
        })
        .collect())
}

/// One encoded observation window.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipSample {
    pub pedestrian_id: String,
    /// Behavior, N×5 (JAAD) or N×4 (PIE).
    pub p: Tensor<f64>,
    /// Bounding box, N×4.
    pub l: Tensor<f64>,
    /// Vehicle speed, N×1.
    pub v: Tensor<f64>,
    /// Environment, N×8 (JAAD) or N×7 (PIE).
    pub e: Tensor<f64>,
    pub label: u8,
    pub tte_frames: i64,
}

impl ClipSample {
    pub fn context(&self, context: Context) -> &Tensor<f64> {
        match context {
            Context::Behavior => &self.p,
            Context::Localization => &self.l,
            Context::Vehicle => &self.v,
            Context::Environment => &self.e,
        }
    }

    pub fn context_mut(&mut self, context: Context) -> &mut Tensor<f64> {
        match context {
            Context::Behavior => &mut self.p,
            Context::Localization => &mut self.l,
            Context::Vehicle => &mut self.v,
            Context::Environment => &mut self.e,
        }
    }

    pub fn n_frames(&self) -> usize {
        self.l.shape()[0]
    }

    pub fn flavor(&self) -> Option<Flavor> {
        match (self.p.shape()[1], self.e.shape()[1]) {
            (5, 8) => Some(Flavor::Jaad),
            (4, 7) => Some(Flavor::Pie),
            _ => None,
        }
    }
}

fn checked_code(schema: &EncodingSchema, attribute: &str, code: u8) -> Result<f64> {
    let table = schema
        .table(attribute)
        .ok_or_else(|| MftError::Contract(format!("schema has no table for {attribute}")))?;
    if (code as usize) < table.values.len() {
        Ok(code as f64)
    } else {
        Err(MftError::Data(format!(
            "{attribute} code {code} outside its {}-entry table",
            table.values.len()
        )))
    }
}

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Label-encodes categorical attributes and z-scores continuous ones.
pub fn encode_clip(raw: &RawClip, schema: &EncodingSchema) -> Result<ClipSample> {
    let stats = schema
        .continuous
        .as_ref()
        .ok_or_else(|| MftError::Contract("encoding schema has not been fitted".into()))?;
    let flavor = schema.flavor;
    let n = raw.frames.len();
    let mut p = Vec::with_capacity(n * flavor.width(Context::Behavior));
    let mut l = Vec::with_capacity(n * 4);
    let mut v = Vec::with_capacity(n);
    let mut e = Vec::with_capacity(n * flavor.width(Context::Environment));
    for f in &raw.frames {
        let b = &f.behavior;
        p.push(checked_code(schema, "motion_state", b.motion_state)?);
        p.push(checked_code(schema, "gaze_state", b.gaze_state)?);
        if flavor == Flavor::Jaad {
            let nod = b
                .head_nod
                .ok_or_else(|| MftError::Data(format!("frame {}: missing head_nod", f.frame_index)))?;
            p.push(checked_code(schema, "head_nod", nod)?);
        }
        p.push(checked_code(schema, "hand_gesture", b.hand_gesture)?);
        p.push(checked_code(schema, "motion_direction", b.motion_direction)?);

        let cont = continuous_values(f);
        for (value, s) in cont.iter().zip(stats) {
            let z = s.apply(*value);
            if s.name == "speed" {
                v.push(z);
            } else {
                l.push(z);
            }
        }

        let env = &f.environment;
        e.push(env.lane_count as f64);
        e.push(flag(env.intersection));
        e.push(flag(env.crosswalk));
        e.push(checked_code(schema, "traffic_light", env.traffic_light)?);
        e.push(checked_code(schema, "traffic_direction", env.traffic_direction)?);
        if flavor == Flavor::Jaad {
            let road = env
                .road_type
                .ok_or_else(|| MftError::Data(format!("frame {}: missing road_type", f.frame_index)))?;
            e.push(checked_code(schema, "road_type", road)?);
        }
        let stop = match flavor {
            Flavor::Jaad => env.stop_sign,
            Flavor::Pie => {
                let table = schema.table("signage_type").expect("signage table");
                let signage = table.value(env.signage_type as usize).unwrap_or_default();
                schema.stop_signage.iter().any(|s| s == signage)
            }
        };
        e.push(flag(stop));
        e.push(checked_code(schema, "signage_type", env.signage_type)?);
    }
    let matrix = |data: Vec<f64>, context: Context| Tensor::new(vec![n, flavor.width(context)], data);
    Ok(ClipSample {
        pedestrian_id: raw.pedestrian_id.clone(),
        p: matrix(p, Context::Behavior)?,
        l: matrix(l, Context::Localization)?,
        v: matrix(v, Context::Vehicle)?,
        e: matrix(e, Context::Environment)?,
        label: raw.label,
        tte_frames: raw.tte_frames,
    })
}
