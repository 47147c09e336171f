//! Annotation ingestion: parsing, clip sampling and context encoding.

pub mod annotation;
pub mod encode;
pub mod sampler;
pub mod schema;

pub use annotation::{parse_annotations, read_annotations, write_annotations, FrameAnnotation, PedestrianTrack};
pub use encode::{encode_clip, fit_normalizer, ClipSample, EncodingSchema, FeatureStats};
pub use sampler::{sample_clips, RawClip, SamplerConfig};
pub use schema::{Context, Flavor};

use crate::error::{MftError, Result};

/// Samples clips from every track, in track order.
pub fn sample_tracks(tracks: &[PedestrianTrack], config: &SamplerConfig) -> Vec<RawClip> {
    tracks.iter().flat_map(|t| sample_clips(t, config)).collect()
}

pub fn encode_all(raw: &[RawClip], schema: &EncodingSchema) -> Result<Vec<ClipSample>> {
    raw.iter().map(|c| encode_clip(c, schema)).collect()
}

/// Encoded train/val/test clips with the schema fitted on the training split.
#[derive(Clone, Debug)]
pub struct PreparedSplits {
    pub schema: EncodingSchema,
    pub train: Vec<ClipSample>,
    pub val: Vec<ClipSample>,
    pub test: Vec<ClipSample>,
}

pub fn prepare_splits(
    flavor: Flavor,
    train: &[PedestrianTrack],
    val: &[PedestrianTrack],
    test: &[PedestrianTrack],
    sampler: &SamplerConfig,
) -> Result<PreparedSplits> {
    sampler.validate()?;
    let raw_train = sample_tracks(train, sampler);
    if raw_train.is_empty() {
        return Err(MftError::Data(
            "no admissible clips in the training split".into(),
        ));
    }
    let mut schema = EncodingSchema::new(flavor);
    schema.fit(&raw_train)?;
    Ok(PreparedSplits {
        train: encode_all(&raw_train, &schema)?,
        val: encode_all(&sample_tracks(val, sampler), &schema)?,
        test: encode_all(&sample_tracks(test, sampler), &schema)?,
        schema,
    })
}
