//! Random fixtures shared by unit tests, acceptance tests and `grad-check`.

use mft_autograd::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::ingest::{ClipSample, Context, Flavor};
use crate::model::MftConfig;

/// The small configuration used for gradient checks: d=8, 2 heads, 4 frames.
pub fn toy_config(flavor: Flavor) -> MftConfig {
    MftConfig {
        n_frames: 4,
        model_dim: 8,
        heads: 2,
        flavor,
        ffn_hidden: 16,
        mlp_hidden: 8,
        ..Default::default()
    }
}

/// A clip of standard-normal features with the widths of `flavor`.
pub fn random_clip<R: Rng>(flavor: Flavor, n_frames: usize, label: u8, rng: &mut R) -> ClipSample {
    let mut matrix = |c: Context| {
        let w = flavor.width(c);
        let data = (0..n_frames * w).map(|_| rng.sample(StandardNormal)).collect();
        Tensor::new(vec![n_frames, w], data).expect("clip shape")
    };
    ClipSample {
        pedestrian_id: "random".into(),
        p: matrix(Context::Behavior),
        l: matrix(Context::Localization),
        v: matrix(Context::Vehicle),
        e: matrix(Context::Environment),
        label,
        tte_frames: 30,
    }
}
