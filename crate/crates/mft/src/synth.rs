//! Synthetic pedestrian tracks with a planted crossing rule.
//!
//! Each track draws five latent features, one or two per context:
//! crosswalk presence (E), gaze toward the vehicle and walking (P), ego
//! deceleration (V) and lateral drift (L). The label is the sign of a linear
//! score over these features, flipped with probability `noise`, so the
//! Bayes-optimal accuracy is `1 - noise`. The per-frame annotations expose
//! every latent feature: categorical attributes are copied with occasional
//! flicker, deceleration shapes the speed profile and drift shapes the
//! bounding-box trajectory.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{MftError, Result};
use crate::ingest::annotation::{Behavior, Environment, FrameAnnotation, PedestrianTrack};
use crate::ingest::{Context, Flavor};
use crate::rng::derive_seed;

/// Weights of the planted linear rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleWeights {
    pub crosswalk: f64,
    pub looking: f64,
    pub walking: f64,
    pub deceleration: f64,
    pub lateral_drift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioRule {
    pub weights: RuleWeights,
    pub intercept: f64,
    /// Label flip probability in `[0, 0.5]`.
    pub noise: f64,
}

impl ScenarioRule {
    /// Signal spread across all four contexts, roughly one positive per two
    /// negatives. Without P and E the best achievable accuracy drops by
    /// about 20 points.
    pub fn multi_context(noise: f64) -> Self {
        ScenarioRule {
            weights: RuleWeights {
                crosswalk: 2.0,
                looking: 1.5,
                walking: 1.5,
                deceleration: 1.0,
                lateral_drift: 1.0,
            },
            intercept: -3.4,
            noise,
        }
    }

    /// Only the environment (crosswalk presence) carries label signal.
    pub fn environment_only(noise: f64) -> Self {
        ScenarioRule {
            weights: RuleWeights {
                crosswalk: 2.0,
                looking: 0.0,
                walking: 0.0,
                deceleration: 0.0,
                lateral_drift: 0.0,
            },
            intercept: -1.0,
            noise,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        let all = [
            w.crosswalk,
            w.looking,
            w.walking,
            w.deceleration,
            w.lateral_drift,
            self.intercept,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(MftError::Config("rule weights must be finite".into()));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(MftError::Config(format!(
                "noise must lie in [0, 0.5], got {}",
                self.noise
            )));
        }
        Ok(())
    }

    pub fn score(&self, f: &TrackFeatures) -> f64 {
        let w = &self.weights;
        self.intercept
            + w.crosswalk * flag(f.crosswalk)
            + w.looking * flag(f.looking)
            + w.walking * flag(f.walking)
            + w.deceleration * f.deceleration
            + w.lateral_drift * f.lateral_drift
    }

    /// Rule decision before label noise, i.e. σ(score) thresholded at 0.5.
    pub fn decide(&self, f: &TrackFeatures) -> u8 {
        u8::from(self.score(f) > 0.0)
    }

    /// Expected accuracy of the Bayes classifier under the label-flip model.
    pub fn expected_bayes_accuracy(&self) -> f64 {
        1.0 - self.noise
    }
}

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Latent per-track features the rule is evaluated on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackFeatures {
    pub crosswalk: bool,
    pub looking: bool,
    pub walking: bool,
    /// Standard normal; positive means the ego vehicle slows toward the event.
    pub deceleration: f64,
    /// Standard normal; lateral image-plane drift rate of the pedestrian.
    pub lateral_drift: f64,
}

/// Probability with which each binary latent feature is set.
pub const BINARY_PRIOR: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_tracks: usize,
    pub min_frames: usize,
    pub max_frames: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_tracks: 200,
            min_frames: 60,
            max_frames: 120,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub rule: ScenarioRule,
    pub seed: u64,
    pub flavor: Flavor,
    pub train: Vec<PedestrianTrack>,
    pub val: Vec<PedestrianTrack>,
    pub test: Vec<PedestrianTrack>,
    /// Latent features keyed by pedestrian id.
    pub features: HashMap<String, TrackFeatures>,
}

impl SyntheticDataset {
    pub fn tracks(&self) -> impl Iterator<Item = &PedestrianTrack> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    pub fn split_sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

/// Track-level 70/10/20 split sizes.
pub fn split_sizes(n_tracks: usize) -> (usize, usize, usize) {
    let train = n_tracks * 7 / 10;
    let val = n_tracks / 10;
    (train, val, n_tracks - train - val)
}

pub fn generate_dataset(
    config: &SynthConfig,
    rule: &ScenarioRule,
    seed: u64,
    flavor: Flavor,
) -> Result<SyntheticDataset> {
    if config.n_tracks < 10 {
        return Err(MftError::Config(format!(
            "need at least 10 tracks, got {}",
            config.n_tracks
        )));
    }
    if config.min_frames < 1 || config.min_frames > config.max_frames {
        return Err(MftError::Config(format!(
            "invalid track length range [{}, {}]",
            config.min_frames, config.max_frames
        )));
    }
    rule.validate()?;

    let mut tracks = Vec::with_capacity(config.n_tracks);
    let mut features = HashMap::with_capacity(config.n_tracks);
    for i in 0..config.n_tracks {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5EED, i as u64]));
        let (track, f) = generate_track(i, config, rule, flavor, &mut rng);
        features.insert(track.pedestrian_id.clone(), f);
        tracks.push(track);
    }
    let (n_train, n_val, _) = split_sizes(config.n_tracks);
    let test = tracks.split_off(n_train + n_val);
    let val = tracks.split_off(n_train);
    Ok(SyntheticDataset {
        rule: rule.clone(),
        seed,
        flavor,
        train: tracks,
        val,
        test,
        features,
    })
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn generate_track(
    index: usize,
    config: &SynthConfig,
    rule: &ScenarioRule,
    flavor: Flavor,
    rng: &mut ChaCha8Rng,
) -> (PedestrianTrack, TrackFeatures) {
    let features = TrackFeatures {
        crosswalk: rng.random_bool(BINARY_PRIOR),
        looking: rng.random_bool(BINARY_PRIOR),
        walking: rng.random_bool(BINARY_PRIOR),
        deceleration: normal(rng),
        lateral_drift: normal(rng),
    };
    let flipped = rng.random_bool(rule.noise);
    let label = rule.decide(&features) ^ u8::from(flipped);

    let len = rng.random_range(config.min_frames..=config.max_frames) as i64;
    let start = rng.random_range(0..300i64);
    let event = start + len - 1;

    // scene constants
    let lane_count = rng.random_range(1..=4u32);
    let intersection = rng.random_bool(0.3);
    let traffic_light = rng.random_range(0..3u8);
    let traffic_direction = rng.random_range(0..2u8);
    let road_type = if rng.random_bool(0.8) { 0 } else { rng.random_range(1..3u8) };
    let signage_type = rng.random_range(0..6u8);
    let gesture_count = flavor.code_table("hand_gesture").unwrap().len() as u8;
    let direction = if features.walking { rng.random_range(0..2u8) } else { 2 };

    // trajectory: box center drifts laterally toward its position at the event
    let center_at_event = rng.random_range(900.0..1020.0);
    let bottom = rng.random_range(600.0..700.0);
    let width0 = rng.random_range(40.0..70.0);
    let drift_px = 2.5 * features.lateral_drift;
    // speed: constant cruise, then linear change from a breakpoint to the event
    let speed_at_event = rng.random_range(15.0..25.0);
    let breakpoint = rng.random_range(70..=110i64);
    let slope = 0.12 * features.deceleration;

    let mut wobble = 0.0;
    let mut frames = Vec::with_capacity(len as usize);
    for k in 0..len {
        let t = start + k;
        let to_event = (event - t) as f64;
        wobble = 0.9 * wobble + 0.5 * normal(rng);
        let cx = center_at_event - drift_px * to_event + wobble;
        let width = width0 * (1.0 + 0.003 * k as f64);
        let height = 2.4 * width;
        let bbox = [cx - width / 2.0, bottom - height, cx + width / 2.0, bottom];

        let ramp = to_event.min(breakpoint as f64);
        let speed = (speed_at_event + slope * ramp + 0.2 * normal(rng)).max(0.0);

        let walking = features.walking ^ rng.random_bool(0.05);
        let looking = if features.looking {
            rng.random_bool(0.85)
        } else {
            rng.random_bool(0.15)
        };
        let gesture = if rng.random_bool(0.9) {
            gesture_count - 1
        } else {
            rng.random_range(0..gesture_count - 1)
        };
        let nod = if rng.random_bool(0.05) { 0 } else { 1 };
        frames.push(FrameAnnotation {
            frame_index: t,
            behavior: Behavior {
                motion_state: u8::from(walking),
                gaze_state: u8::from(!looking),
                head_nod: (flavor == Flavor::Jaad).then_some(nod),
                hand_gesture: gesture,
                motion_direction: direction,
            },
            bbox,
            vehicle_speed: speed,
            environment: Environment {
                lane_count,
                intersection,
                crosswalk: features.crosswalk,
                traffic_light,
                traffic_direction,
                road_type: (flavor == Flavor::Jaad).then_some(road_type),
                stop_sign: signage_type == 2,
                signage_type,
            },
        });
    }
    let track = PedestrianTrack {
        pedestrian_id: format!("ped_{index:05}"),
        frames,
        event_frame: event,
        label,
        frame_size: (1920, 1080),
    };
    (track, features)
}

fn check_provenance(rule: &ScenarioRule, dataset: &SyntheticDataset) -> Result<()> {
    if *rule != dataset.rule {
        return Err(MftError::Contract(
            "dataset was generated under a different rule".into(),
        ));
    }
    for t in dataset.tracks() {
        if !dataset.features.contains_key(&t.pedestrian_id) {
            return Err(MftError::Contract(format!(
                "track {} has no recorded latent features",
                t.pedestrian_id
            )));
        }
    }
    Ok(())
}

/// Accuracy over all tracks of the classifier that thresholds σ(score) at 0.5.
pub fn bayes_accuracy(rule: &ScenarioRule, dataset: &SyntheticDataset) -> Result<f64> {
    check_provenance(rule, dataset)?;
    let (hits, total) = dataset.tracks().fold((0usize, 0usize), |(h, n), t| {
        let pred = rule.decide(&dataset.features[&t.pedestrian_id]);
        (h + usize::from(pred == t.label), n + 1)
    });
    Ok(hits as f64 / total as f64)
}

/// Accuracy of the best classifier that only sees the latent features of
/// `visible` contexts. Hidden binary features are marginalized by exhaustive
/// enumeration over their prior; hidden continuous features in closed form
/// through the normal CDF.
pub fn restricted_bayes_accuracy(
    rule: &ScenarioRule,
    dataset: &SyntheticDataset,
    visible: &[Context],
) -> Result<f64> {
    check_provenance(rule, dataset)?;
    let sees = |c: Context| visible.contains(&c);
    let w = &rule.weights;
    let hidden_sd = {
        let mut var = 0.0;
        if !sees(Context::Vehicle) {
            var += w.deceleration * w.deceleration;
        }
        if !sees(Context::Localization) {
            var += w.lateral_drift * w.lateral_drift;
        }
        var.sqrt()
    };
    let mut hits = 0usize;
    let mut total = 0usize;
    for t in dataset.tracks() {
        let f = &dataset.features[&t.pedestrian_id];
        let crosswalk_options: Vec<bool> = if sees(Context::Environment) {
            vec![f.crosswalk]
        } else {
            vec![false, true]
        };
        let behavior_options: Vec<(bool, bool)> = if sees(Context::Behavior) {
            vec![(f.looking, f.walking)]
        } else {
            vec![(false, false), (false, true), (true, false), (true, true)]
        };
        let mut p_positive = 0.0;
        let mut mass = 0.0;
        for &c in &crosswalk_options {
            for &(g, wk) in &behavior_options {
                let weight = prior(c, crosswalk_options.len()) * prior_pair(behavior_options.len());
                let mut partial = rule.intercept + w.crosswalk * flag(c) + w.looking * flag(g) + w.walking * flag(wk);
                if sees(Context::Vehicle) {
                    partial += w.deceleration * f.deceleration;
                }
                if sees(Context::Localization) {
                    partial += w.lateral_drift * f.lateral_drift;
                }
                let q = if hidden_sd > 0.0 {
                    normal_cdf(partial / hidden_sd)
                } else {
                    flag(partial > 0.0)
                };
                p_positive += weight * q;
                mass += weight;
            }
        }
        let pred = u8::from(p_positive / mass > 0.5);
        hits += usize::from(pred == t.label);
        total += 1;
    }
    Ok(hits as f64 / total as f64)
}

fn prior(_value: bool, options: usize) -> f64 {
    if options == 1 {
        1.0
    } else {
        BINARY_PRIOR
    }
}

fn prior_pair(options: usize) -> f64 {
    if options == 1 {
        1.0
    } else {
        BINARY_PRIOR * BINARY_PRIOR
    }
}

/// Standard normal CDF via the complementary error function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Complementary error function (Numerical Recipes `erfcc`, |rel err| < 1.2e-7).
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let poly = -z * z - 1.265_512_23
        + t * (1.000_023_68
            + t * (0.374_091_96
                + t * (0.096_784_18
                    + t * (-0.186_288_06
                        + t * (0.278_868_07
                            + t * (-1.135_203_98
                                + t * (1.488_515_87 + t * (-0.822_152_23 + t * 0.170_872_77))))))));
    let r = t * poly.exp();
    if x >= 0.0 {
        r
    } else {
        2.0 - r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{parse_annotations, write_annotations};

    fn small(noise: f64, seed: u64) -> SyntheticDataset {
        let config = SynthConfig {
            n_tracks: 400,
            ..Default::default()
        };
        generate_dataset(&config, &ScenarioRule::multi_context(noise), seed, Flavor::Jaad).unwrap()
    }

    #[test]
    fn noiseless_labels_are_deterministic() {
        let d = small(0.0, 1);
        assert_eq!(bayes_accuracy(&d.rule, &d).unwrap(), 1.0);
    }

    #[test]
    fn noise_sets_bayes_accuracy() {
        let d = generate_dataset(
            &SynthConfig {
                n_tracks: 4000,
                min_frames: 1,
                max_frames: 1,
            },
            &ScenarioRule::multi_context(0.05),
            2,
            Flavor::Jaad,
        )
        .unwrap();
        let acc = bayes_accuracy(&d.rule, &d).unwrap();
        assert!((acc - 0.95).abs() < 0.015, "{acc}");
    }

    #[test]
    fn coin_flip_labels_are_unpredictable() {
        let d = generate_dataset(
            &SynthConfig {
                n_tracks: 4000,
                min_frames: 1,
                max_frames: 1,
            },
            &ScenarioRule::multi_context(0.5),
            3,
            Flavor::Jaad,
        )
        .unwrap();
        // with fair flips the label is independent of the rule decision
        let acc = bayes_accuracy(&d.rule, &d).unwrap();
        assert!((acc - 0.5).abs() < 0.03, "{acc}");
    }

    #[test]
    fn same_seed_same_dataset() {
        assert_eq!(small(0.05, 9), small(0.05, 9));
        assert_ne!(small(0.05, 9).train, small(0.05, 10).train);
    }

    #[test]
    fn split_arithmetic() {
        assert_eq!(split_sizes(10), (7, 1, 2));
        assert_eq!(split_sizes(2000), (1400, 200, 400));
        let d = generate_dataset(
            &SynthConfig {
                n_tracks: 10,
                ..Default::default()
            },
            &ScenarioRule::multi_context(0.0),
            0,
            Flavor::Pie,
        )
        .unwrap();
        assert_eq!(d.split_sizes(), (7, 1, 2));
    }

    #[test]
    fn rejects_bad_parameters() {
        let rule = ScenarioRule::multi_context(0.0);
        let few = SynthConfig {
            n_tracks: 9,
            ..Default::default()
        };
        assert!(generate_dataset(&few, &rule, 0, Flavor::Jaad).is_err());
        let noisy = ScenarioRule::multi_context(0.7);
        assert!(generate_dataset(&SynthConfig::default(), &noisy, 0, Flavor::Jaad).is_err());
    }

    #[test]
    fn class_balance_near_one_to_two() {
        let d = small(0.05, 4);
        let pos = d.tracks().filter(|t| t.label == 1).count() as f64;
        let frac = pos / 400.0;
        assert!((0.25..0.42).contains(&frac), "{frac}");
    }

    #[test]
    fn tracks_are_valid_and_round_trip_through_jsonl() {
        for flavor in [Flavor::Jaad, Flavor::Pie] {
            let d = generate_dataset(
                &SynthConfig {
                    n_tracks: 20,
                    ..Default::default()
                },
                &ScenarioRule::multi_context(0.05),
                5,
                flavor,
            )
            .unwrap();
            for t in d.tracks() {
                assert!((60..=120).contains(&t.frames.len()));
                assert_eq!(t.event_frame, t.frames.last().unwrap().frame_index);
            }
            let mut buf = Vec::new();
            write_annotations(&mut buf, &d.train, flavor).unwrap();
            let parsed = parse_annotations(buf.as_slice(), flavor).unwrap();
            assert_eq!(parsed, d.train);
        }
    }

    #[test]
    fn foreign_dataset_rejected() {
        let d = small(0.05, 1);
        let other = ScenarioRule::environment_only(0.05);
        assert!(matches!(bayes_accuracy(&other, &d), Err(MftError::Contract(_))));
    }

    #[test]
    fn hiding_p_and_e_costs_accuracy() {
        let d = small(0.05, 6);
        let full = restricted_bayes_accuracy(&d.rule, &d, &Context::ALL).unwrap();
        assert_eq!(full, bayes_accuracy(&d.rule, &d).unwrap());
        let lv = restricted_bayes_accuracy(&d.rule, &d, &[Context::Localization, Context::Vehicle]).unwrap();
        assert!(full - lv > 0.12, "full {full} vs L+V {lv}");
    }

    #[test]
    fn normal_cdf_values() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-7);
        assert!((normal_cdf(1.0) - 0.841_344_746).abs() < 1e-6);
        assert!((normal_cdf(-1.959_964) - 0.025).abs() < 1e-6);
    }
}
