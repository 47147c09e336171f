//! Acceptance criteria 1-11, run in order on one thread.
//!
//! `cargo test --test acceptance` runs all of them; trailing numbers select
//! a subset, e.g. `cargo test --test acceptance -- 5 6`.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use mft::checkpoint::Checkpoint;
use mft::eval::{attention_summary, compute_metrics, evaluate, roc_auc, score_clips, Variant};
use mft::ingest::{
    prepare_splits, sample_clips, Flavor, PedestrianTrack, PreparedSplits, SamplerConfig,
};
use mft::model::{check_model_gradients, param_count, predict, forward, MftConfig, MftParameters};
use mft::synth::{generate_dataset, ScenarioRule, SynthConfig};
use mft::testing::{random_clip, toy_config};
use mft::train::{train, ClassWeighting, TrainConfig};
use mft_autograd::Real;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// The model used wherever a criterion trains to convergence.
fn small_model() -> MftConfig {
    MftConfig {
        model_dim: 32,
        heads: 4,
        ffn_hidden: 64,
        mlp_hidden: 32,
        ..MftConfig::default()
    }
}

fn learn_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 5e-4,
        epochs: 12,
        batch_size: 16,
        seed,
        class_weighting: ClassWeighting::None,
        ..TrainConfig::default()
    }
}

/// Non-overlapping windows keep the 2000-track runs within budget.
fn sparse_sampler() -> SamplerConfig {
    SamplerConfig {
        overlap: 0.0,
        ..SamplerConfig::default()
    }
}

fn synthetic_splits(n_tracks: usize, rule: &ScenarioRule, seed: u64) -> PreparedSplits {
    let ds = generate_dataset(
        &SynthConfig {
            n_tracks,
            ..SynthConfig::default()
        },
        rule,
        seed,
        Flavor::Jaad,
    )
    .unwrap();
    prepare_splits(Flavor::Jaad, &ds.train, &ds.val, &ds.test, &sparse_sampler()).unwrap()
}

fn test_accuracy(model: &MftConfig, data: &PreparedSplits, seed: u64) -> f64 {
    let out = train::<f32>(model, &data.train, &data.val, &learn_train_config(seed)).unwrap();
    evaluate(model, &out.best_params, &data.test, 0.5).unwrap().acc
}

/// State shared between criteria 5 and 6.
#[derive(Default)]
struct Shared {
    learn_data: Option<PreparedSplits>,
    full_seed0: Option<f64>,
}

impl Shared {
    fn learn_data(&mut self) -> &PreparedSplits {
        self.learn_data
            .get_or_insert_with(|| synthetic_splits(2000, &ScenarioRule::multi_context(0.05), 2024))
    }
}

fn bits<T: Real>(p: &MftParameters<T>) -> Vec<u64> {
    p.iter()
        .flat_map(|(_, t)| t.data().iter().map(|x| x.as_f64().to_bits()))
        .collect()
}

fn c1_parameter_count(_: &mut Shared) -> Outcome {
    let n = param_count(&MftConfig::default());
    // toy JAAD ledger: widths 5, 4, 1, 8; d=8, ffn 16, mlp 8
    let attention = 4 * 8 * 8 + 8;
    let per_context = |w: usize| {
        (w * 8 + 8) + 8 + attention + 16 + (8 * 16 + 16) + (16 * 8 + 8) + 16 + attention
    };
    let contexts: usize = [5, 4, 1, 8].into_iter().map(per_context).sum();
    let shared = 8 + attention + 16 + attention + (8 * 8 + 8) + (8 + 1);
    let toy = param_count(&toy_config(Flavor::Jaad));
    let pass = (700_000..=1_200_000).contains(&n) && toy == contexts + shared && toy == 4201;
    outcome(
        pass,
        format!(
            "default {n} ({:.3} M, reference 0.95 M), toy {toy} vs ledger {}",
            n as f64 / 1e6,
            contexts + shared
        ),
    )
}

fn c2_gradient_integrity(_: &mut Shared) -> Outcome {
    let start = Instant::now();
    let cfg = toy_config(Flavor::Jaad);
    let params = MftParameters::<f64>::init(&cfg, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let clips = [
        random_clip(Flavor::Jaad, cfg.n_frames, 1, &mut rng),
        random_clip(Flavor::Jaad, cfg.n_frames, 0, &mut rng),
    ];
    let checks = check_model_gradients(&cfg, &params, &clips, 2.0, 1e-5, None).unwrap();
    let elapsed = start.elapsed();
    let failing: Vec<&str> = checks
        .iter()
        .filter(|c| !c.passes(1e-4))
        .map(|c| c.name.as_str())
        .collect();
    let worst = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    outcome(
        failing.is_empty() && checks.len() == params.len() && elapsed < Duration::from_secs(60),
        format!(
            "{}/{} parameters below 1e-4, worst {worst:.2e}, {:.1}s{}",
            checks.len() - failing.len(),
            checks.len(),
            elapsed.as_secs_f64(),
            if failing.is_empty() {
                String::new()
            } else {
                format!(", failing {}", failing.join(" "))
            }
        ),
    )
}

fn c3_shapes_and_stochasticity(_: &mut Shared) -> Outcome {
    let mut worst = 0.0f64;
    let mut problems = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..100u64 {
        let flavor = if i % 2 == 0 { Flavor::Jaad } else { Flavor::Pie };
        let cfg = MftConfig {
            flavor,
            ..MftConfig::default()
        };
        let params = MftParameters::<f64>::init(&cfg, i).unwrap();
        let clip = random_clip(flavor, 16, (i % 2) as u8, &mut rng);
        let (_, trace) = forward(&cfg, &params, &clip, i % 3 == 0, &mut rng).unwrap();
        let dims = |m: &Vec<Vec<f64>>| (m.len(), m.first().map_or(0, Vec::len));
        let ok = trace.mi.len() == 4
            && trace.gi.len() == 4
            && trace.mi.iter().all(|h| h.len() == 4 && h.iter().all(|m| dims(m) == (17, 17)))
            && trace.gi.iter().all(|h| h.len() == 4 && h.iter().all(|m| dims(m) == (1, 17)))
            && trace.mc.len() == 4
            && trace.mc.iter().all(|m| dims(m) == (5, 5))
            && trace.gc.len() == 4
            && trace.gc.iter().all(|m| dims(m) == (1, 5));
        if !ok {
            problems.push(i);
        }
        worst = worst.max(trace.max_stochastic_error());
    }
    outcome(
        problems.is_empty() && worst <= 1e-6,
        format!(
            "100 passes, shape mismatches {problems:?}, worst row-sum error {worst:.2e}"
        ),
    )
}

fn c4_capacity(_: &mut Shared) -> Outcome {
    let start = Instant::now();
    let data = synthetic_splits(60, &ScenarioRule::multi_context(0.05), 4);
    let clips: Vec<_> = data.train.iter().take(32).cloned().collect();
    let positives = clips.iter().filter(|c| c.label == 1).count();
    let model = small_model();
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        epochs: 200,
        batch_size: 8,
        seed: 4,
        class_weighting: ClassWeighting::None,
        ..TrainConfig::default()
    };
    let out = train::<f32>(&model, &clips, &[], &cfg).unwrap();
    let acc = evaluate(&model, &out.final_params, &clips, 0.5).unwrap().acc;
    let elapsed = start.elapsed();
    outcome(
        clips.len() == 32 && acc == 1.0 && elapsed < Duration::from_secs(120),
        format!(
            "{} clips ({positives} positive), train accuracy {acc:.4}, {:.1}s",
            clips.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn c5_learnability(shared: &mut Shared) -> Outcome {
    let start = Instant::now();
    let data = shared.learn_data();
    let sizes = (data.train.len(), data.val.len(), data.test.len());
    let acc = test_accuracy(&small_model(), data, 0);
    shared.full_seed0 = Some(acc);
    let elapsed = start.elapsed();
    outcome(
        acc >= 0.85 && elapsed < Duration::from_secs(15 * 60),
        format!(
            "test accuracy {acc:.4} (Bayes 0.95), clips {sizes:?}, {:.0}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn c6_ablation_trend(shared: &mut Shared) -> Outcome {
    let seeds = [0u64, 1, 2];
    let base = small_model();
    let cached = shared.full_seed0;
    let data = shared.learn_data();
    let mut table: Vec<(Variant, Vec<f64>)> = Vec::new();
    for v in [Variant::Full, Variant::V3, Variant::V4, Variant::V5] {
        let accs = seeds
            .iter()
            .map(|&s| match (v, s, cached) {
                (Variant::Full, 0, Some(acc)) => acc,
                _ => test_accuracy(&v.apply(&base), data, s),
            })
            .collect();
        table.push((v, accs));
    }
    let full = table[0].1.clone();
    let gap = |accs: &[f64]| median(full.iter().zip(accs).map(|(f, a)| f - a).collect());
    let g3 = gap(&table[1].1);
    let g4 = gap(&table[2].1);
    let g5 = gap(&table[3].1);
    let listing = table
        .iter()
        .map(|(v, a)| {
            let accs: Vec<String> = a.iter().map(|x| format!("{x:.4}")).collect();
            format!("{} [{}]", v.name(), accs.join(" "))
        })
        .collect::<Vec<_>>()
        .join(", ");
    outcome(
        g3 >= 0.10 && g4 >= 0.0 && g5 >= 0.0,
        format!("median gaps v3 {g3:+.4} v4 {g4:+.4} v5 {g5:+.4}; {listing}"),
    )
}

fn c7_metric_oracle(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_auc = 0.0f64;
    let mut count_mismatches = 0;
    let mut undefined = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=60);
        let coarse = rng.random_bool(0.5);
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if coarse {
                    rng.random_range(0..5) as f64 / 4.0
                } else {
                    rng.random::<f64>()
                }
            })
            .collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let threshold = if coarse { 0.5 } else { rng.random::<f64>() };
        let m = compute_metrics(&scores, &labels, threshold).unwrap();
        let mut counts = [0usize; 4];
        for (&s, &y) in scores.iter().zip(&labels) {
            let idx = match (s >= threshold, y) {
                (true, 1) => 0,
                (true, _) => 1,
                (false, 0) => 2,
                _ => 3,
            };
            counts[idx] += 1;
        }
        if counts != [m.tp, m.fp, m.tn, m.fn_] {
            count_mismatches += 1;
        }
        let pos: Vec<f64> = scores.iter().zip(&labels).filter(|p| *p.1 == 1).map(|p| *p.0).collect();
        let neg: Vec<f64> = scores.iter().zip(&labels).filter(|p| *p.1 == 0).map(|p| *p.0).collect();
        if pos.is_empty() || neg.is_empty() {
            undefined += 1;
            if m.auc.is_some() || roc_auc(&scores, &labels).is_ok() {
                count_mismatches += 1;
            }
            continue;
        }
        let mut wins = 0.0;
        for p in &pos {
            for q in &neg {
                wins += if p > q {
                    1.0
                } else if p == q {
                    0.5
                } else {
                    0.0
                };
            }
        }
        let oracle = wins / (pos.len() * neg.len()) as f64;
        worst_auc = worst_auc.max((m.auc.unwrap() - oracle).abs());
    }
    outcome(
        count_mismatches == 0 && worst_auc <= 1e-12,
        format!(
            "1000 instances ({undefined} single-class), count mismatches {count_mismatches}, worst AUC error {worst_auc:.1e}"
        ),
    )
}

/// Every admissible window end, thinned to the stride lattice through the first.
fn oracle_ends(track: &PedestrianTrack, cfg: &SamplerConfig) -> Vec<i64> {
    let present: BTreeSet<i64> = track.frames.iter().map(|f| f.frame_index).collect();
    let (Some(&lo), Some(&hi)) = (present.first(), present.last()) else {
        return Vec::new();
    };
    let n = cfg.n_frames as i64;
    let admissible: Vec<i64> = (lo..=hi)
        .filter(|&t| {
            let tte = track.event_frame - t;
            (t - n + 1..=t).all(|k| present.contains(&k)) && cfg.tte_min <= tte && tte <= cfg.tte_max
        })
        .collect();
    let stride = ((cfg.n_frames as f64 * (1.0 - cfg.overlap)).round() as i64).max(1);
    match admissible.first() {
        Some(&a) => admissible.into_iter().filter(|t| (t - a) % stride == 0).collect(),
        None => Vec::new(),
    }
}

fn c8_sampler_oracle(_: &mut Shared) -> Outcome {
    let template = generate_dataset(
        &SynthConfig {
            n_tracks: 10,
            ..SynthConfig::default()
        },
        &ScenarioRule::multi_context(0.0),
        8,
        Flavor::Jaad,
    )
    .unwrap()
    .train[0]
        .clone();
    let make = |indices: &[i64], event: i64| PedestrianTrack {
        frames: indices
            .iter()
            .map(|&i| {
                let mut f = template.frames[0].clone();
                f.frame_index = i;
                f.vehicle_speed = i as f64;
                f
            })
            .collect(),
        event_frame: event,
        ..template.clone()
    };

    let mut failures = Vec::new();
    // the worked examples: frames 0..=99, event at 99
    let full: Vec<i64> = (0..100).collect();
    let track = make(&full, 99);
    let ends = |cfg: &SamplerConfig| -> Vec<i64> {
        sample_clips(&track, cfg)
            .iter()
            .map(|c| c.frames.last().unwrap().frame_index)
            .collect()
    };
    if ends(&SamplerConfig::default()) != (39..=69).step_by(3).collect::<Vec<_>>() {
        failures.push("default example".to_string());
    }
    let extended = SamplerConfig {
        tte_min: 60,
        tte_max: 90,
        ..SamplerConfig::default()
    };
    // TTE alone admits t in [9, 39]; a full 16-frame window first fits at t = 15
    let tte_window: Vec<i64> = (0..100).filter(|t| (60..=90).contains(&(99 - t))).collect();
    if tte_window != (9..=39).collect::<Vec<_>>()
        || ends(&extended) != (15..=39).step_by(3).collect::<Vec<_>>()
    {
        failures.push("extended example".to_string());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut extended_cases = 0;
    let mut clips_seen = 0;
    for case in 0..1000 {
        let (tte_min, tte_max) = match case % 3 {
            0 => (30, 60),
            1 => (60, 90),
            _ => {
                let a = rng.random_range(0..80);
                (a, a + rng.random_range(0..40))
            }
        };
        extended_cases += (tte_min == 60 && tte_max == 90) as usize;
        let cfg = SamplerConfig {
            n_frames: rng.random_range(2..=20),
            overlap: [0.0, 0.5, 0.8, rng.random_range(0.0..0.95)][rng.random_range(0..4)],
            tte_min,
            tte_max,
        };
        let start = rng.random_range(-10..40);
        let len = rng.random_range(1..160);
        let drop = [0.0, 0.02, 0.1][rng.random_range(0..3)];
        let indices: Vec<i64> = (start..start + len).filter(|_| !rng.random_bool(drop)).collect();
        let event = start + len - 1 + rng.random_range(-30..100);
        let track = make(&indices, event);
        let expected = oracle_ends(&track, &cfg);
        let clips = sample_clips(&track, &cfg);
        clips_seen += clips.len();
        let got: Vec<i64> = clips.iter().map(|c| c.frames.last().unwrap().frame_index).collect();
        let contents_ok = clips.iter().all(|c| {
            let end = c.frames.last().unwrap().frame_index;
            c.frames.len() == cfg.n_frames
                && c.frames
                    .iter()
                    .zip(end - cfg.n_frames as i64 + 1..)
                    .all(|(f, k)| f.frame_index == k && f.vehicle_speed == k as f64)
                && c.label == track.label
                && c.tte_frames == event - end
        });
        if got != expected || !contents_ok {
            failures.push(format!("case {case}"));
        }
    }
    outcome(
        failures.is_empty(),
        format!(
            "1000 random tracks ({extended_cases} at TTE 60-90, {clips_seen} clips) plus 2 worked examples, failures {failures:?}"
        ),
    )
}

fn c9_determinism(_: &mut Shared) -> Outcome {
    let data = synthetic_splits(100, &ScenarioRule::multi_context(0.05), 9);
    let model = small_model();
    let cfg = TrainConfig {
        epochs: 2,
        ..learn_train_config(9)
    };
    let a = train::<f32>(&model, &data.train, &data.val, &cfg).unwrap();
    let b = train::<f32>(&model, &data.train, &data.val, &cfg).unwrap();
    let other = train::<f32>(&model, &data.train, &data.val, &TrainConfig { seed: 10, ..cfg.clone() })
        .unwrap();
    let repeatable = bits(&a.final_params) == bits(&b.final_params)
        && bits(&a.best_params) == bits(&b.best_params)
        && a.history == b.history;
    let seed_matters = bits(&a.final_params) != bits(&other.final_params);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let ckpt = Checkpoint {
        model: model.clone(),
        schema: data.schema.clone(),
        sampler: sparse_sampler(),
        params: a.final_params.clone(),
    };
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load_for(&path, &model).unwrap();
    let bitwise = bits(&loaded.params) == bits(&a.final_params) && loaded == ckpt;
    let before = score_clips(&model, &a.final_params, &data.test).unwrap();
    let after = score_clips(&model, &loaded.params, &data.test).unwrap();
    let same_eval = before == after
        && evaluate(&model, &a.final_params, &data.test, 0.5).unwrap()
            == evaluate(&model, &loaded.params, &data.test, 0.5).unwrap();
    outcome(
        repeatable && seed_matters && bitwise && same_eval,
        format!(
            "repeatable runs {repeatable}, seed changes weights {seed_matters}, checkpoint bitwise {bitwise}, eval after load identical {same_eval}"
        ),
    )
}

fn c10_attention_signal(_: &mut Shared) -> Outcome {
    let data = synthetic_splits(2000, &ScenarioRule::environment_only(0.05), 10);
    let model = small_model();
    let cfg = TrainConfig {
        epochs: 6,
        ..learn_train_config(10)
    };
    let out = train::<f32>(&model, &data.train, &data.val, &cfg).unwrap();
    let acc = evaluate(&model, &out.best_params, &data.test, 0.5).unwrap().acc;
    let summary = attention_summary(&model, &out.best_params, &data.test).unwrap();
    let e = summary.tokens.iter().position(|t| t == "E").unwrap();
    let on_e: Vec<f64> = summary.gc.iter().map(|m| m[0][e]).collect();
    let best = on_e.iter().copied().fold(0.0, f64::max);
    let shown: Vec<String> = on_e.iter().map(|w| format!("{w:.3}")).collect();
    outcome(
        best > 0.2,
        format!(
            "GC weight on E per head [{}] over {} test clips, test accuracy {acc:.4}",
            shown.join(" "),
            summary.clips
        ),
    )
}

fn c11_throughput(_: &mut Shared) -> Outcome {
    let cfg = MftConfig::default();
    let params = MftParameters::<f32>::init(&cfg, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let clip = random_clip(cfg.flavor, cfg.n_frames, 1, &mut rng);
    for _ in 0..3 {
        predict(&cfg, &params, &clip).unwrap();
    }
    let mut times: Vec<f64> = (0..20)
        .map(|_| {
            let t = Instant::now();
            predict(&cfg, &params, &clip).unwrap();
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    times.sort_by(f64::total_cmp);
    let worst = *times.last().unwrap();
    outcome(
        worst < 100.0,
        format!(
            "single-clip forward, median {:.2} ms, worst {worst:.2} ms over 20 runs (reference 23.20 ms)",
            times[10]
        ),
    )
}

type Criterion = (u32, &'static str, fn(&mut Shared) -> Outcome);

const CRITERIA: [Criterion; 11] = [
    (1, "parameter count", c1_parameter_count),
    (2, "gradient integrity", c2_gradient_integrity),
    (3, "shape and stochasticity", c3_shapes_and_stochasticity),
    (4, "capacity", c4_capacity),
    (5, "learnability", c5_learnability),
    (6, "ablation trend", c6_ablation_trend),
    (7, "metric oracle", c7_metric_oracle),
    (8, "sampler oracle", c8_sampler_oracle),
    (9, "determinism and persistence", c9_determinism),
    (10, "attention signal", c10_attention_signal),
    (11, "throughput", c11_throughput),
];

fn main() {
    let selected: BTreeSet<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut shared = Shared::default();
    let mut failed = Vec::new();
    for (id, title, check) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| check(&mut shared))).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let verdict = if result.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {id:>2} {verdict}  {title}: {} [{:.1}s]",
            result.detail,
            start.elapsed().as_secs_f64()
        );
        if !result.pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
