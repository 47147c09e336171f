use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use mft::checkpoint::Checkpoint;
use mft::eval::{ablation_run, attention_summary, evaluate, Variant};
use mft::ingest::{
    encode_all, prepare_splits, read_annotations, sample_tracks, write_annotations, ClipSample,
    Flavor, PedestrianTrack, PreparedSplits, SamplerConfig,
};
use mft::model::{check_model_gradients, param_count, MftConfig, MftParameters};
use mft::synth::{bayes_accuracy, generate_dataset, ScenarioRule, SynthConfig};
use mft::testing::{random_clip, toy_config};
use mft::train::{train_from, EpochRecord};
use mft::{MftError, Result};
use mft_autograd::{OpKind, Real};
use serde::{Deserialize, Serialize};

use crate::config::{Precision, Resolved, RunConfig, Split};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Written next to the JSONL files by `synth-gen`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub flavor: Flavor,
    pub rule: ScenarioRule,
    pub synth: SynthConfig,
    pub splits: SplitCounts,
    pub files: SplitFiles,
    /// Accuracy of the noiseless rule against the generated labels.
    pub bayes_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFiles {
    pub train: String,
    pub val: String,
    pub test: String,
}

fn create_out(run: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&run.out)?;
    Ok(&run.out)
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn synth_gen(r: &Resolved) -> Result<()> {
    let run = &r.run;
    let rule = run.synth.rule();
    let flavor = run.model.flavor;
    let ds = generate_dataset(&run.synth.synth_config(), &rule, run.seed, flavor)?;
    let out = create_out(run)?;
    for (split, tracks) in [
        (Split::Train, &ds.train),
        (Split::Val, &ds.val),
        (Split::Test, &ds.test),
    ] {
        let file = BufWriter::new(fs::File::create(out.join(split.file_name()))?);
        write_annotations(file, tracks, flavor)?;
    }
    let (train, val, test) = ds.split_sizes();
    let manifest = Manifest {
        seed: run.seed,
        flavor,
        rule: rule.clone(),
        synth: run.synth.synth_config(),
        splits: SplitCounts { train, val, test },
        files: SplitFiles {
            train: Split::Train.file_name().into(),
            val: Split::Val.file_name().into(),
            test: Split::Test.file_name().into(),
        },
        bayes_accuracy: bayes_accuracy(&rule, &ds)?,
    };
    write_json(&out.join(MANIFEST), &manifest)?;
    println!(
        "wrote {} tracks ({train}/{val}/{test}) to {}",
        train + val + test,
        out.display()
    );
    Ok(())
}

fn data_dir(run: &RunConfig) -> Result<&Path> {
    run.data
        .as_deref()
        .ok_or_else(|| MftError::Config("no dataset directory given (use --data)".into()))
}

fn manifest_flavor(dir: &Path) -> Result<Option<Flavor>> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Ok(None);
    }
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(path)?)?;
    Ok(Some(manifest.flavor))
}

/// The dataset's flavor. An explicit request that disagrees with the
/// manifest is a configuration error.
fn dataset_flavor(dir: &Path, wanted: Flavor, explicit: bool) -> Result<Flavor> {
    match manifest_flavor(dir)? {
        Some(f) if f != wanted && explicit => Err(MftError::Config(format!(
            "dataset in {} is {}, but {} was requested",
            dir.display(),
            f.name(),
            wanted.name()
        ))),
        Some(f) => Ok(f),
        None => Ok(wanted),
    }
}

fn read_split(dir: &Path, split: Split, flavor: Flavor) -> Result<Vec<PedestrianTrack>> {
    read_annotations(&dir.join(split.file_name()), flavor)
}

/// Model configuration with the dataset's flavor and a matching sampler.
fn prepare(r: &Resolved) -> Result<(MftConfig, PreparedSplits)> {
    let run = &r.run;
    let dir = data_dir(run)?;
    let flavor = dataset_flavor(dir, run.model.flavor, r.flavor_explicit)?;
    let model = MftConfig {
        flavor,
        ..run.model.clone()
    };
    model.validate()?;
    if run.sampler.n_frames != model.n_frames {
        return Err(MftError::Config(format!(
            "sampler.n_frames ({}) differs from model.n_frames ({})",
            run.sampler.n_frames, model.n_frames
        )));
    }
    let prepared = prepare_splits(
        flavor,
        &read_split(dir, Split::Train, flavor)?,
        &read_split(dir, Split::Val, flavor)?,
        &read_split(dir, Split::Test, flavor)?,
        &run.sampler,
    )?;
    Ok((model, prepared))
}

fn log_epoch(rec: &EpochRecord) {
    match &rec.val {
        Some(m) => eprintln!(
            "epoch {:>3}  loss {:.6}  val acc {:.4}",
            rec.epoch, rec.train_loss, m.acc
        ),
        None => eprintln!("epoch {:>3}  loss {:.6}", rec.epoch, rec.train_loss),
    }
}

fn train_and_save<T: Real>(
    run: &RunConfig,
    model: &MftConfig,
    data: &PreparedSplits,
    out: &Path,
) -> Result<()> {
    let init = MftParameters::<T>::init(model, run.seed)?;
    let outcome = train_from(
        model,
        init,
        &data.train,
        &data.val,
        &run.train,
        &mut log_epoch,
    )?;
    let save = |params: &MftParameters<T>, name: &str| -> Result<PathBuf> {
        let path = out.join(name);
        Checkpoint {
            model: model.clone(),
            schema: data.schema.clone(),
            sampler: run.sampler.clone(),
            params: params.cast::<f32>(),
        }
        .save(&path)?;
        Ok(path)
    };
    let last = save(&outcome.final_params, "model.ckpt")?;
    save(&outcome.best_params, "best.ckpt")?;
    write_json(&out.join("history.json"), &outcome.history)?;
    println!("checkpoint: {}", last.display());
    Ok(())
}

pub fn train(r: &Resolved) -> Result<()> {
    let run = &r.run;
    let (model, data) = prepare(r)?;
    println!("parameters: {}", param_count(&model));
    println!(
        "clips: {} train / {} val / {} test",
        data.train.len(),
        data.val.len(),
        data.test.len()
    );
    let out = create_out(run)?;
    match run.precision.unwrap_or(Precision::F32) {
        Precision::F32 => train_and_save::<f32>(run, &model, &data, out),
        Precision::F64 => train_and_save::<f64>(run, &model, &data, out),
    }
}

/// Loads the checkpoint and encodes the requested split with its schema.
fn checkpoint_and_clips(r: &Resolved) -> Result<(Checkpoint, Vec<ClipSample>)> {
    let run = &r.run;
    let path = run
        .checkpoint
        .as_deref()
        .ok_or_else(|| MftError::Config("no checkpoint given (use --checkpoint)".into()))?;
    let ckpt = if r.model_explicit {
        Checkpoint::load_for(path, &run.model)?
    } else {
        Checkpoint::load(path)?
    };
    let flavor = ckpt.model.flavor;
    if r.flavor_explicit && run.model.flavor != flavor {
        return Err(MftError::Config(format!(
            "checkpoint is {}, but {} was requested",
            flavor.name(),
            run.model.flavor.name()
        )));
    }
    let dir = data_dir(run)?;
    dataset_flavor(dir, flavor, true)?;
    let sampler = SamplerConfig {
        tte_min: r.tte.0.unwrap_or(ckpt.sampler.tte_min),
        tte_max: r.tte.1.unwrap_or(ckpt.sampler.tte_max),
        ..ckpt.sampler.clone()
    };
    sampler.validate()?;
    let tracks = read_split(dir, run.split, flavor)?;
    let clips = encode_all(&sample_tracks(&tracks, &sampler), &ckpt.schema)?;
    Ok((ckpt, clips))
}

pub fn eval(r: &Resolved) -> Result<()> {
    let (ckpt, clips) = checkpoint_and_clips(r)?;
    let report = evaluate(&ckpt.model, &ckpt.params, &clips, r.run.threshold)?;
    let out = create_out(&r.run)?;
    write_json(&out.join("metrics.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

pub fn export_attention(r: &Resolved) -> Result<()> {
    let (ckpt, clips) = checkpoint_and_clips(r)?;
    let summary = attention_summary(&ckpt.model, &ckpt.params, &clips)?;
    let out = create_out(&r.run)?;
    let path = out.join("attention.json");
    write_json(&path, &summary)?;
    println!("attention summary of {} clips: {}", summary.clips, path.display());
    Ok(())
}

pub fn ablate(r: &Resolved) -> Result<()> {
    let run = &r.run;
    let variants = if run.variants.is_empty() {
        Variant::ALL.to_vec()
    } else {
        run.variants
            .iter()
            .map(|s| Variant::parse(s))
            .collect::<Result<Vec<_>>>()?
    };
    let (model, data) = prepare(r)?;
    let table = match run.precision.unwrap_or(Precision::F32) {
        Precision::F32 => ablation_run::<f32>(
            &model, &variants, &data.train, &data.val, &data.test, &run.train,
        )?,
        Precision::F64 => ablation_run::<f64>(
            &model, &variants, &data.train, &data.val, &data.test, &run.train,
        )?,
    };
    let out = create_out(run)?;
    let csv = table.to_csv();
    fs::write(out.join("ablation.csv"), &csv)?;
    write_json(&out.join("ablation.json"), &table)?;
    print!("{csv}");
    Ok(())
}

#[derive(Serialize)]
struct GradCheckReport<'a> {
    model: &'a MftConfig,
    tolerance: f64,
    step: f64,
    corrupted_op: Option<&'static str>,
    passed: bool,
    parameters: Vec<mft::model::ParamCheck>,
}

pub fn grad_check(r: &Resolved, corrupt_op: Option<&str>) -> Result<()> {
    let run = &r.run;
    let settings = &run.grad_check;
    if run.precision == Some(Precision::F32) {
        return Err(MftError::Config(
            "grad-check runs in 64-bit only; drop \"precision\": \"f32\"".into(),
        ));
    }
    if settings.clips == 0 {
        return Err(MftError::Config("grad_check.clips must be positive".into()));
    }
    let corrupted = corrupt_op
        .map(|name| {
            OpKind::parse(name)
                .ok_or_else(|| MftError::Config(format!("unknown operation {name:?}")))
        })
        .transpose()?;
    let model = settings
        .model
        .clone()
        .unwrap_or_else(|| toy_config(run.model.flavor));
    let params = MftParameters::<f64>::init(&model, run.seed)?;
    let mut rng = mft::rng::stream(run.seed, &[0x6C]);
    let clips: Vec<ClipSample> = (0..settings.clips)
        .map(|i| random_clip(model.flavor, model.n_frames, (i % 2 == 0) as u8, &mut rng))
        .collect();
    let checks = check_model_gradients(&model, &params, &clips, 2.0, settings.step, corrupted)?;
    let failed: Vec<&str> = checks
        .iter()
        .filter(|c| !c.passes(settings.tolerance))
        .map(|c| c.name.as_str())
        .collect();
    for c in &checks {
        let verdict = if c.passes(settings.tolerance) { "PASS" } else { "FAIL" };
        println!("{verdict} {:<28} max rel err {:.3e}", c.name, c.max_rel_err);
    }
    let report = GradCheckReport {
        model: &model,
        tolerance: settings.tolerance,
        step: settings.step,
        corrupted_op: corrupted.map(OpKind::name),
        passed: failed.is_empty(),
        parameters: checks.clone(),
    };
    let out = create_out(run)?;
    write_json(&out.join("grad_check.json"), &report)?;
    if failed.is_empty() {
        println!("gradient check passed for {} parameters", checks.len());
        Ok(())
    } else {
        Err(MftError::Numeric(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}
