//! Three-stage training orchestration.
//!
//! Stage 1 trains the repairing net against the critic bank. Its weights
//! then freeze for good: stage 2-pre warms up the denoiser behind it on
//! the SNR and compressed-spectrum terms alone, and stage 2-ft continues
//! with a fresh critic bank. Every step derives its randomness from the
//! plan seed and the step index, so a run is a pure function of (plan,
//! data, initial parameters) and an interrupted run resumes bit-exactly.
//!
//! Gradient scoping is structural rather than bookkept: a critic step runs
//! the generator on a detached graph, and a generator step freezes the
//! critic parameters so they bind as constants. Each optimizer therefore
//! only ever sees gradients for its own side.

use std::path::Path;

use ndarray::{s, Array3, Array4, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::AudioClip;
use crate::ckpt::{
    self, SystemManifest, TensorRecord, DENOISE_PREFIX, DISC_PREFIX, REPAIR_PREFIX,
};
use crate::denoise::{DenoiseNet, DenoiseNetConfig};
use crate::disc::{DiscriminatorBank, DiscriminatorBankConfig};
use crate::dsp::{self, StftConfig};
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_losses, asym_penalty_graph, composite, log_mag_l1_graph, plc_loss_graph,
    si_snr_graph, spectral_convergence_graph, LossReport, LossWeights, Stage, Term, TermValues,
};
use crate::nn::layers::DftBasis;
use crate::nn::optim::{AdamW, AdamWConfig};
use crate::nn::params::Init;
use crate::nn::{ParamStore, Tape, T};
use crate::repair::{RepairNet, RepairNetConfig};

/// Everything a stage run is parameterized by.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainPlan {
    pub stage: Stage,
    pub steps: u64,
    pub batch: usize,
    /// Crop length per batch member, seconds; rounded onto the frame grid.
    pub crop_s: f64,
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Steps between resume snapshots; 0 disables them.
    pub ckpt_every: u64,
    pub seed: u64,
    pub track: u8,
    pub weights: LossWeights,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            stage: Stage::Repair,
            steps: 1000,
            batch: 8,
            crop_s: 1.0,
            lr: 2e-4,
            betas: (0.9, 0.999),
            weight_decay: 0.01,
            clip_norm: 5.0,
            ckpt_every: 200,
            seed: 0,
            track: 1,
            weights: LossWeights::default(),
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.steps == 0 {
            bad.push("steps");
        }
        if self.batch == 0 {
            bad.push("batch");
        }
        if !(self.crop_s > 0.0) {
            bad.push("crop_s");
        }
        if !(self.clip_norm > 0.0) {
            bad.push("clip_norm");
        }
        if self.track != 1 && self.track != 2 {
            bad.push("track");
        }
        if !bad.is_empty() {
            return Err(Error::InvalidConfig(format!("train plan fields out of range: {bad:?}")));
        }
        self.optimizer().validate()?;
        self.weights.validate()
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.betas.0,
            beta2: self.betas.1,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }
}

/// Marks every parameter under `prefix` as frozen; bound tensors become
/// constants, so no gradient or update can reach them. Idempotent.
pub fn freeze(store: &mut ParamStore, prefix: &str) -> usize {
    store.set_trainable_prefix(prefix, false)
}

/// Reverses [`freeze`].
pub fn unfreeze(store: &mut ParamStore, prefix: &str) -> usize {
    store.set_trainable_prefix(prefix, true)
}

/// The networks a stage trains or runs, over one shared parameter store.
pub struct TrainSystem {
    pub stft: StftConfig,
    pub store: ParamStore,
    pub repair: RepairNet,
    pub denoise: Option<DenoiseNet>,
    pub bank: Option<DiscriminatorBank>,
    basis: DftBasis,
}

impl TrainSystem {
    pub fn new(
        stft: StftConfig,
        store: ParamStore,
        repair: RepairNet,
        denoise: Option<DenoiseNet>,
        bank: Option<DiscriminatorBank>,
    ) -> Result<Self> {
        if repair.cfg.bins != stft.bins() {
            return Err(Error::InvalidConfig(format!(
                "repair net expects {} bins but the transform yields {}",
                repair.cfg.bins,
                stft.bins()
            )));
        }
        if let Some(d) = &denoise {
            if d.cfg.bins != stft.bins() {
                return Err(Error::InvalidConfig(format!(
                    "denoise net expects {} bins but the transform yields {}",
                    d.cfg.bins,
                    stft.bins()
                )));
            }
        }
        let basis = DftBasis::new(stft)?;
        Ok(TrainSystem { stft, store, repair, denoise, bank, basis })
    }

    /// Manifest describing the inference half of this system after `stage`.
    pub fn manifest(&self, stage: Stage, track: u8) -> SystemManifest {
        SystemManifest {
            track,
            stage,
            stft: self.stft,
            repair: Some(self.repair.cfg.clone()),
            denoise: self.denoise.as_ref().map(|d| d.cfg.clone()),
        }
    }
}

/// Architecture choices for the parts a stage builds fresh.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct StageSetup {
    pub stft: StftConfig,
    pub repair: RepairNetConfig,
    pub denoise: DenoiseNetConfig,
    pub bank: DiscriminatorBankConfig,
}

/// Builds the system a stage needs, enforcing the protocol order: stage 1
/// starts fresh, stage 2-pre consumes a stage-1 checkpoint, stage 2-ft a
/// stage-2-pre one. The repairing net loads frozen for both second-stage
/// phases; critic banks are always built fresh.
pub fn prepare_stage(
    stage: Stage,
    setup: &StageSetup,
    prev_ckpt: Option<&Path>,
    seed: u64,
) -> Result<TrainSystem> {
    let mut init = Init::new(seed);
    match stage {
        Stage::Repair => {
            let mut store = ParamStore::new();
            let repair = RepairNet::build(&mut store, &mut init, REPAIR_PREFIX, &setup.repair)?;
            let bank_cfg =
                DiscriminatorBankConfig { band_stft: setup.stft, ..setup.bank.clone() };
            let bank = DiscriminatorBank::build(&mut store, &mut init, DISC_PREFIX, &bank_cfg)?;
            TrainSystem::new(setup.stft, store, repair, None, Some(bank))
        }
        Stage::DenoisePretrain => {
            let loaded = load_prerequisite(stage, prev_ckpt, Stage::Repair, false)?;
            let mut store = loaded.store;
            let repair = loaded.repair.expect("checked by load_prerequisite");
            freeze(&mut store, REPAIR_PREFIX);
            let denoise_cfg = DenoiseNetConfig {
                bins: loaded.manifest.stft.bins(),
                ..setup.denoise.clone()
            };
            let denoise =
                DenoiseNet::build(&mut store, &mut init, DENOISE_PREFIX, &denoise_cfg)?;
            TrainSystem::new(loaded.manifest.stft, store, repair, Some(denoise), None)
        }
        Stage::DenoiseFinetune => {
            let loaded = load_prerequisite(stage, prev_ckpt, Stage::DenoisePretrain, true)?;
            let mut store = loaded.store;
            let repair = loaded.repair.expect("checked by load_prerequisite");
            let denoise = loaded.denoise.expect("checked by load_prerequisite");
            freeze(&mut store, REPAIR_PREFIX);
            let bank_cfg =
                DiscriminatorBankConfig { band_stft: loaded.manifest.stft, ..setup.bank.clone() };
            let bank = DiscriminatorBank::build(&mut store, &mut init, DISC_PREFIX, &bank_cfg)?;
            TrainSystem::new(loaded.manifest.stft, store, repair, Some(denoise), Some(bank))
        }
    }
}

fn load_prerequisite(
    stage: Stage,
    path: Option<&Path>,
    min_stage: Stage,
    need_denoiser: bool,
) -> Result<ckpt::LoadedSystem> {
    let path = path.ok_or_else(|| {
        Error::MissingPrerequisite(format!(
            "stage {stage} needs the stage {min_stage} checkpoint"
        ))
    })?;
    if !path.exists() {
        return Err(Error::MissingPrerequisite(format!(
            "stage {stage} checkpoint prerequisite not found: {}",
            path.display()
        )));
    }
    let loaded = ckpt::load_system(path)?;
    if loaded.manifest.stage < min_stage {
        return Err(Error::MissingPrerequisite(format!(
            "stage {stage} needs a checkpoint from stage {min_stage} or later, got stage {}",
            loaded.manifest.stage
        )));
    }
    if loaded.repair.is_none() {
        return Err(Error::MissingPrerequisite(format!(
            "checkpoint {} has no repairing network",
            path.display()
        )));
    }
    if need_denoiser && loaded.denoise.is_none() {
        return Err(Error::MissingPrerequisite(format!(
            "checkpoint {} has no denoising network",
            path.display()
        )));
    }
    Ok(loaded)
}

/// One line of the loss log.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StepRecord {
    pub step: u64,
    #[serde(flatten)]
    pub report: LossReport,
    /// Critic objective of the paired discriminator step, when one ran.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub disc: Option<f64>,
}

/// Mutable half of a run: progress counter, optimizers, smoothed loss, and
/// the loss log so far.
pub struct TrainState {
    pub step: u64,
    pub ema: Option<f64>,
    pub opt_g: AdamW,
    pub opt_d: Option<AdamW>,
    pub records: Vec<StepRecord>,
}

/// Weight of one new observation in the running loss average.
const EMA_ALPHA: f64 = 0.01;

/// Checks that the system matches the plan's stage and builds its
/// optimizers: one for the trained network, one for the critic bank when
/// the stage is adversarial.
pub fn init_state(plan: &TrainPlan, sys: &TrainSystem) -> Result<TrainState> {
    plan.validate()?;
    let gen_prefix = match plan.stage {
        Stage::Repair => REPAIR_PREFIX,
        Stage::DenoisePretrain | Stage::DenoiseFinetune => DENOISE_PREFIX,
    };
    if sys.store.names(gen_prefix).is_empty() {
        return Err(Error::MissingPrerequisite(format!(
            "no parameters under {gen_prefix} to train for stage {}",
            plan.stage
        )));
    }
    let wants_bank = matches!(plan.stage, Stage::Repair | Stage::DenoiseFinetune);
    if wants_bank != sys.bank.is_some() {
        return Err(Error::MissingPrerequisite(format!(
            "stage {} {} a critic bank",
            plan.stage,
            if wants_bank { "requires" } else { "does not use" }
        )));
    }
    if plan.stage != Stage::Repair && sys.denoise.is_none() {
        return Err(Error::MissingPrerequisite(format!(
            "stage {} requires a denoising network",
            plan.stage
        )));
    }
    let opt_d = sys.bank.as_ref().map(|_| AdamW::new(plan.optimizer())).transpose()?;
    Ok(TrainState {
        step: 0,
        ema: None,
        opt_g: AdamW::new(plan.optimizer())?,
        opt_d,
        records: Vec::new(),
    })
}

struct Batch {
    degraded: ndarray::ArrayD<f64>,
    clean: ndarray::ArrayD<f64>,
}

/// Crops an aligned batch and converts it to `[B, 2, F, T]` plane pairs.
/// The crop length lands on the frame grid, so the in-graph inverse
/// transform reconstructs exactly the cropped span.
fn sample_batch(
    plan: &TrainPlan,
    stft: &StftConfig,
    pairs: &[(AudioClip, AudioClip)],
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    let chosen: Vec<usize> = (0..plan.batch).map(|_| rng.random_range(0..pairs.len())).collect();
    let min_len = chosen.iter().map(|&i| pairs[i].0.len()).min().expect("batch nonempty");
    let sr = pairs[chosen[0]].0.sample_rate as f64;
    let want = (plan.crop_s * sr).round() as usize;
    let len = want.min(min_len).max(stft.win_len);
    let len = stft.win_len + (len - stft.win_len) / stft.hop * stft.hop;

    let mut degraded_planes = Vec::with_capacity(plan.batch);
    let mut clean_planes = Vec::with_capacity(plan.batch);
    for &i in &chosen {
        let (d, c) = &pairs[i];
        let start = rng.random_range(0..=d.len() - len);
        let crop = |clip: &AudioClip| -> Result<Array3<f64>> {
            let cut = AudioClip::from_samples(
                clip.samples[start..start + len].to_vec(),
                clip.sample_rate,
            );
            Ok(dsp::stft(&cut, stft)?.to_planes())
        };
        degraded_planes.push(crop(d)?);
        clean_planes.push(crop(c)?);
    }
    let (_, f, t) = degraded_planes[0].dim();
    let stack = |planes: &[Array3<f64>]| {
        let mut out = Array4::<f64>::zeros((plan.batch, 2, f, t));
        for (i, p) in planes.iter().enumerate() {
            out.slice_mut(s![i, .., .., ..]).assign(p);
        }
        out.into_dyn()
    };
    Ok(Batch { degraded: stack(&degraded_planes), clean: stack(&clean_planes) })
}

/// The generator mapping of a stage: the repairing net alone for stage 1,
/// the frozen-repair cascade for both second-stage phases.
fn generator_planes(sys: &TrainSystem, stage: Stage, tape: &Tape, x: &T) -> T {
    let repaired = sys.repair.forward_planes(tape, &sys.store, x);
    match stage {
        Stage::Repair => repaired,
        Stage::DenoisePretrain | Stage::DenoiseFinetune => sys
            .denoise
            .as_ref()
            .expect("checked at init")
            .forward_planes(tape, &sys.store, &repaired),
    }
}

/// `[B, 2, F, T]` planes flattened to the `[B, 2F, T]` row layout the
/// graph inverse transform takes.
fn rows(tape: &Tape, planes: &T) -> T {
    let s = planes.shape();
    tape.reshape(planes, &[s[0], s[1] * s[2], s[3]])
}

fn scalar(t: &T) -> f64 {
    t.v[IxDyn(&[])]
}

fn finite(step: u64, what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Diverged(format!("step {step}: {what} is {v}")))
    }
}

/// Runs the plan's stage over `(degraded, clean)` pairs, continuing from
/// `state.step`. Appends one [`StepRecord`] per step; when `resume` names a
/// path, snapshots land there at the plan's cadence and at the end.
pub fn run_stage(
    plan: &TrainPlan,
    pairs: &[(AudioClip, AudioClip)],
    sys: &mut TrainSystem,
    state: &mut TrainState,
    resume: Option<&Path>,
) -> Result<()> {
    plan.validate()?;
    if pairs.is_empty() {
        return Err(Error::Empty("no training pairs".into()));
    }
    for (d, c) in pairs {
        if d.len() != c.len() {
            return Err(Error::ShapeMismatch(format!(
                "pair lengths differ: degraded {}, clean {}",
                d.len(),
                c.len()
            )));
        }
        if d.len() < sys.stft.win_len {
            return Err(Error::InputTooShort { need: sys.stft.win_len, got: d.len() });
        }
    }

    while state.step < plan.steps {
        let step = state.step;
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
        rng.set_stream(step.wrapping_add(1));
        let batch = sample_batch(plan, &sys.stft, pairs, &mut rng)?;

        let disc = if sys.bank.is_some() {
            Some(disc_step(plan, sys, state, &batch, step)?)
        } else {
            None
        };
        let report = gen_step(plan, sys, state, &batch, step)?;

        state.ema = Some(match state.ema {
            Some(e) => (1.0 - EMA_ALPHA) * e + EMA_ALPHA * report.total,
            None => report.total,
        });
        state.records.push(StepRecord { step, report, disc });
        state.step += 1;

        if let Some(path) = resume {
            if plan.ckpt_every > 0 && state.step % plan.ckpt_every == 0 {
                save_resume(path, plan, sys, state)?;
            }
        }
    }
    if let Some(path) = resume {
        save_resume(path, plan, sys, state)?;
    }
    Ok(())
}

/// One critic update on the current batch. The generator runs detached, so
/// no generator gradient exists anywhere in this graph.
fn disc_step(
    plan: &TrainPlan,
    sys: &mut TrainSystem,
    state: &mut TrainState,
    batch: &Batch,
    step: u64,
) -> Result<f64> {
    let detached = Tape::inference();
    let x = detached.constant(batch.degraded.clone());
    let est = generator_planes(sys, plan.stage, &detached, &x);
    let est_wave = sys.basis.istft(&detached, &rows(&detached, &est));
    let ref_planes = detached.constant(batch.clean.clone());
    let ref_wave = sys.basis.istft(&detached, &rows(&detached, &ref_planes));

    let tape = Tape::new();
    let bank = sys.bank.as_ref().expect("caller checked");
    let outputs = bank.forward_waves(
        &tape,
        &sys.store,
        &tape.constant_rc(ref_wave.v.clone()),
        &tape.constant_rc(est_wave.v.clone()),
    );
    let adv = adversarial_losses(&tape, &outputs)?;
    let loss = finite(step, "critic loss", scalar(&adv.disc))?;
    let mut grads = tape.backward(&adv.disc)?;
    grads.clip_global_norm(plan.clip_norm);
    state.opt_d.as_mut().expect("caller checked").step(&mut sys.store, &grads)?;
    Ok(loss)
}

/// One generator update on the current batch. Critic parameters are frozen
/// for the duration, so they bind as constants and receive nothing.
fn gen_step(
    plan: &TrainPlan,
    sys: &mut TrainSystem,
    state: &mut TrainState,
    batch: &Batch,
    step: u64,
) -> Result<LossReport> {
    let had_bank = sys.bank.is_some();
    if had_bank {
        freeze(&mut sys.store, DISC_PREFIX);
    }
    let result = gen_step_inner(plan, sys, state, batch, step);
    if had_bank {
        unfreeze(&mut sys.store, DISC_PREFIX);
    }
    result
}

fn gen_step_inner(
    plan: &TrainPlan,
    sys: &mut TrainSystem,
    state: &mut TrainState,
    batch: &Batch,
    step: u64,
) -> Result<LossReport> {
    let tape = Tape::new();
    let x = tape.constant(batch.degraded.clone());
    let est = generator_planes(sys, plan.stage, &tape, &x);
    let clean = tape.constant(batch.clean.clone());

    let terms = plan.stage.terms();
    let needs_waves =
        terms.iter().any(|t| matches!(t, Term::SiSnr | Term::Gen | Term::Fm));
    let waves = needs_waves.then(|| {
        let est_wave = sys.basis.istft(&tape, &rows(&tape, &est));
        let ref_wave = sys.basis.istft(&tape, &rows(&tape, &clean));
        (est_wave, ref_wave)
    });

    let mut values = TermValues::default();
    let mut adv = None;
    let mut graph_terms: Vec<(Term, T)> = Vec::new();
    for &term in terms {
        let t = match term {
            Term::Sc => spectral_convergence_graph(&tape, &est, &clean),
            Term::LogMag => log_mag_l1_graph(&tape, &est, &clean),
            Term::Asym => asym_penalty_graph(&tape, &est, &clean),
            Term::Plc => plc_loss_graph(&tape, &est, &clean),
            Term::SiSnr => {
                let (est_wave, ref_wave) = waves.as_ref().expect("just built");
                tape.neg(&si_snr_graph(&tape, est_wave, ref_wave))
            }
            Term::Gen | Term::Fm => {
                if adv.is_none() {
                    let (est_wave, ref_wave) = waves.as_ref().expect("just built");
                    let bank = sys.bank.as_ref().expect("checked at init");
                    let outputs = bank.forward_waves(&tape, &sys.store, ref_wave, est_wave);
                    adv = Some(adversarial_losses(&tape, &outputs)?);
                }
                let adv = adv.as_ref().expect("just set");
                if term == Term::Gen { adv.gen.clone() } else { adv.fm.clone() }
            }
        };
        values.set(term, scalar(&t));
        graph_terms.push((term, t));
    }

    let report = composite(plan.stage, &plan.weights, &values)?;
    finite(step, "generator loss", report.total)?;

    let mut total: Option<T> = None;
    for (term, t) in &graph_terms {
        let weighted = tape.scale(t, plan.weights.get(*term));
        total = Some(match total {
            Some(acc) => tape.add(&acc, &weighted),
            None => weighted,
        });
    }
    let total = total.expect("every stage has terms");
    let mut grads = tape.backward(&total)?;
    grads.clip_global_norm(plan.clip_norm);
    state.opt_g.step(&mut sys.store, &grads)?;
    Ok(report)
}

// ---- resume archives ---------------------------------------------------------

#[derive(serde::Serialize, serde::Deserialize)]
struct ResumeManifest {
    plan: TrainPlan,
    step: u64,
    ema: Option<f64>,
    opt_g_t: u64,
    opt_d_t: Option<u64>,
    system: SystemManifest,
    bank: Option<DiscriminatorBankConfig>,
}

/// Tensor-name prefix for the generator optimizer's moments.
const OPT_G: &str = "optg.";
/// Tensor-name prefix for the critic optimizer's moments.
const OPT_D: &str = "optd.";

/// Snapshots parameters, optimizer moments, and progress so a later
/// [`load_resume`] continues the run bit-exactly.
pub fn save_resume(
    path: impl AsRef<Path>,
    plan: &TrainPlan,
    sys: &TrainSystem,
    state: &TrainState,
) -> Result<()> {
    let (opt_g_t, opt_g_state) = state.opt_g.export_state();
    let opt_d_dump = state.opt_d.as_ref().map(|o| o.export_state());
    let manifest = ResumeManifest {
        plan: plan.clone(),
        step: state.step,
        ema: state.ema,
        opt_g_t,
        opt_d_t: opt_d_dump.as_ref().map(|(t, _)| *t),
        system: sys.manifest(plan.stage, plan.track),
        bank: sys.bank.as_ref().map(|b| b.cfg.clone()),
    };
    let mut records: Vec<TensorRecord> = sys
        .store
        .iter()
        .map(|(name, value, trainable)| TensorRecord {
            name: name.to_owned(),
            trainable,
            value: (**value).clone(),
        })
        .collect();
    for (name, value) in opt_g_state {
        records.push(TensorRecord { name: format!("{OPT_G}{name}"), trainable: false, value });
    }
    if let Some((_, opt_d_state)) = opt_d_dump {
        for (name, value) in opt_d_state {
            records.push(TensorRecord {
                name: format!("{OPT_D}{name}"),
                trainable: false,
                value,
            });
        }
    }
    let manifest =
        serde_json::to_value(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    ckpt::save_records(path, &manifest, &records)
}

/// Rebuilds the system and state saved by [`save_resume`].
pub fn load_resume(path: impl AsRef<Path>) -> Result<(TrainPlan, TrainSystem, TrainState)> {
    let (manifest, records) = ckpt::read_archive(&path)?;
    let manifest: ResumeManifest =
        serde_json::from_value(manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let plan = manifest.plan;
    plan.validate()?;

    let mut store = ParamStore::new();
    let mut init = Init::new(0);
    let repair_cfg = manifest.system.repair.as_ref().ok_or_else(|| {
        Error::Checkpoint("resume archive lacks the repairing net config".into())
    })?;
    let repair = RepairNet::build(&mut store, &mut init, REPAIR_PREFIX, repair_cfg)?;
    let denoise = manifest
        .system
        .denoise
        .as_ref()
        .map(|cfg| DenoiseNet::build(&mut store, &mut init, DENOISE_PREFIX, cfg))
        .transpose()?;
    let bank = manifest
        .bank
        .as_ref()
        .map(|cfg| DiscriminatorBank::build(&mut store, &mut init, DISC_PREFIX, cfg))
        .transpose()?;

    let (moments, params): (Vec<_>, Vec<_>) = records
        .into_iter()
        .partition(|r| r.name.starts_with(OPT_G) || r.name.starts_with(OPT_D));
    let mut required = vec![REPAIR_PREFIX];
    if denoise.is_some() {
        required.push(DENOISE_PREFIX);
    }
    if bank.is_some() {
        required.push(DISC_PREFIX);
    }
    ckpt::load_archive_into(params, &mut store, &required)?;
    if plan.stage != Stage::Repair {
        freeze(&mut store, REPAIR_PREFIX);
    }

    let sys = TrainSystem::new(manifest.system.stft, store, repair, denoise, bank)?;
    let mut state = init_state(&plan, &sys)?;
    state.step = manifest.step;
    state.ema = manifest.ema;

    let mut opt_g_state = Vec::new();
    let mut opt_d_state = Vec::new();
    for r in moments {
        if let Some(rest) = r.name.strip_prefix(OPT_G) {
            opt_g_state.push((rest.to_owned(), r.value));
        } else if let Some(rest) = r.name.strip_prefix(OPT_D) {
            opt_d_state.push((rest.to_owned(), r.value));
        }
    }
    state.opt_g.import_state(manifest.opt_g_t, opt_g_state)?;
    match (state.opt_d.as_mut(), manifest.opt_d_t) {
        (Some(opt_d), Some(t)) => opt_d.import_state(t, opt_d_state)?,
        (None, None) => {}
        _ => {
            return Err(Error::Checkpoint(
                "critic optimizer state does not match the archived stage".into(),
            ))
        }
    }
    Ok((plan, sys, state))
}
