//! Continual-training orchestration.
//!
//! A run pretrains a dual encoder on the old domain, then trains it on the
//! new domain's phases one at a time under one [`Strategy`], evaluating
//! retrieval on every domain's held-out split and diagnosing representation
//! drift against the previous snapshot after each phase.
//!
//! Seeds: every random stream is a [`child_seed`] of `config.seed` with the
//! fixed offsets in [`seed_offsets`].

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    imav_angles, ram_hist, recall_at_k, sam_delta_hist, AngleHistogram, PairedEmbeddings, RetrievalReport, RAM_BINS,
    SAM_BINS,
};
use crate::datastream::{
    buffer_update, domain_means, generate_domain, split_holdout, split_phases, DomainSpec, PhaseDataset, ReplayBuffer,
};
use crate::encoder::{backward, forward, Activation, DualEncoderSnapshot, MlpSpec};
use crate::error::{Error, Result};
use crate::losses::{distill_loss, ewc_penalty, infonce, DistillSettings, FisherDiag, LossValueAndGrad};
use crate::numeric::{child_seed, seeded_rng};
use crate::optimizer::{OptimizerConfig, OptimizerState};

/// Offsets passed to [`child_seed`] for each random stream of a run.
pub mod seed_offsets {
    pub const MODALITY_MAPS: u64 = 1;
    pub const OLD_DOMAIN: u64 = 2;
    pub const NEW_DOMAIN: u64 = 3;
    pub const OLD_HOLDOUT: u64 = 4;
    pub const NEW_HOLDOUT: u64 = 5;
    pub const PHASE_SPLIT: u64 = 6;
    pub const MODEL_INIT: u64 = 7;
    /// `+ phase`; further derived per epoch.
    pub const BATCH_ORDER: u64 = 100;
    /// `+ phase`.
    pub const BUFFER_UPDATE: u64 = 200;
    /// `+ phase`; further derived per step.
    pub const REPLAY_SAMPLING: u64 = 300;
    pub const JOINT_INIT: u64 = 400;
}

/// Retrieval cut-offs reported everywhere.
pub const RECALL_KS: [usize; 3] = [1, 5, 10];

pub const OLD_DOMAIN_NAME: &str = "old";
pub const NEW_DOMAIN_NAME: &str = "new";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Plain sequential fine-tuning.
    Ct,
    /// InfoNCE plus screened contrastive-matrix distillation.
    Modx,
    /// Same distillation without screening (LwF-style).
    ModxNoscreen,
    /// InfoNCE plus an elastic weight consolidation penalty.
    Ewc,
    /// InfoNCE on batches mixed with rehearsal rows.
    Replay,
    /// One model trained from scratch on all data.
    Joint,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Ct,
        Strategy::Modx,
        Strategy::ModxNoscreen,
        Strategy::Ewc,
        Strategy::Replay,
        Strategy::Joint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Ct => "ct",
            Strategy::Modx => "modx",
            Strategy::ModxNoscreen => "modx_noscreen",
            Strategy::Ewc => "ewc",
            Strategy::Replay => "replay",
            Strategy::Joint => "joint",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown strategy '{s}' (expected one of ct, modx, modx_noscreen, ewc, replay, joint)"
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub strategy: Strategy,

    // data
    pub latent_dim: usize,
    pub vision_dim: usize,
    pub language_dim: usize,
    pub domain_angle_deg: f64,
    pub latent_noise: f64,
    pub modality_noise: f64,
    pub train_per_domain: usize,
    pub test_per_domain: usize,
    pub n_phases: usize,

    // model
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub activation: Activation,
    pub tau: f64,
    pub learn_temperature: bool,

    // objectives
    pub alpha: f64,
    pub distill_tau: f64,
    pub ewc_lambda: f64,
    pub buffer_capacity: usize,
    /// Buffer rows added to each batch, as a fraction of `batch_size`.
    pub replay_fraction: f64,

    // optimization
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub epochs_per_phase: usize,
    pub joint_epochs: usize,

    // diagnostics
    pub imav_both_directions: bool,
}

impl Default for ExperimentConfig {
    /// The desk-scale two-domain benchmark.
    fn default() -> Self {
        Self {
            seed: 0,
            strategy: Strategy::Modx,
            latent_dim: 16,
            vision_dim: 48,
            language_dim: 40,
            domain_angle_deg: 60.0,
            latent_noise: 0.25,
            modality_noise: 0.1,
            train_per_domain: 2000,
            test_per_domain: 500,
            n_phases: 5,
            hidden_dim: 64,
            embed_dim: 32,
            activation: Activation::Tanh,
            tau: 0.07,
            learn_temperature: false,
            alpha: 20.0,
            distill_tau: 1.0,
            ewc_lambda: 1000.0,
            buffer_capacity: 200,
            replay_fraction: 0.25,
            base_lr: 2e-3,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
            weight_decay: 0.2,
            warmup_fraction: 0.2,
            batch_size: 64,
            pretrain_epochs: 30,
            epochs_per_phase: 15,
            joint_epochs: 30,
            imav_both_directions: false,
        }
    }
}

impl ExperimentConfig {
    /// Batch size, epochs and learning rate of the full-scale CLIP recipe.
    pub fn reference_recipe() -> Self {
        Self {
            batch_size: 280,
            pretrain_epochs: 35,
            epochs_per_phase: 35,
            joint_epochs: 35,
            base_lr: 5e-4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_phases == 0 {
            return bad("n_phases must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.train_per_domain < self.n_phases {
            return bad(format!(
                "train_per_domain ({}) must be at least n_phases ({})",
                self.train_per_domain, self.n_phases
            ));
        }
        if self.test_per_domain == 0 {
            return bad("test_per_domain must be >= 1".into());
        }
        if self.hidden_dim == 0 || self.embed_dim < 2 {
            return bad("hidden_dim must be >= 1 and embed_dim >= 2".into());
        }
        if !(self.domain_angle_deg >= 0.0 && self.domain_angle_deg <= 180.0) {
            return bad(format!(
                "domain_angle_deg must be in [0, 180], got {}",
                self.domain_angle_deg
            ));
        }
        for (name, v) in [("tau", self.tau), ("distill_tau", self.distill_tau)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("ewc_lambda", self.ewc_lambda),
            ("latent_noise", self.latent_noise),
            ("modality_noise", self.modality_noise),
            ("base_lr", self.base_lr),
            ("weight_decay", self.weight_decay),
            ("epsilon", self.epsilon),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        for (name, v) in [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("warmup_fraction", self.warmup_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        if self.strategy == Strategy::Replay {
            if self.buffer_capacity == 0 {
                return bad("strategy replay requires buffer_capacity > 0".into());
            }
            if !(self.replay_fraction > 0.0 && self.replay_fraction.is_finite()) {
                return bad("strategy replay requires replay_fraction > 0".into());
            }
        }
        Ok(())
    }

    fn optimizer(&self, total_steps: usize) -> OptimizerConfig {
        OptimizerConfig {
            base_lr: self.base_lr,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            weight_decay: self.weight_decay,
            warmup_fraction: self.warmup_fraction,
            total_steps,
        }
    }

    pub fn vision_spec(&self) -> MlpSpec {
        MlpSpec {
            layer_dims: vec![self.vision_dim, self.hidden_dim, self.embed_dim],
            activation: self.activation,
        }
    }

    pub fn language_spec(&self) -> MlpSpec {
        MlpSpec {
            layer_dims: vec![self.language_dim, self.hidden_dim, self.embed_dim],
            activation: self.activation,
        }
    }

    pub fn domain_specs(&self) -> (DomainSpec, DomainSpec) {
        let (old_mean, new_mean) = domain_means(self.latent_dim, self.domain_angle_deg);
        let per_domain = (self.train_per_domain + self.test_per_domain) as u64;
        let base = DomainSpec {
            name: OLD_DOMAIN_NAME.into(),
            latent_dim: self.latent_dim,
            vision_dim: self.vision_dim,
            language_dim: self.language_dim,
            domain_mean: old_mean,
            latent_noise: self.latent_noise,
            modality_noise: self.modality_noise,
            seed: child_seed(self.seed, seed_offsets::OLD_DOMAIN),
            map_seed: child_seed(self.seed, seed_offsets::MODALITY_MAPS),
            id_offset: 0,
        };
        let new = DomainSpec {
            name: NEW_DOMAIN_NAME.into(),
            domain_mean: new_mean,
            seed: child_seed(self.seed, seed_offsets::NEW_DOMAIN),
            id_offset: per_domain,
            ..base.clone()
        };
        (base, new)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSplit {
    pub name: String,
    pub train: PhaseDataset,
    pub test: PhaseDataset,
}

/// All data of one benchmark instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub old: DomainSplit,
    pub new: DomainSplit,
    /// The new domain's training rows cut into stream phases.
    pub phases: Vec<PhaseDataset>,
}

impl Benchmark {
    pub fn generate(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let (old_spec, new_spec) = config.domain_specs();
        let total = config.train_per_domain + config.test_per_domain;
        let test_fraction = config.test_per_domain as f64 / total as f64;
        let split = |spec: &DomainSpec, offset: u64| -> Result<DomainSplit> {
            let all = generate_domain(spec, total)?;
            let (train, test) = split_holdout(&all, test_fraction, child_seed(config.seed, offset))?;
            Ok(DomainSplit {
                name: spec.name.clone(),
                train,
                test,
            })
        };
        let old = split(&old_spec, seed_offsets::OLD_HOLDOUT)?;
        let new = split(&new_spec, seed_offsets::NEW_HOLDOUT)?;
        let phases = split_phases(
            &new.train,
            config.n_phases,
            child_seed(config.seed, seed_offsets::PHASE_SPLIT),
        )?;
        Ok(Self { old, new, phases })
    }

    pub fn domains(&self) -> [&DomainSplit; 2] {
        [&self.old, &self.new]
    }

    /// Old and new training rows together.
    pub fn joint_train(&self) -> Result<PhaseDataset> {
        self.old.train.concat(&self.new.train)
    }
}

/// Drift of a snapshot relative to its predecessor, measured on the old
/// domain's held-out split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub sam_delta_vision: AngleHistogram,
    pub sam_delta_language: AngleHistogram,
    pub ram_vision: AngleHistogram,
    pub ram_language: AngleHistogram,
    /// `None` when the previous snapshot retrieved no sample correctly.
    pub imav: Option<AngleHistogram>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub strategy: Strategy,
    /// Alpha of the run, so sweep records stay self-describing.
    pub alpha: f64,
    pub phase: usize,
    /// Per test domain.
    pub retrieval: BTreeMap<String, RetrievalReport>,
    /// Mean training loss per epoch of this phase.
    pub epoch_losses: Vec<f64>,
    pub temperature: f64,
    pub diagnostics: Option<Diagnostics>,
}

impl PhaseRecord {
    pub fn r1(&self, domain: &str) -> Option<(f64, f64)> {
        self.retrieval.get(domain).map(RetrievalReport::r1)
    }
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub strategy: Strategy,
    pub records: Vec<PhaseRecord>,
    /// Snapshot after each recorded phase.
    pub snapshots: Vec<DualEncoderSnapshot>,
    /// Sample ids that appeared in training batches, per recorded phase.
    pub seen_ids: Vec<BTreeSet<u64>>,
    /// Seconds spent per recorded phase; not part of the deterministic output.
    pub wall_seconds: Vec<f64>,
}

impl RunResult {
    pub fn last(&self) -> &PhaseRecord {
        self.records.last().expect("a run has at least one record")
    }
}

/// A pretrained snapshot and its loss curve.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub snapshot: DualEncoderSnapshot,
    pub epoch_losses: Vec<f64>,
    pub seen_ids: BTreeSet<u64>,
    pub wall_seconds: f64,
}

/// Per-step objective on top of the batch's embeddings.
enum Objective<'a> {
    InfoNce,
    Distill {
        teacher: &'a DualEncoderSnapshot,
        settings: DistillSettings,
    },
    Ewc {
        fisher: &'a FisherDiag,
        lambda: f64,
    },
}

struct PhaseTraining<'a> {
    data: &'a PhaseDataset,
    epochs: usize,
    /// Distinguishes batch-order streams between phases.
    stream: u64,
    objective: Objective<'a>,
    /// Rehearsal rows and how many to add per batch.
    replay: Option<(&'a PhaseDataset, usize)>,
}

struct PhaseOutcome {
    epoch_losses: Vec<f64>,
    seen_ids: BTreeSet<u64>,
}

fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

fn train_phase(
    snapshot: &mut DualEncoderSnapshot,
    config: &ExperimentConfig,
    job: PhaseTraining<'_>,
) -> Result<PhaseOutcome> {
    let n = job.data.len();
    let per_epoch = batches_per_epoch(n, config.batch_size);
    let total_steps = job.epochs * per_epoch;
    let mut opt = OptimizerState::new(config.optimizer(total_steps), snapshot.num_params());
    // Temperature is trained as log τ with its own moments and no decay.
    let mut tau_opt = OptimizerState::new(
        OptimizerConfig {
            weight_decay: 0.0,
            ..config.optimizer(total_steps)
        },
        1,
    );
    let order_seed = child_seed(config.seed, seed_offsets::BATCH_ORDER + job.stream);
    let replay_seed = child_seed(config.seed, seed_offsets::REPLAY_SAMPLING + job.stream);
    let mut epoch_losses = Vec::with_capacity(job.epochs);
    let mut seen_ids = BTreeSet::new();
    let mut params = snapshot.flatten();
    let mut step = 0u64;

    for epoch in 0..job.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seeded_rng(child_seed(order_seed, epoch as u64)));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let mut batch = job.data.select(chunk);
            if let Some((buffer, k)) = job.replay {
                let mut idx: Vec<usize> = (0..buffer.len()).collect();
                idx.shuffle(&mut seeded_rng(child_seed(replay_seed, step)));
                idx.truncate(k);
                batch = batch.concat(&buffer.select(&idx))?;
            }
            seen_ids.extend(batch.sample_ids.iter().copied());

            let (value, grads, grad_tau) = batch_gradient(snapshot, &params, &batch, &job.objective)?;
            opt.step(&mut params, &grads)?;
            snapshot.load_flat(&params)?;
            if config.learn_temperature {
                let mut log_tau = [snapshot.temperature.ln()];
                tau_opt.step(&mut log_tau, &[grad_tau * snapshot.temperature])?;
                snapshot.temperature = log_tau[0].exp().clamp(0.01, 1.0);
            }
            loss_sum += value;
            step += 1;
        }
        epoch_losses.push(if per_epoch == 0 {
            0.0
        } else {
            loss_sum / per_epoch as f64
        });
    }
    Ok(PhaseOutcome { epoch_losses, seen_ids })
}

/// Loss value, flat parameter gradient, and temperature gradient on one batch.
fn batch_gradient(
    snapshot: &DualEncoderSnapshot,
    params: &[f64],
    batch: &PhaseDataset,
    objective: &Objective<'_>,
) -> Result<(f64, Vec<f64>, f64)> {
    let trace_v = forward(&snapshot.vision, &batch.vision_inputs)?;
    let trace_l = forward(&snapshot.language, &batch.language_inputs)?;
    let tau = snapshot.temperature;
    let loss: LossValueAndGrad = match objective {
        Objective::InfoNce | Objective::Ewc { .. } => infonce(&trace_v.output, &trace_l.output, tau)?,
        Objective::Distill { teacher, settings } => distill_loss(
            &trace_v.output,
            &trace_l.output,
            teacher,
            &batch.vision_inputs,
            &batch.language_inputs,
            tau,
            *settings,
        )?,
    };
    let gv = backward(&snapshot.vision, &trace_v, &loss.grad_v)?;
    let gl = backward(&snapshot.language, &trace_l, &loss.grad_l)?;
    let mut grads = gv.flatten();
    gl.flatten_into(&mut grads);
    let mut value = loss.value;
    if let Objective::Ewc { fisher, lambda } = objective {
        let penalty = ewc_penalty(params, fisher, *lambda)?;
        value += penalty.value;
        for (g, p) in grads.iter_mut().zip(&penalty.grad) {
            *g += p;
        }
    }
    Ok((value, grads, loss.grad_tau))
}

/// Diagonal Fisher: mean squared InfoNCE parameter gradient over one pass
/// of `data` in its stored order.
pub fn estimate_fisher(snapshot: &DualEncoderSnapshot, data: &PhaseDataset, batch_size: usize) -> Result<FisherDiag> {
    let params = snapshot.flatten();
    let mut fisher = vec![0.0; params.len()];
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut batches = 0usize;
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = data.select(chunk);
        let (_, grads, _) = batch_gradient(snapshot, &params, &batch, &Objective::InfoNce)?;
        for (f, g) in fisher.iter_mut().zip(&grads) {
            *f += g * g;
        }
        batches += 1;
    }
    if batches > 0 {
        fisher.iter_mut().for_each(|f| *f /= batches as f64);
    }
    FisherDiag::new(fisher, params)
}

/// Train the initial snapshot with plain InfoNCE on the old domain.
pub fn pretrain(config: &ExperimentConfig, bench: &Benchmark) -> Result<Pretrained> {
    config.validate()?;
    let started = Instant::now();
    let mut snapshot = DualEncoderSnapshot::init(
        &config.vision_spec(),
        &config.language_spec(),
        config.tau,
        child_seed(config.seed, seed_offsets::MODEL_INIT),
    )?;
    let outcome = train_phase(
        &mut snapshot,
        config,
        PhaseTraining {
            data: &bench.old.train,
            epochs: config.pretrain_epochs,
            stream: 0,
            objective: Objective::InfoNce,
            replay: None,
        },
    )?;
    snapshot.phase_index = 0;
    Ok(Pretrained {
        snapshot,
        epoch_losses: outcome.epoch_losses,
        seen_ids: outcome.seen_ids,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

pub fn evaluate(snapshot: &DualEncoderSnapshot, bench: &Benchmark) -> Result<BTreeMap<String, RetrievalReport>> {
    bench
        .domains()
        .into_iter()
        .map(|d| {
            let m = PairedEmbeddings::encode(snapshot, &d.test)?.contrastive()?;
            Ok((d.name.clone(), recall_at_k(&m, &RECALL_KS)))
        })
        .collect()
}

pub fn diagnose(
    previous: &DualEncoderSnapshot,
    current: &DualEncoderSnapshot,
    data: &PhaseDataset,
    imav_both_directions: bool,
) -> Result<Diagnostics> {
    let old = PairedEmbeddings::encode(previous, data)?;
    let new = PairedEmbeddings::encode(current, data)?;
    let imav = match imav_angles(&old, &new, imav_both_directions) {
        Ok(angles) => Some(AngleHistogram::from_angles(&SAM_BINS, &angles)?),
        Err(Error::EmptyCorrectSet) => None,
        Err(e) => return Err(e),
    };
    Ok(Diagnostics {
        sam_delta_vision: sam_delta_hist(&old.vision, &new.vision, &SAM_BINS)?,
        sam_delta_language: sam_delta_hist(&old.language, &new.language, &SAM_BINS)?,
        ram_vision: ram_hist(&old.vision, &new.vision, &RAM_BINS)?,
        ram_language: ram_hist(&old.language, &new.language, &RAM_BINS)?,
        imav,
    })
}

/// Run the configured strategy. Continual strategies need `pretrained`;
/// joint training ignores it and starts from scratch on all data.
pub fn run_continual(
    config: &ExperimentConfig,
    bench: &Benchmark,
    pretrained: Option<&Pretrained>,
) -> Result<RunResult> {
    config.validate()?;
    if config.strategy == Strategy::Joint {
        return run_joint(config, bench);
    }
    let pretrained = pretrained.ok_or(Error::MissingPretrain)?;
    let mut current = pretrained.snapshot.clone();
    let mut records = vec![PhaseRecord {
        strategy: config.strategy,
        alpha: config.alpha,
        phase: 0,
        retrieval: evaluate(&current, bench)?,
        epoch_losses: pretrained.epoch_losses.clone(),
        temperature: current.temperature,
        diagnostics: None,
    }];
    let mut snapshots = vec![current.clone()];
    let mut seen = vec![pretrained.seen_ids.clone()];
    let mut wall = vec![pretrained.wall_seconds];

    let mut fisher = match config.strategy {
        Strategy::Ewc => Some(estimate_fisher(&current, &bench.old.train, config.batch_size)?),
        _ => None,
    };
    let mut buffer = match config.strategy {
        Strategy::Replay => Some(buffer_update(
            &ReplayBuffer::new(config.buffer_capacity)?,
            &bench.old.train,
            child_seed(config.seed, seed_offsets::BUFFER_UPDATE),
        )?),
        _ => None,
    };
    let replay_per_batch = ((config.replay_fraction * config.batch_size as f64).round() as usize).max(1);

    for (t, phase_data) in bench.phases.iter().enumerate() {
        let phase = t + 1;
        let started = Instant::now();
        let previous = current.clone();
        let objective = match config.strategy {
            Strategy::Modx | Strategy::ModxNoscreen => Objective::Distill {
                teacher: &previous,
                settings: DistillSettings {
                    alpha: config.alpha,
                    distill_tau: config.distill_tau,
                    screen: config.strategy == Strategy::Modx,
                },
            },
            Strategy::Ewc => Objective::Ewc {
                fisher: fisher.as_ref().expect("fisher initialized for ewc"),
                lambda: config.ewc_lambda,
            },
            _ => Objective::InfoNce,
        };
        let buffer_rows = buffer.as_ref().and_then(ReplayBuffer::contents);
        let outcome = train_phase(
            &mut current,
            config,
            PhaseTraining {
                data: phase_data,
                epochs: config.epochs_per_phase,
                stream: phase as u64,
                objective,
                replay: buffer_rows.as_ref().map(|b| (b, replay_per_batch)),
            },
        )?;
        current.phase_index = phase;

        if let Some(f) = fisher.as_mut() {
            f.accumulate(estimate_fisher(&current, phase_data, config.batch_size)?)?;
        }
        if let Some(b) = buffer.as_mut() {
            *b = buffer_update(
                b,
                phase_data,
                child_seed(config.seed, seed_offsets::BUFFER_UPDATE + phase as u64),
            )?;
        }

        records.push(PhaseRecord {
            strategy: config.strategy,
            alpha: config.alpha,
            phase,
            retrieval: evaluate(&current, bench)?,
            epoch_losses: outcome.epoch_losses,
            temperature: current.temperature,
            diagnostics: Some(diagnose(
                &previous,
                &current,
                &bench.old.test,
                config.imav_both_directions,
            )?),
        });
        snapshots.push(current.clone());
        seen.push(outcome.seen_ids);
        wall.push(started.elapsed().as_secs_f64());
    }
    Ok(RunResult {
        strategy: config.strategy,
        records,
        snapshots,
        seen_ids: seen,
        wall_seconds: wall,
    })
}

fn run_joint(config: &ExperimentConfig, bench: &Benchmark) -> Result<RunResult> {
    let started = Instant::now();
    let data = bench.joint_train()?;
    let mut snapshot = DualEncoderSnapshot::init(
        &config.vision_spec(),
        &config.language_spec(),
        config.tau,
        child_seed(config.seed, seed_offsets::JOINT_INIT),
    )?;
    let outcome = train_phase(
        &mut snapshot,
        config,
        PhaseTraining {
            data: &data,
            epochs: config.joint_epochs,
            stream: 0,
            objective: Objective::InfoNce,
            replay: None,
        },
    )?;
    let record = PhaseRecord {
        strategy: Strategy::Joint,
        alpha: config.alpha,
        phase: 0,
        retrieval: evaluate(&snapshot, bench)?,
        epoch_losses: outcome.epoch_losses,
        temperature: snapshot.temperature,
        diagnostics: None,
    };
    Ok(RunResult {
        strategy: Strategy::Joint,
        records: vec![record],
        snapshots: vec![snapshot],
        seen_ids: vec![outcome.seen_ids],
        wall_seconds: vec![started.elapsed().as_secs_f64()],
    })
}

/// Pretrain (unless joint) and run, all from `config`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunResult> {
    let bench = Benchmark::generate(config)?;
    if config.strategy == Strategy::Joint {
        return run_continual(config, &bench, None);
    }
    let pretrained = pretrain(config, &bench)?;
    run_continual(config, &bench, Some(&pretrained))
}

/// One final record per alpha, every run starting from the same pretrained
/// snapshot and data.
pub fn alpha_sweep(config: &ExperimentConfig, alphas: &[f64]) -> Result<Vec<RunResult>> {
    let bench = Benchmark::generate(config)?;
    let pretrained = pretrain(config, &bench)?;
    alphas
        .iter()
        .map(|&alpha| {
            let cfg = ExperimentConfig {
                alpha,
                strategy: Strategy::Modx,
                ..config.clone()
            };
            run_continual(&cfg, &bench, Some(&pretrained))
        })
        .collect()
}

/// Plain-text table of final R@1 per alpha.
pub fn render_sweep_table(runs: &[RunResult]) -> String {
    let mut out = String::from("alpha    | old i2t R@1 | old t2i R@1 | new i2t R@1 | new t2i R@1\n");
    out.push_str("---------+-------------+-------------+-------------+------------\n");
    for run in runs {
        let rec = run.last();
        let (oi, ot) = rec.r1(OLD_DOMAIN_NAME).unwrap_or((f64::NAN, f64::NAN));
        let (ni, nt) = rec.r1(NEW_DOMAIN_NAME).unwrap_or((f64::NAN, f64::NAN));
        out.push_str(&format!(
            "{:<8} | {:>11.4} | {:>11.4} | {:>11.4} | {:>11.4}\n",
            rec.alpha, oi, ot, ni, nt
        ));
    }
    out
}

/// Rows `strategy,phase,domain,metric,value` for every recall of every record.
pub fn summary_csv(records: &[PhaseRecord]) -> String {
    let mut out = String::from("strategy,alpha,phase,domain,metric,value\n");
    for rec in records {
        for (domain, report) in &rec.retrieval {
            for (dir, map) in [("i2t", &report.image_to_text), ("t2i", &report.text_to_image)] {
                for (k, v) in map {
                    out.push_str(&format!(
                        "{},{},{},{},{}_r{},{}\n",
                        rec.strategy, rec.alpha, rec.phase, domain, dir, k, v
                    ));
                }
            }
        }
    }
    out
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Write `{dir}/phase_{t}/snapshot.bin`, `record.json`, plus `summary.csv`
/// and `timing.json` (wall-clock seconds, the only nondeterministic file).
pub fn persist_run(dir: &Path, run: &RunResult) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (rec, snap) in run.records.iter().zip(&run.snapshots) {
        let phase_dir = dir.join(format!("phase_{}", rec.phase));
        std::fs::create_dir_all(&phase_dir).map_err(|e| Error::io(&phase_dir, e))?;
        snap.save(&phase_dir.join("snapshot.bin"))?;
        let json = serde_json::to_string_pretty(rec)?;
        write_file(&phase_dir.join("record.json"), json + "\n")?;
    }
    write_file(&dir.join("summary.csv"), summary_csv(&run.records))?;
    let timing: BTreeMap<String, f64> = run
        .records
        .iter()
        .zip(&run.wall_seconds)
        .map(|(r, s)| (format!("phase_{}", r.phase), *s))
        .collect();
    write_file(&dir.join("timing.json"), serde_json::to_string_pretty(&timing)? + "\n")
}

/// Read every `phase_*/record.json` under `dir`, sorted by phase.
pub fn load_records(dir: &Path) -> Result<Vec<PhaseRecord>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if !name.starts_with("phase_") {
            continue;
        }
        let path = entry.path().join("record.json");
        if !path.is_file() {
            continue;
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let rec: PhaseRecord = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        records.push(rec);
    }
    records.sort_by_key(|r| r.phase);
    Ok(records)
}
