//! Staged training: extraction pretrain, AAD pretrain, joint fine-tune, and
//! the PIT separation baselines, with warm-up + plateau halving, early
//! stopping, freezing, and best-validation checkpointing.

pub mod ablation;
pub mod adam;
pub mod checkpoint;
pub mod schedule;

use std::collections::{BTreeSet, HashSet};
use std::io::Write;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aad::{AadCfg, AadModel};
use crate::dataio::seeds::{rng_for, TAG_BATCH, TAG_DROPOUT, TAG_INIT};
use crate::dataio::{
    eval_windows, sample_training_window, EvalWindowSpec, PairedSample, Split, SplitManifest,
    TrialSet,
};
use crate::eeg_encoder::{EegEncoder, EegEncoderCfg};
use crate::error::{Error, Result};
use crate::extractor::{Extractor, ExtractorCfg};
use crate::losses::{aad_loss_t, pit_loss_t, se_loss_t, Permutation};
use crate::nn::layers::Mode;
use crate::nn::params::{Binder, GradMap, ParamId, ParamStore};
use crate::nn::tape::{Tape, Var};
use adam::Adam;
use checkpoint::{snapshot, restore, Snapshot};
use rand::Rng;
use schedule::{LrSchedule, PlateauAction, PlateauTracker};

/// Trainable modules; names double as parameter-name prefixes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Module {
    EegEncoder,
    Extractor,
    Aad,
}

impl Module {
    pub fn prefix(self) -> &'static str {
        match self {
            Module::EegEncoder => EegEncoder::PREFIX,
            Module::Extractor => Extractor::PREFIX,
            Module::Aad => AadModel::PREFIX,
        }
    }
}

impl std::str::FromStr for Module {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eeg_encoder" | "ee" => Ok(Module::EegEncoder),
            "extractor" | "se" => Ok(Module::Extractor),
            "aad" => Ok(Module::Aad),
            other => Err(Error::Config(format!("unknown module '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelCfg {
    pub n_dim: usize,
    pub eeg: EegEncoderCfg,
    pub extractor: ExtractorCfg,
    pub aad: AadCfg,
}

impl Default for ModelCfg {
    fn default() -> Self {
        ModelCfg {
            n_dim: 64,
            eeg: EegEncoderCfg::default(),
            extractor: ExtractorCfg::default(),
            aad: AadCfg::default(),
        }
    }
}

impl ModelCfg {
    pub fn validate(&self) -> Result<()> {
        if self.eeg.n_dim != self.n_dim
            || self.extractor.n_dim != self.n_dim
            || self.aad.n_dim != self.n_dim
        {
            return Err(Error::Config(format!(
                "inconsistent model dims: n_dim {} vs eeg {} / extractor {} / aad {}",
                self.n_dim, self.eeg.n_dim, self.extractor.n_dim, self.aad.n_dim
            )));
        }
        Ok(())
    }

    /// Propagates `n_dim` into every sub-config (convenience for tests and
    /// config files that only set the global width).
    pub fn with_dim(mut self, n_dim: usize) -> Self {
        self.n_dim = n_dim;
        self.eeg.n_dim = n_dim;
        self.extractor.n_dim = n_dim;
        self.aad.n_dim = n_dim;
        self
    }
}

/// The three model components over one shared parameter store.
pub struct Models {
    pub store: ParamStore,
    pub ee: EegEncoder,
    pub se: Extractor,
    pub aad: AadModel,
    pub cfg: ModelCfg,
}

impl Models {
    pub fn new(cfg: &ModelCfg, seed: u64) -> Result<Models> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng_ee = rng_for(seed, &[TAG_INIT, 0]);
        let ee = EegEncoder::new(&mut store, &cfg.eeg, &mut rng_ee);
        let mut rng_se = rng_for(seed, &[TAG_INIT, 1]);
        let se = Extractor::new(&mut store, &cfg.extractor, &mut rng_se);
        let mut rng_aad = rng_for(seed, &[TAG_INIT, 2]);
        let aad = AadModel::new(&mut store, &cfg.aad, &mut rng_aad);
        Ok(Models {
            store,
            ee,
            se,
            aad,
            cfg: cfg.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Extraction pretrain: dual-output extractor + EEG encoder.
    Se,
    /// AAD pretrain on clean stimuli; the EEG encoder is always frozen here.
    Aad,
    /// Joint fine-tune: extraction loss + alpha * AAD loss on the shuffled
    /// separated signals.
    Joint,
    /// Unconditioned PIT separation baseline.
    Pit,
    /// PIT separator jointly fine-tuned with the AAD branch.
    PitAadJoint,
}

impl Stage {
    pub fn modules(self) -> &'static [Module] {
        match self {
            Stage::Se => &[Module::EegEncoder, Module::Extractor],
            Stage::Aad => &[Module::EegEncoder, Module::Aad],
            Stage::Joint => &[Module::EegEncoder, Module::Extractor, Module::Aad],
            Stage::Pit => &[Module::Extractor],
            Stage::PitAadJoint => &[Module::EegEncoder, Module::Extractor, Module::Aad],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Se => "se",
            Stage::Aad => "aad",
            Stage::Joint => "joint",
            Stage::Pit => "pit",
            Stage::PitAadJoint => "pit_aad_joint",
        }
    }

    fn uses_eeg_conditioning(self) -> bool {
        matches!(self, Stage::Se | Stage::Joint)
    }

    fn uses_aad(self) -> bool {
        matches!(self, Stage::Aad | Stage::Joint | Stage::PitAadJoint)
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "se" => Ok(Stage::Se),
            "aad" => Ok(Stage::Aad),
            "joint" => Ok(Stage::Joint),
            "pit" => Ok(Stage::Pit),
            "pit_aad_joint" | "pit-aad-joint" => Ok(Stage::PitAadJoint),
            other => Err(Error::Config(format!("unknown stage '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    /// Weight of the AAD loss in the joint stages.
    pub alpha: f64,
    pub batch_size: usize,
    /// Sampled windows per epoch (augmentation is effectively infinite).
    pub windows_per_epoch: usize,
    pub max_epochs: u32,
    /// Window lengths (s); one is drawn per batch.
    pub window_lengths_s: Vec<f64>,
    pub snr_range: (f64, f64),
    /// Fixed validation window length (s).
    pub val_window_s: f64,
    /// Cap on validation windows per trial (0 = no cap).
    pub val_max_per_trial: usize,
    pub seed: u64,
    /// Modules whose parameters stay fixed during this stage.
    pub freeze: BTreeSet<Module>,
    pub warmup_steps: u64,
    pub halve_patience: u32,
    pub stop_patience: u32,
    /// Where to dump the offending batch on a NaN loss.
    pub nan_dump_dir: Option<PathBuf>,
}

impl StageConfig {
    pub fn new(stage: Stage, seed: u64) -> Self {
        StageConfig {
            stage,
            alpha: 1.0,
            batch_size: 8,
            windows_per_epoch: 2000,
            max_epochs: 60,
            window_lengths_s: (1..=15).map(|s| s as f64).collect(),
            snr_range: (-10.0, 10.0),
            val_window_s: 2.0,
            val_max_per_trial: 4,
            seed,
            freeze: BTreeSet::new(),
            warmup_steps: 15_000,
            halve_patience: 6,
            stop_patience: 10,
            nan_dump_dir: None,
        }
    }

    /// Normalizes and checks the config: the AAD stage always freezes the
    /// EEG encoder, and frozen modules must belong to the stage's graph.
    pub fn normalize(mut self) -> Result<Self> {
        if self.stage == Stage::Aad {
            self.freeze.insert(Module::EegEncoder);
        }
        let graph: BTreeSet<Module> = self.stage.modules().iter().copied().collect();
        for m in &self.freeze {
            if !graph.contains(m) {
                return Err(Error::Config(format!(
                    "cannot freeze {m:?}: not part of the {} stage graph",
                    self.stage.name()
                )));
            }
        }
        if self.batch_size == 0 || self.windows_per_epoch == 0 {
            return Err(Error::Config("batch_size and windows_per_epoch must be positive".into()));
        }
        if self.window_lengths_s.is_empty() {
            return Err(Error::Config("window_lengths_s must not be empty".into()));
        }
        Ok(self)
    }

    fn stage_tag(&self) -> u64 {
        match self.stage {
            Stage::Se => 0,
            Stage::Aad => 1,
            Stage::Joint => 2,
            Stage::Pit => 3,
            Stage::PitAadJoint => 4,
        }
    }
}

/// Per-step loss breakdown for the JSONL log.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct StepStats {
    pub step: u64,
    pub epoch: u32,
    pub stage: &'static str,
    pub se: Option<f64>,
    pub aad: Option<f64>,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: u32,
    pub val_loss: f64,
    pub bvl: f64,
    pub epochs_since_improve: u32,
    pub halvings: u32,
    pub mean_train_loss: f64,
}

#[derive(Debug)]
pub struct StageReport {
    pub best_snapshot: Snapshot,
    pub best_val_loss: f64,
    pub epochs_run: u32,
    pub steps_run: u64,
    pub history: Vec<EpochStats>,
    pub stopped_early: bool,
    pub halvings: u32,
}

/// JSONL training log sink; `None` discards.
pub struct RunLog {
    out: Option<Box<dyn Write + Send>>,
    pub echo: bool,
}

impl RunLog {
    pub fn disabled() -> Self {
        RunLog {
            out: None,
            echo: false,
        }
    }

    pub fn to_writer(w: Box<dyn Write + Send>, echo: bool) -> Self {
        RunLog { out: Some(w), echo }
    }

    fn write_json<T: Serialize>(&mut self, tag: &str, value: &T) {
        if let Some(out) = &mut self.out {
            let mut obj = serde_json::to_value(value).expect("log serialization");
            obj["event"] = serde_json::Value::String(tag.to_string());
            let _ = writeln!(out, "{obj}");
        }
    }
}

struct BatchItem {
    sample: PairedSample,
    /// For AAD-bearing stages: present the target stream first?
    present_target_first: bool,
    /// Dropout stream tag for this sample.
    dropout_tag: [u64; 4],
}

struct SampleOutcome {
    total: f64,
    se: Option<f64>,
    aad: Option<f64>,
    grads: Option<GradMap>,
}

/// Builds the loss graph for one sample and (optionally) backpropagates.
fn sample_pass(
    models: &Models,
    cfg: &StageConfig,
    eeg_rate: f64,
    item: &BatchItem,
    train: bool,
) -> Result<SampleOutcome> {
    let tape = if train { Tape::new() } else { Tape::inference() };
    let bind = Binder::new(&tape, &models.store);
    let rng_cell;
    let mode = if train {
        rng_cell = std::cell::RefCell::new(rng_for(cfg.seed, &item.dropout_tag));
        Mode::Train(&rng_cell)
    } else {
        Mode::Eval
    };

    let s = &item.sample;
    let col = |v: &[f64]| {
        ndarray::Array2::from_shape_vec((v.len(), 1), v.to_vec()).expect("column")
    };

    let eeg_rep = if cfg.stage.uses_eeg_conditioning() || cfg.stage.uses_aad() && cfg.stage != Stage::Pit {
        Some(models.ee.forward(&bind, &s.eeg, &mode)?)
    } else {
        None
    };

    let mut se_part: Option<Var> = None;
    let mut aad_part: Option<Var> = None;

    match cfg.stage {
        Stage::Se | Stage::Joint => {
            let mix = tape.leaf(col(&s.mixture.samples));
            let rep = eeg_rep.expect("EEG representation required");
            let (s_hat, b_hat) =
                models
                    .se
                    .forward(&bind, mix, Some((rep, eeg_rate)), &mode)?;
            se_part = Some(se_loss_t(
                &tape,
                &s.target.samples,
                &s.interferer.samples,
                s_hat,
                b_hat,
            ));
            if cfg.stage == Stage::Joint {
                let (first, second, y) = if item.present_target_first {
                    (s_hat, b_hat, 1u8)
                } else {
                    (b_hat, s_hat, 0u8)
                };
                let y_hat = models.aad.forward(&bind, rep, first, second, &mode)?;
                aad_part = Some(aad_loss_t(&tape, y, y_hat));
            }
        }
        Stage::Aad => {
            let rep = eeg_rep.expect("EEG representation required");
            let (first, second, y) = if item.present_target_first {
                (col(&s.target.samples), col(&s.interferer.samples), 1u8)
            } else {
                (col(&s.interferer.samples), col(&s.target.samples), 0u8)
            };
            let first = tape.leaf(first);
            let second = tape.leaf(second);
            let y_hat = models.aad.forward(&bind, rep, first, second, &mode)?;
            aad_part = Some(aad_loss_t(&tape, y, y_hat));
        }
        Stage::Pit | Stage::PitAadJoint => {
            let mix = tape.leaf(col(&s.mixture.samples));
            let (o0, o1) = models.se.forward(&bind, mix, None, &mode)?;
            let (pit, perm) = pit_loss_t(
                &tape,
                &s.target.samples,
                &s.interferer.samples,
                o0,
                o1,
            );
            se_part = Some(pit);
            if cfg.stage == Stage::PitAadJoint {
                let (target_stream, other_stream) = match perm {
                    Permutation::Identity => (o0, o1),
                    Permutation::Swapped => (o1, o0),
                };
                let (first, second, y) = if item.present_target_first {
                    (target_stream, other_stream, 1u8)
                } else {
                    (other_stream, target_stream, 0u8)
                };
                let rep = eeg_rep.expect("EEG representation required");
                let y_hat = models.aad.forward(&bind, rep, first, second, &mode)?;
                aad_part = Some(aad_loss_t(&tape, y, y_hat));
            }
        }
    }

    let total_var = match (se_part, aad_part) {
        (Some(se), Some(aad)) => tape.add(se, tape.scale(aad, cfg.alpha)),
        (Some(se), None) => se,
        (None, Some(aad)) => aad,
        (None, None) => unreachable!("stage produced no loss"),
    };

    let total = tape.scalar(total_var);
    let grads = if train {
        let g = tape.backward(total_var);
        Some(bind.collect(&g))
    } else {
        None
    };
    Ok(SampleOutcome {
        total,
        se: se_part.map(|v| tape.scalar(v)),
        aad: aad_part.map(|v| tape.scalar(v)),
        grads,
    })
}

fn draw_batch(
    cfg: &StageConfig,
    set: &TrialSet,
    manifest: &SplitManifest,
    epoch: u32,
    step: u64,
) -> Result<Vec<BatchItem>> {
    let mut rng = rng_for(
        cfg.seed,
        &[TAG_BATCH, cfg.stage_tag(), epoch as u64, step],
    );
    let window_s = cfg.window_lengths_s[rng.gen_range(0..cfg.window_lengths_s.len())];
    let mut items = Vec::with_capacity(cfg.batch_size);
    for slot in 0..cfg.batch_size {
        let sample =
            sample_training_window(set, manifest, Split::Train, window_s, cfg.snr_range, &mut rng)?;
        let present_target_first = rng.gen::<bool>();
        items.push(BatchItem {
            sample,
            present_target_first,
            dropout_tag: [TAG_DROPOUT, epoch as u64, step, slot as u64],
        });
    }
    Ok(items)
}

/// Mean validation loss for the stage's primary objective (extraction loss
/// for se/joint/pit stages, BCE for the AAD stage), eval mode, deterministic
/// presentation order.
pub fn validation_loss(
    models: &Models,
    cfg: &StageConfig,
    set: &TrialSet,
    val: &[PairedSample],
) -> Result<f64> {
    let mut bits = rng_for(cfg.seed, &[crate::dataio::seeds::TAG_SHUFFLE, u64::MAX]);
    let items: Vec<BatchItem> = val
        .iter()
        .map(|s| BatchItem {
            sample: s.clone(),
            present_target_first: bits.gen::<bool>(),
            dropout_tag: [TAG_DROPOUT, 0, 0, 0],
        })
        .collect();
    // Checkpoint selection in the joint stages follows the extraction loss,
    // not the total; the AAD stage has only its BCE.
    let outcomes: Vec<Result<SampleOutcome>> = items
        .par_iter()
        .map(|item| sample_pass(models, cfg, set.eeg_rate, item, false))
        .collect();
    let mut acc = 0.0;
    for o in outcomes {
        let o = o?;
        acc += match cfg.stage {
            Stage::Aad => o.aad.expect("aad loss"),
            _ => o.se.expect("extraction loss"),
        };
    }
    Ok(acc / val.len() as f64)
}

fn dump_nan_batch(cfg: &StageConfig, epoch: u32, step: u64, items: &[BatchItem]) -> Option<PathBuf> {
    let dir = cfg.nan_dump_dir.as_ref()?;
    std::fs::create_dir_all(dir).ok()?;
    let path = dir.join(format!("nan_{}_e{epoch}_s{step}.json", cfg.stage.name()));
    let desc: Vec<serde_json::Value> = items
        .iter()
        .map(|it| {
            serde_json::json!({
                "subject": it.sample.subject,
                "trial": it.sample.trial,
                "window_start_s": it.sample.window.0,
                "window_dur_s": it.sample.window.1,
                "snr_db": it.sample.snr_db,
                "present_target_first": it.present_target_first,
            })
        })
        .collect();
    let payload = serde_json::json!({
        "stage": cfg.stage.name(),
        "epoch": epoch,
        "step": step,
        "batch": desc,
    });
    std::fs::write(&path, serde_json::to_string_pretty(&payload).ok()?).ok()?;
    Some(path)
}

/// Runs one training stage to completion and returns the best-validation
/// checkpoint (the model store is also left at those weights).
///
/// Initialization from other checkpoints is the caller's job (restore into
/// `models.store` before calling); the optimizer and LR schedule always
/// start fresh here, matching the staged protocol.
pub fn run_stage(
    cfg: &StageConfig,
    set: &TrialSet,
    manifest: &SplitManifest,
    models: &mut Models,
    log: &mut RunLog,
) -> Result<StageReport> {
    let cfg = cfg.clone().normalize()?;
    let schedule = LrSchedule {
        model_dim: models.cfg.n_dim,
        warmup_steps: cfg.warmup_steps,
    };
    let mut tracker = PlateauTracker::new(cfg.halve_patience, cfg.stop_patience);
    let mut adam = Adam::new();

    let frozen: HashSet<ParamId> = cfg
        .freeze
        .iter()
        .flat_map(|m| models.store.module_ids(m.prefix()))
        .collect();

    let val_spec = EvalWindowSpec {
        lengths_s: vec![cfg.val_window_s],
        max_per_trial: cfg.val_max_per_trial,
        snr_range: cfg.snr_range,
        seed: cfg.seed,
    };
    let val_samples = eval_windows(set, manifest, Split::Val, &val_spec)?;

    // Epoch-0 validation: the initialized model sets the initial BVL, so a
    // fine-tune stage can never return a checkpoint worse than its init.
    let initial = validation_loss(models, &cfg, set, &val_samples)?;
    tracker.observe(initial, schedule.warmed_up(0));
    let mut best_snapshot = snapshot(&models.store);
    let mut best_val = initial;
    log.write_json(
        "epoch",
        &EpochStats {
            epoch: 0,
            val_loss: initial,
            bvl: best_val,
            epochs_since_improve: 0,
            halvings: 0,
            mean_train_loss: f64::NAN,
        },
    );
    if log.echo {
        eprintln!("[{}] epoch 0: val {initial:.4}", cfg.stage.name());
    }

    let steps_per_epoch = (cfg.windows_per_epoch / cfg.batch_size).max(1) as u64;
    let mut global_step: u64 = 0;
    let mut history = Vec::new();
    let mut stopped_early = false;

    'epochs: for epoch in 1..=cfg.max_epochs {
        let mut train_acc = 0.0;
        for step_in_epoch in 0..steps_per_epoch {
            let items = draw_batch(&cfg, set, manifest, epoch, step_in_epoch)?;
            let outcomes: Vec<Result<SampleOutcome>> = items
                .par_iter()
                .map(|item| sample_pass(models, &cfg, set.eeg_rate, item, true))
                .collect();

            let mut batch_grads = GradMap::new();
            let mut total = 0.0;
            let mut se_acc: Option<f64> = None;
            let mut aad_acc: Option<f64> = None;
            for o in outcomes {
                let o = o?;
                if !o.total.is_finite() {
                    let dump = dump_nan_batch(&cfg, epoch, step_in_epoch, &items);
                    return Err(Error::Numeric(format!(
                        "non-finite loss at epoch {epoch} step {step_in_epoch}{}",
                        dump.map(|p| format!(" (batch dumped to {})", p.display()))
                            .unwrap_or_default()
                    )));
                }
                total += o.total;
                if let Some(v) = o.se {
                    *se_acc.get_or_insert(0.0) += v;
                }
                if let Some(v) = o.aad {
                    *aad_acc.get_or_insert(0.0) += v;
                }
                batch_grads.accumulate(&o.grads.expect("train pass produces grads"));
            }
            let inv = 1.0 / cfg.batch_size as f64;
            batch_grads.scale(inv);
            total *= inv;
            train_acc += total;

            global_step += 1;
            let lr = schedule.lr_at(global_step) * tracker.lr_multiplier();
            adam.step(&mut models.store, &batch_grads, lr, &frozen);

            log.write_json(
                "step",
                &StepStats {
                    step: global_step,
                    epoch,
                    stage: cfg.stage.name(),
                    se: se_acc.map(|v| v * inv),
                    aad: aad_acc.map(|v| v * inv),
                    total,
                    lr,
                },
            );
        }

        let val = validation_loss(models, &cfg, set, &val_samples)?;
        let action = tracker.observe(val, schedule.warmed_up(global_step));
        if action == PlateauAction::Improved {
            best_snapshot = snapshot(&models.store);
            best_val = val;
        }
        let stats = EpochStats {
            epoch,
            val_loss: val,
            bvl: tracker.best(),
            epochs_since_improve: tracker.epochs_since_improve(),
            halvings: tracker.halvings(),
            mean_train_loss: train_acc / steps_per_epoch as f64,
        };
        log.write_json("epoch", &stats);
        if log.echo {
            eprintln!(
                "[{}] epoch {epoch}: train {:.4} val {val:.4} (bvl {:.4}, halvings {})",
                cfg.stage.name(),
                stats.mean_train_loss,
                tracker.best(),
                tracker.halvings()
            );
        }
        history.push(stats);
        if action == PlateauAction::Stop {
            stopped_early = true;
            break 'epochs;
        }
    }

    // Leave the models at the best checkpoint.
    restore(&mut models.store, &best_snapshot, None)?;
    Ok(StageReport {
        best_snapshot,
        best_val_loss: best_val,
        epochs_run: history.len() as u32,
        steps_run: global_step,
        history,
        stopped_early,
        halvings: tracker.halvings(),
    })
}
