//! Ablation grids: the seven-system freeze/init matrix, the alpha sweep,
//! and the cascade separation baselines, with table emitters.
//!
//! System numbering:
//!   1   extraction-only pretrain (dual output, alpha = 0)
//!   2   joint training from scratch
//!   3   joint, extractor + EEG encoder initialized from system 1
//!   4   system 3 plus pretrained AAD initialization (the reference setup)
//!   5   system 4 with the AAD modules fixed
//!   6   system 4 with AAD + EEG encoder fixed
//!   7   system 4 with AAD + extractor fixed
//!   8-12 alpha sweep around system 4 (0.001, 0.01, 0.1, 10, 100)
//!   13  PIT separation + ground-truth (oracle) association
//!   14  PIT separation + separately trained AAD association
//!   15  system 14 with separator and AAD jointly fine-tuned

use serde::{Deserialize, Serialize};

use crate::dataio::{eval_windows, EvalWindowSpec, Split, SplitManifest, TrialSet};
use crate::error::Result;
use crate::metrics::pesq::PesqBackend;
use crate::metrics::{evaluate_samples, summarize, Association, EvalOptions, Summary};
use crate::training::checkpoint::{restore, Snapshot};
use crate::training::{run_stage, Models, Module, RunLog, Stage, StageConfig, StageReport};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SystemSpec {
    pub sys: u32,
    pub alpha: f64,
    pub init_se_ee: bool,
    pub init_aad: bool,
    pub fix_aad: bool,
    pub fix_ee: bool,
    pub fix_se: bool,
}

/// The exact check-mark pattern of the seven-system grid.
pub fn table1_systems() -> Vec<SystemSpec> {
    let row = |sys, alpha, init_se_ee, init_aad, fix_aad, fix_ee, fix_se| SystemSpec {
        sys,
        alpha,
        init_se_ee,
        init_aad,
        fix_aad,
        fix_ee,
        fix_se,
    };
    vec![
        row(1, 0.0, false, false, false, false, false),
        row(2, 1.0, false, false, false, false, false),
        row(3, 1.0, true, false, false, false, false),
        row(4, 1.0, true, true, false, false, false),
        row(5, 1.0, true, true, true, false, false),
        row(6, 1.0, true, true, true, true, false),
        row(7, 1.0, true, true, true, false, true),
    ]
}

/// Alpha sweep around the system-4 setup.
pub fn table2_systems() -> Vec<SystemSpec> {
    let base = |sys, alpha| SystemSpec {
        sys,
        alpha,
        init_se_ee: true,
        init_aad: true,
        fix_aad: false,
        fix_ee: false,
        fix_se: false,
    };
    vec![
        base(8, 0.001),
        base(9, 0.01),
        base(10, 0.1),
        base(4, 1.0),
        base(11, 10.0),
        base(12, 100.0),
    ]
}

/// Everything an ablation run needs besides the system spec.
pub struct Experiment<'a> {
    pub set: &'a TrialSet,
    pub manifest: &'a SplitManifest,
    pub model_cfg: crate::training::ModelCfg,
    /// Template stage config; stage, alpha and freeze set are overridden
    /// per system.
    pub base: StageConfig,
    pub model_seed: u64,
}

impl Experiment<'_> {
    fn stage_cfg(&self, stage: Stage, alpha: f64, freeze: &[Module]) -> StageConfig {
        let mut cfg = self.base.clone();
        cfg.stage = stage;
        cfg.alpha = alpha;
        cfg.freeze = freeze.iter().copied().collect();
        cfg
    }

    fn val_spec(&self) -> EvalWindowSpec {
        EvalWindowSpec {
            lengths_s: vec![self.base.val_window_s],
            max_per_trial: self.base.val_max_per_trial,
            snr_range: self.base.snr_range,
            seed: self.base.seed,
        }
    }
}

/// Pretraining artifacts shared by the grid: the system-1 extraction
/// checkpoint and the AAD checkpoint trained on top of its EEG encoder.
pub struct PretrainArtifacts {
    pub se_snapshot: Snapshot,
    pub se_report: StageReport,
    pub aad_snapshot: Snapshot,
    pub aad_report: StageReport,
}

pub fn pretrain(exp: &Experiment, log: &mut RunLog) -> Result<PretrainArtifacts> {
    // System 1: dual-output extraction, fresh weights.
    let mut models = Models::new(&exp.model_cfg, exp.model_seed)?;
    let se_cfg = exp.stage_cfg(Stage::Se, 0.0, &[]);
    let se_report = run_stage(&se_cfg, exp.set, exp.manifest, &mut models, log)?;
    let se_snapshot = se_report.best_snapshot.clone();

    // AAD pretrain: EEG encoder from system 1, frozen (normalize() enforces
    // the freeze), clean stimuli in randomized presentation order.
    let aad_cfg = exp.stage_cfg(Stage::Aad, 1.0, &[]);
    let aad_report = run_stage(&aad_cfg, exp.set, exp.manifest, &mut models, log)?;
    let aad_snapshot = aad_report.best_snapshot.clone();

    Ok(PretrainArtifacts {
        se_snapshot,
        se_report,
        aad_snapshot,
        aad_report,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub sys: u32,
    pub alpha: f64,
    pub init_se_ee: bool,
    pub init_aad: bool,
    pub fix_aad: bool,
    pub fix_ee: bool,
    pub fix_se: bool,
    pub val: Summary,
}

pub struct SystemOutcome {
    pub row: AblationRow,
    pub report: StageReport,
    pub models: Models,
}

/// Trains one grid system and evaluates it on the validation split.
pub fn run_system(
    exp: &Experiment,
    spec: &SystemSpec,
    pre: Option<&PretrainArtifacts>,
    log: &mut RunLog,
) -> Result<SystemOutcome> {
    let mut models = Models::new(&exp.model_cfg, exp.model_seed)?;
    let report = if spec.sys == 1 {
        let cfg = exp.stage_cfg(Stage::Se, 0.0, &[]);
        run_stage(&cfg, exp.set, exp.manifest, &mut models, log)?
    } else {
        if spec.init_se_ee {
            let pre = pre.expect("init_se_ee requires pretraining artifacts");
            restore(&mut models.store, &pre.se_snapshot, Some(Module::Extractor.prefix()))?;
            restore(
                &mut models.store,
                &pre.se_snapshot,
                Some(Module::EegEncoder.prefix()),
            )?;
        }
        if spec.init_aad {
            let pre = pre.expect("init_aad requires pretraining artifacts");
            restore(&mut models.store, &pre.aad_snapshot, Some(Module::Aad.prefix()))?;
        }
        let mut freeze = Vec::new();
        if spec.fix_aad {
            freeze.push(Module::Aad);
        }
        if spec.fix_ee {
            freeze.push(Module::EegEncoder);
        }
        if spec.fix_se {
            freeze.push(Module::Extractor);
        }
        let cfg = exp.stage_cfg(Stage::Joint, spec.alpha, &freeze);
        run_stage(&cfg, exp.set, exp.manifest, &mut models, log)?
    };

    let val_samples = eval_windows(exp.set, exp.manifest, Split::Val, &exp.val_spec())?;
    let opts = EvalOptions {
        association: Association::FixedStream,
        with_aad: spec.sys != 1,
        compute_stoi: false,
        pesq: PesqBackend::Disabled,
        eeg_conditioning: true,
    };
    let tmp = std::env::temp_dir();
    let results = evaluate_samples(
        &models.store,
        &models.ee,
        &models.se,
        &models.aad,
        exp.set.eeg_rate,
        &val_samples,
        &opts,
        &tmp,
    )?;
    Ok(SystemOutcome {
        row: AblationRow {
            sys: spec.sys,
            alpha: spec.alpha,
            init_se_ee: spec.init_se_ee,
            init_aad: spec.init_aad,
            fix_aad: spec.fix_aad,
            fix_ee: spec.fix_ee,
            fix_se: spec.fix_se,
            val: summarize(&results, None),
        },
        report,
        models,
    })
}

pub fn run_table1(exp: &Experiment, log: &mut RunLog) -> Result<Vec<AblationRow>> {
    let pre = pretrain(exp, log)?;
    let mut rows = Vec::new();
    for spec in table1_systems() {
        if log.echo {
            eprintln!("== system {} ==", spec.sys);
        }
        rows.push(run_system(exp, &spec, Some(&pre), log)?.row);
    }
    Ok(rows)
}

pub fn run_table2(exp: &Experiment, log: &mut RunLog) -> Result<Vec<AblationRow>> {
    let pre = pretrain(exp, log)?;
    let mut rows = Vec::new();
    for spec in table2_systems() {
        if log.echo {
            eprintln!("== system {} (alpha {}) ==", spec.sys, spec.alpha);
        }
        rows.push(run_system(exp, &spec, Some(&pre), log)?.row);
    }
    Ok(rows)
}

/// Cascade baselines built from an unconditioned PIT separator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CascadeSystem {
    /// Sys 13: ground-truth association (upper bound).
    OraclePit,
    /// Sys 14: association by a separately trained AAD.
    SeparateAad,
    /// Sys 15: separator and AAD jointly fine-tuned.
    JointFinetuned,
}

impl CascadeSystem {
    pub fn number(self) -> u32 {
        match self {
            CascadeSystem::OraclePit => 13,
            CascadeSystem::SeparateAad => 14,
            CascadeSystem::JointFinetuned => 15,
        }
    }
}

pub struct CascadeOutcome {
    pub sys: u32,
    pub summary: Summary,
    pub models: Models,
    pub reports: Vec<StageReport>,
}

/// Trains the stages a cascade system needs and evaluates it on the
/// requested split with the matching association protocol.
pub fn run_cascade_baseline(
    exp: &Experiment,
    sys: CascadeSystem,
    split: Split,
    log: &mut RunLog,
) -> Result<CascadeOutcome> {
    let mut models = Models::new(&exp.model_cfg, exp.model_seed)?;
    let mut reports = Vec::new();

    let pit_cfg = exp.stage_cfg(Stage::Pit, 0.0, &[]);
    reports.push(run_stage(&pit_cfg, exp.set, exp.manifest, &mut models, log)?);

    if sys != CascadeSystem::OraclePit {
        let aad_cfg = exp.stage_cfg(Stage::Aad, 1.0, &[]);
        reports.push(run_stage(&aad_cfg, exp.set, exp.manifest, &mut models, log)?);
    }
    if sys == CascadeSystem::JointFinetuned {
        let joint_cfg = exp.stage_cfg(Stage::PitAadJoint, exp.base.alpha, &[]);
        reports.push(run_stage(&joint_cfg, exp.set, exp.manifest, &mut models, log)?);
    }

    let mut spec = exp.val_spec();
    spec.seed = crate::dataio::seeds::mix(exp.base.seed, &[split.index() as u64 + 100]);
    let samples = eval_windows(exp.set, exp.manifest, split, &spec)?;
    let opts = EvalOptions {
        association: match sys {
            CascadeSystem::OraclePit => Association::Oracle,
            _ => Association::AadPick,
        },
        with_aad: sys != CascadeSystem::OraclePit,
        compute_stoi: false,
        pesq: PesqBackend::Disabled,
        eeg_conditioning: false,
    };
    let results = evaluate_samples(
        &models.store,
        &models.ee,
        &models.se,
        &models.aad,
        exp.set.eeg_rate,
        &samples,
        &opts,
        &std::env::temp_dir(),
    )?;
    Ok(CascadeOutcome {
        sys: sys.number(),
        summary: summarize(&results, None),
        models,
        reports,
    })
}

fn check(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "-"
    }
}

/// Markdown table for the freeze/init grid.
pub fn table1_markdown(rows: &[AblationRow]) -> String {
    let mut out = String::from(
        "| Sys # | alpha | Init SE&EE | Init AAD | Fix AAD | Fix EE | Fix SE | SI-SDR (dB) | PPR (%) |\n\
         |-------|-------|------------|----------|---------|--------|--------|-------------|---------|\n",
    );
    for r in rows {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {:.3} | {:.1} |\n",
            r.sys,
            r.alpha,
            check(r.init_se_ee),
            check(r.init_aad),
            check(r.fix_aad),
            check(r.fix_ee),
            check(r.fix_se),
            r.val.mean_si_sdr,
            r.val.ppr,
        ));
    }
    out
}

/// Markdown table for the alpha sweep.
pub fn table2_markdown(rows: &[AblationRow]) -> String {
    let mut out = String::from("| Sys # | alpha | SI-SDR (dB) | PPR (%) |\n|-------|-------|-------------|---------|\n");
    for r in rows {
        out.push_str(&format!(
            "| {} | {} | {:.3} | {:.1} |\n",
            r.sys, r.alpha, r.val.mean_si_sdr, r.val.ppr
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table1_matches_the_checkmark_pattern() {
        let rows = table1_systems();
        assert_eq!(rows.len(), 7);
        assert_eq!(rows.iter().map(|r| r.sys).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5, 6, 7]);
        let flags = |r: &SystemSpec| (r.init_se_ee, r.init_aad, r.fix_aad, r.fix_ee, r.fix_se);
        assert_eq!(flags(&rows[0]), (false, false, false, false, false));
        assert_eq!(rows[0].alpha, 0.0);
        assert_eq!(flags(&rows[1]), (false, false, false, false, false));
        assert_eq!(rows[1].alpha, 1.0);
        assert_eq!(flags(&rows[2]), (true, false, false, false, false));
        assert_eq!(flags(&rows[3]), (true, true, false, false, false));
        assert_eq!(flags(&rows[4]), (true, true, true, false, false));
        assert_eq!(flags(&rows[5]), (true, true, true, true, false));
        assert_eq!(flags(&rows[6]), (true, true, true, false, true));
    }

    #[test]
    fn table2_covers_the_alpha_sweep() {
        let rows = table2_systems();
        let alphas: Vec<f64> = rows.iter().map(|r| r.alpha).collect();
        assert_eq!(alphas, vec![0.001, 0.01, 0.1, 1.0, 10.0, 100.0]);
        let sys: Vec<u32> = rows.iter().map(|r| r.sys).collect();
        assert_eq!(sys, vec![8, 9, 10, 4, 11, 12]);
        // every row uses the reference init, nothing frozen
        for r in &rows {
            assert!(r.init_se_ee && r.init_aad);
            assert!(!r.fix_aad && !r.fix_ee && !r.fix_se);
        }
    }

    #[test]
    fn markdown_emits_one_line_per_system() {
        let rows = table1_systems()
            .into_iter()
            .map(|s| AblationRow {
                sys: s.sys,
                alpha: s.alpha,
                init_se_ee: s.init_se_ee,
                init_aad: s.init_aad,
                fix_aad: s.fix_aad,
                fix_ee: s.fix_ee,
                fix_se: s.fix_se,
                val: Summary {
                    count: 0,
                    mean_si_sdr: 0.0,
                    mean_si_sdri: 0.0,
                    mean_sdri: 0.0,
                    mean_stoii: None,
                    mean_pesqi: None,
                    pesqi_absent_reason: None,
                    ppr: 0.0,
                },
            })
            .collect::<Vec<_>>();
        let md = table1_markdown(&rows);
        assert_eq!(md.lines().count(), 2 + 7);
        assert!(md.contains("| 4 | 1 | yes | yes | - | - | - |"));
    }
}
