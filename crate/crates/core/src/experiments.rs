//! Experiment drivers behind the CLI: the versioned config file, pretraining,
//! multi-seed runs with their artifact directories, position and length
//! sweeps, the ablation matrix, and cross-run reports.
//!
//! Every command is reproducible: (config, seed) fully determines the numeric
//! artifacts. Sweeps select on validation accuracy only and never read test
//! data.

use crate::backbone::{pretrain, Backbone, BackboneConfig, PretrainConfig, PretrainReport};
use crate::data::{
    load_raw_tensor_dataset, make_synthetic_sequence, split_by_class, SyntheticSpec, TaskSequence,
};
use crate::engine::{
    run_sequence_with, EpochRecord, EvalSplit, Mode, RunOutcome, RunState, TrainConfig,
};
use crate::error::{Error, Result};
use crate::metrics::{mean_std, ScoreMatrix};
use crate::prompt::{collect_prompt_vectors, write_prompt_vectors, AttachConfig, PromptSite};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub backbone: BackboneConfig,
    pub attach: AttachConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub run: RunSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic { seed: u64, spec: SyntheticSpec },
    Raw {
        manifest: PathBuf,
        num_tasks: usize,
        split_seed: u64,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub checkpoint: PathBuf,
}

impl ExperimentConfig {
    /// Desk-scale default configuration.
    pub fn desk_default() -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            backbone: BackboneConfig::desk_default(),
            attach: AttachConfig::desk_default(),
            train: TrainConfig::default(),
            data: DataConfig::Synthetic {
                seed: 1,
                spec: SyntheticSpec::default(),
            },
            pretrain: PretrainConfig::default(),
            run: RunSection {
                output_dir: PathBuf::from("runs/default"),
                seeds: vec![1, 2, 3],
                checkpoint: PathBuf::from("runs/backbone.ckpt"),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.backbone.validate()?;
        self.attach.validate(self.backbone.num_layers)?;
        if self.run.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Parses and validates a config file; unknown keys are rejected.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    let cfg: ExperimentConfig =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Builds the task sequence described by the data section.
pub fn build_sequence(cfg: &ExperimentConfig) -> Result<TaskSequence> {
    match &cfg.data {
        DataConfig::Synthetic { seed, spec } => make_synthetic_sequence(spec, *seed),
        DataConfig::Raw {
            manifest,
            num_tasks,
            split_seed,
        } => {
            let ds = load_raw_tensor_dataset(manifest)?;
            split_by_class(&ds, *num_tasks, *split_seed)
        }
    }
}

// ── pretrain ────────────────────────────────────────────────────────

#[derive(Debug, Serialize)]
pub struct PretrainSummary {
    pub checkpoint: PathBuf,
    pub checksum: String,
    pub upstream_train_accuracy: f64,
    pub epoch_losses: Vec<f64>,
}

/// Pretrains a fresh backbone on the sequence's upstream data, freezes it,
/// and writes the checkpoint plus a small report next to it.
pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<PretrainSummary> {
    cfg.validate()?;
    let seq = build_sequence(cfg)?;
    if seq.upstream.samples.is_empty() {
        return Err(Error::Data(
            "the data section provides no upstream pretraining samples".into(),
        ));
    }
    let backbone = Backbone::init(cfg.backbone.clone(), cfg.pretrain.seed)?;
    let report: PretrainReport = pretrain(
        &backbone,
        &seq.upstream.samples,
        seq.upstream.classes.len().max(cfg.backbone.num_pretrain_classes),
        &cfg.pretrain,
    )?;
    backbone.freeze();
    let checksum = backbone.save(&cfg.run.checkpoint)?;
    let summary = PretrainSummary {
        checkpoint: cfg.run.checkpoint.clone(),
        checksum,
        upstream_train_accuracy: report.final_train_accuracy,
        epoch_losses: report.epoch_losses,
    };
    let report_path = cfg.run.checkpoint.with_extension("pretrain.toml");
    std::fs::write(
        &report_path,
        toml::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    Ok(summary)
}

// ── run ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub mode: String,
    pub tasks: usize,
    pub avg_accuracy: f64,
    pub forgetting: Option<f64>,
    pub matching_accuracy: Option<f64>,
    pub prompt_param_count: usize,
    pub head_drift: Vec<f64>,
}

#[derive(Debug)]
pub struct RunDirSummary {
    pub output_dir: PathBuf,
    pub seeds: Vec<SeedSummary>,
    pub avg_accuracy: (f64, f64),
    pub forgetting: Option<(f64, f64)>,
    pub matching_accuracy: Option<(f64, f64)>,
}

fn write_jsonl(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

/// Runs one seed of the configured experiment and writes its artifact
/// directory: score matrix, epoch log, per-task state checkpoints, prompt
/// vectors, and a summary.
pub fn run_one_seed(
    cfg: &ExperimentConfig,
    seq: &TaskSequence,
    seed: u64,
    dir: &Path,
) -> Result<(SeedSummary, RunOutcome)> {
    if !cfg.run.checkpoint.exists() {
        return Err(Error::Checkpoint(format!(
            "backbone checkpoint {} not found; run pretrain first",
            cfg.run.checkpoint.display()
        )));
    }
    std::fs::create_dir_all(dir)?;
    let backbone = Backbone::load(&cfg.run.checkpoint)?;
    let mut train = cfg.train;
    train.seed = seed;
    let dir_for_hook = dir.to_path_buf();
    let mut save_task = |state: &RunState, task: usize| -> Result<()> {
        state.save(&dir_for_hook.join(format!("task_{task}.state")))
    };
    let outcome = run_sequence_with(
        backbone,
        seq,
        cfg.attach,
        train,
        EvalSplit::Test,
        Some(&mut save_task),
    )?;

    outcome
        .score_matrix
        .write_text(&dir.join("score_matrix.txt"), seed, train.mode.as_str())?;
    write_jsonl(&dir.join("log.jsonl"), &outcome.epoch_records)?;
    let vectors = collect_prompt_vectors(&outcome.state.prompts, &outcome.state.general_snapshots);
    write_prompt_vectors(&dir.join("prompts.csv"), &vectors)?;

    let summary = SeedSummary {
        seed,
        mode: train.mode.as_str().to_string(),
        tasks: seq.num_tasks(),
        avg_accuracy: outcome.avg_accuracy,
        forgetting: outcome.forgetting,
        matching_accuracy: outcome.matching_accuracy,
        prompt_param_count: outcome.prompt_param_count,
        head_drift: outcome.head_drift.clone(),
    };
    std::fs::write(
        dir.join("summary.toml"),
        toml::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    Ok((summary, outcome))
}

/// Full multi-seed run: per-seed artifact directories under the output dir,
/// a config snapshot, and the seed-aggregated metric table.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<RunDirSummary> {
    cfg.validate()?;
    let seq = build_sequence(cfg)?;
    std::fs::create_dir_all(&cfg.run.output_dir)?;
    std::fs::write(cfg.run.output_dir.join("config.toml"), cfg.to_toml())?;

    let mut seeds = Vec::new();
    for &seed in &cfg.run.seeds {
        let dir = cfg.run.output_dir.join(format!("seed_{seed}"));
        let (summary, _) = run_one_seed(cfg, &seq, seed, &dir)?;
        seeds.push(summary);
    }

    let acc: Vec<f64> = seeds.iter().map(|s| s.avg_accuracy).collect();
    let forg: Vec<f64> = seeds.iter().filter_map(|s| s.forgetting).collect();
    let matching: Vec<f64> = seeds.iter().filter_map(|s| s.matching_accuracy).collect();
    let agg = RunDirSummary {
        output_dir: cfg.run.output_dir.clone(),
        avg_accuracy: mean_std(&acc),
        forgetting: (!forg.is_empty()).then(|| mean_std(&forg)),
        matching_accuracy: (!matching.is_empty()).then(|| mean_std(&matching)),
        seeds,
    };

    let mut text = String::new();
    let mut csv = String::from("metric,mean,std\n");
    let _ = writeln!(
        text,
        "avg_accuracy: {:.4} ± {:.4}",
        agg.avg_accuracy.0, agg.avg_accuracy.1
    );
    let _ = writeln!(csv, "avg_accuracy,{},{}", agg.avg_accuracy.0, agg.avg_accuracy.1);
    if let Some((m, s)) = agg.forgetting {
        let _ = writeln!(text, "forgetting: {m:.4} ± {s:.4}");
        let _ = writeln!(csv, "forgetting,{m},{s}");
    }
    if let Some((m, s)) = agg.matching_accuracy {
        let _ = writeln!(text, "matching_accuracy: {m:.4} ± {s:.4}");
        let _ = writeln!(csv, "matching_accuracy,{m},{s}");
    }
    std::fs::write(cfg.run.output_dir.join("aggregate.txt"), &text)?;
    std::fs::write(cfg.run.output_dir.join("aggregate.csv"), &csv)?;
    Ok(agg)
}

// ── position sweep ──────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PositionSweep {
    /// Single-layer pass for the expert prompt, multi-layer around the best,
    /// then the same for the general prompt.
    Heuristic,
    /// Every contiguous range for the expert prompt (general fixed), then
    /// every contiguous range for the general prompt given the best expert.
    Exhaustive,
    /// Explicit candidate ranges for the expert prompt.
    Explicit(Vec<(usize, usize)>),
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub phase: String,
    pub target: String,
    pub start: usize,
    pub end: usize,
    pub val_avg_acc: f64,
}

#[derive(Debug)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub best_expert: (usize, usize),
    pub best_general: (usize, usize),
}

impl SweepTable {
    /// Rows sorted by validation accuracy, best first.
    pub fn ranked(&self) -> Vec<&SweepRow> {
        let mut rows: Vec<&SweepRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| b.val_avg_acc.total_cmp(&a.val_avg_acc));
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("phase,target,start,end,val_avg_acc\n");
        for r in self.ranked() {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.phase, r.target, r.start, r.end, r.val_avg_acc
            );
        }
        out
    }
}

fn validation_accuracy(
    cfg: &ExperimentConfig,
    seq: &TaskSequence,
    attach: AttachConfig,
) -> Result<f64> {
    let backbone = Backbone::load(&cfg.run.checkpoint)?;
    let mut train = cfg.train;
    train.seed = cfg.run.seeds[0];
    let outcome = run_sequence_with(backbone, seq, attach, train, EvalSplit::Validation, None)?;
    Ok(outcome.avg_accuracy)
}

fn contiguous_ranges(num_layers: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for start in 1..=num_layers {
        for end in start..=num_layers {
            out.push((start, end));
        }
    }
    out
}

/// Position search over contiguous attachment ranges, scored by validation
/// average accuracy. Selection never touches test data.
pub fn cmd_sweep_positions(cfg: &ExperimentConfig, sweep: PositionSweep) -> Result<SweepTable> {
    cfg.validate()?;
    let seq = build_sequence(cfg)?;
    let n = cfg.backbone.num_layers;
    let mut rows: Vec<SweepRow> = Vec::new();

    let mut eval_expert = |rows: &mut Vec<SweepRow>, phase: &str, start: usize, end: usize| -> Result<f64> {
        let mut attach = cfg.attach;
        attach.expert = PromptSite {
            start,
            end,
            len: attach.expert.len,
        };
        attach.validate(n)?;
        let acc = validation_accuracy(cfg, &seq, attach)?;
        rows.push(SweepRow {
            phase: phase.to_string(),
            target: "expert".to_string(),
            start,
            end,
            val_avg_acc: acc,
        });
        Ok(acc)
    };

    let best_of = |rows: &[SweepRow], target: &str| -> (usize, usize) {
        rows.iter()
            .filter(|r| r.target == target)
            .max_by(|a, b| a.val_avg_acc.total_cmp(&b.val_avg_acc))
            .map(|r| (r.start, r.end))
            .expect("at least one candidate")
    };

    match &sweep {
        PositionSweep::Explicit(ranges) => {
            if ranges.is_empty() {
                return Err(Error::Config("empty candidate range set".into()));
            }
            for &(s, e) in ranges {
                eval_expert(&mut rows, "expert-explicit", s, e)?;
            }
            let best_expert = best_of(&rows, "expert");
            return Ok(SweepTable {
                best_general: (cfg.attach.general.start, cfg.attach.general.end),
                best_expert,
                rows,
            });
        }
        PositionSweep::Exhaustive => {
            for (s, e) in contiguous_ranges(n) {
                eval_expert(&mut rows, "expert-exhaustive", s, e)?;
            }
            let best_expert = best_of(&rows, "expert");
            for (s, e) in contiguous_ranges(n) {
                let mut attach = cfg.attach;
                attach.expert = PromptSite {
                    start: best_expert.0,
                    end: best_expert.1,
                    len: attach.expert.len,
                };
                attach.general = PromptSite {
                    start: s,
                    end: e,
                    len: attach.general.len,
                };
                attach.validate(n)?;
                let acc = validation_accuracy(cfg, &seq, attach)?;
                rows.push(SweepRow {
                    phase: "general-exhaustive".to_string(),
                    target: "general".to_string(),
                    start: s,
                    end: e,
                    val_avg_acc: acc,
                });
            }
            let best_general = best_of(&rows, "general");
            Ok(SweepTable {
                rows,
                best_expert,
                best_general,
            })
        }
        PositionSweep::Heuristic => {
            // Phase 1: single-layer expert positions.
            for l in 1..=n {
                eval_expert(&mut rows, "expert-single", l, l)?;
            }
            let best_single = best_of(&rows, "expert").0;
            // Phase 2: contiguous multi-layer ranges containing the best
            // single layer.
            for (s, e) in contiguous_ranges(n) {
                if s <= best_single && best_single <= e && s != e {
                    eval_expert(&mut rows, "expert-multi", s, e)?;
                }
            }
            let best_expert = best_of(&rows, "expert");
            // Phase 3: general prompt, single then multi, with the chosen
            // expert range fixed.
            let mut eval_general =
                |rows: &mut Vec<SweepRow>, phase: &str, s: usize, e: usize| -> Result<f64> {
                    let mut attach = cfg.attach;
                    attach.expert = PromptSite {
                        start: best_expert.0,
                        end: best_expert.1,
                        len: attach.expert.len,
                    };
                    attach.general = PromptSite {
                        start: s,
                        end: e,
                        len: attach.general.len,
                    };
                    attach.validate(n)?;
                    let acc = validation_accuracy(cfg, &seq, attach)?;
                    rows.push(SweepRow {
                        phase: phase.to_string(),
                        target: "general".to_string(),
                        start: s,
                        end: e,
                        val_avg_acc: acc,
                    });
                    Ok(acc)
                };
            for l in 1..=n {
                eval_general(&mut rows, "general-single", l, l)?;
            }
            let best_g_single = best_of(&rows, "general").0;
            for (s, e) in contiguous_ranges(n) {
                if s <= best_g_single && best_g_single <= e && s != e {
                    eval_general(&mut rows, "general-multi", s, e)?;
                }
            }
            let best_general = best_of(&rows, "general");
            Ok(SweepTable {
                rows,
                best_expert,
                best_general,
            })
        }
    }
}

// ── length sweep ────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct LengthRow {
    pub general_len: usize,
    pub expert_len: usize,
    /// Validation accuracy, or `None` when the cell is rejected (odd length
    /// under prefix-tuning).
    pub val_avg_acc: Option<f64>,
    pub note: String,
}

#[derive(Debug)]
pub struct LengthTable {
    pub rows: Vec<LengthRow>,
    pub best: (usize, usize),
}

impl LengthTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("general_len,expert_len,val_avg_acc,note\n");
        for r in &self.rows {
            let acc = r
                .val_avg_acc
                .map(|v| v.to_string())
                .unwrap_or_else(|| "rejected".to_string());
            let _ = writeln!(out, "{},{},{acc},{}", r.general_len, r.expert_len, r.note);
        }
        out
    }
}

pub const DEFAULT_LENGTH_GRID: [usize; 4] = [5, 10, 20, 40];

/// Grid search over (general, expert) prompt lengths on validation accuracy.
pub fn cmd_sweep_lengths(cfg: &ExperimentConfig, grid: Option<Vec<usize>>) -> Result<LengthTable> {
    cfg.validate()?;
    let seq = build_sequence(cfg)?;
    let grid = grid.unwrap_or_else(|| DEFAULT_LENGTH_GRID.to_vec());
    let mut rows = Vec::with_capacity(grid.len() * grid.len());
    for &lg in &grid {
        for &le in &grid {
            let mut attach = cfg.attach;
            attach.general.len = lg;
            attach.expert.len = le;
            match attach.validate(cfg.backbone.num_layers) {
                Err(e) => rows.push(LengthRow {
                    general_len: lg,
                    expert_len: le,
                    val_avg_acc: None,
                    note: e.to_string(),
                }),
                Ok(()) => {
                    let acc = validation_accuracy(cfg, &seq, attach)?;
                    rows.push(LengthRow {
                        general_len: lg,
                        expert_len: le,
                        val_avg_acc: Some(acc),
                        note: String::new(),
                    });
                }
            }
        }
    }
    let best = rows
        .iter()
        .filter_map(|r| r.val_avg_acc.map(|a| (a, (r.general_len, r.expert_len))))
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, lens)| lens)
        .ok_or_else(|| Error::Config("every grid cell was rejected".into()))?;
    Ok(LengthTable { rows, best })
}

// ── ablation ────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub general: bool,
    pub expert: bool,
    pub multi_layer: bool,
    pub avg_accuracy_mean: f64,
    pub avg_accuracy_std: f64,
    pub forgetting_mean: f64,
    pub forgetting_std: f64,
    pub prompt_param_count: usize,
}

#[derive(Debug)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "general,expert,multi_layer,avg_acc_mean,avg_acc_std,forgetting_mean,forgetting_std,prompt_params\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.general,
                r.expert,
                r.multi_layer,
                r.avg_accuracy_mean,
                r.avg_accuracy_std,
                r.forgetting_mean,
                r.forgetting_std,
                r.prompt_param_count
            );
        }
        out
    }
}

/// Single-layer ablation sites: the best single positions found by the
/// position search (general at layer 2, expert at layer 5 by default).
fn single_layer_attach(cfg: &AttachConfig, num_layers: usize) -> AttachConfig {
    let g = 2.min(num_layers);
    let e = 5.min(num_layers);
    AttachConfig {
        variant: cfg.variant,
        general: PromptSite {
            start: g,
            end: g,
            len: cfg.general.len,
        },
        expert: PromptSite {
            start: e,
            end: e,
            len: cfg.expert.len,
        },
    }
}

/// Runs the component ablation: the frozen-backbone baseline, then
/// {general-only, expert-only, both} × {single-layer, multi-layer}, all on
/// the same seeds. Seven rows.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<AblationTable> {
    cfg.validate()?;
    let seq = build_sequence(cfg)?;
    let single = single_layer_attach(&cfg.attach, cfg.backbone.num_layers);
    let cells: [(bool, bool, bool); 7] = [
        (false, false, false),
        (true, false, false),
        (false, true, false),
        (true, true, false),
        (true, false, true),
        (false, true, true),
        (true, true, true),
    ];
    let mut rows = Vec::with_capacity(cells.len());
    for (general, expert, multi) in cells {
        let mode = match (general, expert) {
            (false, false) => Mode::Baseline,
            (true, false) => Mode::GOnly,
            (false, true) => Mode::EOnly,
            (true, true) => Mode::Dualprompt,
        };
        let attach = if multi { cfg.attach } else { single };
        let mut accs = Vec::new();
        let mut forgs = Vec::new();
        let mut params = 0usize;
        for &seed in &cfg.run.seeds {
            let backbone = Backbone::load(&cfg.run.checkpoint)?;
            let mut train = cfg.train;
            train.seed = seed;
            train.mode = mode;
            let outcome =
                run_sequence_with(backbone, &seq, attach, train, EvalSplit::Test, None)?;
            accs.push(outcome.avg_accuracy);
            if let Some(f) = outcome.forgetting {
                forgs.push(f);
            }
            params = outcome.prompt_param_count;
        }
        let (am, asd) = mean_std(&accs);
        let (fm, fsd) = mean_std(&forgs);
        rows.push(AblationRow {
            general,
            expert,
            multi_layer: multi,
            avg_accuracy_mean: am,
            avg_accuracy_std: asd,
            forgetting_mean: fm,
            forgetting_std: fsd,
            prompt_param_count: params,
        });
    }
    Ok(AblationTable { rows })
}

// ── report ──────────────────────────────────────────────────────────

#[derive(Debug, Serialize)]
pub struct ReportEntry {
    pub run_dir: PathBuf,
    pub mode: String,
    pub tasks: usize,
    pub seeds: Vec<u64>,
    pub avg_accuracy_mean: f64,
    pub avg_accuracy_std: f64,
    pub forgetting_mean: Option<f64>,
    pub forgetting_std: Option<f64>,
    pub matching_accuracy_mean: Option<f64>,
    pub prompt_param_count: usize,
    pub prompt_param_closed_form: usize,
}

#[derive(Debug)]
pub struct Report {
    pub entries: Vec<ReportEntry>,
}

impl Report {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "run_dir,mode,tasks,avg_acc_mean,avg_acc_std,forgetting_mean,forgetting_std,matching_acc_mean,prompt_params,prompt_params_closed_form\n",
        );
        for e in &self.entries {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "n/a".into());
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                e.run_dir.display(),
                e.mode,
                e.tasks,
                e.avg_accuracy_mean,
                e.avg_accuracy_std,
                opt(e.forgetting_mean),
                opt(e.forgetting_std),
                opt(e.matching_accuracy_mean),
                e.prompt_param_count,
                e.prompt_param_closed_form
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{} [{}] tasks={} acc {:.2} ± {:.2} forgetting {} matching {} prompt-params {}",
                e.run_dir.display(),
                e.mode,
                e.tasks,
                e.avg_accuracy_mean,
                e.avg_accuracy_std,
                e.forgetting_mean
                    .map(|m| format!("{m:.2} ± {:.2}", e.forgetting_std.unwrap_or(0.0)))
                    .unwrap_or_else(|| "n/a".into()),
                e.matching_accuracy_mean
                    .map(|m| format!("{m:.2}"))
                    .unwrap_or_else(|| "n/a".into()),
                e.prompt_param_count
            );
        }
        out
    }
}

/// Closed-form prompt parameter count for a config after `tasks` tasks:
/// general layers × Lg × D, plus per task (expert layers × Le × D + D for
/// the key). Verified against parameter enumeration in tests.
pub fn closed_form_prompt_params(
    attach: &AttachConfig,
    embed_dim: usize,
    tasks: usize,
    mode: Mode,
) -> usize {
    let mut total = 0;
    if mode.uses_general() {
        total += attach.general.layer_count() * attach.general.len * embed_dim;
    }
    if mode.uses_expert() {
        total += tasks * (attach.expert.layer_count() * attach.expert.len * embed_dim + embed_dim);
    }
    total
}

/// Merges finished run directories into one comparison table. All runs must
/// share the same task count.
pub fn cmd_report(run_dirs: &[PathBuf]) -> Result<Report> {
    if run_dirs.is_empty() {
        return Err(Error::Config("no run directories given".into()));
    }
    let mut entries = Vec::new();
    let mut expected_tasks: Option<usize> = None;
    for dir in run_dirs {
        let cfg = load_config(&dir.join("config.toml"))?;
        let mut seeds = Vec::new();
        let mut summaries: Vec<SeedSummary> = Vec::new();
        for &seed in &cfg.run.seeds {
            let path = dir.join(format!("seed_{seed}")).join("summary.toml");
            let text = std::fs::read_to_string(&path)?;
            let summary: SeedSummary = toml::from_str(&text)
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            // Cross-check the stored matrix against the recorded metrics.
            let (matrix, _, _) = ScoreMatrix::read_text(
                &dir.join(format!("seed_{seed}")).join("score_matrix.txt"),
            )?;
            let (acc, _) = matrix.final_metrics()?;
            if (acc - summary.avg_accuracy).abs() > 1e-9 {
                return Err(Error::Data(format!(
                    "summary and score matrix disagree in {}",
                    path.display()
                )));
            }
            seeds.push(seed);
            summaries.push(summary);
        }
        let tasks = summaries[0].tasks;
        match expected_tasks {
            None => expected_tasks = Some(tasks),
            Some(t) if t != tasks => {
                return Err(Error::Data(format!(
                    "run {} has {tasks} tasks, others have {t}; refusing to merge",
                    dir.display()
                )));
            }
            _ => {}
        }
        let accs: Vec<f64> = summaries.iter().map(|s| s.avg_accuracy).collect();
        let forgs: Vec<f64> = summaries.iter().filter_map(|s| s.forgetting).collect();
        let matches: Vec<f64> = summaries
            .iter()
            .filter_map(|s| s.matching_accuracy)
            .collect();
        let (am, asd) = mean_std(&accs);
        entries.push(ReportEntry {
            run_dir: dir.clone(),
            mode: summaries[0].mode.clone(),
            tasks,
            seeds,
            avg_accuracy_mean: am,
            avg_accuracy_std: asd,
            forgetting_mean: (!forgs.is_empty()).then(|| mean_std(&forgs).0),
            forgetting_std: (!forgs.is_empty()).then(|| mean_std(&forgs).1),
            matching_accuracy_mean: (!matches.is_empty()).then(|| mean_std(&matches).0),
            prompt_param_count: summaries[0].prompt_param_count,
            prompt_param_closed_form: closed_form_prompt_params(
                &cfg.attach,
                cfg.backbone.embed_dim,
                tasks,
                cfg.train.mode,
            ),
        });
    }
    Ok(Report { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::InputSpec;

    fn tiny_config(root: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::desk_default();
        cfg.backbone = BackboneConfig {
            num_layers: 6,
            embed_dim: 8,
            num_heads: 2,
            mlp_ratio: 2,
            input: InputSpec::Grid {
                image_size: 4,
                patch_size: 2,
            },
            num_pretrain_classes: 2,
        };
        cfg.attach.general.len = 2;
        cfg.attach.expert.len = 4;
        cfg.data = DataConfig::Synthetic {
            seed: 3,
            spec: SyntheticSpec {
                num_tasks: 2,
                classes_per_task: 2,
                train_per_class: 8,
                test_per_class: 4,
                upstream_classes: 2,
                upstream_per_class: 6,
                grid: 4,
                ..Default::default()
            },
        };
        cfg.train.batch_size = 8;
        cfg.train.epochs_per_task = 1;
        cfg.pretrain.epochs = 1;
        cfg.run = RunSection {
            output_dir: root.join("out"),
            seeds: vec![11, 12],
            checkpoint: root.join("bb.ckpt"),
        };
        cfg
    }

    fn temp_root(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("exp-{tag}-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn config_round_trip_and_unknown_keys() {
        let root = temp_root("cfg");
        let cfg = tiny_config(&root);
        let path = root.join("config.toml");
        std::fs::write(&path, cfg.to_toml()).unwrap();
        let loaded = load_config(&path).unwrap();
        assert_eq!(loaded.to_toml(), cfg.to_toml());

        let mut text = cfg.to_toml();
        text.push_str("\nunknown_key = 3\n");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(load_config(&path), Err(Error::Config(_))));
        std::fs::remove_dir_all(&root).ok();
    }

    #[test]
    fn pretrain_then_run_produces_artifacts() {
        let root = temp_root("run");
        let cfg = tiny_config(&root);
        let summary = cmd_pretrain(&cfg).unwrap();
        assert!(cfg.run.checkpoint.exists());
        // Same seed, same checksum.
        let summary2 = cmd_pretrain(&cfg).unwrap();
        assert_eq!(summary.checksum, summary2.checksum);

        let agg = cmd_run(&cfg).unwrap();
        assert_eq!(agg.seeds.len(), 2);
        for seed in [11u64, 12] {
            let dir = cfg.run.output_dir.join(format!("seed_{seed}"));
            for file in [
                "score_matrix.txt",
                "log.jsonl",
                "summary.toml",
                "prompts.csv",
                "task_0.state",
                "task_1.state",
            ] {
                assert!(dir.join(file).exists(), "missing {file}");
            }
        }
        assert!(cfg.run.output_dir.join("aggregate.csv").exists());

        // Report over the run reproduces its own metrics and the closed-form
        // parameter count matches the enumerated one.
        let report = cmd_report(&[cfg.run.output_dir.clone()]).unwrap();
        let entry = &report.entries[0];
        assert!((entry.avg_accuracy_mean - agg.avg_accuracy.0).abs() < 1e-12);
        assert_eq!(entry.prompt_param_count, entry.prompt_param_closed_form);
        std::fs::remove_dir_all(&root).ok();
    }

    #[test]
    fn missing_checkpoint_is_an_error() {
        let root = temp_root("nockpt");
        let cfg = tiny_config(&root);
        assert!(matches!(cmd_run(&cfg), Err(Error::Checkpoint(_))));
        std::fs::remove_dir_all(&root).ok();
    }

    #[test]
    fn sweep_positions_tables() {
        let root = temp_root("sweep");
        let mut cfg = tiny_config(&root);
        cfg.run.seeds = vec![11];
        cmd_pretrain(&cfg).unwrap();

        // Degenerate explicit set: one row.
        let table =
            cmd_sweep_positions(&cfg, PositionSweep::Explicit(vec![(1, 1)])).unwrap();
        assert_eq!(table.rows.len(), 1);
        assert!(matches!(
            cmd_sweep_positions(&cfg, PositionSweep::Explicit(vec![])),
            Err(Error::Config(_))
        ));

        // Exhaustive contiguous sweep on N=6: 21 expert candidates.
        let table = cmd_sweep_positions(&cfg, PositionSweep::Exhaustive).unwrap();
        let expert_rows: Vec<_> = table.rows.iter().filter(|r| r.target == "expert").collect();
        assert_eq!(expert_rows.len(), 21);
        // The selected best is the argmax of the emitted table.
        let best_row = expert_rows
            .iter()
            .max_by(|a, b| a.val_avg_acc.total_cmp(&b.val_avg_acc))
            .unwrap();
        assert_eq!(table.best_expert, (best_row.start, best_row.end));
        std::fs::remove_dir_all(&root).ok();
    }

    #[test]
    fn sweep_lengths_grid() {
        let root = temp_root("lens");
        let mut cfg = tiny_config(&root);
        cfg.run.seeds = vec![11];
        cmd_pretrain(&cfg).unwrap();
        let table = cmd_sweep_lengths(&cfg, Some(vec![2, 5])).unwrap();
        assert_eq!(table.rows.len(), 4);
        // Odd lengths are rejected under prefix-tuning but still listed.
        let rejected: Vec<_> = table.rows.iter().filter(|r| r.val_avg_acc.is_none()).collect();
        assert_eq!(rejected.len(), 3); // (2,5), (5,2), (5,5)
        let best_row = table
            .rows
            .iter()
            .filter_map(|r| r.val_avg_acc.map(|a| (a, (r.general_len, r.expert_len))))
            .max_by(|a, b| a.0.total_cmp(&b.0))
            .unwrap();
        assert_eq!(table.best, best_row.1);
        std::fs::remove_dir_all(&root).ok();
    }

    #[test]
    fn default_grid_has_sixteen_cells_including_5_20() {
        let grid = DEFAULT_LENGTH_GRID;
        let mut cells = Vec::new();
        for &a in &grid {
            for &b in &grid {
                cells.push((a, b));
            }
        }
        assert_eq!(cells.len(), 16);
        assert!(cells.contains(&(5, 20)));
    }

    #[test]
    fn ablation_has_seven_rows_and_baseline_zero_params() {
        let root = temp_root("ablate");
        let mut cfg = tiny_config(&root);
        cfg.run.seeds = vec![11];
        cmd_pretrain(&cfg).unwrap();
        let table = cmd_ablate(&cfg).unwrap();
        assert_eq!(table.rows.len(), 7);
        let baseline = &table.rows[0];
        assert!(!baseline.general && !baseline.expert);
        assert_eq!(baseline.prompt_param_count, 0);
        // Same seeds rerun: identical table.
        let again = cmd_ablate(&cfg).unwrap();
        assert_eq!(table.to_csv(), again.to_csv());
        std::fs::remove_dir_all(&root).ok();
    }

    #[test]
    fn report_rejects_mismatched_task_counts() {
        let root = temp_root("mismatch");
        let cfg_a = tiny_config(&root.join("a"));
        cmd_pretrain(&cfg_a).unwrap();
        cmd_run(&cfg_a).unwrap();
        let mut cfg_b = tiny_config(&root.join("b"));
        if let DataConfig::Synthetic { spec, .. } = &mut cfg_b.data {
            spec.num_tasks = 3;
        }
        cmd_pretrain(&cfg_b).unwrap();
        cmd_run(&cfg_b).unwrap();
        let err = cmd_report(&[cfg_a.run.output_dir.clone(), cfg_b.run.output_dir.clone()])
            .unwrap_err();
        assert!(err.to_string().contains("refusing to merge"));
        std::fs::remove_dir_all(&root).ok();
    }
}
