//! General and expert prompts, task keys, the two prompting functions, and
//! the layer-range attachment logic.
//!
//! The shared general prompt carries task-invariant instructions and attaches
//! to a contiguous range of shallow attention layers; each task owns an
//! expert prompt (plus a key vector matched against the frozen query feature)
//! attached to a, typically deeper, contiguous range. Prompt-tuning
//! concatenates prompt rows to all three attention inputs and lengthens the
//! sequence; prefix-tuning splits a prompt into key/value halves prepended
//! before the projections, keeping the length fixed.

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::{Tape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

const PROMPT_INIT_RANGE: f64 = 0.03;
const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptVariant {
    /// Concatenate the prompt to query, key, and value; output grows by the
    /// prompt length.
    PromptTuning,
    /// Split the prompt into key/value halves prepended before the
    /// projections; output length is unchanged. Requires even lengths.
    PrefixTuning,
}

/// Contiguous attachment range (1-based, inclusive) and prompt length for
/// one prompt kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSite {
    pub start: usize,
    pub end: usize,
    pub len: usize,
}

impl PromptSite {
    pub fn layer_count(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn covers(&self, layer_1based: usize) -> bool {
        (self.start..=self.end).contains(&layer_1based)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttachConfig {
    pub variant: PromptVariant,
    pub general: PromptSite,
    pub expert: PromptSite,
}

impl AttachConfig {
    /// Desk default: prefix-tuning, general prompt on layers 1–2, expert
    /// prompts on layers 3–5, lengths 6 and 20.
    pub fn desk_default() -> Self {
        AttachConfig {
            variant: PromptVariant::PrefixTuning,
            general: PromptSite {
                start: 1,
                end: 2,
                len: 6,
            },
            expert: PromptSite {
                start: 3,
                end: 5,
                len: 20,
            },
        }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        for (name, site) in [("general", &self.general), ("expert", &self.expert)] {
            if site.start == 0 || site.start > site.end || site.end > num_layers {
                return Err(Error::Config(format!(
                    "{name} range {}..={} invalid for {num_layers} layers",
                    site.start, site.end
                )));
            }
            if self.variant == PromptVariant::PrefixTuning && site.len % 2 != 0 {
                return Err(Error::Config(format!(
                    "prefix-tuning needs an even {name} prompt length, got {}",
                    site.len
                )));
            }
        }
        Ok(())
    }
}

/// Prompts scheduled for one layer of a forward pass, in application order:
/// general first, then expert.
#[derive(Clone, Default)]
pub struct LayerPrompts {
    pub general: Option<Tensor>,
    pub expert: Option<Tensor>,
}

impl LayerPrompts {
    pub fn is_empty(&self) -> bool {
        self.general.is_none() && self.expert.is_none()
    }

    pub fn in_order(&self) -> impl Iterator<Item = &Tensor> {
        self.general.iter().chain(self.expert.iter())
    }
}

/// Per-layer injection plan for one forward pass.
pub struct ForwardPrompts {
    pub variant: PromptVariant,
    pub layers: Vec<LayerPrompts>,
}

/// Shared multi-layer general prompt.
pub struct GeneralPrompt {
    pub site: PromptSite,
    /// One `len×D` tensor per covered layer, shalliest first.
    pub per_layer: Vec<Tensor>,
}

/// One task's expert prompt plus its matching key.
pub struct ExpertPrompt {
    pub per_layer: Vec<Tensor>,
    pub key: Tensor,
}

/// All prompt parameters of a run.
pub struct PromptSet {
    pub cfg: AttachConfig,
    pub embed_dim: usize,
    pub general: Option<GeneralPrompt>,
    pub experts: Vec<ExpertPrompt>,
}

fn normal(rng: &mut ChaCha12Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0f64);
    let u2: f64 = rng.gen_range(0.0..1.0f64);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

impl PromptSet {
    /// Creates the prompt store; the general prompt is initialized up front
    /// when enabled, expert prompts are added one per task as tasks arrive.
    pub fn new(
        cfg: AttachConfig,
        embed_dim: usize,
        with_general: bool,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let general = with_general.then(|| GeneralPrompt {
            site: cfg.general,
            per_layer: (0..cfg.general.layer_count())
                .map(|_| {
                    Tensor::uniform(
                        vec![cfg.general.len, embed_dim],
                        -PROMPT_INIT_RANGE,
                        PROMPT_INIT_RANGE,
                        rng,
                    )
                    .trainable()
                })
                .collect(),
        });
        PromptSet {
            cfg,
            embed_dim,
            general,
            experts: Vec::new(),
        }
    }

    /// Appends a fresh expert prompt and key for the next task; returns its
    /// index. Keys are drawn uniformly on the unit sphere.
    pub fn add_expert(&mut self, rng: &mut ChaCha12Rng) -> usize {
        let site = self.cfg.expert;
        let per_layer = (0..site.layer_count())
            .map(|_| {
                Tensor::uniform(
                    vec![site.len, self.embed_dim],
                    -PROMPT_INIT_RANGE,
                    PROMPT_INIT_RANGE,
                    rng,
                )
                .trainable()
            })
            .collect();
        let mut key: Vec<f64> = (0..self.embed_dim).map(|_| normal(rng)).collect();
        let norm = key.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
        for v in &mut key {
            *v /= norm;
        }
        self.experts.push(ExpertPrompt {
            per_layer,
            key: Tensor::from_vec(vec![self.embed_dim], key)
                .expect("key shape")
                .trainable(),
        });
        self.experts.len() - 1
    }

    /// Builds the per-layer injection plan for a forward pass through a
    /// backbone with `num_layers` layers, using the given expert (if any).
    /// Overlapping ranges inject the general prompt first at that layer.
    pub fn plan(&self, num_layers: usize, expert: Option<usize>) -> Result<ForwardPrompts> {
        self.cfg.validate(num_layers)?;
        let expert_prompt = match expert {
            Some(idx) => Some(self.experts.get(idx).ok_or_else(|| {
                Error::Contract(format!("expert {idx} does not exist"))
            })?),
            None => None,
        };
        let mut layers = Vec::with_capacity(num_layers);
        for layer in 1..=num_layers {
            let mut lp = LayerPrompts::default();
            if let Some(g) = &self.general {
                if g.site.covers(layer) {
                    lp.general = Some(g.per_layer[layer - g.site.start].clone());
                }
            }
            if let Some(e) = expert_prompt {
                if self.cfg.expert.covers(layer) {
                    lp.expert = Some(e.per_layer[layer - self.cfg.expert.start].clone());
                }
            }
            layers.push(lp);
        }
        Ok(ForwardPrompts {
            variant: self.cfg.variant,
            layers,
        })
    }

    pub fn keys(&self) -> Vec<Vec<f64>> {
        self.experts.iter().map(|e| e.key.to_vec()).collect()
    }

    /// Named parameter handles; names are unique across tasks so optimizer
    /// state follows each parameter's lifetime.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        if let Some(g) = &self.general {
            for (i, t) in g.per_layer.iter().enumerate() {
                out.push((format!("general.layer{}", g.site.start + i), t.clone()));
            }
        }
        for (task, e) in self.experts.iter().enumerate() {
            for (i, t) in e.per_layer.iter().enumerate() {
                out.push((
                    format!("expert{task}.layer{}", self.cfg.expert.start + i),
                    t.clone(),
                ));
            }
            out.push((format!("expert{task}.key"), e.key.clone()));
        }
        out
    }

    /// Total prompt-side parameter count (prompt rows plus keys).
    pub fn num_prompt_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Deep copy of the general prompt tensors, for per-task snapshots.
    pub fn snapshot_general(&self) -> Vec<Tensor> {
        self.general
            .as_ref()
            .map(|g| g.per_layer.iter().map(|t| t.detached_copy()).collect())
            .unwrap_or_default()
    }
}

// ── prompting functions ─────────────────────────────────────────────

/// Prompt-tuning: the prompt joins the sequence for all three attention
/// inputs; the output has `L + Lp` rows. Content rows come first so the
/// class token stays at index 0.
pub fn prompt_pro_t(
    backbone: &Backbone,
    tape: &Tape,
    p: &Tensor,
    h: &Tensor,
    layer_index: usize,
) -> Result<Tensor> {
    let extended = tape.concat_rows(h, p)?;
    backbone.msa(tape, &extended, &extended, &extended, layer_index)
}

/// Prefix-tuning: the prompt splits into key/value halves prepended to the
/// key and value inputs before their projections; queries and the output
/// length are untouched.
pub fn prompt_pre_t(
    backbone: &Backbone,
    tape: &Tape,
    p: &Tensor,
    h: &Tensor,
    layer_index: usize,
) -> Result<Tensor> {
    let lp = p.shape()[0];
    if lp % 2 != 0 {
        return Err(Error::Config(format!(
            "prefix-tuning prompt length must be even, got {lp}"
        )));
    }
    let half = lp / 2;
    let pk = tape.slice_rows(p, 0, half)?;
    let pv = tape.slice_rows(p, half, half)?;
    let keys = tape.concat_rows(&pk, h)?;
    let values = tape.concat_rows(&pv, h)?;
    backbone.msa(tape, h, &keys, &values, layer_index)
}

// ── matching machinery ──────────────────────────────────────────────

/// Cosine distance `1 − cos(a, b)` with norms clamped at 1e-12.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    1.0 - dot / (na.sqrt().max(NORM_FLOOR) * nb.sqrt().max(NORM_FLOOR))
}

/// Differentiable matching loss: cosine distance between the query feature
/// and a task key, in `[0, 2]`.
pub fn match_loss(tape: &Tape, query: &Tensor, key: &Tensor) -> Result<Tensor> {
    if query.shape() != key.shape() {
        return Err(Error::ShapeMismatch {
            op: "match_loss",
            lhs: query.shape().to_vec(),
            rhs: key.shape().to_vec(),
        });
    }
    let dot = tape.dot(query, key)?;
    let nq = tape.clamp_min(&tape.l2norm(query), NORM_FLOOR);
    let nk = tape.clamp_min(&tape.l2norm(key), NORM_FLOOR);
    let cos = tape.div(&dot, &tape.mul(&nq, &nk)?)?;
    Ok(tape.add_scalar(&tape.scale(&cos, -1.0), 1.0))
}

/// Best-matching task key: argmin of the cosine distance, ties to the
/// lowest index.
pub fn select_expert(query: &[f64], keys: &[Vec<f64>]) -> Result<usize> {
    if keys.is_empty() {
        return Err(Error::Contract("no task keys to select from".into()));
    }
    let mut best = 0;
    let mut best_dist = cosine_distance(query, &keys[0]);
    for (i, k) in keys.iter().enumerate().skip(1) {
        let d = cosine_distance(query, k);
        if d < best_dist {
            best = i;
            best_dist = d;
        }
    }
    Ok(best)
}

// ── prompt-vector export ────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PromptKind {
    General,
    Expert,
}

/// One exported prompt row. For general prompts `owner` is the snapshot id
/// (the task just trained when the snapshot was taken); for expert prompts
/// it is the owning task.
#[derive(Clone, Debug)]
pub struct PromptVector {
    pub kind: PromptKind,
    pub owner: usize,
    pub layer: usize,
    pub row: usize,
    pub values: Vec<f64>,
}

/// Flattens final expert prompts and per-task general snapshots into
/// exportable rows. Layers are absolute 1-based attention-layer indices.
pub fn collect_prompt_vectors(
    set: &PromptSet,
    general_snapshots: &[Vec<Tensor>],
) -> Vec<PromptVector> {
    let mut out = Vec::new();
    if let Some(g) = &set.general {
        for (snap_id, snapshot) in general_snapshots.iter().enumerate() {
            for (li, tensor) in snapshot.iter().enumerate() {
                push_rows(
                    &mut out,
                    PromptKind::General,
                    snap_id,
                    g.site.start + li,
                    tensor,
                );
            }
        }
    }
    for (task, e) in set.experts.iter().enumerate() {
        for (li, tensor) in e.per_layer.iter().enumerate() {
            push_rows(
                &mut out,
                PromptKind::Expert,
                task,
                set.cfg.expert.start + li,
                tensor,
            );
        }
    }
    out
}

fn push_rows(
    out: &mut Vec<PromptVector>,
    kind: PromptKind,
    owner: usize,
    layer: usize,
    tensor: &Tensor,
) {
    let rows = tensor.shape()[0];
    let d = tensor.shape()[1];
    let data = tensor.data();
    for r in 0..rows {
        out.push(PromptVector {
            kind: kind.clone(),
            owner,
            layer,
            row: r,
            values: data[r * d..(r + 1) * d].to_vec(),
        });
    }
}

/// Writes prompt rows as CSV, one record per row:
/// `kind,owner,layer,row,v0,…,v{D-1}`. Values print in Rust's shortest
/// round-trip form, so a reload is bit-exact.
pub fn write_prompt_vectors(path: &Path, rows: &[PromptVector]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# prompt-vectors v1: kind,owner,layer,row,v0..v{{D-1}}")?;
    for r in rows {
        let kind = match r.kind {
            PromptKind::General => "G",
            PromptKind::Expert => "E",
        };
        write!(f, "{kind},{},{},{}", r.owner, r.layer, r.row)?;
        for v in &r.values {
            write!(f, ",{v}")?;
        }
        writeln!(f)?;
    }
    Ok(())
}

pub fn read_prompt_vectors(path: &Path) -> Result<Vec<PromptVector>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let bad = || Error::Data(format!("bad prompt-vector line: {line}"));
        let kind = match parts.next().ok_or_else(bad)? {
            "G" => PromptKind::General,
            "E" => PromptKind::Expert,
            _ => return Err(bad()),
        };
        let owner = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let layer = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let row = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let values = parts
            .map(|s| s.parse::<f64>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        out.push(PromptVector {
            kind,
            owner,
            layer,
            row,
            values,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn validate_ranges_and_even_lengths() {
        let mut cfg = AttachConfig::desk_default();
        assert!(cfg.validate(6).is_ok());
        assert!(cfg.validate(4).is_err()); // expert end 5 > 4
        cfg.expert.len = 21;
        assert!(cfg.validate(6).is_err()); // odd under prefix-tuning
        cfg.variant = PromptVariant::PromptTuning;
        assert!(cfg.validate(6).is_ok());
        cfg.general.start = 0;
        assert!(cfg.validate(6).is_err());
    }

    fn set_with(cfg: AttachConfig, tasks: usize) -> PromptSet {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut set = PromptSet::new(cfg, 8, true, &mut rng);
        for _ in 0..tasks {
            set.add_expert(&mut rng);
        }
        set
    }

    #[test]
    fn attach_plan_default_ranges() {
        // general 1–2, expert 3–5 on six layers: {1,2}=G, {3,4,5}=E, {6}=none.
        let set = set_with(AttachConfig::desk_default(), 1);
        let plan = set.plan(6, Some(0)).unwrap();
        let kinds: Vec<(bool, bool)> = plan
            .layers
            .iter()
            .map(|l| (l.general.is_some(), l.expert.is_some()))
            .collect();
        assert_eq!(
            kinds,
            vec![
                (true, false),
                (true, false),
                (false, true),
                (false, true),
                (false, true),
                (false, false)
            ]
        );
    }

    #[test]
    fn attach_plan_single_layer() {
        let cfg = AttachConfig {
            variant: PromptVariant::PrefixTuning,
            general: PromptSite {
                start: 2,
                end: 2,
                len: 6,
            },
            expert: PromptSite {
                start: 5,
                end: 5,
                len: 20,
            },
        };
        let set = set_with(cfg, 1);
        let plan = set.plan(6, Some(0)).unwrap();
        let injected = plan.layers.iter().filter(|l| !l.is_empty()).count();
        assert_eq!(injected, 2);
    }

    #[test]
    fn attach_plan_overlapping_ranges() {
        let cfg = AttachConfig {
            variant: PromptVariant::PromptTuning,
            general: PromptSite {
                start: 1,
                end: 3,
                len: 4,
            },
            expert: PromptSite {
                start: 2,
                end: 4,
                len: 4,
            },
        };
        let set = set_with(cfg, 1);
        let plan = set.plan(6, Some(0)).unwrap();
        for layer in [1usize, 2] {
            let lp = &plan.layers[layer];
            assert!(lp.general.is_some() && lp.expert.is_some());
            // Application order at an overlapping layer: general, then expert.
            let order: Vec<_> = lp.in_order().collect();
            assert!(order[0].same_buffer(lp.general.as_ref().unwrap()));
        }
        assert!(plan.layers[0].expert.is_none());
        assert!(plan.layers[3].general.is_none());
    }

    #[test]
    fn match_loss_reference_points() {
        let tape = Tape::new();
        let q = Tensor::from_vec(vec![3], vec![1.0, 2.0, -1.0]).unwrap();
        let same = match_loss(&tape, &q, &q.detached_copy()).unwrap();
        assert!(same.item().abs() < 1e-12);
        let flipped = Tensor::from_vec(vec![3], vec![-1.0, -2.0, 1.0]).unwrap();
        assert!((match_loss(&tape, &q, &flipped).unwrap().item() - 2.0).abs() < 1e-12);
        let ortho = Tensor::from_vec(vec![3], vec![2.0, -1.0, 0.0]).unwrap();
        assert!((match_loss(&tape, &q, &ortho).unwrap().item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn match_loss_zero_norm_is_guarded() {
        let tape = Tape::new();
        let q = Tensor::from_vec(vec![2], vec![0.0, 0.0]).unwrap();
        let k = Tensor::from_vec(vec![2], vec![1.0, 0.0]).unwrap().trainable();
        let loss = match_loss(&tape, &q, &k).unwrap();
        assert!(loss.item().is_finite());
        tape.backward(&loss).unwrap();
        assert!(k.grad().unwrap().iter().all(|g| g.is_finite()));
    }

    #[test]
    fn select_expert_basics() {
        let q = vec![1.0, 0.0];
        assert_eq!(select_expert(&q, &[vec![0.3, 0.3]]).unwrap(), 0);
        let keys = vec![vec![-1.0, 0.0], vec![1.0, 0.0]];
        assert_eq!(select_expert(&q, &keys).unwrap(), 1);
        assert!(select_expert(&q, &[]).is_err());
    }

    #[test]
    fn select_expert_matches_brute_force_and_scaling() {
        let mut rng = ChaCha12Rng::seed_from_u64(33);
        for _ in 0..200 {
            let q: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0f64)).collect();
            let keys: Vec<Vec<f64>> = (0..10)
                .map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0f64)).collect())
                .collect();
            let picked = select_expert(&q, &keys).unwrap();
            // Brute-force scan oracle.
            let dists: Vec<f64> = keys.iter().map(|k| cosine_distance(&q, k)).collect();
            let mut oracle = 0;
            for i in 1..dists.len() {
                if dists[i] < dists[oracle] {
                    oracle = i;
                }
            }
            assert_eq!(picked, oracle);
            // Scale invariance under positive scaling of the query.
            let scaled: Vec<f64> = q.iter().map(|v| v * 37.5).collect();
            assert_eq!(select_expert(&scaled, &keys).unwrap(), picked);
        }
    }

    #[test]
    fn export_record_counts_and_round_trip() {
        // 10 tasks, expert length 20 over 3 layers → 600 expert records;
        // general length 5 over 2 layers with one snapshot per task → 100.
        let cfg = AttachConfig {
            variant: PromptVariant::PromptTuning,
            general: PromptSite {
                start: 1,
                end: 2,
                len: 5,
            },
            expert: PromptSite {
                start: 3,
                end: 5,
                len: 20,
            },
        };
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let mut set = PromptSet::new(cfg, 4, true, &mut rng);
        let mut snapshots = Vec::new();
        for _ in 0..10 {
            set.add_expert(&mut rng);
            snapshots.push(set.snapshot_general());
        }
        let rows = collect_prompt_vectors(&set, &snapshots);
        let e = rows.iter().filter(|r| r.kind == PromptKind::Expert).count();
        let g = rows.iter().filter(|r| r.kind == PromptKind::General).count();
        assert_eq!(e, 600);
        assert_eq!(g, 100);

        let dir = std::env::temp_dir().join(format!("pvec-{}", std::process::id()));
        let path = dir.join("prompts.csv");
        write_prompt_vectors(&path, &rows).unwrap();
        let back = read_prompt_vectors(&path).unwrap();
        assert_eq!(back.len(), rows.len());
        for (a, b) in rows.iter().zip(&back) {
            assert_eq!(a.kind, b.kind);
            assert_eq!((a.owner, a.layer, a.row), (b.owner, b.layer, b.row));
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.values), bits(&b.values));
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
