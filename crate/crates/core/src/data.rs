//! Task-sequence construction: synthetic split benchmarks, class-based
//! splitting of user datasets, and a raw-tensor loader.
//!
//! Class sets are pairwise disjoint across tasks, and upstream pretraining
//! classes never intersect downstream ones. Generation is a pure function of
//! (spec, seed). A per-task read counter backs the rehearsal-free audit: the
//! engine obtains training samples only through [`TaskSequence::train_batch`],
//! which counts every sample handed out.

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::cell::RefCell;
use std::collections::BTreeSet;
use std::io::Read;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input: Vec<f64>,
    /// Global class id for downstream tasks; local id for upstream data.
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct TaskData {
    pub classes: Vec<usize>,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Pretraining data with labels remapped to `0..classes.len()`; `classes`
/// records the original global ids for the disjointness guarantee.
#[derive(Clone, Debug, Default)]
pub struct UpstreamData {
    pub classes: Vec<usize>,
    pub samples: Vec<Sample>,
}

#[derive(Debug)]
pub struct TaskSequence {
    pub input_shape: Vec<usize>,
    pub tasks: Vec<TaskData>,
    pub upstream: UpstreamData,
    train_reads: RefCell<Vec<u64>>,
}

impl TaskSequence {
    pub fn new(input_shape: Vec<usize>, tasks: Vec<TaskData>, upstream: UpstreamData) -> Result<Self> {
        let seq = TaskSequence {
            train_reads: RefCell::new(vec![0; tasks.len()]),
            input_shape,
            tasks,
            upstream,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen: BTreeSet<usize> = BTreeSet::new();
        for (t, task) in self.tasks.iter().enumerate() {
            for &c in &task.classes {
                if !seen.insert(c) {
                    return Err(Error::Data(format!(
                        "class {c} of task {t} already belongs to an earlier task"
                    )));
                }
            }
        }
        for &c in &self.upstream.classes {
            if seen.contains(&c) {
                return Err(Error::Data(format!(
                    "upstream class {c} collides with a downstream task"
                )));
            }
        }
        let n = self.input_shape.iter().product::<usize>();
        for task in &self.tasks {
            for s in task.train.iter().chain(&task.val).chain(&task.test) {
                if s.input.len() != n {
                    return Err(Error::Data(format!(
                        "sample has {} elements, expected {n}",
                        s.input.len()
                    )));
                }
                if !task.classes.contains(&s.label) {
                    return Err(Error::Data(format!(
                        "sample label {} outside its task's class set",
                        s.label
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn train_len(&self, task: usize) -> usize {
        self.tasks[task].train.len()
    }

    /// Training samples by index; every sample handed out is counted
    /// against `task` in the rehearsal audit.
    pub fn train_batch(&self, task: usize, indices: &[usize]) -> Vec<&Sample> {
        self.train_reads.borrow_mut()[task] += indices.len() as u64;
        indices.iter().map(|&i| &self.tasks[task].train[i]).collect()
    }

    pub fn val_samples(&self, task: usize) -> &[Sample] {
        &self.tasks[task].val
    }

    pub fn test_samples(&self, task: usize) -> &[Sample] {
        &self.tasks[task].test
    }

    /// Per-task count of training samples read so far.
    pub fn train_read_counts(&self) -> Vec<u64> {
        self.train_reads.borrow().clone()
    }
}

// ── synthetic benchmark ─────────────────────────────────────────────

/// Generator for the synthetic split benchmark. Every class gets a random
/// prototype pattern plus `num_styles` intra-class style patterns;
/// `diversity` scales the style mixing and `noise` the per-pixel jitter.
/// `domain_shift` adds one shared pattern to every downstream sample (absent
/// upstream), so the shared prompt has genuine task-invariant signal to
/// capture.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub val_fraction: f64,
    pub grid: usize,
    pub noise: f64,
    pub diversity: f64,
    pub num_styles: usize,
    pub domain_shift: f64,
    pub upstream_classes: usize,
    pub upstream_per_class: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_tasks: 5,
            classes_per_task: 4,
            train_per_class: 200,
            test_per_class: 50,
            val_fraction: 0.2,
            grid: 8,
            noise: 0.35,
            diversity: 0.8,
            num_styles: 3,
            domain_shift: 0.6,
            upstream_classes: 8,
            upstream_per_class: 100,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_tasks == 0 || self.classes_per_task == 0 {
            return Err(Error::Data("need at least one task and one class".into()));
        }
        if self.train_per_class == 0 || self.grid == 0 {
            return Err(Error::Data("train_per_class and grid must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Data(format!(
                "val_fraction {} outside [0, 1)",
                self.val_fraction
            )));
        }
        if self.num_styles == 0 {
            return Err(Error::Data("need at least one style pattern".into()));
        }
        Ok(())
    }
}

fn normal(rng: &mut ChaCha12Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0f64);
    let u2: f64 = rng.gen_range(0.0..1.0f64);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn pattern(rng: &mut ChaCha12Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Deterministically builds the synthetic task sequence from (spec, seed).
pub fn make_synthetic_sequence(spec: &SyntheticSpec, seed: u64) -> Result<TaskSequence> {
    spec.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let n = spec.grid * spec.grid;
    let shift = pattern(&mut rng, n);

    let total_classes = spec.num_tasks * spec.classes_per_task + spec.upstream_classes;
    struct ClassGen {
        prototype: Vec<f64>,
        styles: Vec<Vec<f64>>,
    }
    let generators: Vec<ClassGen> = (0..total_classes)
        .map(|_| ClassGen {
            prototype: pattern(&mut rng, n),
            styles: (0..spec.num_styles).map(|_| pattern(&mut rng, n)).collect(),
        })
        .collect();

    let draw = |class: usize, downstream: bool, rng: &mut ChaCha12Rng| -> Vec<f64> {
        let g = &generators[class];
        let style = &g.styles[rng.gen_range(0..g.styles.len())];
        let mut x = Vec::with_capacity(n);
        for i in 0..n {
            let mut v = g.prototype[i] + spec.diversity * style[i] + spec.noise * normal(rng);
            if downstream {
                v += spec.domain_shift * shift[i];
            }
            x.push(v);
        }
        x
    };

    let n_val = ((spec.train_per_class as f64) * spec.val_fraction).round() as usize;
    let n_train = spec.train_per_class - n_val;

    let mut tasks = Vec::with_capacity(spec.num_tasks);
    for t in 0..spec.num_tasks {
        let classes: Vec<usize> =
            (t * spec.classes_per_task..(t + 1) * spec.classes_per_task).collect();
        let mut train = Vec::new();
        let mut val = Vec::new();
        let mut test = Vec::new();
        for &c in &classes {
            for i in 0..spec.train_per_class {
                let s = Sample {
                    input: draw(c, true, &mut rng),
                    label: c,
                };
                if i < n_train {
                    train.push(s);
                } else {
                    val.push(s);
                }
            }
            for _ in 0..spec.test_per_class {
                test.push(Sample {
                    input: draw(c, true, &mut rng),
                    label: c,
                });
            }
        }
        tasks.push(TaskData {
            classes,
            train,
            val,
            test,
        });
    }

    let first_upstream = spec.num_tasks * spec.classes_per_task;
    let mut upstream = UpstreamData {
        classes: (first_upstream..first_upstream + spec.upstream_classes).collect(),
        samples: Vec::new(),
    };
    for local in 0..spec.upstream_classes {
        let c = first_upstream + local;
        for _ in 0..spec.upstream_per_class {
            upstream.samples.push(Sample {
                input: draw(c, false, &mut rng),
                label: local,
            });
        }
    }

    TaskSequence::new(vec![spec.grid, spec.grid], tasks, upstream)
}

// ── class-based splitting of a labeled dataset ──────────────────────

/// A flat labeled dataset with per-split sample lists, as loaded from a
/// raw-tensor manifest.
#[derive(Clone, Debug)]
pub struct RawDataset {
    pub sample_shape: Vec<usize>,
    pub num_classes: usize,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Randomly partitions the dataset's classes into `num_tasks` disjoint
/// groups (remainder spread over the first groups) and carries each class's
/// train/val/test samples into its task.
pub fn split_by_class(dataset: &RawDataset, num_tasks: usize, seed: u64) -> Result<TaskSequence> {
    if num_tasks == 0 {
        return Err(Error::Data("need at least one task".into()));
    }
    if dataset.num_classes < num_tasks {
        return Err(Error::Data(format!(
            "{} classes cannot fill {num_tasks} tasks",
            dataset.num_classes
        )));
    }
    let mut classes: Vec<usize> = (0..dataset.num_classes).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    classes.shuffle(&mut rng);

    let base = dataset.num_classes / num_tasks;
    let remainder = dataset.num_classes % num_tasks;
    let mut tasks = Vec::with_capacity(num_tasks);
    let mut cursor = 0;
    for t in 0..num_tasks {
        let take = base + usize::from(t < remainder);
        let mut group: Vec<usize> = classes[cursor..cursor + take].to_vec();
        cursor += take;
        group.sort_unstable();
        let member = |s: &&Sample| group.contains(&s.label);
        tasks.push(TaskData {
            train: dataset.train.iter().filter(member).cloned().collect(),
            val: dataset.val.iter().filter(member).cloned().collect(),
            test: dataset.test.iter().filter(member).cloned().collect(),
            classes: group,
        });
    }
    TaskSequence::new(dataset.sample_shape.clone(), tasks, UpstreamData::default())
}

// ── raw-tensor dataset container ────────────────────────────────────

/// Manifest schema for raw-tensor datasets. The payload file holds, at the
/// listed byte offsets, each split's samples (`count × numel` f64
/// little-endian) and labels (`count` u32 little-endian).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawManifest {
    pub version: u32,
    pub sample_shape: Vec<usize>,
    pub num_classes: usize,
    pub payload: String,
    pub payload_sha256: String,
    pub train: RawSplit,
    pub val: RawSplit,
    pub test: RawSplit,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSplit {
    pub sample_offset: u64,
    pub label_offset: u64,
    pub count: u64,
}

pub fn load_raw_tensor_dataset(manifest_path: &Path) -> Result<RawDataset> {
    let text = std::fs::read_to_string(manifest_path)?;
    let manifest: RawManifest =
        toml::from_str(&text).map_err(|e| Error::Data(format!("bad manifest: {e}")))?;
    if manifest.version != 1 {
        return Err(Error::Data(format!(
            "unsupported manifest version {}",
            manifest.version
        )));
    }
    let payload_path = manifest_path
        .parent()
        .unwrap_or(Path::new("."))
        .join(&manifest.payload);
    let mut payload = Vec::new();
    std::fs::File::open(&payload_path)?.read_to_end(&mut payload)?;
    let digest = Sha256::digest(&payload);
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    if hex != manifest.payload_sha256 {
        return Err(Error::Data(format!(
            "payload checksum mismatch for {}",
            payload_path.display()
        )));
    }

    let numel: usize = manifest.sample_shape.iter().product();
    let read_split = |split: &RawSplit| -> Result<Vec<Sample>> {
        let count = split.count as usize;
        let sample_bytes = count * numel * 8;
        let label_bytes = count * 4;
        let s0 = split.sample_offset as usize;
        let l0 = split.label_offset as usize;
        if s0 + sample_bytes > payload.len() || l0 + label_bytes > payload.len() {
            return Err(Error::Data("payload truncated".into()));
        }
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let base = s0 + i * numel * 8;
            let input = payload[base..base + numel * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let lb = l0 + i * 4;
            let label =
                u32::from_le_bytes(payload[lb..lb + 4].try_into().unwrap()) as usize;
            if label >= manifest.num_classes {
                return Err(Error::Data(format!(
                    "label {label} exceeds declared class count {}",
                    manifest.num_classes
                )));
            }
            out.push(Sample { input, label });
        }
        Ok(out)
    };

    Ok(RawDataset {
        sample_shape: manifest.sample_shape.clone(),
        num_classes: manifest.num_classes,
        train: read_split(&manifest.train)?,
        val: read_split(&manifest.val)?,
        test: read_split(&manifest.test)?,
    })
}

/// Writes a dataset as manifest + payload into `dir`; returns the manifest
/// path. Inverse of [`load_raw_tensor_dataset`], bit-exact.
pub fn save_raw_tensor_dataset(dataset: &RawDataset, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let numel: usize = dataset.sample_shape.iter().product();
    let mut payload = Vec::new();
    let mut place = |samples: &[Sample]| -> Result<RawSplit> {
        let sample_offset = payload.len() as u64;
        for s in samples {
            if s.input.len() != numel {
                return Err(Error::Data("sample shape mismatch while saving".into()));
            }
            for v in &s.input {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let label_offset = payload.len() as u64;
        for s in samples {
            payload.extend_from_slice(&(s.label as u32).to_le_bytes());
        }
        Ok(RawSplit {
            sample_offset,
            label_offset,
            count: samples.len() as u64,
        })
    };
    let train = place(&dataset.train)?;
    let val = place(&dataset.val)?;
    let test = place(&dataset.test)?;
    let digest = Sha256::digest(&payload);
    let manifest = RawManifest {
        version: 1,
        sample_shape: dataset.sample_shape.clone(),
        num_classes: dataset.num_classes,
        payload: "payload.bin".to_string(),
        payload_sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
        train,
        val,
        test,
    };
    std::fs::write(dir.join("payload.bin"), &payload)?;
    let manifest_path = dir.join("manifest.toml");
    std::fs::write(
        &manifest_path,
        toml::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(manifest_path)
}

/// CSV label listing (`split,index,label`) for external inspection.
pub fn export_labels_csv(seq: &TaskSequence, path: &Path) -> Result<()> {
    use std::io::Write;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "task,split,index,label")?;
    for (t, task) in seq.tasks.iter().enumerate() {
        for (split, samples) in [
            ("train", &task.train),
            ("val", &task.val),
            ("test", &task.test),
        ] {
            for (i, s) in samples.iter().enumerate() {
                writeln!(f, "{t},{split},{i},{}", s.label)?;
            }
        }
    }
    Ok(())
}
