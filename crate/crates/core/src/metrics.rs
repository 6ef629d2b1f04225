//! Score bookkeeping and the continual-learning evaluation metrics.
//!
//! The score matrix is lower-triangular: `S[t][τ]` is the accuracy (in
//! percent) on task τ's test set after training through task t. Average
//! accuracy is the mean of row t; forgetting is the mean over earlier tasks
//! of the maximum historical drop.

use crate::error::{Error, Result};
use std::io::BufRead;
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ScoreMatrix {
    rows: Vec<Vec<f64>>,
}

impl ScoreMatrix {
    pub fn new() -> Self {
        ScoreMatrix { rows: Vec::new() }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = ScoreMatrix::new();
        for row in rows {
            m.push_row(row)?;
        }
        Ok(m)
    }

    /// Appends the evaluation row after training task `rows.len()`; row t
    /// must hold exactly t+1 entries in `[0, 100]`.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::Data(format!(
                "score row {} must have {} entries, got {}",
                self.rows.len(),
                self.rows.len() + 1,
                row.len()
            )));
        }
        if row.iter().any(|v| !(0.0..=100.0).contains(v)) {
            return Err(Error::Data("scores must lie in [0, 100]".into()));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, after_task: usize, eval_task: usize) -> f64 {
        self.rows[after_task][eval_task]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Average accuracy after task `t` (0-based): mean of row t.
    pub fn avg_accuracy(&self, t: usize) -> Result<f64> {
        let row = self.rows.get(t).ok_or_else(|| {
            Error::Data(format!("row {t} not recorded yet"))
        })?;
        let mut sum = 0.0;
        for &v in row {
            sum += v;
        }
        Ok(sum / row.len() as f64)
    }

    /// Forgetting after task `t` (0-based): mean over τ < t of
    /// `max_{τ' ∈ [τ, t-1]} S[τ'][τ] − S[t][τ]`. Undefined for the first
    /// task, reported as `None`.
    pub fn forgetting(&self, t: usize) -> Option<f64> {
        if t == 0 || t >= self.rows.len() {
            return None;
        }
        let mut sum = 0.0;
        for tau in 0..t {
            let mut max_seen = f64::NEG_INFINITY;
            for hist in tau..t {
                max_seen = max_seen.max(self.rows[hist][tau]);
            }
            sum += max_seen - self.rows[t][tau];
        }
        Some(sum / t as f64)
    }

    /// Final-row metrics: (average accuracy, forgetting).
    pub fn final_metrics(&self) -> Result<(f64, Option<f64>)> {
        if self.rows.is_empty() {
            return Err(Error::Data("empty score matrix".into()));
        }
        let t = self.rows.len() - 1;
        Ok((self.avg_accuracy(t)?, self.forgetting(t)))
    }

    /// Structured text artifact. Scores print in shortest round-trip form,
    /// so identical runs produce byte-identical files.
    pub fn to_text(&self, seed: u64, mode: &str) -> String {
        let mut out = String::new();
        out.push_str("# score-matrix v1\n");
        out.push_str(&format!(
            "# tasks={} seed={seed} mode={mode}\n",
            self.rows.len()
        ));
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            out.push_str(&cells.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn write_text(&self, path: &Path, seed: u64, mode: &str) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_text(seed, mode))?;
        Ok(())
    }

    pub fn read_text(path: &Path) -> Result<(Self, u64, String)> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut seed = 0u64;
        let mut mode = String::new();
        let mut matrix = ScoreMatrix::new();
        for line in f.lines() {
            let line = line?;
            if let Some(rest) = line.strip_prefix("# tasks=") {
                for field in rest.split_whitespace() {
                    if let Some(v) = field.strip_prefix("seed=") {
                        seed = v
                            .parse()
                            .map_err(|_| Error::Data(format!("bad seed in {line}")))?;
                    } else if let Some(v) = field.strip_prefix("mode=") {
                        mode = v.to_string();
                    }
                }
                continue;
            }
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let row = line
                .split_whitespace()
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|_| Error::Data(format!("bad score: {s}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            matrix.push_row(row)?;
        }
        Ok((matrix, seed, mode))
    }
}

/// Percentage of positions where predicted and true task ids agree.
pub fn matching_accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::Data(format!(
            "matching lists differ in length: {} vs {}",
            predicted.len(),
            truth.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::Data("matching lists are empty".into()));
    }
    let correct = predicted
        .iter()
        .zip(truth)
        .filter(|(a, b)| a == b)
        .count();
    Ok(100.0 * correct as f64 / predicted.len() as f64)
}

/// Mean and (population) standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn brute_force_avg(rows: &[Vec<f64>], t: usize) -> f64 {
        let mut s = 0.0;
        for tau in 0..=t {
            s += rows[t][tau];
        }
        s / (t + 1) as f64
    }

    fn brute_force_forgetting(rows: &[Vec<f64>], t: usize) -> f64 {
        let mut total = 0.0;
        for tau in 0..t {
            let mut best_drop = f64::NEG_INFINITY;
            for hist in tau..t {
                let drop = rows[hist][tau] - rows[t][tau];
                if drop > best_drop {
                    best_drop = drop;
                }
            }
            total += best_drop;
        }
        total / t as f64
    }

    #[test]
    fn avg_accuracy_hand_cases() {
        let m = ScoreMatrix::from_rows(vec![vec![80.0], vec![80.0, 80.0]]).unwrap();
        assert_eq!(m.avg_accuracy(1).unwrap(), 80.0);
        let m = ScoreMatrix::from_rows(vec![vec![100.0], vec![100.0, 60.0]]).unwrap();
        assert_eq!(m.avg_accuracy(1).unwrap(), 80.0);
        assert!(m.avg_accuracy(5).is_err());
    }

    #[test]
    fn forgetting_hand_cases() {
        let m = ScoreMatrix::from_rows(vec![vec![70.0], vec![70.0, 70.0]]).unwrap();
        assert_eq!(m.forgetting(1).unwrap(), 0.0);
        // S[0][0]=90, S[1][0]=70 → F = 20 regardless of S[1][1].
        let m = ScoreMatrix::from_rows(vec![vec![90.0], vec![70.0, 85.0]]).unwrap();
        assert_eq!(m.forgetting(1).unwrap(), 20.0);
        assert!(m.forgetting(0).is_none());
    }

    #[test]
    fn backward_transfer_gives_negative_forgetting() {
        let m = ScoreMatrix::from_rows(vec![vec![50.0], vec![60.0, 90.0]]).unwrap();
        assert_eq!(m.forgetting(1).unwrap(), -10.0);
    }

    #[test]
    fn metrics_match_brute_force_on_1000_random_matrices() {
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        for _ in 0..1000 {
            let t_max = rng.gen_range(1..6usize);
            let rows: Vec<Vec<f64>> = (0..=t_max)
                .map(|t| (0..=t).map(|_| rng.gen_range(0.0..100.0)).collect())
                .collect();
            let m = ScoreMatrix::from_rows(rows.clone()).unwrap();
            for t in 0..=t_max {
                assert_eq!(m.avg_accuracy(t).unwrap(), brute_force_avg(&rows, t));
                if t >= 1 {
                    assert_eq!(m.forgetting(t).unwrap(), brute_force_forgetting(&rows, t));
                }
            }
        }
    }

    #[test]
    fn matching_accuracy_cases() {
        assert_eq!(matching_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 100.0);
        assert_eq!(matching_accuracy(&[0, 0, 0], &[1, 2, 3]).unwrap(), 0.0);
        let pred: Vec<usize> = (0..1000).map(|i| usize::from(i >= 558)).collect();
        let truth = vec![0usize; 1000];
        assert_eq!(matching_accuracy(&pred, &truth).unwrap(), 55.8);
        assert!(matching_accuracy(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn text_round_trip() {
        let m = ScoreMatrix::from_rows(vec![vec![95.5], vec![90.25, 88.0]]).unwrap();
        let dir = std::env::temp_dir().join(format!("scorem-{}", std::process::id()));
        let path = dir.join("scores.txt");
        m.write_text(&path, 42, "dualprompt").unwrap();
        let (back, seed, mode) = ScoreMatrix::read_text(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(seed, 42);
        assert_eq!(mode, "dualprompt");
        std::fs::remove_dir_all(&dir).ok();
    }

    proptest! {
        /// Average accuracy is permutation-equivariant over row entries, and
        /// forgetting is non-negative whenever no score beats its history.
        #[test]
        fn avg_accuracy_permutation_invariant(mut row in proptest::collection::vec(0.0f64..100.0, 1..8)) {
            let t = row.len() - 1;
            let mut rows: Vec<Vec<f64>> = (0..t).map(|k| vec![50.0; k + 1]).collect();
            rows.push(row.clone());
            let m = ScoreMatrix::from_rows(rows.clone()).unwrap();
            let a = m.avg_accuracy(t).unwrap();
            row.reverse();
            rows[t] = row;
            let m2 = ScoreMatrix::from_rows(rows).unwrap();
            prop_assert!((a - m2.avg_accuracy(t).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn forgetting_sign_behavior(decays in proptest::collection::vec(0.0f64..30.0, 2..5)) {
            // Monotonically decaying scores: forgetting ≥ 0.
            let t_max = decays.len();
            let mut rows: Vec<Vec<f64>> = Vec::new();
            for t in 0..=t_max {
                let mut row = Vec::new();
                for tau in 0..=t {
                    let age = (t - tau) as f64;
                    let decay = decays.get(tau).copied().unwrap_or(0.0);
                    row.push((90.0 - decay * age).max(0.0));
                }
                rows.push(row);
            }
            let m = ScoreMatrix::from_rows(rows).unwrap();
            for t in 1..=t_max {
                prop_assert!(m.forgetting(t).unwrap() >= -1e-12);
            }
        }
    }
}
