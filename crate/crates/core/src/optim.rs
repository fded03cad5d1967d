//! Adam with cosine learning-rate decay after a linear warm-up, plus the
//! shared training-loop pieces (CSV loss log, gradient accumulation).

use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 16,
            lr: 2e-3,
            warmup_steps: 50,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Learning rate at 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let t = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.lr * 0.5 * (1.0 + (PI * t).cos())
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, params: &ParamStore) -> Self {
        let zeros = |t: &Tensor| vec![0.0; t.len()];
        Adam {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: 0,
            m: params.tensors().iter().map(zeros).collect(),
            v: params.tensors().iter().map(zeros).collect(),
        }
    }

    /// Applies one update; `grads[i]` pairs with parameter `i`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = &grads[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                *w -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
            }
        }
    }
}

/// Per-step training log, rendered as CSV.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<f64>>,
}

impl TrainLog {
    pub fn new(columns: &[&'static str]) -> Self {
        TrainLog {
            columns: columns.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Vec<f64> {
        let c = self
            .columns
            .iter()
            .position(|n| *n == name)
            .expect("known column");
        self.rows.iter().map(|r| r[c]).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.columns.join(",");
        s.push('\n');
        for r in &self.rows {
            let cells: Vec<String> = r
                .iter()
                .zip(&self.columns)
                .map(|(v, c)| {
                    if *c == "step" {
                        format!("{}", *v as u64)
                    } else {
                        format!("{v}")
                    }
                })
                .collect();
            let _ = writeln!(s, "{}", cells.join(","));
        }
        s
    }

    /// Loss is lower at the end of each full `window` than at its start,
    /// using window means at both ends to smooth batch noise.
    pub fn decreases_over(&self, column: &str, window: usize) -> bool {
        let l = self.column(column);
        if l.len() < window {
            return true;
        }
        let k = (window / 10).max(1);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        l.windows(window)
            .step_by(window)
            .all(|w| mean(&w[w.len() - k..]) < mean(&w[..k]))
    }
}

/// Sums per-sample gradients in a fixed order.
pub fn accumulate(total: &mut [Vec<f64>], part: &[Tensor]) {
    for (t, p) in total.iter_mut().zip(part) {
        for (a, b) in t.iter_mut().zip(p.data()) {
            *a += b;
        }
    }
}

pub fn zero_grads(params: &ParamStore) -> Vec<Vec<f64>> {
    params
        .tensors()
        .iter()
        .map(|t| vec![0.0; t.len()])
        .collect()
}

pub fn check_loss(loss: f64, step: usize, batch: &[u64]) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Diverged {
            step,
            batch: batch.to_vec(),
        });
    }
    Ok(())
}
