//! Detection metrics, ROC curves, tradeoff sweeps on synthetic streams, and
//! a diagonal online GMM used as a comparator.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{EngineConfig, ObservationBatch, ThinningEngine};
use crate::error::{Result, ThinError};
use crate::synth::{gen_synthetic, SyntheticConfig};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub p_d: f64,
    pub p_f: f64,
    /// `1 − P_D + P_F`.
    pub detection_error: f64,
    pub tau_used: f64,
}

fn class_counts(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(ThinError::DimensionMismatch {
            expected: labels.len(),
            actual: scores.len(),
            context: "scores vs labels",
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(ThinError::NonFinite("scores"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(ThinError::SingleClass);
    }
    Ok((pos, neg))
}

fn metrics(detected: usize, pos: usize, false_alarms: usize, neg: usize, tau: f64) -> DetectionMetrics {
    let p_d = detected as f64 / pos as f64;
    let p_f = false_alarms as f64 / neg as f64;
    DetectionMetrics {
        p_d,
        p_f,
        detection_error: 1.0 - p_d + p_f,
        tau_used: tau,
    }
}

/// Rates of anomalies (`true` labels) and inliers scored strictly above `tau`.
pub fn detection_rates(scores: &[f64], labels: &[bool], tau: f64) -> Result<DetectionMetrics> {
    let (pos, neg) = class_counts(scores, labels)?;
    let mut d = 0;
    let mut f = 0;
    for (&s, &l) in scores.iter().zip(labels) {
        if s > tau {
            if l {
                d += 1;
            } else {
                f += 1;
            }
        }
    }
    Ok(metrics(d, pos, f, neg, tau))
}

/// Distinct scores in ascending order with the anomaly and inlier counts at
/// each value.
fn grouped(scores: &[f64], labels: &[bool]) -> Vec<(f64, usize, usize)> {
    let mut pairs: Vec<(f64, bool)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, usize, usize)> = Vec::new();
    for (s, l) in pairs {
        match out.last_mut() {
            Some(last) if last.0 == s => {
                if l {
                    last.1 += 1;
                } else {
                    last.2 += 1;
                }
            }
            _ => out.push((s, usize::from(l), usize::from(!l))),
        }
    }
    out
}

/// Threshold minimizing `1 − P_D + P_F` over `−∞`, the midpoints between
/// consecutive distinct scores, and `+∞`. Ties go to the larger threshold.
pub fn best_threshold(scores: &[f64], labels: &[bool]) -> Result<(f64, DetectionMetrics)> {
    let (pos, neg) = class_counts(scores, labels)?;
    let groups = grouped(scores, labels);
    // Everything is above −∞.
    let mut above_pos = pos;
    let mut above_neg = neg;
    let mut best = metrics(above_pos, pos, above_neg, neg, f64::NEG_INFINITY);
    for (k, &(v, gp, gn)) in groups.iter().enumerate() {
        above_pos -= gp;
        above_neg -= gn;
        let tau = match groups.get(k + 1) {
            Some(&(next, _, _)) => {
                let mid = v + (next - v) / 2.0;
                if mid.is_finite() { mid } else { v }
            }
            None => f64::INFINITY,
        };
        let m = metrics(above_pos, pos, above_neg, neg, tau);
        if m.detection_error <= best.detection_error {
            best = m;
        }
    }
    Ok((best.tau_used, best))
}

/// ROC staircase as `(P_F, P_D)` points from `(0, 0)` to `(1, 1)`, one
/// point per distinct score.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = class_counts(scores, labels)?;
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(_, gp, gn) in grouped(scores, labels).iter().rev() {
        tp += gp;
        fp += gn;
        pts.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(pts)
}

/// Trapezoidal area under a ROC curve.
pub fn auc_of(curve: &[(f64, f64)]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    Ok(auc_of(&roc_curve(scores, labels)?))
}

/// Online diagonal-covariance GMM with exponentially forgotten sufficient
/// statistics.
#[derive(Clone, Debug)]
pub struct OnlineDiagGmm {
    weights: Vec<f64>,
    s1: Vec<DVector<f64>>,
    s2: Vec<DVector<f64>>,
    means: Vec<DVector<f64>>,
    vars: Vec<DVector<f64>>,
    alpha: f64,
    var_floor: f64,
}

impl OnlineDiagGmm {
    /// Fits `k` components to `training` (`p × n`) with a few batch EM
    /// passes from a seeded k-means++ start.
    pub fn fit(training: &DMatrix<f64>, k: usize, alpha: f64, seed: u64) -> Result<Self> {
        let (p, n) = training.shape();
        if k == 0 || n < k {
            return Err(ThinError::InvalidArgument(format!(
                "need k >= 1 and at least k training points (k = {k}, n = {n})"
            )));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(ThinError::InvalidArgument("alpha must lie in (0,1)".into()));
        }
        let global_var = training.column_variance();
        let var_floor = 1e-6 * global_var.mean().max(1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut centers = vec![training.column(rng.random_range(0..n)).into_owned()];
        while centers.len() < k {
            let d2: Vec<f64> = training
                .column_iter()
                .map(|c| centers.iter().map(|m| (c - m).norm_squared()).fold(f64::INFINITY, f64::min))
                .collect();
            let total: f64 = d2.iter().sum();
            let pick = if total > 0.0 {
                let mut u = rng.random::<f64>() * total;
                d2.iter().position(|&d| {
                    u -= d;
                    u <= 0.0
                }).unwrap_or(n - 1)
            } else {
                rng.random_range(0..n)
            };
            centers.push(training.column(pick).into_owned());
        }
        let mut model = Self {
            weights: vec![1.0 / k as f64; k],
            s1: vec![DVector::zeros(p); k],
            s2: vec![DVector::zeros(p); k],
            means: centers,
            vars: vec![global_var.map(|v| v.max(var_floor)); k],
            alpha,
            var_floor,
        };
        for _ in 0..20 {
            let resp = model.responsibilities(training);
            for j in 0..k {
                let nj: f64 = resp.row(j).sum();
                if nj < 1e-9 {
                    continue;
                }
                let mut m = DVector::zeros(p);
                let mut sq = DVector::zeros(p);
                for (i, c) in training.column_iter().enumerate() {
                    m.axpy(resp[(j, i)], &c, 1.0);
                    sq.axpy(resp[(j, i)], &c.component_mul(&c), 1.0);
                }
                m /= nj;
                sq /= nj;
                model.vars[j] = (sq - m.component_mul(&m)).map(|v| v.max(var_floor));
                model.means[j] = m;
                model.weights[j] = nj / n as f64;
            }
        }
        for j in 0..k {
            let w = model.weights[j];
            model.s1[j] = &model.means[j] * w;
            model.s2[j] = (&model.vars[j] + model.means[j].component_mul(&model.means[j])) * w;
        }
        Ok(model)
    }

    fn log_components(&self, x: &nalgebra::DVectorView<f64>) -> Vec<f64> {
        (0..self.weights.len())
            .map(|j| {
                let mut q = 0.0;
                let mut ld = 0.0;
                for ((xi, mi), vi) in x.iter().zip(self.means[j].iter()).zip(self.vars[j].iter()) {
                    q += (xi - mi).powi(2) / vi;
                    ld += vi.ln();
                }
                let w = self.weights[j].max(f64::MIN_POSITIVE);
                w.ln() - 0.5 * (x.len() as f64 * LN_2PI + ld + q)
            })
            .collect()
    }

    fn responsibilities(&self, data: &DMatrix<f64>) -> DMatrix<f64> {
        let k = self.weights.len();
        let mut out = DMatrix::zeros(k, data.ncols());
        for (i, c) in data.column_iter().enumerate() {
            let l = self.log_components(&c);
            let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = l.iter().map(|v| (v - m).exp()).sum();
            for j in 0..k {
                out[(j, i)] = (l[j] - m).exp() / z;
            }
        }
        out
    }

    /// Mixture negative log-likelihood of each column.
    pub fn score(&self, data: &DMatrix<f64>) -> Vec<f64> {
        data.column_iter()
            .map(|c| {
                let l = self.log_components(&c);
                let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                -(m + l.iter().map(|v| (v - m).exp()).sum::<f64>().ln())
            })
            .collect()
    }

    /// One forgetting step on a batch of observations.
    pub fn update(&mut self, batch: &DMatrix<f64>) {
        let n = batch.ncols() as f64;
        let resp = self.responsibilities(batch);
        let a = self.alpha;
        for j in 0..self.weights.len() {
            let mut m1 = DVector::zeros(batch.nrows());
            let mut m2 = DVector::zeros(batch.nrows());
            for (i, c) in batch.column_iter().enumerate() {
                m1.axpy(resp[(j, i)], &c, 1.0);
                m2.axpy(resp[(j, i)], &c.component_mul(&c), 1.0);
            }
            self.weights[j] = a * self.weights[j] + (1.0 - a) * resp.row(j).sum() / n;
            self.s1[j] = &self.s1[j] * a + m1 * ((1.0 - a) / n);
            self.s2[j] = &self.s2[j] * a + m2 * ((1.0 - a) / n);
            let w = self.weights[j];
            if w > 1e-12 {
                self.means[j] = &self.s1[j] / w;
                let floor = self.var_floor;
                self.vars[j] = (&self.s2[j] / w - self.means[j].component_mul(&self.means[j])).map(|v| v.max(floor));
            }
        }
    }
}

/// Scores a stream with the online diagonal GMM: each batch is scored by the
/// current model and then absorbed.
pub fn baseline_online_gmm(
    training: &DMatrix<f64>,
    stream: &DMatrix<f64>,
    k: usize,
    alpha: f64,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if batch_size == 0 {
        return Err(ThinError::InvalidArgument("batch size must be positive".into()));
    }
    let mut gmm = OnlineDiagGmm::fit(training, k, alpha, seed)?;
    let mut scores = Vec::with_capacity(stream.ncols());
    let mut start = 0;
    while start < stream.ncols() {
        let len = batch_size.min(stream.ncols() - start);
        let batch = stream.columns(start, len).into_owned();
        scores.extend(gmm.score(&batch));
        gmm.update(&batch);
        start += len;
    }
    Ok(scores)
}

/// Outcome of thinning one synthetic stream.
#[derive(Clone, Debug)]
pub struct SyntheticRun {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
    pub best: DetectionMetrics,
    pub auc: f64,
    pub wall_secs: f64,
    pub splits: u64,
    pub merges: u64,
    pub final_leaves: usize,
}

/// Generates a stream, trains on its leading block and thins the rest in
/// batches of `batch_size`.
pub fn run_synthetic(synth: &SyntheticConfig, engine: &EngineConfig, batch_size: usize) -> Result<SyntheticRun> {
    if batch_size == 0 {
        return Err(ThinError::InvalidArgument("batch size must be positive".into()));
    }
    let stream = gen_synthetic(synth)?;
    let test = stream.test_data();
    let labels = stream.test_labels().to_vec();
    let start = Instant::now();
    let (mut eng, _) = ThinningEngine::train(engine, &stream.training())?;
    let batches = (0..test.ncols()).step_by(batch_size).enumerate().map(|(t, s)| {
        let len = batch_size.min(test.ncols() - s);
        ObservationBatch::new(t as u64, test.columns(s, len).into_owned())
    });
    let mut scores = Vec::with_capacity(test.ncols());
    let mut splits = 0;
    let mut merges = 0;
    for b in batches {
        let out = eng.process_batch(&b?)?;
        for e in &out.events {
            match e {
                crate::tree::StructureEvent::Split { .. } => splits += 1,
                crate::tree::StructureEvent::Merge { .. } => merges += 1,
            }
        }
        scores.extend(out.scored.iter().map(|o| o.score));
    }
    let wall_secs = start.elapsed().as_secs_f64();
    let (_, best) = best_threshold(&scores, &labels)?;
    let auc = auc(&scores, &labels)?;
    Ok(SyntheticRun {
        scores,
        labels,
        best,
        auc,
        wall_secs,
        splits,
        merges,
        final_leaves: eng.tree().leaf_count(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepKind {
    Subsample,
    Batch,
}

impl std::str::FromStr for SweepKind {
    type Err = ThinError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "subsample" => Ok(SweepKind::Subsample),
            "batch" => Ok(SweepKind::Batch),
            other => Err(ThinError::InvalidArgument(format!("unknown sweep kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepBase {
    pub synth: SyntheticConfig,
    pub engine: EngineConfig,
    pub batch_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub delta: f64,
    /// Mean over seeds of the detection error at the best threshold.
    pub detection_error: f64,
    pub detection_error_sd: f64,
    pub auc: f64,
    pub wall_secs: f64,
}

/// Runs every `(grid value, δ)` cell over seeds `0..n_seeds`. The grid value
/// is the subsampling rate or the batch size, per `kind`.
pub fn tradeoff_sweep(
    kind: SweepKind,
    grid: &[f64],
    deltas: &[f64],
    base: &SweepBase,
    n_seeds: u64,
) -> Result<Vec<SweepRow>> {
    if n_seeds == 0 {
        return Err(ThinError::InvalidArgument("need at least one seed".into()));
    }
    let mut cells = Vec::new();
    for &delta in deltas {
        for &value in grid {
            for seed in 0..n_seeds {
                cells.push((value, delta, seed));
            }
        }
    }
    let runs: Vec<SyntheticRun> = cells
        .par_iter()
        .map(|&(value, delta, seed)| {
            let synth = SyntheticConfig {
                rotation_speed: delta,
                seed,
                ..base.synth.clone()
            };
            let mut engine = EngineConfig { seed, ..base.engine.clone() };
            let mut batch = base.batch_size;
            match kind {
                SweepKind::Subsample => engine.subsample_rate = value,
                SweepKind::Batch => {
                    if !(value >= 1.0 && value.fract() == 0.0) {
                        return Err(ThinError::InvalidArgument(format!("invalid batch size {value}")));
                    }
                    batch = value as usize;
                }
            }
            run_synthetic(&synth, &engine, batch)
        })
        .collect::<Result<_>>()?;

    let n = n_seeds as usize;
    Ok(cells
        .chunks(n)
        .zip(runs.chunks(n))
        .map(|(c, r)| {
            let errs: Vec<f64> = r.iter().map(|x| x.best.detection_error).collect();
            let mean = errs.iter().sum::<f64>() / n as f64;
            let sd = if n > 1 {
                (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            SweepRow {
                value: c[0].0,
                delta: c[0].1,
                detection_error: mean,
                detection_error_sd: sd,
                auc: r.iter().map(|x| x.auc).sum::<f64>() / n as f64,
                wall_secs: r.iter().map(|x| x.wall_secs).sum::<f64>() / n as f64,
            }
        })
        .collect())
}

pub fn write_sweep_csv(mut w: impl std::io::Write, kind: SweepKind, rows: &[SweepRow]) -> Result<()> {
    let name = match kind {
        SweepKind::Subsample => "subsample_rate",
        SweepKind::Batch => "batch_size",
    };
    writeln!(w, "{name},delta,detection_error,detection_error_sd,auc,wall_secs")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.value, r.delta, r.detection_error, r.detection_error_sd, r.auc, r.wall_secs
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
