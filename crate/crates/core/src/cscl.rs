//! Cross-sample contrastive learning over task-grouped degradation features.
//! Each task's features are concatenated into one row; a within-task shuffle
//! of the batch gives the matching positive row.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::BatchPlan;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenominatorMode {
    /// Negatives only.
    Literal,
    /// Negatives plus the positive.
    Infonce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsclConfig {
    pub tau: f64,
    pub denominator_mode: DenominatorMode,
}

impl Default for CsclConfig {
    fn default() -> Self {
        CsclConfig {
            tau: 0.1,
            denominator_mode: DenominatorMode::Literal,
        }
    }
}

impl CsclConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Features of a task-major batch as `[N_t, N_s, F]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskGroupedFeatures(pub Tensor);

impl TaskGroupedFeatures {
    pub fn n_tasks(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn n_samples(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn feature_len(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn row(&self, task: usize, sample: usize) -> &[f64] {
        let f = self.feature_len();
        let start = (task * self.n_samples() + sample) * f;
        &self.0.data()[start..start + f]
    }

    /// Back to `[N_t·N_s, F]`.
    pub fn flatten(&self) -> Tensor {
        Tensor::from_parts(
            vec![self.n_tasks() * self.n_samples(), self.feature_len()],
            self.0.data().to_vec(),
        )
    }
}

pub fn group_by_task(flat: &Tensor, plan: BatchPlan) -> Result<TaskGroupedFeatures> {
    if flat.shape().len() != 2 || flat.shape()[0] != plan.batch_size() {
        return Err(Error::Shape(format!(
            "batch {:?} does not match plan {}x{}",
            flat.shape(),
            plan.n_tasks,
            plan.samples_per_task
        )));
    }
    let f = flat.shape()[1];
    Ok(TaskGroupedFeatures(Tensor::from_parts(
        vec![plan.n_tasks, plan.samples_per_task, f],
        flat.data().to_vec(),
    )))
}

/// Batch-row permutation that shuffles samples independently inside each
/// task block: row `i` of the shuffled batch is row `perm[i]` of the input.
pub fn within_task_permutation<R: Rng>(plan: BatchPlan, rng: &mut R) -> Vec<usize> {
    let ns = plan.samples_per_task;
    let mut perm = Vec::with_capacity(plan.batch_size());
    for t in 0..plan.n_tasks {
        let mut p: Vec<usize> = (t * ns..(t + 1) * ns).collect();
        p.shuffle(rng);
        perm.extend(p);
    }
    perm
}

pub fn shuffle_within_task<R: Rng>(
    grouped: &TaskGroupedFeatures,
    rng: &mut R,
) -> TaskGroupedFeatures {
    let plan = BatchPlan {
        n_tasks: grouped.n_tasks(),
        samples_per_task: grouped.n_samples(),
    };
    let perm = within_task_permutation(plan, rng);
    let f = grouped.feature_len();
    let mut data = Vec::with_capacity(grouped.0.numel());
    for &src in &perm {
        data.extend_from_slice(&grouped.0.data()[src * f..(src + 1) * f]);
    }
    TaskGroupedFeatures(Tensor::from_parts(grouped.0.shape().to_vec(), data))
}

/// One row per task: its samples' features concatenated, `[N_t, N_s·F]`.
pub fn aggregate(grouped: &TaskGroupedFeatures) -> Tensor {
    let (nt, m) = (
        grouped.n_tasks(),
        grouped.n_samples() * grouped.feature_len(),
    );
    Tensor::from_parts(vec![nt, m], grouped.0.data().to_vec())
}

fn check_pair(fg: &Tensor, fs: &Tensor) -> Result<()> {
    if fg.shape().len() != 2 || fg.shape() != fs.shape() {
        return Err(Error::Shape(format!(
            "CSCL inputs {:?} and {:?}",
            fg.shape(),
            fs.shape()
        )));
    }
    if fg.shape()[0] < 2 {
        return Err(Error::Config(format!(
            "CSCL needs at least 2 tasks, got {}",
            fg.shape()[0]
        )));
    }
    for (name, t) in [("F_g", fg), ("F_s", fs)] {
        let m = t.shape()[1];
        for (i, r) in t.data().chunks(m).enumerate() {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(n > NORM_EPS) {
                return Err(Error::Numeric(format!(
                    "{name} row {i} has zero or non-finite norm"
                )));
            }
        }
    }
    Ok(())
}

fn normalize_rows(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let m = t.shape()[1];
    let norms: Vec<f64> = t
        .data()
        .chunks(m)
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS))
        .collect();
    let mut u = t.data().to_vec();
    for (r, n) in u.chunks_mut(m).zip(&norms) {
        r.iter_mut().for_each(|v| *v /= n);
    }
    (u, norms)
}

/// Loss and `dL/ds` for the scaled similarity matrix `s` (`N × N`).
fn loss_and_dsim(s: &[f64], n: usize, mode: DenominatorMode) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut ds = vec![0.0; n * n];
    for i in 0..n {
        let row = &s[i * n..(i + 1) * n];
        let included = |j: usize| j != i || mode == DenominatorMode::Infonce;
        let m = (0..n)
            .filter(|&j| included(j))
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..n)
            .filter(|&j| included(j))
            .map(|j| (row[j] - m).exp())
            .sum();
        let log_z = m + z.ln();
        loss -= row[i] - log_z;
        for j in (0..n).filter(|&j| included(j)) {
            ds[i * n + j] += (row[j] - log_z).exp() / n as f64;
        }
        ds[i * n + i] -= 1.0 / n as f64;
    }
    (loss / n as f64, ds)
}

fn similarities(u: &[f64], v: &[f64], n: usize, m: usize, tau: f64) -> Vec<f64> {
    let mut s = vec![0.0; n * n];
    crate::tensor::gemm(n, m, n, 1.0 / tau, u, false, v, true, 0.0, &mut s);
    s
}

/// `−(1/N) Σ_i log(exp(s_ii) / Z_i)` with `s_ij = cos(F_g[i], F_s[j]) / τ`.
pub fn cscl_loss(fg: &Tensor, fs: &Tensor, cfg: &CsclConfig) -> Result<f64> {
    cfg.validate()?;
    check_pair(fg, fs)?;
    let (n, m) = fg.dims2();
    let (u, _) = normalize_rows(fg);
    let (v, _) = normalize_rows(fs);
    Ok(loss_and_dsim(
        &similarities(&u, &v, n, m, cfg.tau),
        n,
        cfg.denominator_mode,
    )
    .0)
}

/// Recorded loss with gradients to both `F_g` and `F_s`.
pub fn cscl_loss_op(g: &Graph, fg: Var, fs: Var, cfg: &CsclConfig) -> Result<Var> {
    cfg.validate()?;
    let (fgv, fsv) = (g.value(fg), g.value(fs));
    check_pair(&fgv, &fsv)?;
    let (n, m) = fgv.dims2();
    let (u, nu) = normalize_rows(&fgv);
    let (v, nv) = normalize_rows(&fsv);
    let (loss, ds) = loss_and_dsim(
        &similarities(&u, &v, n, m, cfg.tau),
        n,
        cfg.denominator_mode,
    );
    let tau = cfg.tau;
    Ok(g.op(&[fg, fs], Tensor::scalar(loss), move |grad, _, _| {
        let scale = grad.item() / tau;
        let mut du = vec![0.0; n * m];
        let mut dv = vec![0.0; n * m];
        crate::tensor::gemm(n, n, m, scale, &ds, false, &v, false, 0.0, &mut du);
        crate::tensor::gemm(n, n, m, scale, &ds, true, &u, false, 0.0, &mut dv);
        // through x / ‖x‖
        let back = |d: &mut [f64], unit: &[f64], norms: &[f64]| {
            for ((dr, ur), nr) in d.chunks_mut(m).zip(unit.chunks(m)).zip(norms) {
                let dot: f64 = dr.iter().zip(ur).map(|(a, b)| a * b).sum();
                dr.iter_mut()
                    .zip(ur)
                    .for_each(|(dv, uv)| *dv = (*dv - uv * dot) / nr);
            }
        };
        back(&mut du, &u, &nu);
        back(&mut dv, &v, &nv);
        vec![
            Some(Tensor::from_parts(vec![n, m], du)),
            Some(Tensor::from_parts(vec![n, m], dv)),
        ]
    }))
}
