//! Joint training: reconstruction, contrastive and codebook losses, AdamW
//! with a cosine schedule, and dead-code re-seeding.

use std::f64::consts::PI;

use log::{debug, info};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, GroupMask, ParamGroup, ParamId, ParamStore, Var};
use crate::cscl::{cscl_loss_op, within_task_permutation, CsclConfig};
use crate::daam::codebook_losses_op;
use crate::data::{augment, stack_images, BalancedBatches, BatchPlan, SamplePair, Task};
use crate::error::{Error, Result};
use crate::model::{Model, Variant};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Reconstruction weight.
    pub alpha: f64,
    /// Contrastive weight.
    pub beta: f64,
    pub codebook_weight: f64,
    pub commitment_weight: f64,
    pub lr: f64,
    pub lr_floor: f64,
    pub schedule: LrSchedule,
    pub weight_decay: f64,
    pub adam_betas: [f64; 2],
    pub adam_eps: f64,
    pub steps: u64,
    pub crop: usize,
    pub samples_per_task: usize,
    pub seed: u64,
    pub variant: Variant,
    pub cscl: CsclConfig,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            beta: 0.2,
            codebook_weight: 1.0,
            commitment_weight: 0.25,
            lr: 1e-4,
            lr_floor: 1e-6,
            schedule: LrSchedule::Cosine,
            weight_decay: 1e-4,
            adam_betas: [0.9, 0.999],
            adam_eps: 1e-8,
            steps: 100_000,
            crop: 128,
            samples_per_task: 2,
            seed: 0,
            variant: Variant::Full,
            cscl: CsclConfig::default(),
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0
            || self.beta < 0.0
            || self.codebook_weight < 0.0
            || self.commitment_weight < 0.0
        {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        if !(self.lr > 0.0) || self.lr_floor < 0.0 || self.lr_floor > self.lr {
            return Err(Error::Config(format!(
                "need 0 <= lr_floor <= lr and lr > 0, got {} / {}",
                self.lr_floor, self.lr
            )));
        }
        if self.adam_betas.iter().any(|b| !(0.0..1.0).contains(b)) || !(self.adam_eps > 0.0) {
            return Err(Error::Config(
                "adam betas must lie in [0, 1) and eps > 0".into(),
            ));
        }
        if self.crop == 0 || self.samples_per_task == 0 {
            return Err(Error::Config(
                "crop and samples_per_task must be positive".into(),
            ));
        }
        self.cscl.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Cosine,
    Constant,
}

/// Cosine annealing from `lr` at step 0 to `floor` at `total`.
pub fn cosine_lr(step: u64, total: u64, lr: f64, floor: f64) -> f64 {
    if total == 0 || step >= total {
        return floor;
    }
    floor + 0.5 * (lr - floor) * (1.0 + (PI * step as f64 / total as f64).cos())
}

pub fn mae_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.numel().max(1) as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n)
}

/// Per-term values; dropped terms are zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub mae: f64,
    pub cscl: f64,
    pub codebook: f64,
    pub commitment: f64,
}

impl LossBreakdown {
    /// Weighted sum of the terms the variant keeps.
    pub fn combine(
        mae: f64,
        cscl: f64,
        codebook: f64,
        commitment: f64,
        cfg: &TrainConfig,
        variant: Variant,
    ) -> Self {
        let cscl = if variant.uses_cscl() { cscl } else { 0.0 };
        let (codebook, commitment) = if variant.quantizes() {
            (codebook, commitment)
        } else {
            (0.0, 0.0)
        };
        let total = cfg.alpha * mae
            + cfg.beta * cscl
            + cfg.codebook_weight * codebook
            + cfg.commitment_weight * commitment;
        LossBreakdown {
            total,
            mae,
            cscl,
            codebook,
            commitment,
        }
    }
}

/// Graph inputs of the objective; absent parts drop their terms.
pub struct LossInputs {
    pub pred: Var,
    pub target: Var,
    /// Aggregated and shuffled-aggregated features `[N_t, M]`.
    pub cscl: Option<(Var, Var)>,
    pub z_e: Option<Var>,
    pub z_q: Option<Var>,
}

/// Records the weighted objective and returns it with its breakdown.
pub fn total_loss(
    g: &Graph,
    inputs: &LossInputs,
    cfg: &TrainConfig,
    variant: Variant,
) -> Result<(Var, LossBreakdown)> {
    let mae = g.mae(inputs.pred, inputs.target);
    let mut terms = vec![(mae, cfg.alpha)];
    let mut vals = [g.value(mae).item(), 0.0, 0.0, 0.0];
    if variant.uses_cscl() {
        if let Some((fg, fs)) = inputs.cscl {
            let l = cscl_loss_op(g, fg, fs, &cfg.cscl)?;
            vals[1] = g.value(l).item();
            terms.push((l, cfg.beta));
        }
    }
    if variant.quantizes() {
        if let (Some(ze), Some(zq)) = (inputs.z_e, inputs.z_q) {
            let (cb, cm) = codebook_losses_op(g, ze, zq);
            vals[2] = g.value(cb).item();
            vals[3] = g.value(cm).item();
            terms.push((cb, cfg.codebook_weight));
            terms.push((cm, cfg.commitment_weight));
        }
    }
    let total = g.weighted_sum(&terms);
    let mut br = LossBreakdown::combine(vals[0], vals[1], vals[2], vals[3], cfg, variant);
    br.total = g.value(total).item();
    Ok((total, br))
}

/// Decoupled-weight-decay Adam state, one moment pair per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Update count per parameter (parameters without a gradient are skipped).
    pub t: Vec<u64>,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        AdamW {
            m: zeros.clone(),
            v: zeros,
            t: vec![0; store.len()],
        }
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[(ParamId, &Tensor)],
        lr: f64,
        cfg: &TrainConfig,
    ) {
        let [b1, b2] = cfg.adam_betas;
        for (id, g) in grads {
            let i = id.0;
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
            let p = store.value_mut(*id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                p[k] -= lr * cfg.weight_decay * p[k];
                p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// One JSON-lines record per logged step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub reseeded_codes: usize,
}

/// RNG streams derived from the run seed; the batch schedule uses the epoch
/// number as its stream.
const AUG_STREAM: u64 = 1 << 40;
const RESEED_STREAM: u64 = 2 << 40;
const SHUFFLE_STREAM: u64 = 3 << 40;

/// Resumable optimizer state of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub cfg: TrainConfig,
    pub step: u64,
    pub optimizer: AdamW,
    pub epoch_usage: Vec<u64>,
    pub total_usage: Vec<u64>,
}

/// Owns the model, optimizer and data schedule of a run.
pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    pub optimizer: AdamW,
    pub step: u64,
    /// Code usage in the current epoch.
    pub epoch_usage: Vec<u64>,
    /// Code usage over the whole run.
    pub total_usage: Vec<u64>,
    datasets: Vec<Vec<SamplePair>>,
    tasks: Vec<Task>,
    batches: BalancedBatches,
    plan: BatchPlan,
}

impl Trainer {
    /// `datasets` are grouped per task internally; tasks with no samples are
    /// left out of the batch plan.
    pub fn new(model: Model, cfg: TrainConfig, samples: Vec<SamplePair>) -> Result<Self> {
        cfg.validate()?;
        let mut tasks = Vec::new();
        let mut datasets = Vec::new();
        for task in Task::ALL {
            let d: Vec<SamplePair> = samples.iter().filter(|p| p.task == task).cloned().collect();
            if !d.is_empty() {
                tasks.push(task);
                datasets.push(d);
            }
        }
        if datasets.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        if cfg.variant.uses_cscl() && tasks.len() < 2 {
            return Err(Error::Config(
                "contrastive training needs at least 2 tasks".into(),
            ));
        }
        let plan = BatchPlan::new(tasks.len(), cfg.samples_per_task)?;
        let sizes: Vec<usize> = datasets.iter().map(Vec::len).collect();
        let batches = BalancedBatches::new(&sizes, plan, cfg.seed)?;
        let k = model.config().daam.num_codes;
        let optimizer = AdamW::new(model.store());
        Ok(Trainer {
            model,
            cfg,
            optimizer,
            step: 0,
            epoch_usage: vec![0; k],
            total_usage: vec![0; k],
            datasets,
            tasks,
            batches,
            plan,
        })
    }

    /// Continues a run from a saved state. Batches and augmentation are pure
    /// functions of the step, so the resumed run follows the original one.
    pub fn resume(model: Model, samples: Vec<SamplePair>, state: TrainState) -> Result<Self> {
        let mut t = Trainer::new(model, state.cfg, samples)?;
        let n = t.model.store().len();
        let k = t.model.config().daam.num_codes;
        if state.optimizer.m.len() != n
            || state.optimizer.v.len() != n
            || state.optimizer.t.len() != n
        {
            return Err(Error::Format(format!(
                "optimizer state has {} entries, model has {n} parameters",
                state.optimizer.m.len()
            )));
        }
        if state.epoch_usage.len() != k || state.total_usage.len() != k {
            return Err(Error::Format(format!(
                "usage counts do not match codebook size {k}"
            )));
        }
        t.optimizer = state.optimizer;
        t.step = state.step;
        t.epoch_usage = state.epoch_usage;
        t.total_usage = state.total_usage;
        Ok(t)
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            cfg: self.cfg.clone(),
            step: self.step,
            optimizer: self.optimizer.clone(),
            epoch_usage: self.epoch_usage.clone(),
            total_usage: self.total_usage.clone(),
        }
    }

    /// Training pairs, task-major.
    pub fn samples(&self) -> Vec<SamplePair> {
        self.datasets.concat()
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn plan(&self) -> BatchPlan {
        self.plan
    }

    pub fn batches_per_epoch(&self) -> u64 {
        self.batches.batches_per_epoch() as u64
    }

    /// Augmented pairs of batch `step`, task-major.
    pub fn batch_samples(&mut self, step: u64) -> Result<Vec<SamplePair>> {
        let idx = self.batches.batch(step);
        let mut rng = rng::stream(self.cfg.seed, AUG_STREAM + step);
        idx.iter()
            .map(|&(t, i)| augment(&self.datasets[t][i], self.cfg.crop, &mut rng))
            .collect()
    }

    pub fn current_lr(&self) -> f64 {
        match self.cfg.schedule {
            LrSchedule::Cosine => {
                cosine_lr(self.step, self.cfg.steps, self.cfg.lr, self.cfg.lr_floor)
            }
            LrSchedule::Constant => self.cfg.lr,
        }
    }

    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let step = self.step;
        let variant = self.cfg.variant;
        let samples = self.batch_samples(step)?;
        let x = stack_images(samples.iter().map(|p| &p.degraded))?;
        let y = stack_images(samples.iter().map(|p| &p.clean))?;
        let g = Graph::with_trainable(
            GroupMask::only(ParamGroup::Restoration).with(ParamGroup::Degradation),
        );
        let xv = g.constant(x);
        let fwd = self.model.forward(&g, xv, variant, false)?;
        let mut inputs = LossInputs {
            pred: fwd.restored,
            target: g.constant(y),
            cscl: None,
            z_e: None,
            z_q: None,
        };
        let mut indices = None;
        if let Some(d) = &fwd.daam {
            inputs.z_e = Some(d.z_e);
            inputs.z_q = d.z_q;
            indices = d.indices.clone();
            if variant.uses_cscl() {
                let s = g.shape(d.features);
                let b = s[0];
                let f: usize = s[1..].iter().product();
                let flat = g.reshape(d.features, &[b, f]);
                let mut rng = rng::stream(self.cfg.seed, SHUFFLE_STREAM + step);
                let perm = within_task_permutation(self.plan, &mut rng);
                let shuffled = g.gather_rows(flat, &perm);
                let m = self.plan.samples_per_task * f;
                let nt = self.plan.n_tasks;
                inputs.cscl = Some((g.reshape(flat, &[nt, m]), g.reshape(shuffled, &[nt, m])));
            }
        }
        let (loss, breakdown) = total_loss(&g, &inputs, &self.cfg, variant)?;
        if !breakdown.total.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("non-finite loss {breakdown:?}"),
            });
        }
        let grads = g.backward(loss);
        let params: Vec<(ParamId, &Tensor)> = grads.params().collect();
        if let Some((id, _)) = params.iter().find(|(_, t)| !t.is_finite()) {
            return Err(Error::Divergence {
                step,
                detail: format!(
                    "non-finite gradient for {} with loss {breakdown:?}",
                    self.model.store().get(*id).name
                ),
            });
        }
        let lr = self.current_lr();
        self.optimizer
            .step(self.model.store_mut(), &params, lr, &self.cfg);
        if let Some(idx) = &indices {
            for &k in idx {
                self.epoch_usage[k] += 1;
                self.total_usage[k] += 1;
            }
        }
        let bpe = self.batches_per_epoch();
        let mut reseeded = 0;
        if (step + 1) % bpe == 0 {
            if variant.quantizes() && self.model.config().daam.reseed_dead_codes {
                reseeded = self.reseed_dead_codes(&g.value(fwd.daam.as_ref().unwrap().z_e), step);
                if reseeded > 0 {
                    info!("step {step}: re-seeded {reseeded} unused codes");
                }
            }
            self.epoch_usage.iter_mut().for_each(|c| *c = 0);
        }
        self.step += 1;
        let metrics = StepMetrics {
            step,
            epoch: step / bpe,
            lr,
            loss: breakdown,
            reseeded_codes: reseeded,
        };
        if self.cfg.log_every > 0 && step % self.cfg.log_every == 0 {
            debug!("{}", serde_json::to_string(&metrics)?);
        }
        Ok(metrics)
    }

    /// Replaces codes unused this epoch with encoder outputs drawn from `z_e`.
    fn reseed_dead_codes(&mut self, z_e: &Tensor, step: u64) -> usize {
        let dead: Vec<usize> = (0..self.epoch_usage.len())
            .filter(|&k| self.epoch_usage[k] == 0)
            .collect();
        if dead.is_empty() {
            return 0;
        }
        let (n, d, h, w) = z_e.dims4();
        let hw = h * w;
        let mut rng = rng::stream(self.cfg.seed, RESEED_STREAM + step);
        let id = self.model.daam().codebook;
        let i = id.0;
        let codes = self.model.store_mut().value_mut(id).data_mut();
        for &k in &dead {
            let pick = rng.random_range(0..n * hw);
            let (s, p) = (pick / hw, pick % hw);
            for c in 0..d {
                codes[k * d + c] = z_e.data()[(s * d + c) * hw + p];
            }
        }
        for &k in &dead {
            self.optimizer.m[i].data_mut()[k * d..(k + 1) * d].fill(0.0);
            self.optimizer.v[i].data_mut()[k * d..(k + 1) * d].fill(0.0);
        }
        dead.len()
    }

    /// Runs until `cfg.steps`, calling `on_step` after every step.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepMetrics) -> Result<()>) -> Result<()> {
        while self.step < self.cfg.steps {
            let m = self.train_step()?;
            on_step(&m)?;
        }
        Ok(())
    }

    /// Mean MAE of the current model over `samples` (no augmentation).
    pub fn evaluate_mae(&self, samples: &[SamplePair]) -> Result<f64> {
        let mut sum = 0.0;
        let mut count = 0usize;
        for chunk in samples.chunks(8) {
            let g = Graph::inference();
            let x = g.constant(stack_images(chunk.iter().map(|p| &p.degraded))?);
            let y = stack_images(chunk.iter().map(|p| &p.clean))?;
            let f = self.model.forward(&g, x, self.cfg.variant, false)?;
            sum += mae_loss(&g.value(f.restored), &y)? * y.numel() as f64;
            count += y.numel();
        }
        Ok(sum / count.max(1) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{check_gradients, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mae_hand_case() {
        let p = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let t = Tensor::new(&[2], vec![0.0, 4.0]).unwrap();
        assert_eq!(mae_loss(&p, &t).unwrap(), 1.5);
        assert_eq!(mae_loss(&p, &p).unwrap(), 0.0);
        assert!(mae_loss(&p, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn mae_gradient_is_sign_over_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = random_tensor(&mut rng, &[2, 5]);
        let t = random_tensor(&mut rng, &[2, 5]);
        let g = Graph::new();
        let (pv, tv) = (g.leaf(p.clone()), g.constant(t.clone()));
        let grads = g.backward(g.mae(pv, tv));
        let expect = p.zip_map(&t, |a, b| (a - b).signum() / 10.0);
        assert_eq!(grads.wrt(pv).unwrap(), &expect);
        check_gradients(&[p, t], 1e-6, |g, v| g.mae(v[0], v[1]));
    }

    #[test]
    fn weighted_sum_of_terms() {
        let cfg = TrainConfig::default();
        let b = LossBreakdown::combine(0.5, 1.0, 0.0, 0.0, &cfg, Variant::Full);
        assert!((b.total - 0.7).abs() < 1e-12);
        let b = LossBreakdown::combine(0.5, 1.0, 0.3, 0.4, &cfg, Variant::Baseline);
        assert_eq!(b.total, 0.5);
        let b = LossBreakdown::combine(0.5, 1.0, 0.3, 0.4, &cfg, Variant::Full);
        assert!((b.total - (0.5 + 0.2 + 0.3 + 0.1)).abs() < 1e-12);
        assert_eq!(
            LossBreakdown::combine(0.0, 0.0, 0.0, 0.0, &cfg, Variant::Full).total,
            0.0
        );
    }

    #[test]
    fn cosine_schedule_table() {
        let (lr, floor, total) = (1e-4, 1e-6, 1000);
        assert_eq!(cosine_lr(0, total, lr, floor), lr);
        assert_eq!(cosine_lr(total, total, lr, floor), floor);
        let table: Vec<f64> = (0..=total)
            .map(|s| cosine_lr(s, total, lr, floor))
            .collect();
        assert!(table.windows(2).all(|w| w[1] <= w[0]));
        assert!((table[500] - (floor + 0.5 * (lr - floor))).abs() < 1e-15);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut store = ParamStore::default();
        let id = store.add(
            "p",
            ParamGroup::Restoration,
            Tensor::new(&[2], vec![1.0, -1.0]).unwrap(),
        );
        let mut opt = AdamW::new(&store);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let g = Tensor::new(&[2], vec![0.3, -2.0]).unwrap();
        opt.step(&mut store, &[(id, &g)], 0.01, &cfg);
        let v = store.value(id).data();
        assert!((v[0] - 0.99).abs() < 1e-6);
        assert!((v[1] + 0.99).abs() < 1e-6);
    }
}
