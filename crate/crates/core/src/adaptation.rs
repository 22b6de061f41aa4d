//! Test-time adaptation: a residual adapter on the degradation features,
//! per-task source anchors, and a CORAL-driven update of the adapter alone.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, GroupMask, ParamGroup, ParamId, ParamStore, Var};
use crate::daam::DegradationFeature;
use crate::data::{stack_images, unstack_images, ImageTensor, SamplePair, Task};
use crate::error::{Error, Result};
use crate::model::{Model, Variant};
use crate::nn::{Conv2d, ConvSpec, DepthwiseConv};
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DamConfig {
    /// Hidden width as a multiple of the feature width.
    pub expansion: usize,
    /// Squeeze-excitation reduction ratio.
    pub se_reduction: usize,
}

impl Default for DamConfig {
    fn default() -> Self {
        DamConfig {
            expansion: 2,
            se_reduction: 4,
        }
    }
}

impl DamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.expansion == 0 || self.se_reduction == 0 {
            return Err(Error::Config(
                "DAM expansion and se_reduction must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Adapter parameters (`θ_da`):
/// `F + P(SE(GELU(PW(DW(GELU(E(F)))))))` with a zero-initialised `P`.
#[derive(Debug, Clone)]
pub struct Dam {
    pub expand: Conv2d,
    pub depthwise: DepthwiseConv,
    pub pointwise: Conv2d,
    pub se_down: Conv2d,
    pub se_up: Conv2d,
    pub project: Conv2d,
    pub dim: usize,
}

impl Dam {
    pub fn new<R: Rng>(store: &mut ParamStore, dim: usize, cfg: &DamConfig, rng: &mut R) -> Self {
        let grp = ParamGroup::Adaptation;
        let hidden = dim * cfg.expansion;
        let squeezed = (hidden / cfg.se_reduction).max(1);
        Dam {
            expand: Conv2d::new(
                store,
                "dam.expand",
                grp,
                ConvSpec::pointwise(dim, hidden),
                rng,
            ),
            depthwise: DepthwiseConv::new(store, "dam.depthwise", grp, hidden, 3, rng),
            pointwise: Conv2d::new(
                store,
                "dam.pointwise",
                grp,
                ConvSpec::pointwise(hidden, hidden),
                rng,
            ),
            se_down: Conv2d::new(
                store,
                "dam.se_down",
                grp,
                ConvSpec::pointwise(hidden, squeezed),
                rng,
            ),
            se_up: Conv2d::new(
                store,
                "dam.se_up",
                grp,
                ConvSpec::pointwise(squeezed, hidden),
                rng,
            ),
            project: Conv2d::zeros(store, "dam.project", grp, ConvSpec::pointwise(hidden, dim)),
            dim,
        }
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Var {
        let h = g.gelu(self.expand.forward(g, store, x));
        let h = g.gelu(
            self.pointwise
                .forward(g, store, self.depthwise.forward(g, store, h)),
        );
        let s = g.shape(h);
        let pooled = g.reshape(g.spatial_mean(h), &[s[0], s[1], 1, 1]);
        let e = g.gelu(self.se_down.forward(g, store, pooled));
        let e = g.sigmoid(self.se_up.forward(g, store, e));
        let h = g.scale_channels(h, g.reshape(e, &[s[0], s[1]]));
        g.add(x, self.project.forward(g, store, h))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for c in [
            &self.expand,
            &self.pointwise,
            &self.se_down,
            &self.se_up,
            &self.project,
        ] {
            ids.push(c.weight);
            ids.extend(c.bias);
        }
        ids.push(self.depthwise.weight);
        ids.push(self.depthwise.bias);
        ids
    }

    pub fn capture(&self, store: &ParamStore) -> DamState {
        let ids = self.param_ids();
        let values = ids.iter().map(|id| store.value(*id).clone()).collect();
        DamState { ids, values }
    }

    pub fn restore(&self, store: &mut ParamStore, state: &DamState) -> Result<()> {
        if state.ids != self.param_ids() {
            return Err(Error::Config("DAM state does not match this model".into()));
        }
        for (id, v) in state.ids.iter().zip(&state.values) {
            if store.value(*id).shape() != v.shape() {
                return Err(Error::Shape(format!(
                    "DAM state shape {:?} for {}",
                    v.shape(),
                    store.get(*id).name
                )));
            }
            *store.value_mut(*id) = v.clone();
        }
        Ok(())
    }
}

/// Snapshot of `θ_da`.
#[derive(Debug, Clone, PartialEq)]
pub struct DamState {
    pub ids: Vec<ParamId>,
    pub values: Vec<Tensor>,
}

/// Unbiased covariance `(XᵀX − (Xᵀ1)(1ᵀX)/n) / (n−1)` of rows `x: [n, D]`.
pub fn covariance(rows: &Tensor) -> Result<Tensor> {
    if rows.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "covariance expects [n, D], got {:?}",
            rows.shape()
        )));
    }
    let (n, _) = rows.dims2();
    if n < 2 {
        return Err(Error::SampleCount(format!(
            "covariance needs at least 2 rows, got {n}"
        )));
    }
    let g = Graph::inference();
    Ok((*g.value(covariance_op(&g, g.constant(rows.clone())))).clone())
}

/// Recorded covariance of `x: [n, D]`; gradient `X_c(G + Gᵀ)/(n−1)` with
/// `X_c` the centred rows.
pub fn covariance_op(g: &Graph, x: Var) -> Var {
    let xv = g.value(x);
    let (n, d) = xv.dims2();
    assert!(n >= 2, "covariance needs at least 2 rows");
    let mut sums = vec![0.0; d];
    for r in xv.data().chunks(d) {
        sums.iter_mut().zip(r).for_each(|(s, v)| *s += v);
    }
    let mut c = vec![0.0; d * d];
    gemm(d, n, d, 1.0, xv.data(), true, xv.data(), false, 0.0, &mut c);
    let nf = n as f64;
    for i in 0..d {
        for j in 0..d {
            c[i * d + j] = (c[i * d + j] - sums[i] * sums[j] / nf) / (nf - 1.0);
        }
    }
    let means: Vec<f64> = sums.iter().map(|s| s / nf).collect();
    g.op(
        &[x],
        Tensor::from_parts(vec![d, d], c),
        move |grad, inp, _| {
            let mut sym = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    sym[i * d + j] = (grad.data()[i * d + j] + grad.data()[j * d + i]) / (nf - 1.0);
                }
            }
            let mut xc = inp[0].data().to_vec();
            for r in xc.chunks_mut(d) {
                r.iter_mut().zip(&means).for_each(|(v, m)| *v -= m);
            }
            let mut dx = vec![0.0; n * d];
            gemm(n, d, d, 1.0, &xc, false, &sym, false, 0.0, &mut dx);
            vec![Some(Tensor::from_parts(vec![n, d], dx))]
        },
    )
}

/// `‖C_t − C_s‖²_F / (4d²)` with `C_s` held constant.
pub fn coral_op(g: &Graph, c_t: Var, c_s: &Tensor) -> Var {
    let d = c_s.shape()[0] as f64;
    let diff = g.sub(c_t, g.constant(c_s.clone()));
    g.scale(g.sum(g.mul(diff, diff)), 1.0 / (4.0 * d * d))
}

pub fn coral_loss(c_t: &Tensor, c_s: &Tensor, d: usize) -> Result<f64> {
    if c_t.shape() != [d, d] || c_s.shape() != [d, d] {
        return Err(Error::Shape(format!(
            "CORAL expects {d}x{d}, got {:?} and {:?}",
            c_t.shape(),
            c_s.shape()
        )));
    }
    let sq: f64 = c_t
        .data()
        .iter()
        .zip(c_s.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sq / (4.0 * (d * d) as f64))
}

/// Source statistics of one task's feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub task: Task,
    pub mean: Vec<f64>,
    /// `D × D`.
    pub covariance: Tensor,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnchorSet {
    pub anchors: Vec<Anchor>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn get(&self, task: Task) -> Option<&Anchor> {
        self.anchors.iter().find(|a| a.task == task)
    }

    pub fn dim(&self) -> usize {
        self.anchors.first().map_or(0, |a| a.mean.len())
    }
}

/// Anchor from stacked feature rows `[n, D]`.
pub fn anchor_from_rows(task: Task, rows: &Tensor) -> Result<Anchor> {
    let (n, d) = rows.dims2();
    let covariance = covariance(rows).map_err(|_| {
        Error::SampleCount(format!("task {task} has {n} feature rows, need at least 2"))
    })?;
    let mut mean = vec![0.0; d];
    for r in rows.data().chunks(d) {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    Ok(Anchor {
        task,
        mean,
        covariance,
        count: n,
    })
}

fn feature_rows(features: &[DegradationFeature]) -> Tensor {
    let d = features[0].dim();
    let mut data = Vec::new();
    for f in features {
        data.extend(f.rows().into_data());
    }
    let n = data.len() / d;
    Tensor::from_parts(vec![n, d], data)
}

/// Per-task mean and covariance of every spatial feature vector of the
/// source samples, without the DAM. Tasks appear in canonical order.
pub fn compute_anchors(
    model: &Model,
    dataset: &[SamplePair],
    variant: Variant,
    batch: usize,
) -> Result<AnchorSet> {
    let mut anchors = Vec::new();
    for task in Task::ALL {
        let images: Vec<&ImageTensor> = dataset
            .iter()
            .filter(|p| p.task == task)
            .map(|p| &p.degraded)
            .collect();
        if images.is_empty() {
            continue;
        }
        let mut feats = Vec::with_capacity(images.len());
        for chunk in images.chunks(batch.max(1)) {
            feats.extend(model.degradation_features_batch(chunk, variant)?);
        }
        anchors.push(anchor_from_rows(task, &feature_rows(&feats))?);
    }
    Ok(AnchorSet { anchors })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
    dot / (na * nb)
}

/// Position in `anchors` of the mean most cosine-similar to `pooled`; the
/// lowest position wins ties.
pub fn select_anchor_pooled(pooled: &[f64], anchors: &AnchorSet) -> Result<usize> {
    if anchors.is_empty() {
        return Err(Error::Config("anchor set is empty".into()));
    }
    if pooled.len() != anchors.dim() {
        return Err(Error::Shape(format!(
            "feature length {} vs anchor length {}",
            pooled.len(),
            anchors.dim()
        )));
    }
    if pooled.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1e-12
        || pooled.iter().any(|v| !v.is_finite())
    {
        return Err(Error::Numeric("pooled feature has zero norm".into()));
    }
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for (i, a) in anchors.anchors.iter().enumerate() {
        let s = cosine(pooled, &a.mean);
        if s > best_sim {
            best = i;
            best_sim = s;
        }
    }
    Ok(best)
}

pub fn select_anchor(feature: &DegradationFeature, anchors: &AnchorSet) -> Result<usize> {
    select_anchor_pooled(&feature.pooled, anchors)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TtaConfig {
    pub steps: usize,
    pub lr: f64,
    pub reset_per_sample: bool,
}

impl Default for TtaConfig {
    fn default() -> Self {
        TtaConfig {
            steps: 5,
            lr: 1e-4,
            reset_per_sample: true,
        }
    }
}

impl TtaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!(
                "TTA lr must be > 0, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtaReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample_id: Option<String>,
    pub selected_task: usize,
    pub selected_task_name: Task,
    /// CORAL before adaptation and after every step.
    pub coral_per_step: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl_before: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl_after: Option<f64>,
    pub elapsed_ms: f64,
}

/// Result of adapting to one image: the adapted `θ_da`, the report and the
/// final adapted feature map `[1, D, h, w]`.
pub struct TtaOutcome {
    pub state: DamState,
    pub report: TtaReport,
    pub adapted: Tensor,
    /// Pre-DAM features of the image.
    pub raw: Tensor,
}

/// Adapts `θ_da` to one image starting from `start` (the model's own
/// `θ_da` when `None`). Only DAM parameters are ever written, and only in a
/// private copy.
pub fn tta_adapt_from(
    model: &Model,
    image: &ImageTensor,
    anchors: &AnchorSet,
    cfg: &TtaConfig,
    variant: Variant,
    start: Option<&DamState>,
) -> Result<TtaOutcome> {
    cfg.validate()?;
    let t0 = Instant::now();
    let raw = {
        let g = Graph::inference();
        let x = g.constant(stack_images([image])?);
        let out = model.daam_forward(&g, model.store(), x, variant.quantizes())?;
        (*g.value(out.features)).clone()
    };
    let (_, d, h, w) = raw.dims4();
    if h * w < 2 {
        return Err(Error::SampleCount(format!(
            "TTA needs at least 2 spatial rows, got {}",
            h * w
        )));
    }
    let mut store = model.store().clone();
    if let Some(s) = start {
        model.dam().restore(&mut store, s)?;
    }
    let ids = model.dam().param_ids();
    let mut coral = Vec::with_capacity(cfg.steps + 1);
    let mut selected = None;
    let mut adapted = raw.clone();
    for step in 0..=cfg.steps {
        let g = Graph::with_trainable(GroupMask::only(ParamGroup::Adaptation));
        let y = model.dam_forward_var(&g, &store, g.constant(raw.clone()));
        adapted = (*g.value(y)).clone();
        let sel = match selected {
            Some(s) => s,
            None => {
                let pooled: Vec<f64> = adapted
                    .data()
                    .chunks(h * w)
                    .map(|p| p.iter().sum::<f64>() / (h * w) as f64)
                    .collect();
                let s = select_anchor_pooled(&pooled, anchors)?;
                selected = Some(s);
                s
            }
        };
        let target = &anchors.anchors[sel].covariance;
        if target.shape() != [d, d] {
            return Err(Error::Shape(format!(
                "anchor covariance {:?} vs feature dim {d}",
                target.shape()
            )));
        }
        let loss = coral_op(&g, covariance_op(&g, g.to_rows(y)), target);
        let lv = g.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite CORAL at TTA step {step}"
            )));
        }
        coral.push(lv);
        if step == cfg.steps {
            break;
        }
        let grads = g.backward(loss);
        for id in &ids {
            if let Some(gr) = grads.param(*id) {
                let p = store.value_mut(*id);
                p.data_mut()
                    .iter_mut()
                    .zip(gr.data())
                    .for_each(|(v, g)| *v -= cfg.lr * g);
            }
        }
    }
    let sel = selected.unwrap();
    let report = TtaReport {
        sample_id: None,
        selected_task: sel,
        selected_task_name: anchors.anchors[sel].task,
        coral_per_step: coral,
        kl_before: None,
        kl_after: None,
        elapsed_ms: t0.elapsed().as_secs_f64() * 1e3,
    };
    Ok(TtaOutcome {
        state: model.dam().capture(&store),
        report,
        adapted,
        raw,
    })
}

/// Adapts from the model's stored (freshly initialised) `θ_da`.
pub fn tta_adapt(
    model: &Model,
    image: &ImageTensor,
    anchors: &AnchorSet,
    cfg: &TtaConfig,
) -> Result<(DamState, TtaReport)> {
    let out = tta_adapt_from(model, image, anchors, cfg, Variant::Full, None)?;
    Ok((out.state, out.report))
}

/// Restores `image` through the DAM with parameters `state`.
pub fn restore_with_dam(
    model: &Model,
    image: &ImageTensor,
    variant: Variant,
    state: &DamState,
) -> Result<ImageTensor> {
    let mut store = model.store().clone();
    model.dam().restore(&mut store, state)?;
    let g = Graph::inference();
    let x = g.constant(stack_images([image])?);
    let f = model.forward_with(&g, &store, x, variant, true)?;
    let out = g.value(f.restored);
    if !out.is_finite() {
        return Err(Error::Numeric("non-finite restoration output".into()));
    }
    Ok(unstack_images(&out).remove(0))
}

/// Test-time adaptation followed by a DAM-routed forward pass.
pub fn restore_with_tta(
    model: &Model,
    image: &ImageTensor,
    anchors: &AnchorSet,
    cfg: &TtaConfig,
    variant: Variant,
) -> Result<(ImageTensor, TtaReport)> {
    let out = tta_adapt_from(model, image, anchors, cfg, variant, None)?;
    Ok((
        restore_with_dam(model, image, variant, &out.state)?,
        out.report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{check_gradients, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_pass(x: &Tensor) -> Tensor {
        let (n, d) = x.dims2();
        let mean: Vec<f64> = (0..d)
            .map(|j| (0..n).map(|i| x.data()[i * d + j]).sum::<f64>() / n as f64)
            .collect();
        let mut c = vec![0.0; d * d];
        for a in 0..d {
            for b in 0..d {
                c[a * d + b] = (0..n)
                    .map(|i| (x.data()[i * d + a] - mean[a]) * (x.data()[i * d + b] - mean[b]))
                    .sum::<f64>()
                    / (n - 1) as f64;
            }
        }
        Tensor::new(&[d, d], c).unwrap()
    }

    #[test]
    fn covariance_hand_and_oracle() {
        let c = covariance(&Tensor::new(&[2, 1], vec![0.0, 2.0]).unwrap()).unwrap();
        assert_eq!(c.data(), &[2.0]);
        let c = covariance(&Tensor::full(&[5, 3], 0.4)).unwrap();
        assert!(c.data().iter().all(|v| v.abs() < 1e-15));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_tensor(&mut rng, &[50, 6]);
        assert!(covariance(&x).unwrap().max_abs_diff(&two_pass(&x)) < 1e-10);
        assert!(matches!(
            covariance(&Tensor::zeros(&[1, 3])),
            Err(Error::SampleCount(_))
        ));
    }

    #[test]
    fn coral_hand_cases() {
        let two = Tensor::full(&[1, 1], 2.0);
        let zero = Tensor::zeros(&[1, 1]);
        assert_eq!(coral_loss(&zero, &two, 1).unwrap(), 1.0);
        assert_eq!(coral_loss(&two, &two, 1).unwrap(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_tensor(&mut rng, &[4, 4]);
        let b = random_tensor(&mut rng, &[4, 4]);
        assert_eq!(
            coral_loss(&a, &b, 4).unwrap(),
            coral_loss(&b, &a, 4).unwrap()
        );
        assert!(coral_loss(&a, &two, 4).is_err());
    }

    #[test]
    fn coral_gradient_wrt_rows() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_tensor(&mut rng, &[7, 3]);
            let cs = covariance(&random_tensor(&mut rng, &[9, 3])).unwrap();
            check_gradients(&[x], 1e-4, |g, v| coral_op(g, covariance_op(g, v[0]), &cs));
        }
    }

    #[test]
    fn dam_is_identity_at_init_and_live_after_a_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::default();
        let dam = Dam::new(&mut store, 4, &DamConfig::default(), &mut rng);
        let x = random_tensor(&mut rng, &[2, 4, 3, 3]);
        let g = Graph::new();
        let xv = g.constant(x.clone());
        let y = dam.forward(&g, &store, xv);
        assert_eq!(*g.value(y), x);
        let grads = g.backward(g.sum(g.mul(y, y)));
        let pid = dam.project.weight;
        let gw = grads.param(pid).unwrap().clone();
        store
            .value_mut(pid)
            .data_mut()
            .iter_mut()
            .zip(gw.data())
            .for_each(|(v, g)| *v -= 0.1 * g);
        let g = Graph::inference();
        let y = dam.forward(&g, &store, g.constant(x.clone()));
        assert!(g.value(y).max_abs_diff(&x) > 0.0);
    }

    #[test]
    fn dam_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::default();
        let dam = Dam::new(&mut store, 3, &DamConfig::default(), &mut rng);
        let pid = dam.project.weight;
        *store.value_mut(pid) = random_tensor(&mut rng, store.value(pid).shape());
        let ids = dam.param_ids();
        let mut inputs: Vec<Tensor> = ids.iter().map(|id| store.value(*id).clone()).collect();
        inputs.push(random_tensor(&mut rng, &[2, 3, 3, 3]));
        inputs.push(random_tensor(&mut rng, &[2, 3, 3, 3]));
        let k = ids.len();
        check_gradients(&inputs, 1e-4, |g, v| {
            let y = dam_forward_leaves(&dam, g, &ids, &v[..k], v[k]);
            g.sum(g.mul(y, v[k + 1]))
        });
    }

    /// DAM forward with every parameter supplied as a graph variable.
    fn dam_forward_leaves(dam: &Dam, g: &Graph, ids: &[ParamId], p: &[Var], x: Var) -> Var {
        let var = |id: ParamId| p[ids.iter().position(|i| *i == id).unwrap()];
        let conv = |c: &Conv2d, x: Var| g.conv2d(x, var(c.weight), c.bias.map(var), 1, 0);
        let h = g.gelu(conv(&dam.expand, x));
        let h = g.depthwise_conv2d(h, var(dam.depthwise.weight), var(dam.depthwise.bias), 1);
        let h = g.gelu(conv(&dam.pointwise, h));
        let s = g.shape(h);
        let pooled = g.reshape(g.spatial_mean(h), &[s[0], s[1], 1, 1]);
        let e = g.sigmoid(conv(&dam.se_up, g.gelu(conv(&dam.se_down, pooled))));
        let h = g.scale_channels(h, g.reshape(e, &[s[0], s[1]]));
        g.add(x, conv(&dam.project, h))
    }

    #[test]
    fn leaf_forward_matches_store_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::default();
        let dam = Dam::new(&mut store, 3, &DamConfig::default(), &mut rng);
        let pid = dam.project.weight;
        *store.value_mut(pid) = random_tensor(&mut rng, store.value(pid).shape());
        let x = random_tensor(&mut rng, &[1, 3, 4, 4]);
        let g = Graph::inference();
        let ids = dam.param_ids();
        let vars: Vec<Var> = ids
            .iter()
            .map(|id| g.constant(store.value(*id).clone()))
            .collect();
        let a = g.value(dam.forward(&g, &store, g.constant(x.clone())));
        let b = g.value(dam_forward_leaves(&dam, &g, &ids, &vars, g.constant(x)));
        assert_eq!(*a, *b);
    }

    fn anchors_from_means(means: &[Vec<f64>]) -> AnchorSet {
        let d = means[0].len();
        AnchorSet {
            anchors: means
                .iter()
                .enumerate()
                .map(|(i, m)| Anchor {
                    task: Task::ALL[i],
                    mean: m.clone(),
                    covariance: Tensor::zeros(&[d, d]),
                    count: 2,
                })
                .collect(),
        }
    }

    #[test]
    fn anchor_selection() {
        let set = anchors_from_means(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.3, 0.3, 1.0],
        ]);
        assert_eq!(select_anchor_pooled(&[0.3, 0.3, 1.0], &set).unwrap(), 2);
        assert_eq!(select_anchor_pooled(&[2.0, 0.0, 0.0], &set).unwrap(), 0);
        assert_eq!(select_anchor_pooled(&[0.6, 0.6, 2.0], &set).unwrap(), 2);
        assert!(matches!(
            select_anchor_pooled(&[0.0; 3], &set),
            Err(Error::Numeric(_))
        ));
        let tie = anchors_from_means(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        assert_eq!(select_anchor_pooled(&[1.0, 1.0], &tie).unwrap(), 0);
    }

    #[test]
    fn degenerate_anchor_rows() {
        let rows = Tensor::new(&[3, 2], vec![0.5, -1.0, 0.5, -1.0, 0.5, -1.0]).unwrap();
        let a = anchor_from_rows(Task::Rain, &rows).unwrap();
        assert_eq!(a.mean, vec![0.5, -1.0]);
        assert!(a.covariance.data().iter().all(|v| *v == 0.0));
        let one = Tensor::new(&[1, 2], vec![0.5, -1.0]).unwrap();
        assert!(matches!(
            anchor_from_rows(Task::Rain, &one),
            Err(Error::SampleCount(_))
        ));
    }
}
