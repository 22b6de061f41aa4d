//! Degradation awareness: a strided CNN maps the image to a latent grid,
//! each latent vector is snapped to its nearest codebook row, and a
//! normalisation-based channel gate reweights the quantized map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamGroup, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DaamConfig {
    /// Code length `D`.
    pub code_dim: usize,
    /// Number of codes `K`.
    pub num_codes: usize,
    pub gate_epsilon: f64,
    /// Re-seed codes left unused for a whole epoch.
    pub reseed_dead_codes: bool,
}

impl Default for DaamConfig {
    fn default() -> Self {
        DaamConfig {
            code_dim: 96,
            num_codes: 256,
            gate_epsilon: 1e-5,
            reseed_dead_codes: true,
        }
    }
}

impl DaamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_codes < 2 {
            return Err(Error::Config(format!(
                "codebook needs K >= 2, got {}",
                self.num_codes
            )));
        }
        if self.code_dim == 0 {
            return Err(Error::Config("code_dim must be positive".into()));
        }
        if !(self.gate_epsilon > 0.0) {
            return Err(Error::Config(format!(
                "gate epsilon must be > 0, got {}",
                self.gate_epsilon
            )));
        }
        Ok(())
    }
}

/// `K × D` matrix of degradation prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    codes: Tensor,
}

impl Codebook {
    pub fn new(codes: Tensor) -> Result<Self> {
        if codes.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "codebook must be K x D, got {:?}",
                codes.shape()
            )));
        }
        let (k, _) = codes.dims2();
        if k < 2 {
            return Err(Error::Config(format!("codebook needs K >= 2, got {k}")));
        }
        if !codes.is_finite() {
            return Err(Error::Numeric("codebook has non-finite entries".into()));
        }
        Ok(Codebook { codes })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("codebook rows differ in length".into()));
        }
        Self::new(Tensor::new(&[rows.len(), d], rows.concat())?)
    }

    pub fn len(&self) -> usize {
        self.codes.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.codes.shape()[1]
    }

    pub fn row(&self, k: usize) -> &[f64] {
        self.codes.row(k)
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.codes
    }
}

/// Index of the code closest to `z` in Euclidean distance; the lowest index
/// wins ties.
pub fn nearest_code(z: &[f64], codebook: &Codebook) -> Result<usize> {
    if z.len() != codebook.dim() {
        return Err(Error::Shape(format!(
            "latent length {} vs code length {}",
            z.len(),
            codebook.dim()
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite latent vector".into()));
    }
    Ok(nearest_unchecked(z, codebook.as_tensor()))
}

fn nearest_unchecked(z: &[f64], codes: &Tensor) -> usize {
    let (k, d) = codes.dims2();
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for i in 0..k {
        let row = &codes.data()[i * d..(i + 1) * d];
        let dist: f64 = z.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum();
        if dist < best_dist {
            best = i;
            best_dist = dist;
        }
    }
    best
}

/// Continuous latent grid `[N, D, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMap(pub Tensor);

impl LatentMap {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.shape().len() != 4 {
            return Err(Error::Shape(format!(
                "latent map must be [N, D, h, w], got {:?}",
                t.shape()
            )));
        }
        let (_, _, h, w) = t.dims4();
        if h * w == 0 {
            return Err(Error::Shape("latent map has empty spatial grid".into()));
        }
        Ok(LatentMap(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[1]
    }
}

/// Nearest-code indices of every spatial vector, ordered `(n, y, x)`.
pub fn code_indices(latent: &Tensor, codes: &Tensor) -> Vec<usize> {
    let (n, d, h, w) = latent.dims4();
    let hw = h * w;
    let mut z = vec![0.0; d];
    let mut out = Vec::with_capacity(n * hw);
    for s in 0..n {
        for p in 0..hw {
            for (c, zc) in z.iter_mut().enumerate() {
                *zc = latent.data()[(s * d + c) * hw + p];
            }
            out.push(nearest_unchecked(&z, codes));
        }
    }
    out
}

/// `[N, D, h, w]` tensor whose vectors are codebook rows `indices`.
pub fn lookup_codes(codes: &Tensor, indices: &[usize], n: usize, h: usize, w: usize) -> Tensor {
    let (_, d) = codes.dims2();
    let hw = h * w;
    assert_eq!(indices.len(), n * hw);
    let mut out = vec![0.0; n * d * hw];
    for s in 0..n {
        for p in 0..hw {
            let row = codes.row(indices[s * hw + p]);
            for c in 0..d {
                out[(s * d + c) * hw + p] = row[c];
            }
        }
    }
    Tensor::from_parts(vec![n, d, h, w], out)
}

/// Replaces each spatial vector with its nearest code.
pub fn quantize(latent: &LatentMap, codebook: &Codebook) -> Result<(LatentMap, Vec<usize>)> {
    let (n, d, h, w) = latent.0.dims4();
    if d != codebook.dim() {
        return Err(Error::Shape(format!(
            "latent channels {d} vs code length {}",
            codebook.dim()
        )));
    }
    if !latent.0.is_finite() {
        return Err(Error::Numeric("non-finite latent map".into()));
    }
    let idx = code_indices(&latent.0, codebook.as_tensor());
    let q = lookup_codes(codebook.as_tensor(), &idx, n, h, w);
    Ok((LatentMap(q), idx))
}

/// Forward value `z_q`, backward identity onto `z_e`.
pub fn straight_through(g: &Graph, z_e: Var, z_q: Tensor) -> Var {
    assert_eq!(g.shape(z_e), z_q.shape(), "straight-through shape mismatch");
    g.op(&[z_e], z_q, |grad, _, _| vec![Some(grad.clone())])
}

/// Differentiable codebook lookup: gradients scatter back onto the rows.
pub fn gather_codes(
    g: &Graph,
    codebook: Var,
    indices: &[usize],
    n: usize,
    h: usize,
    w: usize,
) -> Var {
    let codes = g.value(codebook);
    let value = lookup_codes(&codes, indices, n, h, w);
    let (k, d) = codes.dims2();
    let idx = indices.to_vec();
    g.op(&[codebook], value, move |grad, _, _| {
        let hw = h * w;
        let mut dc = vec![0.0; k * d];
        for s in 0..n {
            for p in 0..hw {
                let row = idx[s * hw + p];
                for c in 0..d {
                    dc[row * d + c] += grad.data()[(s * d + c) * hw + p];
                }
            }
        }
        vec![Some(Tensor::from_parts(vec![k, d], dc))]
    })
}

/// `(codebook, commitment)` losses: `mean‖sg(z_e) − z_q‖²` moves only the
/// codes, `mean‖z_e − sg(z_q)‖²` moves only the encoder.
pub fn codebook_losses_op(g: &Graph, z_e: Var, z_q: Var) -> (Var, Var) {
    let ze_const = g.detach(z_e);
    let zq_const = g.detach(z_q);
    (g.mse(ze_const, z_q), g.mse(z_e, zq_const))
}

pub fn codebook_losses(z_e: &LatentMap, z_q: &LatentMap) -> Result<(f64, f64)> {
    if z_e.0.shape() != z_q.0.shape() {
        return Err(Error::Shape(format!(
            "z_e {:?} vs z_q {:?}",
            z_e.0.shape(),
            z_q.0.shape()
        )));
    }
    let g = Graph::inference();
    let (a, b) = codebook_losses_op(&g, g.constant(z_e.0.clone()), g.constant(z_q.0.clone()));
    Ok((g.value(a).item(), g.value(b).item()))
}

/// Channel gate parameters: scale `λ`, per-channel `γ_c`, `β_c`, and `ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub lambda: f64,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub epsilon: f64,
}

impl GateParams {
    /// `λ = 1`, `γ = β = 0`: the identity gate.
    pub fn identity(channels: usize, epsilon: f64) -> Self {
        GateParams {
            lambda: 1.0,
            gamma: vec![0.0; channels],
            beta: vec![0.0; channels],
            epsilon,
        }
    }
}

struct GateCache {
    /// `sqrt(Σ_hw x² + ε)` per (n, c).
    root: Vec<f64>,
    /// `E` per (n, c).
    energy: Vec<f64>,
    /// `N` per n.
    norm: Vec<f64>,
    /// `tanh(γ·E/N + β)` per (n, c).
    tanh: Vec<f64>,
}

fn gate_kernel(
    x: &Tensor,
    lambda: f64,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Tensor, GateCache) {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let mut root = vec![0.0; n * c];
    let mut energy = vec![0.0; n * c];
    let mut norm = vec![0.0; n];
    let mut tanh = vec![0.0; n * c];
    let mut out = x.data().to_vec();
    for s in 0..n {
        for ch in 0..c {
            let plane = &x.data()[(s * c + ch) * hw..(s * c + ch + 1) * hw];
            let r = (plane.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            root[s * c + ch] = r;
            energy[s * c + ch] = lambda * r;
        }
        let mean_sq = energy[s * c..(s + 1) * c]
            .iter()
            .map(|e| e * e)
            .sum::<f64>()
            / c as f64;
        norm[s] = (mean_sq + eps).sqrt();
        for ch in 0..c {
            let t = (gamma[ch] * energy[s * c + ch] / norm[s] + beta[ch]).tanh();
            tanh[s * c + ch] = t;
            let gate = 1.0 + t;
            out[(s * c + ch) * hw..(s * c + ch + 1) * hw]
                .iter_mut()
                .for_each(|v| *v *= gate);
        }
    }
    (
        Tensor::from_parts(vec![n, c, h, w], out),
        GateCache {
            root,
            energy,
            norm,
            tanh,
        },
    )
}

/// Recorded gate op over `x: [N, C, h, w]`, `lambda: [1]`, `gamma, beta: [C]`.
///
/// Per sample and channel: `E = λ·sqrt(Σ x² + ε)`, `N = sqrt(mean_c E² + ε)`,
/// `g = 1 + tanh(γ·E/N + β)`, output `x·g`.
pub fn gate_op(g: &Graph, x: Var, lambda: Var, gamma: Var, beta: Var, eps: f64) -> Var {
    let xv = g.value(x);
    let lam = g.value(lambda).item();
    let gm = g.value(gamma);
    let bt = g.value(beta);
    let (n, c, h, w) = xv.dims4();
    assert_eq!(gm.numel(), c, "gate gamma length");
    assert_eq!(bt.numel(), c, "gate beta length");
    let (value, cache) = gate_kernel(&xv, lam, gm.data(), bt.data(), eps);
    g.op(&[x, lambda, gamma, beta], value, move |grad, inp, _| {
        let (x, lam, gm) = (inp[0], inp[1].item(), inp[2].data());
        let hw = h * w;
        let mut dx = vec![0.0; x.numel()];
        let mut dlam = 0.0;
        let mut dgm = vec![0.0; c];
        let mut dbt = vec![0.0; c];
        let mut a = vec![0.0; c];
        let mut de = vec![0.0; c];
        for s in 0..n {
            let nrm = cache.norm[s];
            // dL/du_c with u_c = γ_c·r_c + β_c
            for ch in 0..c {
                let i = s * c + ch;
                let xs = &x.data()[i * hw..(i + 1) * hw];
                let gs = &grad.data()[i * hw..(i + 1) * hw];
                let q: f64 = xs.iter().zip(gs).map(|(a, b)| a * b).sum();
                let t = cache.tanh[i];
                a[ch] = q * (1.0 - t * t);
                dgm[ch] += a[ch] * cache.energy[i] / nrm;
                dbt[ch] += a[ch];
            }
            let dnorm: f64 = -(0..c)
                .map(|ch| a[ch] * gm[ch] * cache.energy[s * c + ch])
                .sum::<f64>()
                / (nrm * nrm);
            for ch in 0..c {
                let e = cache.energy[s * c + ch];
                de[ch] = a[ch] * gm[ch] / nrm + dnorm * e / (c as f64 * nrm);
            }
            for ch in 0..c {
                let i = s * c + ch;
                let root = cache.root[i];
                dlam += de[ch] * root;
                let gate = 1.0 + cache.tanh[i];
                let k = de[ch] * lam / root;
                let xs = &x.data()[i * hw..(i + 1) * hw];
                let gs = &grad.data()[i * hw..(i + 1) * hw];
                for ((d, xv), gv) in dx[i * hw..(i + 1) * hw].iter_mut().zip(xs).zip(gs) {
                    *d = gv * gate + k * xv;
                }
            }
        }
        vec![
            Some(Tensor::from_parts(x.shape().to_vec(), dx)),
            Some(Tensor::from_parts(inp[1].shape().to_vec(), vec![dlam])),
            Some(Tensor::from_parts(vec![c], dgm)),
            Some(Tensor::from_parts(vec![c], dbt)),
        ]
    })
}

/// Applies the channel gate to a latent map.
pub fn gate(x: &LatentMap, p: &GateParams) -> Result<LatentMap> {
    let c = x.channels();
    if p.gamma.len() != c || p.beta.len() != c {
        return Err(Error::Shape(format!(
            "gate parameters for {} channels, map has {c}",
            p.gamma.len()
        )));
    }
    if !(p.epsilon > 0.0) {
        return Err(Error::Config("gate epsilon must be > 0".into()));
    }
    if !x.0.is_finite() {
        return Err(Error::Numeric("non-finite gate input".into()));
    }
    Ok(LatentMap(
        gate_kernel(&x.0, p.lambda, &p.gamma, &p.beta, p.epsilon).0,
    ))
}

/// Gated degradation representation of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct DegradationFeature {
    /// `[D, h, w]`.
    pub map: Tensor,
    /// Row-major flattening of `map`, length `D·h·w`.
    pub flat: Vec<f64>,
    /// Spatial mean per channel, length `D`.
    pub pooled: Vec<f64>,
    /// Code index per position, absent when quantization is bypassed.
    pub indices: Option<Vec<usize>>,
}

impl DegradationFeature {
    pub fn from_map(map: Tensor, indices: Option<Vec<usize>>) -> Self {
        assert_eq!(map.shape().len(), 3, "feature map must be [D, h, w]");
        let d = map.shape()[0];
        let hw = map.numel() / d;
        let pooled = map
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        DegradationFeature {
            flat: map.data().to_vec(),
            pooled,
            map,
            indices,
        }
    }

    /// Splits a `[N, D, h, w]` batch into per-sample features.
    pub fn split_batch(map: &Tensor, indices: Option<&[usize]>) -> Vec<Self> {
        let (n, d, h, w) = map.dims4();
        let per = d * h * w;
        (0..n)
            .map(|s| {
                let m =
                    Tensor::from_parts(vec![d, h, w], map.data()[s * per..(s + 1) * per].to_vec());
                let idx = indices.map(|i| i[s * h * w..(s + 1) * h * w].to_vec());
                Self::from_map(m, idx)
            })
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.map.shape()[0]
    }

    /// One `D`-row per spatial position: `[h·w, D]`.
    pub fn rows(&self) -> Tensor {
        let d = self.dim();
        let hw = self.map.numel() / d;
        Tensor::from_parts(
            vec![hw, d],
            crate::autograd::nchw_to_rows(self.map.data(), 1, d, hw),
        )
    }
}

/// Outputs of the degradation branch for a batch.
pub struct DaamOutput {
    /// Continuous latents `z_e`.
    pub z_e: Var,
    /// Differentiable lookup of the selected codes, when quantizing.
    pub z_q: Option<Var>,
    pub indices: Option<Vec<usize>>,
    /// Gated feature map `[N, D, h, w]`.
    pub features: Var,
}

/// Parameter handles of the degradation branch.
#[derive(Debug, Clone)]
pub struct Daam {
    pub stem: Conv2d,
    pub downs: Vec<Conv2d>,
    pub proj: Conv2d,
    pub codebook: ParamId,
    pub gate_lambda: ParamId,
    pub gate_gamma: ParamId,
    pub gate_beta: ParamId,
    pub epsilon: f64,
}

impl Daam {
    /// Extractor with `stages` stride-2 convolutions, so the latent grid is
    /// `2^stages` times smaller than the image.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        cfg: &DaamConfig,
        stages: usize,
        rng: &mut R,
    ) -> Self {
        let grp = ParamGroup::Degradation;
        let d = cfg.code_dim;
        let mut ch = (d / 4).max(8).min(d.max(8));
        let stem = Conv2d::new(store, "daam.stem", grp, ConvSpec::same(3, ch, 3), rng);
        let mut downs = Vec::with_capacity(stages);
        for i in 0..stages {
            let next = (ch * 2).min(d.max(ch));
            downs.push(Conv2d::new(
                store,
                &format!("daam.down{i}"),
                grp,
                ConvSpec::strided(ch, next, 3, 2, 1),
                rng,
            ));
            ch = next;
        }
        let proj = Conv2d::new(store, "daam.proj", grp, ConvSpec::pointwise(ch, d), rng);
        let k = cfg.num_codes;
        let bound = 1.0 / k as f64;
        let codes: Vec<f64> = (0..k * d)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        let codebook = store.add("daam.codebook", grp, Tensor::new(&[k, d], codes).unwrap());
        let gate_lambda = store.add("daam.gate.lambda", grp, Tensor::full(&[1], 1.0));
        let gate_gamma = store.add("daam.gate.gamma", grp, Tensor::zeros(&[d]));
        let gate_beta = store.add("daam.gate.beta", grp, Tensor::zeros(&[d]));
        Daam {
            stem,
            downs,
            proj,
            codebook,
            gate_lambda,
            gate_gamma,
            gate_beta,
            epsilon: cfg.gate_epsilon,
        }
    }

    pub fn reduction(&self) -> usize {
        1 << self.downs.len()
    }

    /// Continuous latents `z_e` of an image batch `[N, 3, H, W]`.
    pub fn extract(&self, g: &Graph, store: &ParamStore, x: Var) -> Var {
        let mut h = g.gelu(self.stem.forward(g, store, x));
        for down in &self.downs {
            h = g.gelu(down.forward(g, store, h));
        }
        self.proj.forward(g, store, h)
    }

    pub fn gate_params(&self, store: &ParamStore) -> GateParams {
        GateParams {
            lambda: store.value(self.gate_lambda).item(),
            gamma: store.value(self.gate_gamma).data().to_vec(),
            beta: store.value(self.gate_beta).data().to_vec(),
            epsilon: self.epsilon,
        }
    }

    pub fn codebook(&self, store: &ParamStore) -> Codebook {
        Codebook {
            codes: store.value(self.codebook).clone(),
        }
    }

    /// Extract, quantize (unless bypassed) with a straight-through gradient,
    /// then gate.
    pub fn forward(
        &self,
        g: &Graph,
        store: &ParamStore,
        x: Var,
        quantize: bool,
    ) -> Result<DaamOutput> {
        let z_e = self.extract(g, store, x);
        let ze_val = g.value(z_e);
        if !ze_val.is_finite() {
            return Err(Error::Numeric("non-finite degradation latents".into()));
        }
        let (n, _, h, w) = ze_val.dims4();
        let (pre_gate, z_q, indices) = if quantize {
            let codes = store.value(self.codebook);
            let idx = code_indices(&ze_val, codes);
            let zq_var = gather_codes(g, g.param(store, self.codebook), &idx, n, h, w);
            let st = straight_through(g, z_e, (*g.value(zq_var)).clone());
            (st, Some(zq_var), Some(idx))
        } else {
            (z_e, None, None)
        };
        let lambda = g.param(store, self.gate_lambda);
        let gamma = g.param(store, self.gate_gamma);
        let beta = g.param(store, self.gate_beta);
        let features = gate_op(g, pre_gate, lambda, gamma, beta, self.epsilon);
        Ok(DaamOutput {
            z_e,
            z_q,
            indices,
            features,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{check_gradients, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_codes() -> Codebook {
        Codebook::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap()
    }

    #[test]
    fn nearest_code_hand_cases() {
        let cb = two_codes();
        assert_eq!(nearest_code(&[0.2, 0.1], &cb).unwrap(), 0);
        assert_eq!(nearest_code(&[1.0, 1.0], &cb).unwrap(), 1);
        assert_eq!(nearest_code(&[0.5, 0.5], &cb).unwrap(), 0);
        assert!(matches!(nearest_code(&[0.5], &cb), Err(Error::Shape(_))));
    }

    #[test]
    fn codebook_needs_two_rows() {
        assert!(Codebook::from_rows(&[vec![1.0]]).is_err());
    }

    #[test]
    fn quantize_fixed_point_and_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cb = Codebook::new(random_tensor(&mut rng, &[16, 4])).unwrap();
        let lat = LatentMap::new(random_tensor(&mut rng, &[2, 4, 3, 3])).unwrap();
        let (q, idx) = quantize(&lat, &cb).unwrap();
        let (q2, idx2) = quantize(&q, &cb).unwrap();
        assert_eq!(q, q2);
        assert_eq!(idx, idx2);
    }

    #[test]
    fn gate_identity_at_zero_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = LatentMap::new(random_tensor(&mut rng, &[2, 5, 3, 4])).unwrap();
        let y = gate(&x, &GateParams::identity(5, 1e-5)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn gate_single_channel_hand_value() {
        // C = 1, λ = 1: E/N = sqrt(S+ε)/sqrt(S+ε+ε) → 1 as ε → 0.
        let x =
            LatentMap::new(Tensor::new(&[1, 1, 2, 2], vec![0.3, -0.4, 1.2, 0.5]).unwrap()).unwrap();
        let (gm, bt) = (0.7, -0.2);
        let p = GateParams {
            lambda: 1.0,
            gamma: vec![gm],
            beta: vec![bt],
            epsilon: 1e-12,
        };
        let y = gate(&x, &p).unwrap();
        let expect = 1.0 + f64::tanh(gm + bt);
        for (a, b) in y.0.data().iter().zip(x.0.data()) {
            assert!((a - b * expect).abs() < 1e-9);
        }
    }

    #[test]
    fn gate_rejects_non_finite() {
        let x = LatentMap::new(Tensor::new(&[1, 1, 1, 2], vec![f64::NAN, 1.0]).unwrap()).unwrap();
        assert!(matches!(
            gate(&x, &GateParams::identity(1, 1e-5)),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn gate_gradients_match_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_tensor(&mut rng, &[2, 3, 2, 3]);
            let lam = Tensor::new(&[1], vec![1.0 + 0.3 * seed as f64]).unwrap();
            let gm = random_tensor(&mut rng, &[3]);
            let bt = random_tensor(&mut rng, &[3]);
            let w = random_tensor(&mut rng, &[2, 3, 2, 3]);
            check_gradients(&[x, lam, gm, bt, w], 1e-4, |g, v| {
                let y = gate_op(g, v[0], v[1], v[2], v[3], 0.05);
                g.sum(g.mul(y, v[4]))
            });
        }
    }

    #[test]
    fn codebook_loss_values() {
        let one = LatentMap::new(Tensor::full(&[1, 1, 1, 1], 1.0)).unwrap();
        let zero = LatentMap::new(Tensor::zeros(&[1, 1, 1, 1])).unwrap();
        assert_eq!(codebook_losses(&one, &zero).unwrap(), (1.0, 1.0));
        assert_eq!(codebook_losses(&one, &one).unwrap(), (0.0, 0.0));
        let bad = LatentMap::new(Tensor::zeros(&[1, 2, 1, 1])).unwrap();
        assert!(codebook_losses(&one, &bad).is_err());
    }

    #[test]
    fn stop_gradient_routing() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::default();
        let cb = store.add(
            "cb",
            ParamGroup::Degradation,
            random_tensor(&mut rng, &[4, 3]),
        );
        let g = Graph::new();
        let ze = g.leaf(random_tensor(&mut rng, &[1, 3, 2, 2]));
        let idx = code_indices(&g.value(ze), store.value(cb));
        let zq = gather_codes(&g, g.param(&store, cb), &idx, 1, 2, 2);
        let (cbl, commit) = codebook_losses_op(&g, ze, zq);
        let grads = g.backward(commit);
        assert!(grads.wrt(ze).is_some());
        assert!(grads.param(cb).is_none());
        let grads = g.backward(cbl);
        assert!(grads.wrt(ze).is_none());
        assert!(grads.param(cb).is_some());
    }

    #[test]
    fn straight_through_passes_gradient_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cb = random_tensor(&mut rng, &[6, 2]);
        let w = random_tensor(&mut rng, &[1, 2, 2, 2]);
        let ze = random_tensor(&mut rng, &[1, 2, 2, 2]);
        // away from Voronoi boundaries the quantized path is locally the
        // identity on z_e, i.e. d/dz_e Σ w·st(z_e) = w
        let g = Graph::new();
        let v = g.leaf(ze.clone());
        let idx = code_indices(&ze, &cb);
        let st = straight_through(&g, v, lookup_codes(&cb, &idx, 1, 2, 2));
        let loss = g.sum(g.mul(st, g.constant(w.clone())));
        let grads = g.backward(loss);
        assert_eq!(grads.wrt(v).unwrap(), &w);
    }
}
