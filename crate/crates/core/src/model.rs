//! The full restoration model: backbone, degradation branch and the
//! test-time adaptation module, with their parameters in one store.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::adaptation::{Dam, DamConfig, DamState};
use crate::autograd::{Graph, ParamGroup, ParamStore, Var};
use crate::backbone::{Backbone, BackboneConfig};
use crate::daam::{Codebook, Daam, DaamConfig, DaamOutput, DegradationFeature, LatentMap};
use crate::data::{stack_images, unstack_images, ImageTensor};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoCscl,
    NoCodebook,
    Baseline,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoCscl,
        Variant::NoCodebook,
        Variant::Baseline,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoCscl => "no_cscl",
            Variant::NoCodebook => "no_codebook",
            Variant::Baseline => "baseline",
        }
    }

    /// Degradation features reach the decoder.
    pub fn injects(self) -> bool {
        self != Variant::Baseline
    }

    pub fn quantizes(self) -> bool {
        matches!(self, Variant::Full | Variant::NoCscl)
    }

    pub fn uses_cscl(self) -> bool {
        matches!(self, Variant::Full | Variant::NoCodebook)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub daam: DaamConfig,
    pub dam: DamConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            daam: DaamConfig::default(),
            dam: DamConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.daam.validate()?;
        self.dam.validate()
    }
}

/// Graph handles of one forward pass.
pub struct Forward {
    /// `[N, 3, H, W]`, unclamped.
    pub restored: Var,
    /// Absent for the baseline variant.
    pub daam: Option<DaamOutput>,
    /// Features handed to the decoder (after the DAM when enabled).
    pub injected: Var,
}

#[derive(Debug)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    backbone: Backbone,
    daam: Daam,
    dam: Dam,
    dam_calls: AtomicUsize,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Model {
            config: self.config.clone(),
            store: self.store.clone(),
            backbone: self.backbone.clone(),
            daam: self.daam.clone(),
            dam: self.dam.clone(),
            dam_calls: AtomicUsize::new(self.dam_calls()),
        }
    }
}

/// RNG stream used for weight initialisation.
const INIT_STREAM: u64 = 0x1417;

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, INIT_STREAM);
        let mut store = ParamStore::default();
        let d = config.daam.code_dim;
        let backbone = Backbone::new(&mut store, &config.backbone, d, &mut rng)?;
        let daam = Daam::new(&mut store, &config.daam, config.backbone.levels, &mut rng);
        let dam = Dam::new(&mut store, d, &config.dam, &mut rng);
        Ok(Model {
            config,
            store,
            backbone,
            daam,
            dam,
            dam_calls: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn daam(&self) -> &Daam {
        &self.daam
    }

    pub fn dam(&self) -> &Dam {
        &self.dam
    }

    pub fn codebook(&self) -> Codebook {
        self.daam.codebook(&self.store)
    }

    /// Number of DAM evaluations since construction or the last reset.
    pub fn dam_calls(&self) -> usize {
        self.dam_calls.load(Ordering::Relaxed)
    }

    pub fn reset_dam_calls(&self) {
        self.dam_calls.store(0, Ordering::Relaxed);
    }

    pub fn dam_state(&self) -> DamState {
        self.dam.capture(&self.store)
    }

    pub fn set_dam_state(&mut self, state: &DamState) -> Result<()> {
        self.dam.restore(&mut self.store, state)
    }

    pub fn param_count(&self, group: Option<ParamGroup>) -> usize {
        self.store.count(group)
    }

    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        self.backbone.check_input(height, width)
    }

    /// Records the DAM on `x` using parameters from `store`.
    pub fn dam_forward_var(&self, g: &Graph, store: &ParamStore, x: Var) -> Var {
        self.dam_calls.fetch_add(1, Ordering::Relaxed);
        self.dam.forward(g, store, x)
    }

    /// Degradation branch on `x: [N, 3, H, W]`.
    pub fn daam_forward(
        &self,
        g: &Graph,
        store: &ParamStore,
        x: Var,
        quantize: bool,
    ) -> Result<DaamOutput> {
        let s = g.shape(x);
        self.check_input(s[2], s[3])?;
        self.daam.forward(g, store, x, quantize)
    }

    /// Full pipeline with parameters from `store`. `dam` routes the
    /// degradation features through the adaptation module first.
    pub fn forward_with(
        &self,
        g: &Graph,
        store: &ParamStore,
        x: Var,
        variant: Variant,
        dam: bool,
    ) -> Result<Forward> {
        let enc = self.backbone.encode(g, store, x)?;
        let (daam, injected) = if variant.injects() {
            let out = self.daam.forward(g, store, x, variant.quantizes())?;
            let feat = if dam {
                self.dam_forward_var(g, store, out.features)
            } else {
                out.features
            };
            (Some(out), feat)
        } else {
            let s = g.shape(x);
            let r = self.backbone.config().reduction();
            let zero = Tensor::zeros(&[s[0], self.config.daam.code_dim, s[2] / r, s[3] / r]);
            (None, g.constant(zero))
        };
        let restored = self.backbone.decode(g, store, &enc, injected)?;
        Ok(Forward {
            restored,
            daam,
            injected,
        })
    }

    pub fn forward(&self, g: &Graph, x: Var, variant: Variant, dam: bool) -> Result<Forward> {
        self.forward_with(g, &self.store, x, variant, dam)
    }

    fn batch(&self, images: &[&ImageTensor]) -> Result<Tensor> {
        let t = stack_images(images.iter().copied())?;
        let (_, _, h, w) = t.dims4();
        self.check_input(h, w)?;
        Ok(t)
    }

    /// Restored images (clamped to `[0,1]`) and degradation features, without
    /// the DAM.
    pub fn forward_restore_batch(
        &self,
        images: &[&ImageTensor],
        variant: Variant,
    ) -> Result<(Vec<ImageTensor>, Option<Vec<DegradationFeature>>)> {
        let g = Graph::inference();
        let x = g.constant(self.batch(images)?);
        let f = self.forward(&g, x, variant, false)?;
        let restored = g.value(f.restored);
        if !restored.is_finite() {
            return Err(Error::Numeric("non-finite restoration output".into()));
        }
        let feats = f
            .daam
            .map(|d| DegradationFeature::split_batch(&g.value(d.features), d.indices.as_deref()));
        Ok((unstack_images(&restored), feats))
    }

    pub fn forward_restore(
        &self,
        image: &ImageTensor,
        variant: Variant,
    ) -> Result<(ImageTensor, Option<DegradationFeature>)> {
        let (mut imgs, feats) = self.forward_restore_batch(&[image], variant)?;
        Ok((imgs.remove(0), feats.map(|mut f| f.remove(0))))
    }

    pub fn restore(&self, image: &ImageTensor, variant: Variant) -> Result<ImageTensor> {
        Ok(self.forward_restore(image, variant)?.0)
    }

    pub fn extract_latent(&self, image: &ImageTensor) -> Result<LatentMap> {
        let g = Graph::inference();
        let x = g.constant(self.batch(&[image])?);
        LatentMap::new((*g.value(self.daam.extract(&g, &self.store, x))).clone())
    }

    /// Gated degradation features; `no_codebook` skips quantization. The
    /// baseline variant reports the quantized branch even though it does not
    /// inject it.
    pub fn degradation_features_batch(
        &self,
        images: &[&ImageTensor],
        variant: Variant,
    ) -> Result<Vec<DegradationFeature>> {
        let g = Graph::inference();
        let x = g.constant(self.batch(images)?);
        let out = self
            .daam
            .forward(&g, &self.store, x, variant != Variant::NoCodebook)?;
        Ok(DegradationFeature::split_batch(
            &g.value(out.features),
            out.indices.as_deref(),
        ))
    }

    pub fn degradation_features(
        &self,
        image: &ImageTensor,
        variant: Variant,
    ) -> Result<DegradationFeature> {
        Ok(self
            .degradation_features_batch(&[image], variant)?
            .remove(0))
    }

    /// Applies the DAM with the current parameters to a latent map.
    pub fn dam_forward(&self, latent: &LatentMap) -> Result<LatentMap> {
        if latent.channels() != self.config.daam.code_dim {
            return Err(Error::Shape(format!(
                "DAM expects {} channels, got {}",
                self.config.daam.code_dim,
                latent.channels()
            )));
        }
        let g = Graph::inference();
        let y = self.dam_forward_var(&g, &self.store, g.constant(latent.tensor().clone()));
        LatentMap::new((*g.value(y)).clone())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::backbone::BlockKind;
    use crate::data::generate_clean;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                base_dim: 4,
                levels: 2,
                blocks_per_level: 1,
                block_kind: BlockKind::Conv,
                heads: 1,
                ffn_expansion: 2,
            },
            daam: DaamConfig {
                code_dim: 8,
                num_codes: 8,
                gate_epsilon: 1e-5,
                reseed_dead_codes: true,
            },
            dam: DamConfig::default(),
        }
    }

    fn img(seed: u64) -> ImageTensor {
        generate_clean(16, 16, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn groups_are_disjoint_and_cover_store() {
        let m = Model::new(tiny_config(), 0).unwrap();
        let total: usize = ParamGroup::ALL
            .iter()
            .map(|g| m.param_count(Some(*g)))
            .sum();
        assert_eq!(total, m.param_count(None));
        let mut names: Vec<&str> = m.store().iter().map(|(_, p)| p.name.as_str()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), m.store().len());
        assert!(m.store().iter().all(|(_, p)| match p.group {
            ParamGroup::Restoration => p.name.starts_with("backbone."),
            ParamGroup::Degradation => p.name.starts_with("daam."),
            ParamGroup::Adaptation => p.name.starts_with("dam."),
        }));
    }

    #[test]
    fn restore_preserves_shape_and_is_deterministic() {
        let m = Model::new(tiny_config(), 3).unwrap();
        let x = img(1);
        let (a, fa) = m.forward_restore(&x, Variant::Full).unwrap();
        let (b, fb) = m.forward_restore(&x, Variant::Full).unwrap();
        assert_eq!(a.shape(), x.shape());
        assert_eq!(a, b);
        assert_eq!(fa, fb);
        let f = fa.unwrap();
        assert_eq!(f.flat.len(), 8 * 4 * 4);
        assert_eq!(f.indices.as_ref().unwrap().len(), 16);
    }

    fn perturb_codebook(m: &mut Model) {
        let id = m.daam().codebook;
        m.store_mut()
            .value_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = *v * 3.0 + 0.1);
    }

    #[test]
    fn baseline_ignores_degradation_branch() {
        let mut m = Model::new(tiny_config(), 4).unwrap();
        let x = img(2);
        let a = m.restore(&x, Variant::Baseline).unwrap();
        perturb_codebook(&mut m);
        let gid = m.daam().gate_gamma;
        m.store_mut().value_mut(gid).data_mut().fill(0.7);
        assert_eq!(m.restore(&x, Variant::Baseline).unwrap(), a);
    }

    #[test]
    fn no_codebook_ignores_codes_but_not_gate() {
        let mut m = Model::new(tiny_config(), 5).unwrap();
        let x = img(3);
        let a = m.restore(&x, Variant::NoCodebook).unwrap();
        let fa = m.degradation_features(&x, Variant::NoCodebook).unwrap();
        perturb_codebook(&mut m);
        assert_eq!(m.restore(&x, Variant::NoCodebook).unwrap(), a);
        assert_eq!(m.degradation_features(&x, Variant::NoCodebook).unwrap(), fa);
        let gid = m.daam().gate_gamma;
        m.store_mut().value_mut(gid).data_mut().fill(0.7);
        assert_ne!(m.restore(&x, Variant::NoCodebook).unwrap(), a);
    }

    #[test]
    fn latent_and_feature_shapes() {
        let m = Model::new(tiny_config(), 6).unwrap();
        let lat = m.extract_latent(&img(4)).unwrap();
        assert_eq!(lat.tensor().shape(), &[1, 8, 4, 4]);
        let f = m.degradation_features(&img(4), Variant::Full).unwrap();
        for (c, p) in f.pooled.iter().enumerate() {
            let plane = &f.map.data()[c * 16..(c + 1) * 16];
            assert!((plane.iter().sum::<f64>() / 16.0 - p).abs() < 1e-12);
        }
        let bad = generate_clean(10, 16, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(m.extract_latent(&bad), Err(Error::Shape(_))));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("nope".parse::<Variant>().is_err());
    }
}
