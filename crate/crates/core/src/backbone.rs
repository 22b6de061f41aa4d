//! U-shaped restoration network. Encoder levels halve resolution and double
//! width; every decoder level concatenates the upsampled path, the encoder
//! skip and the degradation features resampled to its resolution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamGroup, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{ChannelNorm, Conv2d, ConvSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Conv,
    Transformer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub base_dim: usize,
    /// Downsampling stages; the bottleneck is `2^levels` times smaller.
    pub levels: usize,
    pub blocks_per_level: usize,
    pub block_kind: BlockKind,
    /// Attention heads at the first level, doubled at each level below.
    pub heads: usize,
    /// Hidden width of the feed-forward part of a transformer block.
    pub ffn_expansion: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            base_dim: 24,
            levels: 3,
            blocks_per_level: 2,
            block_kind: BlockKind::Transformer,
            heads: 1,
            ffn_expansion: 2,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_dim < 4 {
            return Err(Error::Config(format!(
                "base_dim must be >= 4, got {}",
                self.base_dim
            )));
        }
        if self.levels < 2 {
            return Err(Error::Config(format!(
                "levels must be >= 2, got {}",
                self.levels
            )));
        }
        if self.block_kind == BlockKind::Transformer {
            if self.heads == 0 || self.base_dim % self.heads != 0 {
                return Err(Error::Config(format!(
                    "{} heads do not divide base_dim {}",
                    self.heads, self.base_dim
                )));
            }
            if self.ffn_expansion == 0 {
                return Err(Error::Config("ffn_expansion must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn reduction(&self) -> usize {
        1 << self.levels
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_dim << level
    }

    pub fn bottleneck_dim(&self) -> usize {
        self.width(self.levels)
    }
}

#[derive(Debug, Clone)]
struct ConvBlock {
    a: Conv2d,
    b: Conv2d,
}

#[derive(Debug, Clone)]
struct TransformerBlock {
    norm1: ChannelNorm,
    qkv: Conv2d,
    temperature: ParamId,
    proj: Conv2d,
    norm2: ChannelNorm,
    ffn_in: Conv2d,
    ffn_out: Conv2d,
    heads: usize,
}

#[derive(Debug, Clone)]
enum Block {
    Conv(ConvBlock),
    Transformer(TransformerBlock),
}

impl Block {
    fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cfg: &BackboneConfig,
        ch: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        let grp = ParamGroup::Restoration;
        match cfg.block_kind {
            BlockKind::Conv => Block::Conv(ConvBlock {
                a: Conv2d::new(
                    store,
                    &format!("{name}.conv1"),
                    grp,
                    ConvSpec::same(ch, ch, 3),
                    rng,
                ),
                b: Conv2d::new(
                    store,
                    &format!("{name}.conv2"),
                    grp,
                    ConvSpec::same(ch, ch, 3),
                    rng,
                ),
            }),
            BlockKind::Transformer => {
                let hidden = ch * cfg.ffn_expansion;
                Block::Transformer(TransformerBlock {
                    norm1: ChannelNorm::new(store, &format!("{name}.norm1"), grp, ch),
                    qkv: Conv2d::new(
                        store,
                        &format!("{name}.qkv"),
                        grp,
                        ConvSpec::pointwise(ch, 3 * ch),
                        rng,
                    ),
                    temperature: store.add(
                        format!("{name}.temperature"),
                        grp,
                        Tensor::full(&[heads], 1.0),
                    ),
                    proj: Conv2d::new(
                        store,
                        &format!("{name}.proj"),
                        grp,
                        ConvSpec::pointwise(ch, ch),
                        rng,
                    ),
                    norm2: ChannelNorm::new(store, &format!("{name}.norm2"), grp, ch),
                    ffn_in: Conv2d::new(
                        store,
                        &format!("{name}.ffn1"),
                        grp,
                        ConvSpec::pointwise(ch, hidden),
                        rng,
                    ),
                    ffn_out: Conv2d::new(
                        store,
                        &format!("{name}.ffn2"),
                        grp,
                        ConvSpec::pointwise(hidden, ch),
                        rng,
                    ),
                    heads,
                })
            }
        }
    }

    fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Var {
        match self {
            Block::Conv(b) => {
                let h = g.gelu(b.a.forward(g, store, x));
                g.add(x, b.b.forward(g, store, h))
            }
            Block::Transformer(b) => {
                let a = b.attention(g, store, b.norm1.forward(g, store, x));
                let x = g.add(x, a);
                let h = g.gelu(b.ffn_in.forward(g, store, b.norm2.forward(g, store, x)));
                g.add(x, b.ffn_out.forward(g, store, h))
            }
        }
    }
}

impl TransformerBlock {
    /// Attention across channels: per head, a `c×c` map from
    /// L2-normalised queries and keys over all positions.
    fn attention(&self, g: &Graph, store: &ParamStore, x: Var) -> Var {
        let shape = g.shape(x);
        let (n, ch, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let per = ch / self.heads;
        let qkv = self.qkv.forward(g, store, x);
        let split = |i: usize| {
            g.reshape(
                g.slice_channels(qkv, i * ch, ch),
                &[n * self.heads, per, h * w],
            )
        };
        let q = g.l2_normalize_last(split(0), 1e-12);
        let k = g.l2_normalize_last(split(1), 1e-12);
        let v = split(2);
        let attn = g.bmm(q, k, true);
        let attn = g.softmax_last(g.scale_per_head(attn, g.param(store, self.temperature)));
        let out = g.reshape(g.bmm(attn, v, false), &[n, ch, h, w]);
        self.proj.forward(g, store, out)
    }
}

/// Encoder activations kept for the decoder.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub input: Var,
    pub bottleneck: Var,
    /// Finest level first.
    pub skips: Vec<Var>,
}

#[derive(Debug, Clone)]
struct DecoderLevel {
    up: Conv2d,
    fuse: Conv2d,
    blocks: Vec<Block>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: BackboneConfig,
    deg_dim: usize,
    intro: Conv2d,
    enc_blocks: Vec<Vec<Block>>,
    downs: Vec<Conv2d>,
    mid: Vec<Block>,
    /// Finest level first.
    dec: Vec<DecoderLevel>,
    out: Conv2d,
}

impl Backbone {
    /// `deg_dim` is the channel count of the injected degradation features.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        cfg: &BackboneConfig,
        deg_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let grp = ParamGroup::Restoration;
        let heads = |l: usize| cfg.heads << l;
        let blocks =
            |store: &mut ParamStore, rng: &mut R, prefix: String, l: usize| -> Vec<Block> {
                (0..cfg.blocks_per_level)
                    .map(|i| {
                        Block::new(
                            store,
                            &format!("{prefix}.block{i}"),
                            cfg,
                            cfg.width(l),
                            heads(l),
                            rng,
                        )
                    })
                    .collect()
            };
        let intro = Conv2d::new(
            store,
            "backbone.intro",
            grp,
            ConvSpec::same(3, cfg.base_dim, 3),
            rng,
        );
        let mut enc_blocks = Vec::new();
        let mut downs = Vec::new();
        for l in 0..cfg.levels {
            enc_blocks.push(blocks(store, rng, format!("backbone.enc{l}"), l));
            let spec = ConvSpec::strided(cfg.width(l), cfg.width(l + 1), 2, 2, 0);
            downs.push(Conv2d::new(
                store,
                &format!("backbone.down{l}"),
                grp,
                spec,
                rng,
            ));
        }
        let mid = blocks(store, rng, "backbone.mid".into(), cfg.levels);
        let mut dec = Vec::new();
        for l in 0..cfg.levels {
            let c = cfg.width(l);
            dec.push(DecoderLevel {
                up: Conv2d::new(
                    store,
                    &format!("backbone.dec{l}.up"),
                    grp,
                    ConvSpec::pointwise(2 * c, c),
                    rng,
                ),
                fuse: Conv2d::new(
                    store,
                    &format!("backbone.dec{l}.fuse"),
                    grp,
                    ConvSpec::pointwise(2 * c + deg_dim, c),
                    rng,
                ),
                blocks: blocks(store, rng, format!("backbone.dec{l}"), l),
            });
        }
        let out = Conv2d::new(
            store,
            "backbone.out",
            grp,
            ConvSpec::same(cfg.base_dim, 3, 3),
            rng,
        );
        Ok(Backbone {
            cfg: cfg.clone(),
            deg_dim,
            intro,
            enc_blocks,
            downs,
            mid,
            dec,
            out,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn deg_dim(&self) -> usize {
        self.deg_dim
    }

    /// Shape error unless both sides are positive multiples of the reduction.
    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let r = self.cfg.reduction();
        if height == 0 || width == 0 || height % r != 0 || width % r != 0 {
            return Err(Error::Shape(format!(
                "{height}x{width} input is not divisible by the {r}x reduction"
            )));
        }
        Ok(())
    }

    /// `x: [N, 3, H, W]`.
    pub fn encode(&self, g: &Graph, store: &ParamStore, x: Var) -> Result<EncoderOutput> {
        let shape = g.shape(x);
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::Shape(format!(
                "backbone expects [N, 3, H, W], got {shape:?}"
            )));
        }
        self.check_input(shape[2], shape[3])?;
        let mut h = self.intro.forward(g, store, x);
        let mut skips = Vec::with_capacity(self.cfg.levels);
        for (blocks, down) in self.enc_blocks.iter().zip(&self.downs) {
            for b in blocks {
                h = b.forward(g, store, h);
            }
            skips.push(h);
            h = down.forward(g, store, h);
        }
        for b in &self.mid {
            h = b.forward(g, store, h);
        }
        Ok(EncoderOutput {
            input: x,
            bottleneck: h,
            skips,
        })
    }

    /// Restored image `[N, 3, H, W]`; `deg` is `[N, deg_dim, h, w]` at any
    /// resolution.
    pub fn decode(
        &self,
        g: &Graph,
        store: &ParamStore,
        enc: &EncoderOutput,
        deg: Var,
    ) -> Result<Var> {
        let ds = g.shape(deg);
        let n = g.shape(enc.input)[0];
        if ds.len() != 4 || ds[1] != self.deg_dim {
            return Err(Error::Config(format!(
                "decoder expects {} degradation channels, got shape {ds:?}",
                self.deg_dim
            )));
        }
        if ds[0] != n {
            return Err(Error::Shape(format!(
                "degradation batch {} vs image batch {n}",
                ds[0]
            )));
        }
        let mut h = enc.bottleneck;
        for l in (0..self.cfg.levels).rev() {
            let level = &self.dec[l];
            let skip = enc.skips[l];
            let ss = g.shape(skip);
            let up = level
                .up
                .forward(g, store, g.resize_nearest(h, ss[2], ss[3]));
            let d = g.resize_nearest(deg, ss[2], ss[3]);
            h = level
                .fuse
                .forward(g, store, g.concat_channels(&[up, skip, d]));
            for b in &level.blocks {
                h = b.forward(g, store, h);
            }
        }
        Ok(g.add(enc.input, self.out.forward(g, store, h)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::random_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(kind: BlockKind) -> BackboneConfig {
        BackboneConfig {
            base_dim: 4,
            levels: 2,
            blocks_per_level: 1,
            block_kind: kind,
            heads: 2,
            ffn_expansion: 2,
        }
    }

    fn image(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Tensor {
        random_tensor(rng, &[n, 3, h, w]).map(|v| 0.5 + 0.25 * v)
    }

    #[test]
    fn shape_round_trip_and_injection_is_live() {
        for kind in [BlockKind::Conv, BlockKind::Transformer] {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut store = ParamStore::default();
            let bb = Backbone::new(&mut store, &small(kind), 5, &mut rng).unwrap();
            let g = Graph::inference();
            let x = g.constant(image(&mut rng, 2, 8, 12));
            let enc = bb.encode(&g, &store, x).unwrap();
            assert_eq!(g.shape(enc.bottleneck), vec![2, 16, 2, 3]);
            let zero = g.constant(Tensor::zeros(&[2, 5, 2, 3]));
            let feat = g.constant(random_tensor(&mut rng, &[2, 5, 2, 3]));
            let a = g.value(bb.decode(&g, &store, &enc, zero).unwrap());
            let b = g.value(bb.decode(&g, &store, &enc, feat).unwrap());
            assert_eq!(a.shape(), &[2, 3, 8, 12]);
            assert!(a.max_abs_diff(&b) > 0.0);
        }
    }

    #[test]
    fn indivisible_input_is_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::default();
        let bb = Backbone::new(&mut store, &small(BlockKind::Conv), 3, &mut rng).unwrap();
        let g = Graph::inference();
        let x = g.constant(image(&mut rng, 1, 10, 8));
        assert!(matches!(bb.encode(&g, &store, x), Err(Error::Shape(_))));
    }

    #[test]
    fn wrong_feature_channels_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::default();
        let bb = Backbone::new(&mut store, &small(BlockKind::Conv), 3, &mut rng).unwrap();
        let g = Graph::inference();
        let enc = bb
            .encode(&g, &store, g.constant(image(&mut rng, 1, 8, 8)))
            .unwrap();
        let feat = g.constant(Tensor::zeros(&[1, 4, 2, 2]));
        assert!(matches!(
            bb.decode(&g, &store, &enc, feat),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn config_validation() {
        let mut c = small(BlockKind::Transformer);
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = small(BlockKind::Conv);
        c.levels = 1;
        assert!(c.validate().is_err());
        c.levels = 3;
        c.base_dim = 2;
        assert!(c.validate().is_err());
    }

    #[test]
    fn transformer_block_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = small(BlockKind::Transformer);
        let mut store = ParamStore::default();
        let block = Block::new(&mut store, "b", &cfg, 4, 2, &mut rng);
        let x = random_tensor(&mut rng, &[1, 4, 2, 3]);
        let w = random_tensor(&mut rng, &[1, 4, 2, 3]);
        crate::testing::check_gradients(&[x, w], 1e-4, |g, v| {
            let y = block.forward(g, &store, v[0]);
            g.sum(g.mul(y, v[1]))
        });
    }
}
