//! The 2D segmenter that is fine-tuned on slice grids.
//!
//! A small ViT encoder (patch embedding, learned positions, pre-norm blocks)
//! whose base weights stay frozen. Rank-`r` adapters on the query and value
//! projections plus a light decoder are the only trainable parts. The decoder
//! upsamples the token grid with two kernel-equals-stride transposed
//! convolutions and ends in a 1×1 head with one channel per class.

mod loss;
mod train;

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use cfr_nn::init::{kaiming_normal, xavier_normal};
use cfr_nn::{Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, CfrError, Result};
use crate::lora::{lora_init, lora_linear, LoRAAdapter};

pub use loss::{dice_ce_loss, dice_ce_loss_var, LossParts, DICE_EPS};
pub use train::{finetune, prepare_pair, FinetuneConfig, FinetuneTrace, OptimizerKind};

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seg2DConfig {
    pub input_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub num_classes: usize,
    pub lora_rank: usize,
    /// Channels after the first and second upsampling stage.
    #[serde(default = "default_decoder_channels")]
    pub decoder_channels: [usize; 2],
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    pub seed: u64,
}

fn default_decoder_channels() -> [usize; 2] {
    [16, 8]
}

fn default_mlp_ratio() -> usize {
    4
}

impl Default for Seg2DConfig {
    fn default() -> Self {
        Self {
            input_size: 128,
            patch_size: 16,
            embed_dim: 96,
            depth: 4,
            num_heads: 4,
            num_classes: 2,
            lora_rank: 4,
            decoder_channels: default_decoder_channels(),
            mlp_ratio: default_mlp_ratio(),
            seed: 0,
        }
    }
}

impl Seg2DConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CfrError::Config(m));
        if self.patch_size == 0 || self.input_size == 0 || !self.input_size.is_multiple_of(self.patch_size) {
            return bad(format!("input size {} is not a multiple of patch size {}", self.input_size, self.patch_size));
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!("embed dim {} not divisible by {} heads", self.embed_dim, self.num_heads));
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.lora_rank == 0 || self.lora_rank > self.embed_dim {
            return bad(format!("lora rank {} outside 1..={}", self.lora_rank, self.embed_dim));
        }
        if self.depth == 0 || self.mlp_ratio == 0 || self.decoder_channels.contains(&0) {
            return bad("depth, mlp ratio and decoder channels must be positive".into());
        }
        Ok(())
    }

    /// Tokens per side.
    pub fn grid_tokens(&self) -> usize {
        self.input_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid_tokens().pow(2)
    }

    /// Upsampling factors of the two decoder stages; their product is the patch size.
    pub fn upsample_factors(&self) -> (usize, usize) {
        let p = self.patch_size;
        let u2 = (1..=p).find(|&u| p.is_multiple_of(u) && u * u >= p).unwrap_or(p);
        (p / u2, u2)
    }

    fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Seg2D {
    pub config: Seg2DConfig,
    pub params: ParamStore,
}

fn blk(i: usize, name: &str) -> String {
    format!("enc.blk{i}.{name}")
}

fn adapter_names(i: usize, proj: &str) -> (String, String) {
    (format!("lora.blk{i}.{proj}.a"), format!("lora.blk{i}.{proj}.b"))
}

/// Std of the frozen patch-embedding bias.
const PATCH_BIAS_STD: f64 = 0.5;

pub fn build_seg2d(config: &Seg2DConfig) -> Result<Seg2D> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let e = config.embed_dim;
    let p2 = config.patch_size.pow(2);
    let hidden = e * config.mlp_ratio;
    let [c1, c2] = config.decoder_channels;
    let (u1, u2) = config.upsample_factors();
    let mut ps = ParamStore::new();
    let frozen = |ps: &mut ParamStore, name: String, t: Tensor| ps.insert(name, t, false);

    frozen(&mut ps, "enc.patch.w".into(), xavier_normal(&[e, p2], p2, e, &mut rng))?;
    // A non-zero bias keeps patch intensity visible after LayerNorm, which is
    // otherwise blind to the scale of a uniform patch.
    frozen(&mut ps, "enc.patch.b".into(), Tensor::randn(&[e], PATCH_BIAS_STD, &mut rng))?;
    frozen(&mut ps, "enc.pos".into(), Tensor::randn(&[config.num_tokens(), e], 0.02, &mut rng))?;
    for i in 0..config.depth {
        for ln in ["ln1", "ln2"] {
            frozen(&mut ps, blk(i, &format!("{ln}.g")), Tensor::full(&[e], 1.0))?;
            frozen(&mut ps, blk(i, &format!("{ln}.b")), Tensor::zeros(&[e]))?;
        }
        for proj in ["q", "k", "v", "o"] {
            frozen(&mut ps, blk(i, &format!("attn.{proj}.w")), xavier_normal(&[e, e], e, e, &mut rng))?;
            frozen(&mut ps, blk(i, &format!("attn.{proj}.b")), Tensor::zeros(&[e]))?;
        }
        frozen(&mut ps, blk(i, "mlp.fc1.w"), xavier_normal(&[hidden, e], e, hidden, &mut rng))?;
        frozen(&mut ps, blk(i, "mlp.fc1.b"), Tensor::zeros(&[hidden]))?;
        frozen(&mut ps, blk(i, "mlp.fc2.w"), xavier_normal(&[e, hidden], hidden, e, &mut rng))?;
        frozen(&mut ps, blk(i, "mlp.fc2.b"), Tensor::zeros(&[e]))?;
        for proj in ["q", "v"] {
            let ad = lora_init(blk(i, &format!("attn.{proj}.w")), e, e, config.lora_rank, rng.random())?;
            let (an, bn) = adapter_names(i, proj);
            ps.insert(an, ad.a, true)?;
            ps.insert(bn, ad.b, true)?;
        }
    }
    frozen(&mut ps, "enc.ln.g".into(), Tensor::full(&[e], 1.0))?;
    frozen(&mut ps, "enc.ln.b".into(), Tensor::zeros(&[e]))?;

    ps.insert("dec.up1.w", kaiming_normal(&[u1 * u1 * c1, e], e, &mut rng), true)?;
    ps.insert("dec.up1.b", Tensor::zeros(&[c1]), true)?;
    ps.insert("dec.up2.w", kaiming_normal(&[u2 * u2 * c2, c1], c1, &mut rng), true)?;
    ps.insert("dec.up2.b", Tensor::zeros(&[c2]), true)?;
    ps.insert("dec.head.w", xavier_normal(&[config.num_classes, c2], c2, config.num_classes, &mut rng), true)?;
    ps.insert("dec.head.b", Tensor::zeros(&[config.num_classes]), true)?;
    Ok(Seg2D { config: config.clone(), params: ps })
}

/// Row-major `[T, p²]` patch matrix of an `S×S` image.
fn patchify(x: &[f64], s: usize, p: usize) -> Tensor {
    let g = s / p;
    let mut out = Vec::with_capacity(s * s);
    for ty in 0..g {
        for tx in 0..g {
            for a in 0..p {
                let row = (ty * p + a) * s + tx * p;
                out.extend_from_slice(&x[row..row + p]);
            }
        }
    }
    Tensor::new(&[g * g, p * p], out).expect("patch shape")
}

/// Pixel shuffle for a kernel-equals-stride transposed conv: `[g², u²·c]`
/// (sub-position major, channel minor) to `[(g·u)², c]`.
fn shuffle_index(g: usize, u: usize, c: usize) -> Arc<Vec<usize>> {
    let gu = g * u;
    let mut idx = Vec::with_capacity(gu * gu * c);
    for y in 0..gu {
        for x in 0..gu {
            let t = (y / u) * g + x / u;
            let sub = (y % u) * u + x % u;
            for ch in 0..c {
                idx.push(t * u * u * c + sub * c + ch);
            }
        }
    }
    Arc::new(idx)
}

fn column_index(rows: usize, cols: usize, start: usize, width: usize) -> Arc<Vec<usize>> {
    Arc::new((0..rows).flat_map(|r| (start..start + width).map(move |c| r * cols + c)).collect())
}

impl Seg2D {
    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn num_trainable_params(&self) -> usize {
        self.params.num_trainable_scalars()
    }

    pub fn trainable_fraction(&self) -> f64 {
        self.num_trainable_params() as f64 / self.num_params() as f64
    }

    /// The q/v adapters as standalone objects.
    pub fn adapters(&self) -> Result<Vec<LoRAAdapter>> {
        let mut out = Vec::new();
        for i in 0..self.config.depth {
            for proj in ["q", "v"] {
                let (an, bn) = adapter_names(i, proj);
                out.push(LoRAAdapter {
                    target: blk(i, &format!("attn.{proj}.w")),
                    rank: self.config.lora_rank,
                    a: self.params.value(&an)?.clone(),
                    b: self.params.value(&bn)?.clone(),
                    scale: 1.0,
                });
            }
        }
        Ok(out)
    }

    /// Records the forward pass for an `S×S` image; returns `[K, S·S]` logits.
    pub fn forward_graph(&self, g: &mut Graph, image: &Tensor) -> Result<Var> {
        let cfg = &self.config;
        let s = cfg.input_size;
        if image.shape() != [s, s] {
            return Err(shape(format!("input {:?}, model expects [{s}, {s}]", image.shape())));
        }
        if !image.is_finite() {
            return Err(invalid("non-finite input image"));
        }
        let ps = &self.params;
        let (t, e, dh) = (cfg.num_tokens(), cfg.embed_dim, cfg.head_dim());
        let p = |g: &mut Graph, name: &str| g.param(ps, name);

        let patches = g.constant(patchify(image.data(), s, cfg.patch_size));
        let (w, b, pos) = (p(g, "enc.patch.w")?, p(g, "enc.patch.b")?, p(g, "enc.pos")?);
        let x = g.matmul_t(patches, false, w, true)?;
        let x = g.add_row_bias(x, b)?;
        let mut x = g.add(x, pos)?;

        let heads: Vec<Arc<Vec<usize>>> = (0..cfg.num_heads).map(|h| column_index(t, e, h * dh, dh)).collect();
        let attn_scale = 1.0 / (dh as f64).sqrt();
        for i in 0..cfg.depth {
            let (g1, b1) = (p(g, &blk(i, "ln1.g"))?, p(g, &blk(i, "ln1.b"))?);
            let xn = g.layer_norm(x, g1, b1, LN_EPS)?;
            let proj = |g: &mut Graph, name: &str| -> Result<Var> {
                let w = p(g, &blk(i, &format!("attn.{name}.w")))?;
                let b = p(g, &blk(i, &format!("attn.{name}.b")))?;
                let y = if name == "q" || name == "v" {
                    let (an, bn) = adapter_names(i, name);
                    let (a, bb) = (p(g, &an)?, p(g, &bn)?);
                    lora_linear(g, xn, w, a, bb, 1.0)?
                } else {
                    g.matmul_t(xn, false, w, true)?
                };
                Ok(g.add_row_bias(y, b)?)
            };
            let (q, k, v) = (proj(g, "q")?, proj(g, "k")?, proj(g, "v")?);
            let mut outs = Vec::with_capacity(cfg.num_heads);
            for idx in &heads {
                let qh = g.gather(q, idx.clone(), &[t, dh])?;
                let kh = g.gather(k, idx.clone(), &[t, dh])?;
                let vh = g.gather(v, idx.clone(), &[t, dh])?;
                let scores = g.matmul_t(qh, false, kh, true)?;
                let scores = g.scale(scores, attn_scale);
                let att = g.softmax_rows(scores)?;
                outs.push(g.matmul(att, vh)?);
            }
            let merged = g.concat_cols(&outs)?;
            let (wo, bo) = (p(g, &blk(i, "attn.o.w"))?, p(g, &blk(i, "attn.o.b"))?);
            let o = g.matmul_t(merged, false, wo, true)?;
            let o = g.add_row_bias(o, bo)?;
            let h = g.add(x, o)?;

            let (g2, b2) = (p(g, &blk(i, "ln2.g"))?, p(g, &blk(i, "ln2.b"))?);
            let hn = g.layer_norm(h, g2, b2, LN_EPS)?;
            let (w1, bb1) = (p(g, &blk(i, "mlp.fc1.w"))?, p(g, &blk(i, "mlp.fc1.b"))?);
            let (w2, bb2) = (p(g, &blk(i, "mlp.fc2.w"))?, p(g, &blk(i, "mlp.fc2.b"))?);
            let m = g.matmul_t(hn, false, w1, true)?;
            let m = g.add_row_bias(m, bb1)?;
            let m = g.gelu(m);
            let m = g.matmul_t(m, false, w2, true)?;
            let m = g.add_row_bias(m, bb2)?;
            x = g.add(h, m)?;
        }
        let (gf, bf) = (p(g, "enc.ln.g")?, p(g, "enc.ln.b")?);
        let feats = g.layer_norm(x, gf, bf, LN_EPS)?;
        self.decode(g, feats)
    }

    fn decode(&self, g: &mut Graph, feats: Var) -> Result<Var> {
        let cfg = &self.config;
        let ps = &self.params;
        let [c1, c2] = cfg.decoder_channels;
        let (u1, u2) = cfg.upsample_factors();
        let gt = cfg.grid_tokens();
        let stage = |g: &mut Graph, x: Var, name: &str, side: usize, u: usize, c: usize| -> Result<Var> {
            let w = g.param(ps, &format!("dec.{name}.w"))?;
            let b = g.param(ps, &format!("dec.{name}.b"))?;
            let y = g.matmul_t(x, false, w, true)?;
            let fine = side * u;
            let y = g.gather(y, shuffle_index(side, u, c), &[fine * fine, c])?;
            let y = g.add_row_bias(y, b)?;
            Ok(g.gelu(y))
        };
        let y = stage(g, feats, "up1", gt, u1, c1)?;
        let y = stage(g, y, "up2", gt * u1, u2, c2)?;
        let (wh, bh) = (g.param(ps, "dec.head.w")?, g.param(ps, "dec.head.b")?);
        let logits = g.matmul_t(y, false, wh, true)?;
        let logits = g.add_row_bias(logits, bh)?;
        Ok(g.transpose(logits)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let meta = serde_json::json!({ "kind": "seg2d", "config": self.config }).to_string();
        Ok(self.params.write_to(&meta, w)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let (meta, params) = ParamStore::read_from(r)?;
        let meta: serde_json::Value = serde_json::from_str(&meta)?;
        if meta["kind"] != "seg2d" {
            return Err(invalid(format!("checkpoint kind {} is not seg2d", meta["kind"])));
        }
        let config: Seg2DConfig = serde_json::from_value(meta["config"].clone())?;
        let fresh = build_seg2d(&config)?;
        if !fresh.params.same_layout(&params) {
            return Err(invalid("checkpoint parameters do not match the stored config"));
        }
        Ok(Self { config, params })
    }
}

/// Inference on an `S×S` image; returns `[K, S, S]` logits.
pub fn forward_2d(model: &Seg2D, image: &Tensor) -> Result<Tensor> {
    let mut g = Graph::no_grad();
    let out = model.forward_graph(&mut g, image)?;
    let s = model.config.input_size;
    Ok(g.value(out).clone().reshape(&[model.config.num_classes, s, s])?)
}
