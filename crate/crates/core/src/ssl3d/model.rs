//! V-Net-style 3D encoder–decoder.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use cfr_nn::init::kaiming_normal;
use cfr_nn::{Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, CfrError, Result};
use crate::pseudo_label::argmax_classes;
use crate::volume_io::{Dims, LabelVolume, Volume3D};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seg3DConfig {
    pub num_classes: usize,
    /// Channels at full resolution; doubled at every level down.
    pub base_channels: usize,
    /// Resolution levels, including the full-resolution one.
    pub levels: usize,
    pub convs_per_level: usize,
    pub seed: u64,
}

impl Default for Seg3DConfig {
    fn default() -> Self {
        Self { num_classes: 2, base_channels: 8, levels: 3, convs_per_level: 2, seed: 0 }
    }
}

impl Seg3DConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.base_channels == 0 || self.levels == 0 || self.convs_per_level == 0 {
            return Err(CfrError::Config(format!("invalid seg3d config {self:?}")));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Input extents must be divisible by this factor.
    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Seg3D {
    pub config: Seg3DConfig,
    pub params: ParamStore,
}

fn conv_params(ps: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, k: usize) -> Result<()> {
    let fan_in = cin * k * k * k;
    ps.insert(format!("{name}.w"), kaiming_normal(&[cout, fan_in], fan_in, rng), true)?;
    ps.insert(format!("{name}.b"), Tensor::zeros(&[cout]), true)?;
    Ok(())
}

pub fn build_seg3d(config: &Seg3DConfig) -> Result<Seg3D> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut ps = ParamStore::new();
    let rng = &mut rng;
    for l in 0..config.levels {
        let c = config.channels(l);
        let mut cin = if l == 0 { 1 } else { config.channels(l - 1) };
        if l > 0 {
            conv_params(&mut ps, rng, &format!("enc{l}.down"), cin, c, 2)?;
            cin = c;
        }
        for j in 0..config.convs_per_level {
            conv_params(&mut ps, rng, &format!("enc{l}.conv{j}"), if j == 0 { cin } else { c }, c, 3)?;
        }
    }
    for l in (0..config.levels - 1).rev() {
        let (c, below) = (config.channels(l), config.channels(l + 1));
        // Transposed conv weights are [C_in, C_out·k³].
        let fan_in = below * 8;
        ps.insert(format!("dec{l}.up.w"), kaiming_normal(&[below, c * 8], fan_in, rng), true)?;
        ps.insert(format!("dec{l}.up.b"), Tensor::zeros(&[c]), true)?;
        for j in 0..config.convs_per_level {
            conv_params(&mut ps, rng, &format!("dec{l}.conv{j}"), if j == 0 { 2 * c } else { c }, c, 3)?;
        }
    }
    conv_params(&mut ps, rng, "head", config.base_channels, config.num_classes, 1)?;
    Ok(Seg3D { config: config.clone(), params: ps })
}

impl Seg3D {
    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn check_dims(&self, dims: Dims) -> Result<()> {
        let f = self.config.divisor();
        if dims.iter().any(|&d| d % f != 0) {
            return Err(shape(format!("volume {dims:?} not divisible by {f}")));
        }
        Ok(())
    }

    /// Records the forward pass of a `[1, H, W, D]` input; returns `[K, H, W, D]` logits.
    pub fn forward_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let dims = match g.value(x).shape() {
            &[1, h, w, d] => [h, w, d],
            other => return Err(shape(format!("seg3d input must be [1, H, W, D], got {other:?}"))),
        };
        self.check_dims(dims)?;
        let cfg = &self.config;
        let ps = &self.params;
        let layer = |g: &mut Graph, x: Var, name: &str, k: usize, stride: usize, relu: bool| -> Result<Var> {
            let w = g.param(ps, &format!("{name}.w"))?;
            let b = g.param(ps, &format!("{name}.b"))?;
            let y = g.conv3d(x, w, k, stride, k / 2 * usize::from(stride == 1))?;
            let y = g.add_channel_bias(y, b)?;
            Ok(if relu { g.relu(y) } else { y })
        };
        let mut skips = Vec::with_capacity(cfg.levels);
        let mut h = x;
        for l in 0..cfg.levels {
            if l > 0 {
                h = layer(g, h, &format!("enc{l}.down"), 2, 2, true)?;
            }
            for j in 0..cfg.convs_per_level {
                h = layer(g, h, &format!("enc{l}.conv{j}"), 3, 1, true)?;
            }
            skips.push(h);
        }
        for l in (0..cfg.levels - 1).rev() {
            let w = g.param(ps, &format!("dec{l}.up.w"))?;
            let b = g.param(ps, &format!("dec{l}.up.b"))?;
            let up = g.conv_transpose3d(h, w, 2)?;
            let up = g.add_channel_bias(up, b)?;
            let up = g.relu(up);
            h = g.concat0(&[up, skips[l]])?;
            for j in 0..cfg.convs_per_level {
                h = layer(g, h, &format!("dec{l}.conv{j}"), 3, 1, true)?;
            }
        }
        layer(g, h, "head", 1, 1, false)
    }

    /// Logits for a volume, `[K, H, W, D]`.
    pub fn logits(&self, vol: &Volume3D) -> Result<Tensor> {
        let mut g = Graph::no_grad();
        let x = g.constant(vol.to_tensor());
        let out = self.forward_graph(&mut g, x)?;
        Ok(g.value(out).clone())
    }

    pub fn predict(&self, vol: &Volume3D) -> Result<LabelVolume> {
        LabelVolume::new(vol.dims(), argmax_classes(&self.logits(vol)?), self.config.num_classes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let meta = serde_json::json!({ "kind": "seg3d", "config": self.config }).to_string();
        Ok(self.params.write_to(&meta, w)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let (meta, params) = ParamStore::read_from(r)?;
        let meta: serde_json::Value = serde_json::from_str(&meta)?;
        if meta["kind"] != "seg3d" {
            return Err(invalid(format!("checkpoint kind {} is not seg3d", meta["kind"])));
        }
        let config: Seg3DConfig = serde_json::from_value(meta["config"].clone())?;
        if !build_seg3d(&config)?.params.same_layout(&params) {
            return Err(invalid("checkpoint parameters do not match the stored config"));
        }
        Ok(Self { config, params })
    }
}

/// Binds `x + N(0, σ²)` (or `x` itself when `noise` is `None`) as a constant.
pub(crate) fn input_node(g: &mut Graph, vol: &Tensor, noise: Option<&Tensor>) -> Var {
    match noise {
        Some(n) => g.constant(vol.zip_map(n, |a, b| a + b).expect("noise shape")),
        None => g.constant(vol.clone()),
    }
}

/// Hard labels of `[K, ...]` logits, shared as a loss target.
pub(crate) fn hard_target(logits: &Tensor) -> Arc<Vec<u8>> {
    Arc::new(argmax_classes(logits))
}
