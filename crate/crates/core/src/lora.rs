//! Low-rank adapters: `y = W·x + scale·B(A·x)` with `A: r×in`, `B: out×r`.

use cfr_nn::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LoRAAdapter {
    /// Name of the `out×in` weight this adapter bypasses.
    pub target: String,
    pub rank: usize,
    pub a: Tensor,
    pub b: Tensor,
    pub scale: f64,
}

impl LoRAAdapter {
    pub fn out_features(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn in_features(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn num_params(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    /// The dense update `scale·B·A`.
    pub fn delta(&self) -> Tensor {
        self.b.matmul(&self.a).expect("adapter factors conform").map(|v| v * self.scale)
    }

    fn check_weight(&self, w: &Tensor) -> Result<()> {
        let (out, inp) = w.dims2()?;
        if (out, inp) != (self.out_features(), self.in_features()) {
            return Err(shape(format!(
                "weight {out}x{inp} vs adapter {}x{}",
                self.out_features(),
                self.in_features()
            )));
        }
        Ok(())
    }
}

/// `A ~ N(0, 1/in)` from `seed`, `B = 0`, scale 1.
pub fn lora_init(target: impl Into<String>, out: usize, inp: usize, rank: usize, seed: u64) -> Result<LoRAAdapter> {
    if rank == 0 || rank > out.min(inp) {
        return Err(invalid(format!("rank {rank} must be in 1..={}", out.min(inp))));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(LoRAAdapter {
        target: target.into(),
        rank,
        a: Tensor::randn(&[rank, inp], (1.0 / inp as f64).sqrt(), &mut rng),
        b: Tensor::zeros(&[out, rank]),
        scale: 1.0,
    })
}

/// `x` is a vector `[in]` or a batch of column vectors `[in, n]`.
pub fn lora_forward(w: &Tensor, adapter: &LoRAAdapter, x: &Tensor) -> Result<Tensor> {
    adapter.check_weight(w)?;
    let (cols, shape_out) = match x.shape() {
        [n] => (x.clone().reshape(&[*n, 1])?, vec![w.shape()[0]]),
        [_, n] => (x.clone(), vec![w.shape()[0], *n]),
        other => return Err(shape(format!("input must be 1D or 2D, got {other:?}"))),
    };
    if cols.shape()[0] != adapter.in_features() {
        return Err(shape(format!("input has {} rows, weight expects {}", cols.shape()[0], adapter.in_features())));
    }
    let mut y = w.matmul(&cols)?;
    let low = adapter.b.matmul(&adapter.a.matmul(&cols)?)?;
    y.axpy(adapter.scale, &low)?;
    Ok(y.reshape(&shape_out)?)
}

/// `W + scale·B·A`, for adapter-free inference.
pub fn lora_merge(w: &Tensor, adapter: &LoRAAdapter) -> Result<Tensor> {
    adapter.check_weight(w)?;
    let mut merged = w.clone();
    merged.axpy(1.0, &adapter.delta())?;
    Ok(merged)
}

/// Row-batched adapted projection on the graph: `x·Wᵀ + scale·(x·Aᵀ)·Bᵀ`, `x: [N, in]`.
pub fn lora_linear(g: &mut Graph, x: Var, w: Var, a: Var, b: Var, scale: f64) -> Result<Var> {
    let base = g.matmul_t(x, false, w, true)?;
    let down = g.matmul_t(x, false, a, true)?;
    let up = g.matmul_t(down, false, b, true)?;
    let up = g.scale(up, scale);
    Ok(g.add(base, up)?)
}
