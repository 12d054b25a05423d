//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles. Values are
//! computed eagerly; calling [`Graph::backward`] on a scalar walks the tape in
//! reverse and accumulates gradients for every leaf that requires them.
//! Nodes whose inputs are all constant carry no backward closure, so a graph
//! built with [`Graph::no_grad`] is just an eager evaluator.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::conv;
use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Everything a backward closure may look at.
pub struct BackwardCtx<'a> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    /// `needs[i]` is false when input `i` does not require a gradient; the
    /// closure may return `None` for it.
    pub needs: Vec<bool>,
}

pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    bound: BTreeMap<String, Var>,
    grad_enabled: bool,
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), bound: BTreeMap::new(), grad_enabled: true }
    }

    /// A graph on which parameters are bound as constants.
    pub fn no_grad() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Vec::new(), None, requires_grad && self.grad_enabled)
    }

    /// Binds a named parameter of `store`. Repeated binds of the same name return
    /// the same node. A graph should bind parameters from a single store.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let p = store.get(name)?;
        let v = self.leaf(p.value.clone(), p.trainable);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every bound trainable parameter that the loss depends on.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .filter_map(|(name, &v)| grads.get(v).map(|g| (name.clone(), g.clone())))
            .collect()
    }

    /// Records an operation with a user-supplied backward closure. The closure
    /// is dropped when no input requires a gradient.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if requires_grad {
            self.push(value, inputs.to_vec(), Some(backward), true)
        } else {
            self.push(value, Vec::new(), None, false)
        }
    }

    fn push(&mut self, value: Tensor, parents: Vec<Var>, backward: Option<BackwardFn>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, parents, backward, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_requires(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let seed_shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(NnError::Shape(format!("backward needs a scalar loss, got {seed_shape:?}")));
        }
        grads[loss.0] = Some(Tensor::full(&seed_shape, 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(grad) = grads[idx].take() else { continue };
            let ctx = BackwardCtx {
                grad: &grad,
                inputs: node.parents.iter().map(|p| &self.nodes[p.0].value).collect(),
                output: &node.value,
                needs: node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect(),
            };
            let parent_grads = backward(&ctx)?;
            for (p, g) in node.parents.iter().zip(parent_grads) {
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                let Some(g) = g else { continue };
                match &mut grads[p.0] {
                    Some(acc) => acc.axpy(1.0, &g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }

    // ----------------------------------------------------------------- ops

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let in_shape = self.value(x).shape().to_vec();
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.custom(
            &[x],
            out,
            Box::new(move |c| Ok(vec![Some(c.grad.clone().reshape(&in_shape)?)])),
        ))
    }

    /// `op(a)·op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, trans_a: bool, b: Var, trans_b: bool) -> Result<Var> {
        let out = self.value(a).matmul_t(trans_a, self.value(b), trans_b)?;
        Ok(self.custom(
            &[a, b],
            out,
            Box::new(move |c| {
                let (av, bv, g) = (c.inputs[0], c.inputs[1], c.grad);
                let ga = if !c.needs[0] {
                    None
                } else if trans_a {
                    Some(bv.matmul_t(trans_b, g, true)?)
                } else {
                    Some(g.matmul_t(false, bv, !trans_b)?)
                };
                let gb = if !c.needs[1] {
                    None
                } else if trans_b {
                    Some(g.matmul_t(true, av, trans_a)?)
                } else {
                    Some(av.matmul_t(!trans_a, g, false)?)
                };
                Ok(vec![ga, gb])
            }),
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.custom(&[a, b], out, Box::new(|c| Ok(vec![Some(c.grad.clone()), Some(c.grad.clone())]))))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.custom(
            &[a, b],
            out,
            Box::new(|c| Ok(vec![Some(c.grad.clone()), Some(c.grad.map(|g| -g))])),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.custom(
            &[a, b],
            out,
            Box::new(|c| {
                let ga = c.needs[0].then(|| c.grad.zip_map(c.inputs[1], |g, y| g * y)).transpose()?;
                let gb = c.needs[1].then(|| c.grad.zip_map(c.inputs[0], |g, x| g * x)).transpose()?;
                Ok(vec![ga, gb])
            }),
        ))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.custom(&[x], out, Box::new(move |c| Ok(vec![Some(c.grad.map(|g| g * s))])))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let shape = self.value(x).shape().to_vec();
        let out = Tensor::scalar(self.value(x).sum());
        self.custom(&[x], out, Box::new(move |c| Ok(vec![Some(Tensor::full(&shape, c.grad.item()))])))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Adds `bias` (length = number of columns) to every row of a matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if self.value(bias).numel() != cols {
            return Err(NnError::Shape(format!("row bias of {} for {cols} columns", self.value(bias).numel())));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data();
        for row in out.data_mut().chunks_exact_mut(cols) {
            for (o, &bb) in row.iter_mut().zip(b) {
                *o += bb;
            }
        }
        let bias_shape = self.value(bias).shape().to_vec();
        Ok(self.custom(
            &[x, bias],
            out,
            Box::new(move |c| {
                let gb = if c.needs[1] {
                    let mut acc = vec![0.0; cols];
                    for row in c.grad.data().chunks_exact(cols).take(rows) {
                        for (a, &g) in acc.iter_mut().zip(row) {
                            *a += g;
                        }
                    }
                    Some(Tensor::new(&bias_shape, acc)?)
                } else {
                    None
                };
                Ok(vec![Some(c.grad.clone()), gb])
            }),
        ))
    }

    /// Adds one bias value per leading-axis slice (per channel for `[C, ...]` tensors).
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let channels = self.value(x).shape().first().copied().unwrap_or(0);
        if self.value(bias).numel() != channels || channels == 0 {
            return Err(NnError::Shape(format!(
                "channel bias of {} for input {:?}",
                self.value(bias).numel(),
                self.value(x).shape()
            )));
        }
        let per = self.value(x).numel() / channels;
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for (chunk, &bb) in out.data_mut().chunks_exact_mut(per).zip(&b) {
            chunk.iter_mut().for_each(|o| *o += bb);
        }
        let bias_shape = self.value(bias).shape().to_vec();
        Ok(self.custom(
            &[x, bias],
            out,
            Box::new(move |c| {
                let gb = if c.needs[1] {
                    let acc = c.grad.data().chunks_exact(per).map(|ch| ch.iter().sum()).collect();
                    Some(Tensor::new(&bias_shape, acc)?)
                } else {
                    None
                };
                Ok(vec![Some(c.grad.clone()), gb])
            }),
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.custom(
            &[x],
            out,
            Box::new(move |c| {
                let g = c.grad.zip_map(c.inputs[0], |g, v| if v > 0.0 { g } else { slope * g })?;
                Ok(vec![Some(g)])
            }),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const C: f64 = 0.044_715;
        let out = self.value(x).map(|v| 0.5 * v * (1.0 + (K * (v + C * v * v * v)).tanh()));
        self.custom(
            &[x],
            out,
            Box::new(|c| {
                let g = c.grad.zip_map(c.inputs[0], |g, v| {
                    let t = (K * (v + C * v * v * v)).tanh();
                    let dt = (1.0 - t * t) * K * (1.0 + 3.0 * C * v * v);
                    g * (0.5 * (1.0 + t) + 0.5 * v * dt)
                })?;
                Ok(vec![Some(g)])
            }),
        )
    }

    /// Row-wise layer normalisation of a matrix with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if self.value(gamma).numel() != cols || self.value(beta).numel() != cols {
            return Err(NnError::Shape("layer norm affine size mismatch".into()));
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..cols {
                let h = (row[j] - mean) * is;
                xhat[r * cols + j] = h;
                out[r * cols + j] = h * gv[j] + bv[j];
            }
        }
        let out = Tensor::new(&[rows, cols], out)?;
        let gshape = self.value(gamma).shape().to_vec();
        let bshape = self.value(beta).shape().to_vec();
        Ok(self.custom(
            &[x, gamma, beta],
            out,
            Box::new(move |c| {
                let g = c.grad.data();
                let gamma = c.inputs[1].data();
                let mut dx = vec![0.0; rows * cols];
                let mut dgamma = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                for r in 0..rows {
                    let gr = &g[r * cols..(r + 1) * cols];
                    let hr = &xhat[r * cols..(r + 1) * cols];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..cols {
                        let dh = gr[j] * gamma[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                    }
                    mean_dh /= cols as f64;
                    mean_dh_h /= cols as f64;
                    for j in 0..cols {
                        let dh = gr[j] * gamma[j];
                        dx[r * cols + j] = inv_std[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                Ok(vec![
                    Some(Tensor::new(&[rows, cols], dx)?),
                    Some(Tensor::new(&gshape, dgamma)?),
                    Some(Tensor::new(&bshape, dbeta)?),
                ])
            }),
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_exact_mut(cols) {
            softmax_in_place(row);
        }
        Ok(self.custom(
            &[x],
            out,
            Box::new(move |c| {
                let mut dx = vec![0.0; rows * cols];
                for ((d, y), g) in dx
                    .chunks_exact_mut(cols)
                    .zip(c.output.data().chunks_exact(cols))
                    .zip(c.grad.data().chunks_exact(cols))
                {
                    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        d[j] = y[j] * (g[j] - dot);
                    }
                }
                Ok(vec![Some(Tensor::new(&[rows, cols], dx)?)])
            }),
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose2()?;
        Ok(self.custom(&[x], out, Box::new(|c| Ok(vec![Some(c.grad.transpose2()?)]))))
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`. Indices may repeat.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.numel()) {
            return Err(NnError::Shape(format!("gather index {bad} out of range {}", xv.numel())));
        }
        let data = index.iter().map(|&i| xv.data()[i]).collect();
        let out = Tensor::new(shape, data)?;
        let in_shape = xv.shape().to_vec();
        Ok(self.custom(
            &[x],
            out,
            Box::new(move |c| {
                let mut dx = Tensor::zeros(&in_shape);
                let d = dx.data_mut();
                for (&i, &g) in index.iter().zip(c.grad.data()) {
                    d[i] += g;
                }
                Ok(vec![Some(dx)])
            }),
        ))
    }

    /// Concatenates along the leading axis; trailing dims must agree.
    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| NnError::Shape("concat of nothing".into()))?);
        let tail = first.shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() != tail.len() + 1 || v.shape()[1..] != tail[..] {
                return Err(NnError::Shape(format!("concat0: {:?} vs tail {tail:?}", v.shape())));
            }
            lead += v.shape()[0];
            sizes.push(v.numel());
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let out = Tensor::new(&shape, data)?;
        Ok(self.custom(
            parts,
            out,
            Box::new(move |c| {
                let mut offset = 0;
                let mut grads = Vec::with_capacity(sizes.len());
                for (i, &s) in sizes.iter().enumerate() {
                    let g = c.needs[i]
                        .then(|| Tensor::new(c.inputs[i].shape(), c.grad.data()[offset..offset + s].to_vec()))
                        .transpose()?;
                    grads.push(g);
                    offset += s;
                }
                Ok(grads)
            }),
        ))
    }

    /// Concatenates matrices side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(*parts.first().ok_or_else(|| NnError::Shape("concat of nothing".into()))?).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(NnError::Shape(format!("concat_cols: {r} rows vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&v[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let out = Tensor::new(&[rows, total], out)?;
        Ok(self.custom(
            parts,
            out,
            Box::new(move |c| {
                let g = c.grad.data();
                let mut off = 0;
                let mut grads = Vec::with_capacity(widths.len());
                for (i, &w) in widths.iter().enumerate() {
                    if c.needs[i] {
                        let mut d = vec![0.0; rows * w];
                        for r in 0..rows {
                            d[r * w..(r + 1) * w].copy_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        grads.push(Some(Tensor::new(&[rows, w], d)?));
                    } else {
                        grads.push(None);
                    }
                    off += w;
                }
                Ok(grads)
            }),
        ))
    }

    /// 3D convolution of a `[C, H, W, D]` input with weights `[C_out, C·k³]`
    /// (no bias; see [`Graph::add_channel_bias`]).
    pub fn conv3d(&mut self, x: Var, weight: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let geom = conv::Conv3dGeometry::new(self.value(x).shape(), kernel, stride, pad)?;
        let (c_out, wk) = self.value(weight).dims2()?;
        if wk != geom.col_rows() {
            return Err(NnError::Shape(format!(
                "conv3d weight has {wk} columns, expected {}",
                geom.col_rows()
            )));
        }
        let out = geom.forward(self.value(x).data(), self.value(weight).data(), c_out);
        let out = Tensor::new(&geom.output_shape(c_out), out)?;
        Ok(self.custom(
            &[x, weight],
            out,
            Box::new(move |c| {
                let (gx, gw) =
                    geom.backward(c.inputs[0].data(), c.inputs[1].data(), c.grad.data(), c_out, c.needs[0], c.needs[1]);
                let gx = gx.map(|v| Tensor::new(c.inputs[0].shape(), v)).transpose()?;
                let gw = gw.map(|v| Tensor::new(c.inputs[1].shape(), v)).transpose()?;
                Ok(vec![gx, gw])
            }),
        ))
    }

    /// Transposed 3D convolution with `stride == kernel` (non-overlapping
    /// upsampling). Input `[C, H, W, D]`, weights `[C, C_out·k³]`.
    pub fn conv_transpose3d(&mut self, x: Var, weight: Var, kernel: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let [c_in, h, w, d] = shape[..] else {
            return Err(NnError::Shape(format!("conv_transpose3d expects [C,H,W,D], got {shape:?}")));
        };
        let (wc, wk) = self.value(weight).dims2()?;
        let k3 = kernel * kernel * kernel;
        if wc != c_in || wk % k3 != 0 {
            return Err(NnError::Shape(format!("conv_transpose3d weight {wc}x{wk} for {c_in} channels")));
        }
        let c_out = wk / k3;
        let n = h * w * d;
        let index = Arc::new(conv::upsample_index(c_out, [h, w, d], kernel));
        let xm = self.value(x).clone().reshape(&[c_in, n])?;
        let y = self.value(weight).matmul_t(true, &xm, false)?; // [C_out·k³, N]
        let out_shape = [c_out, h * kernel, w * kernel, d * kernel];
        let mut out = vec![0.0; y.numel()];
        for (o, &src) in out.iter_mut().zip(index.iter()) {
            *o = y.data()[src];
        }
        let out = Tensor::new(&out_shape, out)?;
        Ok(self.custom(
            &[x, weight],
            out,
            Box::new(move |c| {
                let mut gy = vec![0.0; c.grad.numel()];
                for (&src, &g) in index.iter().zip(c.grad.data()) {
                    gy[src] = g;
                }
                let gy = Tensor::new(&[c_out * k3, n], gy)?;
                let gx = if c.needs[0] {
                    Some(c.inputs[1].matmul(&gy)?.reshape(&[c_in, h, w, d])?)
                } else {
                    None
                };
                let gw = if c.needs[1] {
                    let xm = c.inputs[0].clone().reshape(&[c_in, n])?;
                    Some(xm.matmul_t(false, &gy, true)?)
                } else {
                    None
                };
                Ok(vec![gx, gw])
            }),
        ))
    }

    /// True if any of `inputs` requires a gradient.
    pub fn tracks(&self, inputs: &[Var]) -> bool {
        self.any_requires(inputs)
    }
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
