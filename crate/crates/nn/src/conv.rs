//! im2col / col2im for channels-first 3D volumes.

use std::cell::RefCell;

use crate::error::{NnError, Result};
use crate::tensor::{gemm_ld, MatRef};

/// Shape bookkeeping for a cubic-kernel 3D convolution over `[C, H, W, D]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dGeometry {
    pub channels: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv3dGeometry {
    pub fn new(input_shape: &[usize], kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        let [channels, h, w, d] = input_shape[..] else {
            return Err(NnError::Shape(format!("conv3d expects [C,H,W,D], got {input_shape:?}")));
        };
        if kernel == 0 || stride == 0 {
            return Err(NnError::Shape("conv3d kernel and stride must be positive".into()));
        }
        let mut output = [0; 3];
        for (o, &i) in output.iter_mut().zip(&[h, w, d]) {
            let padded = i + 2 * pad;
            if padded < kernel {
                return Err(NnError::Shape(format!("conv3d kernel {kernel} larger than padded input {padded}")));
            }
            *o = (padded - kernel) / stride + 1;
        }
        Ok(Self { channels, input: [h, w, d], output, kernel, stride, pad })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel.pow(3)
    }

    pub fn out_voxels(&self) -> usize {
        self.output.iter().product()
    }

    pub fn output_shape(&self, c_out: usize) -> [usize; 4] {
        [c_out, self.output[0], self.output[1], self.output[2]]
    }


    /// Output positions `o < out_extent` whose source coordinate at kernel
    /// offset `k` lies inside `[0, extent)`.
    #[inline]
    fn valid(&self, k: usize, extent: usize, out_extent: usize) -> std::ops::Range<usize> {
        let (s, p) = (self.stride, self.pad);
        let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
        let hi = if extent + p > k { ((extent - 1 + p - k) / s + 1).min(out_extent) } else { 0 };
        lo..hi.max(lo)
    }

    fn slab_voxels(&self, y0: usize, y1: usize) -> usize {
        (y1 - y0) * self.output[1] * self.output[2]
    }

    /// Output rows processed per slab so the column buffer stays near `budget` scalars.
    pub fn slab_rows(&self, budget: usize) -> usize {
        let per_row = self.col_rows() * self.output[1] * self.output[2];
        (budget / per_row.max(1)).clamp(1, self.output[0].max(1))
    }

    /// Columns for output rows `y0..y1` into `dst` (`[C·k³, slab voxels]`), fully overwritten.
    /// Row index `((c·k + kh)·k + kw)·k + kd`.
    pub fn im2col_slab(&self, x: &[f64], y0: usize, y1: usize, dst: &mut [f64]) {
        let [h, w, d] = self.input;
        let [_, ow, od] = self.output;
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        let n = self.slab_voxels(y0, y1);
        let dst = &mut dst[..self.col_rows() * n];
        dst.fill(0.0);
        for c in 0..self.channels {
            let xc = &x[c * h * w * d..(c + 1) * h * w * d];
            for kh in 0..k {
                let ys = self.valid(kh, h, self.output[0]);
                for kw in 0..k {
                    let xs = self.valid(kw, w, ow);
                    for kd in 0..k {
                        let zs = self.valid(kd, d, od);
                        let row = ((c * k + kh) * k + kw) * k + kd;
                        let out = &mut dst[row * n..(row + 1) * n];
                        for y in y0.max(ys.start)..y1.min(ys.end) {
                            let ih = y * s + kh - p;
                            for xx in xs.clone() {
                                let iw = xx * s + kw - p;
                                let bi = (ih * w + iw) * d + kd;
                                let bo = ((y - y0) * ow + xx) * od;
                                if s == 1 {
                                    let len = zs.len();
                                    let src = bi + zs.start - p;
                                    out[bo + zs.start..bo + zs.start + len].copy_from_slice(&xc[src..src + len]);
                                } else {
                                    for z in zs.clone() {
                                        out[bo + z] = xc[bi + z * s - p];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds slab columns (layout of [`Self::im2col_slab`]) into `x`.
    pub fn col2im_slab(&self, cols: &[f64], y0: usize, y1: usize, x: &mut [f64]) {
        let [h, w, d] = self.input;
        let [_, ow, od] = self.output;
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        let n = self.slab_voxels(y0, y1);
        for c in 0..self.channels {
            let xc = &mut x[c * h * w * d..(c + 1) * h * w * d];
            for kh in 0..k {
                let ys = self.valid(kh, h, self.output[0]);
                for kw in 0..k {
                    let xs = self.valid(kw, w, ow);
                    for kd in 0..k {
                        let zs = self.valid(kd, d, od);
                        let row = ((c * k + kh) * k + kw) * k + kd;
                        let src = &cols[row * n..(row + 1) * n];
                        for y in y0.max(ys.start)..y1.min(ys.end) {
                            let ih = y * s + kh - p;
                            for xx in xs.clone() {
                                let iw = xx * s + kw - p;
                                let bi = (ih * w + iw) * d + kd;
                                let bo = ((y - y0) * ow + xx) * od;
                                for z in zs.clone() {
                                    xc[bi + z * s - p] += src[bo + z];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Column matrix `[C·k³, out_voxels]` for the whole output.
    pub fn im2col(&self, x: &[f64]) -> crate::Tensor {
        let mut cols = vec![0.0; self.col_rows() * self.out_voxels()];
        self.im2col_slab(x, 0, self.output[0], &mut cols);
        crate::Tensor::new(&[self.col_rows(), self.out_voxels()], cols).expect("im2col shape")
    }

    /// Scatter-adds a full column-gradient matrix back to input layout.
    pub fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.channels * self.input.iter().product::<usize>()];
        self.col2im_slab(cols, 0, self.output[0], &mut x);
        x
    }

    /// `W·im2col(x)` as `[C_out, out_voxels]`, built slab by slab.
    pub fn forward(&self, x: &[f64], weight: &[f64], c_out: usize) -> Vec<f64> {
        let n = self.out_voxels();
        let kr = self.col_rows();
        let mut out = vec![0.0; c_out * n];
        let step = self.slab_rows(SLAB_BUDGET);
        with_scratch(|cols, _| {
            cols.resize(kr * self.slab_voxels(0, step), 0.0);
            for y0 in (0..self.output[0]).step_by(step) {
                let y1 = (y0 + step).min(self.output[0]);
                let m = self.slab_voxels(y0, y1);
                self.im2col_slab(x, y0, y1, cols);
                let off = y0 * self.output[1] * self.output[2];
                gemm_ld(c_out, kr, m, 1.0, MatRef::new(weight, kr, false), MatRef::new(&cols[..kr * m], m, false), 0.0, &mut out[off..], n);
            }
        });
        out
    }

    /// Gradients of [`Self::forward`] w.r.t. the input and the weights, given the output gradient `g`.
    pub fn backward(
        &self,
        x: &[f64],
        weight: &[f64],
        g: &[f64],
        c_out: usize,
        need_x: bool,
        need_w: bool,
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
        let n = self.out_voxels();
        let kr = self.col_rows();
        let mut gx = need_x.then(|| vec![0.0; x.len()]);
        let mut gw = need_w.then(|| vec![0.0; c_out * kr]);
        let step = self.slab_rows(SLAB_BUDGET);
        with_scratch(|cols, dcols| {
            let cap = kr * self.slab_voxels(0, step);
            cols.resize(cap, 0.0);
            dcols.resize(cap, 0.0);
            for y0 in (0..self.output[0]).step_by(step) {
                let y1 = (y0 + step).min(self.output[0]);
                let m = self.slab_voxels(y0, y1);
                let off = y0 * self.output[1] * self.output[2];
                let gs = MatRef::strided(&g[off..], n, 1);
                if let Some(gw) = gw.as_mut() {
                    self.im2col_slab(x, y0, y1, cols);
                    gemm_ld(c_out, m, kr, 1.0, gs, MatRef::new(&cols[..kr * m], m, true), 1.0, gw, kr);
                }
                if let Some(gx) = gx.as_mut() {
                    gemm_ld(kr, c_out, m, 1.0, MatRef::new(weight, kr, true), gs, 0.0, dcols, m);
                    self.col2im_slab(&dcols[..kr * m], y0, y1, gx);
                }
            }
        });
        (gx, gw)
    }
}

/// Column-buffer size (in scalars) per slab.
const SLAB_BUDGET: usize = 1 << 19;

thread_local! {
    static SCRATCH: RefCell<(Vec<f64>, Vec<f64>)> = const { RefCell::new((Vec::new(), Vec::new())) };
}

fn with_scratch<R>(f: impl FnOnce(&mut Vec<f64>, &mut Vec<f64>) -> R) -> R {
    SCRATCH.with(|s| {
        let mut s = s.borrow_mut();
        let (a, b) = &mut *s;
        f(a, b)
    })
}

/// For a stride-`k` transposed convolution producing `[C_out, H·k, W·k, D·k]`,
/// the flat index into the `[C_out·k³, H·W·D]` product matrix that feeds each
/// output voxel, in output order.
pub fn upsample_index(c_out: usize, [h, w, d]: [usize; 3], k: usize) -> Vec<usize> {
    let n = h * w * d;
    let (oh, ow, od) = (h * k, w * k, d * k);
    let mut idx = Vec::with_capacity(c_out * oh * ow * od);
    for co in 0..c_out {
        for y in 0..oh {
            for x in 0..ow {
                for z in 0..od {
                    let (a, b, cc) = (y % k, x % k, z % k);
                    let voxel = ((y / k) * w + x / k) * d + z / k;
                    let row = co * k * k * k + (a * k + b) * k + cc;
                    idx.push(row * n + voxel);
                }
            }
        }
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct-loop convolution used as an oracle for the im2col path.
    fn direct_conv(x: &[f64], g: &Conv3dGeometry, w: &[f64], c_out: usize) -> Vec<f64> {
        let [h, wd, d] = g.input;
        let [oh, ow, od] = g.output;
        let k = g.kernel;
        let mut out = vec![0.0; c_out * oh * ow * od];
        for co in 0..c_out {
            for y in 0..oh {
                for xx in 0..ow {
                    for z in 0..od {
                        let mut acc = 0.0;
                        for c in 0..g.channels {
                            for kh in 0..k {
                                for kw in 0..k {
                                    for kd in 0..k {
                                        let ih = (y * g.stride + kh) as isize - g.pad as isize;
                                        let iw = (xx * g.stride + kw) as isize - g.pad as isize;
                                        let id = (z * g.stride + kd) as isize - g.pad as isize;
                                        if ih < 0 || iw < 0 || id < 0 {
                                            continue;
                                        }
                                        let (ih, iw, id) = (ih as usize, iw as usize, id as usize);
                                        if ih >= h || iw >= wd || id >= d {
                                            continue;
                                        }
                                        let wi = co * g.col_rows() + ((c * k + kh) * k + kw) * k + kd;
                                        acc += w[wi] * x[((c * h + ih) * wd + iw) * d + id];
                                    }
                                }
                            }
                        }
                        out[((co * oh + y) * ow + xx) * od + z] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        for &(k, s, p) in &[(3, 1, 1), (2, 2, 0), (3, 2, 1), (1, 1, 0)] {
            let shape = [2, 5, 4, 6];
            let g = Conv3dGeometry::new(&shape, k, s, p).unwrap();
            let x: Vec<f64> = (0..shape.iter().product::<usize>()).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let c_out = 3;
            let w: Vec<f64> = (0..c_out * g.col_rows()).map(|i| ((i * 13 % 7) as f64) * 0.25 - 0.7).collect();
            let wt = crate::Tensor::new(&[c_out, g.col_rows()], w.clone()).unwrap();
            let got = wt.matmul(&g.im2col(&x)).unwrap();
            let want = direct_conv(&x, &g, &w, c_out);
            for (a, b) in got.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let shape = [2, 4, 3, 5];
        let g = Conv3dGeometry::new(&shape, 3, 2, 1).unwrap();
        let x: Vec<f64> = (0..120).map(|i| (i as f64 * 0.37).sin()).collect();
        let cols = g.im2col(&x);
        let y: Vec<f64> = (0..cols.numel()).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = cols.data().iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = g.col2im(&y);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn upsample_index_is_a_permutation() {
        let idx = upsample_index(2, [2, 3, 1], 2);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..idx.len()).collect::<Vec<_>>());
    }

    #[test]
    fn slabbed_forward_and_backward_match_whole_matrix() {
        // 8·27 column rows × 32·36 voxels per output row gives several slabs.
        for &(k, s, p) in &[(3, 1, 1), (2, 2, 0)] {
            let shape = [8, 5, 32, 36];
            let g = Conv3dGeometry::new(&shape, k, s, p).unwrap();
            if k == 3 {
                assert!(g.slab_rows(SLAB_BUDGET) < g.output[0]);
            }
            let x: Vec<f64> = (0..shape.iter().product::<usize>()).map(|i| (i as f64 * 0.013).sin()).collect();
            let c_out = 3;
            let w: Vec<f64> = (0..c_out * g.col_rows()).map(|i| (i as f64 * 0.7).cos()).collect();
            let wt = crate::Tensor::new(&[c_out, g.col_rows()], w.clone()).unwrap();
            let cols = g.im2col(&x);
            let want = wt.matmul(&cols).unwrap();
            let got = g.forward(&x, &w, c_out);
            assert!(got.iter().zip(want.data()).all(|(a, b)| (a - b).abs() < 1e-9));

            let up: Vec<f64> = (0..got.len()).map(|i| (i as f64 * 0.31).cos()).collect();
            let upt = crate::Tensor::new(&[c_out, g.out_voxels()], up.clone()).unwrap();
            let (gx, gw) = g.backward(&x, &w, &up, c_out, true, true);
            let want_w = upt.matmul_t(false, &cols, true).unwrap();
            let want_x = g.col2im(wt.matmul_t(true, &upt, false).unwrap().data());
            assert!(gw.unwrap().iter().zip(want_w.data()).all(|(a, b)| (a - b).abs() < 1e-8));
            assert!(gx.unwrap().iter().zip(&want_x).all(|(a, b)| (a - b).abs() < 1e-9));
        }
    }
}
