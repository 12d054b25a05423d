//! Slice-grid concatenation: tiles the `D` depth slices of a volume into a
//! `d×d` mosaic (`d = ⌈√D⌉`, row-major cell order, zero padding) and back.
//!
//! Also hosts the resolution matching used in front of the 2D encoder and
//! the slice perturbations used for continuity/integrity ablations.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::volume_io::{Dims, LabelVolume, StoredVolume, Volume3D};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellOrder {
    /// Slice `k` goes to cell `(k / d, k % d)`.
    RowMajor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridLayout {
    /// Cells per grid row and column.
    pub grid: usize,
    pub depth: usize,
    pub pad_slices: usize,
    pub slice_h: usize,
    pub slice_w: usize,
    pub order: CellOrder,
}

pub fn grid_layout(h: usize, w: usize, depth: usize) -> GridLayout {
    let grid = ceil_sqrt(depth.max(1));
    GridLayout { grid, depth, pad_slices: grid * grid - depth, slice_h: h, slice_w: w, order: CellOrder::RowMajor }
}

fn ceil_sqrt(n: usize) -> usize {
    let mut r = (n as f64).sqrt() as usize;
    while r * r < n {
        r += 1;
    }
    while r > 0 && (r - 1) * (r - 1) >= n {
        r -= 1;
    }
    r
}

impl GridLayout {
    pub fn for_dims(dims: Dims) -> Self {
        grid_layout(dims[0], dims[1], dims[2])
    }

    pub fn rows(&self) -> usize {
        self.slice_h * self.grid
    }

    pub fn cols(&self) -> usize {
        self.slice_w * self.grid
    }

    pub fn dims(&self) -> Dims {
        [self.slice_h, self.slice_w, self.depth]
    }

    /// `(cell_row, cell_col)` of slice `k`.
    pub fn cell_of(&self, k: usize) -> (usize, usize) {
        match self.order {
            CellOrder::RowMajor => (k / self.grid, k % self.grid),
        }
    }

    /// Grid pixel index of voxel `(h, w, k)`.
    #[inline]
    pub fn pixel_of(&self, h: usize, w: usize, k: usize) -> usize {
        let (r, c) = self.cell_of(k);
        (r * self.slice_h + h) * self.cols() + c * self.slice_w + w
    }

    fn expect_dims(&self, dims: Dims) -> Result<()> {
        if dims != self.dims() {
            return Err(shape(format!("volume dims {dims:?} do not match layout {:?}", self.dims())));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridKind {
    Image,
    Label,
}

#[derive(Clone, Debug, PartialEq)]
pub enum GridPixels {
    Image(Vec<f32>),
    Labels { data: Vec<u8>, num_classes: usize },
}

/// A 2D mosaic plus the layout needed to undo it. `height × width` equals the
/// layout's `(H·d, W·d)` straight out of [`concatenate`]; after
/// [`resize_grid`] it is the resampled size.
#[derive(Clone, Debug, PartialEq)]
pub struct GridImage {
    pub layout: GridLayout,
    pub height: usize,
    pub width: usize,
    pub pixels: GridPixels,
}

impl GridImage {
    pub fn kind(&self) -> GridKind {
        match self.pixels {
            GridPixels::Image(_) => GridKind::Image,
            GridPixels::Labels { .. } => GridKind::Label,
        }
    }

    pub fn image_data(&self) -> Option<&[f32]> {
        match &self.pixels {
            GridPixels::Image(d) => Some(d),
            GridPixels::Labels { .. } => None,
        }
    }

    pub fn label_data(&self) -> Option<&[u8]> {
        match &self.pixels {
            GridPixels::Labels { data, .. } => Some(data),
            GridPixels::Image(_) => None,
        }
    }

    pub fn num_classes(&self) -> Option<usize> {
        match self.pixels {
            GridPixels::Labels { num_classes, .. } => Some(num_classes),
            GridPixels::Image(_) => None,
        }
    }
}

fn tile<T: Copy + Default>(data: &[T], layout: &GridLayout) -> Vec<T> {
    let [h, w, d] = layout.dims();
    let mut out = vec![T::default(); layout.rows() * layout.cols()];
    for hh in 0..h {
        for ww in 0..w {
            let base = (hh * w + ww) * d;
            for k in 0..d {
                out[layout.pixel_of(hh, ww, k)] = data[base + k];
            }
        }
    }
    out
}

fn untile<T: Copy + Default>(grid: &[T], layout: &GridLayout) -> Vec<T> {
    let [h, w, d] = layout.dims();
    let mut out = vec![T::default(); h * w * d];
    for hh in 0..h {
        for ww in 0..w {
            let base = (hh * w + ww) * d;
            for k in 0..d {
                out[base + k] = grid[layout.pixel_of(hh, ww, k)];
            }
        }
    }
    out
}

/// Volumes that can be laid out as a slice grid.
pub trait Tileable {
    fn tile(&self, layout: &GridLayout) -> Result<GridImage>;
}

impl Tileable for Volume3D {
    fn tile(&self, layout: &GridLayout) -> Result<GridImage> {
        layout.expect_dims(self.dims())?;
        Ok(GridImage {
            layout: *layout,
            height: layout.rows(),
            width: layout.cols(),
            pixels: GridPixels::Image(tile(self.data(), layout)),
        })
    }
}

impl Tileable for LabelVolume {
    fn tile(&self, layout: &GridLayout) -> Result<GridImage> {
        layout.expect_dims(self.dims())?;
        Ok(GridImage {
            layout: *layout,
            height: layout.rows(),
            width: layout.cols(),
            pixels: GridPixels::Labels { data: tile(self.data(), layout), num_classes: self.num_classes() },
        })
    }
}

impl Tileable for StoredVolume {
    fn tile(&self, layout: &GridLayout) -> Result<GridImage> {
        match self {
            StoredVolume::Image(v) => v.tile(layout),
            StoredVolume::Labels(v) => v.tile(layout),
        }
    }
}

/// Forward transform: slice `k` lands in cell `(k div d, k mod d)`; cells past
/// the last slice stay zero.
pub fn concatenate<V: Tileable + ?Sized>(vol: &V, layout: &GridLayout) -> Result<GridImage> {
    vol.tile(layout)
}

/// Exact left inverse of [`concatenate`]; padding cells are dropped.
pub fn inverse_concatenate(grid: &GridImage, layout: &GridLayout) -> Result<StoredVolume> {
    if grid.height != layout.rows() || grid.width != layout.cols() {
        return Err(shape(format!(
            "grid is {}x{}, layout expects {}x{}",
            grid.height,
            grid.width,
            layout.rows(),
            layout.cols()
        )));
    }
    let dims = layout.dims();
    Ok(match &grid.pixels {
        GridPixels::Image(d) => StoredVolume::Image(Volume3D::new(dims, untile(d, layout))?),
        GridPixels::Labels { data, num_classes } => {
            StoredVolume::Labels(LabelVolume::new(dims, untile(data, layout), *num_classes)?)
        }
    })
}

/// Convenience wrappers for the common typed cases.
pub fn inverse_concatenate_image(grid: &GridImage, layout: &GridLayout) -> Result<Volume3D> {
    inverse_concatenate(grid, layout)?.into_image().ok_or_else(|| invalid("expected an image grid"))
}

pub fn inverse_concatenate_labels(grid: &GridImage, layout: &GridLayout) -> Result<LabelVolume> {
    inverse_concatenate(grid, layout)?.into_labels().ok_or_else(|| invalid("expected a label grid"))
}

/// Splits a volume into consecutive depth chunks of at most `slices` slices,
/// so each chunk tiles into a smaller `⌈√slices⌉` grid (concatenation-scale ablation).
pub fn split_depth(vol: &Volume3D, slices: usize) -> Result<Vec<Volume3D>> {
    if slices == 0 {
        return Err(invalid("chunk size must be positive"));
    }
    let [h, w, d] = vol.dims();
    (0..d)
        .step_by(slices)
        .map(|start| {
            let len = slices.min(d - start);
            let mut chunk = Volume3D::zeros([h, w, len])?;
            for k in 0..len {
                chunk.set_slice(k, &vol.slice(start + k))?;
            }
            Ok(chunk)
        })
        .collect()
}

// ------------------------------------------------------------------ resizing

/// Half-pixel-centre source coordinate for output index `o`.
#[inline]
fn source_coord(o: usize, src: usize, dst: usize) -> f64 {
    let s = (o as f64 + 0.5) * (src as f64 / dst as f64) - 0.5;
    s.clamp(0.0, (src - 1) as f64)
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Bilinear resampling of a row-major `h×w` plane.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    if h == out_h && w == out_w {
        return src.to_vec();
    }
    let xs: Vec<(usize, usize, f64)> = (0..out_w)
        .map(|x| {
            let s = source_coord(x, w, out_w);
            let x0 = s.floor() as usize;
            (x0, (x0 + 1).min(w - 1), s - x0 as f64)
        })
        .collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let s = source_coord(y, h, out_h);
        let y0 = s.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = s - y0 as f64;
        let (r0, r1) = (&src[y0 * w..(y0 + 1) * w], &src[y1 * w..(y1 + 1) * w]);
        for &(x0, x1, tx) in &xs {
            out.push(lerp(lerp(r0[x0], r0[x1], tx), lerp(r1[x0], r1[x1], tx), ty));
        }
    }
    out
}

/// Nearest-neighbour resampling; output values are always drawn from the input.
pub fn resize_nearest<T: Copy>(src: &[T], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<T> {
    if h == out_h && w == out_w {
        return src.to_vec();
    }
    let pick = |o: usize, n: usize, dst: usize| (((o as f64 + 0.5) * n as f64 / dst as f64) as usize).min(n - 1);
    let xs: Vec<usize> = (0..out_w).map(|x| pick(x, w, out_w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let row = pick(y, h, out_h) * w;
        out.extend(xs.iter().map(|&x| src[row + x]));
    }
    out
}

fn resize_to(grid: &GridImage, out_h: usize, out_w: usize) -> Result<GridImage> {
    if out_h == 0 || out_w == 0 {
        return Err(invalid("resize target must be positive"));
    }
    let pixels = match &grid.pixels {
        GridPixels::Image(d) => {
            let wide: Vec<f64> = d.iter().map(|&v| f64::from(v)).collect();
            GridPixels::Image(
                resize_bilinear(&wide, grid.height, grid.width, out_h, out_w).into_iter().map(|v| v as f32).collect(),
            )
        }
        GridPixels::Labels { data, num_classes } => GridPixels::Labels {
            data: resize_nearest(data, grid.height, grid.width, out_h, out_w),
            num_classes: *num_classes,
        },
    };
    Ok(GridImage { layout: grid.layout, height: out_h, width: out_w, pixels })
}

/// Resamples a grid to `target × target` (bilinear for images, nearest for labels).
pub fn resize_grid(grid: &GridImage, target: usize) -> Result<GridImage> {
    resize_to(grid, target, target)
}

/// Resamples a grid back to its layout's native `(H·d, W·d)` size.
pub fn unresize_grid(grid: &GridImage) -> Result<GridImage> {
    resize_to(grid, grid.layout.rows(), grid.layout.cols())
}

// --------------------------------------------------------------- perturbation

#[derive(Clone, Debug, PartialEq)]
pub enum Perturbation {
    /// Random permutation of the slice order.
    ShuffleSlices,
    /// Independent rotation by a multiple of 90° and optional flip per slice.
    RotFlipSlices,
    /// Replace the `count` outermost slices (alternating first/last) with the
    /// supplied `H×W` images, cycling through them.
    MixNatural { images: Vec<Vec<f32>>, count: usize },
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PerturbRecord {
    /// New slice `k` holds old slice `permutation[k]`.
    pub permutation: Option<Vec<usize>>,
    /// Per slice: quarter turns and whether it was flipped.
    pub rotflip: Vec<(u8, bool)>,
    /// Slice indices replaced by natural images.
    pub replaced: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Perturbed {
    pub volume: Volume3D,
    pub labels: Option<LabelVolume>,
    pub record: PerturbRecord,
}

/// Rotates a square `n×n` slice by `quarter_turns × 90°` counter-clockwise,
/// then mirrors columns if `flip`.
pub fn rotflip_slice<T: Copy>(s: &[T], n: usize, quarter_turns: u8, flip: bool) -> Vec<T> {
    let mut cur = s.to_vec();
    for _ in 0..quarter_turns % 4 {
        let mut next = cur.clone();
        for i in 0..n {
            for j in 0..n {
                next[i * n + j] = cur[j * n + (n - 1 - i)];
            }
        }
        cur = next;
    }
    if flip {
        for row in cur.chunks_exact_mut(n) {
            row.reverse();
        }
    }
    cur
}

/// Outermost-first slice order: `0, D-1, 1, D-2, …`.
fn outermost_order(depth: usize) -> Vec<usize> {
    let (mut lo, mut hi) = (0, depth);
    let mut out = Vec::with_capacity(depth);
    while lo < hi {
        out.push(lo);
        lo += 1;
        if lo < hi {
            hi -= 1;
            out.push(hi);
        }
    }
    out
}

/// Applies a perturbation to a volume and, when given, the matching labels.
pub fn perturb(vol: &Volume3D, labels: Option<&LabelVolume>, mode: &Perturbation, seed: u64) -> Result<Perturbed> {
    if let Some(l) = labels {
        l.assert_pairs_with(vol)?;
    }
    let [h, w, d] = vol.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vol.clone();
    let mut out_labels = labels.cloned();
    let mut record = PerturbRecord::default();
    match mode {
        Perturbation::ShuffleSlices => {
            let mut perm: Vec<usize> = (0..d).collect();
            perm.shuffle(&mut rng);
            for (k, &src) in perm.iter().enumerate() {
                out.set_slice(k, &vol.slice(src))?;
                if let (Some(ol), Some(l)) = (out_labels.as_mut(), labels) {
                    ol.set_slice(k, &l.slice(src))?;
                }
            }
            record.permutation = Some(perm);
        }
        Perturbation::RotFlipSlices => {
            for k in 0..d {
                let choice: u8 = rng.random_range(0..8);
                let (turns, flip) = (choice % 4, choice >= 4);
                out.set_slice(k, &rotflip_slice(&vol.slice(k), h, turns, flip))?;
                if let (Some(ol), Some(l)) = (out_labels.as_mut(), labels) {
                    ol.set_slice(k, &rotflip_slice(&l.slice(k), h, turns, flip))?;
                }
                record.rotflip.push((turns, flip));
            }
        }
        Perturbation::MixNatural { images, count } => {
            if *count > d {
                return Err(invalid(format!("cannot replace {count} slices of a depth-{d} volume")));
            }
            if *count > 0 && images.is_empty() {
                return Err(invalid("mix_natural needs at least one replacement image"));
            }
            if let Some(bad) = images.iter().find(|im| im.len() != h * w) {
                return Err(shape(format!("natural image has {} pixels, slices have {}", bad.len(), h * w)));
            }
            let blank = vec![0u8; h * w];
            for (i, &k) in outermost_order(d).iter().take(*count).enumerate() {
                out.set_slice(k, &images[i % images.len()])?;
                if let Some(ol) = out_labels.as_mut() {
                    ol.set_slice(k, &blank)?;
                }
                record.replaced.push(k);
            }
        }
    }
    Ok(Perturbed { volume: out, labels: out_labels, record })
}
