//! Hard pseudo-labels for unlabeled volumes: tile, resize, segment in 2D,
//! resize the logits back, take the per-pixel argmax, untile.

use std::path::{Path, PathBuf};

use cfr_nn::Tensor;

use crate::error::{invalid, Result};
use crate::grid_concat::{
    concatenate, inverse_concatenate_labels, resize_bilinear, resize_grid, GridImage, GridLayout, GridPixels,
};
use crate::seg2d::{forward_2d, Seg2D};
use crate::volume_io::{read_volume, write_volume, LabelVolume, StoredVolume, Volume3D};

/// The concatenated grid of `vol`, resized to the model input, as an `S×S` tensor.
pub fn model_input(model: &Seg2D, vol: &Volume3D) -> Result<(GridLayout, Tensor)> {
    let layout = GridLayout::for_dims(vol.dims());
    let s = model.config.input_size;
    let grid = resize_grid(&concatenate(vol, &layout)?, s)?;
    let px = grid.image_data().expect("image grid");
    Ok((layout, Tensor::new(&[s, s], px.iter().map(|&v| f64::from(v)).collect())?))
}

/// Bilinearly resamples `[K, S, S]` logits to the layout's native grid size.
pub fn unresize_logits(logits: &Tensor, layout: &GridLayout) -> Result<Tensor> {
    let &[k, s, s2] = logits.shape() else {
        return Err(invalid(format!("logits must be [K, S, S], got {:?}", logits.shape())));
    };
    let (rows, cols) = (layout.rows(), layout.cols());
    let mut out = Vec::with_capacity(k * rows * cols);
    for plane in logits.data().chunks_exact(s * s2) {
        out.extend(resize_bilinear(plane, s, s2, rows, cols));
    }
    Ok(Tensor::new(&[k, rows, cols], out)?)
}

/// Per-position argmax over the leading class axis; ties go to the lower class.
pub fn argmax_classes(logits: &Tensor) -> Vec<u8> {
    let k = logits.shape()[0];
    let n = logits.numel() / k;
    let z = logits.data();
    (0..n)
        .map(|j| {
            let mut best = 0;
            for c in 1..k {
                if z[c * n + j] > z[best * n + j] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

pub fn pseudo_label(model: &Seg2D, vol: &Volume3D) -> Result<LabelVolume> {
    let (layout, x) = model_input(model, vol)?;
    let logits = unresize_logits(&forward_2d(model, &x)?, &layout)?;
    let grid = GridImage {
        layout,
        height: layout.rows(),
        width: layout.cols(),
        pixels: GridPixels::Labels { data: argmax_classes(&logits), num_classes: model.config.num_classes },
    };
    inverse_concatenate_labels(&grid, &layout)
}

/// `{stem}.pl-{key}.cfrv` beside the image.
pub fn cache_path(image_path: &Path, key: &str) -> PathBuf {
    let stem = image_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    image_path.with_file_name(format!("{stem}.pl-{key}.cfrv"))
}

/// Reads the cached pseudo-label for `(image, key)` or computes and stores it.
/// `key` should identify the checkpoint (e.g. a content hash).
pub fn pseudo_label_cached(model: &Seg2D, key: &str, image_path: &Path) -> Result<LabelVolume> {
    let path = cache_path(image_path, key);
    if path.exists() {
        if let Some(l) = read_volume(&path)?.into_labels() {
            return Ok(l);
        }
    }
    let vol = read_volume(image_path)?.into_image().ok_or_else(|| invalid("pseudo-labels need an image volume"))?;
    let labels = pseudo_label(model, &vol)?;
    write_volume(&path, &StoredVolume::Labels(labels.clone()))?;
    Ok(labels)
}
