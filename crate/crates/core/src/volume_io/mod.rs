//! Volumes, label maps, their on-disk format, dataset manifests and the
//! synthetic phantom generator.
//!
//! Voxels are stored row-major in `(h, w, d)` order with `d` innermost, so a
//! depth slice `k` is the strided set `{(h·W + w)·D + k}`.

mod format;
mod manifest;
mod phantom;

pub use format::{decode_volume, encode_volume, read_volume, write_volume, StoredVolume};
pub use manifest::{resolve as resolve_path, split_dataset, DatasetManifest, ManifestEntry, Split};
pub use phantom::{class_mean_intensity, generate_phantom, generate_phantom_with, PhantomConfig};

use crate::error::{invalid, shape, FormatError, Result};

/// Spatial extent `(H, W, D)`.
pub type Dims = [usize; 3];

fn check_dims(dims: Dims) -> Result<usize> {
    let [h, w, d] = dims;
    if h == 0 || w == 0 || d == 0 {
        return Err(FormatError::ZeroDim.into());
    }
    if h != w {
        return Err(FormatError::NonSquare { h, w }.into());
    }
    h.checked_mul(w)
        .and_then(|x| x.checked_mul(d))
        .ok_or_else(|| FormatError::DimsOverflow.into())
}

#[inline]
pub fn voxel_index(dims: Dims, h: usize, w: usize, d: usize) -> usize {
    (h * dims[1] + w) * dims[2] + d
}

/// Scalar intensity volume with square slices.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    dims: Dims,
    data: Vec<f32>,
}

impl Volume3D {
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        let n = check_dims(dims)?;
        if data.len() != n {
            return Err(shape(format!("{dims:?} needs {n} voxels, got {}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FormatError::NonFinite.into());
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims) -> Result<Self> {
        let n = check_dims(dims)?;
        Ok(Self { dims, data: vec![0.0; n] })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, h: usize, w: usize, d: usize) -> f32 {
        self.data[voxel_index(self.dims, h, w, d)]
    }

    /// Depth slice `k` as a row-major `H×W` image.
    pub fn slice(&self, k: usize) -> Vec<f32> {
        extract_slice(&self.data, self.dims, k)
    }

    pub fn set_slice(&mut self, k: usize, pixels: &[f32]) -> Result<()> {
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(FormatError::NonFinite.into());
        }
        insert_slice(&mut self.data, self.dims, k, pixels)
    }

    /// Intensities widened to `f64`, laid out as a single-channel `[1, H, W, D]` tensor.
    pub fn to_tensor(&self) -> cfr_nn::Tensor {
        let [h, w, d] = self.dims;
        cfr_nn::Tensor::new(&[1, h, w, d], self.data.iter().map(|&v| f64::from(v)).collect())
            .expect("volume tensor shape")
    }
}

/// Integer class map with `K` classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    dims: Dims,
    data: Vec<u8>,
    num_classes: usize,
}

impl LabelVolume {
    pub fn new(dims: Dims, data: Vec<u8>, num_classes: usize) -> Result<Self> {
        let n = check_dims(dims)?;
        if !(2..=256).contains(&num_classes) {
            return Err(invalid(format!("num_classes must be in 2..=256, got {num_classes}")));
        }
        if data.len() != n {
            return Err(shape(format!("{dims:?} needs {n} voxels, got {}", data.len())));
        }
        if let Some(&bad) = data.iter().find(|&&v| usize::from(v) >= num_classes) {
            return Err(FormatError::LabelOutOfRange { value: bad, num_classes: num_classes as u32 }.into());
        }
        Ok(Self { dims, data, num_classes })
    }

    pub fn zeros(dims: Dims, num_classes: usize) -> Result<Self> {
        let n = check_dims(dims)?;
        Self::new(dims, vec![0; n], num_classes)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, h: usize, w: usize, d: usize) -> u8 {
        self.data[voxel_index(self.dims, h, w, d)]
    }

    pub fn slice(&self, k: usize) -> Vec<u8> {
        extract_slice(&self.data, self.dims, k)
    }

    pub fn set_slice(&mut self, k: usize, pixels: &[u8]) -> Result<()> {
        if let Some(&bad) = pixels.iter().find(|&&v| usize::from(v) >= self.num_classes) {
            return Err(FormatError::LabelOutOfRange { value: bad, num_classes: self.num_classes as u32 }.into());
        }
        insert_slice(&mut self.data, self.dims, k, pixels)
    }

    /// Voxels carrying class `c`.
    pub fn count(&self, c: u8) -> usize {
        self.data.iter().filter(|&&v| v == c).count()
    }

    pub fn assert_pairs_with(&self, image: &Volume3D) -> Result<()> {
        if self.dims != image.dims {
            return Err(shape(format!("label dims {:?} vs image dims {:?}", self.dims, image.dims)));
        }
        Ok(())
    }
}

pub(crate) fn extract_slice<T: Copy>(data: &[T], dims: Dims, k: usize) -> Vec<T> {
    let [h, w, d] = dims;
    assert!(k < d, "slice {k} out of depth {d}");
    (0..h * w).map(|p| data[p * d + k]).collect()
}

pub(crate) fn insert_slice<T: Copy>(data: &mut [T], dims: Dims, k: usize, pixels: &[T]) -> Result<()> {
    let [h, w, d] = dims;
    if k >= d || pixels.len() != h * w {
        return Err(shape(format!("slice {k} with {} pixels into {dims:?}", pixels.len())));
    }
    for (p, &v) in pixels.iter().enumerate() {
        data[p * d + k] = v;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::CfrError;

    #[test]
    fn non_square_and_non_finite_are_rejected() {
        assert!(matches!(
            Volume3D::zeros([4, 5, 2]),
            Err(CfrError::Parse(FormatError::NonSquare { h: 4, w: 5 }))
        ));
        assert!(Volume3D::new([1, 1, 1], vec![f32::NAN]).is_err());
    }

    #[test]
    fn labels_must_be_below_k() {
        assert!(LabelVolume::new([1, 1, 2], vec![0, 2], 2).is_err());
        assert!(LabelVolume::new([1, 1, 2], vec![0, 1], 1).is_err());
        assert!(LabelVolume::new([1, 1, 2], vec![0, 1], 2).is_ok());
    }

    #[test]
    fn slices_follow_depth_innermost_layout() {
        let v = Volume3D::new([2, 2, 3], (0..12).map(|i| i as f32).collect()).unwrap();
        assert_eq!(v.slice(1), vec![1.0, 4.0, 7.0, 10.0]);
        assert_eq!(v.get(1, 0, 2), 8.0);
    }
}
