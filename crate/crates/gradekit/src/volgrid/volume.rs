//! Dense 3D scalar and label volumes.
//!
//! Voxel data is stored x-fastest: `index = x + dims[0] * (y + dims[1] * z)`.
//! Both containers are immutable after construction as far as the pipeline
//! is concerned; mutation helpers exist for builders and tests.

use crate::error::{Error, Result};

/// Dense 3D scalar field (image, grading map) with voxel spacing in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f32; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidGeometry(format!(
                "volume dims must be positive, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "voxel spacing must be positive, got {spacing:?}"
            )));
        }
        let expect = dims[0] * dims[1] * dims[2];
        if data.len() != expect {
            return Err(Error::ShapeMismatch(format!(
                "volume data length {} does not match dims {dims:?} ({expect})",
                data.len()
            )));
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn filled(dims: [usize; 3], spacing: [f32; 3], value: f32) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        Self::new(dims, spacing, vec![value; n])
    }

    /// Builds a volume by evaluating `f(x, y, z)` at every voxel.
    pub fn from_fn(
        dims: [usize; 3],
        spacing: [f32; 3],
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, spacing, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f32) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Mean-pools 2x2x2 blocks; partial blocks at odd borders average the
    /// voxels that exist. Output dims are `ceil(dims / 2)`, spacing doubles.
    pub fn downsample(&self, factor: usize) -> Result<Volume> {
        if factor != 2 {
            return Err(Error::InvalidParameter(format!(
                "only downsample factor 2 is supported, got {factor}"
            )));
        }
        let od = self.dims.map(|d| d.div_ceil(2));
        let mut out = Vec::with_capacity(od[0] * od[1] * od[2]);
        for z in 0..od[2] {
            for y in 0..od[1] {
                for x in 0..od[0] {
                    let mut acc = 0.0f64;
                    let mut n = 0u32;
                    for (dx, dy, dz) in block_offsets() {
                        let (sx, sy, sz) = (2 * x + dx, 2 * y + dy, 2 * z + dz);
                        if sx < self.dims[0] && sy < self.dims[1] && sz < self.dims[2] {
                            acc += self.get(sx, sy, sz) as f64;
                            n += 1;
                        }
                    }
                    out.push((acc / n as f64) as f32);
                }
            }
        }
        Volume::new(od, self.spacing.map(|s| s * 2.0), out)
    }
}

/// Integer structure-label volume. Label 0 is background / outside the
/// intracranial cavity; structures are 1..=n_labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    dims: [usize; 3],
    data: Vec<u32>,
    n_labels: u32,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], data: Vec<u32>, n_labels: u32) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidGeometry(format!(
                "label volume dims must be positive, got {dims:?}"
            )));
        }
        let expect = dims[0] * dims[1] * dims[2];
        if data.len() != expect {
            return Err(Error::ShapeMismatch(format!(
                "label data length {} does not match dims {dims:?} ({expect})",
                data.len()
            )));
        }
        if let Some(&bad) = data.iter().find(|&&l| l > n_labels) {
            return Err(Error::Data(format!(
                "label {bad} exceeds declared n_labels {n_labels}"
            )));
        }
        Ok(Self { dims, data, n_labels })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn n_labels(&self) -> u32 {
        self.n_labels
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u32 {
        self.data[self.index(x, y, z)]
    }

    /// Voxels inside the intracranial cavity, i.e. any nonzero label.
    pub fn icc_mask(&self) -> Vec<bool> {
        self.data.iter().map(|&l| l != 0).collect()
    }

    pub fn icc_count(&self) -> usize {
        self.data.iter().filter(|&&l| l != 0).count()
    }

    /// Per-2x2x2-block majority vote; ties resolve to the lowest label.
    pub fn downsample(&self, factor: usize) -> Result<LabelVolume> {
        if factor != 2 {
            return Err(Error::InvalidParameter(format!(
                "only downsample factor 2 is supported, got {factor}"
            )));
        }
        let od = self.dims.map(|d| d.div_ceil(2));
        let mut out = Vec::with_capacity(od[0] * od[1] * od[2]);
        for z in 0..od[2] {
            for y in 0..od[1] {
                for x in 0..od[0] {
                    let mut block = [0u32; 8];
                    let mut n = 0;
                    for (dx, dy, dz) in block_offsets() {
                        let (sx, sy, sz) = (2 * x + dx, 2 * y + dy, 2 * z + dz);
                        if sx < self.dims[0] && sy < self.dims[1] && sz < self.dims[2] {
                            block[n] = self.get(sx, sy, sz);
                            n += 1;
                        }
                    }
                    out.push(majority_lowest(&block[..n]));
                }
            }
        }
        LabelVolume::new(od, out, self.n_labels)
    }
}

fn block_offsets() -> impl Iterator<Item = (usize, usize, usize)> {
    (0..8).map(|i| (i & 1, (i >> 1) & 1, (i >> 2) & 1))
}

fn majority_lowest(labels: &[u32]) -> u32 {
    let mut best_label = u32::MAX;
    let mut best_count = 0usize;
    for &cand in labels {
        let count = labels.iter().filter(|&&l| l == cand).count();
        if count > best_count || (count == best_count && cand < best_label) {
            best_count = count;
            best_label = cand;
        }
    }
    best_label
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volume_rejects_bad_shapes() {
        assert!(Volume::new([2, 2, 2], [1.0; 3], vec![0.0; 7]).is_err());
        assert!(Volume::new([0, 2, 2], [1.0; 3], vec![]).is_err());
        assert!(Volume::new([1, 1, 1], [0.0, 1.0, 1.0], vec![0.0]).is_err());
    }

    #[test]
    fn indexing_is_x_fastest() {
        let v = Volume::from_fn([3, 2, 2], [1.0; 3], |x, y, z| (x + 10 * y + 100 * z) as f32)
            .unwrap();
        assert_eq!(v.data()[0], 0.0);
        assert_eq!(v.data()[1], 1.0); // x advances first
        assert_eq!(v.data()[3], 10.0); // then y
        assert_eq!(v.data()[6], 100.0); // then z
    }

    #[test]
    fn downsample_constant_block() {
        let v = Volume::filled([2, 2, 2], [1.0; 3], 4.0).unwrap();
        let d = v.downsample(2).unwrap();
        assert_eq!(d.dims(), [1, 1, 1]);
        assert_eq!(d.data(), &[4.0]);
        assert_eq!(d.spacing(), [2.0; 3]);
    }

    #[test]
    fn downsample_dims_use_ceiling() {
        let v = Volume::filled([181, 217, 181], [1.0; 3], 0.0).unwrap();
        let d = v.downsample(2).unwrap();
        assert_eq!(d.dims(), [91, 109, 91]);
    }

    #[test]
    fn downsample_rejects_other_factors() {
        let v = Volume::filled([4, 4, 4], [1.0; 3], 0.0).unwrap();
        assert!(v.downsample(3).is_err());
    }

    #[test]
    fn downsample_partial_blocks_average_available() {
        // 3 voxels along x: blocks {0,1} and {2}.
        let v = Volume::new([3, 1, 1], [1.0; 3], vec![1.0, 3.0, 5.0]).unwrap();
        let d = v.downsample(2).unwrap();
        assert_eq!(d.data(), &[2.0, 5.0]);
    }

    #[test]
    fn downsample_conserves_mean_on_even_dims() {
        let v = Volume::from_fn([6, 4, 8], [1.0; 3], |x, y, z| {
            ((x * 31 + y * 17 + z * 7) % 13) as f32 * 0.37
        })
        .unwrap();
        let d = v.downsample(2).unwrap();
        assert!((v.mean() - d.mean()).abs() < 1e-6);
    }

    #[test]
    fn label_majority_tie_breaks_low() {
        // counts: {0:3, 1:2, 2:3} -> tie between 0 and 2 -> 0
        let l = LabelVolume::new([2, 2, 2], vec![1, 1, 2, 2, 2, 0, 0, 0], 2).unwrap();
        let d = l.downsample(2).unwrap();
        assert_eq!(d.data(), &[0]);
    }

    #[test]
    fn label_majority_plain() {
        let l = LabelVolume::new([2, 2, 2], vec![3, 3, 3, 2, 2, 3, 0, 3], 3).unwrap();
        assert_eq!(l.downsample(2).unwrap().data(), &[3]);
    }

    #[test]
    fn label_volume_rejects_out_of_range_labels() {
        assert!(LabelVolume::new([1, 1, 1], vec![5], 4).is_err());
    }

    #[test]
    fn icc_mask_is_nonzero_labels() {
        let l = LabelVolume::new([2, 1, 1], vec![0, 7], 7).unwrap();
        assert_eq!(l.icc_mask(), vec![false, true]);
        assert_eq!(l.icc_count(), 1);
    }
}
