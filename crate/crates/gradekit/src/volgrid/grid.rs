//! Overlapping patch grid: k patches per axis, equally spaced offsets,
//! and the transfer-initialization order used when training specialists.

use crate::error::{Error, Result};
use crate::volgrid::{LabelVolume, Volume};

/// One entry of the training order: a grid location and the already-trained
/// location its parameters are copied from (`None` for the single root).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InitStep {
    pub location: usize,
    pub parent: Option<usize>,
}

/// The k x k x k overlapping patch decomposition of a volume.
///
/// Location indices enumerate grid coordinates lexicographically:
/// `j = (gx * k + gy) * k + gz`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    k: usize,
    dims: [usize; 3],
    patch_dims: [usize; 3],
    offsets: Vec<[usize; 3]>,
    init_order: Vec<InitStep>,
}

/// Equally spaced patch offsets covering `[0, dims - patch_dims]` per axis.
///
/// Offsets are `floor(i * (dims_a - patch_a) / (k - 1))` for `i = 0..k`, a
/// single zero offset when `k = 1`.
pub fn build_patch_grid(dims: [usize; 3], patch_dims: [usize; 3], k: usize) -> Result<PatchGrid> {
    if k == 0 {
        return Err(Error::InvalidParameter("patch grid needs k >= 1".into()));
    }
    if dims.iter().any(|&d| d == 0) || patch_dims.iter().any(|&p| p == 0) {
        return Err(Error::InvalidGeometry(format!(
            "dims {dims:?} and patch dims {patch_dims:?} must be positive"
        )));
    }
    for a in 0..3 {
        if patch_dims[a] > dims[a] {
            return Err(Error::InvalidGeometry(format!(
                "patch dims {patch_dims:?} exceed volume dims {dims:?} on axis {a}"
            )));
        }
        // full coverage needs dims <= k * patch per axis (consecutive offsets
        // then differ by at most patch)
        if dims[a] > k * patch_dims[a] {
            return Err(Error::InvalidGeometry(format!(
                "{k} patches of {patch_dims:?} cannot cover dims {dims:?} on axis {a}"
            )));
        }
    }

    let axis_offsets: [Vec<usize>; 3] = [0, 1, 2].map(|a| {
        let span = dims[a] - patch_dims[a];
        if k == 1 {
            vec![0]
        } else {
            (0..k).map(|i| i * span / (k - 1)).collect()
        }
    });

    let mut offsets = Vec::with_capacity(k * k * k);
    for gx in 0..k {
        for gy in 0..k {
            for gz in 0..k {
                offsets.push([axis_offsets[0][gx], axis_offsets[1][gy], axis_offsets[2][gz]]);
            }
        }
    }

    let init_order = transfer_order(k);
    Ok(PatchGrid { k, dims, patch_dims, offsets, init_order })
}

/// Breadth-first ordering of grid coordinates from (0,0,0) by Manhattan
/// distance, lexicographic tie-break; each location's parent is its nearest
/// already-ordered neighbor (again lexicographic on ties).
fn transfer_order(k: usize) -> Vec<InitStep> {
    let mut coords: Vec<[usize; 3]> = Vec::with_capacity(k * k * k);
    for gx in 0..k {
        for gy in 0..k {
            for gz in 0..k {
                coords.push([gx, gy, gz]);
            }
        }
    }
    let mut ordered = coords.clone();
    ordered.sort_by_key(|c| (c.iter().sum::<usize>(), *c));

    let loc_of = |c: &[usize; 3]| (c[0] * k + c[1]) * k + c[2];
    let mut steps = Vec::with_capacity(ordered.len());
    let mut scheduled: Vec<[usize; 3]> = Vec::new();
    for c in &ordered {
        let parent = scheduled
            .iter()
            .min_by_key(|p| (manhattan(p, c), **p))
            .map(loc_of);
        steps.push(InitStep { location: loc_of(c), parent });
        scheduled.push(*c);
    }
    steps
}

fn manhattan(a: &[usize; 3], b: &[usize; 3]) -> usize {
    (0..3).map(|i| a[i].abs_diff(b[i])).sum()
}

impl PatchGrid {
    pub fn k(&self) -> usize {
        self.k
    }

    /// Number of patch locations, m = k^3.
    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn patch_dims(&self) -> [usize; 3] {
        self.patch_dims
    }

    pub fn offsets(&self) -> &[[usize; 3]] {
        &self.offsets
    }

    pub fn offset(&self, j: usize) -> Result<[usize; 3]> {
        self.offsets
            .get(j)
            .copied()
            .ok_or_else(|| Error::IndexOutOfRange(format!(
                "patch location {j} out of range (m = {})",
                self.offsets.len()
            )))
    }

    pub fn coords(&self, j: usize) -> [usize; 3] {
        let gz = j % self.k;
        let gy = (j / self.k) % self.k;
        let gx = j / (self.k * self.k);
        [gx, gy, gz]
    }

    /// Topological training order with transfer parents.
    pub fn init_order(&self) -> &[InitStep] {
        &self.init_order
    }

    /// Copies the patch at location `j` out of a scalar volume.
    pub fn extract_patch(&self, vol: &Volume, j: usize) -> Result<Volume> {
        self.check_vol_dims(vol.dims())?;
        let off = self.offset(j)?;
        let p = self.patch_dims;
        let mut data = Vec::with_capacity(p[0] * p[1] * p[2]);
        for z in 0..p[2] {
            for y in 0..p[1] {
                let row = vol.index(off[0], off[1] + y, off[2] + z);
                data.extend_from_slice(&vol.data()[row..row + p[0]]);
            }
        }
        Volume::new(p, vol.spacing(), data)
    }

    /// Copies the patch at location `j` out of a label volume.
    pub fn extract_label_patch(&self, labels: &LabelVolume, j: usize) -> Result<LabelVolume> {
        self.check_vol_dims(labels.dims())?;
        let off = self.offset(j)?;
        let p = self.patch_dims;
        let mut data = Vec::with_capacity(p[0] * p[1] * p[2]);
        for z in 0..p[2] {
            for y in 0..p[1] {
                let row = labels.index(off[0], off[1] + y, off[2] + z);
                data.extend_from_slice(&labels.data()[row..row + p[0]]);
            }
        }
        LabelVolume::new(p, data, labels.n_labels())
    }

    /// Writes a patch back at its own offset (inverse of `extract_patch`).
    pub fn write_patch(&self, vol: &mut Volume, j: usize, patch: &Volume) -> Result<()> {
        self.check_vol_dims(vol.dims())?;
        if patch.dims() != self.patch_dims {
            return Err(Error::ShapeMismatch(format!(
                "patch dims {:?} do not match grid patch dims {:?}",
                patch.dims(),
                self.patch_dims
            )));
        }
        let off = self.offset(j)?;
        let p = self.patch_dims;
        for z in 0..p[2] {
            for y in 0..p[1] {
                let src = patch.index(0, y, z);
                let dst = vol.index(off[0], off[1] + y, off[2] + z);
                vol.data_mut()[dst..dst + p[0]].copy_from_slice(&patch.data()[src..src + p[0]]);
            }
        }
        Ok(())
    }

    fn check_vol_dims(&self, dims: [usize; 3]) -> Result<()> {
        if dims != self.dims {
            return Err(Error::ShapeMismatch(format!(
                "volume dims {:?} do not match grid dims {:?}",
                dims, self.dims
            )));
        }
        Ok(())
    }
}

/// Subject class used for grading targets and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum SubjectClass {
    #[serde(rename = "CN")]
    Cn,
    #[serde(rename = "AD")]
    Ad,
    #[serde(rename = "sMCI")]
    Smci,
    #[serde(rename = "pMCI")]
    Pmci,
}

impl SubjectClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            SubjectClass::Cn => "CN",
            SubjectClass::Ad => "AD",
            SubjectClass::Smci => "sMCI",
            SubjectClass::Pmci => "pMCI",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "CN" => Ok(SubjectClass::Cn),
            "AD" => Ok(SubjectClass::Ad),
            "sMCI" => Ok(SubjectClass::Smci),
            "pMCI" => Ok(SubjectClass::Pmci),
            other => Err(Error::Data(format!("unknown subject class {other:?}"))),
        }
    }

    /// Disease-positive side of the binary task (AD at training time,
    /// pMCI in the transferred prognosis task).
    pub fn is_positive(&self) -> bool {
        matches!(self, SubjectClass::Ad | SubjectClass::Pmci)
    }

    /// Grading-target sign: +1 for the disease class, -1 for the healthy one.
    pub fn grading_sign(&self) -> Result<f32> {
        match self {
            SubjectClass::Ad => Ok(1.0),
            SubjectClass::Cn => Ok(-1.0),
            other => Err(Error::Config(format!(
                "grading targets are defined for AD/CN training subjects, got {}",
                other.as_str()
            ))),
        }
    }
}

impl std::fmt::Display for SubjectClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Patch-shaped grading ground truth: the class sign on intracranial voxels,
/// zero outside.
#[derive(Debug, Clone, PartialEq)]
pub struct GradingTarget(Volume);

impl GradingTarget {
    pub fn as_volume(&self) -> &Volume {
        &self.0
    }

    pub fn into_volume(self) -> Volume {
        self.0
    }
}

/// +1 (AD) or -1 (CN) on mask voxels, 0 elsewhere.
pub fn make_grading_target(
    icc_mask: &[bool],
    dims: [usize; 3],
    class: SubjectClass,
) -> Result<GradingTarget> {
    if icc_mask.len() != dims[0] * dims[1] * dims[2] {
        return Err(Error::ShapeMismatch(format!(
            "mask length {} does not match patch dims {dims:?}",
            icc_mask.len()
        )));
    }
    let sign = class.grading_sign()?;
    let data = icc_mask.iter().map(|&m| if m { sign } else { 0.0 }).collect();
    Ok(GradingTarget(Volume::new(dims, [1.0; 3], data)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent evaluation of the offset formula.
    fn offsets_oracle(dim: usize, patch: usize, k: usize) -> Vec<usize> {
        if k == 1 {
            return vec![0];
        }
        (0..k)
            .map(|i| ((i as f64) * ((dim - patch) as f64) / ((k - 1) as f64)).floor() as usize)
            .collect()
    }

    #[test]
    fn paper_geometry_offsets() {
        let g = build_patch_grid([91, 109, 91], [32, 48, 32], 5).unwrap();
        let axis = |a: usize| {
            let mut v: Vec<usize> = g.offsets().iter().map(|o| o[a]).collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        assert_eq!(axis(0), offsets_oracle(91, 32, 5));
        assert_eq!(axis(0), vec![0, 14, 29, 44, 59]);
        assert_eq!(axis(1), offsets_oracle(109, 48, 5));
        assert_eq!(axis(1), vec![0, 15, 30, 45, 61]);
        assert_eq!(axis(2), vec![0, 14, 29, 44, 59]);
        assert_eq!(g.len(), 125);
    }

    #[test]
    fn tight_patch_gives_zero_span() {
        let g = build_patch_grid([32, 32, 32], [32, 32, 32], 5).unwrap();
        assert!(g.offsets().iter().all(|o| *o == [0, 0, 0]));
    }

    #[test]
    fn k_zero_is_invalid() {
        assert!(matches!(
            build_patch_grid([8, 8, 8], [4, 4, 4], 0),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn oversized_patch_is_invalid_geometry() {
        assert!(matches!(
            build_patch_grid([8, 8, 8], [9, 4, 4], 2),
            Err(Error::InvalidGeometry(_))
        ));
    }

    #[test]
    fn non_covering_geometry_is_rejected() {
        // k = 1 with a patch smaller than the volume cannot cover it
        assert!(matches!(
            build_patch_grid([8, 8, 8], [4, 8, 8], 1),
            Err(Error::InvalidGeometry(_))
        ));
        // 2 patches of 3 cannot span 8 voxels
        assert!(matches!(
            build_patch_grid([8, 8, 8], [3, 8, 8], 2),
            Err(Error::InvalidGeometry(_))
        ));
        // boundary case 2 * 4 = 8 is fine
        assert!(build_patch_grid([8, 8, 8], [4, 8, 8], 2).is_ok());
    }

    #[test]
    fn extract_constant_volume() {
        let g = build_patch_grid([8, 8, 8], [4, 4, 4], 2).unwrap();
        let v = Volume::filled([8, 8, 8], [1.0; 3], 3.5).unwrap();
        let p = g.extract_patch(&v, 0).unwrap();
        assert_eq!(p.dims(), [4, 4, 4]);
        assert!(p.data().iter().all(|&x| x == 3.5));
    }

    #[test]
    fn extract_ramp_is_shifted_indexing() {
        // offsets along x for dims 46, patch 32, k 2: {0, 14}
        let g = build_patch_grid([46, 8, 8], [32, 4, 4], 2).unwrap();
        let v = Volume::from_fn([46, 8, 8], [1.0; 3], |x, _, _| x as f32).unwrap();
        let j = g
            .offsets()
            .iter()
            .position(|o| *o == [14, 0, 0])
            .expect("grid has an offset at (14,0,0)");
        let p = g.extract_patch(&v, j).unwrap();
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..32 {
                    assert_eq!(p.get(x, y, z), (x + 14) as f32);
                }
            }
        }
    }

    #[test]
    fn extract_out_of_range_location() {
        let g = build_patch_grid([8, 8, 8], [4, 4, 4], 2).unwrap();
        let v = Volume::filled([8, 8, 8], [1.0; 3], 0.0).unwrap();
        assert!(matches!(
            g.extract_patch(&v, g.len()),
            Err(Error::IndexOutOfRange(_))
        ));
    }

    #[test]
    fn init_order_has_single_root_and_bfs_parents() {
        let g = build_patch_grid([10, 10, 10], [6, 6, 6], 2).unwrap();
        let order = g.init_order();
        assert_eq!(order.len(), 8);
        assert_eq!(order.iter().filter(|s| s.parent.is_none()).count(), 1);
        assert_eq!(order[0], InitStep { location: 0, parent: None });
        // distance-1 coords all hang off the root
        for step in &order[1..4] {
            assert_eq!(step.parent, Some(0));
        }
        // (0,1,1) = loc 3: nearest earlier neighbors are (0,0,1) loc 1 and
        // (0,1,0) loc 2, lex tie-break picks (0,0,1).
        let step_011 = order.iter().find(|s| s.location == 3).unwrap();
        assert_eq!(step_011.parent, Some(1));
        // (1,1,1) = loc 7 sits at distance 1 from the three distance-2 coords;
        // lex lowest is (0,1,1) = loc 3.
        let step_111 = order.iter().find(|s| s.location == 7).unwrap();
        assert_eq!(step_111.parent, Some(3));
    }

    #[test]
    fn init_order_parents_precede_children() {
        for k in 1..=4 {
            let p = 40usize.div_ceil(k);
            let g = build_patch_grid([40, 40, 40], [p, p, p], k).unwrap();
            let mut seen = std::collections::HashSet::new();
            for step in g.init_order() {
                if let Some(p) = step.parent {
                    assert!(seen.contains(&p), "k={k}: parent {p} not yet scheduled");
                }
                seen.insert(step.location);
            }
            assert_eq!(seen.len(), k * k * k);
        }
    }

    #[test]
    fn grading_target_all_ones_mask_ad() {
        let t = make_grading_target(&[true; 8], [2, 2, 2], SubjectClass::Ad).unwrap();
        assert!(t.as_volume().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn grading_target_empty_mask_cn() {
        let t = make_grading_target(&[false; 8], [2, 2, 2], SubjectClass::Cn).unwrap();
        assert!(t.as_volume().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grading_target_mixed_mask_cn() {
        let mask = [true, false, true, false, false, true, false, true];
        let t = make_grading_target(&mask, [2, 2, 2], SubjectClass::Cn).unwrap();
        for (m, &v) in mask.iter().zip(t.as_volume().data()) {
            assert_eq!(v, if *m { -1.0 } else { 0.0 });
        }
    }

    #[test]
    fn grading_target_rejects_mci() {
        assert!(make_grading_target(&[true; 8], [2, 2, 2], SubjectClass::Pmci).is_err());
    }

    fn coverage_ok(g: &PatchGrid) -> bool {
        let covered = |a: usize| {
            let mut cov = vec![false; g.dims()[a]];
            for off in g.offsets() {
                for c in cov.iter_mut().skip(off[a]).take(g.patch_dims()[a]) {
                    *c = true;
                }
            }
            cov.into_iter().all(|c| c)
        };
        (0..3).all(covered)
    }

    proptest! {
        #[test]
        fn offsets_monotone_and_cover(
            dims in prop::array::uniform3(4usize..40),
            frac in prop::array::uniform3(0usize..100),
            k in 1usize..5,
        ) {
            // patch dims between ceil(dims / k) and dims keep coverage possible
            let patch = [0, 1, 2].map(|a| {
                let min = dims[a].div_ceil(k);
                min + frac[a] * (dims[a] - min) / 100
            });
            let g = build_patch_grid(dims, patch, k).unwrap();
            for a in 0..3 {
                let offs: Vec<usize> = (0..k).map(|i| match a {
                    0 => g.offsets()[i * k * k][0],
                    1 => g.offsets()[i * k][1],
                    _ => g.offsets()[i][2],
                }).collect();
                prop_assert!(offs.windows(2).all(|w| w[0] <= w[1]));
                prop_assert_eq!(offs[0], 0);
                prop_assert_eq!(*offs.last().unwrap(), dims[a] - patch[a]);
            }
            prop_assert!(coverage_ok(&g));
        }

        #[test]
        fn extract_then_write_back_roundtrip(
            seed in 0u64..1000,
            j in 0usize..8,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let dims = [11, 9, 10];
            let g = build_patch_grid(dims, [7, 6, 6], 2).unwrap();
            let v = Volume::from_fn(dims, [1.0; 3], |_, _, _| rng.gen::<f32>()).unwrap();
            let p = g.extract_patch(&v, j).unwrap();
            let mut w = v.clone();
            g.write_patch(&mut w, j, &p).unwrap();
            prop_assert_eq!(v, w);
        }
    }
}
