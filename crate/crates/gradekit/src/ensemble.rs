//! Fusing per-patch gradings into a whole-volume grading map by
//! accuracy-weighted voting, and aggregating the map into per-structure
//! features.
//!
//! At every voxel the map value is the alpha-weighted average of the
//! gradings of all patches covering it: `G_i = sum_j alpha_j g_ij / sum_j
//! alpha_j` over covering locations `j`. Overlap accumulation runs in f64
//! so results do not depend on traversal grouping.

use crate::error::{Error, Result};
use crate::grader::{grade_patch, grade_patch_with, GraderModel, UNet};
use crate::phantom::PhantomSubject;
use crate::volgrid::{LabelVolume, PatchGrid, Volume};

/// Whole-volume grading field in [-1, 1] with the identity of the ensemble
/// that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct GradingMap {
    pub volume: Volume,
    /// Digest of the producing ensemble (0 when assembled ad hoc).
    pub provenance: u64,
}

/// Accuracy-weighted per-voxel fusion of `m` patch gradings.
///
/// Voxels whose covering locations carry zero total weight fall back to the
/// unweighted mean of covering patches; all-zero weight vectors degrade to
/// uniform voting with a warning.
pub fn reconstruct(
    gradings: &[Volume],
    alphas: &[f64],
    grid: &PatchGrid,
) -> Result<GradingMap> {
    if gradings.len() != grid.len() || alphas.len() != grid.len() {
        return Err(Error::ShapeMismatch(format!(
            "expected {} gradings and alphas, got {} and {}",
            grid.len(),
            gradings.len(),
            alphas.len()
        )));
    }
    if let Some(&bad) = alphas.iter().find(|&&a| !(0.0..=1.0).contains(&a)) {
        return Err(Error::InvalidParameter(format!(
            "vote weights must be in [0, 1], got {bad}"
        )));
    }
    if alphas.iter().all(|&a| a == 0.0) {
        log::warn!("all vote weights are zero; falling back to unweighted voting");
    }

    let dims = grid.dims();
    let p = grid.patch_dims();
    let n = dims[0] * dims[1] * dims[2];
    let mut num = vec![0.0f64; n];
    let mut den = vec![0.0f64; n];
    let mut sum = vec![0.0f64; n];
    let mut count = vec![0u32; n];

    for (j, grading) in gradings.iter().enumerate() {
        if grading.dims() != p {
            return Err(Error::ShapeMismatch(format!(
                "grading {j} has dims {:?}, expected patch dims {p:?}",
                grading.dims()
            )));
        }
        let off = grid.offset(j)?;
        let alpha = alphas[j];
        for z in 0..p[2] {
            for y in 0..p[1] {
                let src = grading.index(0, y, z);
                let dst = off[0] + dims[0] * ((off[1] + y) + dims[1] * (off[2] + z));
                for x in 0..p[0] {
                    let g = grading.data()[src + x] as f64;
                    num[dst + x] += alpha * g;
                    den[dst + x] += alpha;
                    sum[dst + x] += g;
                    count[dst + x] += 1;
                }
            }
        }
    }

    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        if count[i] == 0 {
            return Err(Error::Contract(format!(
                "voxel {i} covered by no patch; grid coverage invariant broken"
            )));
        }
        let v = if den[i] > 0.0 { num[i] / den[i] } else { sum[i] / count[i] as f64 };
        out.push(v as f32);
    }
    let spacing = gradings.first().map(|g| g.spacing()).unwrap_or([1.0; 3]);
    Ok(GradingMap { volume: Volume::new(dims, spacing, out)?, provenance: 0 })
}

/// Per-structure mean grading; the primary classifier feature.
#[derive(Debug, Clone, PartialEq)]
pub struct DgVector {
    /// Mean grading per structure, indexed by label - 1.
    pub values: Vec<f64>,
    /// Structures absent from this subject's segmentation; their value
    /// slot holds 0 and must be imputed downstream, never read as data.
    pub missing: Vec<bool>,
}

impl DgVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Mean grading over each structure's voxels (background excluded).
pub fn aggregate_structures(map: &GradingMap, labels: &LabelVolume) -> Result<DgVector> {
    if map.volume.dims() != labels.dims() {
        return Err(Error::ShapeMismatch(format!(
            "grading map dims {:?} vs label dims {:?}",
            map.volume.dims(),
            labels.dims()
        )));
    }
    let n = labels.n_labels() as usize;
    let mut sums = vec![0.0f64; n];
    let mut counts = vec![0u64; n];
    for (&l, &g) in labels.data().iter().zip(map.volume.data()) {
        if l != 0 {
            sums[(l - 1) as usize] += g as f64;
            counts[(l - 1) as usize] += 1;
        }
    }
    let mut values = Vec::with_capacity(n);
    let mut missing = Vec::with_capacity(n);
    for s in 0..n {
        if counts[s] == 0 {
            values.push(0.0);
            missing.push(true);
        } else {
            values.push(sums[s] / counts[s] as f64);
            missing.push(false);
        }
    }
    Ok(DgVector { values, missing })
}

/// Structure volumes as percent of the intracranial cavity; sums to 100
/// over present structures.
pub fn structure_volumes(labels: &LabelVolume) -> Result<Vec<f64>> {
    let icc = labels.icc_count();
    if icc == 0 {
        return Err(Error::Data("label volume has an empty intracranial cavity".into()));
    }
    let n = labels.n_labels() as usize;
    let mut counts = vec![0u64; n];
    for &l in labels.data() {
        if l != 0 {
            counts[(l - 1) as usize] += 1;
        }
    }
    Ok(counts.iter().map(|&c| 100.0 * c as f64 / icc as f64).collect())
}

/// Grades every patch of a subject with its location specialist and fuses
/// the results; voxels outside the intracranial cavity are fixed at 0.
pub fn grade_subject(
    models: &[GraderModel],
    grid: &PatchGrid,
    subject: &PhantomSubject,
    provenance: u64,
) -> Result<GradingMap> {
    if models.len() != grid.len() {
        return Err(Error::ShapeMismatch(format!(
            "expected {} models, got {}",
            grid.len(),
            models.len()
        )));
    }
    let mut gradings = Vec::with_capacity(grid.len());
    let mut alphas = Vec::with_capacity(grid.len());
    for j in 0..grid.len() {
        let model = models
            .iter()
            .find(|m| m.location == j)
            .ok_or_else(|| Error::Contract(format!("no model for location {j}")))?;
        let patch = grid.extract_patch(&subject.image, j)?;
        gradings.push(grade_patch(model, &patch)?);
        alphas.push(model.alpha);
    }
    let mut map = reconstruct(&gradings, &alphas, grid)?;
    mask_outside_icc(&mut map, &subject.labels)?;
    map.provenance = provenance;
    Ok(map)
}

/// Single-model baseline: the same network grades every location and votes
/// uniformly.
pub fn grade_subject_individual(
    unet: &UNet<f32>,
    grid: &PatchGrid,
    subject: &PhantomSubject,
) -> Result<GradingMap> {
    let mut gradings = Vec::with_capacity(grid.len());
    for j in 0..grid.len() {
        let patch = grid.extract_patch(&subject.image, j)?;
        gradings.push(grade_patch_with(unet, &patch)?);
    }
    let alphas = vec![1.0; grid.len()];
    let mut map = reconstruct(&gradings, &alphas, grid)?;
    mask_outside_icc(&mut map, &subject.labels)?;
    Ok(map)
}

fn mask_outside_icc(map: &mut GradingMap, labels: &LabelVolume) -> Result<()> {
    if map.volume.dims() != labels.dims() {
        return Err(Error::ShapeMismatch(format!(
            "grading map dims {:?} vs label dims {:?}",
            map.volume.dims(),
            labels.dims()
        )));
    }
    for (v, &l) in map.volume.data_mut().iter_mut().zip(labels.data()) {
        if l == 0 {
            *v = 0.0;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volgrid::build_patch_grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn patch_of(grid: &PatchGrid, value: f32) -> Volume {
        Volume::filled(grid.patch_dims(), [1.0; 3], value).unwrap()
    }

    /// Containment-based per-voxel oracle, independent of the scatter pass.
    fn brute_force(gradings: &[Volume], alphas: &[f64], grid: &PatchGrid) -> Vec<f64> {
        let dims = grid.dims();
        let p = grid.patch_dims();
        let mut out = Vec::new();
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let (mut num, mut den, mut sum, mut cnt) = (0.0f64, 0.0f64, 0.0f64, 0u32);
                    for j in 0..grid.len() {
                        let o = grid.offset(j).unwrap();
                        if x >= o[0] && x < o[0] + p[0]
                            && y >= o[1] && y < o[1] + p[1]
                            && z >= o[2] && z < o[2] + p[2]
                        {
                            let g =
                                gradings[j].get(x - o[0], y - o[1], z - o[2]) as f64;
                            num += alphas[j] * g;
                            den += alphas[j];
                            sum += g;
                            cnt += 1;
                        }
                    }
                    assert!(cnt > 0, "oracle found an uncovered voxel");
                    out.push(if den > 0.0 { num / den } else { sum / cnt as f64 });
                }
            }
        }
        out
    }

    #[test]
    fn single_coverage_passes_value_through() {
        // k = 1 with patch == dims: every voxel covered exactly once
        let grid = build_patch_grid([4, 4, 4], [4, 4, 4], 1).unwrap();
        let g = patch_of(&grid, 0.37);
        let map = reconstruct(&[g], &[0.123], &grid).unwrap();
        assert!(map.volume.data().iter().all(|&v| (v - 0.37).abs() < 1e-7));
    }

    #[test]
    fn two_patch_overlap_weighted_average() {
        // offsets {0, 2} along x; overlap x in [2, 4)
        let grid = build_patch_grid([6, 4, 4], [4, 4, 4], 2).unwrap();
        let mut gradings = Vec::new();
        let mut alphas = vec![0.0; grid.len()];
        for j in 0..grid.len() {
            let off = grid.offset(j).unwrap();
            let (g, a) = if off[0] == 0 { (1.0, 0.8) } else { (-0.5, 0.6) };
            gradings.push(patch_of(&grid, g));
            alphas[j] = a;
        }
        // y/z offsets are all zero (patch spans those axes), so only the two
        // x-offsets matter; duplicated locations share value and weight.
        let map = reconstruct(&gradings, &alphas, &grid).unwrap();
        let expected = (0.8 * 1.0 + 0.6 * (-0.5)) / 1.4;
        assert!((map.volume.get(3, 1, 1) as f64 - expected).abs() < 1e-6);
        assert!((map.volume.get(0, 1, 1) as f64 - 1.0).abs() < 1e-6);
        assert!((map.volume.get(5, 1, 1) as f64 - (-0.5)).abs() < 1e-6);
    }

    #[test]
    fn equal_weights_match_plain_mean_and_scale_invariance() {
        let grid = build_patch_grid([7, 6, 5], [4, 4, 4], 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gradings: Vec<Volume> = (0..grid.len())
            .map(|_| {
                Volume::from_fn([4, 4, 4], [1.0; 3], |_, _, _| rng.gen_range(-1.0..1.0))
                    .unwrap()
            })
            .collect();
        let equal = reconstruct(&gradings, &vec![0.7; grid.len()], &grid).unwrap();
        let uniform = reconstruct(&gradings, &vec![1.0; grid.len()], &grid).unwrap();
        for (a, b) in equal.volume.data().iter().zip(uniform.volume.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        // scaling all weights by c > 0 leaves the map unchanged
        let alphas: Vec<f64> = (0..grid.len()).map(|j| 0.2 + 0.05 * j as f64).collect();
        let scaled: Vec<f64> = alphas.iter().map(|a| a * 0.5).collect();
        let m1 = reconstruct(&gradings, &alphas, &grid).unwrap();
        let m2 = reconstruct(&gradings, &scaled, &grid).unwrap();
        for (a, b) in m1.volume.data().iter().zip(m2.volume.data()) {
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
            assert!(rel < 1e-6);
        }
    }

    #[test]
    fn all_zero_weights_fall_back_to_uniform() {
        let grid = build_patch_grid([6, 4, 4], [4, 4, 4], 2).unwrap();
        let gradings: Vec<Volume> = (0..grid.len())
            .map(|j| patch_of(&grid, if j < 4 { 0.5 } else { -0.5 }))
            .collect();
        let zero = reconstruct(&gradings, &vec![0.0; grid.len()], &grid).unwrap();
        let uniform = reconstruct(&gradings, &vec![1.0; grid.len()], &grid).unwrap();
        assert_eq!(zero.volume, uniform.volume);
    }

    #[test]
    fn matches_brute_force_oracle_on_random_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..25 {
            let k = rng.gen_range(1..=3usize);
            let dims = [0; 3].map(|_| rng.gen_range(6..=20usize));
            let patch = dims.map(|d| {
                let min = d.div_ceil(k);
                rng.gen_range(min..=d)
            });
            let grid = build_patch_grid(dims, patch, k).unwrap();
            let gradings: Vec<Volume> = (0..grid.len())
                .map(|_| {
                    Volume::from_fn(patch, [1.0; 3], |_, _, _| rng.gen_range(-1.0..1.0))
                        .unwrap()
                })
                .collect();
            let alphas: Vec<f64> =
                (0..grid.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
            let map = reconstruct(&gradings, &alphas, &grid).unwrap();
            let oracle = brute_force(&gradings, &alphas, &grid);
            for (got, want) in map.volume.data().iter().zip(&oracle) {
                assert!((*got as f64 - want).abs() < 1e-6);
                // convexity: weighted averages stay inside the grading range
                assert!((-1.0..=1.0).contains(got));
            }
        }
    }

    #[test]
    fn rejects_bad_weights_and_counts() {
        let grid = build_patch_grid([4, 4, 4], [4, 4, 4], 1).unwrap();
        let g = patch_of(&grid, 0.0);
        assert!(reconstruct(&[g.clone()], &[1.5], &grid).is_err());
        assert!(reconstruct(&[], &[], &grid).is_err());
    }

    fn map_from(volume: Volume) -> GradingMap {
        GradingMap { volume, provenance: 0 }
    }

    #[test]
    fn aggregation_means_and_missing_flags() {
        let labels =
            LabelVolume::new([3, 1, 1], vec![1, 1, 1], 2).unwrap();
        let map = map_from(Volume::new([3, 1, 1], [1.0; 3], vec![0.2, 0.4, 0.6]).unwrap());
        let dg = aggregate_structures(&map, &labels).unwrap();
        assert!((dg.values[0] - 0.4).abs() < 1e-6);
        assert!(dg.missing[1], "structure 2 has no voxels");
        assert_eq!(dg.values[1], 0.0);

        let constant = map_from(Volume::filled([3, 1, 1], [1.0; 3], 0.7).unwrap());
        let dg = aggregate_structures(&constant, &labels).unwrap();
        assert!((dg.values[0] - 0.7).abs() < 1e-6);
    }

    #[test]
    fn aggregation_is_linear() {
        let labels = LabelVolume::new([4, 1, 1], vec![1, 1, 2, 0], 2).unwrap();
        let base = Volume::new([4, 1, 1], [1.0; 3], vec![0.1, 0.3, -0.4, 0.9]).unwrap();
        let scaled = Volume::new(
            [4, 1, 1],
            [1.0; 3],
            base.data().iter().map(|v| v * 0.5).collect(),
        )
        .unwrap();
        let d1 = aggregate_structures(&map_from(base), &labels).unwrap();
        let d2 = aggregate_structures(&map_from(scaled), &labels).unwrap();
        for (a, b) in d1.values.iter().zip(&d2.values) {
            assert!((a * 0.5 - b).abs() < 1e-7);
        }
    }

    #[test]
    fn volume_percentages() {
        // structure 1: 500 voxels, structure 2: 9500 -> ICC 10000
        let mut data = vec![1u32; 500];
        data.extend(vec![2u32; 9500]);
        let labels = LabelVolume::new([100, 100, 1], data, 2).unwrap();
        let v = structure_volumes(&labels).unwrap();
        assert!((v[0] - 5.0).abs() < 1e-9);
        assert!((v.iter().sum::<f64>() - 100.0).abs() < 1e-9);

        let solo = LabelVolume::new([2, 2, 1], vec![3, 3, 3, 3], 3).unwrap();
        let v = structure_volumes(&solo).unwrap();
        assert_eq!(v[2], 100.0);

        let empty = LabelVolume::new([2, 1, 1], vec![0, 0], 1).unwrap();
        assert!(structure_volumes(&empty).is_err());
    }
}
