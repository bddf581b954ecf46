//! Grader training: stratified splits, translation + mixup augmentation,
//! the MAE/Adam loop with early stopping, and the validation accuracy
//! alpha that becomes a specialist's vote weight.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::diffcore::{AdamConfig, AdamState, Tape};
use crate::error::{Error, Result};
use crate::grader::{normalize_patch, GraderModel, UNet, UNetConfig};
use crate::phantom::PhantomSubject;
use crate::volgrid::{make_grading_target, PatchGrid, SubjectClass, Volume};

/// Grader training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Beta(alpha, alpha) mixing strength; non-positive disables mixup.
    pub mixup_alpha: f64,
    pub val_fraction: f64,
    /// Random +-1 voxel translation of training patches.
    pub jitter: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            patience: 20,
            max_epochs: 200,
            batch_size: 4,
            mixup_alpha: 0.2,
            val_fraction: 0.2,
            jitter: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "validation fraction must be in (0, 1), got {}",
                self.val_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

pub(crate) fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for p in parts {
        for b in p.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

/// Convex combination of two samples and their targets.
pub fn mixup_pair(
    x1: &[f32],
    y1: &[f32],
    x2: &[f32],
    y2: &[f32],
    lambda: f32,
) -> Result<(Vec<f32>, Vec<f32>)> {
    if x1.len() != x2.len() || y1.len() != y2.len() {
        return Err(Error::ShapeMismatch(format!(
            "mixup lengths x {} vs {}, y {} vs {}",
            x1.len(),
            x2.len(),
            y1.len(),
            y2.len()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidParameter(format!(
            "mixup lambda must be in [0, 1], got {lambda}"
        )));
    }
    let mix = |a: &[f32], b: &[f32]| {
        a.iter()
            .zip(b)
            .map(|(&p, &q)| lambda * p + (1.0 - lambda) * q)
            .collect::<Vec<f32>>()
    };
    Ok((mix(x1, x2), mix(y1, y2)))
}

/// Shifts a volume by `t` voxels per axis (each in {-1, 0, 1}); vacated
/// border planes are zero-filled.
pub fn translate_jitter(vol: &Volume, t: [i32; 3]) -> Result<Volume> {
    if t.iter().any(|&v| v.abs() > 1) {
        return Err(Error::InvalidParameter(format!(
            "translation must be within one voxel per axis, got {t:?}"
        )));
    }
    let [dx, dy, dz] = vol.dims();
    let mut out = Volume::filled(vol.dims(), vol.spacing(), 0.0)?;
    for z in 0..dz {
        let sz = z as i32 - t[2];
        if sz < 0 || sz >= dz as i32 {
            continue;
        }
        for y in 0..dy {
            let sy = y as i32 - t[1];
            if sy < 0 || sy >= dy as i32 {
                continue;
            }
            for x in 0..dx {
                let sx = x as i32 - t[0];
                if sx < 0 || sx >= dx as i32 {
                    continue;
                }
                out.set(x, y, z, vol.get(sx as usize, sy as usize, sz as usize));
            }
        }
    }
    Ok(out)
}

/// One grader training/validation sample: the raw image patch and its
/// grading target at a fixed grid location.
#[derive(Debug, Clone)]
pub struct PatchSample {
    pub patch: Volume,
    pub target: Volume,
    pub class: SubjectClass,
}

/// Stratified train/validation index split over a subject list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraderDataset {
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
}

/// Seed-reproducible class-stratified split; every class present lands in
/// both sides.
pub fn stratified_split(
    classes: &[SubjectClass],
    val_fraction: f64,
    seed: u64,
) -> Result<GraderDataset> {
    if classes.is_empty() {
        return Err(Error::Config("cannot split an empty dataset".into()));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!(
            "validation fraction must be in (0, 1), got {val_fraction}"
        )));
    }
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, c) in classes.iter().enumerate() {
        by_class.entry(c.as_str()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x53504c4954]));
    let (mut train_idx, mut val_idx) = (Vec::new(), Vec::new());
    for (class, mut idx) in by_class {
        if idx.len() < 2 {
            return Err(Error::Config(format!(
                "class {class} has {} subject(s); need at least 2 to split",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let n_val = ((idx.len() as f64 * val_fraction).round() as usize)
            .clamp(1, idx.len() - 1);
        val_idx.extend_from_slice(&idx[..n_val]);
        train_idx.extend_from_slice(&idx[n_val..]);
    }
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    Ok(GraderDataset { train_idx, val_idx })
}

/// Extracts the patch and grading target of every listed subject at grid
/// location `j`.
pub fn location_samples(
    subjects: &[PhantomSubject],
    indices: &[usize],
    grid: &PatchGrid,
    j: usize,
) -> Result<Vec<PatchSample>> {
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = &subjects[i];
        let patch = grid.extract_patch(&s.image, j)?;
        let labels = grid.extract_label_patch(&s.labels, j)?;
        let mask = labels.icc_mask();
        let target = make_grading_target(&mask, grid.patch_dims(), s.class)?.into_volume();
        out.push(PatchSample { patch, target, class: s.class });
    }
    Ok(out)
}

fn check_both_classes(samples: &[PatchSample], what: &str) -> Result<()> {
    let has = |c: SubjectClass| samples.iter().any(|s| s.class == c);
    if samples.is_empty() {
        return Err(Error::Config(format!("{what} set is empty")));
    }
    if !has(SubjectClass::Ad) || !has(SubjectClass::Cn) {
        return Err(Error::Config(format!(
            "{what} set needs both AD and CN subjects"
        )));
    }
    Ok(())
}

/// Balanced validation accuracy of sign-of-mean-grading over intracranial
/// patch voxels; ties predict CN.
pub fn compute_alpha(unet: &UNet<f32>, val: &[PatchSample]) -> Result<f64> {
    check_both_classes(val, "validation")?;
    let (mut ok_pos, mut n_pos, mut ok_neg, mut n_neg) = (0usize, 0usize, 0usize, 0usize);
    for sample in val {
        let grading = super::grade_patch_with(unet, &sample.patch)?;
        let mut sum = 0.0f64;
        let mut n = 0usize;
        for (&g, &t) in grading.data().iter().zip(sample.target.data()) {
            if t != 0.0 {
                sum += g as f64;
                n += 1;
            }
        }
        let mean = if n == 0 { 0.0 } else { sum / n as f64 };
        let predicted_ad = mean > 0.0;
        if sample.class == SubjectClass::Ad {
            n_pos += 1;
            if predicted_ad {
                ok_pos += 1;
            }
        } else {
            n_neg += 1;
            if !predicted_ad {
                ok_neg += 1;
            }
        }
    }
    Ok(0.5 * (ok_pos as f64 / n_pos as f64 + ok_neg as f64 / n_neg as f64))
}

fn mean_val_loss(unet: &UNet<f32>, val: &[PatchSample], batch: usize) -> Result<f64> {
    let [px, py, pz] = unet.config().patch_dims;
    let vox = px * py * pz;
    let mut total = 0.0f64;
    for chunk in val.chunks(batch) {
        let mut xs = Vec::with_capacity(chunk.len() * vox);
        let mut ts = Vec::with_capacity(chunk.len() * vox);
        for s in chunk {
            xs.extend_from_slice(&normalize_patch(s.patch.data()));
            ts.extend_from_slice(s.target.data());
        }
        let shape = IxDyn(&[chunk.len(), 1, pz, py, px]);
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(ArrayD::from_shape_vec(shape.clone(), xs).expect("val shape"), false);
        let t = tape.leaf(ArrayD::from_shape_vec(shape, ts).expect("val shape"), false);
        let (out, _) = unet.forward(&mut tape, x, false)?;
        let loss = tape.mae_loss(out, t)?;
        total += tape.scalar_value(loss) as f64 * chunk.len() as f64;
    }
    Ok(total / val.len() as f64)
}

/// MAE/Adam training with translation jitter, mixup, and early stopping.
/// Leaves `unet` holding the best-validation-loss parameters and reports
/// `(epochs_run, best_val_loss)`.
fn run_training(
    unet: &mut UNet<f32>,
    train: &[PatchSample],
    val: &[PatchSample],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(usize, f64)> {
    let [px, py, pz] = unet.config().patch_dims;
    let vox = px * py * pz;
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr as f32));
    let mixup = (cfg.mixup_alpha > 0.0)
        .then(|| Beta::new(cfg.mixup_alpha, cfg.mixup_alpha).expect("valid beta"));

    let mut best_values = unet.values().to_vec();
    let mut best_loss = f64::INFINITY;
    let mut bad_epochs = 0usize;
    let mut epochs_run = 0usize;

    let mut order: Vec<usize> = (0..train.len()).collect();
    for _epoch in 0..cfg.max_epochs {
        epochs_run += 1;
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            // per-sample jitter, normalization, then in-batch mixup
            let mut patches: Vec<Vec<f32>> = Vec::with_capacity(chunk.len());
            let mut targets: Vec<Vec<f32>> = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &train[i];
                let (p, t) = if cfg.jitter {
                    let t3 = [0; 3].map(|_| rng.gen_range(-1i32..=1));
                    (
                        translate_jitter(&s.patch, t3)?,
                        translate_jitter(&s.target, t3)?,
                    )
                } else {
                    (s.patch.clone(), s.target.clone())
                };
                patches.push(normalize_patch(p.data()));
                targets.push(t.data().to_vec());
            }
            if let Some(beta) = &mixup {
                let mut partner: Vec<usize> = (0..chunk.len()).collect();
                partner.shuffle(rng);
                let lambdas: Vec<f32> =
                    (0..chunk.len()).map(|_| beta.sample(rng) as f32).collect();
                let (orig_p, orig_t) = (patches.clone(), targets.clone());
                for (i, (&q, &lambda)) in partner.iter().zip(&lambdas).enumerate() {
                    let (xm, ym) = mixup_pair(
                        &orig_p[i], &orig_t[i], &orig_p[q], &orig_t[q], lambda,
                    )?;
                    patches[i] = xm;
                    targets[i] = ym;
                }
            }

            let n = chunk.len();
            let shape = IxDyn(&[n, 1, pz, py, px]);
            let xs: Vec<f32> = patches.into_iter().flatten().collect();
            let ts: Vec<f32> = targets.into_iter().flatten().collect();
            debug_assert_eq!(xs.len(), n * vox);

            let mut tape = Tape::<f32>::new();
            let x = tape.leaf(ArrayD::from_shape_vec(shape.clone(), xs).expect("batch"), false);
            let t = tape.leaf(ArrayD::from_shape_vec(shape, ts).expect("batch"), false);
            let (out, param_ids) = unet.forward(&mut tape, x, true)?;
            let loss = tape.mae_loss(out, t)?;
            tape.backward(loss)?;
            let grads: Vec<ArrayD<f32>> = param_ids
                .iter()
                .map(|&id| {
                    tape.grad(id)
                        .cloned()
                        .unwrap_or_else(|| ArrayD::zeros(tape.value(id).raw_dim()))
                })
                .collect();
            adam.step(unet.values_mut(), &grads)?;
        }

        let val_loss = mean_val_loss(unet, val, cfg.batch_size)?;
        if val_loss < best_loss {
            best_loss = val_loss;
            best_values = unet.values().to_vec();
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= cfg.patience {
                break;
            }
        }
    }

    unet.values_mut().clone_from_slice(&best_values);
    if best_loss.is_infinite() {
        // zero training epochs: evaluate once so the caller still gets a loss
        best_loss = mean_val_loss(unet, val, cfg.batch_size)?;
    }
    Ok((epochs_run, best_loss))
}

/// Trains the specialist at grid location `j`, transfer-initialized from
/// its parent's final parameters (the root trains from scratch).
pub fn train_location(
    j: usize,
    subjects: &[PhantomSubject],
    split: &GraderDataset,
    grid: &PatchGrid,
    unet_config: &UNetConfig,
    cfg: &TrainConfig,
    trained: &BTreeMap<usize, GraderModel>,
) -> Result<GraderModel> {
    cfg.validate()?;
    let step = grid
        .init_order()
        .iter()
        .find(|s| s.location == j)
        .ok_or_else(|| Error::IndexOutOfRange(format!("location {j} not in grid")))?;

    let mut unet = match step.parent {
        None => UNet::init(*unet_config, mix_seed(&[cfg.seed, j as u64, 0x494e4954])),
        Some(p) => {
            let parent = trained.get(&p).ok_or(Error::Scheduling {
                location: j,
                message: format!("parent location {p} has not finished training"),
            })?;
            Ok(parent.unet.clone())
        }
    }?;
    let init_digest = unet.params_digest();

    let train = location_samples(subjects, &split.train_idx, grid, j)?;
    let val = location_samples(subjects, &split.val_idx, grid, j)?;
    check_both_classes(&train, "training")?;
    check_both_classes(&val, "validation")?;

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, j as u64, 0x545241494e]));
    let (epochs, best_val_loss) = run_training(&mut unet, &train, &val, cfg, &mut rng)?;
    let alpha = compute_alpha(&unet, &val)?;

    Ok(GraderModel {
        location: j,
        parent: step.parent,
        alpha,
        unet,
        epochs_trained: epochs,
        best_val_loss,
        init_digest,
    })
}

/// The single-model baseline: one network trained on patches from every
/// grid location. Its vote weight is fixed at 1 (uniform voting).
pub fn train_individual(
    subjects: &[PhantomSubject],
    split: &GraderDataset,
    grid: &PatchGrid,
    unet_config: &UNetConfig,
    cfg: &TrainConfig,
) -> Result<GraderModel> {
    cfg.validate()?;
    let mut unet = UNet::init(
        *unet_config,
        mix_seed(&[cfg.seed, 0x494e4449, 0x494e4954]),
    )?;
    let init_digest = unet.params_digest();

    let mut train = Vec::new();
    let mut val = Vec::new();
    for j in 0..grid.len() {
        train.extend(location_samples(subjects, &split.train_idx, grid, j)?);
        val.extend(location_samples(subjects, &split.val_idx, grid, j)?);
    }
    check_both_classes(&train, "training")?;
    check_both_classes(&val, "validation")?;

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0x494e4449, 0x545241494e]));
    let (epochs, best_val_loss) = run_training(&mut unet, &train, &val, cfg, &mut rng)?;
    let alpha = compute_alpha(&unet, &val)?;

    Ok(GraderModel {
        location: 0,
        parent: None,
        alpha,
        unet,
        epochs_trained: epochs,
        best_val_loss,
        init_digest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixup_endpoints_and_midpoint() {
        let x1 = [1.0f32, 2.0];
        let y1 = [1.0f32, 1.0];
        let x2 = [3.0f32, 4.0];
        let y2 = [-1.0f32, -1.0];
        let (x, y) = mixup_pair(&x1, &y1, &x2, &y2, 1.0).unwrap();
        assert_eq!(x, x1.to_vec());
        assert_eq!(y, y1.to_vec());
        let (_, y) = mixup_pair(&x1, &y1, &x2, &y2, 0.5).unwrap();
        assert!(y.iter().all(|&v| v == 0.0)); // +1 and -1 targets cancel
        for lambda in [0.0f32, 0.25, 0.8] {
            let (_, y) = mixup_pair(&x1, &y1, &x2, &y2, lambda).unwrap();
            assert!(y.iter().all(|&v| (-1.0..=1.0).contains(&v)));
        }
        assert!(mixup_pair(&x1, &y1, &x2, &y2, 1.5).is_err());
    }

    #[test]
    fn jitter_identity_shift_and_border() {
        let v = Volume::from_fn([4, 3, 3], [1.0; 3], |x, y, z| (x + 10 * y + 100 * z) as f32)
            .unwrap();
        let same = translate_jitter(&v, [0, 0, 0]).unwrap();
        assert_eq!(same, v);
        let shifted = translate_jitter(&v, [1, 0, 0]).unwrap();
        for z in 0..3 {
            for y in 0..3 {
                assert_eq!(shifted.get(0, y, z), 0.0, "vacated border is zero");
                for x in 1..4 {
                    assert_eq!(shifted.get(x, y, z), v.get(x - 1, y, z));
                }
            }
        }
        assert!(translate_jitter(&v, [2, 0, 0]).is_err());
    }

    #[test]
    fn split_is_stratified_disjoint_reproducible() {
        use SubjectClass::*;
        let classes = vec![Ad, Ad, Ad, Ad, Ad, Cn, Cn, Cn, Cn, Cn];
        let a = stratified_split(&classes, 0.2, 9).unwrap();
        let b = stratified_split(&classes, 0.2, 9).unwrap();
        assert_eq!(a, b);
        let c = stratified_split(&classes, 0.2, 10).unwrap();
        assert!(a != c || a.val_idx == c.val_idx); // different seed may differ
        // disjoint and complete
        let mut all: Vec<usize> = a.train_idx.iter().chain(&a.val_idx).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        // one validation subject per class at 20%
        assert_eq!(a.val_idx.iter().filter(|&&i| classes[i] == Ad).count(), 1);
        assert_eq!(a.val_idx.iter().filter(|&&i| classes[i] == Cn).count(), 1);
    }

    #[test]
    fn split_rejects_degenerate_classes() {
        assert!(stratified_split(&[SubjectClass::Ad], 0.2, 0).is_err());
        assert!(stratified_split(&[SubjectClass::Ad, SubjectClass::Cn], 0.2, 0).is_err());
    }

    fn constant_sample(c: SubjectClass, value: f32) -> PatchSample {
        let dims = [4, 4, 4];
        let patch = Volume::filled(dims, [1.0; 3], value).unwrap();
        let target = make_grading_target(&[true; 64], dims, c).unwrap().into_volume();
        PatchSample { patch, target, class: c }
    }

    #[test]
    fn alpha_of_zero_model_is_half() {
        let config = UNetConfig { depth: 1, base_channels: 2, patch_dims: [4, 4, 4] };
        let mut unet = UNet::<f32>::init(config, 1).unwrap();
        let n = unet.values().len();
        for v in &mut unet.values_mut()[n - 2..] {
            v.fill(0.0);
        }
        let val = vec![
            constant_sample(SubjectClass::Ad, 1.0),
            constant_sample(SubjectClass::Ad, 2.0),
            constant_sample(SubjectClass::Cn, 0.5),
            constant_sample(SubjectClass::Cn, 1.5),
        ];
        // all-zero gradings -> everyone predicted CN -> balanced accuracy 0.5
        assert_eq!(compute_alpha(&unet, &val).unwrap(), 0.5);
    }

    #[test]
    fn alpha_requires_both_classes() {
        let config = UNetConfig { depth: 1, base_channels: 2, patch_dims: [4, 4, 4] };
        let unet = UNet::<f32>::init(config, 1).unwrap();
        assert!(compute_alpha(&unet, &[]).is_err());
        assert!(compute_alpha(&unet, &[constant_sample(SubjectClass::Ad, 1.0)]).is_err());
    }
}
