//! Patch-specialist graders: a compact 3D U-Net per grid location, trained
//! to regress the class sign over intracranial voxels of its patch.

mod schedule;
mod store;
mod train;

pub use schedule::schedule_ensemble;
pub use store::{
    load_ensemble, load_finished_locations, save_ensemble, save_location, EnsembleManifest,
    LocationEntry,
};
pub use train::{
    compute_alpha, location_samples, mixup_pair, stratified_split, train_individual,
    train_location,
    translate_jitter, GraderDataset, PatchSample, TrainConfig,
};

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Element, Tape, TensorId};
use crate::error::{Error, Result};
use crate::volgrid::Volume;

/// U-Net topology knobs. Channels double per level; the head is a 1x1x1
/// convolution through tanh, so outputs live in (-1, 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    /// Patch extent in (x, y, z) voxels; each axis must be divisible by
    /// 2^(depth-1) so pooled levels stay integral.
    pub patch_dims: [usize; 3],
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig { depth: 3, base_channels: 8, patch_dims: [28, 32, 28] }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 {
            return Err(Error::Config(format!(
                "unet depth and base channels must be positive ({self:?})"
            )));
        }
        let div = 1usize << (self.depth - 1);
        for (a, &p) in self.patch_dims.iter().enumerate() {
            if p == 0 || p % div != 0 {
                return Err(Error::Config(format!(
                    "patch axis {a} = {p} must be a positive multiple of {div} for depth {}",
                    self.depth
                )));
            }
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// The grader network: named parameters plus the topology that interprets
/// them.
#[derive(Debug, Clone)]
pub struct UNet<T: Element> {
    config: UNetConfig,
    names: Vec<String>,
    values: Vec<ArrayD<T>>,
}

impl<T: Element> UNet<T> {
    /// Seeded He-normal initialization.
    pub fn init(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut values = Vec::new();
        let mut push_conv = |name: &str, co: usize, ci: usize, k: usize, rng: &mut ChaCha8Rng| {
            let fan_in = (ci * k * k * k) as f64;
            let std = T::from_f64((2.0 / fan_in).sqrt());
            let w = ArrayD::from_shape_fn(IxDyn(&[co, ci, k, k, k]), |_| {
                T::standard_normal(rng) * std
            });
            names.push(format!("{name}.w"));
            values.push(w);
            names.push(format!("{name}.b"));
            values.push(ArrayD::zeros(IxDyn(&[co])));
        };

        for level in 0..config.depth {
            let cin = if level == 0 { 1 } else { config.channels(level - 1) };
            let c = config.channels(level);
            push_conv(&format!("enc{level}.conv0"), c, cin, 3, &mut rng);
            push_conv(&format!("enc{level}.conv1"), c, c, 3, &mut rng);
        }
        for level in (0..config.depth.saturating_sub(1)).rev() {
            let c = config.channels(level);
            let cin = config.channels(level + 1) + c;
            push_conv(&format!("dec{level}.conv0"), c, cin, 3, &mut rng);
            push_conv(&format!("dec{level}.conv1"), c, c, 3, &mut rng);
        }
        push_conv("head", 1, config.base_channels, 1, &mut rng);
        Ok(UNet { config, names, values })
    }

    pub fn from_params(config: UNetConfig, params: Vec<(String, ArrayD<T>)>) -> Result<Self> {
        let template = UNet::<T>::init(config, 0)?;
        if params.len() != template.names.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, got {}",
                template.names.len(),
                params.len()
            )));
        }
        let mut names = Vec::with_capacity(params.len());
        let mut values = Vec::with_capacity(params.len());
        for ((name, value), (want_name, want)) in
            params.into_iter().zip(template.names.iter().zip(&template.values))
        {
            if &name != want_name || value.shape() != want.shape() {
                return Err(Error::Format(format!(
                    "parameter {name} (shape {:?}) does not match expected {want_name} ({:?})",
                    value.shape(),
                    want.shape()
                )));
            }
            names.push(name);
            values.push(value);
        }
        Ok(UNet { config, names, values })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[ArrayD<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [ArrayD<T>] {
        &mut self.values
    }

    pub fn named_params(&self) -> Vec<(String, ArrayD<T>)> {
        self.names.iter().cloned().zip(self.values.iter().cloned()).collect()
    }

    /// FNV-1a digest over the raw parameter bits, in declaration order.
    pub fn params_digest(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        for v in &self.values {
            for e in v.iter() {
                for b in e.as_f32().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }

    /// Builds the network on a tape. Input is `[N, 1, pz, py, px]`; returns
    /// the tanh output of the same shape plus leaf ids of every parameter
    /// (in `values()` order) for gradient extraction.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        x: TensorId,
        requires_grad: bool,
    ) -> Result<(TensorId, Vec<TensorId>)> {
        let expect = [
            self.config.patch_dims[2],
            self.config.patch_dims[1],
            self.config.patch_dims[0],
        ];
        let shape = tape.shape(x).to_vec();
        if shape.len() != 5 || shape[1] != 1 || shape[2..] != expect {
            return Err(Error::ShapeMismatch(format!(
                "grader input shape {shape:?}, expected [N, 1, {}, {}, {}]",
                expect[0], expect[1], expect[2]
            )));
        }

        fn push_leaf<T: Element>(
            tape: &mut Tape<T>,
            values: &[ArrayD<T>],
            cursor: &mut usize,
            ids: &mut Vec<TensorId>,
            requires_grad: bool,
        ) -> TensorId {
            let id = tape.leaf(values[*cursor].clone(), requires_grad);
            *cursor += 1;
            ids.push(id);
            id
        }

        fn conv_block<T: Element>(
            tape: &mut Tape<T>,
            values: &[ArrayD<T>],
            cursor: &mut usize,
            ids: &mut Vec<TensorId>,
            requires_grad: bool,
            mut h: TensorId,
        ) -> Result<TensorId> {
            for _ in 0..2 {
                let w = push_leaf(tape, values, cursor, ids, requires_grad);
                let b = push_leaf(tape, values, cursor, ids, requires_grad);
                h = tape.conv3d(h, w, b, 1, 1)?;
                h = tape.relu(h);
            }
            Ok(h)
        }

        let mut ids = Vec::with_capacity(self.values.len());
        let mut cursor = 0usize;
        let mut skips = Vec::new();
        let mut h = x;
        for level in 0..self.config.depth {
            h = conv_block(tape, &self.values, &mut cursor, &mut ids, requires_grad, h)?;
            if level + 1 < self.config.depth {
                skips.push(h);
                h = tape.maxpool3d_2x(h)?;
            }
        }
        for level in (0..self.config.depth.saturating_sub(1)).rev() {
            h = tape.upsample_nearest3d(h)?;
            h = tape.concat_channels(h, skips[level])?;
            h = conv_block(tape, &self.values, &mut cursor, &mut ids, requires_grad, h)?;
        }
        let w = push_leaf(tape, &self.values, &mut cursor, &mut ids, requires_grad);
        let b = push_leaf(tape, &self.values, &mut cursor, &mut ids, requires_grad);
        let logits = tape.conv3d(h, w, b, 1, 0)?;
        let out = tape.tanh(logits);
        Ok((out, ids))
    }
}

/// Zero-mean unit-variance normalization applied to every patch before it
/// reaches the network; this is what makes graders indifferent to
/// gain/bias acquisition shifts.
pub fn normalize_patch(data: &[f32]) -> Vec<f32> {
    let n = data.len().max(1) as f64;
    let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-6);
    data.iter().map(|&v| ((v as f64 - mean) / std) as f32).collect()
}

/// One trained specialist with its grid location and vote weight.
#[derive(Debug, Clone)]
pub struct GraderModel {
    pub location: usize,
    pub parent: Option<usize>,
    /// Balanced validation accuracy; the ensemble vote weight.
    pub alpha: f64,
    pub unet: UNet<f32>,
    pub epochs_trained: usize,
    pub best_val_loss: f64,
    /// Digest of the parameters this model started from (the parent's
    /// final parameters for non-root locations).
    pub init_digest: u64,
}

/// Runs one patch through a grader; output has the patch shape with values
/// in [-1, 1].
pub fn grade_patch(model: &GraderModel, patch: &Volume) -> Result<Volume> {
    grade_patch_with(&model.unet, patch)
}

/// Grading by an explicit network (used by the single-model baseline).
pub fn grade_patch_with(unet: &UNet<f32>, patch: &Volume) -> Result<Volume> {
    let [px, py, pz] = unet.config().patch_dims;
    if patch.dims() != unet.config().patch_dims {
        return Err(Error::ShapeMismatch(format!(
            "patch dims {:?} do not match grader config {:?}",
            patch.dims(),
            unet.config().patch_dims
        )));
    }
    let normalized = normalize_patch(patch.data());
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(
        ArrayD::from_shape_vec(IxDyn(&[1, 1, pz, py, px]), normalized)
            .expect("patch shape"),
        false,
    );
    let (out, _) = unet.forward(&mut tape, x, false)?;
    let data = tape.value(out).iter().copied().collect();
    Volume::new(patch.dims(), patch.spacing(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> UNetConfig {
        UNetConfig { depth: 2, base_channels: 2, patch_dims: [6, 4, 6] }
    }

    #[test]
    fn config_validation() {
        assert!(UNetConfig::default().validate().is_ok());
        assert!(UNetConfig { depth: 3, base_channels: 8, patch_dims: [30, 32, 28] }
            .validate()
            .is_err()); // 30 not divisible by 4
        assert!(UNetConfig { depth: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn output_shape_matches_input_and_range() {
        let unet = UNet::<f32>::init(tiny_config(), 7).unwrap();
        let patch = Volume::from_fn([6, 4, 6], [1.0; 3], |x, y, z| {
            (x as f32).sin() + (y as f32 * 0.7).cos() + z as f32 * 0.05
        })
        .unwrap();
        let model = GraderModel {
            location: 0,
            parent: None,
            alpha: 0.5,
            unet,
            epochs_trained: 0,
            best_val_loss: f64::INFINITY,
            init_digest: 0,
        };
        let g = grade_patch(&model, &patch).unwrap();
        assert_eq!(g.dims(), patch.dims());
        assert!(g.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn zero_head_grades_to_zero() {
        let mut unet = UNet::<f32>::init(tiny_config(), 3).unwrap();
        let n = unet.values().len();
        // head weight and bias are the last two tensors
        for v in &mut unet.values_mut()[n - 2..] {
            v.fill(0.0);
        }
        let patch = Volume::from_fn([6, 4, 6], [1.0; 3], |x, _, _| x as f32).unwrap();
        let model = GraderModel {
            location: 0,
            parent: None,
            alpha: 0.5,
            unet,
            epochs_trained: 0,
            best_val_loss: f64::INFINITY,
            init_digest: 0,
        };
        let g = grade_patch(&model, &patch).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = UNet::<f32>::init(tiny_config(), 42).unwrap();
        let b = UNet::<f32>::init(tiny_config(), 42).unwrap();
        let c = UNet::<f32>::init(tiny_config(), 43).unwrap();
        assert_eq!(a.params_digest(), b.params_digest());
        assert_ne!(a.params_digest(), c.params_digest());
    }

    #[test]
    fn from_params_roundtrip_and_validation() {
        let unet = UNet::<f32>::init(tiny_config(), 5).unwrap();
        let back = UNet::<f32>::from_params(tiny_config(), unet.named_params()).unwrap();
        assert_eq!(back.params_digest(), unet.params_digest());
        let mut broken = unet.named_params();
        broken.swap(0, 2);
        assert!(UNet::<f32>::from_params(tiny_config(), broken).is_err());
    }

    #[test]
    fn normalization_removes_gain_and_bias() {
        let raw: Vec<f32> = (0..64).map(|i| (i as f32 * 0.37).sin()).collect();
        let shifted: Vec<f32> = raw.iter().map(|&v| 1.2 * v + 5.0).collect();
        let a = normalize_patch(&raw);
        let b = normalize_patch(&shifted);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-4, "{x} vs {y}");
        }
    }
}
