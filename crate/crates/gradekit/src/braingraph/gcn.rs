//! Graph convolutional classifier: stacked symmetric-normalized
//! propagation layers, global mean pooling, and a single-logit head.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{AdamConfig, AdamState, Element, Tape, TensorId};
use crate::error::{Error, Result};
use crate::grader::stratified_split;
use crate::volgrid::SubjectClass;

use super::{build_graph, GraphInputs, NormStats, StructureGraph};

/// One propagation layer: `ReLU(A_hat . H . W)`.
pub fn gcn_layer<T: Element>(
    tape: &mut Tape<T>,
    h: TensorId,
    w: TensorId,
    a_hat: TensorId,
) -> Result<TensorId> {
    let mixed = tape.matmul(a_hat, h)?;
    let projected = tape.matmul(mixed, w)?;
    Ok(tape.relu(projected))
}

/// GCN topology and inference-noise settings.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct GcnConfig {
    pub layers: usize,
    pub channels: usize,
    /// Variance of the Gaussian feature noise averaged over at inference.
    pub noise_sigma2: f64,
    pub noise_repeats: usize,
}

impl Default for GcnConfig {
    fn default() -> Self {
        GcnConfig { layers: 3, channels: 32, noise_sigma2: 0.01, noise_repeats: 3 }
    }
}

/// Optimization settings shared by the GCN and the linear baseline.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ClassifierTrainConfig {
    pub lr: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            lr: 0.0003,
            patience: 20,
            max_epochs: 400,
            batch_size: 8,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl ClassifierTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config(format!(
                "classifier training needs positive lr, patience, batch size ({self:?})"
            )));
        }
        Ok(())
    }
}

/// Trained graph classifier: parameters plus the feature statistics they
/// were fitted with.
#[derive(Debug, Clone)]
pub struct GcnClassifier {
    pub config: GcnConfig,
    pub stats: NormStats,
    pub(crate) names: Vec<String>,
    pub(crate) values: Vec<ArrayD<f32>>,
}

impl GcnClassifier {
    pub(crate) fn init(config: GcnConfig, stats: NormStats, seed: u64) -> Result<Self> {
        if config.layers == 0 || config.channels == 0 {
            return Err(Error::Config(format!("degenerate gcn config {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut values = Vec::new();
        let mut xavier = |fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng| {
            let std = (2.0 / (fan_in + fan_out) as f64).sqrt() as f32;
            ArrayD::from_shape_fn(IxDyn(&[fan_in, fan_out]), |_| {
                let n: f32 = StandardNormal.sample(rng);
                n * std
            })
        };
        for l in 0..config.layers {
            let fan_in = if l == 0 { 3 } else { config.channels };
            names.push(format!("gcn.w{l}"));
            values.push(xavier(fan_in, config.channels, &mut rng));
        }
        names.push("gcn.fc.w".into());
        values.push(xavier(config.channels, 1, &mut rng));
        names.push("gcn.fc.b".into());
        values.push(ArrayD::zeros(IxDyn(&[1])));
        Ok(GcnClassifier { config, stats, names, values })
    }

    pub fn params_digest(&self) -> u64 {
        digest_values(&self.values)
    }

    pub fn named_params(&self) -> Vec<(String, ArrayD<f32>)> {
        self.names.iter().cloned().zip(self.values.iter().cloned()).collect()
    }

    pub(crate) fn values_mut(&mut self) -> &mut [ArrayD<f32>] {
        &mut self.values
    }

    /// Registers parameters and builds the logit for one graph.
    pub(crate) fn forward_graph(
        &self,
        tape: &mut Tape<f32>,
        param_ids: &[TensorId],
        graph: &StructureGraph,
    ) -> Result<TensorId> {
        let s = graph.node_count();
        if s == 0 {
            return Err(Error::ShapeMismatch("graph has no nodes".into()));
        }
        let feats = ArrayD::from_shape_vec(
            IxDyn(&[s, 3]),
            graph.features.iter().map(|&v| v as f32).collect(),
        )
        .expect("feature shape");
        let mut h = tape.constant(feats);
        let a_hat = tape.constant(ArrayD::from_elem(IxDyn(&[s, s]), 1.0 / s as f32));
        for l in 0..self.config.layers {
            h = gcn_layer(tape, h, param_ids[l], a_hat)?;
        }
        // global mean pooling over nodes as a constant 1/s row
        let pool = tape.constant(ArrayD::from_elem(IxDyn(&[1, s]), 1.0 / s as f32));
        let pooled = tape.matmul(pool, h)?;
        tape.linear(pooled, param_ids[self.config.layers], param_ids[self.config.layers + 1])
    }

    pub(crate) fn register_params(
        &self,
        tape: &mut Tape<f32>,
        requires_grad: bool,
    ) -> Vec<TensorId> {
        self.values.iter().map(|v| tape.leaf(v.clone(), requires_grad)).collect()
    }

    fn logit(&self, graph: &StructureGraph) -> Result<f64> {
        let mut tape = Tape::<f32>::new();
        let ids = self.register_params(&mut tape, false);
        let out = self.forward_graph(&mut tape, &ids, graph)?;
        Ok(tape.scalar_value(out) as f64)
    }

    /// Normalizes raw inputs with the training statistics and returns the
    /// disease probability (threshold 0.5 means the positive class).
    pub fn classify(&self, inputs: &GraphInputs) -> Result<f64> {
        let graph = build_graph(&inputs.dg, &inputs.volumes, inputs.age, &self.stats)?;
        Ok(sigmoid(self.logit(&graph)?))
    }

    /// Probability for an explicit z-scored feature matrix.
    pub fn classify_features(&self, graph: &StructureGraph) -> Result<f64> {
        Ok(sigmoid(self.logit(graph)?))
    }

    /// Mean of `repeats` predictions with i.i.d. Gaussian noise (variance
    /// `sigma2`) added to the normalized node features; seeded.
    pub fn classify_with_noise(
        &self,
        inputs: &GraphInputs,
        sigma2: f64,
        repeats: usize,
        seed: u64,
    ) -> Result<f64> {
        if repeats == 0 {
            return Err(Error::InvalidParameter("noise averaging needs repeats >= 1".into()));
        }
        let graph = build_graph(&inputs.dg, &inputs.volumes, inputs.age, &self.stats)?;
        let sigma = sigma2.max(0.0).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut total = 0.0;
        for _ in 0..repeats {
            let mut noisy = graph.clone();
            if sigma > 0.0 {
                for v in noisy.features.iter_mut() {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    *v += sigma * n;
                }
            }
            total += sigmoid(self.logit(&noisy)?);
        }
        Ok(total / repeats as f64)
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn digest_values(values: &[ArrayD<f32>]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for v in values {
        for e in v.iter() {
            for b in e.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
    }
    h
}

pub(crate) fn split_labeled(
    labels: &[bool],
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let classes: Vec<SubjectClass> = labels
        .iter()
        .map(|&p| if p { SubjectClass::Ad } else { SubjectClass::Cn })
        .collect();
    if !labels.iter().any(|&p| p) || !labels.iter().any(|&p| !p) {
        return Err(Error::Config(
            "classifier training needs both classes present".into(),
        ));
    }
    let split = stratified_split(&classes, val_fraction, seed)?;
    Ok((split.train_idx, split.val_idx))
}

/// BCE/Adam training with early stopping on validation loss; statistics are
/// fitted on the training split only.
pub fn train_gcn(
    dataset: &[(GraphInputs, bool)],
    gcn_config: GcnConfig,
    cfg: &ClassifierTrainConfig,
) -> Result<GcnClassifier> {
    cfg.validate()?;
    let labels: Vec<bool> = dataset.iter().map(|(_, y)| *y).collect();
    let (train_idx, val_idx) = split_labeled(&labels, cfg.val_fraction, cfg.seed)?;

    let train_inputs: Vec<&GraphInputs> = train_idx.iter().map(|&i| &dataset[i].0).collect();
    let stats = NormStats::fit(&train_inputs)?;
    let mut model = GcnClassifier::init(gcn_config, stats, fnv(&[cfg.seed, 0x47434e]))?;

    let graphs: Vec<StructureGraph> = dataset
        .iter()
        .map(|(g, _)| build_graph(&g.dg, &g.volumes, g.age, &model.stats))
        .collect::<Result<_>>()?;

    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr as f32));
    let mut rng = ChaCha8Rng::seed_from_u64(fnv(&[cfg.seed, 0x47434e5452]));
    let mut best_values = model.values.clone();
    let mut best_loss = f64::INFINITY;
    let mut bad = 0usize;

    let mut order = train_idx.clone();
    for _epoch in 0..cfg.max_epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::<f32>::new();
            let ids = model.register_params(&mut tape, true);
            let mut losses = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let logit = model.forward_graph(&mut tape, &ids, &graphs[i])?;
                losses.push(tape.bce_with_logits(logit, labels[i] as u8)?);
            }
            let total = tape.add_n(&losses)?;
            let loss = tape.scale(total, 1.0 / chunk.len() as f32);
            tape.backward(loss)?;
            let grads: Vec<ArrayD<f32>> = ids
                .iter()
                .map(|&id| {
                    tape.grad(id)
                        .cloned()
                        .unwrap_or_else(|| ArrayD::zeros(tape.value(id).raw_dim()))
                })
                .collect();
            adam.step(model.values_mut(), &grads)?;
        }

        let val_loss = mean_bce(&model, &graphs, &labels, &val_idx)?;
        if val_loss < best_loss {
            best_loss = val_loss;
            best_values = model.values.clone();
            bad = 0;
        } else {
            bad += 1;
            if bad >= cfg.patience {
                break;
            }
        }
    }
    model.values = best_values;
    Ok(model)
}

fn mean_bce(
    model: &GcnClassifier,
    graphs: &[StructureGraph],
    labels: &[bool],
    idx: &[usize],
) -> Result<f64> {
    let mut total = 0.0;
    for &i in idx {
        let mut tape = Tape::<f32>::new();
        let ids = model.register_params(&mut tape, false);
        let logit = model.forward_graph(&mut tape, &ids, &graphs[i])?;
        let loss = tape.bce_with_logits(logit, labels[i] as u8)?;
        total += tape.scalar_value(loss) as f64;
    }
    Ok(total / idx.len().max(1) as f64)
}

pub(crate) fn fnv(parts: &[u64]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for p in parts {
        for b in p.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::DgVector;
    use ndarray::Array2;

    fn stats(s: usize) -> NormStats {
        NormStats {
            feat_mean: [0.0, 0.0, 70.0],
            feat_std: [1.0, 1.0, 10.0],
            dg_structure_mean: vec![0.0; s],
            n_structures: s,
        }
    }

    fn inputs(dg: Vec<f64>, age: f64) -> GraphInputs {
        let s = dg.len();
        GraphInputs {
            dg: DgVector { values: dg, missing: vec![false; s] },
            volumes: vec![1.0; s],
            age,
        }
    }

    #[test]
    fn zero_head_probability_is_half() {
        let mut model = GcnClassifier::init(GcnConfig::default(), stats(4), 3).unwrap();
        let n = model.values.len();
        for v in &mut model.values[n - 2..] {
            v.fill(0.0);
        }
        let p = model.classify(&inputs(vec![0.3, -0.2, 0.5, 0.0], 72.0)).unwrap();
        assert_eq!(p, 0.5);
    }

    #[test]
    fn negating_head_flips_probability() {
        let model = GcnClassifier::init(GcnConfig::default(), stats(4), 7).unwrap();
        let x = inputs(vec![0.4, -0.1, 0.2, 0.6], 68.0);
        let p = model.classify(&x).unwrap();
        let mut negated = model.clone();
        let n = negated.values.len();
        for v in &mut negated.values[n - 2..] {
            v.mapv_inplace(|w| -w);
        }
        let q = negated.classify(&x).unwrap();
        assert!((p + q - 1.0).abs() < 1e-6, "p={p} q={q}");
    }

    #[test]
    fn layer_collapses_complete_graph_rows() {
        // after one propagation on the complete graph all node rows equal
        // the feature column means pushed through W
        let mut tape = Tape::<f64>::new();
        let s = 5;
        let h = tape.constant(ArrayD::from_shape_fn(IxDyn(&[s, 3]), |ix| {
            (ix[0] * 3 + ix[1]) as f64 * 0.17 - 0.4
        }));
        let w = tape.constant(ArrayD::from_shape_fn(IxDyn(&[3, 4]), |ix| {
            ((ix[0] + 2 * ix[1]) % 5) as f64 * 0.21 - 0.3
        }));
        let a_hat = tape.constant(ArrayD::from_elem(IxDyn(&[s, s]), 1.0 / s as f64));
        let out = gcn_layer(&mut tape, h, w, a_hat).unwrap();
        let v = tape.value(out);
        for row in 1..s {
            for c in 0..4 {
                assert!(
                    (v[[row, c]] - v[[0, c]]).abs() < 1e-12,
                    "rows differ after collapse"
                );
            }
        }
        // zero W -> zero output
        let wz = tape.constant(ArrayD::zeros(IxDyn(&[3, 4])));
        let out = gcn_layer(&mut tape, h, wz, a_hat).unwrap();
        assert!(tape.value(out).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn node_permutation_leaves_probability_unchanged() {
        let model = GcnClassifier::init(GcnConfig::default(), stats(6), 11).unwrap();
        let feats = Array2::from_shape_fn((6, 3), |(i, j)| (i as f64 - j as f64) * 0.13);
        let g = StructureGraph { features: feats.clone() };
        let mut permuted = Array2::zeros((6, 3));
        let perm = [3usize, 0, 5, 1, 4, 2];
        for (dst, &src) in perm.iter().enumerate() {
            permuted.row_mut(dst).assign(&feats.row(src));
        }
        let gp = StructureGraph { features: permuted };
        let p0 = model.classify_features(&g).unwrap();
        let p1 = model.classify_features(&gp).unwrap();
        assert!((p0 - p1).abs() < 1e-6, "{p0} vs {p1}");
    }

    #[test]
    fn noise_zero_matches_plain_and_seeded_runs_reproduce() {
        let model = GcnClassifier::init(GcnConfig::default(), stats(4), 5).unwrap();
        let x = inputs(vec![0.2, 0.1, -0.3, 0.4], 75.0);
        let plain = model.classify(&x).unwrap();
        let nz = model.classify_with_noise(&x, 0.0, 3, 123).unwrap();
        assert_eq!(plain, nz);
        let a = model.classify_with_noise(&x, 0.01, 1, 42).unwrap();
        let b = model.classify_with_noise(&x, 0.01, 1, 42).unwrap();
        assert_eq!(a, b);
        assert!(model.classify_with_noise(&x, 0.01, 0, 1).is_err());
    }

    #[test]
    fn noise_averaging_shrinks_spread() {
        let model = GcnClassifier::init(GcnConfig::default(), stats(4), 9).unwrap();
        let x = inputs(vec![0.2, 0.1, -0.3, 0.4], 75.0);
        let spread = |r: usize| {
            let vals: Vec<f64> = (0..100)
                .map(|s| model.classify_with_noise(&x, 0.04, r, s).unwrap())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt()
        };
        let (s1, s9) = (spread(1), spread(9));
        // std of a 9-average shrinks ~3x; allow monte-carlo slack
        let ratio = s1 / s9;
        assert!(
            (2.0..4.5).contains(&ratio),
            "spread ratio {ratio} (s1={s1}, s9={s9})"
        );
    }

    fn separable_dataset(n: usize, s: usize, gap: f64, seed: u64) -> Vec<(GraphInputs, bool)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for i in 0..n {
            let y = i % 2 == 0;
            let center = if y { gap } else { -gap };
            let dg: Vec<f64> = (0..s)
                .map(|_| {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    center + 0.05 * n
                })
                .collect();
            let age = 70.0 + if y { 3.0 } else { -3.0 };
            out.push((inputs(dg, age), y));
        }
        out
    }

    #[test]
    fn separable_features_reach_perfect_validation_bacc() {
        let data = separable_dataset(40, 6, 0.4, 3);
        let cfg = ClassifierTrainConfig { max_epochs: 150, seed: 5, ..Default::default() };
        let model = train_gcn(&data, GcnConfig::default(), &cfg).unwrap();
        let labels: Vec<bool> = data.iter().map(|(_, y)| *y).collect();
        let (_, val_idx) = split_labeled(&labels, cfg.val_fraction, cfg.seed).unwrap();
        let (mut tp, mut np, mut tn, mut nn) = (0, 0, 0, 0);
        for &i in &val_idx {
            let p = model.classify(&data[i].0).unwrap();
            if labels[i] {
                np += 1;
                if p >= 0.5 {
                    tp += 1;
                }
            } else {
                nn += 1;
                if p < 0.5 {
                    tn += 1;
                }
            }
        }
        let bacc = 0.5 * (tp as f64 / np as f64 + tn as f64 / nn as f64);
        assert!(bacc >= 0.999, "expected perfect separation, got {bacc}");
    }

    #[test]
    fn same_seed_reproduces_weights_bit_exactly() {
        let data = separable_dataset(20, 4, 0.3, 8);
        let cfg = ClassifierTrainConfig { max_epochs: 30, seed: 13, ..Default::default() };
        let a = train_gcn(&data, GcnConfig::default(), &cfg).unwrap();
        let b = train_gcn(&data, GcnConfig::default(), &cfg).unwrap();
        assert_eq!(a.params_digest(), b.params_digest());
    }

    #[test]
    fn single_class_dataset_is_config_error() {
        let data: Vec<(GraphInputs, bool)> =
            (0..10).map(|_| (inputs(vec![0.1, 0.2], 70.0), true)).collect();
        assert!(matches!(
            train_gcn(&data, GcnConfig::default(), &ClassifierTrainConfig::default()),
            Err(Error::Config(_))
        ));
    }
}
