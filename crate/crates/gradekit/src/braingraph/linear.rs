//! Hinge-loss linear baseline over flattened per-structure features; fills
//! the classical-classifier comparison role with the same optimizer
//! machinery and evaluation interface as the GCN.

use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{AdamConfig, AdamState, Tape};
use crate::error::{Error, Result};

use super::gcn::{digest_values, fnv, sigmoid, split_labeled, ClassifierTrainConfig};
use super::{build_graph, GraphInputs, NormStats};

/// Linear margin classifier on `[dg_1..dg_s, v_1..v_s, age]` z-scored
/// features.
#[derive(Debug, Clone)]
pub struct LinearClassifier {
    pub stats: NormStats,
    pub(crate) weights: ArrayD<f32>,
    pub(crate) bias: ArrayD<f32>,
}

impl LinearClassifier {
    pub(crate) fn feature_len(&self) -> usize {
        2 * self.stats.n_structures + 1
    }

    pub fn params_digest(&self) -> u64 {
        digest_values(&[self.weights.clone(), self.bias.clone()])
    }

    fn logit_from_flat(&self, flat: &[f32]) -> f64 {
        let w = self.weights.as_slice().expect("standard layout");
        let mut z = self.bias[[0]] as f64;
        for (a, b) in w.iter().zip(flat) {
            z += (*a as f64) * (*b as f64);
        }
        z
    }

    pub fn classify(&self, inputs: &GraphInputs) -> Result<f64> {
        let flat = flatten_features(inputs, &self.stats)?;
        Ok(sigmoid(self.logit_from_flat(&flat)))
    }

    /// Noise-averaged prediction mirroring the GCN inference scheme.
    pub fn classify_with_noise(
        &self,
        inputs: &GraphInputs,
        sigma2: f64,
        repeats: usize,
        seed: u64,
    ) -> Result<f64> {
        use rand_distr::{Distribution, StandardNormal};
        if repeats == 0 {
            return Err(Error::InvalidParameter("noise averaging needs repeats >= 1".into()));
        }
        let flat = flatten_features(inputs, &self.stats)?;
        let sigma = sigma2.max(0.0).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut total = 0.0;
        for _ in 0..repeats {
            let noisy: Vec<f32> = flat
                .iter()
                .map(|&v| {
                    if sigma > 0.0 {
                        let n: f64 = StandardNormal.sample(&mut rng);
                        v + (sigma * n) as f32
                    } else {
                        v
                    }
                })
                .collect();
            total += sigmoid(self.logit_from_flat(&noisy));
        }
        Ok(total / repeats as f64)
    }
}

/// Z-scored flattened feature vector (gradings, volumes, age).
pub(crate) fn flatten_features(inputs: &GraphInputs, stats: &NormStats) -> Result<Vec<f32>> {
    let graph = build_graph(&inputs.dg, &inputs.volumes, inputs.age, stats)?;
    let s = stats.n_structures;
    let mut flat = Vec::with_capacity(2 * s + 1);
    for i in 0..s {
        flat.push(graph.features[[i, 0]] as f32);
    }
    for i in 0..s {
        flat.push(graph.features[[i, 1]] as f32);
    }
    flat.push(graph.features[[0, 2]] as f32);
    Ok(flat)
}

/// Hinge-loss training: `mean(relu(1 - y * logit))` with labels in {-1, +1},
/// optimized by the shared Adam machinery with early stopping.
pub fn train_linear_baseline(
    dataset: &[(GraphInputs, bool)],
    cfg: &ClassifierTrainConfig,
) -> Result<LinearClassifier> {
    cfg.validate()?;
    let labels: Vec<bool> = dataset.iter().map(|(_, y)| *y).collect();
    let (train_idx, val_idx) = split_labeled(&labels, cfg.val_fraction, cfg.seed)?;

    let train_inputs: Vec<&GraphInputs> = train_idx.iter().map(|&i| &dataset[i].0).collect();
    let stats = NormStats::fit(&train_inputs)?;
    let flats: Vec<Vec<f32>> = dataset
        .iter()
        .map(|(g, _)| flatten_features(g, &stats))
        .collect::<Result<_>>()?;
    let dim = 2 * stats.n_structures + 1;

    let mut model = LinearClassifier {
        stats,
        weights: ArrayD::zeros(IxDyn(&[dim])),
        bias: ArrayD::zeros(IxDyn(&[1])),
    };
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr as f32));
    let mut rng = ChaCha8Rng::seed_from_u64(fnv(&[cfg.seed, 0x4c494e]));
    let mut best = (model.weights.clone(), model.bias.clone());
    let mut best_loss = f64::INFINITY;
    let mut bad = 0usize;

    let hinge = |model: &LinearClassifier, idx: &[usize], flats: &[Vec<f32>]| -> f64 {
        idx.iter()
            .map(|&i| {
                let y = if labels[i] { 1.0 } else { -1.0 };
                (1.0 - y * model.logit_from_flat(&flats[i])).max(0.0)
            })
            .sum::<f64>()
            / idx.len().max(1) as f64
    };

    let mut order = train_idx.clone();
    for _epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len();
            let mut xs = Vec::with_capacity(b * dim);
            let mut neg_y = Vec::with_capacity(b);
            for &i in chunk {
                xs.extend_from_slice(&flats[i]);
                neg_y.push(if labels[i] { -1.0f32 } else { 1.0 });
            }
            let mut tape = Tape::<f32>::new();
            let x = tape.leaf(
                ArrayD::from_shape_vec(IxDyn(&[b, dim]), xs).expect("batch shape"),
                false,
            );
            let w = tape.leaf(
                model
                    .weights
                    .clone()
                    .into_shape_with_order(IxDyn(&[dim, 1]))
                    .expect("weight shape"),
                true,
            );
            let bias = tape.leaf(model.bias.clone(), true);
            let logits = tape.linear(x, w, bias)?;
            // hinge margin: relu(1 - y*z) via constant scale -y and shift 1
            let margins = tape.affine(
                logits,
                ArrayD::from_shape_vec(IxDyn(&[b, 1]), neg_y).expect("label shape"),
                1.0,
            )?;
            let active = tape.relu(margins);
            let loss = tape.mean_all(active);
            tape.backward(loss)?;
            let gw = tape
                .grad(w)
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(IxDyn(&[dim, 1])))
                .into_shape_with_order(IxDyn(&[dim]))
                .expect("grad shape");
            let gb = tape
                .grad(bias)
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(IxDyn(&[1])));
            let mut params = [model.weights.clone(), model.bias.clone()];
            adam.step(&mut params, &[gw, gb])?;
            let [w_new, b_new] = params;
            model.weights = w_new;
            model.bias = b_new;
        }
        let val_loss = hinge(&model, &val_idx, &flats);
        if val_loss < best_loss {
            best_loss = val_loss;
            best = (model.weights.clone(), model.bias.clone());
            bad = 0;
        } else {
            bad += 1;
            if bad >= cfg.patience {
                break;
            }
        }
    }
    model.weights = best.0;
    model.bias = best.1;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::DgVector;

    fn inputs(dg: Vec<f64>, age: f64) -> GraphInputs {
        let s = dg.len();
        GraphInputs {
            dg: DgVector { values: dg, missing: vec![false; s] },
            volumes: vec![1.0; s],
            age,
        }
    }

    #[test]
    fn zero_weights_predict_the_tie_probability() {
        let model = LinearClassifier {
            stats: NormStats {
                feat_mean: [0.0; 3],
                feat_std: [1.0; 3],
                dg_structure_mean: vec![0.0; 2],
                n_structures: 2,
            },
            weights: ArrayD::zeros(IxDyn(&[5])),
            bias: ArrayD::zeros(IxDyn(&[1])),
        };
        let p = model.classify(&inputs(vec![0.9, -0.9], 77.0)).unwrap();
        assert_eq!(p, 0.5);
    }

    #[test]
    fn separable_toy_set_reaches_perfect_train_accuracy() {
        let mut data = Vec::new();
        for i in 0..20 {
            let y = i % 2 == 0;
            let v = if y { 0.5 } else { -0.5 };
            data.push((inputs(vec![v + 0.01 * i as f64, v], 70.0 + i as f64 * 0.1), y));
        }
        let cfg = ClassifierTrainConfig {
            lr: 0.05,
            max_epochs: 200,
            seed: 2,
            ..Default::default()
        };
        let model = train_linear_baseline(&data, &cfg).unwrap();
        let correct = data
            .iter()
            .filter(|(g, y)| (model.classify(g).unwrap() >= 0.5) == *y)
            .count();
        assert_eq!(correct, data.len());
    }

    #[test]
    fn same_seed_is_bit_reproducible() {
        let data: Vec<(GraphInputs, bool)> = (0..12)
            .map(|i| {
                let y = i % 2 == 0;
                (inputs(vec![if y { 0.4 } else { -0.4 }, 0.1 * i as f64], 70.0), y)
            })
            .collect();
        let cfg = ClassifierTrainConfig { max_epochs: 20, seed: 4, ..Default::default() };
        let a = train_linear_baseline(&data, &cfg).unwrap();
        let b = train_linear_baseline(&data, &cfg).unwrap();
        assert_eq!(a.params_digest(), b.params_digest());
    }
}
