//! Subject classification over a complete structure graph.
//!
//! Each subject becomes a graph with one node per brain structure carrying
//! a (grading, volume, age) feature triple, z-scored with training-set
//! statistics. A graph convolutional classifier (or a hinge-loss linear
//! baseline filling the SVM comparison role) maps the graph to a disease
//! probability.

mod gcn;
mod linear;

pub use gcn::{gcn_layer, train_gcn, GcnClassifier, GcnConfig};
pub use linear::{train_linear_baseline, LinearClassifier};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::ensemble::DgVector;
use crate::error::{Error, Result};

/// Raw per-subject classifier inputs, straight from the grading stage.
#[derive(Debug, Clone)]
pub struct GraphInputs {
    pub dg: DgVector,
    /// Structure volumes in percent of the intracranial cavity.
    pub volumes: Vec<f64>,
    pub age: f64,
}

/// Z-scoring statistics fitted on the training split only, plus
/// per-structure grading means for imputing missing structures.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NormStats {
    pub feat_mean: [f64; 3],
    pub feat_std: [f64; 3],
    pub dg_structure_mean: Vec<f64>,
    pub n_structures: usize,
}

impl NormStats {
    pub fn fit(inputs: &[&GraphInputs]) -> Result<Self> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Config("cannot fit statistics on an empty set".into()))?;
        let s = first.dg.len();
        if s == 0 {
            return Err(Error::Config("subjects carry zero structures".into()));
        }
        for g in inputs {
            if g.dg.len() != s || g.volumes.len() != s {
                return Err(Error::ShapeMismatch(format!(
                    "inconsistent structure counts: {} vs {s}",
                    g.dg.len()
                )));
            }
        }

        let mut dg_sum = 0.0;
        let mut dg_n = 0usize;
        let mut per_struct_sum = vec![0.0f64; s];
        let mut per_struct_n = vec![0usize; s];
        let mut vol_sum = 0.0;
        let mut age_sum = 0.0;
        for g in inputs {
            for i in 0..s {
                if !g.dg.missing[i] {
                    dg_sum += g.dg.values[i];
                    dg_n += 1;
                    per_struct_sum[i] += g.dg.values[i];
                    per_struct_n[i] += 1;
                }
                vol_sum += g.volumes[i];
            }
            age_sum += g.age;
        }
        if dg_n == 0 {
            return Err(Error::Config("every grading entry is missing".into()));
        }
        let dg_mean = dg_sum / dg_n as f64;
        let vol_mean = vol_sum / (inputs.len() * s) as f64;
        let age_mean = age_sum / inputs.len() as f64;

        let mut dg_var = 0.0;
        let mut vol_var = 0.0;
        let mut age_var = 0.0;
        for g in inputs {
            for i in 0..s {
                if !g.dg.missing[i] {
                    dg_var += (g.dg.values[i] - dg_mean).powi(2);
                }
                vol_var += (g.volumes[i] - vol_mean).powi(2);
            }
            age_var += (g.age - age_mean).powi(2);
        }
        let dg_std = (dg_var / dg_n as f64).sqrt().max(1e-6);
        let vol_std = (vol_var / (inputs.len() * s) as f64).sqrt().max(1e-6);
        let age_std = (age_var / inputs.len() as f64).sqrt().max(1e-6);

        let dg_structure_mean = (0..s)
            .map(|i| {
                if per_struct_n[i] > 0 {
                    per_struct_sum[i] / per_struct_n[i] as f64
                } else {
                    dg_mean
                }
            })
            .collect();

        Ok(NormStats {
            feat_mean: [dg_mean, vol_mean, age_mean],
            feat_std: [dg_std, vol_std, age_std],
            dg_structure_mean,
            n_structures: s,
        })
    }
}

/// Complete graph over structures with one z-scored (DG, V, A) row per node.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureGraph {
    /// s x 3 node-feature matrix.
    pub features: Array2<f64>,
}

impl StructureGraph {
    pub fn node_count(&self) -> usize {
        self.features.nrows()
    }

    /// Undirected edge count of the complete graph: s(s-1)/2.
    pub fn edge_count(&self) -> usize {
        let s = self.node_count();
        s * (s - 1) / 2
    }
}

/// Builds a subject's graph: missing grading entries are imputed with the
/// training-set mean of their structure, then every feature column is
/// z-scored with the training statistics; age is replicated on all nodes.
pub fn build_graph(
    dg: &DgVector,
    volumes: &[f64],
    age: f64,
    stats: &NormStats,
) -> Result<StructureGraph> {
    let s = stats.n_structures;
    if dg.len() != s || volumes.len() != s {
        return Err(Error::ShapeMismatch(format!(
            "subject has {} structures, statistics were fitted on {s}",
            dg.len()
        )));
    }
    let mut features = Array2::zeros((s, 3));
    for i in 0..s {
        let dg_raw = if dg.missing[i] { stats.dg_structure_mean[i] } else { dg.values[i] };
        features[[i, 0]] = (dg_raw - stats.feat_mean[0]) / stats.feat_std[0];
        features[[i, 1]] = (volumes[i] - stats.feat_mean[1]) / stats.feat_std[1];
        features[[i, 2]] = (age - stats.feat_mean[2]) / stats.feat_std[2];
    }
    Ok(StructureGraph { features })
}

/// Adjacency of the complete graph on `s` nodes (zero diagonal).
pub fn complete_adjacency(s: usize) -> Array2<f64> {
    let mut a = Array2::from_elem((s, s), 1.0);
    for i in 0..s {
        a[[i, i]] = 0.0;
    }
    a
}

/// Symmetric propagation operator `D^-1/2 (A + I) D^-1/2` with `D` the
/// degree matrix of `A + I`. On the complete graph every entry is `1/s`.
pub fn normalized_adjacency(adj: &Array2<f64>) -> Result<Array2<f64>> {
    let s = adj.nrows();
    if adj.ncols() != s {
        return Err(Error::ShapeMismatch(format!(
            "adjacency must be square, got {:?}",
            adj.shape()
        )));
    }
    for i in 0..s {
        if adj[[i, i]] != 0.0 {
            return Err(Error::InvalidParameter(
                "adjacency must have a zero diagonal before self-loop augmentation".into(),
            ));
        }
        for j in 0..s {
            if (adj[[i, j]] - adj[[j, i]]).abs() > 1e-12 || adj[[i, j]] < 0.0 {
                return Err(Error::InvalidParameter(
                    "adjacency must be symmetric and non-negative".into(),
                ));
            }
        }
    }
    let mut with_loops = adj.clone();
    for i in 0..s {
        with_loops[[i, i]] = 1.0;
    }
    let degree: Vec<f64> = (0..s).map(|i| with_loops.row(i).sum()).collect();
    if degree.iter().any(|&d| d <= 0.0) {
        return Err(Error::InvalidParameter("graph has an isolated node".into()));
    }
    let mut out = with_loops;
    for i in 0..s {
        for j in 0..s {
            out[[i, j]] /= (degree[i] * degree[j]).sqrt();
        }
    }
    Ok(out)
}

/// Either classifier family behind one prediction interface.
#[derive(Debug, Clone)]
pub enum Classifier {
    Gcn(GcnClassifier),
    Linear(LinearClassifier),
}

impl Classifier {
    pub fn stats(&self) -> &NormStats {
        match self {
            Classifier::Gcn(m) => &m.stats,
            Classifier::Linear(m) => &m.stats,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Classifier::Gcn(_) => "gcn",
            Classifier::Linear(_) => "linear",
        }
    }

    pub fn predict(&self, inputs: &GraphInputs) -> Result<f64> {
        match self {
            Classifier::Gcn(m) => m.classify(inputs),
            Classifier::Linear(m) => m.classify(inputs),
        }
    }

    pub fn predict_with_noise(
        &self,
        inputs: &GraphInputs,
        sigma2: f64,
        repeats: usize,
        seed: u64,
    ) -> Result<f64> {
        match self {
            Classifier::Gcn(m) => m.classify_with_noise(inputs, sigma2, repeats, seed),
            Classifier::Linear(m) => m.classify_with_noise(inputs, sigma2, repeats, seed),
        }
    }

    /// Persists the model as named f32 tensors (parameters, normalization
    /// statistics, and a kind/config record).
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        use ndarray::{ArrayD, IxDyn};
        let stats = self.stats();
        let mut tensors: Vec<(String, ArrayD<f32>)> = Vec::new();
        let kind = match self {
            Classifier::Gcn(_) => 0.0f32,
            Classifier::Linear(_) => 1.0,
        };
        tensors.push(("meta.kind".into(), ArrayD::from_elem(IxDyn(&[1]), kind)));
        tensors.push((
            "stats.feat_mean".into(),
            ArrayD::from_shape_vec(IxDyn(&[3]), stats.feat_mean.iter().map(|&v| v as f32).collect())
                .expect("stats shape"),
        ));
        tensors.push((
            "stats.feat_std".into(),
            ArrayD::from_shape_vec(IxDyn(&[3]), stats.feat_std.iter().map(|&v| v as f32).collect())
                .expect("stats shape"),
        ));
        tensors.push((
            "stats.dg_structure_mean".into(),
            ArrayD::from_shape_vec(
                IxDyn(&[stats.n_structures]),
                stats.dg_structure_mean.iter().map(|&v| v as f32).collect(),
            )
            .expect("stats shape"),
        ));
        match self {
            Classifier::Gcn(m) => {
                tensors.push((
                    "meta.gcn".into(),
                    ArrayD::from_shape_vec(
                        IxDyn(&[4]),
                        vec![
                            m.config.layers as f32,
                            m.config.channels as f32,
                            m.config.noise_sigma2 as f32,
                            m.config.noise_repeats as f32,
                        ],
                    )
                    .expect("meta shape"),
                ));
                tensors.extend(m.named_params());
            }
            Classifier::Linear(m) => {
                tensors.push(("linear.w".into(), m.weights.clone()));
                tensors.push(("linear.b".into(), m.bias.clone()));
            }
        }
        crate::diffcore::write_named_tensors(path, &tensors)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let tensors = crate::diffcore::read_named_tensors(path)?;
        let find = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| {
                    Error::Format(format!("{}: missing tensor {name}", path.display()))
                })
        };
        let kind = find("meta.kind")?[[0]];
        let feat_mean = find("stats.feat_mean")?;
        let feat_std = find("stats.feat_std")?;
        let dg_mean = find("stats.dg_structure_mean")?;
        let stats = NormStats {
            feat_mean: [feat_mean[[0]] as f64, feat_mean[[1]] as f64, feat_mean[[2]] as f64],
            feat_std: [feat_std[[0]] as f64, feat_std[[1]] as f64, feat_std[[2]] as f64],
            dg_structure_mean: dg_mean.iter().map(|&v| v as f64).collect(),
            n_structures: dg_mean.len(),
        };
        if kind == 0.0 {
            let meta = find("meta.gcn")?;
            let config = GcnConfig {
                layers: meta[[0]] as usize,
                channels: meta[[1]] as usize,
                noise_sigma2: meta[[2]] as f64,
                noise_repeats: meta[[3]] as usize,
            };
            let mut model = GcnClassifier::init(config, stats, 0)?;
            let expected = model.named_params();
            let mut values = Vec::with_capacity(expected.len());
            for (name, want) in &expected {
                let got = find(name)?;
                if got.shape() != want.shape() {
                    return Err(Error::Format(format!(
                        "{}: tensor {name} has shape {:?}, expected {:?}",
                        path.display(),
                        got.shape(),
                        want.shape()
                    )));
                }
                values.push(got);
            }
            model.values = values;
            Ok(Classifier::Gcn(model))
        } else {
            let weights = find("linear.w")?;
            let bias = find("linear.b")?;
            if weights.len() != 2 * stats.n_structures + 1 {
                return Err(Error::Format(format!(
                    "{}: linear weight length {} does not match {} structures",
                    path.display(),
                    weights.len(),
                    stats.n_structures
                )));
            }
            Ok(Classifier::Linear(LinearClassifier { stats, weights, bias }))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs(dg: Vec<f64>, vol: Vec<f64>, age: f64) -> GraphInputs {
        let missing = vec![false; dg.len()];
        GraphInputs { dg: DgVector { values: dg, missing }, volumes: vol, age }
    }

    #[test]
    fn normalized_adjacency_two_nodes() {
        let a_hat = normalized_adjacency(&complete_adjacency(2)).unwrap();
        for &v in a_hat.iter() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn complete_graph_operator_is_uniform_with_unit_row_sums() {
        for s in [2usize, 5, 133] {
            let a_hat = normalized_adjacency(&complete_adjacency(s)).unwrap();
            for &v in a_hat.iter() {
                assert!((v - 1.0 / s as f64).abs() < 1e-12);
            }
            for i in 0..s {
                assert!((a_hat.row(i).sum() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn adjacency_validation() {
        let mut a = complete_adjacency(3);
        a[[0, 0]] = 1.0;
        assert!(normalized_adjacency(&a).is_err());
        let mut b = complete_adjacency(3);
        b[[0, 1]] = 0.5;
        assert!(normalized_adjacency(&b).is_err());
    }

    #[test]
    fn edge_count_formula() {
        let g = StructureGraph { features: Array2::zeros((133, 3)) };
        assert_eq!(g.edge_count(), 8778);
        let g = StructureGraph { features: Array2::zeros((12, 3)) };
        assert_eq!(g.edge_count(), 66);
    }

    #[test]
    fn zscoring_centers_training_features() {
        let train = vec![
            inputs(vec![0.2, -0.4], vec![5.0, 10.0], 70.0),
            inputs(vec![0.6, 0.0], vec![7.0, 12.0], 80.0),
        ];
        let refs: Vec<&GraphInputs> = train.iter().collect();
        let stats = NormStats::fit(&refs).unwrap();
        // a subject sitting exactly at the training means has all-zero
        // DG/V/A features
        let g = build_graph(
            &DgVector { values: vec![0.1, 0.1], missing: vec![false, false] },
            &[8.5, 8.5],
            75.0,
            &stats,
        )
        .unwrap();
        for i in 0..2 {
            for f in 0..3 {
                assert!(g.features[[i, f]].abs() < 1e-9, "{:?}", g.features);
            }
        }
    }

    #[test]
    fn age_only_differences_stay_in_age_column() {
        let train = vec![
            inputs(vec![0.2, -0.4], vec![5.0, 10.0], 70.0),
            inputs(vec![0.6, 0.0], vec![7.0, 12.0], 80.0),
        ];
        let refs: Vec<&GraphInputs> = train.iter().collect();
        let stats = NormStats::fit(&refs).unwrap();
        let dg = DgVector { values: vec![0.3, 0.3], missing: vec![false, false] };
        let a = build_graph(&dg, &[6.0, 6.0], 70.0, &stats).unwrap();
        let b = build_graph(&dg, &[6.0, 6.0], 85.0, &stats).unwrap();
        for i in 0..2 {
            assert_eq!(a.features[[i, 0]], b.features[[i, 0]]);
            assert_eq!(a.features[[i, 1]], b.features[[i, 1]]);
            assert_ne!(a.features[[i, 2]], b.features[[i, 2]]);
        }
        assert_eq!(a.features[[0, 2]], a.features[[1, 2]], "age replicated on nodes");
    }

    #[test]
    fn missing_dg_imputed_with_structure_mean() {
        let train = vec![
            inputs(vec![0.2, -0.4], vec![5.0, 10.0], 70.0),
            inputs(vec![0.4, -0.2], vec![7.0, 12.0], 80.0),
        ];
        let refs: Vec<&GraphInputs> = train.iter().collect();
        let stats = NormStats::fit(&refs).unwrap();
        let dg = DgVector { values: vec![0.9, 0.0], missing: vec![false, true] };
        let g = build_graph(&dg, &[6.0, 6.0], 75.0, &stats).unwrap();
        // structure 2 training mean is -0.3; z-scored against global stats
        let expect = (-0.3 - stats.feat_mean[0]) / stats.feat_std[0];
        assert!((g.features[[1, 0]] - expect).abs() < 1e-9);
    }

    #[test]
    fn fit_rejects_empty_or_inconsistent() {
        assert!(NormStats::fit(&[]).is_err());
        let a = inputs(vec![0.1], vec![1.0], 60.0);
        let b = inputs(vec![0.1, 0.2], vec![1.0, 2.0], 60.0);
        assert!(NormStats::fit(&[&a, &b]).is_err());
    }

    #[test]
    fn classifier_save_load_preserves_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let stats = NormStats {
            feat_mean: [0.1, 5.0, 72.0],
            feat_std: [0.5, 2.0, 8.0],
            dg_structure_mean: vec![0.1, 0.2, 0.0],
            n_structures: 3,
        };
        let gcn = GcnClassifier::init(GcnConfig::default(), stats.clone(), 21).unwrap();
        let subject = inputs(vec![0.4, -0.2, 0.1], vec![4.0, 6.0, 5.0], 69.0);

        let path = dir.path().join("gcn.model");
        let model = Classifier::Gcn(gcn);
        model.save(&path).unwrap();
        let loaded = Classifier::load(&path).unwrap();
        assert_eq!(loaded.kind(), "gcn");
        // parameters are bit-exact; stats round through f32
        let (p0, p1) = (model.predict(&subject).unwrap(), loaded.predict(&subject).unwrap());
        assert!((p0 - p1).abs() < 1e-6);
        // file-level round trip is byte-identical
        let bytes = std::fs::read(&path).unwrap();
        loaded.save(&path).unwrap();
        assert_eq!(bytes, std::fs::read(&path).unwrap());

        let linear = Classifier::Linear(LinearClassifier {
            stats,
            weights: ndarray::ArrayD::from_elem(ndarray::IxDyn(&[7]), 0.25f32),
            bias: ndarray::ArrayD::from_elem(ndarray::IxDyn(&[1]), -0.5f32),
        });
        let path = dir.path().join("linear.model");
        linear.save(&path).unwrap();
        let back = Classifier::load(&path).unwrap();
        assert_eq!(back.kind(), "linear");
        let (p0, p1) = (linear.predict(&subject).unwrap(), back.predict(&subject).unwrap());
        assert!((p0 - p1).abs() < 1e-9);
    }
}
