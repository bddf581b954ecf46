//! Synthetic preprocessed cohorts: an ellipsoid structure atlas with
//! per-subject smooth deformation, a parametric disease signature
//! (intensity shift + structure shrinkage), and per-domain acquisition
//! shift. Stands in for clinical cohorts so every pipeline contract can be
//! exercised with known ground truth.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrid::{
    write_labels, write_manifest, write_volume, LabelVolume, SubjectClass, SubjectRecord, Volume,
};

/// Acquisition-shift parameters for one domain: `v' = gain * v + bias`,
/// plus extra noise so total noise std becomes `noise_mult * noise_sigma`
/// (no extra noise when `noise_mult <= 1`).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct DomainShift {
    pub gain: f32,
    pub bias: f32,
    pub noise_mult: f32,
}

impl DomainShift {
    pub fn identity() -> Self {
        DomainShift { gain: 1.0, bias: 0.0, noise_mult: 1.0 }
    }
}

/// Generator parameters. Defaults describe the desk-scale cohort.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub n_structures: u32,
    /// Structures carrying the disease signature (labels, 1-based).
    pub signature_structures: Vec<u32>,
    /// Intensity-perturbation amplitude (delta); 1.0 is the easy task.
    pub effect_size: f32,
    /// Fractional volume shrinkage of signature structures in diseased
    /// subjects (rho).
    pub atrophy_rate: f32,
    pub noise_sigma: f32,
    /// MCI classes scale the AD effect: progressive and stable fractions.
    pub pmci_fraction: f32,
    pub smci_fraction: f32,
    pub age_cn: [f32; 2],
    pub age_diseased: [f32; 2],
    pub domains: BTreeMap<String, DomainShift>,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        let mut domains = BTreeMap::new();
        domains.insert("site_a".to_string(), DomainShift::identity());
        domains.insert(
            "site_b".to_string(),
            DomainShift { gain: 1.2, bias: 5.0, noise_mult: 1.5 },
        );
        PhantomSpec {
            dims: [48, 56, 48],
            spacing: [2.0; 3],
            n_structures: 12,
            signature_structures: vec![2, 5, 7],
            effect_size: 1.0,
            atrophy_rate: 0.3,
            noise_sigma: 0.03,
            pmci_fraction: 0.6,
            smci_fraction: 0.25,
            age_cn: [60.0, 90.0],
            age_diseased: [65.0, 95.0],
            domains,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_structures == 0 {
            return Err(Error::Config("phantom needs at least one structure".into()));
        }
        for &s in &self.signature_structures {
            if s == 0 || s > self.n_structures {
                return Err(Error::Config(format!(
                    "signature structure {s} outside valid labels 1..={}",
                    self.n_structures
                )));
            }
        }
        if (self.effect_size > 0.0 || self.atrophy_rate > 0.0)
            && self.signature_structures.is_empty()
        {
            return Err(Error::Config(
                "non-zero disease effect needs signature structures".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.atrophy_rate) {
            return Err(Error::Config(format!(
                "atrophy rate must be in [0, 1), got {}",
                self.atrophy_rate
            )));
        }
        if self.dims.iter().any(|&d| d < 8) {
            return Err(Error::Config(format!(
                "phantom dims {:?} too small",
                self.dims
            )));
        }
        Ok(())
    }

    pub fn domain(&self, domain_id: &str) -> Result<DomainShift> {
        self.domains.get(domain_id).copied().ok_or_else(|| {
            Error::Config(format!(
                "domain {domain_id:?} not declared; known: {:?}",
                self.domains.keys().collect::<Vec<_>>()
            ))
        })
    }

    /// Disease-effect fraction per class (AD = 1, CN = 0, MCI in between).
    pub fn effect_fraction(&self, class: SubjectClass) -> f32 {
        match class {
            SubjectClass::Cn => 0.0,
            SubjectClass::Ad => 1.0,
            SubjectClass::Pmci => self.pmci_fraction,
            SubjectClass::Smci => self.smci_fraction,
        }
    }
}

/// One generated subject, fully in memory.
#[derive(Debug, Clone)]
pub struct PhantomSubject {
    pub subject_id: String,
    pub image: Volume,
    pub labels: LabelVolume,
    pub class: SubjectClass,
    pub age: f32,
    pub domain_id: String,
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
}

/// Fixed atlas: structures laid out on a jittered grid of cells inside the
/// head ellipsoid, sizes spread deterministically so volumes differ.
fn base_atlas(spec: &PhantomSpec) -> Vec<(Ellipsoid, f32)> {
    let n = spec.n_structures as usize;
    let head_semi = [0, 1, 2].map(|a| 0.44 * spec.dims[a] as f64);
    let center = [0, 1, 2].map(|a| spec.dims[a] as f64 / 2.0);

    // near-cubic cell grid with at least n cells
    let cx = (n as f64).cbrt().ceil() as usize;
    let cy = ((n as f64) / cx as f64).sqrt().ceil() as usize;
    let cz = n.div_ceil(cx * cy);
    let cells = [cx, cy, cz];

    let mut out = Vec::with_capacity(n);
    for s in 0..n {
        let gx = s % cx;
        let gy = (s / cx) % cy;
        let gz = s / (cx * cy);
        let rel = |g: usize, c: usize| (2.0 * (g as f64 + 0.5) / c as f64 - 1.0) * 0.62;
        let c = [
            center[0] + head_semi[0] * rel(gx, cells[0]),
            center[1] + head_semi[1] * rel(gy, cells[1]),
            center[2] + head_semi[2] * rel(gz, cells[2]),
        ];
        let lambda = 0.60 + 0.65 * (((s * 5 + 2) % n) as f64) / ((n.max(2) - 1) as f64);
        let semi = [0, 1, 2].map(|a| {
            let cell_half = head_semi[a] * 0.62 / cells[a] as f64;
            (cell_half * 0.92 * lambda).max(1.6)
        });
        // scrambled base intensity so adjacent structures contrast
        let mu = 0.35 + 0.5 * (((s * 7 + 3) % n) as f32) / ((n.max(2) - 1) as f32);
        out.push((Ellipsoid { center: c, semi }, mu));
    }
    out
}

const BACKGROUND_INTENSITY: f32 = 0.06;
const EFFECT_INTENSITY_SCALE: f32 = 0.08;

/// Builds one subject's anatomy and image from an explicit RNG stream.
/// With `effect_size = atrophy_rate = 0` the image distribution is
/// class-independent by construction.
fn synthesize(
    spec: &PhantomSpec,
    class: SubjectClass,
    rng: &mut ChaCha8Rng,
) -> Result<(Volume, LabelVolume, f32)> {
    let age_range = if class == SubjectClass::Cn { spec.age_cn } else { spec.age_diseased };
    let u: f32 = rng.gen();
    let age = age_range[0] + u * (age_range[1] - age_range[0]);

    // global smooth deformation: per-axis scale and translation
    let scale = [0, 1, 2].map(|_| 1.0 + 0.04 * (rng.gen::<f64>() * 2.0 - 1.0));
    let shift = [0, 1, 2].map(|_| 1.5 * (rng.gen::<f64>() * 2.0 - 1.0));
    let center = [0, 1, 2].map(|a| spec.dims[a] as f64 / 2.0);

    let effect = spec.effect_fraction(class);
    let shrink = (1.0 - (spec.atrophy_rate * effect) as f64).cbrt();
    let effect_jitter = 1.0 + 0.15 * (rng.gen::<f32>() * 2.0 - 1.0);
    let subject_gain = 1.0 + 0.03 * (rng.gen::<f32>() * 2.0 - 1.0);

    let mut shapes = Vec::with_capacity(spec.n_structures as usize);
    for (s, (e, mu)) in base_atlas(spec).into_iter().enumerate() {
        let label = (s + 1) as u32;
        let jc = [0, 1, 2].map(|_| 1.2 * (rng.gen::<f64>() * 2.0 - 1.0));
        let js = [0, 1, 2].map(|_| 1.0 + 0.05 * (rng.gen::<f64>() * 2.0 - 1.0));
        let mut center_s = [0.0; 3];
        let mut semi_s = [0.0; 3];
        let is_signature = spec.signature_structures.contains(&label);
        for a in 0..3 {
            center_s[a] = center[a] + (e.center[a] - center[a]) * scale[a] + shift[a] + jc[a];
            semi_s[a] = e.semi[a] * scale[a] * js[a];
            if is_signature {
                semi_s[a] *= shrink;
            }
        }
        let mut mu_s = mu;
        if is_signature {
            mu_s -= EFFECT_INTENSITY_SCALE * spec.effect_size * effect * effect_jitter;
        }
        shapes.push((Ellipsoid { center: center_s, semi: semi_s }, mu_s));
    }

    // rasterize labels: nearest normalized ellipsoid distance, low id wins ties
    let [dx, dy, dz] = spec.dims;
    let n_vox = dx * dy * dz;
    let mut labels = vec![0u32; n_vox];
    let mut best = vec![f32::INFINITY; n_vox];
    for (s, (e, _)) in shapes.iter().enumerate() {
        let lo = [0, 1, 2].map(|a| ((e.center[a] - e.semi[a]).floor().max(0.0)) as usize);
        let hi = [0, 1, 2].map(|a| ((e.center[a] + e.semi[a]).ceil() as usize + 1).min(spec.dims[a]));
        for z in lo[2]..hi[2] {
            for y in lo[1]..hi[1] {
                for x in lo[0]..hi[0] {
                    let d = norm_dist(e, x, y, z) as f32;
                    if d <= 1.0 {
                        let idx = x + dx * (y + dy * z);
                        if d < best[idx] {
                            best[idx] = d;
                            labels[idx] = (s + 1) as u32;
                        }
                    }
                }
            }
        }
    }
    let label_vol = LabelVolume::new(spec.dims, labels, spec.n_structures)?;

    // image: structure intensity plus acquisition noise
    let mut data = Vec::with_capacity(n_vox);
    for &l in label_vol.data() {
        let mu = if l == 0 { BACKGROUND_INTENSITY } else { shapes[(l - 1) as usize].1 };
        let noise: f32 = StandardNormal.sample(rng);
        data.push(mu * subject_gain + spec.noise_sigma * noise);
    }
    let image = Volume::new(spec.dims, spec.spacing, data)?;
    Ok((image, label_vol, age))
}

fn norm_dist(e: &Ellipsoid, x: usize, y: usize, z: usize) -> f64 {
    let p = [x as f64, y as f64, z as f64];
    let mut acc = 0.0;
    for a in 0..3 {
        let t = (p[a] - e.center[a]) / e.semi[a];
        acc += t * t;
    }
    acc.sqrt()
}

/// Intensity gain/bias plus extra acquisition noise; labels are untouched.
pub fn apply_domain_shift(
    vol: &Volume,
    shift: &DomainShift,
    noise_sigma: f32,
    rng: &mut ChaCha8Rng,
) -> Result<Volume> {
    if !(shift.gain > 0.0) {
        return Err(Error::Config(format!(
            "domain gain must be positive, got {}",
            shift.gain
        )));
    }
    let extra = if shift.noise_mult > 1.0 {
        noise_sigma * (shift.noise_mult * shift.noise_mult - 1.0).sqrt()
    } else {
        0.0
    };
    let data = vol
        .data()
        .iter()
        .map(|&v| {
            let mut out = shift.gain * v + shift.bias;
            if extra > 0.0 {
                let n: f32 = StandardNormal.sample(rng);
                out += extra * n;
            }
            out
        })
        .collect();
    Volume::new(vol.dims(), vol.spacing(), data)
}

fn subject_seed(spec_seed: u64, cohort_tag: &str, class: SubjectClass, index: usize) -> u64 {
    // FNV-1a over the identifying tuple keeps per-subject streams stable
    // under cohort-size changes.
    let mut h = 0xcbf29ce484222325u64;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    eat(&spec_seed.to_le_bytes());
    eat(cohort_tag.as_bytes());
    eat(class.as_str().as_bytes());
    eat(&(index as u64).to_le_bytes());
    h
}

/// Generates `n_per_class` subjects per class for one domain.
///
/// Anatomy is keyed by `(seed, cohort_tag, class, index)` while the domain
/// only shapes acquisition, so distinct tags never share subjects and the
/// same tag under two domains yields paired acquisitions of one anatomy.
/// Subject streams are independent, so prefixes agree across cohort sizes.
pub fn generate_cohort(
    spec: &PhantomSpec,
    classes: &[SubjectClass],
    n_per_class: usize,
    cohort_tag: &str,
    domain_id: &str,
) -> Result<Vec<PhantomSubject>> {
    spec.validate()?;
    if n_per_class == 0 {
        return Err(Error::Config("cohort needs n_per_class >= 1".into()));
    }
    let shift = spec.domain(domain_id)?;
    let mut out = Vec::with_capacity(classes.len() * n_per_class);
    for &class in classes {
        for i in 0..n_per_class {
            let mut rng =
                ChaCha8Rng::seed_from_u64(subject_seed(spec.seed, cohort_tag, class, i));
            let (image, labels, age) = synthesize(spec, class, &mut rng)?;
            let image = apply_domain_shift(&image, &shift, spec.noise_sigma, &mut rng)?;
            out.push(PhantomSubject {
                subject_id: format!("{cohort_tag}_{}_{i:03}", class.as_str()),
                image,
                labels,
                class,
                age,
                domain_id: domain_id.to_string(),
            });
        }
    }
    Ok(out)
}

/// Writes volumes plus the cohort manifest into `dir`.
pub fn write_cohort(dir: &Path, subjects: &[PhantomSubject]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(subjects.len());
    for s in subjects {
        let image_path = format!("{}_img.vol", s.subject_id);
        let labels_path = format!("{}_lab.vol", s.subject_id);
        write_volume(&dir.join(&image_path), &s.image)?;
        write_labels(&dir.join(&labels_path), &s.labels)?;
        records.push(SubjectRecord {
            subject_id: s.subject_id.clone(),
            image_path,
            labels_path,
            class: s.class,
            age: s.age,
            domain_id: s.domain_id.clone(),
        });
    }
    write_manifest(&dir.join("manifest.csv"), &records)
}

/// Loads a cohort written by [`write_cohort`] back into memory.
pub fn load_cohort(dir: &Path) -> Result<Vec<PhantomSubject>> {
    let records = crate::volgrid::read_manifest(&dir.join("manifest.csv"))?;
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        out.push(PhantomSubject {
            image: crate::volgrid::read_volume(&dir.join(&r.image_path))?,
            labels: crate::volgrid::read_labels(&dir.join(&r.labels_path))?,
            subject_id: r.subject_id,
            class: r.class,
            age: r.age,
            domain_id: r.domain_id,
        });
    }
    Ok(out)
}

/// Mean image intensity over the signature structures: the hand oracle that
/// bounds how separable a cohort is before any training runs.
pub fn signature_mean_intensity(spec: &PhantomSpec, subject: &PhantomSubject) -> f64 {
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for (&l, &v) in subject.labels.data().iter().zip(subject.image.data()) {
        if l != 0 && spec.signature_structures.contains(&l) {
            sum += v as f64;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}
