//! Central finite-difference verification of reverse-mode gradients.
//!
//! The checker re-evaluates a scalar loss with perturbed inputs and compares
//! the slope against the analytic gradient, component by component. Used by
//! unit tests and the acceptance suite in both f32 and f64 modes.

use ndarray::ArrayD;
use rand::seq::index::sample;
use rand::Rng;

use super::Element;

/// Step size and relative-error floor for one precision mode.
#[derive(Debug, Clone, Copy)]
pub struct FdSettings {
    pub step: f64,
    /// Denominator floor: components where both slopes are below this are
    /// compared absolutely, guarding near-zero gradients.
    pub floor: f64,
}

impl FdSettings {
    pub fn for_f32() -> Self {
        FdSettings { step: 1e-2, floor: 1e-3 }
    }

    pub fn for_f64() -> Self {
        FdSettings { step: 1e-5, floor: 1e-8 }
    }
}

/// Largest relative error between analytic gradients and central finite
/// differences, probed on `samples_per_input` random components of every
/// input (all components when the input is small).
pub fn max_rel_error<T: Element, R: Rng>(
    inputs: &[ArrayD<T>],
    analytic: &[ArrayD<T>],
    settings: FdSettings,
    samples_per_input: usize,
    rng: &mut R,
    mut eval: impl FnMut(&[ArrayD<T>]) -> T,
) -> f64 {
    assert_eq!(inputs.len(), analytic.len(), "inputs and gradients must align");
    let h = settings.step;
    let mut worst = 0.0f64;
    let mut work: Vec<ArrayD<T>> = inputs.to_vec();

    for (i, grad) in analytic.iter().enumerate() {
        let len = inputs[i].len();
        let picks: Vec<usize> = if len <= samples_per_input {
            (0..len).collect()
        } else {
            sample(rng, len, samples_per_input).into_vec()
        };
        for flat in picks {
            let base = inputs[i].as_slice().expect("standard layout")[flat].as_f64();
            set_flat(&mut work[i], flat, T::from_f64(base + h));
            let f_plus = eval(&work).as_f64();
            set_flat(&mut work[i], flat, T::from_f64(base - h));
            let f_minus = eval(&work).as_f64();
            set_flat(&mut work[i], flat, T::from_f64(base));

            let fd = (f_plus - f_minus) / (2.0 * h);
            let an = grad.as_slice().expect("standard layout")[flat].as_f64();
            let denom = an.abs().max(fd.abs()).max(settings.floor);
            let rel = (an - fd).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}

fn set_flat<T: Element>(a: &mut ArrayD<T>, flat: usize, v: T) {
    a.as_slice_mut().expect("standard layout")[flat] = v;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tape;
    use ndarray::IxDyn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Tanh-of-linear toy: checks the checker itself in both precisions.
    fn run<T: Element>(settings: FdSettings) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = ArrayD::from_shape_fn(IxDyn(&[2, 3]), |_| T::standard_normal(&mut rng));
        let w = ArrayD::from_shape_fn(IxDyn(&[3, 2]), |_| T::standard_normal(&mut rng));
        let b = ArrayD::from_shape_fn(IxDyn(&[2]), |_| T::standard_normal(&mut rng));

        let eval = |inputs: &[ArrayD<T>]| {
            let mut t = Tape::<T>::new();
            let x = t.leaf(inputs[0].clone(), true);
            let w = t.leaf(inputs[1].clone(), true);
            let b = t.leaf(inputs[2].clone(), true);
            let y = t.linear(x, w, b).unwrap();
            let y = t.tanh(y);
            let loss = t.mean_all(y);
            (t, loss, [x, w, b])
        };

        let inputs = vec![x, w, b];
        let (mut tape, loss, ids) = eval(&inputs);
        tape.backward(loss).unwrap();
        let grads: Vec<ArrayD<T>> = ids.iter().map(|&id| tape.grad(id).unwrap().clone()).collect();

        max_rel_error(&inputs, &grads, settings, 8, &mut rng, |ins| {
            let (t, l, _) = eval(ins);
            t.scalar_value(l)
        })
    }

    #[test]
    fn toy_network_passes_f32() {
        assert!(run::<f32>(FdSettings::for_f32()) < 1e-2);
    }

    #[test]
    fn toy_network_passes_f64() {
        assert!(run::<f64>(FdSettings::for_f64()) < 1e-4);
    }
}
