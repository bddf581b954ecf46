// quick throughput probe: one training step at candidate geometries
use gradekit::diffcore::{AdamConfig, AdamState, Tape};
use gradekit::grader::{UNet, UNetConfig};
use ndarray::{ArrayD, IxDyn};

fn bench(base: usize, patch: [usize; 3], batch: usize, label: &str) {
    let cfg = UNetConfig { depth: 3, base_channels: base, patch_dims: patch };
    let unet = UNet::<f32>::init(cfg, 1).unwrap();
    let mut unet = unet;
    let mut adam = AdamState::new(AdamConfig::with_lr(1e-3f32));
    let vox = patch.iter().product::<usize>();
    let xs: Vec<f32> = (0..batch * vox).map(|i| ((i % 97) as f32) * 0.01).collect();
    let ts: Vec<f32> = vec![1.0; batch * vox];
    let shape = IxDyn(&[batch, 1, patch[2], patch[1], patch[0]]);
    let reps = 3;
    let start = std::time::Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(ArrayD::from_shape_vec(shape.clone(), xs.clone()).unwrap(), false);
        let t = tape.leaf(ArrayD::from_shape_vec(shape.clone(), ts.clone()).unwrap(), false);
        let (out, ids) = unet.forward(&mut tape, x, true).unwrap();
        let loss = tape.mae_loss(out, t).unwrap();
        tape.backward(loss).unwrap();
        let grads: Vec<ArrayD<f32>> = ids.iter().map(|&id| tape.grad(id).unwrap().clone()).collect();
        adam.step(unet.values_mut(), &grads).unwrap();
    }
    let dt = start.elapsed().as_secs_f64() / reps as f64;
    println!("{label}: batch {batch} step {:.3}s -> {:.3}s/sample", dt, dt / batch as f64);
}

fn main() {
    bench(8, [28, 32, 28], 4, "base8 patch 28x32x28");
    bench(6, [28, 32, 28], 4, "base6 patch 28x32x28");
    bench(6, [20, 20, 20], 4, "base6 patch 20x20x20");
    bench(8, [20, 20, 20], 4, "base8 patch 20x20x20");
}
