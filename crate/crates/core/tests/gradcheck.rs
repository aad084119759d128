//! Finite-difference checks of the hand-written backward pass in f64.

use metadan_core::nncore::{Grads, Model, ModelConfig};
use metadan_core::synthdoc::GrayImage;
use metadan_core::train::{loss_fasterdan, loss_meta};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(heads: usize) -> ModelConfig {
    ModelConfig {
        channels: 8,
        layers: 2,
        attn_heads: 2,
        ff_width: 12,
        heads,
        num_classes: 5,
        dropout: 0.0,
        encoder_widths: [3, 3, 4, 4],
    }
}

fn image() -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut img = GrayImage::filled(40, 24, 255);
    for y in 0..40 {
        for x in 0..24 {
            img.set(y, x, rng.gen());
        }
    }
    img
}

/// Zero-initialized biases put ReLU inputs exactly on the kink wherever a
/// patch is all zeros; checks run at a generic point instead.
fn jitter_biases(model: &mut Model<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let names: Vec<String> = model
        .params()
        .tensors()
        .iter()
        .map(|t| t.name.clone())
        .filter(|n| n.ends_with("bias"))
        .collect();
    for n in names {
        for v in model.params_mut().tensor_by_name_mut(&n).unwrap() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
}

fn check(mut model: Model<f64>, loss: impl Fn(&Model<f64>, Option<&mut Grads<f64>>) -> f64) {
    jitter_biases(&mut model);
    let mut analytic = model.params().zeros_like();
    {
        let mut g = Grads::new(model.params(), &mut analytic);
        loss(&model, Some(&mut g));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut probe = model.clone();
    let eps = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for t in model.params().tensors().to_vec() {
        let n = t.numel();
        let picks: Vec<usize> = (0..6.min(n))
            .map(|_| t.offset + rng.gen_range(0..n))
            .collect();
        for i in picks {
            let orig = probe.params().flat()[i];
            probe.params_mut().flat_mut()[i] = orig + eps;
            let up = loss(&probe, None);
            probe.params_mut().flat_mut()[i] = orig - eps;
            let down = loss(&probe, None);
            probe.params_mut().flat_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[i];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
            worst = worst.max(err);
            assert!(
                err < 1e-4,
                "{} [{}]: analytic {a} numeric {numeric}",
                t.name,
                i - t.offset
            );
            checked += (a.abs() > 1e-6) as usize;
        }
    }
    assert!(checked > 40);
}

#[test]
fn meta_loss_gradients() {
    let img = image();
    let model = Model::<f64>::new(config(2), 4).unwrap();
    check(model, |m, g| {
        loss_meta(m, &img, &[0, 1, 2, 3, 1], 2, 2, None, g.map(|g| (g, 1.0))).unwrap()
    });
}

#[test]
fn causal_loss_gradients() {
    let img = image();
    let model = Model::<f64>::new(config(1), 5).unwrap();
    check(model, |m, g| {
        loss_meta(m, &img, &[3, 2, 0], 1, 1, None, g.map(|g| (g, 1.0))).unwrap()
    });
}

#[test]
fn two_stage_loss_gradients() {
    let img = image();
    let model = Model::<f64>::new(config(1), 6).unwrap();
    let lines = vec![vec![0, 1, 2], vec![3], vec![2, 2]];
    check(model, |m, g| {
        loss_fasterdan(m, &img, &lines, None, g.map(|g| (g, 1.0))).unwrap()
    });
}
