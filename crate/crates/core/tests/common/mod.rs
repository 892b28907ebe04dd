//! Gradient checks shared by the core integration tests and the acceptance suite.
#![allow(dead_code)]

use hpcnn_core::model::build_tinycnn;
use hpcnn_core::nn::batchnorm::{batchnorm_backward, batchnorm_forward, BatchNormState, Mode};
use hpcnn_core::nn::conv::{conv2d_backward, conv2d_forward, ConvGeometry, ConvParams, ConvStrategy};
use hpcnn_core::nn::gradcheck::{check_model, check_op, grad_check, GradCheckReport, ModelCheck, DEFAULT_STEP};
use hpcnn_core::nn::linear::{linear, linear_backward};
use hpcnn_core::nn::loss::softmax_cross_entropy;
use hpcnn_core::nn::pool::{global_avg_pool, global_avg_pool_backward, max_pool, max_pool_backward};
use hpcnn_core::nn::{relu, relu_backward};
use hpcnn_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-4;

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Values spread at least 0.02 apart so max-pool windows and ReLU inputs
/// sit well away from their kinks at step 1e-3.
pub fn spread(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0 + 0.5) * 0.02).collect();
    rand::seq::SliceRandom::shuffle(vals.as_mut_slice(), rng);
    Tensor::from_vec(shape, vals).unwrap()
}

fn conv_checks(seed: u64, rng: &mut ChaCha8Rng, out: &mut Vec<(String, GradCheckReport)>) {
    let g = ConvGeometry { in_channels: 2, out_channels: 3, kernel: 3, stride: rng.gen_range(1..=2), padding: rng.gen_range(0..=1) };
    let x = random(&[2, 2, 6, 6], rng);
    let w = random(&g.weight_shape(), rng);
    let b = random(&[3], rng);
    for strategy in ConvStrategy::ALL {
        let params = |w: &Tensor<f64>, b: &Tensor<f64>| ConvParams::new(g, w.clone(), Some(b.clone())).unwrap();
        let p = params(&w, &b);
        let rx = check_op(
            |x| conv2d_forward(x, &p, strategy),
            |x, r| Ok(conv2d_backward(x, &p, strategy, r)?.grad_x),
            &x,
            TOL,
            seed,
        )
        .unwrap();
        let rw = check_op(
            |w| conv2d_forward(&x, &params(w, &b), strategy),
            |w, r| Ok(conv2d_backward(&x, &params(w, &b), strategy, r)?.grad_weight),
            &w,
            TOL,
            seed,
        )
        .unwrap();
        let rb = check_op(
            |b| conv2d_forward(&x, &params(&w, b), strategy),
            |b, r| Ok(conv2d_backward(&x, &params(&w, b), strategy, r)?.grad_bias.unwrap()),
            &b,
            TOL,
            seed,
        )
        .unwrap();
        let name = strategy.name();
        out.push((format!("conv[{name}].x"), rx));
        out.push((format!("conv[{name}].weight"), rw));
        out.push((format!("conv[{name}].bias"), rb));
    }
}

fn batchnorm_checks(seed: u64, rng: &mut ChaCha8Rng, out: &mut Vec<(String, GradCheckReport)>) {
    let x = random(&[2, 3, 4, 4], rng);
    let mut st = BatchNormState::<f64>::new(3).unwrap();
    st.gamma = random(&[3], rng);
    st.beta = random(&[3], rng);
    st.running_mean = random(&[3], rng);
    st.running_var = random(&[3], rng).map(|v| v.abs() + 0.5);
    for mode in [Mode::Train, Mode::Eval] {
        let tag = if mode == Mode::Train { "train" } else { "eval" };
        let rx = check_op(
            |x| Ok(batchnorm_forward(x, &st, mode)?.output),
            |x, r| Ok(batchnorm_backward(&batchnorm_forward(x, &st, mode)?.cache, &st, r)?.grad_x),
            &x,
            TOL,
            seed,
        )
        .unwrap();
        let with_gamma = |g: &Tensor<f64>| BatchNormState { gamma: g.clone(), ..st.clone() };
        let rg = check_op(
            |g| Ok(batchnorm_forward(&x, &with_gamma(g), mode)?.output),
            |g, r| {
                let s = with_gamma(g);
                Ok(batchnorm_backward(&batchnorm_forward(&x, &s, mode)?.cache, &s, r)?.grad_gamma)
            },
            &st.gamma,
            TOL,
            seed,
        )
        .unwrap();
        let with_beta = |b: &Tensor<f64>| BatchNormState { beta: b.clone(), ..st.clone() };
        let rb = check_op(
            |b| Ok(batchnorm_forward(&x, &with_beta(b), mode)?.output),
            |b, r| {
                let s = with_beta(b);
                Ok(batchnorm_backward(&batchnorm_forward(&x, &s, mode)?.cache, &s, r)?.grad_beta)
            },
            &st.beta,
            TOL,
            seed,
        )
        .unwrap();
        out.push((format!("batchnorm[{tag}].x"), rx));
        out.push((format!("batchnorm[{tag}].gamma"), rg));
        out.push((format!("batchnorm[{tag}].beta"), rb));
    }
}

fn linear_checks(seed: u64, rng: &mut ChaCha8Rng, out: &mut Vec<(String, GradCheckReport)>) {
    let x = random(&[3, 4], rng);
    let w = random(&[4, 5], rng);
    let b = random(&[5], rng);
    let rx = check_op(|x| linear(x, &w, &b), |x, r| Ok(linear_backward(x, &w, &b, r)?.grad_x), &x, TOL, seed).unwrap();
    let rw = check_op(|w| linear(&x, w, &b), |w, r| Ok(linear_backward(&x, w, &b, r)?.grad_weight), &w, TOL, seed).unwrap();
    let rb = check_op(|b| linear(&x, &w, b), |b, r| Ok(linear_backward(&x, &w, b, r)?.grad_bias), &b, TOL, seed).unwrap();
    out.push(("linear.x".into(), rx));
    out.push(("linear.weight".into(), rw));
    out.push(("linear.bias".into(), rb));
}

fn elementwise_checks(seed: u64, rng: &mut ChaCha8Rng, out: &mut Vec<(String, GradCheckReport)>) {
    let x = spread(&[2, 2, 4, 4], rng);
    out.push(("relu".into(), check_op(|x| Ok(relu(x)), relu_backward, &x, TOL, seed).unwrap()));
    let s4 = x.shape4().unwrap();
    let r = check_op(
        |x| Ok(max_pool(x, 2, 2)?.output),
        |x, r| max_pool_backward(s4, &max_pool(x, 2, 2)?.argmax, r),
        &x,
        TOL,
        seed,
    )
    .unwrap();
    out.push(("max_pool".into(), r));
    let r = check_op(global_avg_pool, |_, r| global_avg_pool_backward(s4, r), &x, TOL, seed).unwrap();
    out.push(("global_avg_pool".into(), r));

    let logits = random(&[4, 6], rng).map(|v| 3.0 * v);
    let targets: Vec<usize> = (0..4).map(|_| rng.gen_range(0..6)).collect();
    let analytic = softmax_cross_entropy(&logits, &targets).unwrap().grad_logits;
    let r = grad_check(|l| Ok(softmax_cross_entropy(l, &targets)?.loss), &logits, &analytic, DEFAULT_STEP, 1e-5, None).unwrap();
    out.push(("softmax_cross_entropy".into(), r));
}

/// Every layer op, both convolution strategies, for one seed.
pub fn layer_reports(seed: u64) -> Vec<(String, GradCheckReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    conv_checks(seed, &mut rng, &mut out);
    batchnorm_checks(seed, &mut rng, &mut out);
    linear_checks(seed, &mut rng, &mut out);
    elementwise_checks(seed, &mut rng, &mut out);
    out
}

/// Whole tinycnn, sampled coordinates of every parameter tensor and the input.
pub fn tinycnn_reports(seed: u64, per_tensor: usize) -> Vec<ModelCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let model = build_tinycnn::<f64>(10, seed).unwrap();
    // A single item halves the number of ReLU/max-pool switches a probe can cross.
    let x = random(&[1, 3, 32, 32], &mut rng);
    let labels = [rng.gen_range(0..10)];
    check_model(&model, &x, &labels, per_tensor, TOL, seed).unwrap()
}
