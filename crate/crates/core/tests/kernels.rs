use hpcnn_core::nn::batchnorm::{batchnorm_forward, BatchNormState, Mode};
use hpcnn_core::nn::conv::{conv2d_backward, conv2d_forward, ConvGeometry, ConvParams, ConvStrategy};
use hpcnn_core::nn::{relu, softmax_cross_entropy};
use hpcnn_core::parallel::WorkerPool;
use hpcnn_core::tensor::ReduceOp;
use hpcnn_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random<T: hpcnn_core::Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::lit(rng.gen_range(-1.0..1.0))).collect()).unwrap()
}

/// `|a - b| <= tol * max(|b|)` elementwise, with `b` the reference.
fn close(a: &Tensor<f32>, b: &Tensor<f32>, tol: f32) -> Result<(), String> {
    let scale = b.data().iter().fold(0.0f32, |m, v| m.max(v.abs())).max(f32::MIN_POSITIVE);
    let diff = a.max_abs_diff(b).map_err(|e| e.to_string())?;
    if diff <= tol * scale {
        Ok(())
    } else {
        Err(format!("max diff {diff:e} vs scale {scale:e}"))
    }
}

#[derive(Debug, Clone)]
struct ConvCase {
    n: usize,
    c: usize,
    hw: usize,
    cout: usize,
    k: usize,
    s: usize,
    p: usize,
    bias: bool,
    seed: u64,
}

fn conv_case() -> impl Strategy<Value = ConvCase> {
    (1..=4usize, 1..=8usize, 3..=16usize, 1..=8usize, prop::sample::select(vec![1usize, 3, 5]), 1..=2usize, 0..=2usize, any::<bool>(), any::<u64>())
        .prop_filter("kernel must fit the padded input", |&(_, _, hw, _, k, _, p, _, _)| hw + 2 * p >= k)
        .prop_map(|(n, c, hw, cout, k, s, p, bias, seed)| ConvCase { n, c, hw, cout, k, s, p, bias, seed })
}

fn setup(case: &ConvCase) -> (Tensor<f32>, ConvParams<f32>, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(case.seed);
    let g = ConvGeometry { in_channels: case.c, out_channels: case.cout, kernel: case.k, stride: case.s, padding: case.p };
    let x = random(&[case.n, case.c, case.hw, case.hw], &mut rng);
    let w = random(&g.weight_shape(), &mut rng);
    let b = case.bias.then(|| random(&[case.cout], &mut rng));
    (x, ConvParams::new(g, w, b).unwrap(), rng)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn unroll_matches_direct(case in conv_case()) {
        let (x, p, mut rng) = setup(&case);
        let direct = conv2d_forward(&x, &p, ConvStrategy::Direct).unwrap();
        let unroll = conv2d_forward(&x, &p, ConvStrategy::Unroll).unwrap();
        let (ho, wo) = p.geometry.output_hw(case.hw, case.hw).unwrap();
        prop_assert_eq!(direct.shape(), &[case.n, case.cout, ho, wo][..]);
        prop_assert_eq!(close(&unroll, &direct, 1e-5), Ok(()));

        let g = random(direct.shape(), &mut rng);
        let bd = conv2d_backward(&x, &p, ConvStrategy::Direct, &g).unwrap();
        let bu = conv2d_backward(&x, &p, ConvStrategy::Unroll, &g).unwrap();
        prop_assert_eq!(close(&bu.grad_x, &bd.grad_x, 1e-5), Ok(()));
        prop_assert_eq!(close(&bu.grad_weight, &bd.grad_weight, 1e-5), Ok(()));
        if let (Some(a), Some(b)) = (&bu.grad_bias, &bd.grad_bias) {
            prop_assert_eq!(close(a, b, 1e-5), Ok(()));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_identity(m in 1..=24usize, k in 1..=24usize, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Tensor<f64> = random(&[m, k], &mut rng);
        prop_assert_eq!(&a.matmul(&Tensor::eye(k).unwrap()).unwrap(), &a);
        prop_assert_eq!(&Tensor::eye(m).unwrap().matmul(&a).unwrap(), &a);
    }

    #[test]
    fn matmul_thread_invariant(m in 1..=64usize, k in 1..=64usize, n in 1..=64usize, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Tensor<f32> = random(&[m, k], &mut rng);
        let b: Tensor<f32> = random(&[k, n], &mut rng);
        let one = WorkerPool::new(1).unwrap().install(|| a.matmul(&b).unwrap());
        for t in [2, 3, 4] {
            let many = WorkerPool::new(t).unwrap().install(|| a.matmul(&b).unwrap());
            prop_assert_eq!(&many, &one);
        }
    }

    #[test]
    fn reduce_matches_loops(r in 1..=6usize, c in 1..=6usize, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t: Tensor<f64> = random(&[r, c], &mut rng);
        let d = t.data();
        let sums = t.reduce(0, ReduceOp::Sum).unwrap();
        for j in 0..c {
            let want: f64 = (0..r).map(|i| d[i * c + j]).sum();
            prop_assert!((sums.data()[j] - want).abs() < 1e-12);
        }
        let maxes = t.reduce(1, ReduceOp::Max).unwrap();
        for i in 0..r {
            let want = d[i * c..(i + 1) * c].iter().cloned().fold(f64::MIN, f64::max);
            prop_assert_eq!(maxes.data()[i], want);
        }
    }

    #[test]
    fn relu_idempotent(seed in any::<u64>()) {
        let t: Tensor<f32> = random(&[2, 3, 4, 4], &mut ChaCha8Rng::seed_from_u64(seed));
        let once = relu(&t);
        prop_assert_eq!(relu(&once), once);
    }

    #[test]
    fn softmax_rows_sum_to_one(n in 1..=8usize, k in 2..=12usize, scale in 0.1f64..50.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random::<f64>(&[n, k], &mut rng).map(|v| v * scale);
        let targets: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let out = softmax_cross_entropy(&logits, &targets).unwrap();
        for row in out.probs.data().chunks(k) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn batchnorm_standardizes(n in 1..=4usize, c in 1..=4usize, hw in 2..=6usize, shift in -5.0f64..5.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random::<f64>(&[n, c, hw, hw], &mut rng).map(|v| 3.0 * v + shift);
        let out = batchnorm_forward(&x, &BatchNormState::new(c).unwrap(), Mode::Train).unwrap();
        let plane = hw * hw;
        for ch in 0..c {
            let vals: Vec<f64> = (0..n).flat_map(|i| out.output.data()[(i * c + ch) * plane..(i * c + ch + 1) * plane].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            prop_assert!(mean.abs() < 1e-5);
            // eps = 1e-5 keeps the variance just below one
            prop_assert!((var - 1.0).abs() < 1e-4, "var {}", var);
        }
    }
}

#[test]
fn conv_thread_invariant() {
    let case = ConvCase { n: 5, c: 6, hw: 12, cout: 7, k: 3, s: 1, p: 1, bias: true, seed: 3 };
    let (x, p, mut rng) = setup(&case);
    let g = random(&[5, 7, 12, 12], &mut rng);
    for strategy in ConvStrategy::ALL {
        let run = |t| {
            WorkerPool::new(t).unwrap().install(|| {
                let y = conv2d_forward(&x, &p, strategy).unwrap();
                let b = conv2d_backward(&x, &p, strategy, &g).unwrap();
                (y, b.grad_x, b.grad_weight, b.grad_bias)
            })
        };
        let one = run(1);
        for t in [2, 4] {
            let other = run(t);
            assert_eq!(one.0, other.0);
            assert_eq!(one.1, other.1);
            assert_eq!(one.2, other.2);
            assert_eq!(one.3, other.3);
        }
    }
}
