//! Times ResNet-18 forward + backward steps on random data.

use std::time::Instant;

use hpcnn_core::model::build_resnet18_cifar;
use hpcnn_core::nn::{softmax_cross_entropy, Mode};
use hpcnn_core::{Engine, PerfConfig, Tensor};

fn main() -> hpcnn_core::Result<()> {
    let batch: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(32);
    let steps: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(3);
    let engine = Engine::new(&PerfConfig { num_threads: 1, ..Default::default() })?;
    let mut model = build_resnet18_cifar::<f32>(10, 0)?;
    let x = Tensor::full(&[batch, 3, 32, 32], 0.5)?;
    let labels: Vec<usize> = (0..batch).map(|i| i % 10).collect();
    for step in 0..steps {
        let t = Instant::now();
        let logits = engine.install(|| model.forward(&x, Mode::Train, &engine))?;
        let t_fwd = t.elapsed().as_secs_f64();
        let loss = softmax_cross_entropy(&logits, &labels)?;
        engine.install(|| model.backward(&loss.grad_logits, &engine))?;
        println!("step {step}: forward {t_fwd:.3}s total {:.3}s", t.elapsed().as_secs_f64());
    }
    Ok(())
}
