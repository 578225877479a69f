use chorus_core::audio::{make_mom, AudioBuffer};
use chorus_core::mixit::mom_example_gradients;
use chorus_core::separator::{SeparatorConfig, SeparatorModel};
use std::time::Instant;

#[test]
#[ignore]
fn time_full_size_gradient_step() {
    let cfg = SeparatorConfig::default();
    let model = SeparatorModel::new(cfg, 1).unwrap();
    let n = 4000; // 0.5 s at 8 kHz
    let t = |f: f64| -> AudioBuffer {
        AudioBuffer::new(
            (0..n).map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / 8000.0).sin() * 0.4).collect(),
            8000,
        ).unwrap()
    };
    let ex = make_mom(t(500.0), t(1500.0)).unwrap();
    let start = Instant::now();
    let iters = 5;
    for _ in 0..iters {
        let _ = mom_example_gradients(&model, &ex, 30.0).unwrap();
    }
    println!("per example fwd+bwd: {:.3} s", start.elapsed().as_secs_f64() / iters as f64);
}
