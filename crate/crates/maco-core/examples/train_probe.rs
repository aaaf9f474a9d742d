use maco_core::models::net::{train, ConvStageSpec, NetSpec, TrainConfig};
use maco_core::models::generate_shapes_dataset;
use std::time::Instant;

fn main() {
    let ds = generate_shapes_dataset(5000, 42, 32).unwrap();
    let wide = NetSpec {
        in_channels: 3, height: 32, width: 32,
        stages: vec![
            ConvStageSpec { out_channels: 24, kernel: 3, stride: 2 },
            ConvStageSpec { out_channels: 48, kernel: 3, stride: 2 },
            ConvStageSpec { out_channels: 96, kernel: 3, stride: 2 },
        ],
        classes: 10,
    };
    for (label, spec, lr) in [
        ("ref lr 0.015", NetSpec::reference(32, 32), 0.015),
        ("ref lr 0.02", NetSpec::reference(32, 32), 0.02),
        ("wide lr 0.01", wide.clone(), 0.01),
    ] {
        let mut cfg = TrainConfig::new(7, 30);
        cfg.learning_rate = lr;
        let t = Instant::now();
        match train(spec, &ds, &cfg) {
            Ok(tm) => println!("{label}: acc={:.4} ({:.1}s)", tm.holdout_accuracy, t.elapsed().as_secs_f64()),
            Err(e) => println!("{label}: {e}"),
        }
    }
}
