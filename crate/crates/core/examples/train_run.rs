//! Trains on a stored dataset and reports held-out metrics.
//!
//! Usage: `train_run <data-dir> <epochs> <loss-terms> <seed> [noise-std]`

use std::time::Instant;

use ect_core::dataset::{read_dataset, split};
use ect_core::metrics::evaluate;
use ect_core::net::{train_with, LossConfig, NetworkConfig, TrainConfig};

fn main() -> ect_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    if !(5..=6).contains(&args.len()) {
        eprintln!("usage: train_run <data-dir> <epochs> <loss-terms> <seed> [noise-std]");
        std::process::exit(2);
    }
    let ds = read_dataset(&args[1])?;
    let (train, val, test) = split(&ds, [0.8, 0.1, 0.1], ds.manifest.seed)?;
    let cfg = TrainConfig {
        epochs: args[2].parse().expect("epochs"),
        loss: LossConfig::parse_terms(&args[3])?,
        seed: args[4].parse().expect("seed"),
        noise_std: args.get(5).map_or(0.03, |s| s.parse().expect("noise std")),
        ..TrainConfig::default()
    };
    let t = Instant::now();
    let model = train_with(&train, &val, &NetworkConfig::default(), &cfg, |r| {
        println!("{:.0}s {}", t.elapsed().as_secs_f64(), r.to_line());
    })?;
    let report = evaluate("network", |c| model.predict(c), &test)?;
    let m = report.means;
    println!(
        "test cc {:.4} iou {:.4} ssim {:.4} mse {:.5}",
        m.cc, m.iou, m.ssim, m.mse
    );
    Ok(())
}
