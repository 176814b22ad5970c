//! Simulates a synthetic dataset and writes it to a directory.
//!
//! Usage: `gen_dataset <microsphere|biofilm> <count> <seed> <out-dir>`

use std::time::Instant;

use ect_core::dataset::{build_dataset, write_dataset, DatasetConfig};
use ect_core::phantom::{BiofilmSpec, MicrosphereSpec, PhantomSpec};

fn main() -> ect_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    if args.len() != 5 {
        eprintln!("usage: gen_dataset <microsphere|biofilm> <count> <seed> <out-dir>");
        std::process::exit(2);
    }
    let phantom = match args[1].as_str() {
        "biofilm" => PhantomSpec::Biofilm(BiofilmSpec::default()),
        _ => PhantomSpec::Microsphere(MicrosphereSpec::default()),
    };
    let count: usize = args[2].parse().expect("count");
    let seed: u64 = args[3].parse().expect("seed");
    let cfg = DatasetConfig {
        phantom,
        seed,
        ..DatasetConfig::default()
    };
    let t = Instant::now();
    let ds = build_dataset(count, &cfg)?;
    write_dataset(&ds, &args[4])?;
    println!("{count} samples in {:.1}s", t.elapsed().as_secs_f64());
    Ok(())
}
