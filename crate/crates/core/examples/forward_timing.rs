//! Times one full forward evaluation (assembly, factorization, 20 excitations).

use std::time::Instant;

use ect_core::fem::{ForwardModel, PhysicalPermittivity, MAX_OFFSET};
use ect_core::image::PermittivityImage;
use ect_core::mesh::DomainSpec;

fn main() -> ect_core::Result<()> {
    let spec = DomainSpec::default();
    let t = Instant::now();
    let model = ForwardModel::new(&spec)?;
    println!("setup: {:.3}s", t.elapsed().as_secs_f64());

    let phys = PhysicalPermittivity::default();
    let (rows, cols) = spec.image_dims();
    let img = PermittivityImage::uniform(rows, cols, 0.0)?;
    let t = Instant::now();
    let c = model.capacitance_matrix(&img, &phys, MAX_OFFSET)?;
    println!("forward: {:.3}s", t.elapsed().as_secs_f64());
    println!("C[0,0..5] = {:?}", &c.values[..5]);
    Ok(())
}
