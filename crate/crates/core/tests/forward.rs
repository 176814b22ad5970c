use ect_core::fem::{ForwardModel, MutualCapacitances, PhysicalPermittivity, MAX_OFFSET};
use ect_core::image::PermittivityImage;
use ect_core::mesh::DomainSpec;
use ect_core::phantom::{disk_image, Disk};
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;

fn small_spec() -> DomainSpec {
    DomainSpec {
        width_um: 40,
        depth_um: 20,
        pad_side_um: 10,
        pad_top_um: 10,
        n_electrodes: 4,
        ..DomainSpec::default()
    }
}

/// Maxwell capacitance matrix `M = −table`, so that `M_ii = Q_i` and `M_ij = Q_j` under excitation `i`.
fn maxwell(c: &MutualCapacitances, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| -c.get(i, j))
}

#[test]
fn all_ones_exceeds_all_zeros_everywhere() {
    let model = ForwardModel::new(&DomainSpec::default()).unwrap();
    let phys = PhysicalPermittivity::default();
    let cal = model.calibration(&phys, MAX_OFFSET).unwrap();
    let mut checked = 0;
    for row in 0..MAX_OFFSET {
        for i in 0..20 {
            if !cal.empty.is_padded(row, i) {
                assert!(cal.full.get(row, i) > cal.empty.get(row, i), "({row},{i})");
                checked += 1;
            }
        }
    }
    assert_eq!(checked, 85);

    let half = model
        .capacitance_matrix(&PermittivityImage::uniform(100, 200, 0.5).unwrap(), &phys, MAX_OFFSET)
        .unwrap();
    let norm = cal.normalize(&half).unwrap();
    for v in norm.measurements() {
        assert!(v > 0.0 && v < 1.0, "{v}");
    }
}

#[test]
fn near_pairs_couple_more_strongly_and_interior_pairs_agree() {
    let model = ForwardModel::new(&DomainSpec::default()).unwrap();
    let c = model
        .capacitance_matrix(
            &PermittivityImage::uniform(100, 200, 0.0).unwrap(),
            &PhysicalPermittivity::default(),
            MAX_OFFSET,
        )
        .unwrap();
    for i in 0..15 {
        assert!(c.get(0, i).abs() > c.get(4, i).abs(), "{i}");
    }
    // The side padding is finite, so pairs agree only approximately; the
    // deviation is mirror symmetric and shrinks toward the centre pair (9,10).
    let reference = c.get(0, 9);
    let dev: Vec<f64> = (5..14)
        .map(|i| (c.get(0, i) - reference).abs() / reference.abs())
        .collect();
    for k in 0..4 {
        assert!((dev[k] - dev[8 - k]).abs() < 1e-10, "{dev:?}");
        assert!(dev[k] > dev[k + 1], "{dev:?}");
    }
    assert!(dev.iter().all(|&d| d < 1e-3), "{dev:?}");
}

#[test]
fn inclusion_in_a_gap_raises_that_pair() {
    let model = ForwardModel::new(&DomainSpec::default()).unwrap();
    let phys = PhysicalPermittivity::default();
    // Electrodes 10 and 11 are centred at 105 and 115 µm; the gap is at 110 µm.
    let img = disk_image(
        100,
        200,
        &[Disk {
            y: 110.0,
            z: 3.0,
            r: 3.0,
        }],
    )
    .unwrap();
    let empty = PermittivityImage::uniform(100, 200, 0.0).unwrap();
    let a = model.capacitance_matrix(&empty, &phys, MAX_OFFSET).unwrap();
    let b = model.capacitance_matrix(&img, &phys, MAX_OFFSET).unwrap();
    assert!(b.get(0, 10) > a.get(0, 10));
}

/// Raising permittivity anywhere adds stored energy for every electrode voltage
/// vector, so the increment of the Maxwell matrix is positive semi-definite and
/// its diagonal (the self capacitances) never decreases.
fn assert_energy_monotone(model: &ForwardModel, low: &PermittivityImage, high: &PermittivityImage) {
    let phys = PhysicalPermittivity::default();
    let n = model.n_electrodes();
    let a = maxwell(
        &model.mutual_capacitances(&model.assemble(low, &phys).unwrap()).unwrap(),
        n,
    );
    let b = maxwell(
        &model
            .mutual_capacitances(&model.assemble(high, &phys).unwrap())
            .unwrap(),
        n,
    );
    let d = &b - &a;
    let sym = (&d + d.transpose()) * 0.5;
    let scale = a.diagonal().amax();
    let eig = SymmetricEigen::new(sym).eigenvalues;
    assert!(eig.min() > -1e-9 * scale, "eigenvalues {eig}");
    for i in 0..n {
        assert!(
            d[(i, i)] >= -1e-12 * scale,
            "self capacitance {i} fell by {}",
            -d[(i, i)]
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn nested_phantoms_increase_stored_energy(
        base in prop::collection::vec(0.0..1.0f64, 800),
        bump in prop::collection::vec(0.0..1.0f64, 800),
    ) {
        let model = ForwardModel::new(&small_spec()).unwrap();
        let high: Vec<f64> = base.iter().zip(&bump).map(|(a, b)| (a + b).min(1.0)).collect();
        let low = PermittivityImage::new(20, 40, base).unwrap();
        let high = PermittivityImage::new(20, 40, high).unwrap();
        assert_energy_monotone(&model, &low, &high);
    }
}
