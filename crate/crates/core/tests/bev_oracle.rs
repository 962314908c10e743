//! Encoder against a hand-computed fixture and a direct per-cell reference.

use bev_erpn_core::bev::{cell_index, encode, encode_with, DensityNorm, GridSpec, Point, PointCloud};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn assert_cell(map: &bev_erpn_core::RgbMap, row: usize, col: usize, want: [f32; 3]) {
    let got = map.cell(row, col);
    for c in 0..3 {
        assert!(
            (got[c] - want[c]).abs() < 1e-6,
            "cell ({row}, {col}) channel {c}: {got:?} vs {want:?}"
        );
    }
}

#[test]
fn five_point_fixture() {
    let cloud = PointCloud::new(vec![
        Point::new(10.0, 0.0, 0.25, 0.3),
        Point::new(10.05, 0.05, -1.0, 0.9),
        Point::new(0.0, -40.0, -2.0, 0.0),
        Point::new(39.999, 39.999, 1.25, 1.0),
        Point::new(20.0, -10.0, 0.0, 0.5),
    ]);
    let map = encode(&cloud, &GridSpec::default());
    // ln(3)/64, (0.25 + 2)/3.25
    assert_cell(&map, 128, 512, [0.017_165_82, 0.692_307_7, 0.9]);
    // ln(2)/64
    assert_cell(&map, 0, 0, [0.010_830_42, 0.0, 0.0]);
    assert_cell(&map, 511, 1023, [0.010_830_42, 1.0, 1.0]);
    assert_cell(&map, 256, 384, [0.010_830_42, 0.615_384_6, 0.5]);
    let nonzero = (0..512)
        .flat_map(|r| (0..1024).map(move |c| (r, c)))
        .filter(|&(r, c)| map.cell(r, c) != [0.0; 3])
        .count();
    assert_eq!(nonzero, 4);
}

#[test]
fn matches_per_cell_reference() {
    let spec = GridSpec {
        x_range: (0.0, 8.0),
        y_range: (-8.0, 8.0),
        z_range: (-2.0, 1.25),
        n_rows: 16,
        n_cols: 32,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for norm in [DensityNorm::Printed, DensityNorm::Log64] {
        let cloud: PointCloud = (0..3000)
            .map(|_| {
                Point::new(
                    rng.random_range(-1.0..9.0),
                    rng.random_range(-9.0..9.0),
                    rng.random_range(-2.5..1.5),
                    rng.random_range(0.0..1.0),
                )
            })
            .collect();
        let map = encode_with(&cloud, &spec, norm);
        for row in 0..spec.n_rows {
            for col in 0..spec.n_cols {
                let inside: Vec<&Point> = cloud
                    .points
                    .iter()
                    .filter(|p| spec.contains(p.x as f64, p.y as f64, p.z as f64))
                    .filter(|p| cell_index(p.x as f64, p.y as f64, &spec) == (row, col))
                    .collect();
                let want = if inside.is_empty() {
                    [0.0; 3]
                } else {
                    let n = inside.len() as f64;
                    let r = match norm {
                        DensityNorm::Printed => ((n + 1.0).ln() / 64.0).min(1.0),
                        DensityNorm::Log64 => ((n + 1.0).ln() / 64f64.ln()).min(1.0),
                    };
                    let zmax = inside.iter().map(|p| p.z as f64).fold(f64::MIN, f64::max);
                    let imax = inside.iter().map(|p| p.intensity).fold(f32::MIN, f32::max);
                    [r as f32, ((zmax + 2.0) / 3.25).clamp(0.0, 1.0) as f32, imax]
                };
                assert_cell(&map, row, col, want);
            }
        }
    }
}
