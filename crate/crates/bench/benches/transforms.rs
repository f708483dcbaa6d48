//! Forward/inverse transform round trips at solver-relevant sizes.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use perihom_core::field::RealVectorField;
use perihom_core::grid::Grid;

fn transform_round_trip(c: &mut Criterion) {
    let mut group = c.benchmark_group("transform_round_trip");
    for n in [15usize, 31, 33] {
        let grid = Grid::new([n; 3], [1.0; 3]).unwrap();
        let field = RealVectorField::from_fn(grid.shape(), |v| {
            let x = v as f64;
            [(0.1 * x).sin(), (0.2 * x).cos(), (0.05 * x).sin()]
        });
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| {
                let spec = grid.forward(&field).unwrap();
                std::hint::black_box(grid.inverse(&spec).unwrap())
            })
        });
    }
    group.finish();
}

criterion_group!(benches, transform_round_trip);
criterion_main!(benches);
