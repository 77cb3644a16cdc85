mod common;

use fastscan_core::tensor_grid::{raster_flatten, raster_unflatten, transpose_grid, TokenGrid};
use fastscan_core::fvt1::{DType, Tensor};
use proptest::prelude::*;

fn grid_strategy() -> impl Strategy<Value = TokenGrid> {
    (1usize..3, 1usize..6, 1usize..6, 1usize..4).prop_flat_map(|(b, h, w, d)| {
        prop::collection::vec(-1e3f64..1e3, b * h * w * d)
            .prop_map(move |v| TokenGrid::new(b, h, w, d, v).unwrap())
    })
}

#[test]
fn transpose_matches_index_swap() {
    let mut rng = common::rng(5);
    let vals = common::uniform_vec(&mut rng, 4 * 7 * 5 * 16, -1.0, 1.0);
    let g = TokenGrid::new(4, 7, 5, 16, vals).unwrap();
    let t = transpose_grid(&g);
    assert_eq!((t.batch(), t.rows(), t.cols(), t.dim()), (4, 5, 7, 16));
    for b in 0..4 {
        for i in 0..5 {
            for j in 0..7 {
                for d in 0..16 {
                    assert_eq!(t.get(b, i, j, d), g.get(b, j, i, d));
                }
            }
        }
    }
}

#[test]
fn transposed_flatten_is_column_major() {
    let g = TokenGrid::from_fn(1, 3, 4, 2, |_, i, j, d| (i * 100 + j * 10 + d) as f64).unwrap();
    let flat = raster_flatten(&transpose_grid(&g)).remove(0);
    let mut want = Vec::new();
    for j in 0..4 {
        for i in 0..3 {
            want.extend_from_slice(g.token(0, i, j));
        }
    }
    assert_eq!(flat, want);
}

proptest! {
    #[test]
    fn transpose_involution(g in grid_strategy()) {
        prop_assert_eq!(transpose_grid(&transpose_grid(&g)), g);
    }

    #[test]
    fn flatten_round_trip(g in grid_strategy()) {
        let flat = raster_flatten(&g);
        let back = raster_unflatten(&flat, g.rows(), g.cols(), g.dim()).unwrap();
        prop_assert_eq!(&back, &g);
        prop_assert_eq!(raster_flatten(&back), flat);
    }

    #[test]
    fn transpose_preserves_slice_multisets(g in grid_strategy()) {
        let t = transpose_grid(&g);
        for b in 0..g.batch() {
            for d in 0..g.dim() {
                let collect = |x: &TokenGrid| {
                    let mut v: Vec<f64> = (0..x.rows())
                        .flat_map(|i| (0..x.cols()).map(move |j| (i, j)))
                        .map(|(i, j)| x.get(b, i, j, d))
                        .collect();
                    v.sort_by(f64::total_cmp);
                    v
                };
                prop_assert_eq!(collect(&g), collect(&t));
            }
        }
    }

    #[test]
    fn fvt1_round_trip(shape in prop::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
        let n: usize = shape.iter().product();
        let mut rng = common::rng(seed);
        let data = common::uniform_vec(&mut rng, n, -1e6, 1e6);
        let t = Tensor::new(shape, data).unwrap();
        prop_assert_eq!(Tensor::decode(&t.encode().unwrap()).unwrap(), t.clone());
        let t32 = Tensor::new(t.shape.clone(), t.data.iter().map(|v| *v as f32 as f64).collect())
            .unwrap()
            .with_dtype(DType::F32);
        prop_assert_eq!(Tensor::decode(&t32.encode().unwrap()).unwrap(), t32);
    }
}
