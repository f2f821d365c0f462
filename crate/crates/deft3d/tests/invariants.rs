//! Randomized roundtrip invariants over arbitrary shapes and values.

use proptest::prelude::*;

use deft3d::seq::{flatten_levels, unflatten};
use deft3d::tensor::VolumeTensor;
use deft3d::vten::Vten;

fn level_dims() -> impl Strategy<Value = Vec<[usize; 3]>> {
    prop::collection::vec((1usize..5, 1usize..5, 1usize..5).prop_map(|(d, h, w)| [d, h, w]), 1..4)
}

proptest! {
    #[test]
    fn flatten_unflatten_is_bitwise(dims in level_dims(), channels in 1usize..5, seed in 0u64..1000) {
        let mut r = deft3d::rng::seeded(seed);
        let vols: Vec<VolumeTensor<f64>> = dims
            .iter()
            .map(|d| deft3d::rng::random_volume(&mut r, channels, *d))
            .collect();
        let seq = flatten_levels(&vols).unwrap();
        let back = unflatten(&seq).unwrap();
        prop_assert_eq!(back.len(), vols.len());
        for (a, b) in vols.iter().zip(&back) {
            prop_assert_eq!(a.dims, b.dims);
            for (x, y) in a.data.iter().zip(&b.data) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn vten_bytes_roundtrip(values in prop::collection::vec(prop::num::f64::ANY, 1..64)) {
        let v = Vten::from_slice(vec![values.len()], &values).unwrap();
        let bytes = v.to_bytes();
        let back = Vten::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        for (a, b) in back.to_f64_vec().iter().zip(&values) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn vten_rejects_any_truncation(values in prop::collection::vec(prop::num::f32::ANY, 1..16), cut in 0usize..120) {
        let v = Vten::from_slice(vec![values.len()], &values).unwrap();
        let bytes = v.to_bytes();
        prop_assume!(cut < bytes.len());
        prop_assert!(Vten::from_bytes(&bytes[..cut]).is_err());
    }
}
