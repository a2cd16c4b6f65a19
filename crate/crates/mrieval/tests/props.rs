//! Property tests for the serialization and grid-manipulation invariants.

use proptest::prelude::*;

use mrieval::nifti::{parse_nifti, write_nifti, write_nifti_labels};
use mrieval::volume::{LabelMap, Volume};

fn shape_strategy() -> impl Strategy<Value = [usize; 3]> {
    (1usize..6, 1usize..6, 1usize..6).prop_map(|(a, b, c)| [a, b, c])
}

fn volume_strategy() -> impl Strategy<Value = Volume> {
    (shape_strategy(), 0.1f64..4.0, 0.1f64..4.0, 0.1f64..4.0)
        .prop_flat_map(|(shape, sx, sy, sz)| {
            let n = shape[0] * shape[1] * shape[2];
            prop::collection::vec(-1.0e6f32..1.0e6f32, n)
                .prop_map(move |data| Volume::new(data, shape, [sx, sy, sz]).unwrap())
        })
}

fn labelmap_strategy() -> impl Strategy<Value = LabelMap> {
    shape_strategy().prop_flat_map(|shape| {
        let n = shape[0] * shape[1] * shape[2];
        prop::collection::vec(0u32..32_000, n)
            .prop_map(move |data| LabelMap::new(data, shape, [1.0, 1.0, 1.0]).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn volume_roundtrip_preserves_data_and_geometry(v in volume_strategy(), gz in any::<bool>()) {
        let bytes = write_nifti(&v, gz).unwrap();
        let back = parse_nifti(&bytes).unwrap().into_volume().unwrap();
        prop_assert_eq!(&back.data, &v.data);
        prop_assert_eq!(back.shape, v.shape);
        for axis in 0..3 {
            prop_assert!((back.spacing[axis] - v.spacing[axis]).abs() < 1e-6);
        }
    }

    #[test]
    fn labelmap_roundtrip_preserves_codes(m in labelmap_strategy(), gz in any::<bool>()) {
        let bytes = write_nifti_labels(&m, gz).unwrap();
        let back = parse_nifti(&bytes).unwrap().into_labels().unwrap();
        prop_assert_eq!(&back.data, &m.data);
        prop_assert_eq!(back.shape, m.shape);
    }

    #[test]
    fn padding_preserves_the_value_multiset(v in volume_strategy(), extra in (0usize..4, 0usize..4, 0usize..4)) {
        let target = [
            v.shape[0] + extra.0,
            v.shape[1] + extra.1,
            v.shape[2] + extra.2,
        ];
        let padded = v.pad_to_shape(target, f32::NEG_INFINITY).unwrap();
        let mut kept: Vec<f32> = padded
            .data
            .iter()
            .copied()
            .filter(|x| *x != f32::NEG_INFINITY)
            .collect();
        let mut original = v.data.clone();
        kept.sort_by(f32::total_cmp);
        original.sort_by(f32::total_cmp);
        prop_assert_eq!(kept, original);
    }

    #[test]
    fn normalization_is_idempotent_within_rounding(v in volume_strategy()) {
        // constant volumes are rejected; everything else normalizes stably
        if let Ok(once) = v.normalize_intensity() {
            let twice = once.normalize_intensity().unwrap();
            for (a, b) in once.data.iter().zip(&twice.data) {
                prop_assert!((a - b).abs() < 1e-6);
            }
            let (lo, hi) = once.intensity_range();
            prop_assert_eq!(lo, -1.0);
            prop_assert_eq!(hi, 1.0);
        }
    }
}
