use candle_core::{Device, Tensor};
use proptest::prelude::*;
use styleblend::checkpoint::{decode, encode, Manifest};
use styleblend::ops::to_f64_vec;
use styleblend::sbm::blend_normalize;
use styleblend::trainer::Phase;
use styleblend::ModelConfig;

fn tensors() -> impl Strategy<Value = Vec<(String, Vec<f32>, Vec<usize>)>> {
    prop::collection::btree_map("[a-z]{1,6}(/[a-z0-9]{1,4}){0,2}", (1usize..4, 1usize..5), 0..6).prop_flat_map(
        |m| {
            m.into_iter()
                .map(|(name, (a, b))| {
                    prop::collection::vec(-1e6f32..1e6, a * b).prop_map(move |v| (name.clone(), v, vec![a, b]))
                })
                .collect::<Vec<_>>()
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn checkpoint_round_trip_is_exact(entries in tensors(), step in 0u64..1_000_000, two in any::<bool>()) {
        let phase = if two { Phase::Two } else { Phase::One };
        let manifest = Manifest::new(ModelConfig::toy(), step, phase);
        let owned: Vec<(String, Tensor)> = entries
            .iter()
            .map(|(n, v, s)| (n.clone(), Tensor::from_vec(v.clone(), s.as_slice(), &Device::Cpu).unwrap()))
            .collect();
        let bytes = encode(&manifest, owned.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
        let (m, back) = decode(&bytes).unwrap();
        prop_assert_eq!(m.step, step);
        prop_assert_eq!(m.phase, phase);
        prop_assert_eq!(back.len(), owned.len());
        for (n, t) in &owned {
            prop_assert_eq!(back[n].dims(), t.dims());
            prop_assert_eq!(to_f64_vec(&back[n]).unwrap(), to_f64_vec(t).unwrap());
        }
        let again = encode(&m, back.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
        prop_assert_eq!(again, bytes);
    }

    #[test]
    fn blend_weights_sum_to_one(cells in prop::collection::vec((-300f64..300.0, -300f64..300.0), 1..40)) {
        let n = cells.len();
        let a_t = Tensor::from_vec(cells.iter().map(|c| c.0).collect::<Vec<_>>(), (1, 1, n), &Device::Cpu).unwrap();
        let a_s = Tensor::from_vec(cells.iter().map(|c| c.1).collect::<Vec<_>>(), (1, 1, n), &Device::Cpu).unwrap();
        let w = blend_normalize(&a_t, &a_s).unwrap();
        let (t, s) = (to_f64_vec(&w.target).unwrap(), to_f64_vec(&w.source).unwrap());
        for i in 0..n {
            prop_assert!((0.0..=1.0).contains(&t[i]) && (0.0..=1.0).contains(&s[i]));
            prop_assert!((t[i] + s[i] - 1.0).abs() < 1e-12);
        }
    }
}
