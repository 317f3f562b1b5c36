use mot_core::merge::{interpolate, merge_uniform, merge_weighted, param_distance, MergeSpec, MergeWeights};
use mot_core::model::{init_params, ModelConfig};
use mot_core::params::ParameterVector;
use mot_core::Error;
use proptest::prelude::*;

fn tiny() -> ModelConfig {
    ModelConfig { d_model: 4, n_layers: 1, n_heads: 1, context_length: 4, vocab_size: 78, tie_head: true }
}

fn filled(values: &[f32]) -> ParameterVector {
    let mut p = ParameterVector::zeros(&tiny());
    for (i, v) in p.values.iter_mut().enumerate() {
        *v = values[i % values.len()];
    }
    p
}

fn bits(p: &ParameterVector) -> Vec<u32> {
    p.values.iter().map(|v| v.to_bits()).collect()
}

#[test]
fn copies_merge_to_themselves() {
    let p = init_params(&ModelConfig::default(), 1).unwrap();
    for k in 1..=5 {
        let members = vec![&p; k];
        assert_eq!(bits(&merge_uniform(&members).unwrap()), bits(&p));
    }
}

#[test]
fn forced_arithmetic() {
    let a = filled(&[1.0, 3.0]);
    let b = filled(&[3.0, 5.0]);
    let m = merge_uniform(&[&a, &b]).unwrap();
    assert_eq!(&m.values[..2], &[2.0, 4.0]);
    assert!(m.values.chunks(2).all(|c| c == [2.0, 4.0]));
}

#[test]
fn member_order_does_not_matter() {
    let ps: Vec<_> = (0..4).map(|s| init_params(&ModelConfig::default(), s).unwrap()).collect();
    let reference = bits(&merge_uniform(&[&ps[0], &ps[1], &ps[2], &ps[3]]).unwrap());
    for order in [[3, 2, 1, 0], [1, 3, 0, 2], [2, 0, 3, 1]] {
        let members: Vec<_> = order.iter().map(|&i| &ps[i]).collect();
        assert_eq!(bits(&merge_uniform(&members).unwrap()), reference);
    }
}

#[test]
fn mismatched_layouts_name_the_segment() {
    let a = init_params(&ModelConfig::default(), 0).unwrap();
    let b = init_params(&ModelConfig { d_model: 32, ..ModelConfig::default() }, 0).unwrap();
    match merge_uniform(&[&a, &b]) {
        Err(Error::Shape { segment }) => assert_eq!(segment, "tok_emb"),
        other => panic!("expected shape error, got {other:?}"),
    }
    assert!(merge_uniform(&[]).is_err());
}

#[test]
fn weighted_merges() {
    let ps: Vec<_> = (0..4).map(|s| init_params(&ModelConfig::default(), s).unwrap()).collect();
    let named = |ws: MergeWeights| MergeSpec {
        members: ps.iter().enumerate().map(|(i, p)| (format!("b{i}"), p)).collect(),
        weights: ws,
    };
    let uniform = merge_weighted(&named(MergeWeights::Uniform)).unwrap();
    assert_eq!(bits(&uniform), bits(&merge_uniform(&ps.iter().collect::<Vec<_>>()).unwrap()));

    let first = merge_weighted(&named(MergeWeights::Explicit(vec![1.0, 0.0, 0.0, 0.0]))).unwrap();
    assert_eq!(bits(&first), bits(&ps[0]));

    assert!(matches!(merge_weighted(&named(MergeWeights::Explicit(vec![0.5, 0.4, 0.0, 0.0]))), Err(Error::Config(_))));
    assert!(matches!(merge_weighted(&named(MergeWeights::Explicit(vec![1.5, -0.5, 0.0, 0.0]))), Err(Error::Config(_))));
    assert!(matches!(merge_weighted(&named(MergeWeights::Explicit(vec![1.0]))), Err(Error::Config(_))));
}

#[test]
fn quarter_weights_on_basis_vectors() {
    let basis: Vec<ParameterVector> = (0..4)
        .map(|j| {
            let mut p = ParameterVector::zeros(&tiny());
            p.values[j] = 1.0;
            p
        })
        .collect();
    let spec = MergeSpec {
        members: basis.iter().map(|p| ("e".to_string(), p)).collect(),
        weights: MergeWeights::Explicit(vec![0.25; 4]),
    };
    let m = merge_weighted(&spec).unwrap();
    assert_eq!(&m.values[..4], &[0.25; 4]);
    assert!(m.values[4..].iter().all(|&v| v == 0.0));
}

#[test]
fn interpolation_endpoints_and_midpoint() {
    let base = init_params(&ModelConfig::default(), 1).unwrap();
    let ckpt = init_params(&ModelConfig::default(), 2).unwrap();
    assert_eq!(bits(&interpolate(&base, &ckpt, 1.0).unwrap()), bits(&base));
    assert_eq!(bits(&interpolate(&base, &ckpt, 0.0).unwrap()), bits(&ckpt));
    let a = filled(&[0.0, 2.0]);
    let b = filled(&[2.0, 0.0]);
    assert!(interpolate(&a, &b, 0.5).unwrap().values.iter().all(|&v| v == 1.0));
    assert!(interpolate(&base, &ckpt, 1.5).is_err());
    assert!(interpolate(&base, &ckpt, -0.1).is_err());
}

#[test]
fn distances() {
    let a = filled(&[3.0, 0.0]);
    let b = filled(&[0.0, 4.0]);
    let d = param_distance(&a, &b).unwrap();
    let pairs = a.len() as f64 / 2.0;
    assert!((d.l2 - (25.0 * pairs).sqrt()).abs() < 1e-9);
    assert_eq!(d.cosine, 0.0);
    let same = param_distance(&a, &a).unwrap();
    assert_eq!(same.l2, 0.0);
    assert!((same.cosine - 1.0).abs() < 1e-12);
}

fn vectors(k: usize) -> impl Strategy<Value = Vec<Vec<f32>>> {
    let n = ParameterVector::zeros(&tiny()).len();
    prop::collection::vec(prop::collection::vec(-10.0f32..10.0, n), k)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn merge_is_permutation_invariant(vs in vectors(4), rot in 0usize..4) {
        let ps: Vec<_> = vs.iter().map(|v| ParameterVector::zeros(&tiny()).with_values(v.clone())).collect();
        let a = merge_uniform(&ps.iter().collect::<Vec<_>>()).unwrap();
        let mut order: Vec<_> = ps.iter().collect();
        order.rotate_left(rot);
        order.swap(0, 3);
        let b = merge_uniform(&order).unwrap();
        prop_assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn merge_stays_inside_the_hull(vs in vectors(3)) {
        let ps: Vec<_> = vs.iter().map(|v| ParameterVector::zeros(&tiny()).with_values(v.clone())).collect();
        let m = merge_uniform(&ps.iter().collect::<Vec<_>>()).unwrap();
        for i in 0..m.len() {
            let lo = vs.iter().map(|v| v[i]).fold(f32::INFINITY, f32::min);
            let hi = vs.iter().map(|v| v[i]).fold(f32::NEG_INFINITY, f32::max);
            prop_assert!(lo <= m.values[i] && m.values[i] <= hi);
        }
    }

    #[test]
    fn merge_commutes_with_shifts(vs in vectors(2), c in -5.0f64..5.0) {
        let ps: Vec<_> = vs.iter().map(|v| ParameterVector::zeros(&tiny()).with_values(v.clone())).collect();
        let shifted: Vec<_> = ps.iter().map(|p| p.with_values(p.values.iter().map(|&x| (x as f64 + c) as f32).collect())).collect();
        let m = merge_uniform(&ps.iter().collect::<Vec<_>>()).unwrap();
        let ms = merge_uniform(&shifted.iter().collect::<Vec<_>>()).unwrap();
        for (a, b) in m.values.iter().zip(&ms.values) {
            prop_assert!(((*a as f64 + c) - *b as f64).abs() < 1e-5);
        }
    }

    #[test]
    fn interpolation_is_convex(vs in vectors(2), lambda in 0.0f64..=1.0) {
        let a = ParameterVector::zeros(&tiny()).with_values(vs[0].clone());
        let b = ParameterVector::zeros(&tiny()).with_values(vs[1].clone());
        let m = interpolate(&a, &b, lambda).unwrap();
        for i in 0..m.len() {
            let (lo, hi) = (vs[0][i].min(vs[1][i]), vs[0][i].max(vs[1][i]));
            prop_assert!(lo <= m.values[i] && m.values[i] <= hi);
        }
    }
}
