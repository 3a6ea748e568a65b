//! Randomized invariants of the tensor engine, IVLA pieces, NMF, metrics and
//! configuration.

use proptest::prelude::*;

use hsvlt_core::aggregation::{initial_bases, nmf_step, NMF_EPS, reconstruction_error, CsaFeatures, CsaVariant};
use hsvlt_core::config::{EmbeddingKind, RunConfig};
use hsvlt_core::ivla::Gate;
use hsvlt_core::metrics::{average_precision, decide, mean_ap, Decision, PredictionSet};
use hsvlt_core::param::ParamStore;
use hsvlt_core::rng::Rng;
use hsvlt_core::tensor::{read_container_bytes, write_container_bytes, NormKind, Precision, Tensor};

fn shape_and_data(max_rank: usize) -> impl Strategy<Value = (Vec<usize>, Vec<f64>)> {
    prop::collection::vec(1usize..5, 1..=max_rank).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        (Just(shape), prop::collection::vec(-50.0f64..50.0, n))
    })
}

fn image() -> impl Strategy<Value = Tensor> {
    (1usize..3, 1usize..4, 1usize..6, 1usize..6).prop_flat_map(|(b, c, h, w)| {
        prop::collection::vec(-5.0f64..5.0, b * c * h * w).prop_map(move |d| Tensor::new(d, &[b, c, h, w]).unwrap())
    })
}

/// Scores with optional ties (drawn from a handful of levels) and truth flags.
fn labelled(n: usize, t: usize) -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (
        prop::collection::vec(prop_oneof![0.0f64..1.0, (0u8..4).prop_map(|k| k as f64 / 4.0)], n * t),
        prop::collection::vec(any::<bool>(), n * t),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_slices_sum_to_one((shape, data) in shape_and_data(4), axis_pick in 0usize..4) {
        let axis = axis_pick % shape.len();
        let y = Tensor::new(data, &shape).unwrap().softmax(axis).unwrap();
        let stride: usize = shape[axis + 1..].iter().product();
        let len = shape[axis];
        for outer in 0..y.numel() / (len * stride) {
            for inner in 0..stride {
                let s: f64 = (0..len).map(|k| y.data()[outer * len * stride + k * stride + inner]).sum();
                prop_assert!((s - 1.0).abs() < 1e-6, "slice sums to {s}");
            }
        }
        prop_assert!(y.data().iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn softmax_is_shift_invariant((shape, data) in shape_and_data(3), c in -100.0f64..100.0) {
        let axis = shape.len() - 1;
        let x = Tensor::new(data, &shape).unwrap();
        let a = x.softmax(axis).unwrap();
        let b = x.add_scalar(c).softmax(axis).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn unflatten_after_flatten_is_bit_exact(x in image()) {
        let (h, w) = (x.dim(2), x.dim(3));
        let back = x.flatten_spatial().unwrap().unflatten_spatial(h, w).unwrap();
        prop_assert_eq!(back.shape(), x.shape());
        prop_assert_eq!(back.data(), x.data());
    }

    #[test]
    fn normalized_slices_have_zero_mean(x in image()) {
        let (b, c, hw) = (x.dim(0), x.dim(1), x.dim(2) * x.dim(3));
        let inst = x.normalize(NormKind::Instance, 1e-5).unwrap();
        for s in 0..b * c {
            let mean: f64 = inst.data()[s * hw..(s + 1) * hw].iter().sum::<f64>() / hw as f64;
            prop_assert!(mean.abs() < 1e-9);
        }
        let layer = x.normalize(NormKind::Layer, 1e-5).unwrap();
        for i in 0..b {
            for p in 0..hw {
                let mean: f64 = (0..c).map(|ch| layer.data()[(i * c + ch) * hw + p]).sum::<f64>() / c as f64;
                prop_assert!(mean.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gate_stays_inside_the_open_unit_interval(x in image(), seed in any::<u64>(), scale in 0.1f64..20.0) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let gate = Gate::new(&mut store, "g", x.dim(1), &mut rng).unwrap();
        for p in store.all() {
            p.set_data(rng.vec_uniform(p.numel(), -scale, scale)).unwrap();
        }
        let y = gate.forward(&x).unwrap();
        prop_assert!(y.data().iter().all(|v| v.abs() <= 1.0 && v.is_finite()));
    }

    #[test]
    fn container_round_trip_is_exact((shape, data) in shape_and_data(5)) {
        let t = Tensor::new(data, &shape).unwrap();
        let bytes = write_container_bytes(&t, Precision::F64);
        let (back, used) = read_container_bytes(&bytes).unwrap();
        prop_assert_eq!(used, bytes.len());
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert_eq!(back.data(), t.data());
        let (narrow, _) = read_container_bytes(&write_container_bytes(&t, Precision::F32)).unwrap();
        for (a, b) in narrow.data().iter().zip(t.data()) {
            prop_assert_eq!(*a, *b as f32 as f64);
        }
    }

    /// The eps in the update denominators makes each half-step the exact
    /// majorize-minimize step of ½‖X − DC‖² + eps·(ΣC + ΣD), so that
    /// objective, not the bare Frobenius error, is what never rises; near an
    /// exact fit the bare error can move up by O(eps).
    #[test]
    fn nmf_updates_keep_factors_non_negative_and_descend(m in 1usize..8, n in 1usize..8, r in 1usize..5, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let x = Tensor::new(rng.vec_uniform(m * n, 0.0, 3.0), &[m, n]).unwrap();
        let mut d = initial_bases(m, r, seed);
        let mut c = Tensor::new(rng.vec_uniform(r * n, 0.0, 1.0), &[r, n]).unwrap();
        let objective = |d: &Tensor, c: &Tensor| {
            let e = reconstruction_error(&x, d, c).unwrap();
            0.5 * e * e + NMF_EPS * (d.data().iter().sum::<f64>() + c.data().iter().sum::<f64>())
        };
        let mut f = objective(&d, &c);
        for _ in 0..20 {
            (d, c) = nmf_step(&x, &d, &c).unwrap();
            prop_assert!(d.data().iter().chain(c.data()).all(|v| *v >= 0.0 && v.is_finite()));
            let next = objective(&d, &c);
            prop_assert!(next <= f + 1e-12 * (1.0 + f), "objective rose {f} -> {next}");
            f = next;
        }
    }

    #[test]
    fn ap_is_invariant_under_monotone_rescaling((scores, truths) in labelled(12, 1), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let moved: Vec<f64> = scores.iter().map(|s| a * s + b).collect();
        prop_assert_eq!(average_precision(&scores, &truths), average_precision(&moved, &truths));
    }

    #[test]
    fn ap_lies_in_the_unit_interval((scores, truths) in labelled(15, 1)) {
        match average_precision(&scores, &truths) {
            Some(ap) => prop_assert!(ap > 0.0 && ap <= 1.0),
            None => prop_assert!(truths.iter().all(|t| !t)),
        }
    }

    #[test]
    fn perfect_ranking_scores_one(truths in prop::collection::vec(any::<bool>(), 1..20)) {
        prop_assume!(truths.iter().any(|t| *t));
        let scores: Vec<f64> = truths.iter().enumerate().map(|(i, t)| if *t { 2.0 } else { 0.0 } + i as f64 * 1e-3).collect();
        prop_assert_eq!(average_precision(&scores, &truths), Some(1.0));
    }

    #[test]
    fn top_k_marks_exactly_k_labels((scores, truths) in labelled(6, 5), k in 1usize..=5) {
        let set = PredictionSet::new(scores, truths, 6, 5).unwrap();
        let marked = decide(&set, Decision::TopK(k)).unwrap();
        for row in marked.chunks(5) {
            prop_assert_eq!(row.iter().filter(|m| **m).count(), k);
        }
    }

    #[test]
    fn map_averages_only_defined_classes((scores, truths) in labelled(5, 4)) {
        let set = PredictionSet::new(scores.clone(), truths.clone(), 5, 4).unwrap();
        let aps: Vec<f64> = (0..4)
            .filter_map(|j| {
                let col = |v: &[f64]| (0..5).map(|i| v[i * 4 + j]).collect::<Vec<_>>();
                let flags: Vec<bool> = (0..5).map(|i| truths[i * 4 + j]).collect();
                average_precision(&col(&scores), &flags)
            })
            .collect();
        match mean_ap(&set) {
            Ok(report) => {
                prop_assert!(!aps.is_empty());
                prop_assert!((report.map - aps.iter().sum::<f64>() / aps.len() as f64).abs() < 1e-15);
            }
            Err(_) => prop_assert!(aps.is_empty()),
        }
    }

    #[test]
    fn config_round_trips_through_toml(
        seed in any::<u32>(),
        kernel in prop::sample::select(vec![1usize, 3, 5, 7, 11]),
        toggles in prop::array::uniform4(any::<bool>()),
        variant in prop::sample::select(CsaVariant::ALL.to_vec()),
        features in prop::sample::select(CsaFeatures::ALL.to_vec()),
        stages in prop::sample::subsequence(vec![1usize, 2, 3, 4], 1..=4),
        embedding in prop::sample::select(vec![EmbeddingKind::LearnedTable, EmbeddingKind::OneHotProjected]),
        lr in 1e-6f64..1e-1,
    ) {
        let mut cfg = RunConfig::desk();
        cfg.model.seed = seed as u64;
        cfg.model.ivla.gconv_kernel = kernel;
        [cfg.model.ivla.use_gconv, cfg.model.ivla.use_l_act, cfg.model.ivla.use_v_gate, cfg.model.ivla.use_l_gate] = toggles;
        cfg.model.csa.variant = variant;
        cfg.model.csa.features = features;
        cfg.model.csa.stages = stages;
        cfg.model.embedding.kind = embedding;
        cfg.train.lr = lr;
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
