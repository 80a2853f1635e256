//! Randomized invariants across the engine.

use erm_core::diff::{AdamState, Ctx, ParamStore, Tape, Var};
use erm_core::fields::{bilinear_weights, field_eval, trilinear_weights, Field};
use erm_core::gauge::{apply_gauge, EvolutiveGauge, GaugeTransform, OffsetKind, OffsetTarget, Orthogonal};
use erm_core::primitives::{reparam_select, DirectionSet, GaussianInit, GaussianSet, SelectMode};
use erm_core::relay::{Element, Phase, RelaySchedule};
use erm_core::sampling::{continuous_cdf, inverse_cdf_sample, weights_from_density, RaySegments, SamplerMode};
use erm_core::volren::{composite_values, render_image, Camera, SamplerConfig, VolumePipeline, WHITE};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn segments() -> impl Strategy<Value = RaySegments> {
    (2usize..20)
        .prop_flat_map(|n| {
            (
                0.0f64..2.0,
                prop::collection::vec(0.01f64..0.5, n - 1),
                prop::collection::vec(prop_oneof![1 => Just(0.0), 5 => 0.0f64..8.0], n),
            )
        })
        .prop_map(|(t0, gaps, sigma)| {
            let mut t = vec![t0];
            for g in gaps {
                let last = *t.last().unwrap();
                t.push(last + g);
            }
            RaySegments::new(t, sigma).unwrap()
        })
}

fn nonempty(seg: &RaySegments) -> bool {
    continuous_cdf(seg, seg.t()[0]).is_ok()
}

proptest! {
    #[test]
    fn backward_is_additive(x in -2.0f64..2.0, y in 0.1f64..3.0) {
        fn f<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
            (a * b).sin()
        }
        fn g<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
            a.exp() / b
        }
        let run = |which: u8| {
            let tape = Tape::new();
            let (a, b) = (tape.var(x), tape.var(y));
            let root = match which {
                0 => f(a, b) + g(a, b),
                1 => f(a, b),
                _ => g(a, b),
            };
            let grads = tape.backward(root).unwrap();
            [grads.wrt(a), grads.wrt(b)]
        };
        let (both, gf, gg) = (run(0), run(1), run(2));
        for i in 0..2 {
            prop_assert!((both[i] - gf[i] - gg[i]).abs() <= 1e-12 * (1.0 + both[i].abs()));
        }
        // and the whole pass repeats exactly
        prop_assert_eq!(run(0), both);
    }

    #[test]
    fn interpolation_weights_partition_unity(u in 0.0f64..=1.0, v in 0.0f64..=1.0, w in 0.0f64..=1.0, res in 2usize..40) {
        let (_, bw) = bilinear_weights(u, v, res);
        prop_assert!((bw.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let (_, tw) = trilinear_weights([u, v, w], res);
        prop_assert!((tw.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(bw.iter().chain(&tw).all(|&x| x >= 0.0));
    }

    #[test]
    fn conservation_holds(seg in segments()) {
        let w = weights_from_density(&seg);
        prop_assert!((w.weights.iter().sum::<f64>() + w.transmittance - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn cdf_is_monotone_and_inverts(seg in segments(), u in 0.0f64..1.0, probes in prop::collection::vec(0.0f64..1.0, 8)) {
        prop_assume!(nonempty(&seg));
        let (a, b) = (seg.t()[0], seg.t()[seg.len() - 1]);
        let mut ts: Vec<f64> = probes.iter().map(|p| a + p * (b - a)).collect();
        ts.sort_by(f64::total_cmp);
        let f: Vec<f64> = ts.iter().map(|&t| continuous_cdf(&seg, t).unwrap()).collect();
        prop_assert!(f.windows(2).all(|w| w[0] <= w[1]));
        let t_hat = inverse_cdf_sample(&seg, u).unwrap();
        prop_assert!((continuous_cdf(&seg, t_hat).unwrap() - u).abs() <= 1e-8);
    }

    #[test]
    fn denser_bin_pulls_samples_forward(seg in segments(), u in 0.05f64..0.95, k_frac in 0.0f64..1.0) {
        prop_assume!(nonempty(&seg));
        let t_hat = inverse_cdf_sample(&seg, u).unwrap();
        // bumping sigma_k changes the depth on [t_{k-1}, t_{k+1}] only
        let behind = seg.t().iter().filter(|&&t| t < t_hat - 1e-9).count();
        prop_assume!(behind >= 2);
        let k = ((k_frac * (behind - 1) as f64) as usize).min(behind - 2);
        let mut sigma = seg.sigma().to_vec();
        sigma[k] += 0.5;
        let bumped = RaySegments::new(seg.t().to_vec(), sigma).unwrap();
        prop_assert!(inverse_cdf_sample(&bumped, u).unwrap() < t_hat);
    }

    #[test]
    fn composite_is_linear_in_color(
        alphas in prop::collection::vec(0.0f64..0.95, 1..12),
        k in 0.1f64..3.0,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let colors: Vec<[f64; 3]> = alphas.iter().map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let scaled: Vec<[f64; 3]> = colors.iter().map(|c| c.map(|x| x * k)).collect();
        let (c1, t1) = composite_values(&colors, &alphas, [0.0; 3]);
        let (c2, t2) = composite_values(&scaled, &alphas, [0.0; 3]);
        prop_assert_eq!(t1, t2);
        for i in 0..3 {
            prop_assert!((c2[i] - k * c1[i]).abs() <= 1e-12 * (1.0 + c2[i].abs()));
        }
    }

    #[test]
    fn hard_select_is_a_table_row(q in prop::collection::vec(-5.0f64..5.0, 2..10), seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table: Vec<Vec<f64>> = q.iter().map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let tape = Tape::new();
        let qv: Vec<_> = q.iter().map(|&x| tape.var(x)).collect();
        let out: Vec<f64> = reparam_select(&tape, &qv, &table, SelectMode::Hard).iter().map(|v| v.val()).collect();
        prop_assert!(table.iter().any(|row| *row == out));
    }

    #[test]
    fn relay_phase_is_monotone(total in 1usize..5000, f in 0.0f64..=1.0) {
        let s = RelaySchedule::new(total, f).unwrap();
        let mut seen_evolutive = false;
        for step in 0..total {
            match s.phase(Element::Gauge, step) {
                Phase::Evolutive => seen_evolutive = true,
                Phase::Heuristic => prop_assert!(!seen_evolutive),
            }
        }
        prop_assert!(s.relay_step(Element::Gauge) <= total);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gauge_output_stays_in_the_unit_square(
        raw in prop::collection::vec(-20.0f64..20.0, 3 * 6 * 6 * 2),
        p in prop::array::uniform3(-0.5f64..1.5),
        scale in 0.0f64..0.5,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let evo = EvolutiveGauge::new(
            &mut store, "g", Orthogonal::axis_planes(), OffsetKind::Plane { res: 6 }, scale, OffsetTarget::Both, &mut rng,
        ).unwrap();
        let mut chunks = raw.chunks(6 * 6 * 2);
        for id in evo.param_ids() {
            store.get_mut(id).values_mut().copy_from_slice(chunks.next().unwrap());
        }
        let g = GaugeTransform::Evolutive(evo);
        for uv in apply_gauge(&g, &store, p.map(|x| x.clamp(0.0, 1.0))) {
            prop_assert!(uv.iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn zero_offset_gauge_matches_orthogonal(p in prop::array::uniform3(0.0f64..=1.0), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let field = Field::planes(&mut store, "f", 8, 4, 10.0, &mut rng).unwrap();
        let evo = EvolutiveGauge::new(
            &mut store, "g", Orthogonal::axis_planes(), OffsetKind::Plane { res: 4 }, 0.1, OffsetTarget::Both, &mut rng,
        ).unwrap();
        let tape = Tape::detached();
        let ctx = Ctx::new(&tape, &store);
        let pv = p.map(|x| tape.constant(x));
        let a = field_eval(&ctx, &field, pv, Some(&GaugeTransform::Orthogonal(Orthogonal::axis_planes()))).value();
        let b = field_eval(&ctx, &field, pv, Some(&GaugeTransform::Evolutive(evo))).value();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn split_children_mirror_the_parent(
        mu in prop::array::uniform2(0.2f64..0.8),
        scale in prop::array::uniform3(0.01f64..0.2),
        angle in 0.0f64..3.14,
        seed in any::<u64>(),
    ) {
        let init = GaussianInit {
            mu: [mu[0], mu[1], 0.5],
            scale,
            rot: [(angle / 2.0).cos(), 0.0, 0.0, (angle / 2.0).sin()],
            opacity: 0.6,
            color: [0.2, 0.5, 0.8],
        };
        let mut store = ParamStore::new();
        let mut adam = AdamState::new(1.0);
        let mut set = GaussianSet::new(&mut store, &[init.clone(), init], DirectionSet::circle(8), None).unwrap();
        let parent = set.values(&store, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kids = set.learned_split(&mut store, &mut adam, 0, &mut rng).unwrap();
        prop_assert_eq!(set.len(&store), 3);
        let (a, b) = (set.values(&store, kids[0]), set.values(&store, kids[1]));
        for k in 0..3 {
            prop_assert!((0.5 * (a.mu[k] + b.mu[k]) - parent.mu[k]).abs() <= 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn zero_scale_offsets_render_like_orthogonal(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let field = Field::planes(&mut store, "f", 8, 4, 10.0, &mut rng).unwrap();
        let evo = EvolutiveGauge::new(
            &mut store, "g", Orthogonal::axis_planes(), OffsetKind::Mlp { hidden: 8, degree: 2 }, 0.0, OffsetTarget::Both, &mut rng,
        ).unwrap();
        let mut pipe = VolumePipeline {
            field,
            coarse: None,
            gauge: Some(GaugeTransform::Orthogonal(Orthogonal::axis_planes())),
            sampler: SamplerConfig { n_coarse: 0, n_fine: 12, mode: SamplerMode::Heuristic, union: false },
            background: WHITE,
        };
        let cam = Camera::look_at([2.0, 0.4, 0.8], [0.5; 3], [0.0, 0.0, 1.0], 0.9, 6, 6);
        let base = render_image(&pipe, &store, &cam);
        pipe.gauge = Some(GaugeTransform::Evolutive(evo));
        prop_assert_eq!(base, render_image(&pipe, &store, &cam));
    }
}
