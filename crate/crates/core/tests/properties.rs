use std::collections::{BTreeMap, BTreeSet};

use ept_core::embedding_store::{generate_synthetic, split_protocol, TestCount};
use ept_core::linalg::Matrix;
use ept_core::nep::{argmin, solve_ridge, Metric, NepModel};
use ept_core::protocol::{run_protocol_with, RunOptions};
use ept_core::prototype::{CalibrationPool, Components, ParamId, PoolSettings, ProjectorSharing};
use ept_core::train::nep_logits;
use ept_core::{ClassId, EmbeddingDataset, ProtocolSpec, RunConfig, SynthSpec};
use proptest::prelude::*;

fn matrix_and_query(max_c: usize, max_d: usize) -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>)> {
    (1..=max_c, 1..=max_d).prop_flat_map(|(c, d)| {
        (Just(c), Just(d), prop::collection::vec(-5.0..5.0f64, c * d), prop::collection::vec(-5.0..5.0f64, d))
    })
}

fn small_protocol() -> impl Strategy<Value = (SynthSpec, ProtocolSpec, u64)> {
    (2usize..5, 0usize..4, 1usize..3, 1usize..4, 1usize..4, 1usize..4, any::<u64>()).prop_map(
        |(base, stages, ways, shots, test, base_support, seed)| {
            let classes = base + stages * ways;
            let per_class = shots.max(base_support) + test + 1;
            let synth = SynthSpec {
                num_classes: classes,
                dim: 3,
                samples_per_class: per_class,
                mean_scale: 5.0,
                noise_std: 1.0,
            };
            let proto = ProtocolSpec {
                base_classes: base,
                stages,
                ways,
                shots,
                test_per_class: TestCount::Count(test),
                base_support: Some(base_support),
            };
            (synth, proto, seed)
        },
    )
}

fn pool_with_live_task(seed: u64, sharing: ProjectorSharing) -> CalibrationPool<f64> {
    let settings = PoolSettings { d_t: Some(3), d_h: 2, alpha: 0.5, sharing };
    let mut pool = CalibrationPool::new(4, &settings, Components { class_offsets: true, task_offsets: true }).unwrap();
    let support =
        |c: u32| -> Vec<Vec<f64>> { (0..2).map(|i| (0..4).map(|j| (c * 3 + i + j) as f64 * 0.25).collect()).collect() };
    let first: BTreeMap<ClassId, Vec<Vec<f64>>> = (0..2).map(|c| (ClassId(c), support(c))).collect();
    pool.open_task(&first, seed).unwrap();
    pool.freeze_stage(0).unwrap();
    let second: BTreeMap<ClassId, Vec<Vec<f64>>> = (2..5).map(|c| (ClassId(c), support(c))).collect();
    pool.open_task(&second, seed ^ 1).unwrap();
    pool
}

proptest! {
    #[test]
    fn ridge_solution_satisfies_normal_equations((c, d, k, f) in matrix_and_query(12, 16), lambda in 0.01..3.0f64) {
        let km = Matrix::from_vec(c, d, k).unwrap();
        let rho = solve_ridge(&km, &f, lambda).unwrap();
        // (K Kᵀ + λI) ρ − K f, written out without the library's helpers.
        let mut worst = 0.0f64;
        let mut scale = 1.0f64;
        for i in 0..c {
            let mut lhs = lambda * rho[i];
            for (j, r) in rho.iter().enumerate() {
                let kk: f64 = (0..d).map(|m| km.get(i, m) * km.get(j, m)).sum();
                lhs += kk * r;
            }
            let kf: f64 = (0..d).map(|m| km.get(i, m) * f[m]).sum();
            scale = scale.max(kf.abs()).max(lhs.abs());
            worst = worst.max((lhs - kf).abs());
        }
        prop_assert!(worst <= 1e-9 * scale, "residual {worst}");
    }

    #[test]
    fn ridge_is_linear_in_the_query((c, d, k, f) in matrix_and_query(8, 10), s in -4.0..4.0f64) {
        let km = Matrix::from_vec(c, d, k).unwrap();
        let rho = solve_ridge(&km, &f, 0.3).unwrap();
        let scaled: Vec<f64> = f.iter().map(|v| v * s).collect();
        let rho_s = solve_ridge(&km, &scaled, 0.3).unwrap();
        for (a, b) in rho.iter().zip(&rho_s) {
            prop_assert!((a * s - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn prediction_is_logit_argmax_and_residual_argmin((c, d, k, f) in matrix_and_query(8, 10), tau in 0.1..5.0f64) {
        let ids: Vec<ClassId> = (0..c as u32).map(|i| ClassId(i * 7)).collect();
        let model = NepModel::new(Matrix::from_vec(c, d, k).unwrap(), ids.clone(), 0.3, 1e-8).unwrap();
        let decision = model.classify(&f).unwrap();
        let logits = nep_logits(&model, &f, tau).unwrap();
        let best = logits.iter().enumerate().fold(0, |b, (i, &z)| if z > logits[b] { i } else { b });
        prop_assert_eq!(decision.predicted, ids[best]);
        prop_assert_eq!(decision.predicted, ids[argmin(&decision.residuals)]);
    }

    #[test]
    fn embedding_file_round_trips(n in 1usize..30, d in 1usize..9, classes in 1u32..6, seed in any::<u64>()) {
        let mut state = seed;
        let mut next = || { state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); state };
        let features: Vec<f32> = (0..n * d).map(|_| (next() >> 40) as f32 / 1024.0 - 8000.0).collect();
        let labels: Vec<u32> = (0..n).map(|_| (next() >> 33) as u32 % classes).collect();
        let ds = EmbeddingDataset::new(features, labels, classes, d).unwrap();
        let bytes = ds.to_bytes().unwrap();
        prop_assert_eq!(bytes.len(), 20 + 4 * n * d + 4 * n);
        prop_assert_eq!(EmbeddingDataset::from_bytes(&bytes).unwrap(), ds);
    }

    #[test]
    fn pool_checkpoint_round_trips(seed in any::<u64>(), per_task in any::<bool>(), bumps in prop::collection::vec((0usize..6, -1.0..1.0f64), 0..8)) {
        let sharing = if per_task { ProjectorSharing::PerTask } else { ProjectorSharing::PerClass };
        let mut pool = pool_with_live_task(seed, sharing);
        let params = pool.trainable_params(1);
        for (i, (p, delta)) in bumps.into_iter().enumerate() {
            pool.nudge(params[p % params.len()], i % 2, delta).unwrap();
        }
        let back = CalibrationPool::<f64>::from_checkpoint_bytes(&pool.to_checkpoint_bytes()).unwrap();
        prop_assert_eq!(back, pool);
    }

    #[test]
    fn calibrated_prototype_decomposes(seed in any::<u64>(), per_task in any::<bool>(), delta in -2.0..2.0f64) {
        let sharing = if per_task { ProjectorSharing::PerTask } else { ProjectorSharing::PerClass };
        let mut pool = pool_with_live_task(seed, sharing);
        // Move the task offset off zero so the projector path contributes.
        pool.nudge(ParamId::TaskOffset(1), 0, delta).unwrap();
        for c in 2..5 {
            let id = ClassId(c);
            let rec = pool.record(id).unwrap();
            let expected: Vec<f64> = rec
                .raw_prototype()
                .iter()
                .zip(rec.class_offset())
                .zip(pool.task_contribution(id).unwrap())
                .map(|((r, o), t)| r + o + t)
                .collect();
            prop_assert_eq!(pool.calibrated_prototype(id).unwrap(), expected);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn split_is_disjoint_and_cumulative((synth, proto, seed) in small_protocol()) {
        let ds = generate_synthetic(&synth, seed).unwrap();
        let plan = split_protocol(&ds, &proto, seed).unwrap();
        prop_assert_eq!(plan.len(), proto.stages + 1);
        let mut seen_classes = BTreeSet::new();
        let mut all_support = BTreeSet::new();
        let mut previous_test: BTreeSet<usize> = BTreeSet::new();
        for stage in &plan.stages {
            for c in &stage.class_set {
                prop_assert!(seen_classes.insert(*c), "class {c} in two stages");
            }
            let support: BTreeSet<usize> = stage.support_indices.iter().copied().collect();
            let test: BTreeSet<usize> = stage.test_indices.iter().copied().collect();
            prop_assert!(support.iter().all(|&r| stage.class_set.contains(&ds.label(r))));
            prop_assert!(all_support.is_disjoint(&support));
            all_support.extend(support.iter().copied());
            prop_assert!(test.is_superset(&previous_test));
            let test_classes: BTreeSet<ClassId> = test.iter().map(|&r| ds.label(r)).collect();
            prop_assert_eq!(&test_classes, &seen_classes);
            previous_test = test;
        }
        let final_test = previous_test;
        prop_assert!(all_support.is_disjoint(&final_test));
    }

    #[test]
    fn offsets_off_with_euclidean_is_nearest_class_mean(seed in 0u64..1000) {
        let synth = SynthSpec { num_classes: 8, dim: 6, samples_per_class: 20, mean_scale: 2.0, noise_std: 1.0 };
        let ds = generate_synthetic(&synth, seed).unwrap();
        let mut cfg = RunConfig {
            protocol: ProtocolSpec { base_classes: 4, stages: 2, ways: 2, shots: 3, test_per_class: TestCount::Count(8), base_support: Some(10) },
            ..Default::default()
        };
        cfg.train.seed = seed;
        cfg.ablation.apply_token("nep-only").unwrap();
        cfg.ablation.apply_token("no-nep").unwrap();
        cfg.fallback_metric = Metric::Euclidean;
        let out = run_protocol_with(&ds, &cfg, &mut RunOptions::default()).unwrap();

        let mut means: BTreeMap<ClassId, Vec<f64>> = BTreeMap::new();
        for (t, stage) in out.plan.stages.iter().enumerate() {
            for &c in &stage.class_set {
                let rows: Vec<usize> = stage.support_indices.iter().copied().filter(|&r| ds.label(r) == c).collect();
                let mut m = vec![0.0; ds.dim()];
                for &r in &rows {
                    for (a, &x) in m.iter_mut().zip(ds.row(r)) {
                        *a += x as f64;
                    }
                }
                means.insert(c, m.into_iter().map(|v| v / rows.len() as f64).collect());
            }
            for (i, &row) in stage.test_indices.iter().enumerate() {
                let f = ds.row(row);
                let oracle = means
                    .iter()
                    .map(|(c, m)| (*c, m.iter().zip(f).map(|(a, &b)| (a - b as f64).powi(2)).sum::<f64>()))
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .unwrap()
                    .0;
                prop_assert_eq!(out.predictions[t][i], oracle, "stage {} row {}", t, row);
            }
        }
        let stage_mean = out.report.stages.iter().map(|s| s.accuracy).sum::<f64>() / out.report.stages.len() as f64;
        prop_assert!((out.report.average - stage_mean).abs() <= 1e-12);
        prop_assert_eq!(out.report.params_trainable, 0);
    }
}
