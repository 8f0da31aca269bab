//! Randomized invariant checks over the public library surface.

use proptest::prelude::*;

use logo_core::config::ExperimentConfig;
use logo_core::dataset::{self, Tier};
use logo_core::env::tabular::TabularMDP;
use logo_core::env::{self, EnvSpec, ARENA};
use logo_core::io::{TensorFile, TAG_DATA};
use logo_core::oracle::value_iteration;
use logo_core::rollout::{compute_priority, mixed_minibatch, softmax_weights, SyntheticBuffer};
use logo_core::stats;

fn spec2() -> EnvSpec {
    EnvSpec::particle(2, 8, 0.99, 1.0)
}

proptest! {
    #[test]
    fn priority_stays_in_the_clip_interval(u in 0.0f64..50.0, c in 1e-6f64..10.0) {
        let p = compute_priority(u, c);
        prop_assert!((0.0..=c).contains(&p));
    }

    #[test]
    fn priority_never_increases_with_uncertainty(
        u1 in 0.0f64..50.0,
        du in 0.0f64..50.0,
        c in 1e-6f64..10.0,
    ) {
        prop_assert!(compute_priority(u1 + du, c) <= compute_priority(u1, c));
    }

    #[test]
    fn softmax_weights_form_a_monotone_distribution(
        priorities in prop::collection::vec(0.0f64..5.0, 1..40),
    ) {
        let w = softmax_weights(&priorities);
        prop_assert_eq!(w.len(), priorities.len());
        let total: f64 = w.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12, "sum {}", total);
        prop_assert!(w.iter().all(|&x| x > 0.0));
        for i in 0..w.len() {
            for j in 0..w.len() {
                if priorities[i] > priorities[j] {
                    prop_assert!(w[i] > w[j]);
                }
            }
        }
    }

    #[test]
    fn mixed_minibatches_put_real_rows_first(
        episodes in 1usize..3,
        b in (1usize..6).prop_map(|h| 2 * h),
        seed in any::<u64>(),
    ) {
        let spec = spec2();
        let d = dataset::collect(&spec, Tier::Medium, episodes, 1);
        let mut buf = SyntheticBuffer::new();
        for t in d.transitions.iter().take(4) {
            let mut t = t.clone();
            t.priority = Some(0.5);
            buf.push(t, 0, 0.1);
        }
        let mb = mixed_minibatch(&d, &buf, b, seed);
        prop_assert_eq!(mb.batch.rows, b);
        prop_assert_eq!(mb.real_indices.len(), b / 2);
        prop_assert_eq!(mb.synthetic_indices.len(), b - b / 2);
        let sd = spec.state_dim;
        for (r, &idx) in mb.real_indices.iter().enumerate() {
            prop_assert!(idx < d.len());
            let want: Vec<f64> = d.transitions[idx].state.iter().map(|&v| v as f64).collect();
            prop_assert_eq!(&mb.batch.state.data()[r * sd..(r + 1) * sd], &want[..]);
        }
        for &idx in &mb.synthetic_indices {
            prop_assert!(idx < buf.len());
        }
    }

    #[test]
    fn arena_bounds_survive_arbitrary_actions(
        seed in any::<u64>(),
        actions in prop::collection::vec(
            prop::collection::vec(-10.0f32..10.0, 2),
            2,
        ),
        steps in 1u32..6,
    ) {
        let spec = spec2();
        let (mut state, _) = env::reset(&spec, seed);
        for _ in 0..steps {
            let out = env::step(&spec, &state, &actions);
            state = out.state;
            for i in 0..spec.n_agents {
                prop_assert!(state.s[2 * i].abs() <= ARENA);
                prop_assert!(state.s[2 * i + 1].abs() <= ARENA);
                prop_assert!(state.s[2 * spec.n_agents + 2 * i].abs() <= 1.0);
            }
        }
    }

    #[test]
    fn clipping_is_flagged_exactly_when_actions_leave_the_box(
        seed in any::<u64>(),
        inside in prop::collection::vec(-0.999f32..0.999, 4),
        blowout in 1.001f32..10.0,
        hot in 0usize..4,
    ) {
        let spec = spec2();
        let (state, _) = env::reset(&spec, seed);
        let acts = |v: &[f32]| vec![vec![v[0], v[1]], vec![v[2], v[3]]];
        prop_assert!(!env::step(&spec, &state, &acts(&inside)).clipped);
        let mut outside = inside.clone();
        outside[hot] = blowout;
        prop_assert!(env::step(&spec, &state, &acts(&outside)).clipped);
    }

    #[test]
    fn observations_mask_neighbors_beyond_the_sensing_radius(
        seed in any::<u64>(),
        radius in 0.05f32..2.5,
    ) {
        let spec = EnvSpec::particle(3, 8, 0.99, radius);
        let (state, obs) = env::reset(&spec, seed);
        for i in 0..spec.n_agents {
            prop_assert_eq!(obs[i].len(), spec.obs_dim);
            let (px, py) = (state.s[2 * i], state.s[2 * i + 1]);
            let mut slot = 6;
            for j in 0..spec.n_agents {
                if j == i {
                    continue;
                }
                let (dx, dy) = (state.s[2 * j] - px, state.s[2 * j + 1] - py);
                let visible = (dx * dx + dy * dy).sqrt() <= radius;
                if visible {
                    prop_assert_eq!(obs[i][slot], dx);
                    prop_assert_eq!(obs[i][slot + 1], dy);
                } else {
                    prop_assert_eq!(obs[i][slot], 0.0);
                    prop_assert_eq!(obs[i][slot + 1], 0.0);
                }
                slot += 2;
            }
        }
    }

    #[test]
    fn episodes_end_exactly_at_the_cap(seed in any::<u64>(), cap in 1u32..12) {
        let spec = EnvSpec::particle(2, cap, 0.99, 1.0);
        let (mut state, _) = env::reset(&spec, seed);
        let hold = vec![vec![0.0f32, 0.0]; 2];
        for step in 1..=cap {
            let out = env::step(&spec, &state, &hold);
            prop_assert_eq!(out.done, step == cap);
            state = out.state;
        }
    }

    #[test]
    fn splits_keep_every_episode_intact(
        episodes in 2usize..20,
        frac in 0.05f64..0.45,
        seed in any::<u64>(),
    ) {
        let spec = EnvSpec::particle(2, 4, 0.99, 1.0);
        let ds = dataset::collect(&spec, Tier::Random, episodes, 9);
        let (train, val) = dataset::split(&ds, frac, seed);
        prop_assert_eq!(train.len() + val.len(), ds.len());
        prop_assert!(!train.is_empty() && !val.is_empty());
        prop_assert_eq!(
            train.episode_ranges().len() + val.episode_ranges().len(),
            ds.episode_ranges().len()
        );
    }

    #[test]
    fn spearman_stays_in_unit_range_and_detects_monotone_pairs(
        xs in prop::collection::vec(-100.0f64..100.0, 3..40),
    ) {
        let ys: Vec<f64> = xs.iter().map(|x| x * 2.0).collect();
        let rho = stats::spearman(&xs, &ys);
        prop_assert!((-1.0..=1.0).contains(&rho));
        let distinct = xs.iter().any(|&x| x != xs[0]);
        if distinct {
            prop_assert!((rho - 1.0).abs() < 1e-9, "rho {}", rho);
        }
    }

    #[test]
    fn confidence_intervals_are_non_negative_and_tiny_on_constants(
        base in -50.0f64..50.0,
        n in 1usize..20,
    ) {
        let xs = vec![base; n];
        let ci = stats::ci95(&xs);
        prop_assert!(ci >= 0.0);
        prop_assert!(ci <= 1e-9 * (1.0 + base.abs()), "ci {}", ci);
        let mut ys = xs.clone();
        if n > 1 {
            ys[0] += 1.0;
            prop_assert!(stats::ci95(&ys) > 0.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn value_iteration_meets_its_residual_contract(
        n_states in 2usize..10,
        n_actions in 1usize..4,
        seed in any::<u64>(),
        gamma in 0.0f64..0.9,
    ) {
        let mdp = TabularMDP::random(n_states, n_actions, seed, gamma);
        let tol = 1e-8;
        let q = value_iteration(&mdp, tol);
        prop_assert!(q.bellman_residual(&mdp) <= 2.0 * tol);
    }

    #[test]
    fn tensor_containers_round_trip_bitwise(
        entries in prop::collection::vec(
            (
                "[a-z][a-z0-9]{0,6}(/[a-z0-9]{1,6}){0,2}",
                prop::collection::vec(1usize..5, 1..3),
            ),
            1..6,
        ),
        fill in -1.0e9f32..1.0e9,
    ) {
        let mut file = TensorFile::new(TAG_DATA);
        for (i, (name, dims)) in entries.iter().enumerate() {
            let count: usize = dims.iter().product();
            let data: Vec<f32> = (0..count).map(|k| fill + (i * 31 + k) as f32).collect();
            file.push(&format!("{name}{i}"), dims, data);
        }
        let bytes = file.to_bytes();
        let back = TensorFile::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn configs_round_trip_through_their_text_form(
        gamma in 0.0f64..0.99,
        radius in 0.05f32..3.0,
        episodes in 1usize..500,
        frac in 0.05f64..0.45,
        tier in 0usize..4,
        clip in prop::option::of(0.001f64..10.0),
        lambda in 0.0f64..20.0,
        switches in (any::<bool>(), any::<bool>()),
        seeds in prop::collection::vec(any::<u64>(), 1..5),
        name in "[a-z][a-z0-9-]{0,12}",
        half_batch in 1usize..64,
    ) {
        let mut cfg = ExperimentConfig::default();
        cfg.env.gamma = gamma;
        cfg.env.sensing_radius = radius;
        cfg.data.episodes = episodes;
        cfg.data.val_fraction = frac;
        cfg.data.tier = [Tier::Random, Tier::Medium, Tier::Expert, Tier::Mixed][tier];
        cfg.rollout.clip = clip;
        cfg.ablate.lambda_pen = lambda;
        cfg.ablate.direct_state = switches.0;
        cfg.ablate.mpc = switches.1;
        cfg.run.seeds = seeds;
        cfg.run.experiment = name;
        cfg.policy.batch = 2 * half_batch;
        let text = cfg.to_text();
        let back = ExperimentConfig::parse_text(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_text(), text);
    }
}
