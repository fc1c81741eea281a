use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spowl_core::decision::prefers_plan;
use spowl_core::envs::{Env, PointHazardConfig, PointHazardEnv};
use spowl_core::planner::{refit, reward_order, select_cce, select_elites, CandidateSequence, Provenance};
use spowl_core::representation::{simnorm, symexp, symlog, twohot_decode, twohot_encode, BinSpec, SimNormSpec};
use spowl_core::safe_policy::{penalty_update, psi_and_multiplier, LagrangianState};

fn candidates(raw: &[(i8, i8, i8)]) -> Vec<CandidateSequence> {
    raw.iter()
        .map(|&(v, c, a)| CandidateSequence {
            actions: vec![f64::from(a) / 8.0, 0.5],
            provenance: Provenance::Sampled,
            value: f64::from(v) / 4.0,
            cost: f64::from(c.unsigned_abs()) / 4.0,
        })
        .collect()
}

proptest! {
    #[test]
    fn simnorm_groups_are_distributions(v in prop::collection::vec(-300.0f64..300.0, 12), shift in -50.0f64..50.0) {
        let spec = SimNormSpec::new(12, 4).unwrap();
        let z = simnorm(&v, spec).unwrap();
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        let zs = simnorm(&shifted, spec).unwrap();
        for (g, gs) in z.as_slice().chunks(4).zip(zs.as_slice().chunks(4)) {
            prop_assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(g.iter().all(|&p| (0.0..=1.0).contains(&p)));
            for (a, b) in g.iter().zip(gs) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn symlog_inverts_and_preserves_order(x in -1e9f64..1e9, y in -1e9f64..1e9) {
        prop_assert!((symexp(symlog(x)) - x).abs() <= 1e-12 * x.abs().max(1.0));
        prop_assert_eq!(x < y, symlog(x) < symlog(y));
    }

    #[test]
    fn twohot_is_an_adjacent_pair(x in -5e4f64..5e4) {
        let bins = BinSpec::default();
        let p = twohot_encode(x, &bins);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let support: Vec<usize> = (0..p.len()).filter(|&i| p[i] > 0.0).collect();
        prop_assert!(!support.is_empty() && support.len() <= 2);
        prop_assert!(support.last().unwrap() - support[0] <= 1);
        // Values beyond the outer bins saturate.
        let expected = x.clamp(symexp(bins.low), symexp(bins.high));
        prop_assert!((twohot_decode(&p, &bins) - expected).abs() <= 1e-9 * expected.abs().max(1.0));
    }

    #[test]
    fn lagrangian_multiplier_stays_non_negative(lambda in 0.0f64..50.0, mu in 1e-3f64..100.0, delta in -20.0f64..20.0) {
        let s = LagrangianState::new(0.1, 1e-4, mu, lambda).unwrap();
        let (psi, next) = psi_and_multiplier(delta, &s);
        prop_assert!(next >= 0.0);
        // Ψ is bounded below by its value at the branch point.
        prop_assert!(psi >= -lambda * lambda / (2.0 * mu) - 1e-9 * (1.0 + lambda * lambda / mu));
        let (psi_up, _) = psi_and_multiplier(delta + 0.5, &s);
        prop_assert!(psi_up >= psi - 1e-9 * psi.abs().max(1.0));
    }

    #[test]
    fn psi_is_continuous_at_the_branch_point(lambda in 0.0f64..50.0, mu in 1e-2f64..100.0) {
        let s = LagrangianState::new(0.0, 0.0, mu, lambda).unwrap();
        let edge = -lambda / mu;
        let (inside, _) = psi_and_multiplier(edge, &s);
        let (outside, _) = psi_and_multiplier(edge - 1e-9, &s);
        prop_assert!((inside - outside).abs() < 1e-6 * (1.0 + lambda * lambda / mu));
    }

    #[test]
    fn penalty_never_shrinks_and_is_floored(mu in 1e-3f64..1e3, nu in 0.0f64..1.0) {
        let s = LagrangianState::new(0.0, nu, mu, 0.0).unwrap();
        let next = penalty_update(&s);
        prop_assert!(next.mu >= 1.0 && next.mu >= mu);
        prop_assert_eq!(next.k, s.k + 1);
    }

    #[test]
    fn elites_are_the_best_improving_candidates(
        raw in prop::collection::vec((-8i8..8, -8i8..8, -8i8..8), 0..40),
        d_r in -2.0f64..2.0,
        d_c in 0.0f64..2.0,
        k in 1usize..12,
        seed in any::<u64>(),
    ) {
        let cands = candidates(&raw);
        let prior = candidates(&[(0, 0, 0)]);
        let sel = select_elites(&cands, &prior, d_r, d_c, k);
        let improving: Vec<&CandidateSequence> = cands.iter().filter(|c| c.value >= d_r && c.cost <= d_c).collect();
        if improving.is_empty() {
            prop_assert!(sel.fallback);
            prop_assert_eq!(&sel.elites, &prior);
            return Ok(());
        }
        prop_assert!(!sel.fallback);
        prop_assert_eq!(sel.elites.len(), improving.len().min(k));
        for w in sel.elites.windows(2) {
            prop_assert!(reward_order(&w[0], &w[1]).is_le());
        }
        let last = sel.elites.last().unwrap();
        let ahead = improving.iter().filter(|c| reward_order(c, last).is_le()).count();
        prop_assert!(ahead <= sel.elites.len());

        let mut shuffled = cands.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        prop_assert_eq!(select_elites(&shuffled, &prior, d_r, d_c, k), sel);
    }

    #[test]
    fn cce_elites_respect_the_limit(raw in prop::collection::vec((-8i8..8, -8i8..8, -8i8..8), 1..40), d_plan in 0.0f64..2.0, k in 1usize..12) {
        let cands = candidates(&raw);
        let sel = select_cce(&cands, d_plan, k);
        let feasible = cands.iter().filter(|c| c.cost < d_plan).count();
        prop_assert_eq!(sel.fallback, feasible == 0);
        if feasible > 0 {
            prop_assert!(sel.elites.iter().all(|c| c.cost < d_plan));
            prop_assert_eq!(sel.elites.len(), feasible.min(k));
        } else {
            let cheapest = cands.iter().map(|c| c.cost).fold(f64::INFINITY, f64::min);
            prop_assert_eq!(sel.elites[0].cost, cheapest);
        }
    }

    #[test]
    fn refit_stays_inside_the_elite_hull(raw in prop::collection::vec((-8i8..8, -8i8..8, -8i8..8), 1..20), sigma_min in 1e-3f64..0.5) {
        let elites = candidates(&raw);
        let (mean, std) = refit(&elites, sigma_min);
        for j in 0..mean.len() {
            let col: Vec<f64> = elites.iter().map(|e| e.actions[j]).collect();
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(mean[j] >= lo - 1e-12 && mean[j] <= hi + 1e-12);
            prop_assert!(std[j] >= sigma_min && std[j] <= (hi - lo).max(sigma_min) + 1e-12);
        }
    }

    #[test]
    fn switching_rule_is_monotone(q in -10.0f64..10.0, qc in 0.0f64..10.0, dq in 0.0f64..5.0, dqc in 0.0f64..5.0) {
        prop_assert!(prefers_plan(q, q, qc, qc));
        prop_assert!(prefers_plan(q + dq, q, qc - dqc, qc));
        if dq > 0.0 {
            prop_assert!(!prefers_plan(q - dq, q, qc, qc));
        }
        if dqc > 0.0 {
            prop_assert!(!prefers_plan(q, q, qc + dqc, qc));
        }
    }

    #[test]
    fn point_env_signals_are_well_formed(seed in any::<u64>(), actions in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..80)) {
        let mut env = PointHazardEnv::new(PointHazardConfig { episode_length: 40, ..PointHazardConfig::default() }).unwrap();
        let first = env.reset(seed);
        prop_assert_eq!(first.len(), env.observation_dim());
        let mut steps = 0;
        for (x, y) in actions {
            let r = env.step(&[x, y]).unwrap();
            steps += 1;
            prop_assert!(r.cost >= 0.0 && r.reward.is_finite());
            prop_assert!(r.observation.iter().all(|v| v.is_finite()));
            if r.done() {
                prop_assert!(r.terminated || steps == 40);
                prop_assert!(env.step(&[0.0, 0.0]).is_err());
                break;
            }
        }
        let mut again = PointHazardEnv::new(PointHazardConfig { episode_length: 40, ..PointHazardConfig::default() }).unwrap();
        prop_assert_eq!(again.reset(seed), first);
    }
}
