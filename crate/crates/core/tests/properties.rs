use proptest::prelude::*;
use tec_core::analytic::{solve_centralized, Bound};
use tec_core::consensus::{self, build_graph, CommGraph, ConsensusConfig, Topology, TuningSchedule};
use tec_core::data::{
    aggregate_community, gen_building, gen_community, split, BuildingProfileParams, Month, SplitMode, SplitSpec,
};
use tec_core::forecast::{fedavg, select_participants, LearnerConfig, MinMax, ModelWeights};
use tec_core::harness::{run_day, total_price_difference, DayConfig, PredictionMethod, VppSchedule};
use tec_core::model::{direction_of, CostCoefficients, FlowDirection, Scenario, TimeSeries, VppSpec, STEP_MINUTES};
use tec_core::rng::seeded;
use tec_core::Error;

fn vpp() -> impl Strategy<Value = VppSpec> {
    (0.01..1.0f64, 0.0..5.0f64, 0.01..1.0f64, 0.0..5.0f64, 0.5..40.0f64, 0.5..40.0f64).prop_map(
        |(a1, a2, b1, b2, pg, pc)| VppSpec {
            id: String::new(),
            g2c: CostCoefficients { c1: a1, c2: a2 },
            c2g: CostCoefficients { c1: b1, c2: b2 },
            p_max_g2c: pg,
            p_max_c2g: pc,
        },
    )
}

fn vpps(max: usize) -> impl Strategy<Value = Vec<VppSpec>> {
    prop::collection::vec(vpp(), 1..=max).prop_map(|mut v| {
        for (k, x) in v.iter_mut().enumerate() {
            x.id = format!("v{k}");
        }
        v
    })
}

/// A feasible scenario with demand a fraction of the capacity in a random
/// direction.
fn scenario(max: usize) -> impl Strategy<Value = Scenario> {
    (vpps(max), 0.01..=1.0f64, any::<bool>()).prop_map(|(v, frac, import)| {
        let sign = if import { 1.0 } else { -1.0 };
        let cap: f64 = v.iter().map(|x| if import { x.p_max_g2c } else { x.p_max_c2g }).sum();
        Scenario::new(v, sign * frac * cap, 0).unwrap()
    })
}

fn topology() -> impl Strategy<Value = Topology> {
    prop_oneof![Just(Topology::Star), Just(Topology::Ring), Just(Topology::Complete)]
}

fn assert_graph_invariants(g: &CommGraph) {
    let n = g.n_agents();
    for i in 0..n {
        for &j in g.neighbors(i) {
            assert_ne!(i, j, "self loop");
            assert!(g.neighbors(j).contains(&i), "edge {i}-{j} not symmetric");
        }
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for &j in g.neighbors(i) {
            if !std::mem::replace(&mut seen[j], true) {
                stack.push(j);
            }
        }
    }
    assert!(seen.iter().all(|&s| s), "graph not connected");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn cost_coefficients_need_convexity(c1 in -2.0..2.0f64, c2 in -2.0..2.0f64) {
        let ok = CostCoefficients::new(c1, c2).is_ok();
        prop_assert_eq!(ok, c1 > 0.0 && c2 >= 0.0);
    }

    #[test]
    fn direction_follows_sign(p in -100.0..100.0f64) {
        let d = direction_of(p).unwrap();
        let want = if p > 0.0 {
            FlowDirection::GridToCommunity
        } else if p < 0.0 {
            FlowDirection::CommunityToGrid
        } else {
            FlowDirection::NoFlow
        };
        prop_assert_eq!(d, want);
    }

    #[test]
    fn scenario_rejects_exactly_the_infeasible(v in vpps(6), p in -300.0..300.0f64) {
        let cap = if p >= 0.0 {
            v.iter().map(|x| x.p_max_g2c).sum::<f64>()
        } else {
            v.iter().map(|x| x.p_max_c2g).sum::<f64>()
        };
        match Scenario::new(v, p, 0) {
            Ok(_) => prop_assert!(p.abs() <= cap),
            Err(e) => {
                let infeasible = matches!(e, Error::Infeasible { .. });
                prop_assert!(infeasible);
                prop_assert!(p.abs() > cap);
            }
        }
    }

    #[test]
    fn series_timestamps_are_uniform(start in -1000i64..1000, n in 1usize..50) {
        let s = TimeSeries::new(start * STEP_MINUTES, vec![0.0; n]);
        for i in 1..n {
            prop_assert_eq!(s.timestamp(i) - s.timestamp(i - 1), STEP_MINUTES);
        }
        let mut pts: Vec<(i64, f64)> = s.points().collect();
        prop_assert_eq!(TimeSeries::from_points(&pts).unwrap(), s);
        if n > 1 {
            pts[n - 1].0 += 1;
            prop_assert!(TimeSeries::from_points(&pts).is_err());
        }
    }

    #[test]
    fn optimum_satisfies_kkt(s in scenario(8)) {
        let o = solve_centralized(&s).unwrap().unwrap();
        let coeffs = s.active_coeffs().unwrap();
        let tol = 1e-9 * s.demand().max(1.0);
        for (g, &(_, p_max)) in coeffs.iter().enumerate() {
            let p = o.p_star[g];
            prop_assert!((0.0..=p_max).contains(&p), "P[{}] = {} outside [0, {}]", g, p, p_max);
            if o.kkt.mu_upper[g] > 0.0 {
                prop_assert_eq!(p, p_max);
            }
            if o.kkt.mu_lower[g] > 0.0 {
                prop_assert_eq!(p, 0.0);
            }
            match o.active_set.bound_of(g) {
                Bound::Upper => prop_assert_eq!(p, p_max),
                Bound::Lower => prop_assert_eq!(p, 0.0),
                Bound::Free => {}
            }
        }
        prop_assert!(o.balance_residual(&s) <= tol);
        prop_assert!(o.stationarity_residual(&s).unwrap() <= 1e-9);
        prop_assert!(o.complementarity_residual(&s).unwrap() <= 1e-9);
    }

    #[test]
    fn built_graphs_are_valid(t in topology(), n in 1usize..12) {
        let g = build_graph(&t, n).unwrap();
        prop_assert_eq!(g.n_agents(), n + 1);
        assert_graph_invariants(&g);
    }

    #[test]
    fn edge_lists_are_valid_or_rejected(n in 1usize..6, edges in prop::collection::vec((0usize..7, 0usize..7), 0..14)) {
        if let Ok(g) = CommGraph::from_edges(n, &edges) {
            assert_graph_invariants(&g);
        }
    }

    #[test]
    fn schedule_validation(a in -1.0..1.0f64, b in -1.0..1.0f64, da in -0.5..1.5f64, db in -0.5..1.5f64) {
        let s = TuningSchedule { alpha0: a, beta0: b, decay_alpha: da, decay_beta: db };
        let valid = a > 0.0 && b > 0.0 && (0.0..=1.0).contains(&da) && (0.0..=1.0).contains(&db);
        prop_assert_eq!(s.validate().is_ok(), valid);
    }

    #[test]
    fn consensus_power_stays_in_box(s in scenario(5), t in topology(), alpha in 0.001..0.5f64, beta in 0.01..0.3f64) {
        let g = build_graph(&t, s.n_vpps()).unwrap();
        let cfg = ConsensusConfig::new(TuningSchedule::constant(alpha, beta), 1e-6, 200);
        let Ok(r) = consensus::run_with(&s, &g, &cfg, None, None, true, |ctx, prev, t| ctx.step(prev, t)) else {
            return Ok(());
        };
        let coeffs = s.active_coeffs().unwrap();
        for round in r.agent_trace.as_ref().unwrap() {
            for (st, &(_, p_max)) in round.iter().zip(&coeffs) {
                prop_assert!((0.0..=p_max).contains(&st.power));
            }
        }
        if r.converged {
            prop_assert!(r.trace.last().unwrap().max_neighbor_gap <= cfg.eps);
        }
    }

    #[test]
    fn learner_config_validation(v in -0.5..1.5f64, p in 0usize..4, f in 0usize..4) {
        let cfg = LearnerConfig { val_split: v, past_obs: p, future_obs: f, ..Default::default() };
        let valid = v > 0.0 && v < 1.0 && p >= 1 && f >= 1;
        prop_assert_eq!(cfg.validate().is_ok(), valid);
    }

    #[test]
    fn participants_are_distinct_and_sorted(pool in 1usize..40, k in 0usize..45, seed in any::<u64>()) {
        let mut rng = seeded(seed);
        match select_participants(pool, k, &mut rng) {
            Ok(ids) => {
                prop_assert!(k >= 1 && k <= pool);
                prop_assert_eq!(ids.len(), k);
                prop_assert!(ids.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(ids.iter().all(|&i| i < pool));
            }
            Err(_) => prop_assert!(k == 0 || k > pool),
        }
    }

    #[test]
    fn fedavg_is_order_free_and_linear(
        rows in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 6), 1..10),
        shift in -3.0..3.0f64,
    ) {
        let models: Vec<ModelWeights> = rows.iter().map(|r| ModelWeights::new("m", r.clone()).unwrap()).collect();
        let avg = fedavg(&models).unwrap();
        let mut rev = models.clone();
        rev.reverse();
        prop_assert_eq!(&fedavg(&rev).unwrap(), &avg);
        let shifted: Vec<ModelWeights> = rows
            .iter()
            .map(|r| ModelWeights::new("m", r.iter().map(|x| x + shift).collect()).unwrap())
            .collect();
        let s = fedavg(&shifted).unwrap();
        for (a, b) in avg.params.iter().zip(&s.params) {
            prop_assert!((b - a - shift).abs() <= 1e-12 * (1.0 + a.abs() + shift.abs()));
        }
    }

    #[test]
    fn averageable_iff_tag_and_length_match(la in 1usize..5, lb in 1usize..5, same_tag in any::<bool>()) {
        let a = ModelWeights::new("x", vec![0.0; la]).unwrap();
        let b = ModelWeights::new(if same_tag { "x" } else { "y" }, vec![0.0; lb]).unwrap();
        prop_assert_eq!(a.is_averageable_with(&b), same_tag && la == lb);
        prop_assert_eq!(fedavg(&[a, b]).is_ok(), same_tag && la == lb);
    }

    #[test]
    fn minmax_maps_into_unit_interval(values in prop::collection::vec(-50.0..50.0f64, 1..40)) {
        let m = MinMax::fit(&values);
        for &v in &values {
            let n = m.normalize(v);
            prop_assert!((0.0..=1.0).contains(&n));
            prop_assert!((m.denormalize(n) - v).abs() <= 1e-9 * (1.0 + v.abs()));
        }
    }

    #[test]
    fn random_profiles_are_in_range(seed in any::<u64>()) {
        let p = BuildingProfileParams::random(&mut seeded(seed));
        for x in [p.base_load, p.daily_peak_amp, p.noise_sigma, p.pv_capacity] {
            prop_assert!(x >= 0.0);
        }
        prop_assert!((0.0..24.0).contains(&p.peak_hour));
        prop_assert!((0.0..=1.0).contains(&p.cloudiness));
    }

    #[test]
    fn generation_is_zero_at_night(seed in any::<u64>()) {
        let p = BuildingProfileParams::random(&mut seeded(seed));
        let (demand, generation) = gen_building(&p, 3).unwrap();
        prop_assert!(demand.is_aligned_with(&generation));
        for (minute, kw) in generation.points() {
            prop_assert!(kw >= 0.0);
            let hour = (minute % 1440) / 60;
            if !(4..=20).contains(&hour) {
                prop_assert_eq!(kw, 0.0, "generation at minute {}", minute);
            }
        }
    }

    #[test]
    fn aggregation_is_additive(seed in any::<u64>(), n in 1usize..5) {
        let bs = gen_community("p", n, seed, 2).unwrap();
        let demands: Vec<TimeSeries> = bs.iter().map(|b| b.demand.clone()).collect();
        let total = aggregate_community(&demands).unwrap();
        for i in 0..total.len() {
            let direct: f64 = demands.iter().map(|d| d.values()[i]).sum();
            prop_assert!((total.values()[i] - direct).abs() <= 1e-12 * (1.0 + direct.abs()));
        }
    }

    #[test]
    fn split_boundaries_follow_the_mode(m in 0usize..12, scarce in any::<bool>()) {
        let month = Month::ALL[m];
        let series = TimeSeries::new(0, vec![1.0; 365 * 96]);
        let mode = if scarce { SplitMode::Scarce28Day } else { SplitMode::FullHistory };
        let spec = SplitSpec { test_month: month, mode };
        match split(&series, &spec) {
            Ok((train, test)) => {
                prop_assert_eq!(train.end_minute(), test.start_minute());
                prop_assert_eq!(test.end_minute(), month.end_minute());
                if scarce {
                    prop_assert_eq!(train.start_minute(), month.start_minute());
                    prop_assert_eq!(train.len(), 28 * 96);
                } else {
                    prop_assert_eq!(train.start_minute(), 0);
                    prop_assert_eq!(test.start_minute(), month.start_minute());
                }
            }
            Err(_) => prop_assert!(!scarce && month == Month::January),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn day_total_is_the_sum_of_gaps(base in 5.0..30.0f64, bias in -2.0..2.0f64) {
        let vpps = vec![
            VppSpec::symmetric("a", 0.05, 2.0, 40.0),
            VppSpec::symmetric("b", 0.08, 1.0, 40.0),
            VppSpec::symmetric("c", 0.04, 3.0, 40.0),
        ];
        let day = DayConfig {
            vpps: VppSchedule::Constant(vpps),
            graph: build_graph(&Topology::Star, 3).unwrap(),
            consensus: ConsensusConfig::new(TuningSchedule::constant(0.1, 0.1), 1e-6, 50_000),
        };
        let truth: Vec<f64> = (0..96).map(|t| base + 10.0 * (t as f64 / 15.0).sin()).collect();
        let used: Vec<f64> = truth.iter().map(|p| p + bias).collect();
        let r = run_day(PredictionMethod::Lmf, &truth, &used, &day).unwrap();
        let mut sum = 0.0;
        for (t, row) in r.rows.iter().enumerate() {
            prop_assert_eq!(row.interval, t);
            prop_assert!(row.price_gap >= 0.0);
            sum += row.price_gap;
        }
        prop_assert_eq!(total_price_difference(&r.rows).unwrap(), sum);
        prop_assert_eq!(r.total_price_difference, sum);
    }
}
