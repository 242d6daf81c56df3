//! Randomized invariants across the geometry, grid, kinetics, solvers and
//! unfolding layers.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use thin_channels::geometry::{
    build_micro_geometry, build_reference_cell, to_f64, ChannelProfile, MicroGeometry, Region, Segment, Q,
};
use thin_channels::grid::{build_micro_grid, inner_product_leps, norm_leps, Field, MicroGrid};
use thin_channels::kinetics::{
    sample_micro_kinetics, InitialData, Kinetics, KineticsSpec, RateLaw, SpatialFactor,
};
use thin_channels::linsolve::{solve_spd, SolverOptions, TripletBuilder};
use thin_channels::macrosim::{MacroProblem, MacroSettings, MacroState};
use thin_channels::microsim::{DiffusionSpec, MicroProblem, MicroState};
use thin_channels::twoscale::{unfold, verify_identities, ErrorEvaluator, TwoScaleField};

const WIDTHS: [(i64, i64); 3] = [(1, 4), (1, 2), (3, 4)];

/// Three-segment profiles with breakpoints at `±b`.
fn profile_strategy() -> impl Strategy<Value = ChannelProfile> {
    (prop_oneof![Just(Q::new(1, 4)), Just(Q::new(1, 2))], 0..3usize, 0..3usize, 0..3usize).prop_map(
        |(b, a, c, d)| {
            let w = |i: usize| Q::new(WIDTHS[i].0, WIDTHS[i].1);
            ChannelProfile::new(vec![
                Segment::new(Q::from_integer(-1), -b, w(a)),
                Segment::new(-b, b, w(c)),
                Segment::new(b, Q::from_integer(1), w(d)),
            ])
            .unwrap()
        },
    )
}

fn eps_strategy() -> impl Strategy<Value = Q> {
    prop_oneof![Just(Q::new(1, 4)), Just(Q::new(1, 8)), Just(Q::new(1, 5))]
}

fn geometry(profile: &ChannelProfile, eps: Q) -> MicroGeometry {
    build_micro_geometry(eps, Q::from_integer(1), build_reference_cell(profile).unwrap()).unwrap()
}

fn micro(profile: &ChannelProfile, eps: Q, kin: Kinetics) -> MicroProblem {
    let geom = geometry(profile, eps);
    let k = profile.alignment() as usize;
    let segs = profile.segments().len();
    MicroProblem::new(
        geom,
        k,
        DiffusionSpec::uniform(1.0, 2.0, [0.5, 0.25], segs),
        kin,
        SolverOptions::default(),
    )
    .unwrap()
}

fn random_field(grid: &MicroGrid, rng: &mut ChaCha8Rng) -> Field {
    let g = grid.grid();
    Field::new(g, (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect(), 0.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn scaled_channel_area_is_cell_area(profile in profile_strategy(), eps in eps_strategy()) {
        let g = geometry(&profile, eps);
        prop_assert_eq!(g.channel_area() / eps, g.cell().area());
    }

    #[test]
    fn local_coordinates_round_trip(profile in profile_strategy(), eps in eps_strategy(), seed in any::<u64>()) {
        let g = geometry(&profile, eps);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = to_f64(eps);
        for _ in 0..200 {
            let x = (rng.random_range(0.0..1.0), rng.random_range(-e..e));
            let (k, y) = g.to_local(x);
            let back = g.from_local(k, y);
            prop_assert!((back.0 - x.0).abs() < 1e-14 && (back.1 - x.1).abs() < 1e-14);
            prop_assert!((0.0..=1.0).contains(&y.0) && (-1.0..=1.0).contains(&y.1));
        }
    }

    #[test]
    fn classifier_matches_rectangle_union(profile in profile_strategy(), eps in eps_strategy(), seed in any::<u64>()) {
        let g = geometry(&profile, eps);
        let rects = g.channel_rects();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = to_f64(eps);
        for _ in 0..10_000 {
            let x = (rng.random_range(0.0..1.0), rng.random_range(-1.0..1.0));
            let in_union = rects.iter().any(|r| r.contains_open(x));
            let expected = if x.1 > e {
                Some(Region::BulkPlus)
            } else if x.1 < -e {
                Some(Region::BulkMinus)
            } else if in_union {
                Some(Region::Channel)
            } else {
                None
            };
            let got = g.classify(x).filter(|r| *r != Region::Void);
            prop_assert_eq!(got, expected, "at {:?}", x);
        }
    }

    #[test]
    fn leps_cauchy_schwarz_and_channel_scaling(profile in profile_strategy(), eps in eps_strategy(), seed in any::<u64>()) {
        let g = geometry(&profile, eps);
        let grid = build_micro_grid(&g, profile.alignment() as usize).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = random_field(&grid, &mut rng);
        let v = random_field(&grid, &mut rng);
        let ip = inner_product_leps(&grid, &u, &v).unwrap();
        let bound = norm_leps(&grid, &u).unwrap() * norm_leps(&grid, &v).unwrap();
        prop_assert!(ip.abs() <= bound * (1.0 + 1e-14));

        let chan = |f: &Field| -> Field {
            let vals = grid
                .grid()
                .cells()
                .iter()
                .zip(f.values())
                .map(|(c, x)| if c.region == Region::Channel { *x } else { 0.0 })
                .collect();
            Field::new(grid.grid(), vals, 0.0).unwrap()
        };
        let (uc, vc) = (chan(&u), chan(&v));
        let plain: f64 = grid.grid().cells().iter().zip(uc.values().iter().zip(vc.values()))
            .map(|(c, (a, b))| c.volume() * a * b).sum();
        let scaled = inner_product_leps(&grid, &uc, &vc).unwrap();
        prop_assert!((scaled - plain / to_f64(eps)).abs() <= 1e-13 * scaled.abs().max(1e-300));
    }

    #[test]
    fn grid_construction_is_bitwise_deterministic(profile in profile_strategy(), eps in eps_strategy()) {
        let g = geometry(&profile, eps);
        let k = profile.alignment() as usize;
        let a = build_micro_grid(&g, k).unwrap();
        let b = build_micro_grid(&g, k).unwrap();
        prop_assert_eq!(a.grid().fingerprint(), b.grid().fingerprint());
        prop_assert_eq!(a.grid().cells(), b.grid().cells());
    }

    #[test]
    fn sampled_rates_commute_with_column_shift(profile in profile_strategy(), amp in -1.0f64..1.0, seed in any::<u64>()) {
        let eps = Q::new(1, 4);
        let g = geometry(&profile, eps);
        let k = profile.alignment() as usize;
        let grid = build_micro_grid(&g, k).unwrap();
        let mut kin = Kinetics::zero();
        kin.g = KineticsSpec::new(RateLaw::LinearDecay { lambda: 0.7 })
            .with_factor(SpatialFactor::Periodic { mean: 1.0, amplitude: amp });
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = random_field(&grid, &mut rng);
        // shift the channel values by one column
        let cols = grid.columns();
        let nref = grid.cell_grid().len();
        let mut shifted = u.values().to_vec();
        for col in 0..cols {
            for r in 0..nref {
                shifted[grid.channel_cell((col + 1) % cols, r)] = u.values()[grid.channel_cell(col, r)];
            }
        }
        let shifted = Field::new(grid.grid(), shifted, 0.0).unwrap();
        let a = sample_micro_kinetics(&kin, &grid, 0.0, &u).unwrap();
        let b = sample_micro_kinetics(&kin, &grid, 0.0, &shifted).unwrap();
        for col in 0..cols {
            for r in 0..nref {
                prop_assert_eq!(
                    a.values()[grid.channel_cell(col, r)],
                    b.values()[grid.channel_cell((col + 1) % cols, r)]
                );
            }
        }
    }

    #[test]
    fn declared_lipschitz_constants_certify(rate in 0.1f64..3.0, cap in 0.5f64..2.0, bound in 1.0f64..10.0,
                                            lambda in 0.0f64..2.0, kappa in 0.0f64..2.0, ext in -1.0f64..1.0) {
        let kin = Kinetics {
            f_plus: KineticsSpec::new(RateLaw::LogisticClamped { rate, capacity: cap, bound }),
            f_minus: KineticsSpec::new(RateLaw::Constant { value: ext }),
            g: KineticsSpec::new(RateLaw::LinearDecay { lambda }),
            h: KineticsSpec::new(RateLaw::Exchange { kappa, external: ext }),
        };
        prop_assert!(kin.certify(2.0 * bound, 1.0).is_ok());
    }

    #[test]
    fn solves_are_reproducible(n in 2usize..30, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = TripletBuilder::new(n);
        for i in 0..n {
            t.add(i, i, 1.0);
            for j in 0..i {
                if rng.random_bool(0.3) {
                    t.add_coupling(i, j, rng.random_range(0.1..1.0));
                }
            }
        }
        let a = t.build(true).unwrap();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x1 = solve_spd(&a, &b, None, SolverOptions::default()).unwrap();
        let x2 = solve_spd(&a, &b, None, SolverOptions::default()).unwrap();
        prop_assert_eq!(x1.x, x2.x);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn micro_constants_mass_and_comparison(profile in profile_strategy(), eps in eps_strategy(),
                                           c in -2.0f64..2.0, seed in any::<u64>()) {
        let p = micro(&profile, eps, Kinetics::zero());
        let dt = 0.01;
        let stepper = p.stepper(dt).unwrap();
        let g = p.grid.grid();

        let mut s = MicroState { step: 0, t: 0.0, u: Field::constant(g, c, 0.0) };
        for _ in 0..5 {
            s = stepper.step(&s).unwrap();
        }
        prop_assert!(s.u.values().iter().all(|&v| v == c));

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u0 = random_field(&p.grid, &mut rng);
        let (lo, hi) = u0.values().iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        let mut s = MicroState { step: 0, t: 0.0, u: u0 };
        for _ in 0..5 {
            let next = stepper.step(&s).unwrap();
            let r = stepper.mass_report(&s, &next).unwrap();
            prop_assert!(r.residual <= 1e-10 * r.before.abs().max(1.0));
            s = next;
            let tol = 1e-10;
            prop_assert!(s.u.values().iter().all(|&v| v >= lo - tol && v <= hi + tol));
        }
    }

    #[test]
    fn macro_constants_mass_and_definiteness(profile in profile_strategy(), nodes in 1usize..6,
                                             c in -2.0f64..2.0, seed in any::<u64>()) {
        let cell = build_reference_cell(&profile).unwrap();
        let m = profile.alignment() as usize;
        let segs = profile.segments().len();
        let p = MacroProblem::new(
            cell, 1.0, DiffusionSpec::uniform(1.0, 2.0, [0.5, 0.25], segs), Kinetics::zero(),
            MacroSettings::new(nodes, m),
        ).unwrap();
        p.check_trace_structure().unwrap();
        prop_assert!(p.stiffness.max_asymmetry() == 0.0);
        let stepper = p.stepper(0.01).unwrap();

        let mut s = p.initial_state(&InitialData::constant(c));
        for _ in 0..3 {
            s = stepper.step(&s).unwrap();
        }
        prop_assert!(s.x.iter().all(|&v| v == c));

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x: Vec<f64> = (0..p.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        p.equilibrate_traces(&mut x);
        let mut s = MacroState { step: 0, t: 0.0, x };
        for _ in 0..3 {
            let next = stepper.step(&s).unwrap();
            let (m0, m1) = (p.total_mass(&s.x), p.total_mass(&next.x));
            prop_assert!((m1 - m0).abs() <= 1e-10 * p.mass.iter().sum::<f64>());
            for j in 0..nodes {
                let (a, b) = p.balance_residual(&next, j);
                prop_assert!(a <= 1e-9 && b <= 1e-9);
            }
            s = next;
        }

        // Rayleigh quotients of the implicit operator
        let sys = stepper.system();
        for _ in 0..5 {
            let v: Vec<f64> = (0..p.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut av = vec![0.0; v.len()];
            sys.mul_vec(&v, &mut av);
            let q: f64 = v.iter().zip(&av).map(|(a, b)| a * b).sum();
            prop_assert!(q > 0.0);
        }
    }

    #[test]
    fn unfolding_identities_on_random_profiles(profile in profile_strategy(), eps in eps_strategy(), seed in any::<u64>()) {
        let g = geometry(&profile, eps);
        let grid = build_micro_grid(&g, profile.alignment() as usize).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = random_field(&grid, &mut rng);
        let w = random_field(&grid, &mut rng);
        let nref = grid.cell_grid().len();
        let cols = grid.columns();
        let phi = TwoScaleField::new(cols, nref, (0..cols * nref).map(|_| rng.random_range(-1.0..1.0)).collect(), 0.0).unwrap();
        let r = verify_identities(&grid, &v, &w, &phi).unwrap();
        prop_assert!(r.max() <= 1e-12, "{:?}", r);
    }

    #[test]
    fn error_against_own_unfolding_is_zero_and_relabeling_invariant(profile in profile_strategy(), seed in any::<u64>()) {
        let eps = Q::new(1, 4);
        let p = micro(&profile, eps, Kinetics::zero());
        let cell = build_reference_cell(&profile).unwrap();
        let m = profile.alignment() as usize;
        let segs = profile.segments().len();
        let diff = DiffusionSpec::uniform(1.0, 2.0, [0.5, 0.25], segs);
        let nodes = 8;
        let order: Vec<usize> = (0..nodes).rev().collect();
        let mp = MacroProblem::new(cell.clone(), 1.0, diff.clone(), Kinetics::zero(), MacroSettings::new(nodes, m)).unwrap();
        let mq = MacroProblem::with_order(cell, 1.0, diff, Kinetics::zero(), MacroSettings::new(nodes, m), &order).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = random_field(&p.grid, &mut rng);
        let tu = unfold(&p.grid, &u).unwrap();
        let bulk: Vec<f64> = (0..mp.layout.plus.len() + mp.layout.minus.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let build = |q: &MacroProblem| {
            let mut x = vec![0.0; q.len()];
            for j in 0..nodes {
                let r = q.cell_range(j);
                x[r].copy_from_slice(tu.column(j / 2));
            }
            let (pr, mr) = (q.plus_range(), q.minus_range());
            let np = pr.len();
            x[pr].copy_from_slice(&bulk[..np]);
            x[mr].copy_from_slice(&bulk[np..]);
            MacroState { step: 0, t: 0.0, x }
        };
        let ea = ErrorEvaluator::new(&p, &mp).unwrap().at(&u, &build(&mp)).unwrap();
        let eb = ErrorEvaluator::new(&p, &mq).unwrap().at(&u, &build(&mq)).unwrap();
        prop_assert_eq!(ea.chan, 0.0);
        prop_assert_eq!(ea.lateral, 0.0);
        prop_assert_eq!(ea, eb);
    }
}
