//! Property checks shared by the `invariants` and `acceptance` targets.
//! Each check returns `Err` with a description of the first violation.

#![allow(dead_code)]

use std::fs;

use particle_mne::bench::{aggregate, final_rows, run_plan, CellParams, ExperimentPlan};
use particle_mne::dynamics::initialize;
use particle_mne::games::{doublewell_df, doublewell_left_min, gradient_check, PolyParams};
use particle_mne::metrics::{gibbs_fixed_point, gibbs_fixed_point_from};
use particle_mne::{
    iwgf_step, lda_step, md_step, ni_estimate, ni_exact, ni_exact_bilinear, ni_exact_finite, run, wfr_step, Algo,
    AveragedMeasure, AveragingConfig, AveragingMode, DenseMatrix, DynamicsConfig, Game, GameConfig, GibbsConfig,
    Manifold, NiEstimatorConfig, NiValues, StepRule, WeightedEnsemble,
};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Check = fn() -> Result<(), String>;

/// Every invariant, by name.
pub const INVARIANTS: &[(&str, Check)] = &[
    ("manifold: retraction keeps membership", retraction_membership),
    ("manifold: tangent projection idempotent", projection_idempotent),
    ("manifold: geodesic distance is a metric", distance_is_metric),
    ("manifold: sphere tangent noise covariance", sphere_noise_covariance),
    ("games: seeded parameters reproducible", poly_params_reproducible),
    ("games: analytic gradients match finite differences", gradients_match_fd),
    ("games: poly smoothness bound", poly_smoothness_bound),
    ("ensemble: simplex after every operation", simplex_after_operations),
    ("ensemble: weights-only average order independent", average_order_independent),
    ("ensemble: mean embedding linear in weights", mean_embedding_linear),
    ("dynamics: steps keep membership and simplex", steps_keep_invariants),
    ("dynamics: md equals wfr without transport", md_equals_wfr),
    ("dynamics: iwgf equals noise-free lda", iwgf_equals_cold_lda),
    ("dynamics: runs deterministic under fixed seed", runs_deterministic),
    ("dynamics: doublewell descent stays in the left well", doublewell_descent_trapped),
    ("dynamics: weight update shift invariant", weight_update_shift_invariant),
    ("metrics: NI estimate is a lower bound", ni_estimate_lower_bound),
    ("metrics: exact bilinear NI is 2-Lipschitz", ni_bilinear_lipschitz),
    ("metrics: eps-NE implies NI <= 2 eps", eps_ne_bounds_ni),
    ("metrics: Gibbs residual and full support", gibbs_residual_and_support),
    ("bench: aggregates recompute from long rows", aggregates_recompute),
    ("bench: reruns are idempotent", reruns_idempotent),
];

fn runner(cases: u32) -> TestRunner {
    let cfg = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    let rng = TestRng::deterministic_rng(cfg.rng_algorithm);
    TestRunner::new_with_rng(cfg, rng)
}

fn prop<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    runner(cases).run(&strategy, test).map_err(|e| e.to_string())
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gaussian(r: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| scale * r.sample::<f64, _>(StandardNormal)).collect()
}

/// One of sphere, torus or box, chosen by `kind`.
pub fn manifold(kind: usize, dim: usize) -> Manifold {
    match kind % 3 {
        0 => Manifold::sphere(dim + 1).unwrap(),
        1 => Manifold::torus(dim, 1.0 + dim as f64 * 0.5).unwrap(),
        _ => Manifold::boxed((0..dim).map(|k| (-1.0 - k as f64, 2.0)).collect()).unwrap(),
    }
}

pub fn random_ensemble(m: &Manifold, n: usize, r: &mut ChaCha8Rng) -> WeightedEnsemble {
    let pos = (0..n).map(|_| m.sample_uniform(r).into_coords()).collect();
    let w: Vec<f64> = (0..n).map(|_| r.random::<f64>() + 1e-3).collect();
    WeightedEnsemble::from_parts(m.clone(), pos, &w).unwrap()
}

fn manifold_case() -> impl Strategy<Value = (usize, usize, u64)> {
    (0usize..3, 1usize..6, any::<u64>())
}

pub fn retraction_membership() -> Result<(), String> {
    prop(200, (manifold_case(), 0.0f64..10.0), |((kind, dim, seed), len)| {
        let m = manifold(kind, dim);
        let mut r = rng(seed);
        let x = m.sample_uniform(&mut r);
        let v = gaussian(&mut r, m.coord_dim(), len);
        let t = m.project_tangent(&x, &v).unwrap();
        let y = m.retract(&x, &t.coords).unwrap();
        prop_assert!(m.contains(y.coords()), "{} left by retraction: {:?}", m.name(), y.coords());
        Ok(())
    })
}

pub fn projection_idempotent() -> Result<(), String> {
    prop(200, manifold_case(), |(kind, dim, seed)| {
        let m = manifold(kind, dim);
        let mut r = rng(seed);
        let x = m.sample_uniform(&mut r);
        let v = gaussian(&mut r, m.coord_dim(), 3.0);
        let once = m.project_tangent(&x, &v).unwrap();
        let twice = m.project_tangent(&x, &once.coords).unwrap();
        for (a, b) in once.coords.iter().zip(&twice.coords) {
            prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
        Ok(())
    })
}

pub fn distance_is_metric() -> Result<(), String> {
    prop(300, manifold_case(), |(kind, dim, seed)| {
        let m = manifold(kind, dim);
        let mut r = rng(seed);
        let [a, b, c] = [0, 1, 2].map(|_| m.sample_uniform(&mut r).into_coords());
        let d = |u: &[f64], v: &[f64]| m.geodesic_distance(u, v);
        prop_assert!((d(&a, &b) - d(&b, &a)).abs() <= 1e-12);
        prop_assert!(d(&a, &a) <= 1e-7);
        prop_assert!(d(&a, &b) > 0.0);
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-9);
        Ok(())
    })
}

pub fn sphere_noise_covariance() -> Result<(), String> {
    let m = Manifold::sphere(3).unwrap();
    let mut r = rng(5);
    let x = m.sample_uniform(&mut r);
    let xs = x.coords().to_vec();
    let samples = 100_000;
    let mut mean = [0.0f64; 3];
    let mut cov = [[0.0; 3]; 3];
    for _ in 0..samples {
        let v = gaussian(&mut r, 3, 1.0);
        let t = m.project_tangent(&x, &v).unwrap();
        let t = &t.coords;
        for i in 0..3 {
            mean[i] += t[i] / samples as f64;
            for j in 0..3 {
                cov[i][j] += t[i] * t[j] / samples as f64;
            }
        }
    }
    for i in 0..3 {
        ensure(mean[i].abs() <= 0.02, || format!("mean[{i}] = {}", mean[i]))?;
        for j in 0..3 {
            let p = f64::from(u8::from(i == j)) - xs[i] * xs[j];
            ensure((cov[i][j] - p).abs() <= 0.02, || {
                format!("cov[{i}][{j}] = {} vs projector {p}", cov[i][j])
            })?;
        }
    }
    Ok(())
}

pub fn poly_params_reproducible() -> Result<(), String> {
    for seed in 0..5 {
        for cubic in [false, true] {
            let a = PolyParams::<f64>::generate(7, seed, cubic);
            let b = PolyParams::<f64>::generate(7, seed, cubic);
            ensure(a == b, || format!("seed {seed} regenerated differently"))?;
        }
    }
    Ok(())
}

/// The games covered by gradient checks.
pub fn fd_games() -> Vec<(String, Game)> {
    vec![
        ("poly_a d=10".into(), Game::poly_a(10, 1).unwrap()),
        ("poly_b d=10".into(), Game::poly_b(10, 2).unwrap()),
        ("bilinear S^2".into(), Game::bilinear(3).unwrap()),
        ("doublewell".into(), Game::doublewell(1.5).unwrap()),
    ]
}

pub fn gradients_match_fd() -> Result<(), String> {
    let mut games = fd_games();
    games.push(("torus_trig".into(), Game::torus_trig(1.0, 0.3, -0.2).unwrap()));
    for (name, g) in games {
        let rep = gradient_check(&g, 100, 1e-5, 11);
        ensure(rep.max_rel_err() <= 1e-5, || format!("{name}: relative error {:.3e}", rep.max_rel_err()))?;
    }
    Ok(())
}

pub fn poly_smoothness_bound() -> Result<(), String> {
    for g in [Game::poly_a(5, 3).unwrap(), Game::poly_b(5, 4).unwrap()] {
        let lip = g.lipschitz_estimate.ok_or("poly game without Lipschitz estimate")?;
        let mut r = rng(9);
        let (mut g1, mut g2) = (vec![0.0; 5], vec![0.0; 5]);
        for _ in 0..1000 {
            let [x, y, x2, y2] = [0, 1, 2, 3].map(|_| g.space_x.sample_uniform(&mut r).into_coords());
            g.grad_x_into(&x, &y, &mut g1);
            g.grad_x_into(&x2, &y2, &mut g2);
            let diff = g1.iter().zip(&g2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let dist = g.space_x.geodesic_distance(&x, &x2) + g.space_y.geodesic_distance(&y, &y2);
            ensure(diff <= lip * dist + 1e-12, || format!("{} {diff} > {lip}·{dist}", g.kind_name()))?;
        }
    }
    Ok(())
}

fn simplex_ok(w: &[f64]) -> Result<(), TestCaseError> {
    let s: f64 = w.iter().sum();
    prop_assert!((s - 1.0).abs() <= 1e-12, "sum {s}");
    prop_assert!(w.iter().all(|&v| v >= 0.0 && v.is_finite()));
    Ok(())
}

pub fn simplex_after_operations() -> Result<(), String> {
    let scores = prop::collection::vec(-1e3f64..1e3, 7);
    prop(200, (any::<u64>(), scores, 0.0f64..10.0), |(seed, scores, rate)| {
        let m = Manifold::sphere(3).unwrap();
        let mut r = rng(seed);
        let mut e = WeightedEnsemble::init_uniform(m.clone(), 7, &mut r).unwrap();
        simplex_ok(e.weights())?;
        e.multiplicative_update(&scores, rate).unwrap();
        simplex_ok(e.weights())?;
        let f = random_ensemble(&m, 4, &mut r);
        simplex_ok(f.weights())?;
        let mix = WeightedEnsemble::mixture(&[(&e, 0.3), (&f, 2.0)]).unwrap();
        simplex_ok(mix.weights())?;
        for mode in [AveragingMode::WeightsOnly, AveragingMode::Snapshot] {
            let mut avg = AveragedMeasure::new(AveragingConfig { mode, stride: 2 }).unwrap();
            for k in 0..5 {
                e.multiplicative_update(&scores, -0.1).unwrap();
                avg.update(&e, k).unwrap();
            }
            simplex_ok(avg.measure().unwrap().weights())?;
        }
        Ok(())
    })
}

pub fn average_order_independent() -> Result<(), String> {
    prop(100, (any::<u64>(), 2usize..8), |(seed, steps)| {
        let m = Manifold::torus(2, 1.0).unwrap();
        let mut r = rng(seed);
        let base = random_ensemble(&m, 5, &mut r);
        let seq: Vec<WeightedEnsemble> = (0..steps)
            .map(|_| {
                let w: Vec<f64> = (0..5).map(|_| r.random::<f64>() + 1e-3).collect();
                base.clone().with_weights(&w).unwrap()
            })
            .collect();
        let mean_of = |order: &[usize]| {
            let mut avg = AveragedMeasure::new(AveragingConfig::default()).unwrap();
            for (k, &i) in order.iter().enumerate() {
                avg.update(&seq[i], k).unwrap();
            }
            avg.mean_weights().to_vec()
        };
        let fwd: Vec<usize> = (0..steps).collect();
        let rev: Vec<usize> = (0..steps).rev().collect();
        for (a, b) in mean_of(&fwd).iter().zip(mean_of(&rev)) {
            prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
        Ok(())
    })
}

pub fn mean_embedding_linear() -> Result<(), String> {
    prop(200, (any::<u64>(), 0.0f64..=1.0), |(seed, alpha)| {
        let m = Manifold::sphere(4).unwrap();
        let mut r = rng(seed);
        let a = random_ensemble(&m, 6, &mut r);
        let w2: Vec<f64> = (0..6).map(|_| r.random::<f64>() + 1e-3).collect();
        let b = a.clone().with_weights(&w2).unwrap();
        let mix: Vec<f64> = a
            .weights()
            .iter()
            .zip(b.weights())
            .map(|(u, v)| alpha * u + (1.0 - alpha) * v)
            .collect();
        let c = a.clone().with_weights(&mix).unwrap();
        let (ma, mb, mc) = (a.mean_embedding(), b.mean_embedding(), c.mean_embedding());
        for k in 0..4 {
            let lin = alpha * ma[k] + (1.0 - alpha) * mb[k];
            prop_assert!((mc[k] - lin).abs() <= 1e-12, "{} vs {lin}", mc[k]);
        }
        Ok(())
    })
}

fn step_games() -> Vec<Game> {
    vec![
        Game::bilinear(3).unwrap(),
        Game::poly_a(3, 0).unwrap(),
        Game::poly_b(4, 1).unwrap(),
        Game::doublewell(1.5).unwrap(),
        Game::torus_trig(1.0, 0.5, 0.0).unwrap(),
    ]
}

pub fn steps_keep_invariants() -> Result<(), String> {
    prop(40, (any::<u64>(), 0usize..4, 0usize..5), |(seed, a, gi)| {
        let g = &step_games()[gi];
        let mut cfg = DynamicsConfig::new(Algo::ALL[a]);
        cfg.n = 9;
        cfg.seed = seed;
        cfg.eta = 0.1;
        cfg.eta_w = 0.5;
        let (mut ex, mut ey, mut streams) = initialize(g, &cfg).unwrap();
        let rule = StepRule::<f64>::from_config(&cfg);
        for _ in 0..30 {
            rule.step(&mut ex, &mut ey, g, Some(&mut streams)).unwrap();
            for e in [&ex, &ey] {
                prop_assert!(e.positions().all(|p| e.manifold().contains(p)));
                simplex_ok(e.weights())?;
            }
        }
        Ok(())
    })
}

pub fn md_equals_wfr() -> Result<(), String> {
    prop(50, (any::<u64>(), 0usize..5, 0.0f64..2.0), |(seed, gi, eta_w)| {
        let g = &step_games()[gi];
        let mut r = rng(seed);
        let x = random_ensemble(&g.space_x, 6, &mut r);
        let y = random_ensemble(&g.space_y, 5, &mut r);
        let (mut x1, mut y1, mut x2, mut y2) = (x.clone(), y.clone(), x, y);
        for _ in 0..5 {
            md_step(&mut x1, &mut y1, g, eta_w).unwrap();
            wfr_step(&mut x2, &mut y2, g, 0.0, eta_w).unwrap();
        }
        prop_assert!(x1.weights() == x2.weights() && y1.weights() == y2.weights());
        prop_assert!(x1.coords() == x2.coords() && y1.coords() == y2.coords());
        Ok(())
    })
}

pub fn iwgf_equals_cold_lda() -> Result<(), String> {
    prop(50, (any::<u64>(), 0usize..5, 0.0f64..0.2), |(seed, gi, eta)| {
        let g = &step_games()[gi];
        let mut cfg = DynamicsConfig::new(Algo::Iwgf);
        cfg.n = 7;
        cfg.seed = seed;
        let (x, y, mut streams) = initialize(g, &cfg).unwrap();
        let (mut x1, mut y1, mut x2, mut y2) = (x.clone(), y.clone(), x, y);
        for _ in 0..10 {
            iwgf_step(&mut x1, &mut y1, g, eta).unwrap();
            lda_step(&mut x2, &mut y2, g, eta, f64::INFINITY, &mut streams).unwrap();
        }
        prop_assert!(x1.coords() == x2.coords() && y1.coords() == y2.coords());
        Ok(())
    })
}

pub fn runs_deterministic() -> Result<(), String> {
    for algo in Algo::ALL {
        let g = Game::poly_a(3, 2).unwrap();
        let mut cfg = DynamicsConfig::new(algo);
        cfg.n = 10;
        cfg.iters = 60;
        cfg.ni_eval_every = 20;
        cfg.seed = 17;
        let est = NiEstimatorConfig {
            starts: 4,
            ascent_iters: 20,
            ..NiEstimatorConfig::default()
        };
        let hook = |cp: &particle_mne::Checkpoint<'_, f64>| {
            Ok(NiValues {
                estimate: ni_estimate(cp.game, cp.eval_x, cp.eval_y, &est)?.estimate,
                exact: None,
            })
        };
        let a = run(&g, &cfg, hook).map_err(|e| e.to_string())?;
        let b = run(&g, &cfg, hook).map_err(|e| e.to_string())?;
        let same = a.final_x.coords() == b.final_x.coords()
            && a.final_y.weights() == b.final_y.weights()
            && a.averaged_x.weights() == b.averaged_x.weights()
            && a.rows.iter().zip(&b.rows).all(|(u, v)| u.iter == v.iter && u.ni_estimate == v.ni_estimate);
        ensure(same, || format!("{algo}: two runs with one seed differ"))?;
    }
    Ok(())
}

pub fn doublewell_descent_trapped() -> Result<(), String> {
    let g = Game::doublewell(1.5).unwrap();
    let target = doublewell_left_min::<f64>();
    for eta in [0.01, 0.005] {
        let m = &g.space_x;
        let mut x = WeightedEnsemble::from_parts(m.clone(), vec![vec![-1.2]], &[1.0]).unwrap();
        let mut y = WeightedEnsemble::from_parts(m.clone(), vec![vec![0.7]], &[1.0]).unwrap();
        for k in 0..20_000 {
            iwgf_step(&mut x, &mut y, &g, eta).map_err(|e| e.to_string())?;
            let p = x.position(0)[0];
            ensure(p < 0.0, || format!("eta {eta}: crossed zero at step {k} ({p})"))?;
        }
        let p = x.position(0)[0];
        ensure(doublewell_df(p).abs() <= 1e-6, || format!("eta {eta}: |f'({p})| = {}", doublewell_df(p).abs()))?;
        ensure((p - target).abs() <= 1e-6, || format!("eta {eta}: ended at {p}, left minimum {target}"))?;
    }
    Ok(())
}

pub fn weight_update_shift_invariant() -> Result<(), String> {
    let scores = prop::collection::vec(-20.0f64..20.0, 8);
    prop(200, (scores, -1e3f64..1e3, -3.0f64..3.0), |(s, c, rate)| {
        let m = Manifold::torus(1, 1.0).unwrap();
        let mut r = rng(1);
        let base = random_ensemble(&m, 8, &mut r);
        let (mut a, mut b) = (base.clone(), base);
        let shifted: Vec<f64> = s.iter().map(|v| v + c).collect();
        a.multiplicative_update(&s, rate).unwrap();
        b.multiplicative_update(&shifted, rate).unwrap();
        for (u, v) in a.weights().iter().zip(b.weights()) {
            prop_assert!((u - v).abs() <= 1e-12, "{u} vs {v}");
        }
        Ok(())
    })
}

fn random_matrix(r: &mut ChaCha8Rng, p: usize, q: usize) -> DenseMatrix<f64> {
    DenseMatrix::from_row_major(p, q, gaussian(r, p * q, 1.0)).unwrap()
}

fn atom_ensemble(g: &Game, player: particle_mne::Player, w: &[f64]) -> WeightedEnsemble {
    WeightedEnsemble::from_parts(g.space(player).clone(), g.atoms(player).unwrap(), w).unwrap()
}

pub fn ni_estimate_lower_bound() -> Result<(), String> {
    let est = NiEstimatorConfig {
        starts: 30,
        ascent_iters: 200,
        ..NiEstimatorConfig::default()
    };
    let mut r = rng(21);
    for k in 0..50 {
        let (g, x, y) = if k % 2 == 0 {
            let g = Game::bilinear(2 + k % 4).unwrap();
            let x = random_ensemble(&g.space_x, 1 + k % 7, &mut r);
            let y = random_ensemble(&g.space_y, 1 + (k / 2) % 5, &mut r);
            (g, x, y)
        } else {
            let g = Game::matrix(random_matrix(&mut r, 2 + k % 3, 2 + (k / 3) % 3)).unwrap();
            let wx: Vec<f64> = (0..g.atoms(particle_mne::Player::X).unwrap().len()).map(|_| r.random()).collect();
            let wy: Vec<f64> = (0..g.atoms(particle_mne::Player::Y).unwrap().len()).map(|_| r.random()).collect();
            let x = atom_ensemble(&g, particle_mne::Player::X, &wx);
            let y = atom_ensemble(&g, particle_mne::Player::Y, &wy);
            (g, x, y)
        };
        let exact = ni_exact(&g, &x, &y).ok_or("no exact oracle")?;
        let e = ni_estimate(&g, &x, &y, &NiEstimatorConfig { seed: k as u64, ..est })
            .map_err(|e| e.to_string())?
            .estimate;
        ensure(exact - e >= -1e-9, || format!("case {k}: estimate {e} exceeds exact {exact}"))?;
    }
    Ok(())
}

pub fn ni_bilinear_lipschitz() -> Result<(), String> {
    let g = Game::bilinear(4).unwrap();
    let m = &g.space_x;
    let mut r = rng(31);
    for trial in 0..50 {
        let x = random_ensemble(m, 8, &mut r);
        let y = random_ensemble(m, 6, &mut r);
        let base = ni_exact_bilinear(&g, &x, &y).map_err(|e| e.to_string())?;
        for radius in [1e-3, 1e-2] {
            let jiggle = |e: &WeightedEnsemble, r: &mut ChaCha8Rng| {
                let pos = e
                    .positions()
                    .map(|p| {
                        let pt = m.point(p.to_vec()).unwrap();
                        let v = m.project_tangent(&pt, &gaussian(r, 4, 1.0)).unwrap();
                        let len = v.coords.iter().map(|c| c * c).sum::<f64>().sqrt();
                        let step: Vec<f64> = v.coords.iter().map(|c| c * radius / len).collect();
                        m.retract(&pt, &step).unwrap().into_coords()
                    })
                    .collect();
                WeightedEnsemble::from_parts(m.clone(), pos, e.weights()).unwrap()
            };
            let (x2, y2) = (jiggle(&x, &mut r), jiggle(&y, &mut r));
            let moved = x
                .positions()
                .zip(x2.positions())
                .chain(y.positions().zip(y2.positions()))
                .map(|(a, b)| m.geodesic_distance(a, b))
                .fold(0.0, f64::max);
            ensure(moved <= radius * (1.0 + 1e-9), || format!("perturbation {moved} > {radius}"))?;
            let shifted = ni_exact_bilinear(&g, &x2, &y2).map_err(|e| e.to_string())?;
            ensure((shifted - base).abs() <= 2.0 * radius + 1e-12, || {
                format!("trial {trial}: |ΔNI| = {} > 2·{radius}", (shifted - base).abs())
            })?;
        }
    }
    Ok(())
}

pub fn eps_ne_bounds_ni() -> Result<(), String> {
    let mut r = rng(41);
    for trial in 0..500 {
        let a = random_matrix(&mut r, 3, 3);
        let mut draw = || -> Vec<f64> {
            let v: Vec<f64> = (0..3).map(|_| r.random::<f64>().powi(3)).collect();
            let s: f64 = v.iter().sum();
            v.iter().map(|x| x / s).collect()
        };
        let (wx, wy) = (draw(), draw());
        let ay = a.matvec(&wy);
        let atx = a.matvec_transposed(&wx);
        let value: f64 = wx.iter().zip(&ay).map(|(p, q)| p * q).sum();
        let gap_x = value - ay.iter().copied().fold(f64::INFINITY, f64::min);
        let gap_y = atx.iter().copied().fold(f64::NEG_INFINITY, f64::max) - value;
        let eps = gap_x.max(gap_y);
        let ni = ni_exact_finite(&wx, &wy, &a).map_err(|e| e.to_string())?;
        ensure(ni <= 2.0 * eps + 1e-12, || format!("trial {trial}: NI {ni} > 2·{eps}"))?;
    }
    Ok(())
}

pub fn gibbs_residual_and_support() -> Result<(), String> {
    let cases = [
        (Game::torus_trig(1.0, 0.0, 0.0).unwrap(), 5.0, 0.5),
        (Game::torus_trig(1.0, 0.4, 0.3).unwrap(), 2.0, 0.5),
        (Game::torus_trig(0.5, 1.0, -0.5).unwrap(), 3.0, 0.3),
    ];
    for (g, beta, damping) in cases {
        let cfg = GibbsConfig {
            damping,
            ..GibbsConfig::new(beta)
        };
        let grid = gibbs_fixed_point(&g, &cfg).map_err(|e| e.to_string())?;
        ensure(grid.converged, || format!("β={beta}: residual {:.3e}", grid.residual))?;
        ensure(grid.rho_x.iter().chain(&grid.rho_y).all(|&p| p > 0.0), || {
            format!("β={beta}: density has an empty bin")
        })?;
        // Plugging the output back in moves each density by at most tol.
        let undamped = GibbsConfig {
            damping: 1.0,
            max_iters: 1,
            tol: 0.0,
            ..cfg
        };
        let again = gibbs_fixed_point_from(&g, &undamped, Some((grid.rho_x.clone(), grid.rho_y.clone())))
            .map_err(|e| e.to_string())?;
        let l1 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| (u - v).abs()).sum::<f64>();
        let moved = l1(&again.rho_x, &grid.rho_x).max(l1(&again.rho_y, &grid.rho_y));
        ensure(moved <= cfg.tol, || format!("β={beta}: re-applied map moved {moved:.3e}"))?;
    }
    Ok(())
}

fn tiny_plan() -> ExperimentPlan {
    ExperimentPlan {
        name: "invariant".into(),
        game: GameConfig::PolyA { dim: 2, seed: 0 },
        dims: vec![2, 3],
        algos: vec![Algo::Wfr, Algo::Md, Algo::Lda],
        n: vec![4, 6],
        iters: 20,
        repeats: 3,
        seed_offset: 5,
        params: CellParams {
            ni_eval_every: 10,
            ..CellParams::default()
        },
        overrides: Default::default(),
        estimator: NiEstimatorConfig {
            starts: 3,
            ascent_iters: 10,
            ..NiEstimatorConfig::default()
        },
        output_dir: None,
    }
}

pub fn aggregates_recompute() -> Result<(), String> {
    let res = run_plan::<f64>(&tiny_plan(), None).map_err(|e| e.to_string())?;
    let finals = final_rows(&res.long);
    ensure(res.aggregate == aggregate(&res.long), || "aggregate is not a function of the long rows".into())?;
    for agg in &res.aggregate {
        let v: Vec<f64> = finals
            .iter()
            .filter(|r| r.algo == agg.algo && r.dim == agg.dim && r.n == agg.n)
            .map(|r| r.ni)
            .collect();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        ensure(agg.count == v.len(), || format!("{agg:?}: count {}", v.len()))?;
        ensure((agg.mean_ni - mean).abs() <= 1e-12 * mean.abs().max(1.0), || format!("{agg:?}: mean {mean}"))?;
        ensure((agg.std_ni - std).abs() <= 1e-12 * std.max(1.0), || format!("{agg:?}: std {std}"))?;
    }
    Ok(())
}

pub fn reruns_idempotent() -> Result<(), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let plan = tiny_plan();
    let first = run_plan::<f64>(&plan, Some(dir.path())).map_err(|e| e.to_string())?;
    let long1 = fs::read(dir.path().join("sweep_long.csv")).map_err(|e| e.to_string())?;
    let cells1 = fs::read_dir(dir.path().join("cells")).map_err(|e| e.to_string())?.count();
    let second = run_plan::<f64>(&plan, Some(dir.path())).map_err(|e| e.to_string())?;
    let long2 = fs::read(dir.path().join("sweep_long.csv")).map_err(|e| e.to_string())?;
    let cells2 = fs::read_dir(dir.path().join("cells")).map_err(|e| e.to_string())?.count();
    ensure(long1 == long2, || "sweep_long.csv changed on rerun".into())?;
    ensure(first.long.len() == second.long.len(), || "rerun appended rows".into())?;
    ensure(cells1 == cells2 && cells1 == plan.cells().len(), || format!("{cells1} then {cells2} cell files"))?;
    Ok(())
}
