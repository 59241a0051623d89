use std::sync::OnceLock;

use proptest::prelude::*;

use stochwave::config::{Pipeline, RunConfig};
use stochwave::expansion::ExpansionContext;
use stochwave::model::Interpretation;
use stochwave::{Grid, Profile};

fn ctx() -> &'static ExpansionContext {
    static CTX: OnceLock<ExpansionContext> = OnceLock::new();
    CTX.get_or_init(|| {
        let mut cfg = RunConfig::default();
        cfg.grid.points = 256;
        cfg.solver.k_max = 10;
        cfg.model.interpretation = Interpretation::Stratonovich;
        Pipeline::new(cfg).unwrap().expansion_at(0.3).unwrap().0
    })
}

fn bumps(grid: Grid, spec: &[(f64, f64, f64)]) -> Profile {
    Profile::from_fn(grid, 1, |_, x| {
        spec.iter().map(|(a, c, w)| a * (-(x - c).powi(2) / w).exp()).sum()
    })
}

fn bump_spec() -> impl Strategy<Value = Vec<(f64, f64, f64)>> {
    prop::collection::vec((-1.0..1.0f64, -25.0..25.0f64, 0.3..8.0f64), 1..5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn noise_images_are_orthogonal_to_psi(spec in bump_spec(), vspec in bump_spec()) {
        let c = ctx();
        let g = *c.base.grid();
        let (w, v) = (bumps(g, &spec), bumps(g, &vspec));
        let psi = c.psi();
        let scale = psi.norm() * (1.0 + w.norm()) * (1.0 + v.norm());
        prop_assert!(c.s_sigma0(&w).dot(psi).abs() <= 1e-10 * scale);
        prop_assert!(c.r2(&v).dot(psi).abs() <= 1e-10 * scale);
        prop_assert!(c.s1(&v, &w).unwrap().dot(psi).abs() <= 1e-10 * scale);
    }

    #[test]
    fn noise_operators_are_linear_in_the_increment(spec in bump_spec(), vspec in bump_spec(), k in -3.0..3.0f64) {
        let c = ctx();
        let g = *c.base.grid();
        let (w, v) = (bumps(g, &spec), bumps(g, &vspec));
        let kw = w.scaled(k);
        let tol = 1e-10 * (1.0 + k.abs()) * (1.0 + w.norm()) * (1.0 + v.norm());
        prop_assert!((c.b0(&kw) - k * c.b0(&w)).abs() <= tol);
        prop_assert!((c.b1(&v, &kw).unwrap() - k * c.b1(&v, &w).unwrap()).abs() <= tol);
        prop_assert!(c.s_sigma0(&kw).sub(&c.s_sigma0(&w).scaled(k)).max_abs() <= tol);
    }

    #[test]
    fn grid_shifts_compose(j in -20i32..20, spec in bump_spec()) {
        let g = Grid::dirichlet(40.0, 513).unwrap();
        let v = bumps(g, &spec);
        let s = j as f64 * g.dx();
        let back = v.shift(s).unwrap().shift(-s).unwrap();
        let n = g.len();
        let m = j.unsigned_abs() as usize;
        for i in m..n - m {
            prop_assert!((back.values()[i] - v.values()[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn shift_keeps_constants(level in -2.0..2.0f64, s in -5.0..5.0f64) {
        let g = Grid::dirichlet(10.0, 128).unwrap();
        let v = Profile::from_fn(g, 2, |_, _| level);
        let sv = v.shift(s).unwrap();
        prop_assert!(sv.values().iter().all(|x| (x - level).abs() <= 1e-14 * (1.0 + level.abs())));
    }

    #[test]
    fn config_round_trips(points in 64usize..4096, seed in 0u64..1000, a in 0.05..0.95f64, t_end in 0.5..50.0f64) {
        let mut cfg = RunConfig::default();
        cfg.grid.points = points;
        cfg.ensemble.seed = seed;
        cfg.model.a = a;
        cfg.simulation.t_end = t_end;
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.hash(), cfg.hash());
    }
}
