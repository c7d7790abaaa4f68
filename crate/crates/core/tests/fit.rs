use specscale::data::Regime;
use specscale::fit::{
    effect_sizes, exponent_asymmetry, fit_power_law, layerwise_summary, ArchitecturePair, FitGrid, GridCell, GridKey,
    Metric, RegimeLabel,
};
use specscale::linalg::Rng;

fn widths(rng: &mut Rng) -> Vec<f64> {
    let n = 2 + rng.below(9);
    let mut d: Vec<f64> = Vec::new();
    while d.len() < n {
        let w = (1 + rng.below(4096)) as f64;
        if !d.contains(&w) {
            d.push(w);
        }
    }
    d
}

#[test]
fn exact_power_laws_are_recovered() {
    let mut rng = Rng::new(1);
    for _ in 0..100 {
        let beta = 4.0 * rng.uniform() - 2.0;
        let c = 6.0 * rng.uniform() - 3.0;
        let pts: Vec<(f64, f64)> = widths(&mut rng).into_iter().map(|d| (d, c.exp() * d.powf(beta))).collect();
        let fit = fit_power_law(&pts).unwrap();
        assert!((fit.beta - beta).abs() < 1e-9, "{} vs {beta}", fit.beta);
        assert!((fit.intercept - c).abs() < 1e-8);
        assert!(fit.r2 > 1.0 - 1e-12);
        assert_eq!(fit.n_points, pts.len());
    }
}

#[test]
fn noisy_power_laws_are_mostly_recovered() {
    let mut rng = Rng::new(2);
    let grid: Vec<f64> = (0..8).map(|i| 2f64.powi(i)).collect();
    let mut hits = 0;
    for _ in 0..100 {
        let beta = 2.0 * rng.uniform() - 0.5;
        let pts: Vec<(f64, f64)> = grid.iter().map(|&d| (d, 3.0 * d.powf(beta) * (0.05 * rng.normal()).exp())).collect();
        let fit = fit_power_law(&pts).unwrap();
        hits += ((fit.beta - beta).abs() < 0.1) as usize;
        assert!(fit.stderr > 0.0);
    }
    assert!(hits >= 95, "{hits}/100");
}

#[test]
fn slope_standard_error_matches_closed_form() {
    let pts = [(1.0, 1.0), (2.0, 2.5), (4.0, 3.0), (8.0, 9.0)];
    let fit = fit_power_law(&pts).unwrap();
    let xs: Vec<f64> = pts.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / 4.0;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sse: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - fit.intercept - fit.beta * x).powi(2)).sum();
    assert!((fit.stderr - (sse / 2.0 / sxx).sqrt()).abs() < 1e-14);
}

#[test]
fn reference_arithmetic() {
    let soft = fit_power_law(&[(1.0, 1.0), (2.0, 2f64.powf(0.66))]).unwrap();
    let hard = fit_power_law(&[(1.0, 1.0), (2.0, 2f64.powf(0.29))]).unwrap();
    assert!((exponent_asymmetry(&soft, &hard) - 0.37).abs() < 1e-12);

    // Δβ* of 0.330 under the reference architecture and 0.636 under the
    // variant gives an interaction of +0.306.
    let mut grid = FitGrid::new();
    let key = |o: &str, a: &str| GridKey::new(o, a, RegimeLabel::Regime(Regime::Head), Metric::HardPre);
    let cell = |beta| GridCell { beta, r2: 1.0, stderr: 0.0 };
    grid.insert(key("adamw", "12h"), cell(0.2));
    grid.insert(key("muon", "12h"), cell(0.2 + 0.330));
    grid.insert(key("adamw", "6h"), cell(0.1));
    grid.insert(key("muon", "6h"), cell(0.1 + 0.636));
    let pair = ArchitecturePair { reference: "12h".into(), variant: "6h".into() };
    let fx = effect_sizes(&grid, Some(&pair)).unwrap();
    assert_eq!(fx.interactions.len(), 1);
    assert!((fx.interactions[0].i_star - 0.306).abs() < 1e-12);
}

fn random_grid(rng: &mut Rng) -> FitGrid {
    let mut grid = FitGrid::new();
    for opt in ["adamw", "muon", "normuon", "dion_1_16"] {
        for arch in ["2h", "4h"] {
            for regime in RegimeLabel::ALL {
                for metric in Metric::ALL {
                    let beta = 2.0 * rng.uniform() - 0.5;
                    grid.insert(GridKey::new(opt, arch, regime, metric), GridCell { beta, r2: rng.uniform(), stderr: 0.1 });
                }
            }
        }
    }
    grid
}

#[test]
fn optimizer_gain_dominates_every_optimizer() {
    let mut rng = Rng::new(3);
    for _ in 0..20 {
        let grid = random_grid(&mut rng);
        let fx = effect_sizes(&grid, None).unwrap();
        assert_eq!(fx.gains.len(), 2 * 4 * 4);
        for g in &fx.gains {
            assert!(g.delta_opt >= 0.0);
            for opt in grid.optimizers() {
                let b = grid.beta(&opt, &g.architecture, g.regime, g.metric).unwrap();
                assert!(g.delta_opt >= b - g.baseline_beta);
            }
            let best = grid.beta(&g.best_optimizer, &g.architecture, g.regime, g.metric).unwrap();
            assert_eq!(best - g.baseline_beta, g.delta_opt);
        }
    }
}

#[test]
fn architecture_rank_is_the_absolute_shift() {
    let mut rng = Rng::new(4);
    let grid = random_grid(&mut rng);
    let pair = ArchitecturePair { reference: "4h".into(), variant: "2h".into() };
    let fx = effect_sizes(&grid, Some(&pair)).unwrap();
    assert_eq!(fx.shifts.len(), 4 * 4 * 4);
    for s in &fx.shifts {
        assert_eq!(s.a_rank, s.delta_arch.abs());
        let expected = grid.beta(&s.optimizer, "2h", s.regime, s.metric).unwrap()
            - grid.beta(&s.optimizer, "4h", s.regime, s.metric).unwrap();
        assert_eq!(s.delta_arch, expected);
    }
    assert!(fx.missing.is_empty());
}

#[test]
fn identical_architectures_have_no_shift() {
    let mut grid = FitGrid::new();
    for arch in ["a", "b"] {
        for opt in ["adamw", "muon"] {
            let beta = if opt == "adamw" { 0.4 } else { 0.9 };
            grid.insert(GridKey::new(opt, arch, RegimeLabel::All, Metric::SoftPost), GridCell { beta, r2: 1.0, stderr: 0.0 });
        }
    }
    let pair = ArchitecturePair { reference: "a".into(), variant: "b".into() };
    let fx = effect_sizes(&grid, Some(&pair)).unwrap();
    assert!(fx.shifts.iter().all(|s| s.a_rank == 0.0 && s.delta_arch == 0.0));
    assert_eq!(fx.interactions[0].i_star, 0.0);
}

/// Linear-interpolation quantile by sorting.
fn quantile_oracle(values: &[f64], q: f64) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q * (s.len() - 1) as f64;
    let i = pos as usize;
    if i + 1 >= s.len() {
        return s[s.len() - 1];
    }
    s[i] + (pos - i as f64) * (s[i + 1] - s[i])
}

#[test]
fn layerwise_summary_matches_sort_oracle() {
    let mut rng = Rng::new(5);
    for _ in 0..50 {
        let betas: Vec<f64> = (0..12).map(|_| 2.0 * rng.normal()).collect();
        let s = layerwise_summary(&betas).unwrap();
        let (q1, med, q3) = (quantile_oracle(&betas, 0.25), quantile_oracle(&betas, 0.5), quantile_oracle(&betas, 0.75));
        assert!((s.q1 - q1).abs() < 1e-12);
        assert!((s.median - med).abs() < 1e-12);
        assert!((s.q3 - q3).abs() < 1e-12);
        assert!((s.iqr - (q3 - q1)).abs() < 1e-12);
        let pos = betas.iter().filter(|&&b| b > 0.0).count() as f64 / 12.0;
        assert_eq!(s.frac_positive, pos);
    }
    let even = layerwise_summary(&[-1.0, 1.0]).unwrap();
    assert_eq!((even.median, even.frac_positive), (0.0, 0.5));
}

#[test]
fn grid_csv_round_trips_bit_exactly() {
    let mut rng = Rng::new(6);
    let grid = random_grid(&mut rng);
    let csv = grid.to_csv();
    let back = FitGrid::from_csv(&csv).unwrap();
    assert_eq!(back.to_csv(), csv);
    for (k, c) in grid.iter() {
        assert_eq!(back.get(k).unwrap().beta.to_bits(), c.beta.to_bits());
    }
}
