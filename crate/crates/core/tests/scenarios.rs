use std::sync::Arc;

use bilevel_core::critical::{eps_critical_check, tilt_genericity_experiment, vcrit_collect, IterateSummary, ScanOptions};
use bilevel_core::lld::{phi_k, prox_inverse};
use bilevel_core::problem::{linspace, LipschitzConstant, LowerObjective, UpperObjective};
use bilevel_core::solvers::{dpbg, smbg, SolverConfig};
use bilevel_core::{builtin_problem, BilevelProblem, Bounds};
use nalgebra::{DMatrix, DVector};

fn v(x: &[f64]) -> DVector<f64> {
    DVector::from_row_slice(x)
}

fn grid(lo: f64, hi: f64, count: usize) -> Vec<DVector<f64>> {
    linspace(lo, hi, count).into_iter().map(|t| v(&[t])).collect()
}

struct Flat;

impl LowerObjective for Flat {
    fn value(&self, _x: &DVector<f64>, _y: &DVector<f64>) -> f64 {
        1.0
    }
    fn grad_y(&self, _x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(y.len())
    }
    fn hess_yy(&self, _x: &DVector<f64>, y: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(y.len(), y.len())
    }
    fn hess_yx(&self, x: &DVector<f64>, y: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(y.len(), x.len())
    }
}

struct Zero;

impl UpperObjective for Zero {
    fn value(&self, _x: &DVector<f64>, _y: &DVector<f64>) -> f64 {
        0.0
    }
    fn gradient(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(x.len() + y.len())
    }
    fn hessian(&self, x: &DVector<f64>, y: &DVector<f64>) -> DMatrix<f64> {
        let d = x.len() + y.len();
        DMatrix::zeros(d, d)
    }
}

#[test]
fn prox_of_flat_lower_level_is_identity() {
    let p = BilevelProblem::new("flat", 1, 2, Arc::new(Zero), Arc::new(Flat), LipschitzConstant { value: 0.0, exact: true }, Bounds::cube(3, -1.0, 1.0));
    let u = v(&[0.3, -7.0]);
    assert_eq!(prox_inverse(&p, &v(&[0.0]), &u, 0.7, 1e-12, 10).unwrap(), u);
}

#[test]
fn smbg_ends_eps_critical_with_single_value() {
    let p = builtin_problem("quadratic_sc").unwrap();
    let cfg = SolverConfig { alpha_f: 0.1, alpha_g: 0.5, k: 20, iterations: 500, ..Default::default() };
    let t = smbg(&p, &cfg, &v(&[3.0]), &v(&[0.0]), None).unwrap();
    let last = t.last();
    assert!(eps_critical_check(&DVector::from_element(1, last.grad_x_norm), 1e-6));
    let summaries: Vec<IterateSummary> = t.records.iter().map(|r| IterateSummary { value: r.phi_k, grad_norm: r.grad_x_norm }).collect();
    let values = vcrit_collect(&summaries, 1e-6);
    assert_eq!(values.len(), 1);
    assert!(values[0].abs() <= 1e-6);
}

#[test]
fn dpbg_huber_escape_tracks_growing_argmin() {
    let p = builtin_problem("huber_escape").unwrap();
    let alpha_g = 0.04;
    let zs = linspace(-2.0, 12.0, 2801);
    let mut finals = Vec::new();
    for k in [5usize, 9, 13] {
        let cfg = SolverConfig { alpha_f: 0.05, alpha_g, k, iterations: 3000, kink_margin: 0.0, ..Default::default() };
        let t = dpbg(&p, &cfg, &v(&[0.0]), &v(&[0.5])).unwrap();
        let grid_argmin = zs
            .iter()
            .copied()
            .min_by(|a, b| phi_k(&p, &v(&[0.0]), &v(&[*a]), alpha_g, k).unwrap().total_cmp(&phi_k(&p, &v(&[0.0]), &v(&[*b]), alpha_g, k).unwrap()))
            .unwrap();
        let last = t.last();
        assert!(last.phi_k <= 1e-6, "k = {k}: {}", last.phi_k);
        assert!((last.companion[0] - grid_argmin).abs() <= 0.01, "k = {k}");
        finals.push(last.companion[0]);
    }
    assert!(finals.windows(2).all(|w| w[1] > w[0]), "{finals:?}");
}

#[test]
fn dpbg_huber_instability_lingers_on_plateau() {
    let p = builtin_problem("huber_instability").unwrap();
    let cfg = SolverConfig { alpha_f: 0.05, alpha_g: 0.1, k: 9, iterations: 3000, kink_margin: 0.0, ..Default::default() };
    let t = dpbg(&p, &cfg, &v(&[0.0]), &v(&[-1.5])).unwrap();
    let near = t.records.iter().filter(|r| (r.phi_k - 2.25).abs() <= 0.05).count();
    assert!(near as f64 >= 0.3 * t.records.len() as f64);
    // the iterate drifts toward the sharp region on the right
    assert!(t.last().companion[0] > t.records[0].companion[0]);
}

#[test]
fn pitchfork_tilts_are_generically_morse() {
    let p = builtin_problem("nonmorse_pitchfork").unwrap();
    let r = tilt_genericity_experiment(&p, 50, 0.1, &grid(-1.0, 1.0, 21), &p.y_box(), ScanOptions::default()).unwrap();
    assert!(r.success_fraction >= 0.95);
    assert!(!r.untilted.all_morse);
    assert!(r.tilts.iter().all(|t| t.tilt.norm() <= 0.1));
}
