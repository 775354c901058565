//! The finite-difference harness itself: it must flag wrong gradients,
//! accept right ones, and confirm that attention key biases get none.

use icode::diagnostics::{grad_check_module, grad_check_suite, key_bias_gradients, tiny_setup, FD_TOL};
use icode::encoders::FusionMode;
use icode::model::Model;
use icode::numkit::{
    check_param_grads_with, compare_with_numeric, finite_diff_check, Graph, ParamBuilder, ParamGroup, ParamStore, Rng,
    Stencil, Tensor,
};

fn cubic(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v * v).sum()
}

#[test]
fn harness_flags_a_doubled_gradient() {
    let x = [0.3, -1.2, 2.0, 0.7];
    let right: Vec<f64> = x.iter().map(|v| 3.0 * v * v).collect();
    let wrong: Vec<f64> = right.iter().map(|g| 2.0 * g).collect();
    let ok = compare_with_numeric(&right, |p| Ok(cubic(p)), &x, 1e-5).unwrap();
    assert!(ok.passes(FD_TOL), "{}", ok.max_rel_err);
    let bad = compare_with_numeric(&wrong, |p| Ok(cubic(p)), &x, 1e-5).unwrap();
    assert!((bad.max_rel_err - 0.5).abs() < 1e-6, "{}", bad.max_rel_err);
    assert!(!bad.passes(FD_TOL));
}

#[test]
fn harness_accepts_graph_gradients() {
    let x = Tensor::new(vec![2, 3], vec![0.1, -0.4, 0.9, 1.3, -2.0, 0.5]).unwrap();
    let c = finite_diff_check(
        |g, v| {
            let e = g.exp(v)?;
            let sq = g.mul(e, v)?;
            g.sum(sq)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(c.passes(1e-7), "{}", c.max_rel_err);
}

#[test]
fn fourth_order_stencil_beats_second_order() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = Rng::new(5);
    let id = ParamBuilder::new(&mut store, &mut rng, ParamGroup::Fusion)
        .normal("w", vec![6], 1.0, false)
        .unwrap();
    let loss = move |g: &mut Graph<'_, f64>| {
        let w = g.param(id)?;
        let e = g.exp(w)?;
        let s = g.softmax(e)?;
        let p = g.mul(s, w)?;
        g.sum(p)
    };
    let run = |store: &mut ParamStore<f64>, stencil| {
        let mut r = Rng::new(1);
        check_param_grads_with(store, &[id], 6, &mut r, 1e-2, stencil, loss).unwrap().max_rel_err
    };
    let two = run(&mut store, Stencil::Central2);
    let four = run(&mut store, Stencil::Central4);
    assert!(four < two / 10.0, "{four} vs {two}");
    assert!(four < FD_TOL);
}

#[test]
fn key_biases_receive_no_gradient() {
    for mode in [FusionMode::Merge, FusionMode::Co] {
        let r = key_bias_gradients(mode, 0).unwrap();
        assert!(r.params > 0 && r.coords > 0);
        assert!(r.max_analytic < 1e-12, "{mode:?}: {}", r.max_analytic);
        assert!(r.max_numeric < 1e-9, "{mode:?}: {}", r.max_numeric);
    }
}

#[test]
fn module_checks_pass_on_a_few_seeds() {
    for m in ["fusion-co", "contrastive", "temperature"] {
        let r = grad_check_module(m, 2).unwrap();
        assert!(r.passed, "{m}: {} at seed {} {:?}", r.max_rel_err, r.worst_seed, r.worst_pair);
        assert!(r.coords > 0);
    }
}

#[test]
fn unknown_module_is_an_error() {
    let err = grad_check_module("transformer", 1).unwrap_err();
    assert!(err.to_string().contains("transformer"));
    assert!(grad_check_suite(Some("nope"), 1).is_err());
}

#[test]
fn tiny_setup_is_consistent() {
    for mode in [FusionMode::Merge, FusionMode::Co] {
        let (cfg, synth) = tiny_setup(mode);
        synth.validate().unwrap();
        assert_eq!(cfg.fusion.mode, mode);
        assert!(Model::<f64>::new(&cfg, 0).is_ok());
    }
}
