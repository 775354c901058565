//! Every differentiable kernel against central finite differences (64-bit,
//! step 1e-5, rel. err < 1e-4) on 100 random cases.

use icode::numkit::{finite_diff_check, Graph, Rng, Tensor, Var};
use icode::Result;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;
const CASES: u64 = 100;

fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.normal()).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Scalar head `Σ w ⊙ y` with fixed random weights, so no output coordinate is
/// structurally invisible to the check (e.g. Σ of a softmax row).
fn project(g: &mut Graph<'static, f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = Rng::new(seed ^ 0xABCD);
    let w = random_tensor(&mut rng, g.shape(y));
    let w = g.constant(w)?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

/// Splits a flat leaf into consecutive pieces of the given shapes.
fn split(g: &mut Graph<'static, f64>, x: Var, shapes: &[&[usize]]) -> Result<Vec<Var>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for s in shapes {
        let n: usize = s.iter().product();
        let piece = g.slice(x, 0, offset, n)?;
        out.push(g.reshape(piece, s.to_vec())?);
        offset += n;
    }
    Ok(out)
}

fn total(shapes: &[&[usize]]) -> usize {
    shapes.iter().map(|s| s.iter().product::<usize>()).sum()
}

fn run_cases<F>(name: &str, shapes: &[&[usize]], f: F)
where
    F: Fn(&mut Graph<'static, f64>, &[Var], u64) -> Result<Var>,
{
    let n = total(shapes);
    let mut worst: f64 = 0.0;
    for case in 0..CASES {
        let mut rng = Rng::keyed(2024, &[case]);
        let x = random_tensor(&mut rng, &[n]);
        let check = finite_diff_check(
            |g, x| {
                let parts = split(g, x, shapes)?;
                let y = f(g, &parts, case)?;
                if g.shape(y).is_empty() {
                    Ok(y)
                } else {
                    project(g, y, case)
                }
            },
            &x,
            STEP,
        )
        .unwrap();
        worst = worst.max(check.max_rel_err);
        assert!(
            check.passes(TOL),
            "{name} case {case}: rel err {} at {} (analytic {}, numeric {})",
            check.max_rel_err,
            check.worst_index,
            check.analytic[check.worst_index],
            check.numeric[check.worst_index]
        );
    }
    eprintln!("{name}: worst rel err {worst:.2e}");
}

#[test]
fn matmul_grad() {
    run_cases("matmul", &[&[2, 3, 4], &[4, 5]], |g, p, _| g.matmul(p[0], p[1]));
}

#[test]
fn add_sub_mul_broadcast_grad() {
    run_cases("add", &[&[3, 4], &[4]], |g, p, _| g.add(p[0], p[1]));
    run_cases("sub", &[&[3, 4], &[3, 4]], |g, p, _| g.sub(p[0], p[1]));
    run_cases("mul", &[&[2, 3, 4], &[3, 4]], |g, p, _| g.mul(p[0], p[1]));
}

#[test]
fn scale_and_scale_by_grad() {
    run_cases("scale", &[&[5]], |g, p, _| g.scale(p[0], 1.7));
    run_cases("scale_by", &[&[4, 3], &[]], |g, p, _| g.scale_by(p[0], p[1]));
}

#[test]
fn exp_gelu_grad() {
    run_cases("exp", &[&[6]], |g, p, _| g.exp(p[0]));
    run_cases("gelu", &[&[3, 5]], |g, p, _| g.gelu(p[0]));
}

#[test]
fn softmax_grad() {
    run_cases("softmax", &[&[3, 5]], |g, p, _| g.softmax(p[0]));
    run_cases("softmax_axis0", &[&[4, 3]], |g, p, _| g.softmax_axis(p[0], 0));
}

#[test]
fn layer_norm_grad() {
    run_cases("layer_norm", &[&[3, 6], &[6], &[6]], |g, p, _| {
        g.layer_norm(p[0], p[1], p[2])
    });
}

#[test]
fn embedding_and_gather_grad() {
    run_cases("embedding", &[&[5, 3]], |g, p, _| {
        g.embedding(p[0], &[4, 0, 4, 2], &[2, 2])
    });
    run_cases("gather_rows", &[&[4, 3]], |g, p, _| {
        g.gather_rows(p[0], vec![3, 1, 1, 0, 2], vec![5, 3])
    });
    run_cases("transpose", &[&[3, 4]], |g, p, _| g.transpose(p[0]));
}

#[test]
fn concat_slice_reshape_grad() {
    run_cases("concat", &[&[2, 3, 4], &[2, 1, 4], &[2, 2, 4]], |g, p, _| {
        g.concat(&[p[0], p[1], p[2]], 1)
    });
    run_cases("slice", &[&[2, 5, 3]], |g, p, _| g.slice(p[0], 1, 1, 3));
    run_cases("reshape", &[&[2, 6]], |g, p, _| g.reshape(p[0], vec![3, 4]));
}

#[test]
fn reductions_grad() {
    run_cases("sum", &[&[7]], |g, p, _| {
        let sq = g.mul(p[0], p[0])?;
        g.sum(sq)
    });
    run_cases("mean", &[&[7]], |g, p, _| {
        let e = g.exp(p[0])?;
        g.mean(e)
    });
    let mask = [true, false, true, true, true, true, false, true];
    run_cases("mean_pool", &[&[2, 4, 3]], move |g, p, _| g.mean_pool(p[0], Some(&mask)));
}

#[test]
fn l2_normalize_grad() {
    run_cases("l2_normalize", &[&[3, 5]], |g, p, _| g.l2_normalize(p[0]));
}

#[test]
fn cross_entropy_grad() {
    run_cases("cross_entropy", &[&[4, 5]], |g, p, case| {
        let t = (case % 5) as usize;
        g.cross_entropy(p[0], &[0, 2, 3], &[t, (t + 1) % 5, 4])
    });
}

#[test]
fn attention_grad() {
    let mask = [true, true, false, true, true, true, true, false, false, true];
    run_cases("attention", &[&[2, 3, 4], &[2, 5, 4], &[2, 5, 4]], move |g, p, _| {
        g.attention(p[0], p[1], p[2], 2, Some(&mask))
    });
}

#[test]
fn replace_rows_grad() {
    run_cases("replace_rows", &[&[4, 3], &[3]], |g, p, _| {
        g.replace_rows(p[0], p[1], &[false, true, true, false])
    });
}
