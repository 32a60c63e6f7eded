//! Every tape op against central differences at random points.

use cir_core::autodiff::{Tape, Var};
use cir_core::gradcheck::{gradient_check, GradCheckOptions};
use cir_core::{Result, Tensor};
use proptest::prelude::*;

const TOL: f64 = 1e-4;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols)
        .prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn dims() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..5, 1usize..5, 1usize..5)
}

/// `Σ out ⊙ r` with a fixed pseudo-random `r`.
fn probe(tape: &mut Tape, out: Var) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let n: usize = shape.iter().product();
    let r: Vec<f64> = (0..n).map(|i| ((i as f64 + 1.0) * 0.7).sin()).collect();
    let rv = tape.constant(Tensor::new(shape, r)?);
    let m = tape.mul(out, rv)?;
    Ok(tape.sum(m))
}

fn check(f: impl Fn(&mut Tape, &[Var]) -> Result<Var>, mut params: Vec<Tensor>) -> f64 {
    gradient_check(f, &mut params, &GradCheckOptions::default())
        .unwrap()
        .max_rel_error
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_family((m, k, n) in dims(), seed in any::<u64>()) {
        let a = Tensor::new(vec![m, k], (0..m * k).map(|i| ((i as u64 ^ seed) % 97) as f64 / 50.0 - 1.0).collect()).unwrap();
        let b = Tensor::new(vec![k, n], (0..k * n).map(|i| ((i as u64 * 31 + seed) % 89) as f64 / 45.0 - 1.0).collect()).unwrap();
        let bt = Tensor::new(vec![n, k], b.data().to_vec()).unwrap();
        let at = Tensor::new(vec![k, m], a.data().to_vec()).unwrap();
        prop_assert!(check(|t, v| { let o = t.matmul(v[0], v[1])?; probe(t, o) }, vec![a.clone(), b.clone()]) < TOL, "gradient mismatch");
        prop_assert!(check(|t, v| { let o = t.matmul_nt(v[0], v[1])?; probe(t, o) }, vec![a.clone(), bt]) < TOL, "gradient mismatch");
        prop_assert!(check(|t, v| { let o = t.matmul_tn(v[0], v[1])?; probe(t, o) }, vec![at, b]) < TOL, "gradient mismatch");
    }

    #[test]
    fn elementwise(x in matrix(3, 4), y in matrix(3, 4), bias in matrix(1, 4)) {
        let bias = Tensor::vector(bias.into_data());
        prop_assert!(check(|t, v| { let o = t.add(v[0], v[1])?; probe(t, o) }, vec![x.clone(), y.clone()]) < TOL, "gradient mismatch");
        prop_assert!(check(|t, v| { let o = t.mul(v[0], v[1])?; probe(t, o) }, vec![x.clone(), y.clone()]) < TOL, "gradient mismatch");
        prop_assert!(check(|t, v| { let o = t.add_row(v[0], v[1])?; probe(t, o) }, vec![x.clone(), bias]) < TOL, "gradient mismatch");
        prop_assert!(check(|t, v| { let o = t.scale(v[0], -1.7); probe(t, o) }, vec![x.clone()]) < TOL, "gradient mismatch");
        prop_assert!(check(|t, v| { let o = t.sigmoid(v[0]); probe(t, o) }, vec![x.clone()]) < TOL, "gradient mismatch");
        prop_assert!(check(|t, v| { let o = t.gelu(v[0]); probe(t, o) }, vec![x.clone()]) < TOL, "gradient mismatch");
        prop_assert!(check(|t, v| Ok(t.sum(v[0])), vec![x]) < TOL, "gradient mismatch");
    }

    #[test]
    fn row_ops(x in matrix(3, 5), gamma in matrix(1, 5), beta in matrix(1, 5)) {
        let g = Tensor::vector(gamma.into_data());
        let b = Tensor::vector(beta.into_data());
        prop_assert!(check(|t, v| { let o = t.softmax_rows(v[0])?; probe(t, o) }, vec![x.clone()]) < TOL, "gradient mismatch");
        prop_assert!(check(|t, v| { let o = t.layer_norm(v[0], v[1], v[2])?; probe(t, o) }, vec![x.clone(), g, b]) < TOL, "gradient mismatch");
        prop_assert!(check(|t, v| { let o = t.mean_rows(v[0])?; probe(t, o) }, vec![x.clone()]) < TOL, "gradient mismatch");
        prop_assert!(check(|t, v| t.cross_entropy(v[0], &[4, 0, 2]), vec![x.clone()]) < TOL, "gradient mismatch");
        prop_assert!(check(|t, v| { let o = t.reshape(v[0], vec![5, 3])?; probe(t, o) }, vec![x]) < TOL, "gradient mismatch");
    }

    #[test]
    fn vector_ops(u in prop::collection::vec(-2.0f64..2.0, 2..8)) {
        let n = u.len();
        let u = Tensor::vector(u);
        let w = Tensor::vector((0..n).map(|i| (i as f64 * 1.3).cos()).collect());
        prop_assume!(cir_core::tensor::norm(u.data()) > 0.1);
        prop_assert!(check(|t, v| t.cosine(v[0], v[1]), vec![u.clone(), w.clone()]) < TOL, "gradient mismatch");
        prop_assert!(check(|t, v| t.dot(v[0], v[1]), vec![u.clone(), w.clone()]) < TOL, "gradient mismatch");
        prop_assert!(check(|t, v| {
            let a = t.dot(v[0], v[1])?;
            let b = t.cosine(v[0], v[1])?;
            let o = t.stack(&[a, b, a], vec![3])?;
            probe(t, o)
        }, vec![u, w]) < TOL, "gradient mismatch");
    }

    #[test]
    fn attention(q in matrix(4, 3), k in matrix(2, 3), v in matrix(2, 5)) {
        prop_assert!(check(|t, p| { let o = t.scaled_dot_attention(p[0], p[1], p[2])?; probe(t, o) }, vec![q, k, v]) < TOL, "gradient mismatch");
    }
}
