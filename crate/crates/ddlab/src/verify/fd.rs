//! Central finite differences as an independent oracle for every backward
//! rule. All checks run in f64 with h = 1e-5.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Graph, TensorId};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

/// Central-difference gradient of `f` with respect to every element of
/// `params`.
pub fn numeric_grads(
    params: &[Vec<f64>],
    h: f64,
    mut f: impl FnMut(&[Vec<f64>]) -> f64,
) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(params.len());
    let mut work: Vec<Vec<f64>> = params.to_vec();
    for p in 0..params.len() {
        let mut g = vec![0.0; params[p].len()];
        for i in 0..params[p].len() {
            let orig = work[p][i];
            work[p][i] = orig + h;
            let hi = f(&work);
            work[p][i] = orig - h;
            let lo = f(&work);
            work[p][i] = orig;
            g[i] = (hi - lo) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// Max over elements of |a - n| / max(1, |a|, |n|).
pub fn max_rel_err(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        for (&x, &y) in a.iter().zip(n) {
            let denom = 1.0f64.max(x.abs()).max(y.abs());
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}

type OpBuilder = fn(&mut Graph<f64>, &[TensorId]) -> TensorId;

struct OpCase {
    name: &'static str,
    shapes: &'static [&'static [usize]],
    build: OpBuilder,
}

fn rand_data(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Gradient-check one op construction over several random seeds; returns the
/// worst relative error seen.
fn check_case(case: &OpCase, seeds: u64) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let datas: Vec<Vec<f64>> = case
            .shapes
            .iter()
            .map(|s| rand_data(&mut rng, s.iter().product()))
            .collect();

        // discover the output shape, then fix a random probe direction
        let out_len = {
            let mut g: Graph<f64> = Graph::new();
            let ids: Vec<TensorId> = datas
                .iter()
                .zip(case.shapes)
                .map(|(d, s)| g.param(d.clone(), s.to_vec()))
                .collect();
            let out = (case.build)(&mut g, &ids);
            g.value(out).len()
        };
        let probe = rand_data(&mut rng, out_len);

        let eval = |vals: &[Vec<f64>]| -> f64 {
            let mut g: Graph<f64> = Graph::new();
            let ids: Vec<TensorId> = vals
                .iter()
                .zip(case.shapes)
                .map(|(d, s)| g.param(d.clone(), s.to_vec()))
                .collect();
            let out = (case.build)(&mut g, &ids);
            let shape = g.shape(out).to_vec();
            let c = g.constant(probe.clone(), shape);
            let prod = g.mul(out, c).unwrap();
            let loss = g.sum_all(prod).unwrap();
            g.scalar_value(loss)
        };

        let mut g: Graph<f64> = Graph::new();
        let ids: Vec<TensorId> = datas
            .iter()
            .zip(case.shapes)
            .map(|(d, s)| g.param(d.clone(), s.to_vec()))
            .collect();
        let out = (case.build)(&mut g, &ids);
        let shape = g.shape(out).to_vec();
        let c = g.constant(probe.clone(), shape);
        let prod = g.mul(out, c).unwrap();
        let loss = g.sum_all(prod).unwrap();
        g.backward(loss).unwrap();
        let analytic: Vec<Vec<f64>> = ids
            .iter()
            .map(|&id| g.grad(id).map(|s| s.to_vec()).unwrap_or_default())
            .collect();

        let numeric = numeric_grads(&datas, FD_STEP, eval);
        let err = max_rel_err(&analytic, &numeric);
        worst = worst.max(err);
        if err > GRAD_TOL {
            return Err(format!(
                "op {} seed {seed}: rel err {err:.3e} exceeds {GRAD_TOL:.0e}",
                case.name
            ));
        }
    }
    Ok(worst)
}

const OP_CASES: &[OpCase] = &[
    OpCase {
        name: "matmul",
        shapes: &[&[3, 4], &[4, 2]],
        build: |g, ids| g.matmul(ids[0], ids[1]).unwrap(),
    },
    OpCase {
        name: "add",
        shapes: &[&[2, 3], &[2, 3]],
        build: |g, ids| g.add(ids[0], ids[1]).unwrap(),
    },
    OpCase {
        name: "sub",
        shapes: &[&[2, 3], &[2, 3]],
        build: |g, ids| g.sub(ids[0], ids[1]).unwrap(),
    },
    OpCase {
        name: "mul",
        shapes: &[&[2, 3], &[2, 3]],
        build: |g, ids| g.mul(ids[0], ids[1]).unwrap(),
    },
    OpCase {
        name: "add_bias",
        shapes: &[&[3, 4], &[4]],
        build: |g, ids| g.add_bias(ids[0], ids[1]).unwrap(),
    },
    OpCase {
        name: "mul_rows",
        shapes: &[&[3, 4], &[3]],
        build: |g, ids| g.mul_rows(ids[0], ids[1]).unwrap(),
    },
    OpCase {
        name: "scale",
        shapes: &[&[2, 5]],
        build: |g, ids| g.scale(ids[0], 0.37).unwrap(),
    },
    OpCase {
        name: "gelu",
        shapes: &[&[2, 5]],
        build: |g, ids| g.gelu(ids[0]).unwrap(),
    },
    OpCase {
        name: "layer_norm",
        shapes: &[&[3, 6], &[6], &[6]],
        build: |g, ids| g.layer_norm(ids[0], ids[1], ids[2]).unwrap(),
    },
    OpCase {
        name: "gather_rows",
        shapes: &[&[4, 3]],
        build: |g, ids| g.gather_rows(ids[0], &[2, 0, 2, 3, 2]).unwrap(),
    },
    OpCase {
        name: "reshape",
        shapes: &[&[2, 6]],
        build: |g, ids| g.reshape(ids[0], vec![3, 4]).unwrap(),
    },
    OpCase {
        name: "transpose",
        shapes: &[&[2, 5]],
        build: |g, ids| g.transpose(ids[0]).unwrap(),
    },
    OpCase {
        name: "concat_rows",
        shapes: &[&[2, 3], &[1, 3]],
        build: |g, ids| g.concat_rows(ids).unwrap(),
    },
    OpCase {
        name: "concat_cols",
        shapes: &[&[2, 3], &[2, 2]],
        build: |g, ids| g.concat_cols(ids).unwrap(),
    },
    OpCase {
        name: "slice_rows",
        shapes: &[&[4, 3]],
        build: |g, ids| g.slice_rows(ids[0], 1, 2).unwrap(),
    },
    OpCase {
        name: "slice_cols",
        shapes: &[&[3, 5]],
        build: |g, ids| g.slice_cols(ids[0], 1, 3).unwrap(),
    },
    OpCase {
        name: "softmax_rows",
        shapes: &[&[3, 4]],
        build: |g, ids| g.softmax_rows(ids[0]).unwrap(),
    },
    OpCase {
        name: "causal_mask+softmax",
        shapes: &[&[4, 4]],
        build: |g, ids| {
            let m = g.causal_mask(ids[0]).unwrap();
            g.softmax_rows(m).unwrap()
        },
    },
    OpCase {
        name: "rope",
        shapes: &[&[3, 4]],
        build: |g, ids| g.rope(ids[0], &[0, 5, -2], 10000.0).unwrap(),
    },
    OpCase {
        name: "sum_all",
        shapes: &[&[3, 3]],
        build: |g, ids| g.sum_all(ids[0]).unwrap(),
    },
    OpCase {
        name: "mean_all",
        shapes: &[&[3, 3]],
        build: |g, ids| g.mean_all(ids[0]).unwrap(),
    },
    OpCase {
        name: "xent_wsum",
        shapes: &[&[4, 5]],
        build: |g, ids| {
            g.xent_wsum(ids[0], &[1, 4, 0, 2], &[0.5, 0.0, 1.25, 0.25])
                .unwrap()
        },
    },
    OpCase {
        name: "softmax_cross_entropy",
        shapes: &[&[3, 4]],
        build: |g, ids| {
            g.softmax_cross_entropy(ids[0], &[3, 0, 1], None).unwrap()
        },
    },
];

/// Finite-difference check of every differentiable op over `seeds` seeds.
pub fn check_all_ops(seeds: u64) -> Result<String, String> {
    let mut worst: f64 = 0.0;
    let mut worst_op = "";
    for case in OP_CASES {
        let err = check_case(case, seeds)?;
        if err > worst {
            worst = err;
            worst_op = case.name;
        }
    }
    Ok(format!(
        "{} ops x {seeds} seeds, worst rel err {worst:.2e} ({worst_op})",
        OP_CASES.len()
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_matches_finite_differences() {
        check_all_ops(10).unwrap();
    }

    #[test]
    fn numeric_grads_on_square() {
        let g = numeric_grads(&[vec![3.0]], 1e-5, |p| p[0][0] * p[0][0]);
        assert!((g[0][0] - 6.0).abs() < 1e-6);
    }
}
