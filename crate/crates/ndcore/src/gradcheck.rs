//! Central finite-difference oracle for gradient verification, plus the
//! standard sweep over every differentiable op.
//!
//! The oracle only evaluates forward passes, so it is independent of the
//! reverse-mode implementation it is used to check.

use crate::array::DiffArray;
use crate::rng::Rng;
use crate::tape::{Pointwise, Reduce, Tape, Var, REINDEX_ZERO};

/// Gradient of a scalar function estimated by central differences.
pub fn central_diff<F>(mut f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = f(&probe);
        probe[i] = orig - step;
        let minus = f(&probe);
        probe[i] = orig;
        grad[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Worst-case relative disagreement, with denominator floored at 1 so that
/// near-zero gradients compare absolutely.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    a.iter()
        .zip(b)
        .map(|(ai, bi)| (ai - bi).abs() / ai.abs().max(bi.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Builds a scalar-valued graph from the bound input leaves.
pub type BuildFn = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;
/// Draws one input buffer for a shape.
pub type SampleFn = Box<dyn Fn(&mut Rng, &[usize]) -> Vec<f64>>;

pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub build: BuildFn,
    /// Input sampler; standard normal when absent.
    pub sample: Option<SampleFn>,
}

fn normal_values(rng: &mut Rng, shape: &[usize]) -> Vec<f64> {
    let n = shape.iter().product();
    let mut v = vec![0.0; n];
    rng.fill_normal(&mut v, 0.0, 1.0);
    v
}

/// Weighted sum against fixed pseudo-random coefficients so the
/// scalarization exercises every output component.
pub fn spread(tape: &mut Tape, x: Var) -> Var {
    let n = tape.value(x).numel();
    let shape = tape.value(x).shape().to_vec();
    let coefs: Vec<f64> = (0..n)
        .map(|i| 0.3 + 0.7 * ((i * 37 % 11) as f64) / 11.0)
        .collect();
    let c = tape.constant(coefs, shape).expect("coef shape");
    let w = tape.hadamard(x, c).expect("spread product");
    tape.reduce(w, Reduce::Sum, None).expect("spread sum")
}

/// Run reverse-mode gradients of a case against the central-difference
/// oracle over `instances` random draws. Returns the first failure.
pub fn run_case(case: &OpCase, instances: usize, seed: u64) -> Result<(), String> {
    let mut rng = Rng::new(seed);
    for inst in 0..instances {
        let inputs: Vec<Vec<f64>> = case
            .shapes
            .iter()
            .map(|s| match &case.sample {
                Some(f) => f(&mut rng, s),
                None => normal_values(&mut rng, s),
            })
            .collect();

        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(&case.shapes)
            .map(|(v, s)| {
                tape.leaf(
                    DiffArray::new(v.clone(), s.clone())
                        .expect("input shape")
                        .with_grad(),
                )
            })
            .collect();
        let loss = (case.build)(&mut tape, &vars);
        if tape.value(loss).numel() != 1 {
            return Err(format!("{}: loss not scalar", case.name));
        }
        tape.backward(loss).map_err(|e| format!("{}: {e}", case.name))?;

        for (k, var) in vars.iter().enumerate() {
            let analytic = tape
                .value(*var)
                .grad()
                .ok_or_else(|| format!("{}: missing gradient for input {k}", case.name))?
                .to_vec();
            let fd = central_diff(
                |probe| {
                    let mut t = Tape::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .zip(&case.shapes)
                        .enumerate()
                        .map(|(i, (v, s))| {
                            let vals = if i == k { probe.to_vec() } else { v.clone() };
                            t.leaf(DiffArray::new(vals, s.clone()).expect("probe shape"))
                        })
                        .collect();
                    let out = (case.build)(&mut t, &vs);
                    t.value(out).item().expect("scalar")
                },
                &inputs[k],
                1e-5,
            );
            let err = max_rel_err(&analytic, &fd);
            if err > 1e-5 {
                return Err(format!(
                    "{}: input {k} instance {inst}: rel err {err:.3e}",
                    case.name
                ));
            }
        }
    }
    Ok(())
}

/// One case per differentiable op the engine exposes.
pub fn standard_cases() -> Vec<OpCase> {
    let mut cases: Vec<OpCase> = Vec::new();

    cases.push(OpCase {
        name: "matmul",
        shapes: vec![vec![3, 4], vec![4, 2]],
        build: Box::new(|t, v| {
            let p = t.matmul(v[0], v[1]).unwrap();
            spread(t, p)
        }),
        sample: None,
    });
    cases.push(OpCase {
        name: "transpose",
        shapes: vec![vec![3, 5]],
        build: Box::new(|t, v| {
            let p = t.transpose(v[0]).unwrap();
            spread(t, p)
        }),
        sample: None,
    });
    cases.push(OpCase {
        name: "softmax_rows",
        shapes: vec![vec![4, 5]],
        build: Box::new(|t, v| {
            let s = t.softmax_rows(v[0]).unwrap();
            spread(t, s)
        }),
        sample: None,
    });
    cases.push(OpCase {
        name: "log_softmax_rows",
        shapes: vec![vec![3, 6]],
        build: Box::new(|t, v| {
            let s = t.log_softmax_rows(v[0]).unwrap();
            spread(t, s)
        }),
        sample: None,
    });
    cases.push(OpCase {
        name: "layer_norm",
        shapes: vec![vec![3, 6], vec![6], vec![6]],
        build: Box::new(|t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            spread(t, y)
        }),
        sample: None,
    });
    cases.push(OpCase {
        name: "hadamard",
        shapes: vec![vec![2, 7], vec![2, 7]],
        build: Box::new(|t, v| {
            let y = t.hadamard(v[0], v[1]).unwrap();
            spread(t, y)
        }),
        sample: None,
    });
    cases.push(OpCase {
        name: "add",
        shapes: vec![vec![9], vec![9]],
        build: Box::new(|t, v| {
            let y = t.add(v[0], v[1]).unwrap();
            spread(t, y)
        }),
        sample: None,
    });
    cases.push(OpCase {
        name: "add_row",
        shapes: vec![vec![4, 3], vec![3]],
        build: Box::new(|t, v| {
            let y = t.add_row(v[0], v[1]).unwrap();
            spread(t, y)
        }),
        sample: None,
    });

    for (name, kind) in [
        ("pointwise_sigmoid", Pointwise::Sigmoid),
        ("pointwise_exp", Pointwise::Exp),
        ("pointwise_negate", Pointwise::Negate),
        ("pointwise_scale", Pointwise::Scale(-1.7)),
        ("pointwise_gelu", Pointwise::Gelu),
    ] {
        cases.push(OpCase {
            name,
            shapes: vec![vec![8]],
            build: Box::new(move |t, v| {
                let y = t.pointwise(v[0], kind).unwrap();
                spread(t, y)
            }),
            sample: None,
        });
    }

    cases.push(OpCase {
        name: "pointwise_log",
        shapes: vec![vec![8]],
        build: Box::new(|t, v| {
            let y = t.pointwise(v[0], Pointwise::Log).unwrap();
            spread(t, y)
        }),
        sample: Some(Box::new(|rng, s| {
            (0..s.iter().product())
                .map(|_| rng.range(0.2, 3.0))
                .collect()
        })),
    });
    cases.push(OpCase {
        name: "pointwise_clamp",
        shapes: vec![vec![8]],
        build: Box::new(|t, v| {
            let y = t
                .pointwise(v[0], Pointwise::Clamp { lo: -10.0, hi: 10.0 })
                .unwrap();
            spread(t, y)
        }),
        sample: None,
    });

    for (name, kind, axis) in [
        ("reduce_sum_all", Reduce::Sum, None),
        ("reduce_mean_all", Reduce::Mean, None),
        ("reduce_sum_ax0", Reduce::Sum, Some(0)),
        ("reduce_mean_ax0", Reduce::Mean, Some(0)),
        ("reduce_sum_ax1", Reduce::Sum, Some(1)),
        ("reduce_mean_ax1", Reduce::Mean, Some(1)),
    ] {
        cases.push(OpCase {
            name,
            shapes: vec![vec![4, 3]],
            build: Box::new(move |t, v| {
                let y = t.reduce(v[0], kind, axis).unwrap();
                spread(t, y)
            }),
            sample: None,
        });
    }

    cases.push(OpCase {
        name: "reshape",
        shapes: vec![vec![3, 4]],
        build: Box::new(|t, v| {
            let y = t.reshape(v[0], vec![2, 6]).unwrap();
            spread(t, y)
        }),
        sample: None,
    });
    cases.push(OpCase {
        name: "reindex",
        shapes: vec![vec![6]],
        build: Box::new(|t, v| {
            let y = t
                .reindex(v[0], vec![5, 0, 0, 3, REINDEX_ZERO], vec![5])
                .unwrap();
            spread(t, y)
        }),
        sample: None,
    });
    // segment_max inputs spaced out so no two candidates sit within the
    // finite-difference step of each other.
    cases.push(OpCase {
        name: "segment_max",
        shapes: vec![vec![6]],
        build: Box::new(|t, v| {
            let y = t
                .segment_max(v[0], &[vec![0, 1, 2], vec![3, 4], vec![5]])
                .unwrap();
            spread(t, y)
        }),
        sample: Some(Box::new(|rng, s| {
            let n: usize = s.iter().product();
            let mut vals: Vec<f64> = (0..n).map(|_| rng.range(-1.0, 1.0)).collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let spaced: Vec<f64> = vals
                .iter()
                .enumerate()
                .map(|(i, v)| v + i as f64 * 0.01)
                .collect();
            let mut order: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                order.swap(i, rng.below(i + 1));
            }
            order.into_iter().map(|i| spaced[i]).collect()
        })),
    });

    cases
}
