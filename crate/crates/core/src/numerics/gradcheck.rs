//! Central finite-difference gradient checks.
//!
//! The checker only evaluates forward values, so it is independent of every
//! backward rule it audits. A non-scalar output is reduced to a scalar through a
//! fixed random projection so that every output element carries a distinct
//! upstream gradient.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::rng::DetRng;
use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Step used for central differences (double precision).
pub const FD_STEP: f64 = 1e-5;
/// Pass threshold on the per-element relative error.
pub const FD_TOLERANCE: f64 = 1e-4;
/// Denominator floor for the relative error so that near-zero gradients are
/// compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// Relative error `|a − n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

pub type Builder = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Largest relative error between the tape gradient and central differences
/// over every element of every input.
pub fn max_rel_error(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>, rng: &mut DetRng) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let proj = Tensor::from_fn(tape.shape(out), |_| StandardNormal.sample(rng));
    let pv = tape.constant(proj.clone());
    let loss = tape.dot(out, pv)?;
    let grads = tape.backward(loss)?;

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.value(o).data().iter().zip(proj.data()).map(|(a, b)| a * b).sum())
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]);
        for j in 0..input.numel() {
            let mut plus = input.data().to_vec();
            plus[j] += FD_STEP;
            work[i] = Tensor::new(input.shape(), plus)?;
            let fp = eval(&work)?;
            let mut minus = input.data().to_vec();
            minus[j] -= FD_STEP;
            work[i] = Tensor::new(input.shape(), minus)?;
            let fm = eval(&work)?;
            work[i] = input.clone();
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    Ok(worst)
}

/// One differentiable op with a generator of random, kink-free instances.
pub struct OpCase {
    pub name: &'static str,
    pub make: fn(&mut DetRng) -> (Vec<Tensor>, Builder),
}

fn randn(shape: &[usize], rng: &mut DetRng) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

/// Normal samples kept at least `gap` away from every point in `kinks`.
fn randn_avoiding(shape: &[usize], kinks: &[f64], gap: f64, rng: &mut DetRng) -> Tensor {
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = StandardNormal.sample(rng);
        if kinks.iter().all(|k| (v - k).abs() > gap) {
            break v;
        }
    })
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut DetRng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn small_shape(rng: &mut DetRng) -> Vec<usize> {
    let rank = rng.random_range(1..=3);
    (0..rank).map(|_| rng.random_range(1..=4)).collect()
}

/// Values along `axis` pairwise separated by more than `gap`, so the max is never tied.
fn separated(shape: &[usize], axis: usize, gap: f64, rng: &mut DetRng) -> Tensor {
    loop {
        let t = randn(shape, rng);
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = shape[axis];
        let ok = (0..outer).all(|o| {
            (0..inner).all(|i| {
                let col: Vec<f64> = (0..len).map(|a| t.data()[(o * len + a) * inner + i]).collect();
                col.iter().enumerate().all(|(x, &u)| col.iter().skip(x + 1).all(|&v| (u - v).abs() > gap))
            })
        });
        if ok {
            return t;
        }
    }
}

/// Every differentiable op on the tape.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "add",
            make: |rng| {
                let s = small_shape(rng);
                (vec![randn(&s, rng), randn(&s, rng)], Box::new(|t, v| t.add(v[0], v[1])))
            },
        },
        OpCase {
            name: "sub",
            make: |rng| {
                let s = small_shape(rng);
                (vec![randn(&s, rng), randn(&s, rng)], Box::new(|t, v| t.sub(v[0], v[1])))
            },
        },
        OpCase {
            name: "mul",
            make: |rng| {
                let s = small_shape(rng);
                (vec![randn(&s, rng), randn(&s, rng)], Box::new(|t, v| t.mul(v[0], v[1])))
            },
        },
        OpCase {
            name: "affine",
            make: |rng| {
                let s = small_shape(rng);
                let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0));
                (vec![randn(&s, rng)], Box::new(move |t, v| t.affine(v[0], a, b)))
            },
        },
        OpCase {
            name: "broadcast",
            make: |rng| {
                let (m, n, k) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
                if rng.random_bool(0.5) {
                    (vec![randn(&[1, n], rng)], Box::new(move |t, v| t.broadcast(v[0], &[m, n])))
                } else {
                    (vec![randn(&[n, 1], rng)], Box::new(move |t, v| t.broadcast(v[0], &[k, n, m])))
                }
            },
        },
        OpCase {
            name: "matmul",
            make: |rng| {
                let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
                let (a_t, b_t) = (rng.random_bool(0.5), rng.random_bool(0.5));
                let a = randn(&if a_t { [k, m] } else { [m, k] }, rng);
                let b = randn(&if b_t { [n, k] } else { [k, n] }, rng);
                (vec![a, b], Box::new(move |t, v| t.matmul_t(v[0], v[1], a_t, b_t)))
            },
        },
        OpCase {
            name: "batch_matmul",
            make: |rng| {
                let bs = rng.random_range(1..4);
                let (m, k, n) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
                let (a_t, b_t) = (rng.random_bool(0.5), rng.random_bool(0.5));
                let a = randn(&if a_t { [bs, k, m] } else { [bs, m, k] }, rng);
                let b = randn(&if b_t { [bs, n, k] } else { [bs, k, n] }, rng);
                (vec![a, b], Box::new(move |t, v| t.batch_matmul(v[0], v[1], a_t, b_t)))
            },
        },
        OpCase {
            name: "linear",
            make: |rng| {
                let (n, i, o) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
                let x = randn(&[n, i], rng);
                let w = randn(&[o, i], rng);
                if rng.random_bool(0.5) {
                    (vec![x, w, randn(&[o], rng)], Box::new(|t, v| t.linear(v[0], v[1], Some(v[2]))))
                } else {
                    (vec![x, w], Box::new(|t, v| t.linear(v[0], v[1], None)))
                }
            },
        },
        OpCase {
            name: "conv2d",
            make: |rng| {
                let c = rng.random_range(1..=2);
                let o = rng.random_range(1..=2);
                let k: usize = [1, 3, 3, 5][rng.random_range(0..4)];
                let stride = rng.random_range(1..=2);
                let pad = rng.random_range(0..=k / 2);
                let lo = k.saturating_sub(2 * pad).max(1);
                let h = rng.random_range(lo..lo + 4);
                let w = rng.random_range(lo..lo + 4);
                let x = randn(&[c, h, w], rng);
                let wt = randn(&[o, c, k, k], rng);
                let b = randn(&[o], rng);
                (vec![x, wt, b], Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad)))
            },
        },
        OpCase {
            name: "relu",
            make: |rng| {
                let s = small_shape(rng);
                (vec![randn_avoiding(&s, &[0.0], 1e-3, rng)], Box::new(|t, v| t.relu(v[0])))
            },
        },
        OpCase {
            name: "exp",
            make: |rng| {
                let s = small_shape(rng);
                (vec![uniform(&s, -2.0, 2.0, rng)], Box::new(|t, v| t.exp(v[0])))
            },
        },
        OpCase {
            name: "log",
            make: |rng| {
                let s = small_shape(rng);
                (vec![uniform(&s, 0.3, 3.0, rng)], Box::new(|t, v| t.log(v[0])))
            },
        },
        OpCase {
            name: "sigmoid",
            make: |rng| {
                let s = small_shape(rng);
                (vec![randn(&s, rng)], Box::new(|t, v| t.sigmoid(v[0])))
            },
        },
        OpCase {
            name: "clamp",
            make: |rng| {
                let s = small_shape(rng);
                (vec![randn_avoiding(&s, &[-0.5, 0.5], 1e-3, rng)], Box::new(|t, v| t.clamp(v[0], -0.5, 0.5)))
            },
        },
        OpCase {
            name: "smooth_l1",
            make: |rng| {
                let s = small_shape(rng);
                let x = randn_avoiding(&s, &[-1.0, 1.0], 1e-3, rng).map(|v| 2.0 * v);
                (vec![x], Box::new(|t, v| t.smooth_l1(v[0])))
            },
        },
        OpCase {
            name: "dot",
            make: |rng| {
                let s = small_shape(rng);
                (vec![randn(&s, rng), randn(&s, rng)], Box::new(|t, v| t.dot(v[0], v[1])))
            },
        },
        OpCase {
            name: "sum",
            make: |rng| {
                let s = small_shape(rng);
                (vec![randn(&s, rng)], Box::new(|t, v| t.sum(v[0])))
            },
        },
        OpCase {
            name: "concat",
            make: |rng| {
                let base = [rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4)];
                let axis = rng.random_range(0..3);
                let parts = rng.random_range(2..=3);
                let inputs = (0..parts)
                    .map(|_| {
                        let mut s = base;
                        s[axis] = rng.random_range(1..4);
                        randn(&s, rng)
                    })
                    .collect();
                (inputs, Box::new(move |t, v| t.concat(v, axis)))
            },
        },
        OpCase {
            name: "max_over_axis",
            make: |rng| {
                let s = [rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..4)];
                let axis = rng.random_range(0..3);
                (vec![separated(&s, axis, 1e-3, rng)], Box::new(move |t, v| t.max_over_axis(v[0], axis)))
            },
        },
        OpCase {
            name: "softmax_row",
            make: |rng| {
                let s = [rng.random_range(1..4), rng.random_range(1..6)];
                (vec![randn(&s, rng)], Box::new(|t, v| t.softmax_row(v[0])))
            },
        },
        OpCase {
            name: "softmax_row_masked_diag",
            make: |rng| {
                let n = rng.random_range(2..5);
                let s = [rng.random_range(1..4), n, n];
                (vec![randn(&s, rng)], Box::new(|t, v| t.softmax_row_masked_diag(v[0])))
            },
        },
        OpCase {
            name: "reshape",
            make: |rng| {
                let (a, b) = (rng.random_range(1..4), rng.random_range(1..4));
                (vec![randn(&[a, b, 2], rng)], Box::new(move |t, v| t.reshape(v[0], &[2 * b, a])))
            },
        },
        OpCase {
            name: "permute",
            make: |rng| {
                let s = [rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4)];
                let perms = [[0, 2, 1], [1, 0, 2], [2, 0, 1], [1, 2, 0], [2, 1, 0]];
                let p = perms[rng.random_range(0..perms.len())];
                (vec![randn(&s, rng)], Box::new(move |t, v| t.permute(v[0], &p)))
            },
        },
        OpCase {
            name: "gather_rows",
            make: |rng| {
                let (n, w) = (rng.random_range(1..5), rng.random_range(1..4));
                let rows: Vec<usize> = (0..rng.random_range(1..7)).map(|_| rng.random_range(0..n)).collect();
                (vec![randn(&[n, w], rng)], Box::new(move |t, v| t.gather_rows(v[0], &rows)))
            },
        },
    ]
}
