//! Central finite-difference verification of analytic gradients.
//!
//! The relative-error metric is `|a−b| / max(1e-8, |a|, |b|)` throughout.

use super::{backward, DiffError, Graph, Tensor, Var};

/// Relative error between two scalars.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / f64::max(1e-8, f64::max(a.abs(), b.abs()))
}

/// Maximum elementwise relative error between two equal-length slices.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| rel_err(*x, *y))
        .fold(0.0, f64::max)
}

/// Outcome of one gradient check.
#[derive(Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, flat coordinate, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Central finite differences of a scalar function of several tensors.
pub fn finite_diff_grad<F>(
    mut f: F,
    inputs: &[Tensor],
    step: f64,
) -> Result<Vec<Tensor>, DiffError>
where
    F: FnMut(&[Tensor]) -> Result<f64, DiffError>,
{
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].numel() {
            let mut probe: Vec<Tensor> = inputs.to_vec();
            probe[i].data_mut()[j] += step;
            let up = f(&probe)?;
            probe[i].data_mut()[j] -= 2.0 * step;
            let down = f(&probe)?;
            grad.data_mut()[j] = (up - down) / (2.0 * step);
        }
        grads.push(grad);
    }
    Ok(grads)
}

/// Checks the analytic gradient of `build` (a scalar-valued graph
/// construction over parameter leaves) against central finite differences.
pub fn check_gradients<F>(
    build: F,
    inputs: &[Tensor],
    step: f64,
) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&Graph, &[Var]) -> Result<Var, DiffError>,
{
    let graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| graph.param(t.clone())).collect();
    let loss = build(&graph, &vars)?;
    let refs: Vec<&Var> = vars.iter().collect();
    let analytic: Vec<Tensor> = backward(&loss, &refs)?
        .iter()
        .map(Var::value)
        .collect();

    let numeric = finite_diff_grad(
        |probe| {
            let g = Graph::new();
            let vs: Vec<Var> = probe.iter().map(|t| g.param(t.clone())).collect();
            build(&g, &vs)?.item()
        },
        inputs,
        step,
    )?;

    let mut worst: Option<(usize, usize, f64, f64)> = None;
    let mut max_err = 0.0;
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (j, (av, nv)) in a.data().iter().zip(n.data()).enumerate() {
            let e = rel_err(*av, *nv);
            if e > max_err {
                max_err = e;
                worst = Some((i, j, *av, *nv));
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_err,
        worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::RngStream;

    const STEP: f64 = 1e-3;
    const TOL: f64 = 1e-4;

    fn rand_tensor(stream: &mut RngStream, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| lo + (hi - lo) * stream.uniform01()).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    fn rand_shape(stream: &mut RngStream) -> Vec<usize> {
        if stream.gen_range(2) == 0 {
            vec![1 + stream.gen_range(6)]
        } else {
            vec![1 + stream.gen_range(5), 1 + stream.gen_range(5)]
        }
    }

    /// Loss wrapper: weight the op output with a fixed random tensor so every
    /// coordinate of the adjoint is distinct.
    fn weighted_sum(g: &Graph, v: &Var, stream: &mut RngStream) -> Result<Var, DiffError> {
        let w = rand_tensor(stream, &v.shape(), -1.0, 1.0);
        let wv = g.constant(w);
        Ok(v.mul(&wv)?.sum())
    }

    fn assert_kernel_check(
        name: &str,
        inputs: &[Tensor],
        build: impl Fn(&Graph, &[Var]) -> Result<Var, DiffError>,
    ) {
        let report = check_gradients(build, inputs, STEP).unwrap();
        assert!(
            report.passes(TOL),
            "{name}: max rel err {} worst {:?}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn elementwise_kernels_match_finite_differences() {
        let mut s = RngStream::new(2024, "gradcheck-ew");
        for trial in 0..8 {
            let shape = rand_shape(&mut s);
            let a = rand_tensor(&mut s, &shape, -2.0, 2.0);
            let b = rand_tensor(&mut s, &shape, -2.0, 2.0);
            let ws = s.child(&format!("w{trial}"));
            for (name, f) in [
                ("add", 0usize),
                ("sub", 1),
                ("mul", 2),
            ] {
                let ws = ws.child(name);
                assert_kernel_check(name, &[a.clone(), b.clone()], |g, vs| {
                    let out = match f {
                        0 => vs[0].add(&vs[1])?,
                        1 => vs[0].sub(&vs[1])?,
                        _ => vs[0].mul(&vs[1])?,
                    };
                    weighted_sum(g, &out, &mut ws.clone())
                });
            }
            // scalar broadcast variants
            let k = Tensor::scalar(0.5 + s.uniform01());
            let ws2 = ws.child("bcast");
            assert_kernel_check("mul-scalar-broadcast", &[a.clone(), k.clone()], |g, vs| {
                weighted_sum(g, &vs[0].mul(&vs[1])?, &mut ws2.clone())
            });
            let ws3 = ws.child("bcast-add");
            assert_kernel_check("add-scalar-broadcast", &[k.clone(), a.clone()], |g, vs| {
                weighted_sum(g, &vs[0].add(&vs[1])?, &mut ws3.clone())
            });
        }
    }

    #[test]
    fn unary_kernels_match_finite_differences() {
        let mut s = RngStream::new(77, "gradcheck-unary");
        for trial in 0..8 {
            let shape = rand_shape(&mut s);
            let x = rand_tensor(&mut s, &shape, -2.0, 2.0);
            let pos = rand_tensor(&mut s, &shape, 0.5, 2.5);
            // keep relu inputs away from the kink
            let mut relu_in = rand_tensor(&mut s, &shape, 0.1, 2.0);
            for v in relu_in.data_mut() {
                if s.gen_range(2) == 0 {
                    *v = -*v;
                }
            }
            let cases: Vec<(&str, Tensor)> = vec![
                ("tanh", x.clone()),
                ("sigmoid", x.clone()),
                ("exp", x.clone()),
                ("log", pos),
                ("relu", relu_in),
                ("scalar_mul", x.clone()),
                ("sum", x.clone()),
                ("mean", x.clone()),
                ("softmax", x.clone()),
            ];
            for (name, input) in cases {
                let ws = s.child(&format!("w-{name}-{trial}"));
                assert_kernel_check(name, &[input], |g, vs| {
                    let out = match name {
                        "tanh" => vs[0].tanh(),
                        "sigmoid" => vs[0].sigmoid(),
                        "exp" => vs[0].exp(),
                        "log" => vs[0].log()?,
                        "relu" => vs[0].relu(),
                        "scalar_mul" => vs[0].scalar_mul(-1.7),
                        "sum" => return Ok(vs[0].sum()),
                        "mean" => return vs[0].mean(),
                        "softmax" => vs[0].softmax()?,
                        _ => unreachable!(),
                    };
                    weighted_sum(g, &out, &mut ws.clone())
                });
            }
        }
    }

    #[test]
    fn matmul_all_flag_combos_match_finite_differences() {
        let mut s = RngStream::new(31, "gradcheck-matmul");
        for _ in 0..6 {
            let m = 1 + s.gen_range(4);
            let k = 1 + s.gen_range(4);
            let n = 1 + s.gen_range(4);
            for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
                let a_shape = if ta { vec![k, m] } else { vec![m, k] };
                let b_shape = if tb { vec![n, k] } else { vec![k, n] };
                let a = rand_tensor(&mut s, &a_shape, -2.0, 2.0);
                let b = rand_tensor(&mut s, &b_shape, -2.0, 2.0);
                let ws = s.child(&format!("w{ta}{tb}"));
                assert_kernel_check("matmul", &[a, b], |g, vs| {
                    weighted_sum(g, &vs[0].matmul(&vs[1], ta, tb)?, &mut ws.clone())
                });
            }
        }
    }

    #[test]
    fn concat_slice_match_finite_differences() {
        let mut s = RngStream::new(404, "gradcheck-cat");
        for axis in [0usize, 1] {
            for trial in 0..5 {
                let rows = 1 + s.gen_range(4);
                let cols = 1 + s.gen_range(4);
                let mut sa = vec![rows, cols];
                let mut sb = vec![rows, cols];
                if axis == 0 {
                    sa[0] = 1 + s.gen_range(3);
                    sb[0] = 1 + s.gen_range(3);
                } else {
                    sa[1] = 1 + s.gen_range(3);
                    sb[1] = 1 + s.gen_range(3);
                }
                let a = rand_tensor(&mut s, &sa, -2.0, 2.0);
                let b = rand_tensor(&mut s, &sb, -2.0, 2.0);
                let ws = s.child(&format!("w{axis}-{trial}"));
                assert_kernel_check("concat", &[a.clone(), b.clone()], |g, vs| {
                    weighted_sum(g, &g.concat(&[&vs[0], &vs[1]], axis)?, &mut ws.clone())
                });
                let dim = sa[axis];
                let len = 1 + s.gen_range(dim);
                let start = s.gen_range(dim - len + 1);
                let ws2 = s.child(&format!("ws{axis}-{trial}"));
                assert_kernel_check("slice", &[a], |g, vs| {
                    weighted_sum(g, &vs[0].slice(axis, start, len)?, &mut ws2.clone())
                });
            }
        }
    }

    #[test]
    fn two_layer_tanh_net_matches_finite_differences() {
        let mut s = RngStream::new(99, "gradcheck-net");
        let x = rand_tensor(&mut s, &[1, 4], -2.0, 2.0);
        let w1 = rand_tensor(&mut s, &[4, 5], -1.0, 1.0);
        let b1 = rand_tensor(&mut s, &[1, 5], -0.5, 0.5);
        let w2 = rand_tensor(&mut s, &[5, 3], -1.0, 1.0);
        let b2 = rand_tensor(&mut s, &[1, 3], -0.5, 0.5);
        let report = check_gradients(
            |_, vs| {
                let h = vs[0].matmul(&vs[1], false, false)?.add(&vs[2])?.tanh();
                let o = h.matmul(&vs[3], false, false)?.add(&vs[4])?.tanh();
                Ok(o.mul(&o)?.sum())
            },
            &[x, w1, b1, w2, b2],
            STEP,
        )
        .unwrap();
        assert!(report.passes(TOL), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn second_order_matches_finite_differences_of_backward() {
        let mut s = RngStream::new(123, "gradcheck-second");
        let x = rand_tensor(&mut s, &[1, 3], -1.0, 1.0);
        let w = rand_tensor(&mut s, &[3, 4], -1.0, 1.0);
        let r = rand_tensor(&mut s, &[1, 4], -1.0, 1.0);

        // analytic: d/d(x,w) of sum(grad_w(loss)^2)
        let g = Graph::new();
        let xv = g.param(x.clone());
        let wv = g.param(w.clone());
        let rv = g.constant(r.clone());
        let loss = xv
            .matmul(&wv, false, false)
            .unwrap()
            .tanh()
            .mul(&rv)
            .unwrap()
            .sum();
        let outer = crate::diffcore::second_order_grad(&loss, &[&wv], &[&xv, &wv], |gs| {
            gs[0].mul(&gs[0]).map(|sq| sq.sum())
        })
        .unwrap();

        // numeric: finite differences of the same scalar built per probe
        let numeric = finite_diff_grad(
            |probe| {
                let g = Graph::new();
                let xv = g.param(probe[0].clone());
                let wv = g.param(probe[1].clone());
                let rv = g.constant(r.clone());
                let loss = xv.matmul(&wv, false, false)?.tanh().mul(&rv)?.sum();
                let grads = backward(&loss, &[&wv])?;
                grads[0].mul(&grads[0])?.sum().item()
            },
            &[x, w],
            STEP,
        )
        .unwrap();

        for (a, n) in outer.iter().zip(&numeric) {
            let err = max_rel_err(a.value().data(), n.data());
            assert!(err <= 1e-3, "second order rel err {err}");
        }
    }

    #[test]
    fn zero_inner_step_degenerates_to_direct_gradient() {
        // One-step SGD with α=0: hypergradient through θ' equals ∂L2/∂φ.
        let mut s = RngStream::new(5, "gradcheck-alpha0");
        let theta = rand_tensor(&mut s, &[2, 2], -1.0, 1.0);
        let phi = rand_tensor(&mut s, &[1, 2], -1.0, 1.0);

        let g = Graph::new();
        let th = g.param(theta.clone());
        let ph = g.param(phi.clone());
        let l1 = ph.matmul(&th, false, false).unwrap().tanh().sum();
        let gth = backward(&l1, &[&th]).unwrap();
        let th_prime = th.sub(&gth[0].scalar_mul(0.0)).unwrap();
        let l2 = ph.matmul(&th_prime, false, false).unwrap().sigmoid().sum();
        let hyper = backward(&l2, &[&ph]).unwrap();

        let g2 = Graph::new();
        let th2 = g2.param(theta);
        let ph2 = g2.param(phi);
        let l2d = ph2.matmul(&th2, false, false).unwrap().sigmoid().sum();
        let direct = backward(&l2d, &[&ph2]).unwrap();

        let err = max_rel_err(hyper[0].value().data(), direct[0].value().data());
        assert!(err <= 1e-12, "rel err {err}");
    }
}
