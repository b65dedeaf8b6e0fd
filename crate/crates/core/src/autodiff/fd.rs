//! Central-finite-difference oracle over graph forward passes.
//!
//! This module only ever calls [`forward`]; it never touches the backward
//! rules it is used to check.

use super::graph::{backward, forward, Graph, ParamSet};
use super::rng::RngStream;
use super::tensor::Tensor;
use crate::Result;

/// d(output)/d(params[name][idx]) by central differences.
pub fn fd_param(
    graph: &Graph,
    params: &ParamSet,
    inputs: &[(&str, &Tensor)],
    output: &str,
    name: &str,
    idx: usize,
    h: f64,
) -> Result<f64> {
    let eval_at = |delta: f64| -> Result<f64> {
        let mut p = params.clone();
        p.get_mut(name).expect("fd_param: unknown parameter").values_mut()[idx] += delta;
        forward(graph, &p, inputs)?.output(graph, output)?.item()
    };
    Ok((eval_at(h)? - eval_at(-h)?) / (2.0 * h))
}

/// d(output)/d(inputs[name][idx]) by central differences.
pub fn fd_input(
    graph: &Graph,
    params: &ParamSet,
    inputs: &[(&str, &Tensor)],
    output: &str,
    name: &str,
    idx: usize,
    h: f64,
) -> Result<f64> {
    let eval_at = |delta: f64| -> Result<f64> {
        let shifted: Vec<(&str, Tensor)> = inputs
            .iter()
            .map(|(n, t)| {
                let mut t2 = (*t).clone();
                if *n == name {
                    t2.values_mut()[idx] += delta;
                }
                (*n, t2)
            })
            .collect();
        let refs: Vec<(&str, &Tensor)> = shifted.iter().map(|(n, t)| (*n, t)).collect();
        forward(graph, params, &refs)?.output(graph, output)?.item()
    };
    Ok((eval_at(h)? - eval_at(-h)?) / (2.0 * h))
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compare analytic gradients against central differences on a random
/// subset of coordinates. Returns the worst relative error seen.
///
/// `coords_per_tensor` bounds the cost for wide layers; every tensor gets at
/// least that many probes (or all coordinates if it is smaller).
pub fn check_gradients(
    graph: &Graph,
    params: &ParamSet,
    inputs: &[(&str, &Tensor)],
    output: &str,
    h: f64,
    coords_per_tensor: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    let eval = forward(graph, params, inputs)?;
    let grads = backward(graph, &eval, output, None)?;
    let mut worst: f64 = 0.0;

    for (name, g) in &grads.params {
        let n = g.len();
        let probes = pick_coords(n, coords_per_tensor, rng);
        for idx in probes {
            let fd = fd_param(graph, params, inputs, output, name, idx, h)?;
            worst = worst.max(relative_error(g.values()[idx], fd));
        }
    }
    for (name, g) in &grads.inputs {
        let n = g.len();
        let probes = pick_coords(n, coords_per_tensor, rng);
        for idx in probes {
            let fd = fd_input(graph, params, inputs, output, name, idx, h)?;
            worst = worst.max(relative_error(g.values()[idx], fd));
        }
    }
    Ok(worst)
}

fn pick_coords(n: usize, want: usize, rng: &mut RngStream) -> Vec<usize> {
    if n <= want {
        (0..n).collect()
    } else {
        (0..want).map(|_| rng.uniform_index(n)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::graph::GraphBuilder;
    use crate::autodiff::nets;

    #[test]
    fn two_layer_net_gradients_match_finite_differences() {
        // Random 2-layer net, gradient w.r.t. inputs and parameters.
        let mut b = GraphBuilder::new();
        let x = b.input("x");
        let h1 = nets::mlp(&mut b, "net", x, 2, nets::Activation::Tanh);
        let s = b.sum(h1);
        b.output("loss", s);
        let g = b.build();

        let mut rng = RngStream::new(101, 0);
        for draw in 0..20 {
            let params = nets::init_mlp("net", &[3, 5, 2], &mut rng);
            let xt = Tensor::matrix(2, 3, rng.normal_vec(6)).unwrap();
            let worst = check_gradients(&g, &params, &[("x", &xt)], "loss", 1e-5, 16, &mut rng)
                .unwrap();
            assert!(worst < 1e-4, "draw {draw}: relative error {worst}");
        }
    }
}
