//! Shared network builders: MLP stacks and temporal-convolution stacks with
//! layer-indexed parameter names (`prefix.w0`, `prefix.b0`, ...). Checkpoints
//! preserve these names.

use super::graph::{GraphBuilder, NodeId, ParamSet};
use super::rng::RngStream;
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

fn apply(b: &mut GraphBuilder, act: Activation, x: NodeId) -> NodeId {
    match act {
        Activation::Relu => b.relu(x),
        Activation::Tanh => b.tanh(x),
    }
}

/// Append `layers` affine layers named `prefix.w{i}` / `prefix.b{i}` with the
/// activation between them (none after the last).
pub fn mlp(
    b: &mut GraphBuilder,
    prefix: &str,
    mut x: NodeId,
    layers: usize,
    act: Activation,
) -> NodeId {
    for i in 0..layers {
        let w = b.param(format!("{prefix}.w{i}"));
        let bias = b.param(format!("{prefix}.b{i}"));
        x = b.affine(x, w, bias);
        if i + 1 < layers {
            x = apply(b, act, x);
        }
    }
    x
}

/// Fan-in-scaled Gaussian init for an MLP with the given layer widths.
/// `dims = [in, h1, ..., out]` produces `dims.len() - 1` layers.
pub fn init_mlp(prefix: &str, dims: &[usize], rng: &mut RngStream) -> ParamSet {
    let mut params = ParamSet::new();
    for i in 0..dims.len() - 1 {
        let (n, m) = (dims[i], dims[i + 1]);
        let scale = 1.0 / (n as f64).sqrt();
        let w: Vec<f64> = (0..n * m).map(|_| rng.normal() * scale).collect();
        params.insert(format!("{prefix}.w{i}"), Tensor::new(vec![n, m], w).unwrap());
        params.insert(format!("{prefix}.b{i}"), Tensor::vector(vec![0.0; m]));
    }
    params
}

/// One temporal convolution layer node, parameters `prefix.w{i}` / `prefix.b{i}`.
pub fn conv_layer(b: &mut GraphBuilder, prefix: &str, i: usize, x: NodeId) -> NodeId {
    let w = b.param(format!("{prefix}.w{i}"));
    let bias = b.param(format!("{prefix}.b{i}"));
    b.conv1d(x, w, bias)
}

/// Fan-in-scaled init for a conv layer `[cout, cin, k]`.
pub fn init_conv(prefix: &str, i: usize, cout: usize, cin: usize, k: usize, rng: &mut RngStream) -> ParamSet {
    let mut params = ParamSet::new();
    let scale = 1.0 / ((cin * k) as f64).sqrt();
    let w: Vec<f64> = (0..cout * cin * k).map(|_| rng.normal() * scale).collect();
    params.insert(format!("{prefix}.w{i}"), Tensor::new(vec![cout, cin, k], w).unwrap());
    params.insert(format!("{prefix}.b{i}"), Tensor::vector(vec![0.0; cout]));
    params
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::graph::{forward, GraphBuilder};

    #[test]
    fn mlp_builder_names_and_shapes() {
        let mut rng = RngStream::new(0, 0);
        let params = init_mlp("f", &[4, 8, 2], &mut rng);
        assert_eq!(params.len(), 4);
        assert_eq!(params.get("f.w0").unwrap().shape(), &[4, 8]);
        assert_eq!(params.get("f.b1").unwrap().shape(), &[2]);

        let mut b = GraphBuilder::new();
        let x = b.input("x");
        let y = mlp(&mut b, "f", x, 2, Activation::Relu);
        b.output("y", y);
        let g = b.build();
        let xt = Tensor::matrix(3, 4, rng.normal_vec(12)).unwrap();
        let eval = forward(&g, &params, &[("x", &xt)]).unwrap();
        assert_eq!(eval.output(&g, "y").unwrap().shape(), &[3, 2]);
    }
}
