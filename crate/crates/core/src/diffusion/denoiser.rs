//! Trajectory denoiser: predicts the clean segment from a noisy one at a
//! given diffusion step. Dense variant flattens the segment and concatenates
//! a sinusoidal step embedding; the convolutional variant runs stride-1
//! temporal convolutions with the embedding injected as a per-channel bias.

use crate::autodiff::{
    forward, graph::Graph, graph::GraphBuilder, nets, ParamSet, RngStream, Tensor,
};
use crate::{CoreError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum DenoiserArch {
    /// Two hidden layers of `hidden` units on the flattened segment.
    Dense { hidden: usize },
    /// Temporal convolution stack with `channels` base channels.
    Conv { channels: usize, kernel: usize },
}

impl Default for DenoiserArch {
    fn default() -> Self {
        DenoiserArch::Dense { hidden: 256 }
    }
}

pub const EMBED_DIM: usize = 32;

#[derive(Debug, Clone)]
pub struct DenoiserModel {
    pub arch: DenoiserArch,
    pub horizon: usize,
    pub row_dim: usize,
    pub params: ParamSet,
    pub ema_params: ParamSet,
    pub ema_decay: f64,
    predict_graph: Graph,
    train_graph: Graph,
}

impl DenoiserModel {
    pub fn new(
        arch: DenoiserArch,
        horizon: usize,
        row_dim: usize,
        ema_decay: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let params = init_params(&arch, horizon, row_dim, rng)?;
        let predict_graph = build_graph(&arch, horizon, row_dim, false);
        let train_graph = build_graph(&arch, horizon, row_dim, true);
        Ok(DenoiserModel {
            arch,
            horizon,
            row_dim,
            ema_params: params.clone(),
            params,
            ema_decay,
            predict_graph,
            train_graph,
        })
    }

    /// Rebuild graphs around restored parameters (checkpoint loading).
    pub fn from_params(
        arch: DenoiserArch,
        horizon: usize,
        row_dim: usize,
        ema_decay: f64,
        params: ParamSet,
        ema_params: ParamSet,
    ) -> Self {
        let predict_graph = build_graph(&arch, horizon, row_dim, false);
        let train_graph = build_graph(&arch, horizon, row_dim, true);
        DenoiserModel {
            arch,
            horizon,
            row_dim,
            params,
            ema_params,
            ema_decay,
            predict_graph,
            train_graph,
        }
    }

    pub fn train_graph(&self) -> &Graph {
        &self.train_graph
    }

    pub fn predict_graph(&self) -> &Graph {
        &self.predict_graph
    }

    /// Predict the clean segment batch from noisy input at step k.
    pub fn predict(&self, tau_k: &Tensor, k: usize, use_ema: bool) -> Result<Tensor> {
        if tau_k.rank() != 3 || tau_k.shape()[1] != self.horizon || tau_k.shape()[2] != self.row_dim
        {
            return Err(CoreError::shape(format!(
                "denoiser expects [N,{},{}], got {:?}",
                self.horizon,
                self.row_dim,
                tau_k.shape()
            )));
        }
        let n = tau_k.shape()[0];
        let k_t = Tensor::filled(vec![n], k as f64);
        let params = if use_ema { &self.ema_params } else { &self.params };
        let eval = forward(&self.predict_graph, params, &[("tau", tau_k), ("k", &k_t)])?;
        Ok(eval.output(&self.predict_graph, "tau0_hat")?.clone())
    }
}

fn init_params(
    arch: &DenoiserArch,
    horizon: usize,
    row_dim: usize,
    rng: &mut RngStream,
) -> Result<ParamSet> {
    let flat = horizon * row_dim;
    match arch {
        DenoiserArch::Dense { hidden } => Ok(nets::init_mlp(
            "denoiser",
            &[flat + EMBED_DIM, *hidden, *hidden, flat],
            rng,
        )),
        DenoiserArch::Conv { channels, kernel } => {
            let mut p = nets::init_conv("denoiser.conv", 0, *channels, row_dim, *kernel, rng);
            p.merge(nets::init_conv("denoiser.conv", 1, *channels, *channels, *kernel, rng))?;
            p.merge(nets::init_conv("denoiser.conv", 2, row_dim, *channels, *kernel, rng))?;
            p.merge(nets::init_mlp("denoiser.temb", &[EMBED_DIM, *channels], rng))?;
            Ok(p)
        }
    }
}

fn build_graph(arch: &DenoiserArch, horizon: usize, row_dim: usize, with_loss: bool) -> Graph {
    let mut b = GraphBuilder::new();
    let tau = b.input("tau");
    let k = b.input("k");
    let emb = b.sinusoidal_embed(k, EMBED_DIM);
    let out = match arch {
        DenoiserArch::Dense { .. } => {
            let flat = b.flatten(tau);
            let x = b.concat(flat, emb);
            let y = nets::mlp(&mut b, "denoiser", x, 3, nets::Activation::Relu);
            b.unflatten(y, horizon, row_dim)
        }
        DenoiserArch::Conv { .. } => {
            let h0 = nets::conv_layer(&mut b, "denoiser.conv", 0, tau);
            let h0 = b.relu(h0);
            let temb = nets::mlp(&mut b, "denoiser.temb", emb, 1, nets::Activation::Relu);
            let h0 = b.add_time_bias(h0, temb);
            let h1 = nets::conv_layer(&mut b, "denoiser.conv", 1, h0);
            let h1 = b.relu(h1);
            nets::conv_layer(&mut b, "denoiser.conv", 2, h1)
        }
    };
    b.output("tau0_hat", out);
    if with_loss {
        let target = b.input("target");
        let diff = b.sub(out, target);
        let sq = b.square(diff);
        let loss = b.mean(sq);
        b.output("loss", loss);
    }
    b.build()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_shape_matches_input() {
        let mut rng = RngStream::new(1, 0);
        for arch in [DenoiserArch::Dense { hidden: 32 }, DenoiserArch::Conv { channels: 8, kernel: 5 }] {
            let m = DenoiserModel::new(arch, 8, 6, 0.999, &mut rng).unwrap();
            let tau = Tensor::new(vec![3, 8, 6], rng.normal_vec(3 * 8 * 6)).unwrap();
            let out = m.predict(&tau, 5, false).unwrap();
            assert_eq!(out.shape(), &[3, 8, 6]);
            assert!(out.all_finite());
        }
    }

    #[test]
    fn prediction_is_pure() {
        let mut rng = RngStream::new(2, 0);
        let m = DenoiserModel::new(DenoiserArch::Dense { hidden: 16 }, 4, 6, 0.999, &mut rng)
            .unwrap();
        let tau = Tensor::new(vec![2, 4, 6], rng.normal_vec(48)).unwrap();
        let a = m.predict(&tau, 3, false).unwrap();
        let b = m.predict(&tau, 3, false).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn wrong_shape_is_rejected() {
        let mut rng = RngStream::new(3, 0);
        let m = DenoiserModel::new(DenoiserArch::Dense { hidden: 16 }, 4, 6, 0.999, &mut rng)
            .unwrap();
        let tau = Tensor::new(vec![2, 5, 6], rng.normal_vec(60)).unwrap();
        assert!(m.predict(&tau, 1, false).is_err());
    }
}
