//! Row/transition feature extraction from trajectory batches, and the
//! matching gradient scatter back into trajectory space.
//!
//! A batch is [N, H, C] with C = d_s + d_a; rows are (normalized state, raw
//! action). Transition t of sample n is (s_t, a_t, s_{t+1}) built from
//! consecutive rows, so each sample yields H-1 transitions.

use crate::autodiff::Tensor;
use crate::{CoreError, Result};

pub fn check_batch(taus: &Tensor, state_dim: usize, action_dim: usize) -> Result<(usize, usize)> {
    if taus.rank() != 3 || taus.shape()[2] != state_dim + action_dim {
        return Err(CoreError::shape(format!(
            "trajectory batch must be [N,H,{}], got {:?}",
            state_dim + action_dim,
            taus.shape()
        )));
    }
    if taus.shape()[1] < 2 {
        return Err(CoreError::usage("trajectory batch needs H >= 2"));
    }
    Ok((taus.shape()[0], taus.shape()[1]))
}

/// (s_t, a_t, s_{t+1}) features: [N*(H-1), 2*d_s + d_a].
pub fn sas_features(taus: &Tensor, ds: usize, da: usize) -> Result<Tensor> {
    let (n, h) = check_batch(taus, ds, da)?;
    let c = ds + da;
    let fdim = 2 * ds + da;
    let mut out = Vec::with_capacity(n * (h - 1) * fdim);
    let v = taus.values();
    for ni in 0..n {
        for t in 0..h - 1 {
            let row = &v[(ni * h + t) * c..(ni * h + t + 1) * c];
            let next = &v[(ni * h + t + 1) * c..(ni * h + t + 2) * c];
            out.extend_from_slice(row);
            out.extend_from_slice(&next[..ds]);
        }
    }
    Tensor::new(vec![n * (h - 1), fdim], out)
}

/// (s_t, a_t) features over transitions: [N*(H-1), d_s + d_a].
pub fn sa_features(taus: &Tensor, ds: usize, da: usize) -> Result<Tensor> {
    let (n, h) = check_batch(taus, ds, da)?;
    let c = ds + da;
    let mut out = Vec::with_capacity(n * (h - 1) * c);
    let v = taus.values();
    for ni in 0..n {
        for t in 0..h - 1 {
            out.extend_from_slice(&v[(ni * h + t) * c..(ni * h + t + 1) * c]);
        }
    }
    Tensor::new(vec![n * (h - 1), c], out)
}

/// (s_t, a_t) over all H rows: states [N*H, d_s], actions [N*H, d_a].
pub fn row_features(taus: &Tensor, ds: usize, da: usize) -> Result<(Tensor, Tensor)> {
    let (n, h) = check_batch(taus, ds, da)?;
    let c = ds + da;
    let mut states = Vec::with_capacity(n * h * ds);
    let mut actions = Vec::with_capacity(n * h * da);
    let v = taus.values();
    for ni in 0..n {
        for t in 0..h {
            let row = &v[(ni * h + t) * c..(ni * h + t + 1) * c];
            states.extend_from_slice(&row[..ds]);
            actions.extend_from_slice(&row[ds..]);
        }
    }
    Ok((
        Tensor::new(vec![n * h, ds], states)?,
        Tensor::new(vec![n * h, da], actions)?,
    ))
}

/// Scatter-add a gradient over SAS features back into trajectory space.
pub fn scatter_sas_grad(grad: &Tensor, n: usize, h: usize, ds: usize, da: usize, out: &mut Tensor) {
    let c = ds + da;
    let fdim = 2 * ds + da;
    let g = grad.values();
    let o = out.values_mut();
    for ni in 0..n {
        for t in 0..h - 1 {
            let f = &g[(ni * (h - 1) + t) * fdim..(ni * (h - 1) + t + 1) * fdim];
            let row = (ni * h + t) * c;
            for i in 0..c {
                o[row + i] += f[i];
            }
            let next_state = (ni * h + t + 1) * c;
            for i in 0..ds {
                o[next_state + i] += f[c + i];
            }
        }
    }
}

/// Scatter-add a gradient over SA transition features back into trajectory space.
pub fn scatter_sa_grad(grad: &Tensor, n: usize, h: usize, ds: usize, da: usize, out: &mut Tensor) {
    let c = ds + da;
    let g = grad.values();
    let o = out.values_mut();
    for ni in 0..n {
        for t in 0..h - 1 {
            let f = &g[(ni * (h - 1) + t) * c..(ni * (h - 1) + t + 1) * c];
            let row = (ni * h + t) * c;
            for i in 0..c {
                o[row + i] += f[i];
            }
        }
    }
}

/// Scatter-add per-row state/action gradients back into trajectory space.
pub fn scatter_row_grad(
    dstate: &Tensor,
    daction: &Tensor,
    n: usize,
    h: usize,
    ds: usize,
    da: usize,
    out: &mut Tensor,
) {
    let c = ds + da;
    let gs = dstate.values();
    let ga = daction.values();
    let o = out.values_mut();
    for ni in 0..n {
        for t in 0..h {
            let row = (ni * h + t) * c;
            for i in 0..ds {
                o[row + i] += gs[(ni * h + t) * ds + i];
            }
            for i in 0..da {
                o[row + ds + i] += ga[(ni * h + t) * da + i];
            }
        }
    }
}

/// Sum a per-transition (or per-row) vector into per-sample totals.
pub fn per_sample_sums(values: &[f64], n: usize, per: usize) -> Vec<f64> {
    (0..n)
        .map(|ni| values[ni * per..(ni + 1) * per].iter().sum())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch() -> Tensor {
        // N=1, H=3, ds=2, da=1: rows [s0|a0], [s1|a1], [s2|a2]
        Tensor::new(
            vec![1, 3, 3],
            vec![1.0, 2.0, 10.0, 3.0, 4.0, 20.0, 5.0, 6.0, 30.0],
        )
        .unwrap()
    }

    #[test]
    fn sas_rows_use_consecutive_states() {
        let t = batch();
        let sas = sas_features(&t, 2, 1).unwrap();
        assert_eq!(sas.shape(), &[2, 5]);
        assert_eq!(&sas.values()[..5], &[1.0, 2.0, 10.0, 3.0, 4.0]);
        assert_eq!(&sas.values()[5..], &[3.0, 4.0, 20.0, 5.0, 6.0]);
    }

    #[test]
    fn scatter_inverts_gather_pattern() {
        let t = batch();
        let sas = sas_features(&t, 2, 1).unwrap();
        let ones = Tensor::filled(sas.shape().to_vec(), 1.0);
        let mut out = Tensor::zeros(vec![1, 3, 3]);
        scatter_sas_grad(&ones, 1, 3, 2, 1, &mut out);
        // Row 0: appears once as (s,a); row 1: once as next-state (s only) and
        // once as (s,a); row 2: only as next-state.
        assert_eq!(
            out.values(),
            &[1.0, 1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 1.0, 0.0]
        );
    }

    #[test]
    fn row_features_split_state_action() {
        let t = batch();
        let (s, a) = row_features(&t, 2, 1).unwrap();
        assert_eq!(s.shape(), &[3, 2]);
        assert_eq!(a.values(), &[10.0, 20.0, 30.0]);
    }
}
