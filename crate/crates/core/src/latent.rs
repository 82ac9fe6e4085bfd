//! Recurrent Gaussian latent predictors.
//!
//! Three prior/posterior pairs produce the per-step latent variables for
//! the appearance, forward-motion, and backward-motion branches. Each head
//! pools its encoder features to a vector, advances a small recurrent cell,
//! and emits mean and log-std; samples are drawn by reparameterization so
//! gradients reach the distribution parameters but never the noise.

use crate::error::{Error, Result};
use crate::layers::{conv_lstm_step, init_conv_weight, register_conv_lstm, ConvLstmState};
use crate::params::{BoundParams, ParameterStore};
use crate::scalar::Scalar;
use crate::tape::{ReduceKind, Tape, Var};
use crate::tensor::Tensor;

/// Clamp bounds for the log-std head.
pub const LOG_STD_MIN: f64 = -10.0;
pub const LOG_STD_MAX: f64 = 10.0;

/// Whether a head models the prior (sees frames up to t-1) or the
/// posterior (sees frames up to t, including the prediction target).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Prior,
    Posterior,
}

/// Mean and log-std of a diagonal Gaussian over the latent vector, `[N,Z]`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianParams {
    pub mean: Var,
    pub log_std: Var,
}

/// The three per-branch latent samples of one prediction step.
#[derive(Clone, Copy, Debug)]
pub struct LatentTriple {
    pub z_p: Var,
    pub z_fw: Var,
    pub z_bw: Var,
}

pub fn register_latent_head<S: Scalar>(
    store: &mut ParameterStore<S>,
    feature_ch: usize,
    hidden: usize,
    latent_dim: usize,
    prefix: &str,
    seed: u64,
) -> Result<()> {
    register_conv_lstm(store, feature_ch, hidden, 1, &format!("{prefix}.lstm"), seed)?;
    let mean_w = format!("{prefix}.mean.w");
    store.insert(&mean_w, init_conv_weight(&[latent_dim, hidden, 1, 1], hidden, &mean_w, seed))?;
    store.insert(&format!("{prefix}.mean.b"), Tensor::zeros(&[latent_dim]))?;
    let ls_w = format!("{prefix}.logstd.w");
    store.insert(&ls_w, init_conv_weight(&[latent_dim, hidden, 1, 1], hidden, &ls_w, seed))?;
    store.insert(&format!("{prefix}.logstd.b"), Tensor::zeros(&[latent_dim]))?;
    Ok(())
}

/// Advances one latent head: spatial average pool, recurrent cell, then the
/// two linear heads. `role` is bookkeeping for the caller's prior/posterior
/// accounting; the arithmetic is identical.
pub fn latent_head_step<S: Scalar>(
    tape: &mut Tape<S>,
    features: Var,
    state: &ConvLstmState,
    params: &BoundParams,
    prefix: &str,
    role: Role,
) -> Result<(GaussianParams, ConvLstmState)> {
    let _ = role;
    let pooled = tape.global_avg_pool(features)?;
    let next = conv_lstm_step(
        tape,
        pooled,
        state,
        params.var(&format!("{prefix}.lstm.gate.w"))?,
        params.var(&format!("{prefix}.lstm.gate.b"))?,
    )?;
    let n = tape.value(next.hidden).dim(0);
    let mean4 = tape.conv2d(
        next.hidden,
        params.var(&format!("{prefix}.mean.w"))?,
        params.var(&format!("{prefix}.mean.b"))?,
        1,
        0,
    )?;
    let z = tape.value(mean4).dim(1);
    let mean = tape.reshape(mean4, &[n, z])?;
    let ls4 = tape.conv2d(
        next.hidden,
        params.var(&format!("{prefix}.logstd.w"))?,
        params.var(&format!("{prefix}.logstd.b"))?,
        1,
        0,
    )?;
    let ls4 = tape.clamp(ls4, LOG_STD_MIN, LOG_STD_MAX)?;
    let log_std = tape.reshape(ls4, &[n, z])?;
    Ok((GaussianParams { mean, log_std }, next))
}

/// `z = mean + exp(log_std) * noise`. The noise enters as a constant, so
/// gradients flow to mean and log-std only.
pub fn reparameterize<S: Scalar>(tape: &mut Tape<S>, params: &GaussianParams, noise: &Tensor<S>) -> Result<Var> {
    if noise.shape() != tape.value(params.mean).shape() {
        return Err(Error::ShapeMismatch(format!(
            "noise {:?} vs latent {:?}",
            noise.shape(),
            tape.value(params.mean).shape()
        )));
    }
    let std = tape.exp(params.log_std)?;
    let noise = tape.constant(noise.clone());
    let scaled = tape.mul(std, noise)?;
    tape.add(params.mean, scaled)
}

/// Closed-form KL divergence between diagonal Gaussians, summed over the
/// latent dimension: per-sample scalars `[N]`.
pub fn kl_diagonal_gaussian<S: Scalar>(tape: &mut Tape<S>, q: &GaussianParams, p: &GaussianParams) -> Result<Var> {
    let q_shape = tape.value(q.mean).shape().to_vec();
    if tape.value(p.mean).shape() != q_shape.as_slice()
        || tape.value(q.log_std).shape() != q_shape.as_slice()
        || tape.value(p.log_std).shape() != q_shape.as_slice()
    {
        return Err(Error::ShapeMismatch("kl arguments must share one [N,Z] shape".into()));
    }
    // log(sp/sq) + (sq^2 + (mq-mp)^2) / (2 sp^2) - 1/2, per dimension.
    let ls_diff = tape.sub(p.log_std, q.log_std)?;
    let two_lsq = tape.scale(q.log_std, 2.0)?;
    let var_q = tape.exp(two_lsq)?;
    let dmean = tape.sub(q.mean, p.mean)?;
    let dmean2 = tape.square(dmean)?;
    let neg_two_lsp = tape.scale(p.log_std, -2.0)?;
    let inv_var_p = tape.exp(neg_two_lsp)?;
    let num = tape.add(var_q, dmean2)?;
    let ratio = tape.mul(num, inv_var_p)?;
    let half_ratio = tape.scale(ratio, 0.5)?;
    let term = tape.add(ls_diff, half_ratio)?;
    let per_dim = tape.add_scalar(term, -0.5)?;
    tape.reduce(per_dim, ReduceKind::Sum, &[1], false)
}

/// Scalar closed form for one dimension; the oracle the taped version is
/// checked against.
pub fn kl_scalar(mq: f64, log_sq: f64, mp: f64, log_sp: f64) -> f64 {
    let (sq, sp) = (log_sq.exp(), log_sp.exp());
    (sp / sq).ln() + (sq * sq + (mq - mp) * (mq - mp)) / (2.0 * sp * sp) - 0.5
}
