//! Gaussian actor and value critic on top of the encoder.
//!
//! The actor emits tanh-squashed means and reads a state-independent
//! log-std vector clamped to `[-5, 2]`. Log-probabilities are those of the
//! unsquashed Gaussian at the raw sample; the environment clamps the action
//! on its side.

use std::f64::consts::{E, PI};

use dtppo_autodiff::nn::linear;
use dtppo_autodiff::{Graph, Tensor, Var};

use crate::encoder::{encode_with, EncoderInput, ModelConfig};
use crate::error::ModelError;
use crate::world::ACTION_DIM;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

pub struct PolicyOutput {
    /// `B x 4` action means.
    pub mean: Var,
    /// `1 x 4` clamped log standard deviations.
    pub log_std: Var,
    /// `B x 1` state values.
    pub value: Var,
    /// Scalar auxiliary prediction loss.
    pub pred_loss: Var,
    pub policy_input: Var,
    pub h_out: Option<Var>,
}

pub fn actor_head(g: &mut Graph<'_>, x: Var) -> Result<(Var, Var), ModelError> {
    let h = linear(g, x, "actor.fc1")?;
    let h = g.tanh(h);
    let m = linear(g, h, "actor.fc2")?;
    let mean = g.tanh(m);
    let ls = g.param("actor.log_std")?;
    let log_std = g.clamp(ls, LOG_STD_MIN, LOG_STD_MAX);
    Ok((mean, log_std))
}

pub fn critic_head(g: &mut Graph<'_>, x: Var) -> Result<Var, ModelError> {
    let h = linear(g, x, "critic.fc1")?;
    let h = g.tanh(h);
    Ok(linear(g, h, "critic.fc2")?)
}

pub fn forward(g: &mut Graph<'_>, cfg: &ModelConfig, input: EncoderInput<'_>) -> Result<PolicyOutput, ModelError> {
    forward_with(g, cfg, input, None)
}

/// [`forward`] with step embeddings supplied from a cache.
pub fn forward_with(
    g: &mut Graph<'_>,
    cfg: &ModelConfig,
    input: EncoderInput<'_>,
    cached_spatial: Option<Tensor>,
) -> Result<PolicyOutput, ModelError> {
    let enc = encode_with(g, cfg, input, cached_spatial)?;
    heads(g, enc.policy_input, enc.h_out, enc.pred_loss)
}

pub fn heads(g: &mut Graph<'_>, policy_input: Var, h_out: Option<Var>, pred_loss: Var) -> Result<PolicyOutput, ModelError> {
    let (mean, log_std) = actor_head(g, policy_input)?;
    let value = critic_head(g, policy_input)?;
    Ok(PolicyOutput {
        mean,
        log_std,
        value,
        pred_loss,
        policy_input,
        h_out,
    })
}

/// `B x 1` diagonal-Gaussian log-densities of `actions` (`B x 4`).
pub fn log_prob(g: &mut Graph<'_>, mean: Var, log_std: Var, actions: Var) -> Result<Var, ModelError> {
    let diff = g.sub(actions, mean)?;
    let neg = g.scale(log_std, -1.0);
    let inv_std = g.exp(neg);
    let z = g.mul_row(diff, inv_std)?;
    let sq = g.mul(z, z)?;
    let quad = g.sum_cols(sq);
    let quad = g.scale(quad, -0.5);
    let ls_sum = g.sum(log_std);
    let norm = g.scale(ls_sum, -1.0);
    let norm = g.add_scalar(norm, -0.5 * ACTION_DIM as f64 * (2.0 * PI).ln());
    Ok(g.add_row(quad, norm)?)
}

/// Differential entropy of the diagonal Gaussian (scalar).
pub fn entropy(g: &mut Graph<'_>, log_std: Var) -> Var {
    let s = g.sum(log_std);
    g.add_scalar(s, 0.5 * ACTION_DIM as f64 * (2.0 * PI * E).ln())
}

/// Plain-float log-density, for checks outside a graph.
pub fn gaussian_log_prob(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(action)
        .map(|((m, ls), a)| {
            let z = (a - m) / ls.exp();
            -0.5 * z * z - ls - 0.5 * (2.0 * PI).ln()
        })
        .sum()
}

pub fn actions_tensor(actions: &[[f64; ACTION_DIM]]) -> Result<Tensor, ModelError> {
    Ok(Tensor::from_vec(
        actions.len(),
        ACTION_DIM,
        actions.iter().flatten().copied().collect(),
    )?)
}
