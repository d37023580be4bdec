//! Dual-transformer encoder.
//!
//! The spatial transformer reads one step of MDP tokens per agent: a
//! learned decision token followed by the projected (observation, action,
//! reward) triple of the agent and each neighbor slot, with padded slots
//! masked out. Its decision-token output is the step embedding.
//!
//! The temporal transformer reads the last `L` step embeddings of one
//! agent under a causal mask. Positions are counted from the window start,
//! so the outputs for a prefix do not change when later steps are appended.
//! The output at the last valid position is `h_out`.
//!
//! The dynamics predictor maps `h_{j-1}` and the joint (action, reward)
//! tokens seen at step `j` to a prediction of `h_j`; its mean squared error
//! against the detached target is the auxiliary loss.
//!
//! Everything runs batched: `steps` holds every distinct step needed by a
//! batch and each window lists indices into it. Kernels are row-wise, so a
//! window produces bit-identical values in any batch.

use dtppo_autodiff::nn::{
    init_layer_norm, init_linear, init_transformer_block, init_weight, layer_norm, linear, transformer_block,
};
use dtppo_autodiff::{truncated_normal, AttentionLayout, Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::obs::MdpFeature;
use crate::world::ACTION_DIM;

/// Action plus presence flag.
pub const ACT_AUG: usize = ACTION_DIM + 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d: usize,
    pub d_prime: usize,
    pub spatial_layers: usize,
    pub spatial_heads: usize,
    pub temporal_layers: usize,
    pub temporal_heads: usize,
    /// Temporal horizon `L`.
    pub horizon: usize,
    pub neighbors: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d: 149,
            d_prime: 149,
            spatial_layers: 3,
            spatial_heads: 6,
            temporal_layers: 3,
            temporal_heads: 6,
            horizon: 20,
            neighbors: 4,
        }
    }
}

impl EncoderConfig {
    pub fn slots(&self) -> usize {
        self.neighbors + 1
    }

    /// Decision token plus three tokens per slot.
    pub fn spatial_tokens(&self) -> usize {
        1 + 3 * self.slots()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Mean-pool the projected tokens and apply a two-layer perceptron.
    pub no_spatial: bool,
    /// Replace the temporal transformer by a single-layer GRU.
    pub no_temporal_gru: bool,
    /// Drop the observation term from the policy input.
    pub no_residual: bool,
    /// No encoder at all: the policy reads the projected observation.
    pub plain_ppo: bool,
}

impl Ablation {
    pub fn validate(&self) -> Result<(), ModelError> {
        let primary = [self.no_spatial, self.no_temporal_gru, self.plain_ppo]
            .iter()
            .filter(|&&f| f)
            .count();
        if primary > 1 {
            return Err(ModelError::ConflictingFlags(
                "at most one of no_spatial, no_temporal_gru, plain_ppo".into(),
            ));
        }
        if self.plain_ppo && self.no_residual {
            return Err(ModelError::ConflictingFlags(
                "plain_ppo with no_residual leaves the policy without input".into(),
            ));
        }
        Ok(())
    }

    pub fn label(&self) -> &'static str {
        match (self.no_spatial, self.no_temporal_gru, self.plain_ppo, self.no_residual) {
            (true, _, _, _) => "no_spatial",
            (_, true, _, _) => "no_temporal_gru",
            (_, _, true, _) => "plain_ppo",
            (_, _, _, true) => "no_residual",
            _ => "full",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Length of one agent's observation vector.
    pub obs_dim: usize,
    pub actor_hidden: usize,
    pub critic_hidden: usize,
    pub init_log_std: f64,
    pub ablation: Ablation,
    /// Regress the prediction of step `j` onto `h_{j-1}` instead of `h_j`.
    pub predict_current_step: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            obs_dim: 72,
            actor_hidden: 64,
            critic_hidden: 64,
            init_log_std: -0.5,
            ablation: Ablation::default(),
            predict_current_step: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.ablation.validate()?;
        let e = &self.encoder;
        if e.d == 0 || e.d_prime == 0 || e.horizon == 0 || self.obs_dim == 0 {
            return Err(ModelError::InvalidConfig("dimensions and horizon must be positive".into()));
        }
        if e.spatial_heads == 0 || e.temporal_heads == 0 {
            return Err(ModelError::InvalidConfig("head counts must be positive".into()));
        }
        Ok(())
    }

    pub fn uses_spatial(&self) -> bool {
        !self.ablation.plain_ppo
    }

    pub fn uses_temporal(&self) -> bool {
        !self.ablation.plain_ppo
    }

    pub fn uses_observation(&self) -> bool {
        !self.ablation.no_residual
    }

    /// Observation projection is the identity when widths already agree.
    pub fn residual_identity(&self) -> bool {
        self.obs_dim == self.encoder.d_prime
    }
}

/// Registers every parameter of the model in a fixed order.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let e = &cfg.encoder;
    let (d, dp) = (e.d, e.d_prime);
    if cfg.uses_spatial() {
        init_weight(&mut s, &mut rng, "spatial.W_o".into(), cfg.obs_dim + 1, d)?;
        init_weight(&mut s, &mut rng, "spatial.W_a".into(), ACT_AUG, d)?;
        init_weight(&mut s, &mut rng, "spatial.W_r".into(), 1, d)?;
        if cfg.ablation.no_spatial {
            init_linear(&mut s, &mut rng, "spatial.pool.fc1", d, d)?;
            init_linear(&mut s, &mut rng, "spatial.pool.fc2", d, d)?;
        } else {
            init_weight(&mut s, &mut rng, "spatial.decision".into(), 1, d)?;
            init_weight(&mut s, &mut rng, "spatial.pos_emb".into(), e.spatial_tokens(), d)?;
            for i in 0..e.spatial_layers {
                init_transformer_block(&mut s, &mut rng, &format!("spatial.block{i}"), d, e.spatial_heads)?;
            }
            init_layer_norm(&mut s, "spatial.ln_f", d)?;
        }
    }
    if cfg.uses_temporal() {
        if cfg.ablation.no_temporal_gru {
            for gate in ["z", "r", "h"] {
                init_weight(&mut s, &mut rng, format!("temporal.gru.W_{gate}"), d, dp)?;
                init_weight(&mut s, &mut rng, format!("temporal.gru.U_{gate}"), dp, dp)?;
                s.insert(format!("temporal.gru.b_{gate}"), Tensor::zeros(1, dp))?;
            }
        } else {
            init_weight(&mut s, &mut rng, "temporal.W_prime".into(), d, dp)?;
            init_weight(&mut s, &mut rng, "temporal.pos_emb".into(), e.horizon, dp)?;
            for i in 0..e.temporal_layers {
                init_transformer_block(&mut s, &mut rng, &format!("temporal.block{i}"), dp, e.temporal_heads)?;
            }
            init_layer_norm(&mut s, "temporal.ln_f", dp)?;
        }
        init_linear(&mut s, &mut rng, "predictor", dp + ACT_AUG * e.slots() + e.slots(), dp)?;
    }
    if cfg.uses_observation() && !cfg.residual_identity() {
        init_weight(&mut s, &mut rng, "residual.P_o".into(), cfg.obs_dim, dp)?;
    }
    init_linear(&mut s, &mut rng, "actor.fc1", dp, cfg.actor_hidden)?;
    init_linear(&mut s, &mut rng, "actor.fc2", cfg.actor_hidden, ACTION_DIM)?;
    s.insert("actor.log_std", Tensor::filled(1, ACTION_DIM, cfg.init_log_std))?;
    init_linear(&mut s, &mut rng, "critic.fc1", dp, cfg.critic_hidden)?;
    init_linear(&mut s, &mut rng, "critic.fc2", cfg.critic_hidden, 1)?;
    Ok(s)
}

/// Adds small noise to every parameter; used to move tests off the
/// symmetric initialization.
pub fn perturb_params(store: &mut ParamStore, seed: u64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        let (r, c) = (store.value(id).rows(), store.value(id).cols());
        let noise = truncated_normal(&mut rng, r, c, std);
        store.value_mut(id).add_assign(&noise);
    }
}

/// Compact token tensor for one agent at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTokens {
    /// `slots x (obs_dim + 1)`, row-major.
    pub obs: Vec<f64>,
    /// `slots x 5`.
    pub act: Vec<f64>,
    /// `slots`.
    pub rew: Vec<f64>,
}

impl StepTokens {
    pub fn from_features(features: &[MdpFeature]) -> Self {
        Self {
            obs: features.iter().flat_map(|f| f.obs_aug.iter().copied()).collect(),
            act: features.iter().flat_map(|f| f.act_aug).collect(),
            rew: features.iter().map(|f| f.rew).collect(),
        }
    }

    pub fn slots(&self) -> usize {
        self.rew.len()
    }

    pub fn presence(&self) -> impl Iterator<Item = bool> + '_ {
        self.act.chunks(ACT_AUG).map(|a| a[ACTION_DIM] == 1.0)
    }

    /// The agent's own observation without the presence flag.
    pub fn self_obs(&self, obs_dim: usize) -> &[f64] {
        &self.obs[..obs_dim]
    }
}

/// Distinct steps plus per-sample windows of indices into them.
#[derive(Clone, Copy, Debug)]
pub struct EncoderInput<'a> {
    pub steps: &'a [&'a StepTokens],
    /// Chronological, length `1..=L` each.
    pub windows: &'a [Vec<usize>],
}

pub struct EncoderOutput {
    /// `B x d'` policy input.
    pub policy_input: Var,
    /// `B x d'` temporal output at the last window position.
    pub h_out: Option<Var>,
    /// Scalar auxiliary loss (zero when there are no consecutive pairs).
    pub pred_loss: Var,
}

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor, ModelError> {
    Ok(Tensor::from_vec(rows, cols, data)?)
}

/// Step embeddings, one `d`-row per entry of `steps`.
pub fn spatial_batch(g: &mut Graph<'_>, cfg: &ModelConfig, steps: &[&StepTokens]) -> Result<Var, ModelError> {
    let e = &cfg.encoder;
    let s = e.slots();
    let u = steps.len();
    let obs_w = cfg.obs_dim + 1;
    for st in steps {
        if st.slots() != s || st.obs.len() != s * obs_w || st.act.len() != s * ACT_AUG {
            return Err(ModelError::Autodiff(dtppo_autodiff::AutodiffError::ShapeMismatch {
                op: "spatial tokens",
                lhs: vec![s, obs_w],
                rhs: vec![st.slots(), st.obs.len() / st.slots().max(1)],
            }));
        }
    }
    let xo = g.constant(mat(u * s, obs_w, steps.iter().flat_map(|t| t.obs.iter().copied()).collect())?);
    let xa = g.constant(mat(u * s, ACT_AUG, steps.iter().flat_map(|t| t.act.iter().copied()).collect())?);
    let xr = g.constant(mat(u * s, 1, steps.iter().flat_map(|t| t.rew.iter().copied()).collect())?);
    let wo = g.param("spatial.W_o")?;
    let wa = g.param("spatial.W_a")?;
    let wr = g.param("spatial.W_r")?;
    let zo = g.matmul(xo, wo)?;
    let za = g.matmul(xa, wa)?;
    let zr = g.matmul(xr, wr)?;
    let presence: Vec<bool> = steps.iter().flat_map(|t| t.presence()).collect();

    if cfg.ablation.no_spatial {
        let all = g.concat_rows(&[zo, za, zr])?;
        let mut pool = vec![0.0; u * 3 * u * s];
        for b in 0..u {
            let count = 3 * presence[b * s..(b + 1) * s].iter().filter(|&&p| p).count();
            for k in 0..s {
                if presence[b * s + k] {
                    for part in 0..3 {
                        pool[b * 3 * u * s + part * u * s + b * s + k] = 1.0 / count as f64;
                    }
                }
            }
        }
        let pool = g.constant(mat(u, 3 * u * s, pool)?);
        let pooled = g.matmul(pool, all)?;
        let h = linear(g, pooled, "spatial.pool.fc1")?;
        let h = g.gelu(h);
        return Ok(linear(g, h, "spatial.pool.fc2")?);
    }

    let dec = g.param("spatial.decision")?;
    let all = g.concat_rows(&[zo, za, zr, dec])?;
    let t = e.spatial_tokens();
    let mut index = Vec::with_capacity(u * t);
    let mut valid = Vec::with_capacity(u * t);
    for b in 0..u {
        index.push(Some(3 * u * s));
        valid.push(true);
        for k in 0..s {
            for part in 0..3 {
                index.push(Some(part * u * s + b * s + k));
                valid.push(presence[b * s + k]);
            }
        }
    }
    let x = g.gather_rows(all, &index)?;
    let pos = g.param("spatial.pos_emb")?;
    let mut x = g.add_tiled(x, pos)?;
    let layout = AttentionLayout {
        seq_len: t,
        heads: e.spatial_heads,
        valid,
        causal: false,
    };
    for i in 0..e.spatial_layers {
        x = transformer_block(g, x, &format!("spatial.block{i}"), &layout)?;
    }
    let x = layer_norm(g, x, "spatial.ln_f")?;
    let heads: Vec<Option<usize>> = (0..u).map(|b| Some(b * t)).collect();
    Ok(g.gather_rows(x, &heads)?)
}

/// Temporal outputs for every window position (`B*L x d'`, row `b*L + j`)
/// and the per-window last valid output (`B x d'`).
pub fn temporal_batch(
    g: &mut Graph<'_>,
    cfg: &ModelConfig,
    spatial: Var,
    windows: &[Vec<usize>],
) -> Result<(Var, Var), ModelError> {
    let e = &cfg.encoder;
    let l = e.horizon;
    let b = windows.len();
    for w in windows {
        if w.len() > l {
            return Err(ModelError::WindowTooLong { len: w.len(), horizon: l });
        }
        if w.is_empty() {
            return Err(ModelError::InvalidConfig("empty temporal window".into()));
        }
    }
    let last: Vec<Option<usize>> = windows.iter().enumerate().map(|(i, w)| Some(i * l + w.len() - 1)).collect();
    if cfg.ablation.no_temporal_gru {
        let dp = e.d_prime;
        let mut h = g.constant(Tensor::zeros(b, dp));
        let mut states = Vec::with_capacity(l);
        let p = |g: &mut Graph<'_>, n: &str| g.param(&format!("temporal.gru.{n}"));
        let (wz, uz, bz) = (p(g, "W_z")?, p(g, "U_z")?, p(g, "b_z")?);
        let (wr, ur, br) = (p(g, "W_r")?, p(g, "U_r")?, p(g, "b_r")?);
        let (wh, uh, bh) = (p(g, "W_h")?, p(g, "U_h")?, p(g, "b_h")?);
        for j in 0..l {
            let idx: Vec<Option<usize>> = windows.iter().map(|w| w.get(j).copied()).collect();
            let x = g.gather_rows(spatial, &idx)?;
            let gate = |g: &mut Graph<'_>, w, u, bias, hh| -> Result<Var, ModelError> {
                let a = g.matmul(x, w)?;
                let c = g.matmul(hh, u)?;
                let s = g.add(a, c)?;
                Ok(g.add_row(s, bias)?)
            };
            let z = gate(g, wz, uz, bz, h)?;
            let z = g.sigmoid(z);
            let r = gate(g, wr, ur, br, h)?;
            let r = g.sigmoid(r);
            let rh = g.mul(r, h)?;
            let n = gate(g, wh, uh, bh, rh)?;
            let n = g.tanh(n);
            // h' = n + z * (h - n)
            let diff = g.sub(h, n)?;
            let zd = g.mul(z, diff)?;
            h = g.add(n, zd)?;
            states.push(h);
        }
        let stacked = g.concat_rows(&states)?;
        let order: Vec<Option<usize>> = (0..b * l).map(|r| Some((r % l) * b + r / l)).collect();
        let all = g.gather_rows(stacked, &order)?;
        let out = g.gather_rows(all, &last)?;
        return Ok((all, out));
    }
    let wp = g.param("temporal.W_prime")?;
    let proj = g.matmul(spatial, wp)?;
    let mut index = Vec::with_capacity(b * l);
    let mut valid = Vec::with_capacity(b * l);
    for w in windows {
        for j in 0..l {
            index.push(w.get(j).copied());
            valid.push(j < w.len());
        }
    }
    let x = g.gather_rows(proj, &index)?;
    let pos = g.param("temporal.pos_emb")?;
    let mut x = g.add_tiled(x, pos)?;
    let layout = AttentionLayout {
        seq_len: l,
        heads: e.temporal_heads,
        valid: valid.clone(),
        causal: true,
    };
    for i in 0..e.temporal_layers {
        x = transformer_block(g, x, &format!("temporal.block{i}"), &layout)?;
    }
    let x = layer_norm(g, x, "temporal.ln_f")?;
    let all = g.mask_rows(x, &valid)?;
    let out = g.gather_rows(all, &last)?;
    Ok((all, out))
}

/// `tanh(W [h_prev, joint actions, joint rewards] + b)` for each row.
pub fn predictor_batch(g: &mut Graph<'_>, h_prev: Var, joint: Var) -> Result<Var, ModelError> {
    let x = g.concat_cols(&[h_prev, joint])?;
    let y = linear(g, x, "predictor")?;
    Ok(g.tanh(y))
}

/// Flattened joint (action, reward) context of one step: `5(n+1) + (n+1)`.
pub fn joint_context(step: &StepTokens) -> Vec<f64> {
    step.act.iter().chain(&step.rew).copied().collect()
}

/// Consecutive window pairs: rows of `h_{j-1}`, rows of the target, and
/// the joint context at step `j`.
pub struct PredictionPairs {
    pub prev: Vec<Option<usize>>,
    pub target: Vec<Option<usize>>,
    pub joint: Tensor,
}

pub fn prediction_pairs(
    cfg: &ModelConfig,
    steps: &[&StepTokens],
    windows: &[Vec<usize>],
) -> Result<Option<PredictionPairs>, ModelError> {
    let l = cfg.encoder.horizon;
    let mut prev = Vec::new();
    let mut target = Vec::new();
    let mut joint = Vec::new();
    for (b, w) in windows.iter().enumerate() {
        for j in 1..w.len() {
            prev.push(Some(b * l + j - 1));
            target.push(Some(if cfg.predict_current_step { b * l + j - 1 } else { b * l + j }));
            joint.extend(joint_context(steps[w[j]]));
        }
    }
    if prev.is_empty() {
        return Ok(None);
    }
    let width = joint.len() / prev.len();
    let joint = mat(prev.len(), width, joint)?;
    Ok(Some(PredictionPairs { prev, target, joint }))
}

/// Mean squared prediction error over all consecutive window pairs.
pub fn prediction_loss_batch(
    g: &mut Graph<'_>,
    cfg: &ModelConfig,
    all: Var,
    steps: &[&StepTokens],
    windows: &[Vec<usize>],
) -> Result<Var, ModelError> {
    let Some(pairs) = prediction_pairs(cfg, steps, windows)? else {
        return Ok(g.constant(Tensor::scalar(0.0)));
    };
    let hp = g.gather_rows(all, &pairs.prev)?;
    let jc = g.constant(pairs.joint);
    let pred = predictor_batch(g, hp, jc)?;
    let tgt = g.gather_rows(all, &pairs.target)?;
    let tgt = g.detach(tgt);
    Ok(g.mse(pred, tgt)?)
}

/// `h_out + P_o o_self`, or one of its ablated forms.
pub fn policy_input_batch(g: &mut Graph<'_>, cfg: &ModelConfig, h_out: Option<Var>, o_self: Var) -> Result<Var, ModelError> {
    let proj = |g: &mut Graph<'_>| -> Result<Var, ModelError> {
        if cfg.residual_identity() {
            Ok(o_self)
        } else {
            let p = g.param("residual.P_o")?;
            Ok(g.matmul(o_self, p)?)
        }
    };
    match (h_out, cfg.uses_observation()) {
        (Some(h), true) => {
            let o = proj(g)?;
            Ok(g.add(h, o)?)
        }
        (Some(h), false) => Ok(h),
        (None, true) => proj(g),
        (None, false) => Err(ModelError::ConflictingFlags("policy input has no terms".into())),
    }
}

/// Full encoder pass for a batch of windows.
pub fn encode(g: &mut Graph<'_>, cfg: &ModelConfig, input: EncoderInput<'_>) -> Result<EncoderOutput, ModelError> {
    encode_with(g, cfg, input, None)
}

/// Encoder pass that reuses step embeddings computed earlier, one row per
/// entry of `input.steps`. Values match [`encode`] bit for bit.
pub fn encode_with(
    g: &mut Graph<'_>,
    cfg: &ModelConfig,
    input: EncoderInput<'_>,
    cached_spatial: Option<Tensor>,
) -> Result<EncoderOutput, ModelError> {
    let b = input.windows.len();
    let mut obs = Vec::with_capacity(b * cfg.obs_dim);
    for w in input.windows {
        let Some(&last) = w.last() else {
            return Err(ModelError::InvalidConfig("empty temporal window".into()));
        };
        obs.extend_from_slice(input.steps[last].self_obs(cfg.obs_dim));
    }
    let o_self = g.constant(mat(b, cfg.obs_dim, obs)?);
    if !cfg.uses_temporal() {
        let policy_input = policy_input_batch(g, cfg, None, o_self)?;
        let pred_loss = g.constant(Tensor::scalar(0.0));
        return Ok(EncoderOutput {
            policy_input,
            h_out: None,
            pred_loss,
        });
    }
    let spatial = match cached_spatial {
        Some(t) => g.constant(t),
        None => spatial_batch(g, cfg, input.steps)?,
    };
    let (all, h_out) = temporal_batch(g, cfg, spatial, input.windows)?;
    let pred_loss = prediction_loss_batch(g, cfg, all, input.steps, input.windows)?;
    let policy_input = policy_input_batch(g, cfg, Some(h_out), o_self)?;
    Ok(EncoderOutput {
        policy_input,
        h_out: Some(h_out),
        pred_loss,
    })
}

/// Step embeddings as plain rows.
pub fn spatial_rows(store: &ParamStore, cfg: &ModelConfig, steps: &[&StepTokens]) -> Result<Vec<Vec<f64>>, ModelError> {
    if steps.is_empty() || !cfg.uses_spatial() {
        return Ok(Vec::new());
    }
    let mut g = Graph::new(store);
    let out = spatial_batch(&mut g, cfg, steps)?;
    let t = g.value(out);
    Ok((0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect())
}

/// Step embedding of a single token set.
pub fn spatial_forward(store: &ParamStore, cfg: &ModelConfig, tokens: &[MdpFeature]) -> Result<Vec<f64>, ModelError> {
    if tokens.len() != cfg.encoder.slots() {
        return Err(ModelError::Autodiff(dtppo_autodiff::AutodiffError::ShapeMismatch {
            op: "spatial_forward",
            lhs: vec![cfg.encoder.slots()],
            rhs: vec![tokens.len()],
        }));
    }
    let st = StepTokens::from_features(tokens);
    let mut g = Graph::new(store);
    let out = spatial_batch(&mut g, cfg, &[&st])?;
    Ok(g.value(out).data().to_vec())
}

/// Temporal outputs for every position of one chronological window.
pub fn temporal_forward(store: &ParamStore, cfg: &ModelConfig, window: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, ModelError> {
    let d = cfg.encoder.d;
    if window.len() > cfg.encoder.horizon {
        return Err(ModelError::WindowTooLong {
            len: window.len(),
            horizon: cfg.encoder.horizon,
        });
    }
    let mut g = Graph::new(store);
    let x = g.constant(mat(window.len(), d, window.concat())?);
    let idx: Vec<usize> = (0..window.len()).collect();
    let (all, _) = temporal_batch(&mut g, cfg, x, &[idx])?;
    let t = g.value(all);
    Ok((0..window.len()).map(|j| t.row_slice(j).to_vec()).collect())
}

/// One-step dynamics prediction from `h_prev` and the joint step context.
pub fn predict_dynamics(
    store: &ParamStore,
    h_prev: &[f64],
    joint_actions: &[[f64; ACT_AUG]],
    joint_rewards: &[f64],
) -> Result<Vec<f64>, ModelError> {
    let mut g = Graph::new(store);
    let h = g.constant(Tensor::row(h_prev));
    let ctx: Vec<f64> = joint_actions.iter().flatten().chain(joint_rewards).copied().collect();
    let j = g.constant(Tensor::row(&ctx));
    let y = predictor_batch(&mut g, h, j)?;
    Ok(g.value(y).data().to_vec())
}

/// Mean squared error between a prediction and its target.
pub fn prediction_loss(predicted: &[f64], target: &[f64]) -> Result<f64, ModelError> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let a = g.constant(Tensor::row(predicted));
    let b = g.constant(Tensor::row(target));
    let l = g.mse(a, b)?;
    Ok(g.value(l).item())
}

/// Policy input for one agent.
pub fn policy_input(store: &ParamStore, cfg: &ModelConfig, h_out: &[f64], o_self: &[f64]) -> Result<Vec<f64>, ModelError> {
    let mut g = Graph::new(store);
    let h = g.constant(Tensor::row(h_out));
    let o = g.constant(Tensor::row(o_self));
    let y = policy_input_batch(&mut g, cfg, Some(h), o)?;
    Ok(g.value(y).data().to_vec())
}
