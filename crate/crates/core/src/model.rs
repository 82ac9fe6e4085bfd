//! The full prediction model: per-step hybrid generation of appearance,
//! forward-warped, and backward-warped frames, mask-based fusion, the
//! decomposed variational loss, and autoregressive rollout.

use crate::error::{Error, Result};
use crate::latent::{
    kl_diagonal_gaussian, latent_head_step, register_latent_head, reparameterize, GaussianParams, LatentTriple, Role,
};
use crate::layers::{
    conv_lstm_step, register_conv_lstm, register_stack, run_decoder, run_encoder, Activation, ConvLstmState, StackSpec,
};
use crate::optim::Adam;
use crate::params::{BoundParams, ParameterStore};
use crate::rng::{key_str, CounterRng};
use crate::scalar::Scalar;
use crate::tape::{ReduceKind, Tape, Var};
use crate::tensor::Tensor;

/// Everything that shapes the model and its training run.
#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub frame_channels: usize,
    pub frame_h: usize,
    pub frame_w: usize,
    /// Conditioning length k; motion encoders need at least two frames.
    pub cond_frames: usize,
    /// Prediction horizon during training.
    pub pred_frames: usize,
    pub levels: usize,
    pub base_channels: usize,
    /// Channel scaling knob of the encoder/decoder widths.
    pub width_mult: f64,
    pub kernel_size: usize,
    pub se_reduction: usize,
    pub latent_dim: usize,
    pub lstm_hidden: usize,
    pub latent_lstm_hidden: usize,
    pub mask_widths: Vec<usize>,
    /// Non-final activation of every encoder/decoder stack.
    pub hidden_activation: Activation,
    /// KL weight in the training objective.
    pub beta: f64,
    pub learning_rate: f64,
    pub train_steps: usize,
    pub batch_size: usize,
    pub splat_epsilon: f64,
    /// Whether warm-up predictions over the conditioning window contribute
    /// to the loss.
    pub include_warmup_loss: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults: 64x64 grayscale, minutes of CPU training.
    pub fn desk_default() -> Self {
        ModelConfig {
            frame_channels: 1,
            frame_h: 64,
            frame_w: 64,
            cond_frames: 5,
            pred_frames: 5,
            levels: 3,
            base_channels: 32,
            width_mult: 0.75,
            kernel_size: 3,
            se_reduction: 4,
            latent_dim: 16,
            lstm_hidden: 32,
            latent_lstm_hidden: 32,
            mask_widths: vec![16, 16],
            hidden_activation: Activation::Relu,
            beta: 1e-4,
            learning_rate: 2e-3,
            train_steps: 2000,
            batch_size: 1,
            splat_epsilon: 1e-6,
            include_warmup_loss: true,
            seed: 42,
        }
    }

    /// Small shape for verification work (gradient checks, fast tests).
    pub fn tiny(frame_h: usize, frame_w: usize) -> Self {
        ModelConfig {
            frame_channels: 1,
            frame_h,
            frame_w,
            cond_frames: 2,
            pred_frames: 2,
            levels: 1,
            base_channels: 6,
            width_mult: 1.0,
            kernel_size: 3,
            se_reduction: 4,
            latent_dim: 3,
            lstm_hidden: 6,
            latent_lstm_hidden: 6,
            mask_widths: vec![6],
            hidden_activation: Activation::Relu,
            beta: 1e-2,
            learning_rate: 2e-3,
            train_steps: 0,
            batch_size: 1,
            splat_epsilon: 1e-6,
            include_warmup_loss: true,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cond_frames < 2 {
            return Err(Error::InvalidArgument("cond_frames must be >= 2 (motion needs two frames)".into()));
        }
        if self.pred_frames < 1 {
            return Err(Error::InvalidArgument("pred_frames must be >= 1".into()));
        }
        if self.beta < 0.0 {
            return Err(Error::InvalidArgument("beta must be >= 0".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        let div = 1usize << self.levels;
        if !self.frame_h.is_multiple_of(div) || !self.frame_w.is_multiple_of(div) || self.frame_h / div == 0 {
            return Err(Error::InvalidArgument(format!(
                "frame {}x{} not divisible by 2^levels={div}",
                self.frame_h, self.frame_w
            )));
        }
        if self.splat_epsilon <= 0.0 {
            return Err(Error::InvalidArgument("splat_epsilon must be > 0".into()));
        }
        Ok(())
    }

    pub fn bottleneck_hw(&self) -> (usize, usize) {
        let div = 1usize << self.levels;
        (self.frame_h / div, self.frame_w / div)
    }

    pub fn pixel_encoder_spec(&self) -> Result<StackSpec> {
        StackSpec::encoder(
            self.frame_channels,
            self.levels,
            self.base_channels,
            self.width_mult,
            self.kernel_size,
            self.se_reduction,
            self.hidden_activation,
        )
    }

    /// Motion encoders consume two channel-concatenated frames.
    pub fn motion_encoder_spec(&self) -> Result<StackSpec> {
        StackSpec::encoder(
            2 * self.frame_channels,
            self.levels,
            self.base_channels,
            self.width_mult,
            self.kernel_size,
            self.se_reduction,
            self.hidden_activation,
        )
    }

    pub fn bottleneck_ch(&self) -> usize {
        self.pixel_encoder_spec().expect("valid stack").out_channels().expect("non-empty stack")
    }

    /// Frames live in [0,1], so the pixel decoder ends in a sigmoid.
    pub fn pixel_decoder_spec(&self) -> Result<StackSpec> {
        StackSpec::decoder(
            self.lstm_hidden,
            self.frame_channels,
            self.levels,
            self.base_channels,
            self.width_mult,
            self.kernel_size,
            self.se_reduction,
            self.hidden_activation,
            Activation::Sigmoid,
        )
    }

    /// Flow decoders stay linear: displacements in raw pixel units.
    pub fn flow_decoder_spec(&self) -> Result<StackSpec> {
        StackSpec::decoder(
            self.lstm_hidden,
            2,
            self.levels,
            self.base_channels,
            self.width_mult,
            self.kernel_size,
            self.se_reduction,
            self.hidden_activation,
            Activation::None,
        )
    }

    /// The mask decoder sees the three candidate frames plus the splat
    /// validity channel and emits three fusion logits per pixel.
    pub fn mask_decoder_spec(&self) -> Result<StackSpec> {
        StackSpec::flat(
            &self.mask_widths,
            3 * self.frame_channels + 1,
            3,
            self.kernel_size,
            self.se_reduction,
            self.hidden_activation,
            Activation::None,
        )
    }
}

const LATENT_HEADS: [&str; 6] = [
    "lat.prior_p",
    "lat.post_p",
    "lat.prior_fw",
    "lat.post_fw",
    "lat.prior_bw",
    "lat.post_bw",
];

/// One step's outputs: the three candidate frames, their flows, the fusion
/// masks, the fused prediction, and the splat coverage channel.
#[derive(Clone, Copy, Debug)]
pub struct PredictionBundle {
    pub x_p: Var,
    pub x_fw: Var,
    pub x_bw: Var,
    pub flow_fw: Var,
    pub flow_bw: Var,
    /// `[N,3,H,W]` simplex weights, softmax of the mask decoder logits.
    pub masks: Var,
    pub fused: Var,
    pub splat_validity: Var,
}

/// Recurrent state of the three branch ConvLSTMs plus the six latent heads.
pub struct ModelStates {
    pub pixel: ConvLstmState,
    pub fw: ConvLstmState,
    pub bw: ConvLstmState,
    pub prior_p: ConvLstmState,
    pub post_p: ConvLstmState,
    pub prior_fw: ConvLstmState,
    pub post_fw: ConvLstmState,
    pub prior_bw: ConvLstmState,
    pub post_bw: ConvLstmState,
}

impl ModelStates {
    pub fn init<S: Scalar>(tape: &mut Tape<S>, cfg: &ModelConfig, batch: usize) -> Self {
        let (bh, bw) = cfg.bottleneck_hw();
        let lstm = |tape: &mut Tape<S>| ConvLstmState::zeros(tape, batch, cfg.lstm_hidden, bh, bw);
        let head = |tape: &mut Tape<S>| ConvLstmState::zeros(tape, batch, cfg.latent_lstm_hidden, 1, 1);
        ModelStates {
            pixel: lstm(tape),
            fw: lstm(tape),
            bw: lstm(tape),
            prior_p: head(tape),
            post_p: head(tape),
            prior_fw: head(tape),
            post_fw: head(tape),
            prior_bw: head(tape),
            post_bw: head(tape),
        }
    }
}

/// Encoder outputs feeding one prediction step.
pub struct StepFeatures {
    pub pixel_bot: Var,
    pub pixel_skips: Vec<Var>,
    pub fw_bot: Var,
    pub fw_skips: Vec<Var>,
    pub bw_bot: Var,
    pub bw_skips: Vec<Var>,
}

/// Per-pixel convex fusion of the three candidate frames. The logits go
/// through a channel softmax, which enforces the simplex constraint; the
/// masks are broadcast across color channels.
pub fn fuse<S: Scalar>(tape: &mut Tape<S>, x_p: Var, x_fw: Var, x_bw: Var, mask_logits: Var) -> Result<(Var, Var)> {
    let shape = tape.value(x_p).shape().to_vec();
    if tape.value(x_fw).shape() != shape.as_slice() || tape.value(x_bw).shape() != shape.as_slice() {
        return Err(Error::ShapeMismatch("fuse candidates must share one shape".into()));
    }
    let lg = tape.value(mask_logits).shape().to_vec();
    if lg.len() != 4 || lg[1] != 3 || lg[0] != shape[0] || lg[2] != shape[2] || lg[3] != shape[3] {
        return Err(Error::ShapeMismatch(format!(
            "mask logits must be [N,3,H,W] matching frames, got {lg:?} vs {shape:?}"
        )));
    }
    let masks = tape.softmax_ch(mask_logits)?;
    let m_p = tape.slice_ch(masks, 0, 1)?;
    let m_fw = tape.slice_ch(masks, 1, 1)?;
    let m_bw = tape.slice_ch(masks, 2, 1)?;
    let a = tape.mul_bcast_ch(m_p, x_p)?;
    let b = tape.mul_bcast_ch(m_fw, x_fw)?;
    let c = tape.mul_bcast_ch(m_bw, x_bw)?;
    let ab = tape.add(a, b)?;
    let fused = tape.add(ab, c)?;
    Ok((fused, masks))
}

/// Seven reconstruction/KL components of one training objective evaluation.
/// `total` always equals the recombination of the stored parts.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub recon_p: f64,
    pub recon_fw: f64,
    pub recon_bw: f64,
    pub recon_fused: f64,
    pub kl_p: f64,
    pub kl_fw: f64,
    pub kl_bw: f64,
    pub beta: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn recombine(&self) -> f64 {
        self.recon_p + self.recon_fw + self.recon_bw + self.recon_fused + self.beta * (self.kl_p + self.kl_fw + self.kl_bw)
    }
}

/// Posterior/prior Gaussian pairs of one step, one per branch.
#[derive(Clone, Copy)]
pub struct StepDistributions {
    pub q_p: GaussianParams,
    pub p_p: GaussianParams,
    pub q_fw: GaussianParams,
    pub p_fw: GaussianParams,
    pub q_bw: GaussianParams,
    pub p_bw: GaussianParams,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RolloutMode {
    /// Teacher forcing with posterior latents; requires targets.
    TrainPosterior,
    /// Autoregressive: fused predictions feed back, latents from priors.
    InferPrior,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RolloutDiagnostics {
    pub prior_head_evals: usize,
    pub posterior_head_evals: usize,
    pub predicted_steps: usize,
}

/// Tape-level result of a rollout. `bundles[first_horizon_index..]` are the
/// steps beyond the conditioning window.
pub struct Rollout {
    pub bundles: Vec<PredictionBundle>,
    pub dists: Vec<StepDistributions>,
    pub targets: Vec<Var>,
    pub first_horizon_index: usize,
    pub diagnostics: RolloutDiagnostics,
}

pub struct Model<S: Scalar> {
    pub cfg: ModelConfig,
    pub params: ParameterStore<S>,
}

impl<S: Scalar> Model<S> {
    /// Fresh model with seeded initialization.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let params = Self::register(&cfg)?;
        Ok(Model { cfg, params })
    }

    /// Wraps loaded parameters, verifying every tensor name and shape.
    pub fn from_parts(cfg: ModelConfig, params: ParameterStore<S>) -> Result<Self> {
        cfg.validate()?;
        let expected = Self::register(&cfg)?;
        for (name, t) in expected.iter() {
            let got = params
                .get(name)
                .map_err(|_| Error::InvalidArgument(format!("checkpoint is missing tensor '{name}'")))?;
            if got.shape() != t.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "checkpoint tensor '{name}' has shape {:?}, model expects {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        for (name, _) in params.iter() {
            if !expected.contains(name) {
                return Err(Error::InvalidArgument(format!("checkpoint has unexpected tensor '{name}'")));
            }
        }
        Ok(Model { cfg, params })
    }

    fn register(cfg: &ModelConfig) -> Result<ParameterStore<S>> {
        let mut store = ParameterStore::new();
        let seed = cfg.seed;
        register_stack(&mut store, &cfg.pixel_encoder_spec()?, "pixel_enc", seed)?;
        register_stack(&mut store, &cfg.motion_encoder_spec()?, "fw_enc", seed)?;
        register_stack(&mut store, &cfg.motion_encoder_spec()?, "bw_enc", seed)?;
        let lstm_in = cfg.bottleneck_ch() + cfg.latent_dim;
        register_conv_lstm(&mut store, lstm_in, cfg.lstm_hidden, cfg.kernel_size, "pixel_lstm", seed)?;
        register_conv_lstm(&mut store, lstm_in, cfg.lstm_hidden, cfg.kernel_size, "fw_lstm", seed)?;
        register_conv_lstm(&mut store, lstm_in, cfg.lstm_hidden, cfg.kernel_size, "bw_lstm", seed)?;
        register_stack(&mut store, &cfg.pixel_decoder_spec()?, "pixel_dec", seed)?;
        register_stack(&mut store, &cfg.flow_decoder_spec()?, "fw_dec", seed)?;
        register_stack(&mut store, &cfg.flow_decoder_spec()?, "bw_dec", seed)?;
        register_stack(&mut store, &cfg.mask_decoder_spec()?, "mask_dec", seed)?;
        for prefix in LATENT_HEADS {
            register_latent_head(&mut store, cfg.bottleneck_ch(), cfg.latent_lstm_hidden, cfg.latent_dim, prefix, seed)?;
        }
        Ok(store)
    }

    fn check_frame(&self, t: &Tensor<S>, what: &str) -> Result<()> {
        let c = self.cfg.frame_channels;
        if t.rank() != 4 || t.dim(1) != c || t.dim(2) != self.cfg.frame_h || t.dim(3) != self.cfg.frame_w {
            return Err(Error::ShapeMismatch(format!(
                "{what} must be [N,{c},{},{}], got {:?}",
                self.cfg.frame_h,
                self.cfg.frame_w,
                t.shape()
            )));
        }
        Ok(())
    }

    /// Runs the three encoders for one step: pixel features of the latest
    /// frame, motion features of the two latest frames concatenated.
    pub fn encode_step(&self, tape: &mut Tape<S>, bound: &BoundParams, x_prev2: Var, x_prev: Var) -> Result<StepFeatures> {
        let (pixel_bot, pixel_skips) = run_encoder(tape, x_prev, &self.cfg.pixel_encoder_spec()?, bound, "pixel_enc")?;
        let pair = tape.concat_ch(&[x_prev2, x_prev])?;
        let (fw_bot, fw_skips) = run_encoder(tape, pair, &self.cfg.motion_encoder_spec()?, bound, "fw_enc")?;
        let (bw_bot, bw_skips) = run_encoder(tape, pair, &self.cfg.motion_encoder_spec()?, bound, "bw_enc")?;
        Ok(StepFeatures { pixel_bot, pixel_skips, fw_bot, fw_skips, bw_bot, bw_skips })
    }

    #[allow(clippy::too_many_arguments)]
    fn branch(
        &self,
        tape: &mut Tape<S>,
        bound: &BoundParams,
        bot: Var,
        skips: &[Var],
        z: Var,
        state: &ConvLstmState,
        lstm_prefix: &str,
        dec_spec: &StackSpec,
        dec_prefix: &str,
    ) -> Result<(Var, ConvLstmState)> {
        let (n, bh, bw) = {
            let v = tape.value(bot);
            (v.dim(0), v.dim(2), v.dim(3))
        };
        let z4 = tape.reshape(z, &[n, self.cfg.latent_dim, 1, 1])?;
        let zmap = tape.broadcast_hw(z4, bh, bw)?;
        let lstm_in = tape.concat_ch(&[bot, zmap])?;
        let next = conv_lstm_step(
            tape,
            lstm_in,
            state,
            bound.var(&format!("{lstm_prefix}.gate.w"))?,
            bound.var(&format!("{lstm_prefix}.gate.b"))?,
        )?;
        let out = run_decoder(tape, next.hidden, skips, dec_spec, bound, dec_prefix)?;
        if !tape.value(out).is_all_finite() {
            return Err(Error::NonFinite(format!("{dec_prefix} produced a non-finite activation")));
        }
        Ok((out, next))
    }

    /// The core of one prediction step, after encoding and latent sampling.
    pub fn predict_core(
        &self,
        tape: &mut Tape<S>,
        bound: &BoundParams,
        feats: &StepFeatures,
        x_prev: Var,
        latents: &LatentTriple,
        states: &mut ModelStates,
    ) -> Result<PredictionBundle> {
        let (x_p, st_p) = self.branch(
            tape,
            bound,
            feats.pixel_bot,
            &feats.pixel_skips,
            latents.z_p,
            &states.pixel,
            "pixel_lstm",
            &self.cfg.pixel_decoder_spec()?,
            "pixel_dec",
        )?;
        let (flow_fw, st_fw) = self.branch(
            tape,
            bound,
            feats.fw_bot,
            &feats.fw_skips,
            latents.z_fw,
            &states.fw,
            "fw_lstm",
            &self.cfg.flow_decoder_spec()?,
            "fw_dec",
        )?;
        let (flow_bw, st_bw) = self.branch(
            tape,
            bound,
            feats.bw_bot,
            &feats.bw_skips,
            latents.z_bw,
            &states.bw,
            "bw_lstm",
            &self.cfg.flow_decoder_spec()?,
            "bw_dec",
        )?;
        states.pixel = st_p;
        states.fw = st_fw;
        states.bw = st_bw;

        let (x_fw, splat_validity) = tape.forward_warp_average(x_prev, flow_fw, self.cfg.splat_epsilon)?;
        let x_bw = tape.backward_warp(x_prev, flow_bw)?;

        let mask_in = tape.concat_ch(&[x_p, x_fw, x_bw, splat_validity])?;
        let mask_logits = run_decoder(tape, mask_in, &[], &self.cfg.mask_decoder_spec()?, bound, "mask_dec")?;
        if !tape.value(mask_logits).is_all_finite() {
            return Err(Error::NonFinite("mask_dec produced a non-finite activation".into()));
        }
        let (fused, masks) = fuse(tape, x_p, x_fw, x_bw, mask_logits)?;
        Ok(PredictionBundle { x_p, x_fw, x_bw, flow_fw, flow_bw, masks, fused, splat_validity })
    }

    /// One full prediction step from two input frames and sampled latents.
    pub fn predict_step(
        &self,
        tape: &mut Tape<S>,
        bound: &BoundParams,
        x_prev2: Var,
        x_prev: Var,
        latents: &LatentTriple,
        states: &mut ModelStates,
    ) -> Result<PredictionBundle> {
        self.check_frame(tape.value(x_prev2), "x_prev2")?;
        self.check_frame(tape.value(x_prev), "x_prev")?;
        let feats = self.encode_step(tape, bound, x_prev2, x_prev)?;
        self.predict_core(tape, bound, &feats, x_prev, latents, states)
    }

    fn sample_noise(&self, batch: usize, seed: u64, step: usize, head: u64) -> Tensor<S> {
        let mut rng = CounterRng::keyed(&[seed, key_str("latent-noise"), step as u64, head]);
        Tensor::from_fn(&[batch, self.cfg.latent_dim], |_| S::from_f64(rng.normal()))
    }

    /// Rolls the model forward on a tape.
    ///
    /// `frames[t]` are `[N,C,H,W]` ground-truth frames: at least `k` of them
    /// in `InferPrior` mode, at least `k + horizon` in `TrainPosterior`
    /// mode. Prediction starts at t = 2 (teacher-forced warm-up inside the
    /// conditioning window) and continues through the horizon.
    pub fn rollout_on_tape(
        &self,
        tape: &mut Tape<S>,
        bound: &BoundParams,
        frames: &[Tensor<S>],
        horizon: usize,
        mode: RolloutMode,
        seed: u64,
    ) -> Result<Rollout> {
        let k = self.cfg.cond_frames;
        if horizon < 1 {
            return Err(Error::InvalidArgument("rollout horizon must be >= 1".into()));
        }
        if frames.len() < k {
            return Err(Error::InvalidArgument(format!(
                "rollout needs at least {k} conditioning frames, got {}",
                frames.len()
            )));
        }
        if mode == RolloutMode::TrainPosterior && frames.len() < k + horizon {
            return Err(Error::InvalidArgument(format!(
                "posterior rollout needs targets: {} frames required, got {}",
                k + horizon,
                frames.len()
            )));
        }
        for (i, f) in frames.iter().enumerate() {
            self.check_frame(f, &format!("frame {i}"))?;
        }
        let batch = frames[0].dim(0);
        let total = k + horizon;

        // Frames as fed forward: ground truth everywhere in train mode,
        // fused predictions beyond the conditioning window at inference.
        let mut inputs: Vec<Var> = frames.iter().take(total.min(frames.len())).map(|f| tape.constant(f.clone())).collect();

        let mut states = ModelStates::init(tape, &self.cfg, batch);
        let mut bundles = Vec::new();
        let mut dists = Vec::new();
        let mut targets = Vec::new();
        let mut diag = RolloutDiagnostics::default();
        // Under teacher forcing, the posterior encodes (x_{t-1}, x_t) —
        // exactly the features the next step's prior side needs, so they
        // carry over instead of being recomputed.
        let mut carried_feats: Option<StepFeatures> = None;

        for t in 2..total {
            let x_prev2 = inputs[t - 2];
            let x_prev = inputs[t - 1];
            let feats = match carried_feats.take() {
                Some(f) => f,
                None => self.encode_step(tape, bound, x_prev2, x_prev)?,
            };

            let (g_prior_p, st) = latent_head_step(tape, feats.pixel_bot, &states.prior_p, bound, "lat.prior_p", Role::Prior)?;
            states.prior_p = st;
            let (g_prior_fw, st) = latent_head_step(tape, feats.fw_bot, &states.prior_fw, bound, "lat.prior_fw", Role::Prior)?;
            states.prior_fw = st;
            let (g_prior_bw, st) = latent_head_step(tape, feats.bw_bot, &states.prior_bw, bound, "lat.prior_bw", Role::Prior)?;
            states.prior_bw = st;
            diag.prior_head_evals += 3;

            let sampled_from = if mode == RolloutMode::TrainPosterior {
                // Posterior heads condition on the target frame x_t.
                let x_t = inputs[t];
                let post_feats = self.encode_step(tape, bound, x_prev, x_t)?;

                let (q_p, st) =
                    latent_head_step(tape, post_feats.pixel_bot, &states.post_p, bound, "lat.post_p", Role::Posterior)?;
                states.post_p = st;
                let (q_fw, st) =
                    latent_head_step(tape, post_feats.fw_bot, &states.post_fw, bound, "lat.post_fw", Role::Posterior)?;
                states.post_fw = st;
                let (q_bw, st) =
                    latent_head_step(tape, post_feats.bw_bot, &states.post_bw, bound, "lat.post_bw", Role::Posterior)?;
                states.post_bw = st;
                diag.posterior_head_evals += 3;
                carried_feats = Some(post_feats);

                let triple = (q_p, q_fw, q_bw);
                dists.push(StepDistributions {
                    q_p,
                    p_p: g_prior_p,
                    q_fw,
                    p_fw: g_prior_fw,
                    q_bw,
                    p_bw: g_prior_bw,
                });
                targets.push(inputs[t]);
                triple
            } else {
                (g_prior_p, g_prior_fw, g_prior_bw)
            };

            let latents = LatentTriple {
                z_p: reparameterize(tape, &sampled_from.0, &self.sample_noise(batch, seed, t, 0))?,
                z_fw: reparameterize(tape, &sampled_from.1, &self.sample_noise(batch, seed, t, 1))?,
                z_bw: reparameterize(tape, &sampled_from.2, &self.sample_noise(batch, seed, t, 2))?,
            };

            let bundle = self.predict_core(tape, bound, &feats, x_prev, &latents, &mut states)?;
            diag.predicted_steps += 1;

            // Beyond the conditioning window the fused prediction feeds back
            // as the next input at inference; ground truth, if supplied past
            // k, is never consulted there.
            if mode == RolloutMode::InferPrior && t >= k {
                if t < inputs.len() {
                    inputs[t] = bundle.fused;
                } else {
                    inputs.push(bundle.fused);
                }
            }
            bundles.push(bundle);
        }

        Ok(Rollout {
            bundles,
            dists,
            targets,
            first_horizon_index: k - 2,
            diagnostics: diag,
        })
    }

    /// Convenience rollout returning horizon frames as plain tensors.
    pub fn rollout(
        &self,
        frames: &[Tensor<S>],
        horizon: usize,
        mode: RolloutMode,
        seed: u64,
    ) -> Result<(Vec<Tensor<S>>, RolloutDiagnostics)> {
        let mut tape = Tape::new();
        tape.set_check_finite(false);
        let bound = self.params.bind(&mut tape);
        let ro = self.rollout_on_tape(&mut tape, &bound, frames, horizon, mode, seed)?;
        let out = ro.bundles[ro.first_horizon_index..]
            .iter()
            .map(|b| tape.value(b.fused).clone())
            .collect();
        Ok((out, ro.diagnostics))
    }

    /// One optimizer step over a teacher-forced posterior rollout.
    pub fn train_step(&mut self, frames: &[Tensor<S>], opt: &mut Adam, noise_seed: u64) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        tape.set_check_finite(false);
        let bound = self.params.bind(&mut tape);
        let ro = self.rollout_on_tape(&mut tape, &bound, frames, self.cfg.pred_frames, RolloutMode::TrainPosterior, noise_seed)?;
        let from = if self.cfg.include_warmup_loss { 0 } else { ro.first_horizon_index };
        let (breakdown, total) = elbo_loss(
            &mut tape,
            &ro.targets[from..],
            &ro.bundles[from..],
            &ro.dists[from..],
            self.cfg.beta,
        )?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite(format!("training loss diverged at optimizer step {}", opt.steps_taken() + 1)));
        }
        let grads = tape.backward(total)?;
        opt.step(&mut self.params, &bound, &grads)?;
        Ok(breakdown)
    }
}

/// The decomposed objective: squared-error reconstruction of all four
/// generated frames (summed over pixels, averaged over the batch) plus the
/// weighted KL of each latent branch. Returns host-side bookkeeping and the
/// scalar loss variable for the backward pass.
pub fn elbo_loss<S: Scalar>(
    tape: &mut Tape<S>,
    targets: &[Var],
    bundles: &[PredictionBundle],
    dists: &[StepDistributions],
    beta: f64,
) -> Result<(LossBreakdown, Var)> {
    if targets.len() != bundles.len() || dists.len() != bundles.len() {
        return Err(Error::InvalidArgument(format!(
            "step-count mismatch: {} targets, {} bundles, {} distribution pairs",
            targets.len(),
            bundles.len(),
            dists.len()
        )));
    }
    if bundles.is_empty() {
        return Err(Error::InvalidArgument("loss needs at least one predicted step".into()));
    }
    let batch = tape.value(targets[0]).dim(0) as f64;

    let mut recon_terms: [Option<Var>; 4] = [None, None, None, None];
    for (b, &target) in bundles.iter().zip(targets.iter()) {
        for (slot, branch) in [b.x_p, b.x_fw, b.x_bw, b.fused].into_iter().enumerate() {
            let diff = tape.sub(branch, target)?;
            let sq = tape.square(diff)?;
            let sum = tape.sum_all(sq)?;
            let per_batch = tape.scale(sum, 1.0 / batch)?;
            recon_terms[slot] = Some(match recon_terms[slot] {
                Some(acc) => tape.add(acc, per_batch)?,
                None => per_batch,
            });
        }
    }
    let [recon_p, recon_fw, recon_bw, recon_fused] = recon_terms.map(|v| v.expect("non-empty"));

    let mut kl_terms: [Option<Var>; 3] = [None, None, None];
    for d in dists {
        for (slot, (q, p)) in [(d.q_p, d.p_p), (d.q_fw, d.p_fw), (d.q_bw, d.p_bw)].into_iter().enumerate() {
            let kl = kl_diagonal_gaussian(tape, &q, &p)?;
            let mean = tape.reduce(kl, ReduceKind::Mean, &[0], false)?;
            kl_terms[slot] = Some(match kl_terms[slot] {
                Some(acc) => tape.add(acc, mean)?,
                None => mean,
            });
        }
    }
    let [kl_p, kl_fw, kl_bw] = kl_terms.map(|v| v.expect("non-empty"));

    let r1 = tape.add(recon_p, recon_fw)?;
    let r2 = tape.add(r1, recon_bw)?;
    let recon_total = tape.add(r2, recon_fused)?;
    let k1 = tape.add(kl_p, kl_fw)?;
    let kl_total = tape.add(k1, kl_bw)?;
    let weighted = tape.scale(kl_total, beta)?;
    let total_var = tape.add(recon_total, weighted)?;

    let mut breakdown = LossBreakdown {
        recon_p: tape.value(recon_p).item().to_f64(),
        recon_fw: tape.value(recon_fw).item().to_f64(),
        recon_bw: tape.value(recon_bw).item().to_f64(),
        recon_fused: tape.value(recon_fused).item().to_f64(),
        kl_p: tape.value(kl_p).item().to_f64(),
        kl_fw: tape.value(kl_fw).item().to_f64(),
        kl_bw: tape.value(kl_bw).item().to_f64(),
        beta,
        total: 0.0,
    };
    breakdown.total = breakdown.recombine();
    Ok((breakdown, total_var))
}

/// Stacks per-sequence `[C,H,W]` frames into one `[B,C,H,W]` batch tensor.
pub fn stack_batch<S: Scalar>(frames: &[Tensor<S>]) -> Result<Tensor<S>> {
    if frames.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let shape = frames[0].shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch(format!("expected [C,H,W] frames, got {shape:?}")));
    }
    let mut data = Vec::with_capacity(frames.len() * frames[0].numel());
    for f in frames {
        if f.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch("batch frames must share one shape".into()));
        }
        data.extend_from_slice(f.data());
    }
    Tensor::new(vec![frames.len(), shape[0], shape[1], shape[2]], data)
}
