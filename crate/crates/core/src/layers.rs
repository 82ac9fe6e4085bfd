//! Network building blocks: depthwise-separable convolution with a
//! squeeze-and-excitation gate (the MNSE layer), the ConvLSTM recurrence,
//! and configurable encoder/decoder stacks with skip connections.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::params::{BoundParams, ParameterStore};
use crate::rng::{key_str, CounterRng};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    None,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::None => "none",
        };
        f.write_str(s)
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            "none" => Ok(Activation::None),
            other => Err(Error::InvalidArgument(format!("unknown activation '{other}'"))),
        }
    }
}

/// Shape of one MNSE layer: depthwise-separable conv, SE gate, activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MnseLayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub se_reduction: usize,
    pub activation: Activation,
}

impl MnseLayerSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        se_reduction: usize,
        activation: Activation,
    ) -> Result<Self> {
        let spec = MnseLayerSpec { in_channels, out_channels, kernel_size, stride, se_reduction, activation };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidArgument("channel counts must be >= 1".into()));
        }
        if self.kernel_size.is_multiple_of(2) || self.kernel_size == 0 {
            return Err(Error::InvalidArgument(format!("kernel size must be odd, got {}", self.kernel_size)));
        }
        if self.stride == 0 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        if self.se_reduction == 0 {
            return Err(Error::InvalidArgument("se reduction must be >= 1".into()));
        }
        Ok(())
    }

    /// SE bottleneck width, floored at 1.
    pub fn se_bottleneck(&self) -> usize {
        (self.out_channels / self.se_reduction).max(1)
    }

    pub fn padding(&self) -> usize {
        (self.kernel_size - 1) / 2
    }

    /// Scalar parameter count including biases.
    pub fn param_count(&self) -> u64 {
        let (cin, cout, k) = (self.in_channels as u64, self.out_channels as u64, self.kernel_size as u64);
        let cb = self.se_bottleneck() as u64;
        let dw_sep = k * k * cin + cin + cin * cout + cout;
        let se = cout * cb + cb + cb * cout + cout;
        dw_sep + se
    }
}

// ── Parameter initialization ────────────────────────────────────────

/// Uniform init scaled by fan-in, drawn from a stream keyed by parameter
/// name so values do not depend on registration order.
pub fn init_conv_weight<S: Scalar>(shape: &[usize], fan_in: usize, name: &str, seed: u64) -> Tensor<S> {
    let mut rng = CounterRng::keyed(&[seed, key_str("init"), key_str(name)]);
    let limit = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| S::from_f64(rng.range_f64(-limit, limit)))
}

pub fn register_mnse<S: Scalar>(store: &mut ParameterStore<S>, spec: &MnseLayerSpec, prefix: &str, seed: u64) -> Result<()> {
    spec.validate()?;
    let (cin, cout, k) = (spec.in_channels, spec.out_channels, spec.kernel_size);
    let cb = spec.se_bottleneck();
    let dw_w = format!("{prefix}.dw.w");
    store.insert(&dw_w, init_conv_weight(&[cin, 1, k, k], k * k, &dw_w, seed))?;
    store.insert(&format!("{prefix}.dw.b"), Tensor::zeros(&[cin]))?;
    let pw_w = format!("{prefix}.pw.w");
    store.insert(&pw_w, init_conv_weight(&[cout, cin, 1, 1], cin, &pw_w, seed))?;
    store.insert(&format!("{prefix}.pw.b"), Tensor::zeros(&[cout]))?;
    let r_w = format!("{prefix}.se.r.w");
    store.insert(&r_w, init_conv_weight(&[cb, cout, 1, 1], cout, &r_w, seed))?;
    store.insert(&format!("{prefix}.se.r.b"), Tensor::zeros(&[cb]))?;
    let e_w = format!("{prefix}.se.e.w");
    store.insert(&e_w, init_conv_weight(&[cout, cb, 1, 1], cb, &e_w, seed))?;
    store.insert(&format!("{prefix}.se.e.b"), Tensor::zeros(&[cout]))?;
    Ok(())
}

pub fn register_conv_lstm<S: Scalar>(
    store: &mut ParameterStore<S>,
    input_ch: usize,
    hidden_ch: usize,
    kernel: usize,
    prefix: &str,
    seed: u64,
) -> Result<()> {
    let name = format!("{prefix}.gate.w");
    let fan_in = (input_ch + hidden_ch) * kernel * kernel;
    store.insert(
        &name,
        init_conv_weight(&[4 * hidden_ch, input_ch + hidden_ch, kernel, kernel], fan_in, &name, seed),
    )?;
    // Forget-gate bias starts at 1 so early cells keep their state.
    let mut bias = vec![S::ZERO; 4 * hidden_ch];
    for b in bias.iter_mut().take(2 * hidden_ch).skip(hidden_ch) {
        *b = S::ONE;
    }
    store.insert(&format!("{prefix}.gate.b"), Tensor::new(vec![4 * hidden_ch], bias)?)?;
    Ok(())
}

// ── Forward building blocks ─────────────────────────────────────────

/// Per-channel KxK convolution followed by a 1x1 channel-mixing convolution.
#[allow(clippy::too_many_arguments)]
pub fn depthwise_separable_conv<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    dw_weight: Var,
    dw_bias: Var,
    pw_weight: Var,
    pw_bias: Var,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let d = tape.depthwise_conv2d(x, dw_weight, dw_bias, stride, pad)?;
    tape.conv2d(d, pw_weight, pw_bias, 1, 0)
}

/// Squeeze-and-excitation: global pool, bottleneck transform, sigmoid gate,
/// channelwise rescale of the input.
pub fn se_block<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    reduce_w: Var,
    reduce_b: Var,
    expand_w: Var,
    expand_b: Var,
) -> Result<Var> {
    let pooled = tape.global_avg_pool(x)?;
    let red = tape.conv2d(pooled, reduce_w, reduce_b, 1, 0)?;
    let red = tape.relu(red)?;
    let exp = tape.conv2d(red, expand_w, expand_b, 1, 0)?;
    let gate = tape.sigmoid(exp)?;
    tape.mul_bcast_hw(gate, x)
}

fn apply_activation<S: Scalar>(tape: &mut Tape<S>, x: Var, act: Activation) -> Result<Var> {
    match act {
        Activation::Relu => tape.relu(x),
        Activation::Sigmoid => tape.sigmoid(x),
        Activation::Tanh => tape.tanh(x),
        Activation::None => Ok(x),
    }
}

/// One MNSE layer: depthwise-separable conv, SE gate, then activation.
pub fn mnse_layer<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    spec: &MnseLayerSpec,
    params: &BoundParams,
    prefix: &str,
) -> Result<Var> {
    if tape.value(x).dim(1) != spec.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "mnse layer '{prefix}' expects {} input channels, got {}",
            spec.in_channels,
            tape.value(x).dim(1)
        )));
    }
    let y = depthwise_separable_conv(
        tape,
        x,
        params.var(&format!("{prefix}.dw.w"))?,
        params.var(&format!("{prefix}.dw.b"))?,
        params.var(&format!("{prefix}.pw.w"))?,
        params.var(&format!("{prefix}.pw.b"))?,
        spec.stride,
        spec.padding(),
    )?;
    let y = se_block(
        tape,
        y,
        params.var(&format!("{prefix}.se.r.w"))?,
        params.var(&format!("{prefix}.se.r.b"))?,
        params.var(&format!("{prefix}.se.e.w"))?,
        params.var(&format!("{prefix}.se.e.b"))?,
    )?;
    apply_activation(tape, y, spec.activation)
}

// ── ConvLSTM ────────────────────────────────────────────────────────

/// Recurrent state of one ConvLSTM: hidden and cell maps of equal shape.
#[derive(Clone, Copy, Debug)]
pub struct ConvLstmState {
    pub hidden: Var,
    pub cell: Var,
}

impl ConvLstmState {
    /// Zero state before the first input, recorded as constants.
    pub fn zeros<S: Scalar>(tape: &mut Tape<S>, n: usize, ch: usize, h: usize, w: usize) -> Self {
        let hidden = tape.constant(Tensor::zeros(&[n, ch, h, w]));
        let cell = tape.constant(Tensor::zeros(&[n, ch, h, w]));
        ConvLstmState { hidden, cell }
    }
}

/// One ConvLSTM step without peepholes: a single convolution over the
/// channel-concatenated input and hidden state produces the i, f, g, o gate
/// blocks in that order.
pub fn conv_lstm_step<S: Scalar>(
    tape: &mut Tape<S>,
    input: Var,
    state: &ConvLstmState,
    gate_weight: Var,
    gate_bias: Var,
) -> Result<ConvLstmState> {
    let hidden_shape = tape.value(state.hidden).shape().to_vec();
    if tape.value(state.cell).shape() != hidden_shape.as_slice() {
        return Err(Error::ShapeMismatch("hidden and cell state shapes differ".into()));
    }
    let ch = hidden_shape[1];
    let gw = tape.value(gate_weight);
    if gw.dim(0) != 4 * ch {
        return Err(Error::ShapeMismatch(format!(
            "gate kernel must have {} output channels, got {}",
            4 * ch,
            gw.dim(0)
        )));
    }
    let k = gw.dim(2);
    let xh = tape.concat_ch(&[input, state.hidden])?;
    let gates = tape.conv2d(xh, gate_weight, gate_bias, 1, (k - 1) / 2)?;
    let i = tape.slice_ch(gates, 0, ch)?;
    let f = tape.slice_ch(gates, ch, ch)?;
    let g = tape.slice_ch(gates, 2 * ch, ch)?;
    let o = tape.slice_ch(gates, 3 * ch, ch)?;

    let i = tape.sigmoid(i)?;
    let f = tape.sigmoid(f)?;
    let g = tape.tanh(g)?;
    let o = tape.sigmoid(o)?;

    let keep = tape.mul(f, state.cell)?;
    let write = tape.mul(i, g)?;
    let cell = tape.add(keep, write)?;
    let cell_act = tape.tanh(cell)?;
    let hidden = tape.mul(o, cell_act)?;
    Ok(ConvLstmState { hidden, cell })
}

// ── Encoder / decoder stacks ────────────────────────────────────────

/// One element of a stack: an MNSE layer, a nearest-neighbor 2x upsample,
/// or a skip-connection concat (decoders only).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StackElem {
    Layer(MnseLayerSpec),
    Upsample2x,
    ConcatSkip,
}

/// Ordered layer list describing an encoder or decoder.
///
/// Encoders emit a skip tensor after every layer except the last; decoders
/// consume them at `ConcatSkip` markers in mirrored order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StackSpec {
    pub elems: Vec<StackElem>,
}

/// Channel width of encoder level `i` (1-based): base, then doubled once.
fn level_width(base: usize, level: usize) -> usize {
    if level <= 1 {
        base
    } else {
        base * 2
    }
}

pub fn scaled_width(base: usize, width_mult: f64) -> usize {
    ((base as f64 * width_mult).round() as usize).max(1)
}

impl StackSpec {
    /// Downsampling encoder: `levels` stride-2 MNSE layers. Depth 0 is a
    /// single stride-1 layer.
    pub fn encoder(
        in_ch: usize,
        levels: usize,
        base: usize,
        width_mult: f64,
        kernel: usize,
        se_r: usize,
        hidden_act: Activation,
    ) -> Result<Self> {
        let b = scaled_width(base, width_mult);
        let mut elems = Vec::new();
        if levels == 0 {
            elems.push(StackElem::Layer(MnseLayerSpec::new(in_ch, b, kernel, 1, se_r, hidden_act)?));
        } else {
            let mut prev = in_ch;
            for lvl in 1..=levels {
                let w = level_width(b, lvl);
                elems.push(StackElem::Layer(MnseLayerSpec::new(prev, w, kernel, 2, se_r, hidden_act)?));
                prev = w;
            }
        }
        Ok(StackSpec { elems })
    }

    /// Upsampling decoder mirroring [`StackSpec::encoder`], ending in a
    /// layer with `out_ch` channels and `final_act`.
    #[allow(clippy::too_many_arguments)]
    pub fn decoder(
        in_ch: usize,
        out_ch: usize,
        levels: usize,
        base: usize,
        width_mult: f64,
        kernel: usize,
        se_r: usize,
        hidden_act: Activation,
        final_act: Activation,
    ) -> Result<Self> {
        let b = scaled_width(base, width_mult);
        let mut elems = Vec::new();
        if levels == 0 {
            elems.push(StackElem::Layer(MnseLayerSpec::new(in_ch, out_ch, kernel, 1, se_r, final_act)?));
            return Ok(StackSpec { elems });
        }
        let mut cur = in_ch;
        for lvl in (1..=levels).rev() {
            elems.push(StackElem::Upsample2x);
            if lvl > 1 {
                let skip_w = level_width(b, lvl - 1);
                elems.push(StackElem::ConcatSkip);
                elems.push(StackElem::Layer(MnseLayerSpec::new(cur + skip_w, skip_w, kernel, 1, se_r, hidden_act)?));
                cur = skip_w;
            } else {
                elems.push(StackElem::Layer(MnseLayerSpec::new(cur, out_ch, kernel, 1, se_r, final_act)?));
            }
        }
        Ok(StackSpec { elems })
    }

    /// Stride-1 stack at constant resolution (the mask decoder shape).
    pub fn flat(
        widths: &[usize],
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        se_r: usize,
        hidden_act: Activation,
        final_act: Activation,
    ) -> Result<Self> {
        let mut elems = Vec::new();
        let mut prev = in_ch;
        for &w in widths {
            elems.push(StackElem::Layer(MnseLayerSpec::new(prev, w, kernel, 1, se_r, hidden_act)?));
            prev = w;
        }
        elems.push(StackElem::Layer(MnseLayerSpec::new(prev, out_ch, kernel, 1, se_r, final_act)?));
        Ok(StackSpec { elems })
    }

    pub fn layers(&self) -> impl Iterator<Item = &MnseLayerSpec> {
        self.elems.iter().filter_map(|e| match e {
            StackElem::Layer(l) => Some(l),
            _ => None,
        })
    }

    /// Channel count produced by the stack.
    pub fn out_channels(&self) -> Option<usize> {
        self.layers().last().map(|l| l.out_channels)
    }

    pub fn param_count(&self) -> u64 {
        self.layers().map(|l| l.param_count()).sum()
    }

    /// Element index of the final layer, for addressing its parameters.
    pub fn last_layer_index(&self) -> Option<usize> {
        self.elems.iter().enumerate().rev().find_map(|(i, e)| match e {
            StackElem::Layer(_) => Some(i),
            _ => None,
        })
    }
}

impl fmt::Display for StackSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for e in &self.elems {
            if !first {
                f.write_str(" | ")?;
            }
            first = false;
            match e {
                StackElem::Layer(l) => write!(
                    f,
                    "mnse:{}>{}:k{}:s{}:r{}:{}",
                    l.in_channels, l.out_channels, l.kernel_size, l.stride, l.se_reduction, l.activation
                )?,
                StackElem::Upsample2x => f.write_str("up")?,
                StackElem::ConcatSkip => f.write_str("skip")?,
            }
        }
        Ok(())
    }
}

impl FromStr for StackSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut elems = Vec::new();
        for part in s.split('|').map(str::trim) {
            if part == "up" {
                elems.push(StackElem::Upsample2x);
            } else if part == "skip" {
                elems.push(StackElem::ConcatSkip);
            } else if let Some(rest) = part.strip_prefix("mnse:") {
                let fields: Vec<&str> = rest.split(':').collect();
                if fields.len() != 5 {
                    return Err(Error::Format(format!("bad mnse element '{part}'")));
                }
                let (cin, cout) = fields[0]
                    .split_once('>')
                    .ok_or_else(|| Error::Format(format!("bad channel spec '{}'", fields[0])))?;
                let parse = |s: &str, what: &str| -> Result<usize> {
                    s.parse().map_err(|_| Error::Format(format!("bad {what} '{s}'")))
                };
                elems.push(StackElem::Layer(MnseLayerSpec::new(
                    parse(cin, "channels")?,
                    parse(cout, "channels")?,
                    parse(fields[1].trim_start_matches('k'), "kernel")?,
                    parse(fields[2].trim_start_matches('s'), "stride")?,
                    parse(fields[3].trim_start_matches('r'), "reduction")?,
                    fields[4].parse()?,
                )?));
            } else {
                return Err(Error::Format(format!("unknown stack element '{part}'")));
            }
        }
        Ok(StackSpec { elems })
    }
}

pub fn register_stack<S: Scalar>(store: &mut ParameterStore<S>, spec: &StackSpec, prefix: &str, seed: u64) -> Result<()> {
    for (i, e) in spec.elems.iter().enumerate() {
        if let StackElem::Layer(l) = e {
            register_mnse(store, l, &format!("{prefix}.l{i}"), seed)?;
        }
    }
    Ok(())
}

/// Runs an encoder stack. Returns the bottleneck plus per-level skip
/// tensors (outputs of every layer except the last, outermost first).
pub fn run_encoder<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    spec: &StackSpec,
    params: &BoundParams,
    prefix: &str,
) -> Result<(Var, Vec<Var>)> {
    let n_layers = spec.layers().count();
    let mut skips = Vec::new();
    let mut cur = x;
    let mut seen = 0;
    for (i, e) in spec.elems.iter().enumerate() {
        match e {
            StackElem::Layer(l) => {
                cur = mnse_layer(tape, cur, l, params, &format!("{prefix}.l{i}"))?;
                seen += 1;
                if seen < n_layers {
                    skips.push(cur);
                }
            }
            StackElem::Upsample2x => cur = tape.upsample2x(cur)?,
            StackElem::ConcatSkip => {
                return Err(Error::InvalidArgument("encoder stacks cannot consume skips".into()))
            }
        }
    }
    Ok((cur, skips))
}

/// Runs a decoder stack, consuming encoder skips innermost-first at each
/// `ConcatSkip` marker.
pub fn run_decoder<S: Scalar>(
    tape: &mut Tape<S>,
    bottleneck: Var,
    skips: &[Var],
    spec: &StackSpec,
    params: &BoundParams,
    prefix: &str,
) -> Result<Var> {
    let mut cur = bottleneck;
    let mut skip_iter = skips.iter().rev();
    let mut used = 0;
    for (i, e) in spec.elems.iter().enumerate() {
        match e {
            StackElem::Layer(l) => cur = mnse_layer(tape, cur, l, params, &format!("{prefix}.l{i}"))?,
            StackElem::Upsample2x => cur = tape.upsample2x(cur)?,
            StackElem::ConcatSkip => {
                let skip = skip_iter.next().ok_or_else(|| {
                    Error::ShapeMismatch(format!("decoder '{prefix}' expects more skips than provided"))
                })?;
                let (a, b) = (tape.value(cur).shape().to_vec(), tape.value(*skip).shape().to_vec());
                if a[0] != b[0] || a[2] != b[2] || a[3] != b[3] {
                    return Err(Error::ShapeMismatch(format!(
                        "skip/level mismatch in '{prefix}': {a:?} vs {b:?}"
                    )));
                }
                cur = tape.concat_ch(&[cur, *skip])?;
                used += 1;
            }
        }
    }
    if used != skips.len() {
        return Err(Error::ShapeMismatch(format!(
            "decoder '{prefix}' consumed {used} of {} skips",
            skips.len()
        )));
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::ConvPath;

    fn zeroed<S: Scalar>(store: &ParameterStore<S>) -> ParameterStore<S> {
        let mut z = ParameterStore::new();
        for (name, t) in store.iter() {
            z.set(name, Tensor::zeros(t.shape()));
        }
        z
    }

    #[test]
    fn dw_separable_zero_kernels_zero_output() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::from_fn(&[1, 2, 4, 4], |i| i as f64 * 0.1));
        let dw_w = t.leaf(Tensor::zeros(&[2, 1, 3, 3]));
        let dw_b = t.leaf(Tensor::zeros(&[2]));
        let pw_w = t.leaf(Tensor::zeros(&[3, 2, 1, 1]));
        let pw_b = t.leaf(Tensor::zeros(&[3]));
        let y = depthwise_separable_conv(&mut t, x, dw_w, dw_b, pw_w, pw_b, 1, 1).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dw_delta_kernel_equals_pointwise_conv() {
        // Depthwise kernel = centered delta leaves the input untouched, so
        // the composition must equal a plain 1x1 convolution.
        let mut rng = CounterRng::keyed(&[31]);
        let x_t = Tensor::from_fn(&[1, 3, 5, 5], |_| rng.range_f64(-1.0, 1.0));
        let pw_w_t = Tensor::from_fn(&[4, 3, 1, 1], |_| rng.range_f64(-1.0, 1.0));
        let pw_b_t = Tensor::from_fn(&[4], |_| rng.range_f64(-0.5, 0.5));
        let mut delta = vec![0.0f64; 3 * 9];
        for c in 0..3 {
            delta[c * 9 + 4] = 1.0;
        }

        let mut t = Tape::<f64>::new();
        let x = t.constant(x_t.clone());
        let dw_w = t.constant(Tensor::new(vec![3, 1, 3, 3], delta).unwrap());
        let dw_b = t.constant(Tensor::zeros(&[3]));
        let pw_w = t.constant(pw_w_t.clone());
        let pw_b = t.constant(pw_b_t.clone());
        let sep = depthwise_separable_conv(&mut t, x, dw_w, dw_b, pw_w, pw_b, 1, 1).unwrap();
        let direct = t.conv2d(x, pw_w, pw_b, 1, 0).unwrap();
        assert!(t.value(sep).max_abs_diff(t.value(direct)) < 1e-12);
    }

    #[test]
    fn separable_kernel_matches_full_convolution() {
        // W[o,i,:,:] = P[o,i] * D[i,:,:] factorizes exactly into
        // depthwise(D) then pointwise(P).
        let mut rng = CounterRng::keyed(&[37]);
        let x_t = Tensor::from_fn(&[1, 2, 5, 5], |_| rng.range_f64(-1.0, 1.0));
        let d_t = Tensor::from_fn(&[2, 1, 3, 3], |_| rng.range_f64(-1.0, 1.0));
        let p_t = Tensor::from_fn(&[3, 2, 1, 1], |_| rng.range_f64(-1.0, 1.0));
        let full = Tensor::from_fn(&[3, 2, 3, 3], |i| {
            let kx = i % 3;
            let ky = (i / 3) % 3;
            let ci = (i / 9) % 2;
            let co = i / 18;
            p_t.data()[co * 2 + ci] * d_t.data()[(ci * 3 + ky) * 3 + kx]
        });

        let mut t = Tape::<f64>::with_conv_path(ConvPath::Direct);
        let x = t.constant(x_t);
        let dw_w = t.constant(d_t);
        let dw_b = t.constant(Tensor::zeros(&[2]));
        let pw_w = t.constant(p_t);
        let pw_b = t.constant(Tensor::zeros(&[3]));
        let sep = depthwise_separable_conv(&mut t, x, dw_w, dw_b, pw_w, pw_b, 1, 1).unwrap();
        let w = t.constant(full);
        let b = t.constant(Tensor::zeros(&[3]));
        let conv = t.conv2d(x, w, b, 1, 1).unwrap();
        assert!(t.value(sep).max_abs_diff(t.value(conv)) < 1e-5);
    }

    #[test]
    fn se_zero_weights_halves_input() {
        let mut t = Tape::<f64>::new();
        let x_t = Tensor::from_fn(&[1, 4, 3, 3], |i| i as f64 * 0.05 - 0.5);
        let x = t.constant(x_t.clone());
        let r_w = t.constant(Tensor::zeros(&[1, 4, 1, 1]));
        let r_b = t.constant(Tensor::zeros(&[1]));
        let e_w = t.constant(Tensor::zeros(&[4, 1, 1, 1]));
        let e_b = t.constant(Tensor::zeros(&[4]));
        let y = se_block(&mut t, x, r_w, r_b, e_w, e_b).unwrap();
        let half = x_t.map(|v| v * 0.5);
        assert!(t.value(y).max_abs_diff(&half) < 1e-12);
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn se_matches_scalar_reference_and_contracts() {
        let mut rng = CounterRng::keyed(&[41]);
        let (c, r) = (6usize, 2usize);
        let cb = c / r;
        let x_t = Tensor::from_fn(&[2, c, 4, 4], |_| rng.range_f64(-1.0, 1.0));
        let rw = Tensor::from_fn(&[cb, c, 1, 1], |_| rng.range_f64(-1.0, 1.0));
        let rb = Tensor::from_fn(&[cb], |_| rng.range_f64(-0.5, 0.5));
        let ew = Tensor::from_fn(&[c, cb, 1, 1], |_| rng.range_f64(-1.0, 1.0));
        let eb = Tensor::from_fn(&[c], |_| rng.range_f64(-0.5, 0.5));

        // Reference with independent loops.
        let mut want = vec![0.0f64; 2 * c * 16];
        for n in 0..2 {
            let mut pooled = vec![0.0f64; c];
            for ci in 0..c {
                for i in 0..16 {
                    pooled[ci] += x_t.data()[(n * c + ci) * 16 + i];
                }
                pooled[ci] /= 16.0;
            }
            let mut mid = vec![0.0f64; cb];
            for j in 0..cb {
                let mut s = rb.data()[j];
                for ci in 0..c {
                    s += rw.data()[j * c + ci] * pooled[ci];
                }
                mid[j] = s.max(0.0);
            }
            for ci in 0..c {
                let mut s = eb.data()[ci];
                for j in 0..cb {
                    s += ew.data()[ci * cb + j] * mid[j];
                }
                let gate = 1.0 / (1.0 + (-s).exp());
                for i in 0..16 {
                    want[(n * c + ci) * 16 + i] = gate * x_t.data()[(n * c + ci) * 16 + i];
                }
            }
        }

        let mut t = Tape::<f64>::new();
        let x = t.constant(x_t.clone());
        let vars = [rw, rb, ew, eb].map(|v| t.constant(v));
        let y = se_block(&mut t, x, vars[0], vars[1], vars[2], vars[3]).unwrap();
        let got = t.value(y);
        for (g, w) in got.data().iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-6);
        }
        // Gate in (0,1): output magnitude never exceeds input magnitude.
        for (g, x) in got.data().iter().zip(x_t.data().iter()) {
            assert!(g.abs() <= x.abs() + 1e-12);
        }
    }

    #[test]
    fn se_zero_input_zero_output() {
        let mut rng = CounterRng::keyed(&[43]);
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::zeros(&[1, 4, 3, 3]));
        let r_w = t.constant(Tensor::from_fn(&[2, 4, 1, 1], |_| rng.range_f64(-1.0, 1.0)));
        let r_b = t.constant(Tensor::from_fn(&[2], |_| rng.range_f64(-1.0, 1.0)));
        let e_w = t.constant(Tensor::from_fn(&[4, 2, 1, 1], |_| rng.range_f64(-1.0, 1.0)));
        let e_b = t.constant(Tensor::from_fn(&[4], |_| rng.range_f64(-1.0, 1.0)));
        let y = se_block(&mut t, x, r_w, r_b, e_w, e_b).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mnse_zero_params_relu_is_zero_and_stride_halves() {
        let spec = MnseLayerSpec::new(4, 8, 3, 2, 4, Activation::Relu).unwrap();
        let mut store = ParameterStore::<f64>::new();
        register_mnse(&mut store, &spec, "m", 1).unwrap();
        let store = zeroed(&store);
        let mut t = Tape::new();
        let bound = store.bind(&mut t);
        let x = t.constant(Tensor::from_fn(&[1, 4, 8, 8], |i| i as f64 * 0.01));
        let y = mnse_layer(&mut t, x, &spec, &bound, "m").unwrap();
        assert_eq!(t.value(y).shape(), &[1, 8, 4, 4]);
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mnse_same_channels_stride_one_preserves_shape() {
        let spec = MnseLayerSpec::new(5, 5, 3, 1, 4, Activation::Tanh).unwrap();
        let mut store = ParameterStore::<f64>::new();
        register_mnse(&mut store, &spec, "m", 2).unwrap();
        let mut t = Tape::new();
        let bound = store.bind(&mut t);
        let x = t.constant(Tensor::from_fn(&[2, 5, 7, 9], |i| (i as f64 * 0.13).sin()));
        let y = mnse_layer(&mut t, x, &spec, &bound, "m").unwrap();
        assert_eq!(t.value(y).shape(), &[2, 5, 7, 9]);
    }

    #[test]
    fn conv_lstm_zero_everything_stays_zero() {
        let mut t = Tape::<f64>::new();
        let state = ConvLstmState::zeros(&mut t, 1, 3, 4, 4);
        let x = t.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = t.constant(Tensor::zeros(&[12, 5, 3, 3]));
        let b = t.constant(Tensor::zeros(&[12]));
        let next = conv_lstm_step(&mut t, x, &state, w, b).unwrap();
        assert!(t.value(next.hidden).data().iter().all(|&v| v == 0.0));
        assert!(t.value(next.cell).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_lstm_1x1_matches_scalar_lstm() {
        let mut rng = CounterRng::keyed(&[53]);
        // 1x1 spatial map, 1x1 kernel, 1 channel: a plain scalar LSTM cell.
        let wx: Vec<f64> = (0..8).map(|_| rng.range_f64(-1.0, 1.0)).collect();
        let b: Vec<f64> = (0..4).map(|_| rng.range_f64(-0.5, 0.5)).collect();
        let (x0, h0, c0) = (rng.range_f64(-1.0, 1.0), rng.range_f64(-1.0, 1.0), rng.range_f64(-1.0, 1.0));

        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        // Gate order i, f, g, o; each sees [x, h].
        let gi = wx[0] * x0 + wx[1] * h0 + b[0];
        let gf = wx[2] * x0 + wx[3] * h0 + b[1];
        let gg = wx[4] * x0 + wx[5] * h0 + b[2];
        let go = wx[6] * x0 + wx[7] * h0 + b[3];
        let c1 = sig(gf) * c0 + sig(gi) * gg.tanh();
        let h1 = sig(go) * c1.tanh();

        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::new(vec![1, 1, 1, 1], vec![x0]).unwrap());
        let state = ConvLstmState {
            hidden: t.constant(Tensor::new(vec![1, 1, 1, 1], vec![h0]).unwrap()),
            cell: t.constant(Tensor::new(vec![1, 1, 1, 1], vec![c0]).unwrap()),
        };
        let w = t.constant(Tensor::new(vec![4, 2, 1, 1], wx).unwrap());
        let bias = t.constant(Tensor::new(vec![4], b).unwrap());
        let next = conv_lstm_step(&mut t, x, &state, w, bias).unwrap();
        assert!((t.value(next.cell).item() - c1).abs() < 1e-6);
        assert!((t.value(next.hidden).item() - h1).abs() < 1e-6);
    }

    #[test]
    fn conv_lstm_saturated_forget_gate_keeps_cell() {
        let mut t = Tape::<f64>::new();
        let ch = 2;
        let cell_t = Tensor::from_fn(&[1, ch, 3, 3], |i| (i as f64 * 0.21).sin() * 0.8);
        let state = ConvLstmState {
            hidden: t.constant(Tensor::zeros(&[1, ch, 3, 3])),
            cell: t.constant(cell_t.clone()),
        };
        let x = t.constant(Tensor::zeros(&[1, 1, 3, 3]));
        let w = t.constant(Tensor::zeros(&[4 * ch, 1 + ch, 3, 3]));
        let mut bias = vec![0.0f64; 4 * ch];
        for b in bias.iter_mut().take(2 * ch).skip(ch) {
            *b = 10.0;
        }
        let b = t.constant(Tensor::new(vec![4 * ch], bias).unwrap());
        let next = conv_lstm_step(&mut t, x, &state, w, b).unwrap();
        assert!(t.value(next.cell).max_abs_diff(&cell_t) < 1e-4);
    }

    #[test]
    fn conv_lstm_cell_growth_is_bounded() {
        let mut rng = CounterRng::keyed(&[59]);
        let mut t = Tape::<f64>::new();
        let ch = 3;
        let cell_t = Tensor::from_fn(&[1, ch, 4, 4], |_| rng.range_f64(-2.0, 2.0));
        let state = ConvLstmState {
            hidden: t.constant(Tensor::from_fn(&[1, ch, 4, 4], |_| rng.range_f64(-1.0, 1.0))),
            cell: t.constant(cell_t.clone()),
        };
        let x = t.constant(Tensor::from_fn(&[1, 2, 4, 4], |_| rng.range_f64(-1.0, 1.0)));
        let w = t.constant(Tensor::from_fn(&[4 * ch, 2 + ch, 3, 3], |_| rng.range_f64(-1.0, 1.0)));
        let b = t.constant(Tensor::from_fn(&[4 * ch], |_| rng.range_f64(-1.0, 1.0)));
        let next = conv_lstm_step(&mut t, x, &state, w, b).unwrap();
        // |c'| <= |c| + 1: forget gate <= 1 and the write term <= 1.
        for (c1, c0) in t.value(next.cell).data().iter().zip(cell_t.data().iter()) {
            assert!(c1.abs() <= c0.abs() + 1.0 + 1e-12);
        }
    }

    #[test]
    fn stack_depth0_passthrough_and_3level_shapes() {
        let enc0 = StackSpec::encoder(3, 0, 16, 1.0, 3, 4, Activation::Relu).unwrap();
        assert_eq!(enc0.elems.len(), 1);

        let enc = StackSpec::encoder(1, 3, 32, 1.0, 3, 4, Activation::Relu).unwrap();
        let dec = StackSpec::decoder(64, 1, 3, 32, 1.0, 3, 4, Activation::Relu, Activation::Sigmoid).unwrap();
        let mut store = ParameterStore::<f64>::new();
        register_stack(&mut store, &enc, "enc", 5).unwrap();
        register_stack(&mut store, &dec, "dec", 5).unwrap();
        let mut t = Tape::new();
        let bound = store.bind(&mut t);
        let x = t.constant(Tensor::from_fn(&[1, 1, 64, 64], |i| (i % 255) as f64 / 255.0));
        let (bot, skips) = run_encoder(&mut t, x, &enc, &bound, "enc").unwrap();
        assert_eq!(t.value(bot).shape(), &[1, 64, 8, 8]);
        assert_eq!(skips.len(), 2);
        let y = run_decoder(&mut t, bot, &skips, &dec, &bound, "dec").unwrap();
        assert_eq!(t.value(y).shape(), &[1, 1, 64, 64]);
    }

    #[test]
    fn decoder_rejects_skip_mismatch() {
        let dec = StackSpec::decoder(64, 1, 3, 32, 1.0, 3, 4, Activation::Relu, Activation::Sigmoid).unwrap();
        let mut store = ParameterStore::<f64>::new();
        register_stack(&mut store, &dec, "dec", 5).unwrap();
        let mut t = Tape::new();
        let bound = store.bind(&mut t);
        let bot = t.constant(Tensor::zeros(&[1, 64, 8, 8]));
        assert!(run_decoder(&mut t, bot, &[], &dec, &bound, "dec").is_err());
    }

    #[test]
    fn stack_spec_roundtrips_through_text() {
        let enc = StackSpec::encoder(2, 3, 24, 0.75, 3, 4, Activation::Relu).unwrap();
        let back: StackSpec = enc.to_string().parse().unwrap();
        assert_eq!(enc, back);

        let dec = StackSpec::decoder(36, 2, 2, 24, 0.75, 3, 4, Activation::Relu, Activation::None).unwrap();
        let back: StackSpec = dec.to_string().parse().unwrap();
        assert_eq!(dec, back);
        assert!("mnse:junk".parse::<StackSpec>().is_err());
    }

    #[test]
    fn param_count_formula() {
        // K=3, Cin=8, Cout=16 with biases: 72 + 128 + 8 + 16 = 224 for the
        // separable part.
        let spec = MnseLayerSpec::new(8, 16, 3, 1, 4, Activation::Relu).unwrap();
        let dw_sep = 3u64 * 3 * 8 + 8 + 8 * 16 + 16;
        assert_eq!(dw_sep, 224);
        let se = 16 * 4 + 4 + 4 * 16 + 16;
        assert_eq!(spec.param_count(), dw_sep + se);

        let mut store = ParameterStore::<f32>::new();
        register_mnse(&mut store, &spec, "x", 9).unwrap();
        assert_eq!(store.total_scalars(), spec.param_count());
    }
}
