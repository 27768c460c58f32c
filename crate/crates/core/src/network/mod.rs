//! Stacked ConvLSTM encoder producing per-region representations, merged with
//! citywide context and mapped to predictions by position-wise 1×1 convolutions.

mod checkpoint;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid network configuration: {0}")]
    Config(String),
    #[error("input sequence is empty (k = 0)")]
    EmptySequence,
    #[error("external feature length {got} does not match configured {expected}")]
    ExternalLength { expected: usize, got: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Shape(#[from] AutodiffError),
}

/// Layer sizes. Defaults reproduce the published architecture: two ConvLSTM
/// layers of 32 hidden states with 5×5 filters, one hidden 1×1 layer of 32,
/// and a 28-long external feature vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub input_channels: usize,
    pub hidden_channels: Vec<usize>,
    pub kernel_size: usize,
    pub head_hidden: usize,
    pub output_channels: usize,
    pub ext_len: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_channels: 2,
            hidden_channels: vec![32, 32],
            kernel_size: 5,
            head_hidden: 32,
            output_channels: 2,
            ext_len: 28,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.hidden_channels.is_empty() {
            return Err(NetworkError::Config("at least one ConvLSTM layer is required".into()));
        }
        if self.input_channels == 0
            || self.output_channels == 0
            || self.head_hidden == 0
            || self.hidden_channels.contains(&0)
        {
            return Err(NetworkError::Config("channel counts must be positive".into()));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(NetworkError::Config(format!(
                "kernel size {} must be odd",
                self.kernel_size
            )));
        }
        Ok(())
    }

    pub fn rep_channels(&self) -> usize {
        *self.hidden_channels.last().unwrap_or(&0)
    }
}

/// Weights of one ConvLSTM layer; gates ordered (input, forget, output, candidate).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLstmLayerParams {
    /// `[kh, kw, Cin, 4·Ch]`
    pub kernel: Tensor,
    /// `[kh, kw, Ch, 4·Ch]`
    pub hidden_kernel: Tensor,
    /// `[4·Ch]`
    pub bias: Tensor,
}

impl ConvLstmLayerParams {
    pub fn hidden_channels(&self) -> usize {
        self.hidden_kernel.shape()[2]
    }

    pub fn input_channels(&self) -> usize {
        self.kernel.shape()[2]
    }

    fn validate(&self) -> Result<(), NetworkError> {
        let k = self.kernel.shape();
        let hk = self.hidden_kernel.shape();
        let ok = k.len() == 4
            && hk.len() == 4
            && k[0] == hk[0]
            && k[1] == hk[1]
            && hk[3] == 4 * hk[2]
            && k[3] == hk[3]
            && self.bias.shape() == [hk[3]];
        if !ok {
            return Err(NetworkError::Config(format!(
                "inconsistent ConvLSTM shapes: kernel {k:?}, hidden kernel {hk:?}, bias {:?}",
                self.bias.shape()
            )));
        }
        Ok(())
    }
}

/// A 1×1 convolution: `[1, 1, Cin, Cout]` kernel plus `[Cout]` bias.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
}

/// All learnable parameters. Nothing here depends on the grid size.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub layers: Vec<ConvLstmLayerParams>,
    /// Hidden layers use tanh; the last layer is linear.
    pub head: Vec<HeadLayer>,
}

impl NetworkParams {
    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.layers.is_empty() || self.head.is_empty() {
            return Err(NetworkError::Config("empty layer list".into()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            layer.validate()?;
            if l > 0 && layer.input_channels() != self.layers[l - 1].hidden_channels() {
                return Err(NetworkError::Config(format!(
                    "layer {l} expects {} input channels, previous layer has {}",
                    layer.input_channels(),
                    self.layers[l - 1].hidden_channels()
                )));
            }
        }
        let mut cin = self.head[0].kernel.shape()[2];
        if cin < self.rep_channels() {
            return Err(NetworkError::Config("head input narrower than representation".into()));
        }
        for h in &self.head {
            let s = h.kernel.shape();
            if s.len() != 4 || s[0] != 1 || s[1] != 1 || s[2] != cin || h.bias.shape() != [s[3]] {
                return Err(NetworkError::Config(format!("bad head layer shape {s:?}")));
            }
            cin = s[3];
        }
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        self.layers[0].input_channels()
    }

    pub fn rep_channels(&self) -> usize {
        self.layers.last().unwrap().hidden_channels()
    }

    pub fn ext_len(&self) -> usize {
        self.head[0].kernel.shape()[2] - self.rep_channels()
    }

    pub fn output_channels(&self) -> usize {
        *self.head.last().unwrap().kernel.shape().last().unwrap()
    }

    /// Parameter tensors in canonical order with their checkpoint names.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.kernel"), &l.kernel));
            out.push((format!("layer{i}.hidden_kernel"), &l.hidden_kernel));
            out.push((format!("layer{i}.bias"), &l.bias));
        }
        for (i, h) in self.head.iter().enumerate() {
            out.push((format!("head{i}.kernel"), &h.kernel));
            out.push((format!("head{i}.bias"), &h.bias));
        }
        out
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        self.named().into_iter().map(|(_, t)| t.clone()).collect()
    }

    /// Rebuilds parameters with this structure from tensors in canonical order.
    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<Self, NetworkError> {
        let names = self.named();
        if tensors.len() != names.len() {
            return Err(NetworkError::Config(format!(
                "expected {} tensors, got {}",
                names.len(),
                tensors.len()
            )));
        }
        for ((name, old), new) in names.iter().zip(&tensors) {
            if old.shape() != new.shape() {
                return Err(NetworkError::Config(format!(
                    "{name}: shape {:?} expected {:?}",
                    new.shape(),
                    old.shape()
                )));
            }
        }
        let mut it = tensors.into_iter();
        let layers = self
            .layers
            .iter()
            .map(|_| ConvLstmLayerParams {
                kernel: it.next().unwrap(),
                hidden_kernel: it.next().unwrap(),
                bias: it.next().unwrap(),
            })
            .collect();
        let head = self
            .head
            .iter()
            .map(|_| HeadLayer {
                kernel: it.next().unwrap(),
                bias: it.next().unwrap(),
            })
            .collect();
        Ok(NetworkParams { layers, head })
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Records every parameter on `tape`, as tracked leaves or as constants.
    pub fn register(&self, tape: &mut Tape, tracked: bool) -> NetworkVars {
        let mut put = |t: &Tensor| {
            if tracked {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let layers = self
            .layers
            .iter()
            .map(|l| LayerVars {
                kernel: put(&l.kernel),
                hidden_kernel: put(&l.hidden_kernel),
                bias: put(&l.bias),
                hidden: l.hidden_channels(),
            })
            .collect();
        let head = self.head.iter().map(|h| (put(&h.kernel), put(&h.bias))).collect();
        NetworkVars {
            layers,
            head,
            ext_len: self.ext_len(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerVars {
    pub kernel: Var,
    pub hidden_kernel: Var,
    pub bias: Var,
    pub hidden: usize,
}

/// Tape handles for a registered [`NetworkParams`].
#[derive(Debug, Clone)]
pub struct NetworkVars {
    pub layers: Vec<LayerVars>,
    pub head: Vec<(Var, Var)>,
    ext_len: usize,
}

impl NetworkVars {
    /// Handles in the same order as [`NetworkParams::named`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend([l.kernel, l.hidden_kernel, l.bias]);
        }
        for &(k, b) in &self.head {
            out.extend([k, b]);
        }
        out
    }

    /// Accumulated gradients in canonical order; zeros where none flowed.
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.all()
            .into_iter()
            .map(|v| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
            .collect()
    }
}

/// One ConvLSTM step (no peephole terms). `None` states stand for zeros.
///
/// `x` is `[W, H, Cin]`; returns `(h, c)`, each `[W, H, Ch]`.
pub fn convlstm_cell(
    tape: &mut Tape,
    layer: &LayerVars,
    x: Var,
    state: Option<(Var, Var)>,
) -> Result<(Var, Var), NetworkError> {
    let ch = layer.hidden;
    let mut gates = tape.conv2d(x, layer.kernel, Some(layer.bias))?;
    if let Some((h_prev, _)) = state {
        let from_hidden = tape.conv2d(h_prev, layer.hidden_kernel, None)?;
        gates = tape.add(gates, from_hidden)?;
    }
    let i_pre = tape.slice_channels(gates, 0, ch)?;
    let f_pre = tape.slice_channels(gates, ch, ch)?;
    let o_pre = tape.slice_channels(gates, 2 * ch, ch)?;
    let g_pre = tape.slice_channels(gates, 3 * ch, ch)?;
    let i = tape.sigmoid(i_pre)?;
    let o = tape.sigmoid(o_pre)?;
    let g = tape.tanh(g_pre)?;
    let ig = tape.mul(i, g)?;
    let c = match state {
        Some((_, c_prev)) => {
            let f = tape.sigmoid(f_pre)?;
            let fc = tape.mul(f, c_prev)?;
            tape.add(fc, ig)?
        }
        None => ig,
    };
    let tc = tape.tanh(c)?;
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

/// Runs the ConvLSTM stack over `input` (`[k, W, H, Cin]`) from zero state and
/// returns the last hidden state of the top layer, `[W, H, L_r]`.
pub fn encode(tape: &mut Tape, vars: &NetworkVars, input: &Tensor) -> Result<Var, NetworkError> {
    let s = input.shape();
    if s.len() != 4 {
        return Err(NetworkError::Shape(AutodiffError::ShapeMismatch {
            op: "encode input",
            left: s.to_vec(),
            right: vec![0, 0, 0, 0],
        }));
    }
    let k = s[0];
    if k == 0 {
        return Err(NetworkError::EmptySequence);
    }
    let mut sequence: Vec<Var> = (0..k).map(|t| tape.constant(input.index_axis0(t))).collect();
    for layer in &vars.layers {
        let mut state = None;
        let mut outputs = Vec::with_capacity(k);
        for &x in &sequence {
            let (h, c) = convlstm_cell(tape, layer, x, state)?;
            state = Some((h, c));
            outputs.push(h);
        }
        sequence = outputs;
    }
    Ok(*sequence.last().unwrap())
}

/// Merges the citywide context into the representation and applies the 1×1 head.
pub fn predict_from_rep(tape: &mut Tape, vars: &NetworkVars, rep: Var, external: &[f64]) -> Result<Var, NetworkError> {
    if external.len() != vars.ext_len {
        return Err(NetworkError::ExternalLength {
            expected: vars.ext_len,
            got: external.len(),
        });
    }
    let mut x = if external.is_empty() {
        rep
    } else {
        let s = tape.shape(rep).to_vec();
        let positions = s[0] * s[1];
        let mut tiled = Vec::with_capacity(positions * external.len());
        for _ in 0..positions {
            tiled.extend_from_slice(external);
        }
        let ctx = tape.constant(Tensor::new(vec![s[0], s[1], external.len()], tiled)?);
        tape.concat_channels(&[rep, ctx])?
    };
    let last = vars.head.len() - 1;
    for (l, &(kernel, bias)) in vars.head.iter().enumerate() {
        x = tape.conv2d(x, kernel, Some(bias))?;
        if l < last {
            x = tape.tanh(x)?;
        }
    }
    Ok(x)
}

/// Full forward pass: returns `(representation, prediction)`.
pub fn predict(
    tape: &mut Tape,
    vars: &NetworkVars,
    input: &Tensor,
    external: &[f64],
) -> Result<(Var, Var), NetworkError> {
    let rep = encode(tape, vars, input)?;
    let pred = predict_from_rep(tape, vars, rep, external)?;
    Ok((rep, pred))
}

/// Forward pass without gradient tracking.
pub fn predict_values(params: &NetworkParams, input: &Tensor, external: &[f64]) -> Result<Tensor, NetworkError> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let (_, pred) = predict(&mut tape, &vars, input, external)?;
    Ok(tape.value(pred).clone())
}

pub fn encode_values(params: &NetworkParams, input: &Tensor) -> Result<Tensor, NetworkError> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let rep = encode(&mut tape, &vars, input)?;
    Ok(tape.value(rep).clone())
}

/// Glorot-uniform bound for a convolution kernel of shape `[kh, kw, Cin, Cout]`.
pub fn glorot_bound(shape: &[usize]) -> f64 {
    let receptive = shape[0] * shape[1];
    let fan_in = receptive * shape[2];
    let fan_out = receptive * shape[3];
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn glorot(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let bound = glorot_bound(shape);
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("positive shape")
}

/// Glorot-uniform kernels, zero biases, forget-gate biases set to 1.
pub fn init_params(config: &NetworkConfig, seed: u64) -> Result<NetworkParams, NetworkError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ks = config.kernel_size;
    let mut cin = config.input_channels;
    let mut layers = Vec::new();
    for &ch in &config.hidden_channels {
        let kernel = glorot(&[ks, ks, cin, 4 * ch], &mut rng);
        let hidden_kernel = glorot(&[ks, ks, ch, 4 * ch], &mut rng);
        let mut bias = Tensor::zeros(&[4 * ch]);
        bias.data_mut()[ch..2 * ch].fill(1.0);
        layers.push(ConvLstmLayerParams {
            kernel,
            hidden_kernel,
            bias,
        });
        cin = ch;
    }
    let merged = config.rep_channels() + config.ext_len;
    let head = [
        (merged, config.head_hidden),
        (config.head_hidden, config.output_channels),
    ]
    .into_iter()
    .map(|(i, o)| HeadLayer {
        kernel: glorot(&[1, 1, i, o], &mut rng),
        bias: Tensor::zeros(&[o]),
    })
    .collect();
    let params = NetworkParams { layers, head };
    params.validate()?;
    Ok(params)
}
