//! Helpers shared by the integration and acceptance targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regiontrans::autodiff::{Tape, Tensor};
use regiontrans::network::{encode, init_params, predict, NetworkConfig, NetworkParams};
use regiontrans::transfer::{combined_loss, prediction_loss, representation_loss};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Prediction,
    Representation,
    Combined,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Prediction, LossKind::Representation, LossKind::Combined];
}

/// One small random problem: a network, a target window with truth, and a
/// source window of a different size with a random matching.
pub struct Instance {
    pub params: NetworkParams,
    pub target_input: Tensor,
    pub truth: Tensor,
    pub external: Vec<f64>,
    pub source_input: Tensor,
    pub rows: Vec<usize>,
    pub weights: Vec<f64>,
    pub w: f64,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

impl Instance {
    /// Grid at most 4×4, k at most 3, at most 8 hidden states per layer.
    pub fn random(seed: u64) -> Instance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = rng.random_range(1..=2);
        let cfg = NetworkConfig {
            input_channels: rng.random_range(1..=2),
            hidden_channels: (0..layers).map(|_| rng.random_range(1..=8)).collect(),
            kernel_size: if rng.random_bool(0.7) { 3 } else { 1 },
            head_hidden: rng.random_range(1..=6),
            output_channels: rng.random_range(1..=2),
            ext_len: rng.random_range(0..=3),
        };
        let mut params = init_params(&cfg, seed).unwrap();
        // Random biases so no gradient is structurally zero.
        let tensors = params
            .to_tensors()
            .into_iter()
            .map(|t| {
                if t.rank() == 1 {
                    uniform(&mut rng, t.shape(), -0.5, 0.5)
                } else {
                    t
                }
            })
            .collect();
        params = params.with_tensors(tensors).unwrap();
        let k = rng.random_range(1..=3);
        let (tw, th) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let (sw, sh) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let cin = cfg.input_channels;
        let target_input = uniform(&mut rng, &[k, tw, th, cin], 0.0, 1.0);
        let truth = uniform(&mut rng, &[tw, th, cfg.output_channels], 0.0, 1.0);
        let external = (0..cfg.ext_len).map(|_| rng.random_range(0.0..1.0)).collect();
        let source_input = uniform(&mut rng, &[k, sw, sh, cin], 0.0, 1.0);
        let rows = (0..tw * th).map(|_| rng.random_range(0..sw * sh)).collect();
        let weights = (0..tw * th).map(|_| rng.random_range(0.0..1.0)).collect();
        Instance {
            params,
            target_input,
            truth,
            external,
            source_input,
            rows,
            weights,
            w: rng.random_range(0.05..0.95),
        }
    }

    /// Loss value and, when `grads` is set, the gradient for every parameter.
    pub fn eval(&self, params: &NetworkParams, kind: LossKind, grads: bool) -> (f64, Vec<Tensor>) {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, grads);
        let (rep, pred) = predict(&mut tape, &vars, &self.target_input, &self.external).unwrap();
        let truth = tape.constant(self.truth.clone());
        let p = prediction_loss(&mut tape, pred, truth).unwrap();
        let loss = match kind {
            LossKind::Prediction => p,
            LossKind::Representation | LossKind::Combined => {
                let src = encode(&mut tape, &vars, &self.source_input).unwrap();
                let r = representation_loss(&mut tape, rep, src, &self.rows, &self.weights).unwrap();
                if kind == LossKind::Representation {
                    r
                } else {
                    combined_loss(&mut tape, p, r, self.w).unwrap()
                }
            }
        };
        let value = tape.value(loss).item();
        if !grads {
            return (value, Vec::new());
        }
        tape.backward(loss).unwrap();
        (value, vars.grads(&tape))
    }

    /// Worst relative error between autodiff and central differences over
    /// every parameter entry. Entries where both gradients are below the
    /// absolute floor count as exact.
    pub fn check(&self, kind: LossKind) -> GradCheck {
        const H: f64 = 1e-6;
        let (_, analytic) = self.eval(&self.params, kind, true);
        let base = self.params.to_tensors();
        let mut out = GradCheck::default();
        for (ti, t) in base.iter().enumerate() {
            for e in 0..t.len() {
                let at = |delta: f64| {
                    let mut moved = base.clone();
                    moved[ti].data_mut()[e] += delta;
                    let p = self.params.with_tensors(moved).unwrap();
                    self.eval(&p, kind, false).0
                };
                let numeric = (at(H) - at(-H)) / (2.0 * H);
                let a = analytic[ti].data()[e];
                let diff = (a - numeric).abs();
                let scale = a.abs().max(numeric.abs());
                out.entries += 1;
                if scale >= REPORT_FLOOR {
                    out.worst_rel = out.worst_rel.max(diff / scale);
                }
                if diff >= ABS_FLOOR && diff >= REL_TOL * scale {
                    out.violations += 1;
                }
            }
        }
        out
    }
}

pub const REL_TOL: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-7;
// Below this, central differences at H = 1e-6 are dominated by round-off on
// losses of order one, so relative error says nothing about the gradient.
const REPORT_FLOOR: f64 = 1e-5;

/// Outcome of one finite-difference sweep. An entry violates when it misses
/// both the relative and the absolute tolerance; `worst_rel` is taken over
/// entries whose gradient is at least 1e-5.
#[derive(Debug, Default, Clone, Copy)]
pub struct GradCheck {
    pub entries: usize,
    pub violations: usize,
    pub worst_rel: f64,
}

impl GradCheck {
    pub fn ok(&self) -> bool {
        self.violations == 0
    }
}

/// Applies a permutation of region positions to a `[W, H, C]` tensor:
/// output position `p` takes input position `perm[p]`.
pub fn permute_positions(t: &Tensor, perm: &[usize]) -> Tensor {
    let s = t.shape();
    let c = s[2];
    let mut out = vec![0.0; t.len()];
    for (p, &q) in perm.iter().enumerate() {
        out[p * c..(p + 1) * c].copy_from_slice(&t.data()[q * c..(q + 1) * c]);
    }
    Tensor::new(s.to_vec(), out).unwrap()
}
