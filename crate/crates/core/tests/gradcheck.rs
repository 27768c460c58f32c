mod common;

use common::{Instance, LossKind};
use proptest::prelude::*;
use regiontrans::autodiff::{Tape, Tensor, Var};
use regiontrans::network::{init_params, NetworkConfig};

#[test]
fn losses_match_central_differences() {
    for seed in 0..20 {
        let inst = Instance::random(seed);
        for kind in LossKind::ALL {
            let c = inst.check(kind);
            assert!(c.ok(), "seed {seed} {kind:?}: {c:?}");
        }
    }
}

#[test]
fn full_network_four_by_four() {
    let mut inst = Instance::random(99);
    let cfg = NetworkConfig {
        input_channels: 2,
        hidden_channels: vec![4],
        kernel_size: 3,
        head_hidden: 4,
        output_channels: 2,
        ext_len: 2,
    };
    inst.params = init_params(&cfg, 7).unwrap();
    inst.target_input = Tensor::new(
        vec![3, 4, 4, 2],
        (0..96).map(|i| ((i * 37) % 17) as f64 / 17.0).collect(),
    )
    .unwrap();
    inst.truth = Tensor::filled(&[4, 4, 2], 0.3);
    inst.external = vec![1.0, 0.0];
    let c = inst.check(LossKind::Prediction);
    assert!(c.ok(), "{c:?}");
}

#[derive(Debug, Clone)]
enum Step {
    Add(usize),
    Sub(usize),
    Mul(usize),
    Sigmoid,
    Tanh,
    Scale(f64),
    Conv,
    ConcatSlice,
    Weighted,
}

fn step() -> impl Strategy<Value = Step> {
    prop_oneof![
        (0usize..4).prop_map(Step::Add),
        (0usize..4).prop_map(Step::Sub),
        (0usize..4).prop_map(Step::Mul),
        Just(Step::Sigmoid),
        Just(Step::Tanh),
        (-2.0f64..2.0).prop_map(Step::Scale),
        Just(Step::Conv),
        Just(Step::ConcatSlice),
        Just(Step::Weighted),
    ]
}

const SHAPE: [usize; 3] = [3, 2, 2];

/// Builds the graph from two leaves and a 3×3 kernel and returns the loss.
fn build(tape: &mut Tape, leaves: &[Var], steps: &[Step]) -> Var {
    let mut stack = vec![leaves[0], leaves[1]];
    let weights = Tensor::new(SHAPE.to_vec(), (0..12).map(|i| 0.25 + i as f64 / 12.0).collect()).unwrap();
    for s in steps {
        let x = *stack.last().unwrap();
        let pick = |i: usize| stack[i % stack.len()];
        let y = match *s {
            Step::Add(i) => tape.add(x, pick(i)),
            Step::Sub(i) => tape.sub(x, pick(i)),
            Step::Mul(i) => tape.mul(x, pick(i)),
            Step::Sigmoid => tape.sigmoid(x),
            Step::Tanh => tape.tanh(x),
            Step::Scale(f) => tape.scale(x, f),
            Step::Conv => tape.conv2d(x, leaves[2], None),
            Step::ConcatSlice => {
                let c = tape.concat_channels(&[x, leaves[1]]).unwrap();
                tape.slice_channels(c, 1, 2)
            }
            Step::Weighted => tape.mul_const(x, weights.clone()),
        }
        .unwrap();
        stack.push(y);
    }
    let last = *stack.last().unwrap();
    let sq = tape.sum_squares(last).unwrap();
    let m = tape.mean(leaves[0]).unwrap();
    tape.add(sq, m).unwrap()
}

fn eval(values: &[Tensor], steps: &[Step], grads: bool) -> (f64, Vec<Tensor>) {
    let mut tape = Tape::new();
    let leaves: Vec<Var> = values
        .iter()
        .map(|v| {
            if grads {
                tape.leaf(v.clone())
            } else {
                tape.constant(v.clone())
            }
        })
        .collect();
    let loss = build(&mut tape, &leaves, steps);
    let value = tape.value(loss).item();
    if !grads {
        return (value, Vec::new());
    }
    tape.backward(loss).unwrap();
    let g = leaves
        .iter()
        .zip(values)
        .map(|(&l, v)| tape.grad(l).cloned().unwrap_or_else(|| Tensor::zeros(v.shape())))
        .collect();
    (value, g)
}

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-1.0f64..1.0, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_graphs_match_central_differences(
        a in tensor(SHAPE.to_vec()),
        b in tensor(SHAPE.to_vec()),
        k in tensor(vec![3, 3, 2, 2]),
        steps in prop::collection::vec(step(), 1..8),
    ) {
        let values = vec![a, b, k];
        let (_, analytic) = eval(&values, &steps, true);
        let h = 1e-6;
        for (ti, t) in values.iter().enumerate() {
            for e in 0..t.len() {
                let mut up = values.clone();
                up[ti].data_mut()[e] += h;
                let mut down = values.clone();
                down[ti].data_mut()[e] -= h;
                let numeric = (eval(&up, &steps, false).0 - eval(&down, &steps, false).0) / (2.0 * h);
                let a = analytic[ti].data()[e];
                let diff = (a - numeric).abs();
                prop_assert!(
                    diff < 1e-7 || diff / a.abs().max(numeric.abs()) < 1e-4,
                    "leaf {ti} entry {e}: autodiff {a} vs numeric {numeric}"
                );
            }
        }
    }
}
