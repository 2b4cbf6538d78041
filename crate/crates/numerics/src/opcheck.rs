//! A table of every differentiable tape operation for finite-difference
//! sweeps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{finite_diff_check, FdOptions, FdReport, ParamStore, PoolMode, Result, Tape, Tensor, Var};

pub type Op = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// One differentiable operation on random inputs of fixed shapes.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Vec<usize>>,
    /// Draw inputs from `[0.5, 2)` instead of `[-1.5, 1.5)`.
    pub positive: bool,
    pub op: Op,
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], positive: bool) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        if positive {
            rng.random_range(0.5..2.0)
        } else {
            rng.random_range(-1.5..1.5)
        }
    })
}

/// Every differentiable tape operation, including broadcasting and
/// reduction variants.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "add_broadcast",
            inputs: vec![vec![3, 4], vec![4]],
            positive: false,
            op: |t, x| t.add(x[0], x[1]),
        },
        OpCase {
            name: "sub_broadcast",
            inputs: vec![vec![3, 1], vec![2, 3, 4]],
            positive: false,
            op: |t, x| t.sub(x[0], x[1]),
        },
        OpCase {
            name: "mul_broadcast",
            inputs: vec![vec![2, 3], vec![1]],
            positive: false,
            op: |t, x| t.mul(x[0], x[1]),
        },
        OpCase {
            name: "div",
            inputs: vec![vec![2, 3], vec![2, 3]],
            positive: true,
            op: |t, x| t.div(x[0], x[1]),
        },
        OpCase {
            name: "gelu",
            inputs: vec![vec![7]],
            positive: false,
            op: |t, x| t.gelu(x[0]),
        },
        OpCase {
            name: "relu",
            inputs: vec![vec![7]],
            positive: false,
            op: |t, x| t.relu(x[0]),
        },
        OpCase {
            name: "tanh",
            inputs: vec![vec![7]],
            positive: false,
            op: |t, x| t.unary(crate::UnaryOp::Tanh, x[0]),
        },
        OpCase {
            name: "sqrt",
            inputs: vec![vec![5]],
            positive: true,
            op: |t, x| t.sqrt(x[0]),
        },
        OpCase {
            name: "cos",
            inputs: vec![vec![5]],
            positive: false,
            op: |t, x| t.unary(crate::UnaryOp::Cos, x[0]),
        },
        OpCase {
            name: "sin",
            inputs: vec![vec![5]],
            positive: false,
            op: |t, x| t.unary(crate::UnaryOp::Sin, x[0]),
        },
        OpCase {
            name: "exp",
            inputs: vec![vec![5]],
            positive: false,
            op: |t, x| t.exp(x[0]),
        },
        OpCase {
            name: "log",
            inputs: vec![vec![5]],
            positive: true,
            op: |t, x| t.log(x[0]),
        },
        OpCase {
            name: "square",
            inputs: vec![vec![5]],
            positive: false,
            op: |t, x| t.square(x[0]),
        },
        OpCase {
            name: "scale_shift",
            inputs: vec![vec![4]],
            positive: false,
            op: |t, x| {
                let s = t.scale(x[0], -2.5);
                Ok(t.add_scalar(s, 0.3))
            },
        },
        OpCase {
            name: "clamp_inside",
            inputs: vec![vec![4]],
            positive: false,
            op: |t, x| Ok(t.clamp(x[0], -10.0, 10.0)),
        },
        OpCase {
            name: "matmul",
            inputs: vec![vec![3, 4], vec![4, 2]],
            positive: false,
            op: |t, x| t.matmul(x[0], x[1]),
        },
        OpCase {
            name: "contract_batched",
            inputs: vec![vec![2, 3, 4], vec![2, 4, 5]],
            positive: false,
            op: |t, x| t.contract(x[0], x[1], "bij,bjk->bik"),
        },
        OpCase {
            name: "contract_channel_sum",
            inputs: vec![vec![3, 2, 4], vec![2, 5, 4]],
            positive: false,
            op: |t, x| t.contract(x[0], x[1], "ncr,cdr->nd"),
        },
        OpCase {
            name: "contract_permuted_out",
            inputs: vec![vec![3, 2, 4], vec![2, 5, 4]],
            positive: false,
            op: |t, x| t.contract(x[0], x[1], "ncp,crp->crn"),
        },
        OpCase {
            name: "sum_axis",
            inputs: vec![vec![2, 3, 4]],
            positive: false,
            op: |t, x| t.sum(x[0], 1),
        },
        OpCase {
            name: "mean_axis",
            inputs: vec![vec![2, 3, 4]],
            positive: false,
            op: |t, x| t.mean(x[0], 2),
        },
        OpCase {
            name: "max_axis",
            inputs: vec![vec![3, 5]],
            positive: false,
            op: |t, x| t.max(x[0], 1),
        },
        OpCase {
            name: "softmax_last",
            inputs: vec![vec![3, 5]],
            positive: false,
            op: |t, x| t.softmax(x[0], 1),
        },
        OpCase {
            name: "softmax_first",
            inputs: vec![vec![3, 5]],
            positive: false,
            op: |t, x| t.softmax(x[0], 0),
        },
        OpCase {
            name: "layer_norm",
            inputs: vec![vec![3, 6], vec![6], vec![6]],
            positive: false,
            op: |t, x| t.layer_norm(x[0], x[1], x[2], 1e-5),
        },
        OpCase {
            name: "normalize_middle",
            inputs: vec![vec![2, 4, 3]],
            positive: false,
            op: |t, x| t.normalize(x[0], 1, 1e-5),
        },
        OpCase {
            name: "reshape_permute",
            inputs: vec![vec![2, 3, 4]],
            positive: false,
            op: |t, x| {
                let r = t.reshape(x[0], [6, 4])?;
                t.permute(r, &[1, 0])
            },
        },
        OpCase {
            name: "concat",
            inputs: vec![vec![2, 3], vec![2, 2]],
            positive: false,
            op: |t, x| t.concat(&[x[0], x[1]], 1),
        },
        OpCase {
            name: "index_select_repeat",
            inputs: vec![vec![4, 3]],
            positive: false,
            op: |t, x| t.index_select(x[0], 0, &[3, 1, 1, 0]),
        },
        OpCase {
            name: "narrow",
            inputs: vec![vec![5, 2]],
            positive: false,
            op: |t, x| t.narrow(x[0], 0, 1, 3),
        },
        OpCase {
            name: "broadcast_to",
            inputs: vec![vec![1, 3]],
            positive: false,
            op: |t, x| t.broadcast_to(x[0], &[4, 3]),
        },
        OpCase {
            name: "avg_pool",
            inputs: vec![vec![2, 4, 4]],
            positive: false,
            op: |t, x| t.pool2d(x[0], 2, 2, PoolMode::Avg),
        },
        OpCase {
            name: "max_pool",
            inputs: vec![vec![2, 4, 4]],
            positive: false,
            op: |t, x| t.pool2d(x[0], 2, 2, PoolMode::Max),
        },
        OpCase {
            name: "adaptive_avg_pool",
            inputs: vec![vec![1, 5, 7]],
            positive: false,
            op: |t, x| t.pool2d(x[0], 3, 2, PoolMode::Avg),
        },
        OpCase {
            name: "linear",
            inputs: vec![vec![2, 3, 4], vec![4, 5], vec![5]],
            positive: false,
            op: |t, x| t.linear(x[0], x[1], Some(x[2])),
        },
    ]
}

/// Gradient of `sum(op(x) * w)` for a fixed random `w` against central
/// differences, every input entry checked.
pub fn check_op(case: &OpCase, seed: u64) -> Result<FdReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (i, shape) in case.inputs.iter().enumerate() {
        store.add(format!("x{i}"), random_tensor(&mut rng, shape, case.positive));
    }
    let mut probe_tape = Tape::new();
    let vars: Vec<Var> = store.ids().map(|id| probe_tape.param(&store, id)).collect();
    let probe_out = (case.op)(&mut probe_tape, &vars)?;
    let out_shape = probe_tape.shape(probe_out).to_vec();
    let weights = random_tensor(&mut rng, &out_shape, false);
    let op = case.op;
    finite_diff_check(
        &mut store,
        |s, t| {
            let vars: Vec<Var> = s.ids().map(|id| t.param(s, id)).collect();
            let y = op(t, &vars)?;
            let w = t.constant(weights.clone());
            let yw = t.mul(y, w)?;
            t.sum_all(yw)
        },
        &FdOptions::default(),
    )
}
