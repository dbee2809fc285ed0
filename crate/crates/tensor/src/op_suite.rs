//! One finite-difference check per differentiable op, used by the `gradcheck` command.

use crate::error::Result;
use crate::gradcheck::{GradCheck, GradCheckReport};
use crate::rng::NoiseRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

fn randn(seed: u64, shape: &[usize]) -> Tensor<f64> {
    NoiseRng::new(seed, "op_suite.param").normal_tensor(shape.to_vec())
}

/// Contracts a non-scalar output against fixed weights so every coordinate matters.
fn scalarize(t: &mut Tape<f64>, out: Var) -> Result<Var> {
    if t.value(out).numel() == 1 {
        return Ok(out);
    }
    let w = NoiseRng::new(99, "op_suite.projection").normal_tensor(t.shape(out).to_vec());
    let w = t.constant(w)?;
    let p = t.mul(out, w)?;
    t.sum(p)
}

fn cases() -> Vec<(&'static str, Vec<Tensor<f64>>, OpFn)> {
    let mut v: Vec<(&'static str, Vec<Tensor<f64>>, OpFn)> = Vec::new();
    let ab = || vec![randn(1, &[2, 3]), randn(2, &[2, 3])];
    v.push(("add", ab(), Box::new(|t, p| t.add(p[0], p[1]))));
    v.push(("sub", ab(), Box::new(|t, p| t.sub(p[0], p[1]))));
    v.push(("mul", ab(), Box::new(|t, p| t.mul(p[0], p[1]))));
    v.push(("scale", vec![randn(3, &[4])], Box::new(|t, p| t.scale(p[0], -1.7))));
    v.push(("add_scalar", vec![randn(3, &[4])], Box::new(|t, p| t.add_scalar(p[0], 0.3))));
    v.push(("exp", vec![randn(4, &[2, 3])], Box::new(|t, p| t.exp(p[0]))));
    v.push(("silu", vec![randn(5, &[2, 3])], Box::new(|t, p| t.silu(p[0]))));
    v.push(("sigmoid", vec![randn(6, &[2, 3])], Box::new(|t, p| t.sigmoid(p[0]))));
    v.push((
        "add_bias",
        vec![randn(7, &[2, 3, 5]), randn(8, &[3, 5])],
        Box::new(|t, p| t.add_bias(p[0], p[1])),
    ));
    v.push((
        "add_channel",
        vec![randn(9, &[2, 3, 2, 2]), randn(10, &[2, 3])],
        Box::new(|t, p| t.add_channel(p[0], p[1])),
    ));
    v.push((
        "linear",
        vec![randn(11, &[2, 4, 3]), randn(12, &[5, 3]), randn(13, &[5])],
        Box::new(|t, p| t.linear(p[0], p[1], Some(p[2]))),
    ));
    v.push((
        "conv2d",
        vec![randn(14, &[2, 2, 5, 5]), randn(15, &[3, 2, 3, 3]), randn(16, &[3])],
        Box::new(|t, p| t.conv2d(p[0], p[1], Some(p[2]), 1, 1)),
    ));
    v.push((
        "conv2d_stride2",
        vec![randn(17, &[1, 2, 4, 4]), randn(18, &[2, 2, 2, 2])],
        Box::new(|t, p| t.conv2d(p[0], p[1], None, 2, 0)),
    ));
    v.push((
        "group_norm",
        vec![randn(19, &[2, 4, 3, 3]), randn(20, &[4]), randn(21, &[4])],
        Box::new(|t, p| t.group_norm(p[0], 2, p[1], p[2], 1e-5)),
    ));
    v.push((
        "layer_norm",
        vec![randn(22, &[2, 3, 5]), randn(23, &[5]), randn(24, &[5])],
        Box::new(|t, p| t.layer_norm(p[0], p[1], p[2], 1e-5)),
    ));
    v.push((
        "attention",
        vec![randn(25, &[2, 3, 4]), randn(26, &[2, 5, 4]), randn(27, &[2, 5, 4])],
        Box::new(|t, p| t.attention(p[0], p[1], p[2], false)),
    ));
    v.push((
        "attention_causal",
        vec![randn(28, &[1, 4, 3]), randn(29, &[1, 4, 3]), randn(30, &[1, 4, 3])],
        Box::new(|t, p| t.attention(p[0], p[1], p[2], true)),
    ));
    v.push(("avg_pool2", vec![randn(31, &[1, 2, 4, 4])], Box::new(|t, p| t.avg_pool2(p[0]))));
    v.push(("upsample2", vec![randn(32, &[1, 2, 2, 3])], Box::new(|t, p| t.upsample2(p[0]))));
    v.push((
        "concat",
        vec![randn(33, &[2, 3, 4]), randn(34, &[2, 1, 4])],
        Box::new(|t, p| t.concat(&[p[0], p[1]], 1)),
    ));
    v.push(("narrow", vec![randn(35, &[2, 6])], Box::new(|t, p| t.narrow(p[0], 1, 2, 3))));
    v.push(("permute", vec![randn(36, &[2, 3, 4])], Box::new(|t, p| t.permute(p[0], &[2, 0, 1]))));
    v.push(("reshape", vec![randn(37, &[2, 3, 4])], Box::new(|t, p| t.reshape(p[0], &[6, 4]))));
    v.push(("embedding", vec![randn(38, &[5, 3])], Box::new(|t, p| t.embedding(p[0], &[0, 4, 4, 1]))));
    v.push(("sum", vec![randn(39, &[3, 2])], Box::new(|t, p| t.sum(p[0]))));
    v.push(("mean", vec![randn(40, &[3, 2])], Box::new(|t, p| t.mean(p[0]))));
    v.push(("mse", vec![randn(41, &[3, 2]), randn(42, &[3, 2])], Box::new(|t, p| t.mse(p[0], p[1]))));
    v
}

/// Runs every op check with `check`, returning `(op name, report)` pairs.
pub fn op_suite(check: &GradCheck) -> Result<Vec<(&'static str, GradCheckReport)>> {
    cases()
        .into_iter()
        .map(|(name, params, f)| {
            let report = check.run(|t, v| { let out = f(t, v)?; scalarize(t, out) }, &params)?;
            Ok((name, report))
        })
        .collect()
}
