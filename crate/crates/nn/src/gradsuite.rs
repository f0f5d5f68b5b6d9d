//! Seeded finite-difference checks over every op and block, shared by the
//! crate's own tests and downstream acceptance runs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{check_inputs, check_module, project, projection};
use crate::graph::{Graph, Var};
use crate::layers::{ResidualBlock, UpsampleBlock};
use crate::tensor::Tensor;

/// Worst relative error seen for one named case across all seeds.
#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub seeds: u64,
    pub max_rel_error: f64,
}

type OpFn = fn(&mut Graph, &[Var]) -> Result<Var>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x5eed_0000 + seed)
}

fn uni(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, r)
}

fn ops() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    let s = |v: &[&[usize]]| v.iter().map(|x| x.to_vec()).collect::<Vec<_>>();
    vec![
        ("conv2d", s(&[&[5, 5, 3], &[3, 3, 3, 2], &[2]]), |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1)),
        ("conv2d s2 5x5", s(&[&[6, 5, 2], &[5, 5, 2, 3]]), |g, v| g.conv2d(v[0], v[1], None, 2, 2)),
        ("conv2d 1x1", s(&[&[3, 4, 3], &[1, 1, 3, 2], &[2]]), |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 0)),
        ("add", s(&[&[3, 3, 2], &[3, 3, 2]]), |g, v| g.add(v[0], v[1])),
        ("sub", s(&[&[3, 3, 2], &[3, 3, 2]]), |g, v| g.sub(v[0], v[1])),
        ("mul", s(&[&[4, 4, 2], &[4, 4, 2]]), |g, v| g.mul(v[0], v[1])),
        ("leaky_relu", s(&[&[4, 4, 2]]), |g, v| Ok(g.leaky_relu(v[0], 0.2))),
        ("relu", s(&[&[4, 4, 2]]), |g, v| Ok(g.relu(v[0]))),
        ("sigmoid", s(&[&[4, 4, 2]]), |g, v| Ok(g.sigmoid(v[0]))),
        ("tanh", s(&[&[4, 4, 2]]), |g, v| Ok(g.tanh(v[0]))),
        ("square", s(&[&[4, 4, 2]]), |g, v| Ok(g.square(v[0]))),
        ("scale", s(&[&[3]]), |g, v| Ok(g.scale(v[0], -2.5))),
        ("add_scalar", s(&[&[3]]), |g, v| Ok(g.add_scalar(v[0], 0.3))),
        ("instance_norm", s(&[&[3, 4, 3]]), |g, v| g.instance_norm(v[0], 1e-5)),
        ("channel_affine", s(&[&[3, 3, 2], &[2], &[2]]), |g, v| g.channel_affine(v[0], v[1], v[2])),
        ("global_avg_pool", s(&[&[3, 3, 4]]), |g, v| g.global_avg_pool(v[0])),
        ("avg_pool", s(&[&[4, 6, 2]]), |g, v| g.avg_pool(v[0], 2)),
        ("channel_scale", s(&[&[3, 3, 4], &[4]]), |g, v| g.channel_scale(v[0], v[1])),
        ("concat", s(&[&[2, 3, 2], &[2, 3, 1]]), |g, v| g.concat_channels(v[0], v[1])),
        ("matvec", s(&[&[3, 5], &[5]]), |g, v| g.matvec(v[0], v[1])),
        ("upsample", s(&[&[3, 3, 2]]), |g, v| g.upsample_nearest(v[0], 2)),
        ("pad_replicate", s(&[&[3, 4, 2]]), |g, v| g.pad_replicate(v[0], 2)),
        ("gather", s(&[&[3, 3, 2]]), |g, v| g.gather(v[0], &[0, 5, 5, 17, 9])),
        ("sum", s(&[&[3, 2]]), |g, v| Ok(g.sum(v[0]))),
        ("mean", s(&[&[3, 2]]), |g, v| Ok(g.mean(v[0]))),
        ("mse", s(&[&[3, 3, 2], &[3, 3, 2]]), |g, v| g.mse(v[0], v[1])),
        ("bce real", s(&[&[2, 2, 1]]), |g, v| {
            let z = g.scale(v[0], 4.0);
            Ok(g.bce_with_logits(z, 1.0))
        }),
        ("bce fake", s(&[&[2, 2, 1]]), |g, v| {
            let z = g.scale(v[0], 4.0);
            Ok(g.bce_with_logits(z, 0.0))
        }),
    ]
}

fn check_op(shapes: &[Vec<usize>], op: OpFn, seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let inputs: Vec<Tensor> = shapes.iter().map(|s| uni(s, &mut r)).collect();
    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let y = op(&mut g, &vars)?;
        g.shape(y).to_vec()
    };
    let weights = projection(&out_shape, &mut r);
    let report = check_inputs(&inputs, None, |g, v| {
        let y = op(g, v)?;
        project(g, y, &weights)
    })?;
    Ok(report.max_rel_error)
}

fn check_upsample_block(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mut block = UpsampleBlock::new("up", 2, 3, 3, &mut r);
    let x = uni(&[3, 3, 2], &mut r);
    let weights = projection(&[6, 6, 3], &mut r);
    let a = check_inputs(&[x.clone()], None, |g, v| {
        let y = block.forward(g, v[0])?;
        project(g, y, &weights)
    })?;
    let b = check_module(&mut block, &[x], None, |b, g, v| {
        let y = b.forward(g, v[0])?;
        project(g, y, &weights)
    })?;
    Ok(a.max_rel_error.max(b.max_rel_error))
}

fn check_residual_block(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mut block = ResidualBlock::new("rb", 2, 3, &mut r);
    let x = uni(&[4, 4, 2], &mut r);
    let weights = projection(&[4, 4, 2], &mut r);
    let a = check_inputs(&[x.clone()], None, |g, v| {
        let y = block.forward(g, v[0])?;
        project(g, y, &weights)
    })?;
    let b = check_module(&mut block, &[x], None, |b, g, v| {
        let y = b.forward(g, v[0])?;
        project(g, y, &weights)
    })?;
    Ok(a.max_rel_error.max(b.max_rel_error))
}

/// Runs every op and block check for seeds `0..seeds`.
pub fn op_suite(seeds: u64) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for (name, shapes, op) in ops() {
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            worst = worst.max(check_op(&shapes, op, seed)?);
        }
        out.push(CaseResult { name, seeds, max_rel_error: worst });
    }
    let blocks: [(&'static str, fn(u64) -> Result<f64>); 2] =
        [("upsample block", check_upsample_block), ("residual block", check_residual_block)];
    for (name, check) in blocks {
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            worst = worst.max(check(seed)?);
        }
        out.push(CaseResult { name, seeds, max_rel_error: worst });
    }
    Ok(out)
}
