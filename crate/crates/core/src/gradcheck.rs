//! Central finite-difference audits of the analytic gradients (64-bit).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::mamba2::{
    block_forward_graph, hidden_align_loss_graph, sgc_forward_graph, BoundBlock, Mamba2Config, ModelParams,
};
use crate::numerics::{Activation, Graph, NodeId, Tensor};
use crate::training::{dpo_loss_graph, kl_distill_loss_graph, kto_loss_graph, Label};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub probes: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

type Builder<'a> = dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId> + 'a;

fn eval(inputs: &[Tensor<f64>], build: &Builder) -> Result<f64> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = build(&mut g, &ids)?;
    Ok(g.value(loss).item())
}

/// Compares the backward pass against central differences at `probes`
/// random coordinates of `inputs`.
pub fn audit(name: &str, inputs: Vec<Tensor<f64>>, build: &Builder, probes: usize, seed: u64) -> Result<CheckResult> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = build(&mut g, &ids)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = ids.iter().map(|&id| grads.wrt(id)).collect();

    let total: usize = inputs.iter().map(|t| t.numel()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut work = inputs;
    for _ in 0..probes {
        let mut k = rng.random_range(0..total);
        let mut which = 0;
        while k >= work[which].numel() {
            k -= work[which].numel();
            which += 1;
        }
        let orig = work[which].data()[k];
        work[which].data_mut()[k] = orig + STEP;
        let up = eval(&work, build)?;
        work[which].data_mut()[k] = orig - STEP;
        let down = eval(&work, build)?;
        work[which].data_mut()[k] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        worst = worst.max(rel_err(analytic[which].data()[k], numeric));
    }
    Ok(CheckResult {
        name: name.to_string(),
        probes,
        max_rel_err: worst,
        passed: worst < TOLERANCE,
    })
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| scale * rng.random_range(-1.0..1.0))
}

/// Mix of matmul, transposed matmul, gather, row ops, activations,
/// log-softmax, RMSNorm, causal conv and the selective scan.
pub fn check_ops(probes: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, d, h, n) = (6, 4, 2, 3);
    let inputs = vec![
        rand_t(&mut rng, &[5, d], 1.0),
        rand_t(&mut rng, &[d, d], 0.7),
        rand_t(&mut rng, &[d], 1.0),
        rand_t(&mut rng, &[d, 3], 0.5),
        rand_t(&mut rng, &[r, h], 1.0),
        rand_t(&mut rng, &[h], 0.5),
        rand_t(&mut rng, &[r, n], 1.0),
        rand_t(&mut rng, &[r, n], 1.0),
    ];
    let ids = [0usize, 3, 1, 4, 4, 2];
    let build = move |g: &mut Graph<f64>, x: &[NodeId]| -> Result<NodeId> {
        let e = g.gather(x[0], &ids)?;
        let m = g.matmul(e, x[1])?;
        let m = g.mul_row(m, x[2])?;
        let s = g.act(Activation::Silu, m);
        let c = g.causal_conv(s, x[3], 3)?;
        let t = g.act(Activation::Tanh, c);
        let nrm = g.rmsnorm(t, x[2], 1e-5)?;
        let dt = g.act(Activation::Softplus, x[4]);
        let sc = g.ssm_scan(nrm, dt, x[5], x[6], x[7], 2, 3)?;
        let sg = g.act(Activation::Sigmoid, sc);
        let ex = g.act(Activation::Exp, sg);
        let lg = g.matmul_nt(ex, x[0])?;
        let ls = g.log_softmax(lg)?;
        let p = g.pick(ls, &[0, 1, 2, 3, 4, 0])?;
        Ok(g.mean(p))
    };
    audit("numerics ops", inputs, &build, probes, seed + 1)
}

/// Alignment loss through the compensation path, w.r.t. its input and weights.
pub fn check_sgc(probes: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = rand_t(&mut rng, &[4, 5], 2.0);
    let inputs = vec![rand_t(&mut rng, &[4, 6], 2.0), rand_t(&mut rng, &[6, 5], 0.5)];
    let build = move |g: &mut Graph<f64>, x: &[NodeId]| -> Result<NodeId> {
        let y = sgc_forward_graph(g, x[0], x[1], 4)?;
        let t = g.constant(target.clone());
        hidden_align_loss_graph(g, t, y)
    };
    audit("sgc path", inputs, &build, probes, seed + 1)
}

pub fn check_hidden_align(probes: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = vec![rand_t(&mut rng, &[3, 7], 2.0), rand_t(&mut rng, &[3, 7], 2.0)];
    let build = |g: &mut Graph<f64>, x: &[NodeId]| hidden_align_loss_graph(g, x[0], x[1]);
    audit("hidden_align_loss", inputs, &build, probes, seed + 1)
}

pub fn check_kl(probes: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let teacher = rand_t(&mut rng, &[4, 9], 3.0);
    let inputs = vec![rand_t(&mut rng, &[4, 9], 3.0)];
    let build = move |g: &mut Graph<f64>, x: &[NodeId]| kl_distill_loss_graph(g, &teacher, x[0]);
    audit("kl_distill_loss", inputs, &build, probes, seed + 1)
}

/// Sequence log-probs from logits rows: rows `2i, 2i+1` belong to sequence `i`.
fn seq_logps(g: &mut Graph<f64>, logits: NodeId, n_seq: usize) -> Result<NodeId> {
    let ls = g.log_softmax(logits)?;
    let targets: Vec<usize> = (0..2 * n_seq).map(|r| (r * 3) % 7).collect();
    let p = g.pick(ls, &targets)?;
    let seg: Vec<Option<usize>> = (0..2 * n_seq).map(|r| Some(r / 2)).collect();
    g.segment_sum(p, &seg, n_seq)
}

pub fn check_dpo(probes: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = 3;
    let ref_w: Vec<f64> = (0..b).map(|_| rng.random_range(-4.0..-1.0)).collect();
    let ref_l: Vec<f64> = (0..b).map(|_| rng.random_range(-4.0..-1.0)).collect();
    let inputs = vec![rand_t(&mut rng, &[2 * b, 7], 2.0), rand_t(&mut rng, &[2 * b, 7], 2.0)];
    let build = move |g: &mut Graph<f64>, x: &[NodeId]| -> Result<NodeId> {
        let w = seq_logps(g, x[0], b)?;
        let l = seq_logps(g, x[1], b)?;
        Ok(dpo_loss_graph(g, w, l, &ref_w, &ref_l, 0.7)?.0)
    };
    audit("dpo_loss", inputs, &build, probes, seed + 1)
}

/// KTO with a fixed baseline (a computed baseline is a detached constant).
pub fn check_kto(probes: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = 4;
    let refs: Vec<f64> = (0..b).map(|_| rng.random_range(-4.0..-1.0)).collect();
    let labels = [Label::Desirable, Label::Undesirable, Label::Desirable, Label::Undesirable];
    let weights = [1.0, 1.5, 0.5, 1.0];
    let inputs = vec![rand_t(&mut rng, &[2 * b, 7], 2.0)];
    let build = move |g: &mut Graph<f64>, x: &[NodeId]| -> Result<NodeId> {
        let p = seq_logps(g, x[0], b)?;
        Ok(kto_loss_graph(g, &labels, p, &refs, 0.5, Some(0.1), &weights)?.0)
    };
    audit("kto_loss", inputs, &build, probes, seed + 1)
}

fn small_block_cfg() -> Mamba2Config {
    let mut c = Mamba2Config::toy();
    c.d_model = 4;
    c.n_state = 3;
    c.n_heads = 2;
    c.d_head = 4;
    c.n_layers = 1;
    c.vocab = 7;
    c.sgc_layers.clear();
    c
}

/// Dense block output contracted with a fixed random tensor, w.r.t. its input
/// and every block parameter.
pub fn check_dense_block(probes: usize, seed: u64) -> Result<CheckResult> {
    let cfg = small_block_cfg();
    let model = ModelParams::<f64>::init(&cfg, seed)?;
    let b = &model.layers[0].block;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, seq) = (8, 4);
    let proj = rand_t(&mut rng, &[rows, cfg.d_model], 1.0);
    let inputs = vec![
        rand_t(&mut rng, &[rows, cfg.d_model], 1.5),
        b.w_in.clone(),
        b.conv_x.clone(),
        b.conv_b.clone(),
        b.conv_c.clone(),
        b.a_log.clone(),
        b.d_skip.clone(),
        b.dt_bias.map(|v| v + 2.0),
        b.norm.clone(),
        b.w_out.clone(),
    ];
    let build = move |g: &mut Graph<f64>, x: &[NodeId]| -> Result<NodeId> {
        let bb = BoundBlock {
            w_in: x[1],
            conv_x: x[2],
            conv_b: x[3],
            conv_c: x[4],
            a_log: x[5],
            d_skip: x[6],
            dt_bias: x[7],
            norm: x[8],
            w_out: x[9],
            sgc: None,
        };
        let out = block_forward_graph(g, &bb, x[0], &cfg, 0, seq, None)?;
        let p = g.constant(proj.clone());
        let m = g.mul(out.out, p)?;
        Ok(g.sum(m))
    };
    audit("dense mamba2 block", inputs, &build, probes, seed + 1)
}

/// Every audit with `probes` probes each.
pub fn run_all(probes: usize, seed: u64) -> Result<Vec<CheckResult>> {
    Ok(vec![
        check_ops(probes, seed)?,
        check_sgc(probes, seed)?,
        check_hidden_align(probes, seed)?,
        check_kl(probes, seed)?,
        check_dpo(probes, seed)?,
        check_kto(probes, seed)?,
        check_dense_block(probes, seed)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_audits_pass() {
        for r in run_all(40, 3).unwrap() {
            assert!(r.passed, "{} rel err {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn audit_detects_wrong_gradient() {
        // The squared term is baked in as a constant, so the tape misses its gradient.
        let build = |g: &mut Graph<f64>, x: &[NodeId]| -> Result<NodeId> {
            let s = g.sum(x[0]);
            let v = g.value(s).item();
            let c = g.constant(Tensor::scalar(v * v));
            g.add(s, c)
        };
        let r = audit("bad", vec![Tensor::from_slice(&[0.5, 1.0])], &build, 10, 0).unwrap();
        assert!(!r.passed);
    }
}
