use crate::error::{Error, Result};
use crate::neurons::{integer_activations, quantize};
use crate::numerics::{ops, Activation, Graph, NodeId, Scalar, Tensor};
use crate::spike_kernel::{spike_linear_int, FireStats};

use super::clamp::{clamp_mask, ClampMode, Site};
use super::config::Mamba2Config;
use super::params::{BlockParams, BoundBlock};
use super::sgc::{sgc_forward, sgc_forward_graph};

/// Recurrent state of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockState<T> {
    /// `[H × N × P]`.
    pub h: Tensor<T>,
    /// Last `conv_width − 1` inputs per channel, oldest first.
    pub conv_x: Tensor<T>,
    pub conv_b: Tensor<T>,
    pub conv_c: Tensor<T>,
}

impl<T: Scalar> BlockState<T> {
    pub fn zeros(cfg: &Mamba2Config) -> Self {
        let w = cfg.conv_width - 1;
        Self {
            h: Tensor::zeros(&[cfg.n_heads, cfg.n_state, cfg.d_head]),
            conv_x: Tensor::zeros(&[cfg.inner(), w]),
            conv_b: Tensor::zeros(&[cfg.n_state, w]),
            conv_c: Tensor::zeros(&[cfg.n_state, w]),
        }
    }

    fn check(&self, cfg: &Mamba2Config) -> Result<()> {
        let z = Self::zeros(cfg);
        for (a, b) in [(&self.h, &z.h), (&self.conv_x, &z.conv_x), (&self.conv_b, &z.conv_b), (&self.conv_c, &z.conv_c)] {
            if a.shape() != b.shape() {
                return Err(Error::dim(format!("state tensor {:?}, expected {:?}", a.shape(), b.shape())));
            }
        }
        Ok(())
    }
}

/// Spiking and compensation outputs of both projections at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct SgcOutputs<T> {
    pub in_spiking: Tensor<T>,
    pub in_sgc: Tensor<T>,
    pub out_spiking: Tensor<T>,
    pub out_sgc: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput<T> {
    pub y: Tensor<T>,
    pub state: BlockState<T>,
    pub fire_in: Option<FireStats>,
    pub fire_out: Option<FireStats>,
    pub sgc: Option<SgcOutputs<T>>,
}

fn finite<T: Scalar>(v: &[T], layer: usize, step: usize, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric {
            layer,
            step,
            what: what.to_string(),
        })
    }
}

/// Projects `x` through `w`, through the neuron site first in spiking mode.
fn project<T: Scalar>(cfg: &Mamba2Config, x: &[T], w: &Tensor<T>) -> Result<(Vec<T>, Option<FireStats>)> {
    if !cfg.is_spiking() {
        return Ok((ops::vecmat(x, w)?, None));
    }
    let q: Vec<T> = x.iter().map(|&v| quantize(&cfg.neuron, v)).collect();
    if cfg.neuron.bypass {
        return Ok((ops::vecmat(&q, w)?, None));
    }
    let s = integer_activations(&q)?;
    let stats = FireStats::from_integers(&s, s.len(), cfg.neuron.micro_steps());
    Ok((spike_linear_int(w, &s)?.values, Some(stats)))
}

fn conv_step<T: Scalar>(x: &[T], kernel: &Tensor<T>, state: &Tensor<T>) -> Result<(Vec<T>, Tensor<T>)> {
    let xt = Tensor::new(vec![1, x.len()], x.to_vec())?;
    let (y, s) = ops::causal_conv1d(&xt, kernel, state)?;
    Ok((y.into_data().into_iter().map(|v| Activation::Silu.apply(v)).collect(), s))
}

/// One recurrent step of the block for a single token `u_t [D]`.
pub fn block_step<T: Scalar>(
    params: &BlockParams<T>,
    state: &BlockState<T>,
    u_t: &Tensor<T>,
    cfg: &Mamba2Config,
    layer: usize,
    step: usize,
) -> Result<StepOutput<T>> {
    state.check(cfg)?;
    if u_t.numel() != cfg.d_model {
        return Err(Error::dim(format!("block input has {} entries, d_model is {}", u_t.numel(), cfg.d_model)));
    }
    let (n, h, p) = (cfg.n_state, cfg.n_heads, cfg.d_head);
    let hp = cfg.inner();
    let u = u_t.data();

    let (proj, fire_in) = project(cfg, u, &params.w_in)?;
    finite(&proj, layer, step, "input projection")?;
    let (z, rest) = proj.split_at(hp);
    let (xr, rest) = rest.split_at(hp);
    let (br, rest) = rest.split_at(n);
    let (cr, dtr) = rest.split_at(n);

    let (x, conv_x) = conv_step(xr, &params.conv_x, &state.conv_x)?;
    let (b, conv_b) = conv_step(br, &params.conv_b, &state.conv_b)?;
    let (c, conv_c) = conv_step(cr, &params.conv_c, &state.conv_c)?;

    let mut hs = state.h.clone();
    let hd = hs.data_mut();
    let mut o = vec![T::zero(); hp];
    let dskip = params.d_skip.data();
    for head in 0..h {
        let dt = Activation::Softplus.apply(dtr[head] + params.dt_bias.data()[head]);
        let alpha = (-dt * params.a_log.data()[head].exp()).exp();
        let xs = &x[head * p..(head + 1) * p];
        for ni in 0..n {
            let db = dt * b[ni];
            let row = &mut hd[(head * n + ni) * p..(head * n + ni + 1) * p];
            for (hv, &xv) in row.iter_mut().zip(xs) {
                *hv = alpha * *hv + db * xv;
            }
            let cn = c[ni];
            for (ov, &hv) in o[head * p..(head + 1) * p].iter_mut().zip(row.iter()) {
                *ov += cn * hv;
            }
        }
        for pi in 0..p {
            o[head * p + pi] += dskip[head * p + pi] * xs[pi];
        }
    }
    finite(hd, layer, step, "ssm state")?;

    let gated: Vec<T> = o
        .iter()
        .zip(z)
        .map(|(&ov, &zv)| ov * Activation::Silu.apply(zv))
        .collect();
    let y = ops::rmsnorm(&Tensor::new(vec![1, hp], gated)?, &params.norm, T::lit(cfg.norm_eps))?;
    let (out, fire_out) = project(cfg, y.data(), &params.w_out)?;
    finite(&out, layer, step, "output projection")?;

    let sgc = match (&params.sgc, cfg.has_sgc(layer)) {
        (Some(s), true) => Some(SgcOutputs {
            in_spiking: Tensor::new(vec![1, proj.len()], proj.clone())?,
            in_sgc: sgc_forward(u_t, &s.w_in, cfg.neuron.d_max)?,
            out_spiking: Tensor::new(vec![1, out.len()], out.clone())?,
            out_sgc: sgc_forward(&y, &s.w_out, cfg.neuron.d_max)?,
        }),
        _ => None,
    };
    Ok(StepOutput {
        y: Tensor::new(vec![cfg.d_model], out)?,
        state: BlockState {
            h: hs,
            conv_x,
            conv_b,
            conv_c,
        },
        fire_in,
        fire_out,
        sgc,
    })
}

/// Graph nodes produced by one batched block.
#[derive(Debug, Clone)]
pub struct BlockGraphOut {
    pub out: NodeId,
    /// The block input after any clamp, `[R × D]`.
    pub u_site: NodeId,
    /// The normalized gated output before the output projection, `[R × HP]`.
    pub y_site: NodeId,
    pub fire_in: Option<FireStats>,
    pub fire_out: Option<FireStats>,
    /// (spiking projection, compensation path) pairs for the alignment loss.
    pub sgc_pairs: Vec<(NodeId, NodeId)>,
}

fn graph_site_stats<T: Scalar>(g: &Graph<T>, q: NodeId, cfg: &Mamba2Config) -> Result<Option<FireStats>> {
    if cfg.neuron.bypass {
        return Ok(None);
    }
    let v = g.value(q);
    let s = integer_activations(v.data())?;
    Ok(Some(FireStats::from_integers(&s, v.cols(), cfg.neuron.micro_steps())))
}

fn apply_clamp<T: Scalar>(g: &mut Graph<T>, x: NodeId, mode: ClampMode, seq_len: usize) -> Result<NodeId> {
    if mode == ClampMode::Off {
        return Ok(x);
    }
    let (keep, repl) = clamp_mask(g.value(x), mode, seq_len)?;
    g.replace(x, repl, keep)
}

/// Batched block over `u [R × D]`, every `seq_len` rows one sequence.
pub fn block_forward_graph<T: Scalar>(
    g: &mut Graph<T>,
    b: &BoundBlock,
    u: NodeId,
    cfg: &Mamba2Config,
    layer: usize,
    seq_len: usize,
    clamp: Option<(ClampMode, Site)>,
) -> Result<BlockGraphOut> {
    let (n, h) = (cfg.n_state, cfg.n_heads);
    let hp = cfg.inner();
    let clamp_at = |site: Site| match clamp {
        Some((mode, s)) if s == site => mode,
        _ => ClampMode::Off,
    };
    let u = apply_clamp(g, u, clamp_at(Site::Input), seq_len)?;

    let mut sgc_pairs = Vec::new();
    let (proj, fire_in) = if cfg.is_spiking() {
        let q = g.neuron(u, cfg.neuron);
        let stats = graph_site_stats(g, q, cfg)?;
        (g.matmul(q, b.w_in)?, stats)
    } else {
        (g.matmul(u, b.w_in)?, None)
    };
    let sgc = b.sgc.filter(|_| cfg.has_sgc(layer));
    if let Some((w_in_sgc, _)) = sgc {
        let m = sgc_forward_graph(g, u, w_in_sgc, cfg.neuron.d_max)?;
        sgc_pairs.push((proj, m));
    }

    let z = g.slice_cols(proj, 0, hp)?;
    let xr = g.slice_cols(proj, hp, hp)?;
    let br = g.slice_cols(proj, 2 * hp, n)?;
    let cr = g.slice_cols(proj, 2 * hp + n, n)?;
    let dtr = g.slice_cols(proj, 2 * hp + 2 * n, h)?;

    let xc = g.causal_conv(xr, b.conv_x, seq_len)?;
    let x = g.act(Activation::Silu, xc);
    let bc = g.causal_conv(br, b.conv_b, seq_len)?;
    let bb = g.act(Activation::Silu, bc);
    let cc = g.causal_conv(cr, b.conv_c, seq_len)?;
    let cb = g.act(Activation::Silu, cc);
    let dtb = g.add_row(dtr, b.dt_bias)?;
    let dt = g.act(Activation::Softplus, dtb);

    let scan = g.ssm_scan(x, dt, b.a_log, bb, cb, h, seq_len)?;
    let skip = g.mul_row(x, b.d_skip)?;
    let o = g.add(scan, skip)?;
    let gate = g.act(Activation::Silu, z);
    let gated = g.mul(o, gate)?;
    let y = g.rmsnorm(gated, b.norm, T::lit(cfg.norm_eps))?;
    let y = apply_clamp(g, y, clamp_at(Site::Output), seq_len)?;

    let (out, fire_out) = if cfg.is_spiking() {
        let q = g.neuron(y, cfg.neuron);
        let stats = graph_site_stats(g, q, cfg)?;
        (g.matmul(q, b.w_out)?, stats)
    } else {
        (g.matmul(y, b.w_out)?, None)
    };
    if let Some((_, w_out_sgc)) = sgc {
        let m = sgc_forward_graph(g, y, w_out_sgc, cfg.neuron.d_max)?;
        sgc_pairs.push((out, m));
    }
    if !g.value(out).is_finite() {
        return Err(Error::Numeric {
            layer,
            step: 0,
            what: "batched block output".into(),
        });
    }
    Ok(BlockGraphOut {
        out,
        u_site: u,
        y_site: y,
        fire_in,
        fire_out,
        sgc_pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mamba2::params::ModelParams;
    use crate::neurons::NeuronConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_layer(cfg: &Mamba2Config, seed: u64) -> BlockParams<f64> {
        ModelParams::<f64>::init(cfg, seed).unwrap().layers.remove(0).block
    }

    fn small() -> Mamba2Config {
        let mut c = Mamba2Config::toy();
        c.d_model = 8;
        c.n_state = 4;
        c.n_heads = 2;
        c.d_head = 8;
        c.n_layers = 1;
        c.vocab = 11;
        c.sgc_layers = [0].into_iter().collect();
        c
    }

    #[test]
    fn zero_step_size_keeps_state() {
        let cfg = small();
        let mut p = one_layer(&cfg, 1);
        p.dt_bias = Tensor::full(&[cfg.n_heads], -1e4);
        let mut st = BlockState::zeros(&cfg);
        st.h = Tensor::from_fn(&[cfg.n_heads, cfg.n_state, cfg.d_head], |i| i as f64 * 0.01);
        let out = block_step(&p, &st, &Tensor::zeros(&[cfg.d_model]), &cfg, 0, 0).unwrap();
        assert_eq!(out.state.h, st.h);
    }

    #[test]
    fn zero_input_contracts_state() {
        let cfg = small();
        let p = one_layer(&cfg, 2);
        let mut st = BlockState::zeros(&cfg);
        st.h = Tensor::from_fn(&[cfg.n_heads, cfg.n_state, cfg.d_head], |i| (i as f64).sin());
        let out = block_step(&p, &st, &Tensor::zeros(&[cfg.d_model]), &cfg, 0, 0).unwrap();
        assert!(out.state.h.l2_norm() <= st.h.l2_norm());
    }

    #[test]
    fn batched_matches_stepwise() {
        for cfg in [small(), small().spiking(NeuronConfig::tilif(4).unwrap())] {
            let p = one_layer(&cfg, 5);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let u = Tensor::<f64>::from_fn(&[8, cfg.d_model], |_| rng.random_range(-2.0..2.0));
            let mut st = BlockState::zeros(&cfg);
            let mut rows = Vec::new();
            for t in 0..8 {
                let ut = Tensor::new(vec![cfg.d_model], u.row(t).to_vec()).unwrap();
                let o = block_step(&p, &st, &ut, &cfg, 0, t).unwrap();
                rows.extend_from_slice(o.y.data());
                st = o.state;
            }
            let mut m = ModelParams::<f64>::init(&cfg, 5).unwrap();
            m.layers[0].block = p.clone();
            let mut g = Graph::new();
            let bound = m.bind(&mut g, &|_| false);
            let un = g.constant(u.clone());
            let out = block_forward_graph(&mut g, &bound.layers[0].1, un, &cfg, 0, 8, None).unwrap();
            let batched = g.value(out.out);
            let err = batched
                .data()
                .iter()
                .zip(&rows)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-10, "{err}");
            assert_eq!(out.sgc_pairs.len(), if cfg.is_spiking() { 2 } else { 0 });
        }
    }

    #[test]
    fn non_finite_input_reports_layer() {
        let cfg = small();
        let p = one_layer(&cfg, 1);
        let mut u = Tensor::zeros(&[cfg.d_model]);
        u.data_mut()[0] = f64::NAN;
        let err = block_step(&p, &BlockState::zeros(&cfg), &u, &cfg, 3, 7).unwrap_err();
        assert!(matches!(err, Error::Numeric { layer: 3, step: 7, .. }));
    }
}
