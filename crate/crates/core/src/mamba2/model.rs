use crate::error::{Error, Result};
use crate::numerics::{ops, Graph, NodeId, Scalar, Tensor};
use crate::spike_kernel::FireStats;

use super::block::{block_forward_graph, block_step, BlockState};
use super::clamp::{ClampMode, Site};
use super::params::{BoundModel, ModelParams};

/// Projection site inside a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjSite {
    In,
    Out,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiteFire {
    pub layer: usize,
    pub site: ProjSite,
    pub stats: FireStats,
}

/// Fire rate pooled over every layer's `site`; 0 when nothing was recorded.
pub fn pooled_rate(fires: &[SiteFire], site: ProjSite) -> f64 {
    let (mut spikes, mut slots) = (0u64, 0u64);
    for f in fires.iter().filter(|f| f.site == site) {
        spikes += f.stats.spike_count;
        slots += f.stats.tokens * f.stats.micro_steps * f.stats.channels;
    }
    if slots == 0 {
        0.0
    } else {
        spikes as f64 / slots as f64
    }
}

#[derive(Debug, Clone)]
pub struct ModelGraphOut {
    /// `[R × vocab]`.
    pub logits: NodeId,
    pub fires: Vec<SiteFire>,
    /// Per layer, the alignment pairs of [`super::block::BlockGraphOut::sgc_pairs`].
    pub sgc_pairs: Vec<Vec<(NodeId, NodeId)>>,
    /// Per layer, the `u_t` and `y_t` site nodes.
    pub sites: Vec<(NodeId, NodeId)>,
}

/// Batched forward of `tokens`, a concatenation of sequences of `seq_len` tokens.
pub fn forward_graph<T: Scalar>(
    g: &mut Graph<T>,
    model: &ModelParams<T>,
    bound: &BoundModel,
    tokens: &[usize],
    seq_len: usize,
    clamp: Option<(ClampMode, Site)>,
) -> Result<ModelGraphOut> {
    let cfg = &model.cfg;
    if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab) {
        return Err(Error::input(format!("token {t} outside vocabulary of {}", cfg.vocab)));
    }
    if tokens.is_empty() {
        return Err(Error::input("empty token sequence"));
    }
    let eps = T::lit(cfg.norm_eps);
    let mut x = g.gather(bound.embedding, tokens)?;
    let mut fires = Vec::new();
    let mut sgc_pairs = Vec::new();
    let mut sites = Vec::new();
    for (layer, (norm, blk)) in bound.layers.iter().enumerate() {
        let u = g.rmsnorm(x, *norm, eps)?;
        let out = block_forward_graph(g, blk, u, cfg, layer, seq_len, clamp)?;
        if let Some(stats) = out.fire_in {
            fires.push(SiteFire { layer, site: ProjSite::In, stats });
        }
        if let Some(stats) = out.fire_out {
            fires.push(SiteFire { layer, site: ProjSite::Out, stats });
        }
        sgc_pairs.push(out.sgc_pairs);
        sites.push((out.u_site, out.y_site));
        x = g.add(x, out.out)?;
    }
    let hfin = g.rmsnorm(x, bound.final_norm, eps)?;
    let logits = g.matmul_nt(hfin, bound.embedding)?;
    if !g.value(logits).is_finite() {
        return Err(Error::Numeric {
            layer: cfg.n_layers,
            step: 0,
            what: "logits".into(),
        });
    }
    Ok(ModelGraphOut {
        logits,
        fires,
        sgc_pairs,
        sites,
    })
}

/// Logits `[T × vocab]` for one token sequence, and fire statistics per site.
pub fn model_forward<T: Scalar>(model: &ModelParams<T>, tokens: &[usize]) -> Result<(Tensor<T>, Vec<SiteFire>)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, &|_| false);
    let out = forward_graph(&mut g, model, &bound, tokens, tokens.len(), None)?;
    Ok((g.value(out.logits).clone(), out.fires))
}

/// Recurrent state of the whole model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub layers: Vec<BlockState<T>>,
    pub step: usize,
}

impl<T: Scalar> ModelState<T> {
    pub fn new(model: &ModelParams<T>) -> Self {
        Self {
            layers: (0..model.cfg.n_layers).map(|_| BlockState::zeros(&model.cfg)).collect(),
            step: 0,
        }
    }
}

/// Consumes one token and returns next-token logits.
pub fn model_step<T: Scalar>(model: &ModelParams<T>, state: &mut ModelState<T>, token: usize) -> Result<Vec<T>> {
    let cfg = &model.cfg;
    if token >= cfg.vocab {
        return Err(Error::input(format!("token {token} outside vocabulary of {}", cfg.vocab)));
    }
    let eps = T::lit(cfg.norm_eps);
    let mut x = Tensor::new(vec![1, cfg.d_model], model.embedding.row(token).to_vec())?;
    for (layer, (lp, st)) in model.layers.iter().zip(state.layers.iter_mut()).enumerate() {
        let u = ops::rmsnorm(&x, &lp.norm, eps)?.reshape(&[cfg.d_model])?;
        let out = block_step(&lp.block, st, &u, cfg, layer, state.step)?;
        for (xv, &yv) in x.data_mut().iter_mut().zip(out.y.data()) {
            *xv += yv;
        }
        *st = out.state;
    }
    state.step += 1;
    let h = ops::rmsnorm(&x, &model.final_norm, eps)?;
    Ok(ops::matmul_nt(&h, &model.embedding)?.into_data())
}

fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Greedy continuation of `prompt` with up to `max_new` tokens, stopping
/// after `stop` if given.
pub fn generate_greedy<T: Scalar>(
    model: &ModelParams<T>,
    prompt: &[usize],
    max_new: usize,
    stop: Option<usize>,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::input("generation needs a non-empty prompt"));
    }
    let mut st = ModelState::new(model);
    let mut logits = Vec::new();
    for &t in prompt {
        logits = model_step(model, &mut st, t)?;
    }
    let mut out = Vec::with_capacity(max_new);
    for _ in 0..max_new {
        let next = argmax(&logits);
        out.push(next);
        if Some(next) == stop {
            break;
        }
        logits = model_step(model, &mut st, next)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mamba2::config::Mamba2Config;
    use crate::neurons::NeuronConfig;

    #[test]
    fn zero_weights_give_uniform_distribution() {
        let mut m = ModelParams::<f64>::init(&Mamba2Config::toy(), 0).unwrap();
        m.visit_mut(&mut |_, t| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
        let (logits, _) = model_forward(&m, &[1, 2, 3]).unwrap();
        let p = ops::softmax(&logits, 1).unwrap();
        assert!(p.data().iter().all(|&v| (v - 1.0 / 259.0).abs() < 1e-12));
    }

    #[test]
    fn stepwise_matches_batched() {
        let cfg = Mamba2Config::toy().spiking(NeuronConfig::ilif(3).unwrap());
        let m = ModelParams::<f64>::init(&cfg, 4).unwrap();
        let toks = [256, 72, 101, 108, 108, 111];
        let (logits, fires) = model_forward(&m, &toks).unwrap();
        assert_eq!(fires.len(), 4);
        let mut st = ModelState::new(&m);
        for (t, &tok) in toks.iter().enumerate() {
            let l = model_step(&m, &mut st, tok).unwrap();
            for (a, b) in l.iter().zip(logits.row(t)) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn token_out_of_range() {
        let m = ModelParams::<f32>::init(&Mamba2Config::toy(), 0).unwrap();
        assert!(matches!(model_forward(&m, &[259]), Err(Error::Input(_))));
    }

    #[test]
    fn greedy_generation_is_deterministic() {
        let m = ModelParams::<f32>::init(&Mamba2Config::toy(), 0).unwrap();
        let a = generate_greedy(&m, &[256, 97], 10, None).unwrap();
        assert_eq!(a, generate_greedy(&m, &[256, 97], 10, None).unwrap());
        assert_eq!(a.len(), 10);
    }
}
