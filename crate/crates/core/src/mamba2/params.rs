use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, Scalar, Tensor};

use super::config::Mamba2Config;

/// Training-only parallel copies of the two projections.
#[derive(Debug, Clone, PartialEq)]
pub struct SgcParams<T> {
    pub w_in: Tensor<T>,
    pub w_out: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    /// `[D × (2HP+2N+H)]`, columns ordered `z, x′, B′, C′, Δ′`.
    pub w_in: Tensor<T>,
    pub conv_x: Tensor<T>,
    pub conv_b: Tensor<T>,
    pub conv_c: Tensor<T>,
    /// Log decay rate per head; the transition is `exp(−Δ·exp(a_log))`.
    pub a_log: Tensor<T>,
    /// `[H × P]`.
    pub d_skip: Tensor<T>,
    pub dt_bias: Tensor<T>,
    /// `[HP]` weight of the gated output norm.
    pub norm: Tensor<T>,
    /// `[HP × D]`.
    pub w_out: Tensor<T>,
    pub sgc: Option<SgcParams<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    /// Pre-norm weight `[D]` applied to the residual stream before the block.
    pub norm: Tensor<T>,
    pub block: BlockParams<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub cfg: Mamba2Config,
    /// `[vocab × D]`, shared with the output head.
    pub embedding: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Tensor<T>,
}

fn normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)))
}

impl<T: Scalar> BlockParams<T> {
    pub fn init(cfg: &Mamba2Config, rng: &mut ChaCha8Rng) -> Self {
        let (d, n, h, p, w) = (cfg.d_model, cfg.n_state, cfg.n_heads, cfg.d_head, cfg.conv_width);
        let hp = cfg.inner();
        let conv_bound = 1.0 / (w as f64).sqrt();
        let a_log = Tensor::from_fn(&[h], |i| {
            let frac = if h == 1 { 0.0 } else { i as f64 / (h - 1) as f64 };
            T::lit((1.0 + 15.0 * frac).ln())
        });
        let (lo, hi) = (0.001f64.ln(), 0.1f64.ln());
        let dt_bias = Tensor::from_fn(&[h], |_| {
            let dt = (lo + (hi - lo) * rng.random::<f64>()).exp();
            // inverse softplus
            T::lit(dt + (-(-dt).exp_m1()).ln())
        });
        Self {
            w_in: normal(rng, &[d, cfg.in_proj_width()], 1.0 / (d as f64).sqrt()),
            conv_x: uniform(rng, &[hp, w], conv_bound),
            conv_b: uniform(rng, &[n, w], conv_bound),
            conv_c: uniform(rng, &[n, w], conv_bound),
            a_log,
            d_skip: Tensor::full(&[h, p], T::one()),
            dt_bias,
            norm: Tensor::full(&[hp], T::one()),
            w_out: normal(rng, &[hp, d], 1.0 / (hp as f64).sqrt()),
            sgc: None,
        }
    }

    /// Shapes this block must have under `cfg`.
    fn check(&self, cfg: &Mamba2Config, layer: usize) -> Result<()> {
        let (d, n, h, p, w) = (cfg.d_model, cfg.n_state, cfg.n_heads, cfg.d_head, cfg.conv_width);
        let hp = cfg.inner();
        let expect: [(&str, &Tensor<T>, Vec<usize>); 9] = [
            ("w_in", &self.w_in, vec![d, cfg.in_proj_width()]),
            ("conv_x", &self.conv_x, vec![hp, w]),
            ("conv_b", &self.conv_b, vec![n, w]),
            ("conv_c", &self.conv_c, vec![n, w]),
            ("a_log", &self.a_log, vec![h]),
            ("d_skip", &self.d_skip, vec![h, p]),
            ("dt_bias", &self.dt_bias, vec![h]),
            ("norm", &self.norm, vec![hp]),
            ("w_out", &self.w_out, vec![hp, d]),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape.as_slice() {
                return Err(Error::dim(format!(
                    "layer {layer} {name} is {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        if let Some(s) = &self.sgc {
            if s.w_in.shape() != self.w_in.shape() || s.w_out.shape() != self.w_out.shape() {
                return Err(Error::dim(format!("layer {layer} sgc weights do not mirror the projections")));
            }
        }
        Ok(())
    }
}

impl<T: Scalar> ModelParams<T> {
    pub fn init(cfg: &Mamba2Config, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = normal(&mut rng, &[cfg.vocab, cfg.d_model], 0.1);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                norm: Tensor::full(&[cfg.d_model], T::one()),
                block: BlockParams::init(cfg, &mut rng),
            })
            .collect();
        let mut m = Self {
            cfg: cfg.clone(),
            embedding,
            layers,
            final_norm: Tensor::full(&[cfg.d_model], T::one()),
        };
        m.sync_sgc();
        Ok(m)
    }

    /// Adds SGC copies (equal to the current projections) on the configured
    /// layers of a spiking model and drops them everywhere else.
    pub fn sync_sgc(&mut self) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            if self.cfg.has_sgc(i) {
                if l.block.sgc.is_none() {
                    l.block.sgc = Some(SgcParams {
                        w_in: l.block.w_in.clone(),
                        w_out: l.block.w_out.clone(),
                    });
                }
            } else {
                l.block.sgc = None;
            }
        }
    }

    /// Same weights under a different mode / neuron / SGC configuration.
    pub fn reconfigure(&self, cfg: &Mamba2Config) -> Result<Self> {
        cfg.validate()?;
        if !cfg.same_shape(&self.cfg) {
            return Err(Error::Config("configs describe different architectures".into()));
        }
        let mut m = self.clone();
        m.cfg = cfg.clone();
        m.sync_sgc();
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        let c = &self.cfg;
        if self.embedding.shape() != [c.vocab, c.d_model] || self.final_norm.shape() != [c.d_model] {
            return Err(Error::dim("embedding or final norm has the wrong shape"));
        }
        if self.layers.len() != c.n_layers {
            return Err(Error::dim(format!("{} layers, config says {}", self.layers.len(), c.n_layers)));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.norm.shape() != [c.d_model] {
                return Err(Error::dim(format!("layer {i} norm has the wrong shape")));
            }
            l.block.check(c, i)?;
        }
        Ok(())
    }

    /// Every tensor with its stable name, in a fixed order.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f("embedding", &self.embedding);
        for (i, l) in self.layers.iter().enumerate() {
            let b = &l.block;
            let mut g = |name: &str, t: &Tensor<T>| f(&format!("layers.{i}.{name}"), t);
            g("norm", &l.norm);
            g("w_in", &b.w_in);
            g("conv_x", &b.conv_x);
            g("conv_b", &b.conv_b);
            g("conv_c", &b.conv_c);
            g("a_log", &b.a_log);
            g("d_skip", &b.d_skip);
            g("dt_bias", &b.dt_bias);
            g("out_norm", &b.norm);
            g("w_out", &b.w_out);
            if let Some(s) = &b.sgc {
                g("sgc_w_in", &s.w_in);
                g("sgc_w_out", &s.w_out);
            }
        }
        f("final_norm", &self.final_norm);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f("embedding", &mut self.embedding);
        for (i, l) in self.layers.iter_mut().enumerate() {
            let b = &mut l.block;
            let mut g = |name: &str, t: &mut Tensor<T>| f(&format!("layers.{i}.{name}"), t);
            g("norm", &mut l.norm);
            g("w_in", &mut b.w_in);
            g("conv_x", &mut b.conv_x);
            g("conv_b", &mut b.conv_b);
            g("conv_c", &mut b.conv_c);
            g("a_log", &mut b.a_log);
            g("d_skip", &mut b.d_skip);
            g("dt_bias", &mut b.dt_bias);
            g("out_norm", &mut b.norm);
            g("w_out", &mut b.w_out);
            if let Some(s) = &mut b.sgc {
                g("sgc_w_in", &mut s.w_in);
                g("sgc_w_out", &mut s.w_out);
            }
        }
        f("final_norm", &mut self.final_norm);
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |n, _| out.push(n.to_string()));
        out
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let blk = |b: &BlockParams<T>| BlockParams {
            w_in: b.w_in.cast(),
            conv_x: b.conv_x.cast(),
            conv_b: b.conv_b.cast(),
            conv_c: b.conv_c.cast(),
            a_log: b.a_log.cast(),
            d_skip: b.d_skip.cast(),
            dt_bias: b.dt_bias.cast(),
            norm: b.norm.cast(),
            w_out: b.w_out.cast(),
            sgc: b.sgc.as_ref().map(|s| SgcParams {
                w_in: s.w_in.cast(),
                w_out: s.w_out.cast(),
            }),
        };
        ModelParams {
            cfg: self.cfg.clone(),
            embedding: self.embedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    norm: l.norm.cast(),
                    block: blk(&l.block),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
        }
    }

    /// Registers every tensor on `g`; names for which `trainable` is false
    /// become constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: &dyn Fn(&str) -> bool) -> BoundModel {
        let mut order = Vec::new();
        let mut mk = |name: String, t: &Tensor<T>| {
            let id = if trainable(&name) {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            };
            order.push(id);
            id
        };
        let embedding = mk("embedding".into(), &self.embedding);
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let b = &l.block;
            let mut m = |name: &str, t: &Tensor<T>| mk(format!("layers.{i}.{name}"), t);
            let norm = m("norm", &l.norm);
            let block = BoundBlock {
                w_in: m("w_in", &b.w_in),
                conv_x: m("conv_x", &b.conv_x),
                conv_b: m("conv_b", &b.conv_b),
                conv_c: m("conv_c", &b.conv_c),
                a_log: m("a_log", &b.a_log),
                d_skip: m("d_skip", &b.d_skip),
                dt_bias: m("dt_bias", &b.dt_bias),
                norm: m("out_norm", &b.norm),
                w_out: m("w_out", &b.w_out),
                sgc: b
                    .sgc
                    .as_ref()
                    .map(|s| (m("sgc_w_in", &s.w_in), m("sgc_w_out", &s.w_out))),
            };
            layers.push((norm, block));
        }
        let final_norm = mk("final_norm".into(), &self.final_norm);
        BoundModel {
            embedding,
            layers,
            final_norm,
            order,
        }
    }
}

/// Graph handles of a bound block.
#[derive(Debug, Clone)]
pub struct BoundBlock {
    pub w_in: NodeId,
    pub conv_x: NodeId,
    pub conv_b: NodeId,
    pub conv_c: NodeId,
    pub a_log: NodeId,
    pub d_skip: NodeId,
    pub dt_bias: NodeId,
    pub norm: NodeId,
    pub w_out: NodeId,
    pub sgc: Option<(NodeId, NodeId)>,
}

/// Graph handles of a bound model.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub embedding: NodeId,
    pub layers: Vec<(NodeId, BoundBlock)>,
    pub final_norm: NodeId,
    /// All handles in [`ModelParams::visit`] order.
    pub order: Vec<NodeId>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neurons::NeuronConfig;

    #[test]
    fn init_is_deterministic_and_valid() {
        let cfg = Mamba2Config::toy();
        let a = ModelParams::<f32>::init(&cfg, 7).unwrap();
        let b = ModelParams::<f32>::init(&cfg, 7).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
        assert!(a.layers.iter().all(|l| l.block.sgc.is_none()));
    }

    #[test]
    fn initial_step_sizes_in_range() {
        let m = ModelParams::<f64>::init(&Mamba2Config::toy(), 1).unwrap();
        for l in &m.layers {
            for &b in l.block.dt_bias.data() {
                let dt = crate::numerics::Activation::Softplus.apply(b);
                assert!((0.001..=0.1).contains(&dt), "{dt}");
            }
        }
    }

    #[test]
    fn sgc_copies_equal_projections() {
        let cfg = Mamba2Config::toy().spiking(NeuronConfig::tilif(4).unwrap());
        let m = ModelParams::<f64>::init(&cfg, 3).unwrap();
        for l in &m.layers {
            let s = l.block.sgc.as_ref().unwrap();
            assert_eq!(s.w_in, l.block.w_in);
            assert_eq!(s.w_out, l.block.w_out);
        }
        let dense = m.reconfigure(&cfg.clone().dense()).unwrap();
        assert!(dense.layers.iter().all(|l| l.block.sgc.is_none()));
    }

    #[test]
    fn bind_order_matches_visit() {
        let cfg = Mamba2Config::toy().spiking(NeuronConfig::tilif(4).unwrap());
        let m = ModelParams::<f64>::init(&cfg, 3).unwrap();
        let mut g = Graph::new();
        let bound = m.bind(&mut g, &|n: &str| n != "embedding");
        let mut k = 0;
        m.visit(&mut |_, t| {
            assert_eq!(g.value(bound.order[k]), t);
            k += 1;
        });
        assert_eq!(k, bound.order.len());
        assert_eq!(g.params().len(), k - 1);
    }
}
