//! Spiking neurons: LIF, integer LIF and ternary-integer LIF.
//!
//! Training mode is stateless: each activation is quantized in one shot and
//! the quantizer is differentiated with a rectangular surrogate. Inference mode
//! expands an integer activation into a binary spike train over `d_max`
//! micro-steps by running the plain integrate-and-fire recurrence with no leak,
//! so that the spike count reproduces the integer exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeuronKind {
    /// Binary Heaviside at the threshold.
    Lif,
    /// `Clip(Round(x), 0, D)`.
    Ilif,
    /// `Clip(Round(x), -D, D)`.
    Tilif,
}

impl std::str::FromStr for NeuronKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "lif" => Ok(NeuronKind::Lif),
            "ilif" => Ok(NeuronKind::Ilif),
            "tilif" => Ok(NeuronKind::Tilif),
            other => Err(format!("unknown neuron kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuronConfig {
    pub kind: NeuronKind,
    /// Spike amplitude bound; also the number of inference micro-steps.
    pub d_max: u32,
    pub v_th: f64,
    /// Membrane decay. Training mode ignores it; inference expansion always uses 1.
    pub beta: f64,
    /// Surrogate gradient height.
    pub alpha: f64,
    /// Test hook: the neuron becomes the identity (no rounding, no clipping).
    #[serde(default)]
    pub bypass: bool,
}

impl NeuronConfig {
    pub fn new(kind: NeuronKind, d_max: u32) -> Result<Self> {
        let cfg = Self {
            kind,
            d_max,
            v_th: 1.0,
            beta: 1.0,
            alpha: 1.0,
            bypass: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn lif() -> Self {
        Self::new(NeuronKind::Lif, 1).expect("valid")
    }

    pub fn ilif(d_max: u32) -> Result<Self> {
        Self::new(NeuronKind::Ilif, d_max)
    }

    pub fn tilif(d_max: u32) -> Result<Self> {
        Self::new(NeuronKind::Tilif, d_max)
    }

    pub fn with_bypass(mut self, bypass: bool) -> Self {
        self.bypass = bypass;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_max < 1 {
            return Err(Error::Config("d_max must be at least 1".into()));
        }
        if self.kind == NeuronKind::Lif && self.d_max != 1 {
            return Err(Error::Config("LIF neurons require d_max = 1".into()));
        }
        if !(self.v_th > 0.0) {
            return Err(Error::Config("v_th must be positive".into()));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Config("beta must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Micro-steps per token at inference.
    pub fn micro_steps(&self) -> u32 {
        self.d_max
    }

    pub fn is_signed(&self) -> bool {
        self.kind == NeuronKind::Tilif
    }
}

/// Quantizes one activation.
pub fn quantize<T: Scalar>(cfg: &NeuronConfig, x: T) -> T {
    if cfg.bypass {
        return x;
    }
    let d = T::from_u32(cfg.d_max).unwrap();
    match cfg.kind {
        NeuronKind::Lif => {
            if x >= T::lit(cfg.v_th) {
                T::one()
            } else {
                T::zero()
            }
        }
        NeuronKind::Ilif => x.round_half_even().max(T::zero()).min(d),
        NeuronKind::Tilif => x.round_half_even().max(-d).min(d),
    }
}

pub fn neuron_forward<T: Scalar>(cfg: &NeuronConfig, x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| quantize(cfg, v))
}

/// Rectangular surrogate derivative of [`quantize`].
///
/// TI-LIF: `alpha` on `[-D, D]`. I-LIF: `alpha` on `[0, D]`. LIF: `alpha` on
/// `[V_th - 1/2, V_th + 1/2]`, the unit-width window around its single step.
/// All windows are closed.
pub fn surrogate_grad<T: Scalar>(cfg: &NeuronConfig, x: T) -> T {
    let alpha = T::lit(cfg.alpha);
    if cfg.bypass {
        return alpha;
    }
    let d = T::from_u32(cfg.d_max).unwrap();
    let (lo, hi) = match cfg.kind {
        NeuronKind::Tilif => (-d, d),
        NeuronKind::Ilif => (T::zero(), d),
        NeuronKind::Lif => {
            let half = T::lit(0.5);
            (T::lit(cfg.v_th) - half, T::lit(cfg.v_th) + half)
        }
    };
    if x >= lo && x <= hi {
        alpha
    } else {
        T::zero()
    }
}

/// Binary spikes for one token at one neuron site.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeTrain {
    /// `[micro_steps × channels]`, row-major.
    spikes: Vec<bool>,
    /// Per-channel polarity, `+1` or `-1`.
    sign: Vec<i8>,
    channels: usize,
    cfg: NeuronConfig,
}

impl SpikeTrain {
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn micro_steps(&self) -> usize {
        self.spikes.len() / self.channels.max(1)
    }

    pub fn config(&self) -> &NeuronConfig {
        &self.cfg
    }

    pub fn sign(&self) -> &[i8] {
        &self.sign
    }

    /// Spikes emitted at micro-step `step`.
    pub fn step(&self, step: usize) -> &[bool] {
        &self.spikes[step * self.channels..(step + 1) * self.channels]
    }

    pub fn spike_count(&self) -> usize {
        self.spikes.iter().filter(|&&s| s).count()
    }

    /// Signed per-channel spike counts.
    pub fn collapse(&self) -> Vec<i32> {
        let mut counts = vec![0i32; self.channels];
        for step in 0..self.micro_steps() {
            for (c, &s) in counts.iter_mut().zip(self.step(step)) {
                *c += s as i32;
            }
        }
        counts
            .iter()
            .zip(&self.sign)
            .map(|(&c, &s)| c * s as i32)
            .collect()
    }
}

/// Integer view of quantized activations.
pub fn integer_activations<T: Scalar>(x: &[T]) -> Result<Vec<i32>> {
    x.iter()
        .map(|&v| {
            if v.fract() != T::zero() || !v.is_finite() {
                Err(Error::contract(format!("activation {v} is not an integer")))
            } else {
                Ok(v.to_i32().expect("small integer"))
            }
        })
        .collect()
}

/// Expands integer activations into a spike train.
///
/// The magnitude is injected once at the first micro-step and the
/// integrate-and-fire recurrence `v[i] = v[i-1] - V·s[i-1] + x[i]`,
/// `s[i] = [v[i] >= V]` with `V = 1` runs for `d_max` steps.
pub fn expand_spike_train(cfg: &NeuronConfig, s_int: &[i32]) -> Result<SpikeTrain> {
    if cfg.bypass {
        return Err(Error::contract("bypassed neurons have no spike-train form"));
    }
    let d = cfg.d_max as i32;
    let lowest = if cfg.is_signed() { -d } else { 0 };
    if let Some(&bad) = s_int.iter().find(|&&s| s < lowest || s > d) {
        return Err(Error::contract(format!(
            "activation {bad} outside [{lowest}, {d}] for {:?}",
            cfg.kind
        )));
    }
    let steps = cfg.micro_steps() as usize;
    let channels = s_int.len();
    let mut spikes = vec![false; steps * channels];
    const V_TH: f64 = 1.0;
    for (c, &s) in s_int.iter().enumerate() {
        let mut v = 0.0f64;
        let mut fired = false;
        for i in 0..steps {
            let input = if i == 0 { s.unsigned_abs() as f64 } else { 0.0 };
            v = v - if fired { V_TH } else { 0.0 } + input;
            fired = v >= V_TH;
            spikes[i * channels + c] = fired;
        }
    }
    let sign = s_int.iter().map(|&s| if s < 0 { -1 } else { 1 }).collect();
    Ok(SpikeTrain {
        spikes,
        sign,
        channels,
        cfg: *cfg,
    })
}
