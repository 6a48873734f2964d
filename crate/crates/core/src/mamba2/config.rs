use std::collections::BTreeSet;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::energy::ModelShape;
use crate::error::{Error, Result};
use crate::neurons::NeuronConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Dense,
    Spiking,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Mode::Dense),
            "spiking" => Ok(Mode::Spiking),
            other => Err(Error::input(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mamba2Config {
    pub d_model: usize,
    pub n_state: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub n_layers: usize,
    pub conv_width: usize,
    pub vocab: usize,
    pub mode: Mode,
    pub neuron: NeuronConfig,
    pub sgc_layers: BTreeSet<usize>,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
}

fn default_eps() -> f64 {
    1e-5
}

/// First, middle and last layer.
pub fn default_sgc_layers(n_layers: usize) -> BTreeSet<usize> {
    if n_layers == 0 {
        return BTreeSet::new();
    }
    [0, n_layers / 2, n_layers - 1].into_iter().collect()
}

impl Mamba2Config {
    /// Two-layer byte-level model used for the training experiments.
    pub fn toy() -> Self {
        Self {
            d_model: 64,
            n_state: 16,
            n_heads: 2,
            d_head: 64,
            n_layers: 2,
            conv_width: 4,
            vocab: 259,
            mode: Mode::Dense,
            neuron: NeuronConfig::tilif(4).expect("valid preset"),
            sgc_layers: default_sgc_layers(2),
            norm_eps: default_eps(),
        }
    }

    pub fn spiking(mut self, neuron: NeuronConfig) -> Self {
        self.mode = Mode::Spiking;
        self.neuron = neuron;
        self
    }

    pub fn dense(mut self) -> Self {
        self.mode = Mode::Dense;
        self
    }

    pub fn with_sgc_layers(mut self, layers: impl IntoIterator<Item = usize>) -> Self {
        self.sgc_layers = layers.into_iter().collect();
        self
    }

    /// `H · P`, the inner width of the block.
    pub fn inner(&self) -> usize {
        self.n_heads * self.d_head
    }

    /// Width of the unified input projection: `z, x′, B′, C′, Δ′`.
    pub fn in_proj_width(&self) -> usize {
        2 * self.inner() + 2 * self.n_state + self.n_heads
    }

    /// Channels that go through the causal convolution (`x′, B′, C′`).
    pub fn conv_channels(&self) -> usize {
        self.inner() + 2 * self.n_state
    }

    pub fn is_spiking(&self) -> bool {
        self.mode == Mode::Spiking
    }

    pub fn has_sgc(&self, layer: usize) -> bool {
        self.is_spiking() && self.sgc_layers.contains(&layer)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_state", self.n_state),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("n_layers", self.n_layers),
            ("vocab", self.vocab),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.inner() != 2 * self.d_model {
            return Err(Error::Config(format!(
                "n_heads × d_head = {} must equal 2 × d_model = {}",
                self.inner(),
                2 * self.d_model
            )));
        }
        if self.conv_width < 2 {
            return Err(Error::Config("conv_width must be at least 2".into()));
        }
        if let Some(&l) = self.sgc_layers.iter().find(|&&l| l >= self.n_layers) {
            return Err(Error::Config(format!(
                "sgc layer {l} outside 0..{}",
                self.n_layers
            )));
        }
        if !(self.norm_eps >= 0.0) {
            return Err(Error::Config("norm_eps must be nonnegative".into()));
        }
        self.neuron.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Whether two configs describe interchangeable parameter shapes.
    pub fn same_shape(&self, other: &Self) -> bool {
        self.d_model == other.d_model
            && self.n_state == other.n_state
            && self.n_heads == other.n_heads
            && self.d_head == other.d_head
            && self.n_layers == other.n_layers
            && self.conv_width == other.conv_width
            && self.vocab == other.vocab
    }

    pub fn shape(&self, name: &str) -> ModelShape {
        ModelShape {
            name: name.to_string(),
            d_model: self.d_model,
            n_state: self.n_state,
            n_heads: self.n_heads,
            d_head: self.d_head,
            n_layers: self.n_layers,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_is_valid() {
        let c = Mamba2Config::toy();
        c.validate().unwrap();
        assert_eq!(c.in_proj_width(), 2 * 128 + 32 + 2);
        assert_eq!(c.sgc_layers, [0, 1].into_iter().collect());
    }

    #[test]
    fn head_width_invariant_enforced() {
        let mut c = Mamba2Config::toy();
        c.d_head = 32;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn sgc_layer_out_of_range() {
        let c = Mamba2Config::toy().with_sgc_layers([5]);
        assert!(c.validate().is_err());
    }

    #[test]
    fn default_sgc_sites() {
        assert_eq!(default_sgc_layers(24), [0, 12, 23].into_iter().collect());
        assert_eq!(default_sgc_layers(1), [0].into_iter().collect());
    }

    #[test]
    fn json_round_trip() {
        let c = Mamba2Config::toy().spiking(NeuronConfig::ilif(3).unwrap());
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<Mamba2Config>(&s).unwrap(), c);
    }
}
