//! Equivalence checks between the dense, integer and event-driven projections,
//! and between integer activations and their spike trains.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::neurons::{expand_spike_train, integer_activations, neuron_forward, surrogate_grad, NeuronConfig, NeuronKind};
use crate::numerics::{ops, Scalar, Tensor};
use crate::spike_kernel::{spike_linear_event, spike_linear_int};

pub const F32_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    pub instances: usize,
    /// Instances where the 64-bit integer-weighted paths differ at all.
    pub exact_mismatches: usize,
    /// Largest pairwise gap among the 32-bit paths.
    pub max_f32_err: f64,
}

impl EquivalenceReport {
    pub fn passed(&self) -> bool {
        self.exact_mismatches == 0 && self.max_f32_err <= F32_TOLERANCE
    }
}

fn random_neuron(rng: &mut ChaCha8Rng) -> NeuronConfig {
    match rng.random_range(0..3) {
        0 => NeuronConfig::lif(),
        1 => NeuronConfig::ilif(rng.random_range(1..=8)).expect("valid"),
        _ => NeuronConfig::tilif(rng.random_range(1..=8)).expect("valid"),
    }
}

/// Runs the three paths on one quantized input; returns the outputs in order
/// dense, integer, event.
fn three_paths<T: Scalar>(cfg: &NeuronConfig, w: &Tensor<T>, x: &Tensor<T>) -> Result<[Vec<T>; 3]> {
    let q = neuron_forward(cfg, x);
    let dense = ops::matmul(&q, w)?.into_data();
    let s = integer_activations(q.data())?;
    let int = spike_linear_int(w, &s)?.values;
    let train = expand_spike_train(cfg, &s)?;
    let event = spike_linear_event(w, &train)?.values;
    Ok([dense, int, event])
}

fn max_gap<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.to_f64().unwrap() - y.to_f64().unwrap()).abs())
        .fold(0.0, f64::max)
}

/// `instances` random (W, x) pairs with `d_in ≤ 256`, `d_out ≤ 32`. Each
/// instance is checked with small-integer weights and inputs spanning the
/// whole clip range in 64-bit (where every sum is exact), and with real
/// weights in 32-bit.
pub fn spike_equivalence(instances: usize, seed: u64) -> Result<EquivalenceReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut exact_mismatches = 0;
    let mut max_f32_err = 0.0f64;
    for _ in 0..instances {
        let cfg = random_neuron(&mut rng);
        let d_in = rng.random_range(1..=256);
        let d_out = rng.random_range(1..=32);
        let reach = cfg.d_max as f64 + 1.5;
        let x: Vec<f64> = (0..d_in).map(|_| rng.random_range(-reach..reach)).collect();

        let wi = Tensor::from_fn(&[d_in, d_out], |_| rng.random_range(-8i32..=8) as f64);
        let xi = Tensor::new(vec![1, d_in], x)?;
        let [dense, int, event] = three_paths(&cfg, &wi, &xi)?;
        if dense != int || int != event {
            exact_mismatches += 1;
        }

        // Unit-RMS activations and 1/√fan_in weights, the regime of a normalized block input.
        let scale = 1.0 / (d_in as f32).sqrt();
        let wf = Tensor::from_fn(&[d_in, d_out], |_| scale * rng.sample::<f32, _>(StandardNormal));
        let xf = Tensor::from_fn(&[1, d_in], |_| rng.sample::<f32, _>(StandardNormal));
        let [dense, int, event] = three_paths(&cfg, &wf, &xf)?;
        max_f32_err = max_f32_err
            .max(max_gap(&dense, &int))
            .max(max_gap(&int, &event))
            .max(max_gap(&dense, &event));
    }
    Ok(EquivalenceReport {
        instances,
        exact_mismatches,
        max_f32_err,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundTripReport {
    pub cases: usize,
    pub failures: Vec<(NeuronKind, u32, i32)>,
}

/// `collapse(expand(s)) == s` for every admissible `s` of every neuron with
/// `d_max ∈ 1..=8`.
pub fn neuron_round_trip() -> Result<RoundTripReport> {
    let mut cases = 0;
    let mut failures = Vec::new();
    let mut neurons = vec![NeuronConfig::lif()];
    for d in 1..=8 {
        neurons.push(NeuronConfig::ilif(d)?);
        neurons.push(NeuronConfig::tilif(d)?);
    }
    for cfg in neurons {
        let d = cfg.d_max as i32;
        let lo = if cfg.is_signed() { -d } else { 0 };
        let all: Vec<i32> = (lo..=d).collect();
        let back = expand_spike_train(&cfg, &all)?.collapse();
        for (&s, &b) in all.iter().zip(&back) {
            cases += 1;
            if s != b {
                failures.push((cfg.kind, cfg.d_max, s));
            }
        }
    }
    Ok(RoundTripReport { cases, failures })
}

/// TI-LIF surrogate at `±D` (inside) and one ulp beyond (outside), `D ∈ 1..=8`.
/// Returns the offending points.
pub fn surrogate_boundaries() -> Result<Vec<(u32, f64)>> {
    let mut bad = Vec::new();
    for d in 1..=8u32 {
        let cfg = NeuronConfig::tilif(d)?;
        let df = d as f64;
        let probes = [
            (df, cfg.alpha),
            (-df, cfg.alpha),
            (df.next_up(), 0.0),
            ((-df).next_down(), 0.0),
        ];
        for (x, want) in probes {
            if surrogate_grad(&cfg, x) != want {
                bad.push((d, x));
            }
        }
    }
    Ok(bad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equivalence_small_run() {
        let r = spike_equivalence(200, 1).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn round_trip_is_exhaustive() {
        let r = neuron_round_trip().unwrap();
        // LIF {0,1}, I-LIF Σ(d+1), TI-LIF Σ(2d+1) over d = 1..8.
        assert_eq!(r.cases, 2 + 44 + 80);
        assert!(r.failures.is_empty());
    }

    #[test]
    fn surrogate_window_closed() {
        assert!(surrogate_boundaries().unwrap().is_empty());
    }
}
