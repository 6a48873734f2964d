//! Event-driven projections.
//!
//! Weights are laid out input-major, `[d_in × d_out]`, so that every firing
//! input channel selects one contiguous row. This is the `u · W` orientation
//! used throughout the block; the column form `W[:, i]` of a `[d_out × d_in]`
//! matrix is the same projection transposed.

use crate::error::{Error, Result};
use crate::neurons::SpikeTrain;
use crate::numerics::{Scalar, Tensor};

/// Output of a sparse projection together with the work it performed.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOutput<T> {
    pub values: Vec<T>,
    /// Row additions into the output, counted per output element.
    pub accumulations: usize,
}

fn check_rows<T: Scalar>(w: &Tensor<T>, d_in: usize) -> Result<usize> {
    if w.rank() != 2 || w.shape()[0] != d_in {
        return Err(Error::dim(format!(
            "weight {:?} does not take {d_in} input channels",
            w.shape()
        )));
    }
    Ok(w.cols())
}

/// `y = Σ_{i: s_i ≠ 0} s_i · W[i, :]`; silent channels are never touched.
pub fn spike_linear_int<T: Scalar>(w: &Tensor<T>, s_int: &[i32]) -> Result<SparseOutput<T>> {
    let d_out = check_rows(w, s_int.len())?;
    let mut values = vec![T::zero(); d_out];
    let mut accumulations = 0;
    for (i, &s) in s_int.iter().enumerate() {
        if s == 0 {
            continue;
        }
        let scale = T::from_i32(s).unwrap();
        for (y, &wv) in values.iter_mut().zip(w.row(i)) {
            *y += scale * wv;
        }
        accumulations += d_out;
    }
    Ok(SparseOutput {
        values,
        accumulations,
    })
}

/// Accumulates one weight row per binary spike, micro-step major, channel minor,
/// applying each channel's polarity flag.
pub fn spike_linear_event<T: Scalar>(w: &Tensor<T>, train: &SpikeTrain) -> Result<SparseOutput<T>> {
    let d_out = check_rows(w, train.channels())?;
    let mut values = vec![T::zero(); d_out];
    let mut accumulations = 0;
    let sign = train.sign();
    for step in 0..train.micro_steps() {
        for (i, _) in train.step(step).iter().enumerate().filter(|(_, &s)| s) {
            let row = w.row(i);
            if sign[i] < 0 {
                for (y, &wv) in values.iter_mut().zip(row) {
                    *y -= wv;
                }
            } else {
                for (y, &wv) in values.iter_mut().zip(row) {
                    *y += wv;
                }
            }
            accumulations += d_out;
        }
    }
    Ok(SparseOutput {
        values,
        accumulations,
    })
}

/// Spike accounting for one neuron site.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FireStats {
    pub spike_count: u64,
    pub micro_steps: u64,
    pub channels: u64,
    pub tokens: u64,
}

impl FireStats {
    pub fn new(spike_count: u64, micro_steps: u64, channels: u64, tokens: u64) -> Self {
        Self {
            spike_count,
            micro_steps,
            channels,
            tokens,
        }
    }

    /// Spikes per (token, micro-step, channel) slot.
    pub fn rate(&self) -> f64 {
        let slots = self.tokens * self.micro_steps * self.channels;
        if slots == 0 {
            0.0
        } else {
            self.spike_count as f64 / slots as f64
        }
    }

    /// Folds another run of the same site into this one.
    pub fn merge(&mut self, other: &FireStats) {
        if self.tokens == 0 {
            *self = *other;
            return;
        }
        debug_assert_eq!(self.channels, other.channels);
        debug_assert_eq!(self.micro_steps, other.micro_steps);
        self.spike_count += other.spike_count;
        self.tokens += other.tokens;
    }

    /// Statistics of integer activations `[tokens × channels]` without
    /// materializing the trains; the spike count of a channel is `|s|`.
    pub fn from_integers(s_int: &[i32], channels: usize, micro_steps: u32) -> Self {
        let spikes: u64 = s_int.iter().map(|s| s.unsigned_abs() as u64).sum();
        Self::new(
            spikes,
            micro_steps as u64,
            channels as u64,
            (s_int.len() / channels.max(1)) as u64,
        )
    }
}

/// Fire rate over a run, one train per token. `k` is the micro-step count the
/// rate is normalized by and must match the trains.
pub fn measure_fire_rate(trains: &[SpikeTrain], k: usize) -> Result<FireStats> {
    let first = trains
        .first()
        .ok_or_else(|| Error::input("no spike trains to measure"))?;
    let channels = first.channels();
    let mut spikes = 0u64;
    for tr in trains {
        if tr.micro_steps() != k {
            return Err(Error::contract(format!(
                "train has {} micro-steps, rate normalized by k = {k}",
                tr.micro_steps()
            )));
        }
        if tr.channels() != channels {
            return Err(Error::dim("trains disagree on channel count"));
        }
        spikes += tr.spike_count() as u64;
    }
    Ok(FireStats::new(spikes, k as u64, channels as u64, trains.len() as u64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neurons::{expand_spike_train, NeuronConfig};

    /// The 2×2 example weight `[[1,2],[3,4]]` in `[d_out × d_in]` form, stored input-major.
    fn w() -> Tensor<f64> {
        Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]])
            .unwrap()
            .transpose()
            .unwrap()
    }

    #[test]
    fn int_examples() {
        assert_eq!(spike_linear_int(&w(), &[1, 0]).unwrap().values, vec![1.0, 3.0]);
        assert_eq!(spike_linear_int(&w(), &[-2, 1]).unwrap().values, vec![0.0, -2.0]);
        let z = spike_linear_int(&w(), &[0, 0]).unwrap();
        assert_eq!(z.values, vec![0.0, 0.0]);
        assert_eq!(z.accumulations, 0);
    }

    #[test]
    fn event_examples_match_int() {
        let cfg = NeuronConfig::tilif(4).unwrap();
        for s in [[1, 0], [-2, 1], [0, 0]] {
            let tr = expand_spike_train(&cfg, &s).unwrap();
            let ev = spike_linear_event(&w(), &tr).unwrap();
            assert_eq!(ev.values, spike_linear_int(&w(), &s).unwrap().values);
            assert_eq!(ev.accumulations, tr.spike_count() * 2);
        }
    }

    #[test]
    fn dimension_mismatch() {
        assert!(matches!(spike_linear_int(&w(), &[1, 0, 1]), Err(Error::Dimension(_))));
        let tr = expand_spike_train(&NeuronConfig::tilif(2).unwrap(), &[1]).unwrap();
        assert!(spike_linear_event(&w(), &tr).is_err());
    }

    #[test]
    fn fire_rate_examples() {
        let cfg = NeuronConfig::tilif(4).unwrap();
        let tr = expand_spike_train(&cfg, &[3, -1]).unwrap();
        assert_eq!(measure_fire_rate(&[tr], 4).unwrap().rate(), 0.5);
        let zero = expand_spike_train(&cfg, &[0, 0]).unwrap();
        assert_eq!(measure_fire_rate(&[zero], 4).unwrap().rate(), 0.0);
        let sat = expand_spike_train(&cfg, &[4, -4]).unwrap();
        assert_eq!(measure_fire_rate(&[sat.clone()], 4).unwrap().rate(), 1.0);
        assert!(measure_fire_rate(&[], 4).is_err());
        assert!(measure_fire_rate(&[sat], 1).is_err());
    }

    #[test]
    fn integer_stats_agree_with_trains() {
        let cfg = NeuronConfig::tilif(4).unwrap();
        let s = [3, -1, 0, 4, -4, 2];
        let trains: Vec<_> = s
            .chunks(2)
            .map(|tok| expand_spike_train(&cfg, tok).unwrap())
            .collect();
        assert_eq!(
            measure_fire_rate(&trains, 4).unwrap(),
            FireStats::from_integers(&s, 2, 4)
        );
    }

    #[test]
    fn fire_rate_invariant_under_channel_permutation() {
        let cfg = NeuronConfig::ilif(3).unwrap();
        let a = expand_spike_train(&cfg, &[3, 0, 1, 2]).unwrap();
        let b = expand_spike_train(&cfg, &[2, 1, 0, 3]).unwrap();
        assert_eq!(
            measure_fire_rate(&[a], 3).unwrap().rate(),
            measure_fire_rate(&[b], 3).unwrap().rate()
        );
    }
}
