//! Perplexity and activation histograms.

use crate::corpus::{eval_batches, Batch};
use crate::error::{Error, Result};
use crate::mamba2::{forward_graph, ClampMode, ModelParams, Site};
use crate::numerics::{ops, Graph, Scalar};

/// Summed next-token cross-entropy and the number of predictions in `batch`.
pub fn batch_cross_entropy<T: Scalar>(
    model: &ModelParams<T>,
    batch: &Batch,
    clamp: Option<(ClampMode, Site)>,
) -> Result<(f64, usize)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, &|_| false);
    let out = forward_graph(&mut g, model, &bound, &batch.inputs, batch.seq_len, clamp)?;
    let ls = ops::log_softmax(g.value(out.logits), 1)?;
    let mut nll = 0.0;
    for (r, &t) in batch.targets.iter().enumerate() {
        nll -= ls.row(r)[t].to_f64().unwrap();
    }
    Ok((nll, batch.targets.len()))
}

/// `exp(mean next-token cross-entropy)` over up to `max_windows` windows of `seq_len`.
pub fn eval_ppl<T: Scalar>(
    model: &ModelParams<T>,
    stream: &[usize],
    seq_len: usize,
    max_windows: usize,
    clamp: Option<(ClampMode, Site)>,
) -> Result<f64> {
    let (mut nll, mut n) = (0.0, 0usize);
    for b in eval_batches(stream, seq_len, 8, max_windows)? {
        let (s, k) = batch_cross_entropy(model, &b, clamp)?;
        nll += s;
        n += k;
    }
    Ok((nll / n as f64).exp())
}

/// Values observed at `site` of `layer` over the evaluation windows.
pub fn collect_activations<T: Scalar>(
    model: &ModelParams<T>,
    stream: &[usize],
    seq_len: usize,
    max_windows: usize,
    layer: usize,
    site: Site,
) -> Result<Vec<f64>> {
    if layer >= model.cfg.n_layers {
        return Err(Error::input(format!("layer {layer} outside 0..{}", model.cfg.n_layers)));
    }
    let mut values = Vec::new();
    for b in eval_batches(stream, seq_len, 8, max_windows)? {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, &|_| false);
        let out = forward_graph(&mut g, model, &bound, &b.inputs, b.seq_len, None)?;
        let (u, y) = out.sites[layer];
        let id = match site {
            Site::Input => u,
            Site::Output => y,
        };
        values.extend(g.value(id).data().iter().map(|v| v.to_f64().unwrap()));
    }
    Ok(values)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistBin {
    pub lo: f64,
    pub hi: f64,
    pub count: u64,
}

/// Uniform bins over `[min, max]` of `values`; the last bin is closed.
pub fn histogram(values: &[f64], bins: usize) -> Result<Vec<HistBin>> {
    if bins == 0 {
        return Err(Error::input("histogram needs at least one bin"));
    }
    if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("histogram needs finite values"));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0u64; bins];
    for &v in values {
        let i = (((v - lo) / width) as usize).min(bins - 1);
        counts[i] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistBin {
            lo: lo + width * i as f64,
            hi: if i + 1 == bins { lo + width * bins as f64 } else { lo + width * (i + 1) as f64 },
            count,
        })
        .collect())
}

pub fn histogram_csv(bins: &[HistBin]) -> String {
    let mut out = String::from("value_lo,value_hi,count\n");
    for b in bins {
        out.push_str(&format!("{:.6},{:.6},{}\n", b.lo, b.hi, b.count));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synthetic_corpus, token_stream};
    use crate::mamba2::{model_forward, Mamba2Config};

    #[test]
    fn histogram_counts_everything() {
        let v = [0.0, 0.1, 0.5, 0.9, 1.0];
        let h = histogram(&v, 2).unwrap();
        assert_eq!(h.iter().map(|b| b.count).sum::<u64>(), 5);
        assert_eq!(h[0].count, 2);
        assert_eq!(h[1].hi, 1.0);
        assert!(histogram(&[], 3).is_err());
        assert_eq!(histogram(&[2.0, 2.0], 4).unwrap()[0].count, 2);
    }

    #[test]
    fn ppl_matches_straight_line_oracle() {
        let m = ModelParams::<f64>::init(&Mamba2Config::toy(), 2).unwrap();
        let stream = token_stream(&synthetic_corpus(0, 6));
        let ppl = eval_ppl(&m, &stream, 16, 2, None).unwrap();
        let mut nll = 0.0;
        for w in 0..2 {
            let s = w * 16;
            let (logits, _) = model_forward(&m, &stream[s..s + 16]).unwrap();
            for r in 0..16 {
                let row = logits.row(r);
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                nll += lse - row[stream[s + r + 1]];
            }
        }
        assert!((ppl - (nll / 32.0).exp()).abs() < 1e-9);
    }
}
