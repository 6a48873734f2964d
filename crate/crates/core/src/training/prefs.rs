//! Preference data and the DPO / KTO fine-tuning loop.
//!
//! Records are JSON lines:
//! `{"prompt": str, "response": str, "label": 1 | -1, "rejected": str?, "weight": float?}`.
//! Paired (DPO) records carry `rejected`; `response` is then the preferred one.

use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mamba2::{forward_graph, pooled_rate, ModelParams, ProjSite};
use crate::numerics::{ops, Graph, NodeId, Scalar};
use crate::tokenizer::{tokenize, PAD};

use super::{apply_update, dpo_loss_graph, f6, kto_loss_graph, lr_at, AdamW, Label};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub prompt: String,
    pub response: String,
    #[serde(default = "one")]
    pub label: i8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejected: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
}

fn one() -> i8 {
    1
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceExample {
    /// `[BOS, prompt bytes…]`.
    pub prompt: Vec<usize>,
    /// `[response bytes…, EOS]`.
    pub response: Vec<usize>,
    pub rejected: Option<Vec<usize>>,
    pub label: Label,
    pub weight: Option<f64>,
}

impl TryFrom<&PreferenceRecord> for PreferenceExample {
    type Error = Error;

    fn try_from(r: &PreferenceRecord) -> Result<Self> {
        let label = match r.label {
            1 => Label::Desirable,
            -1 => Label::Undesirable,
            other => return Err(Error::input(format!("label must be 1 or -1, got {other}"))),
        };
        if let Some(w) = r.weight {
            if !(w > 0.0) {
                return Err(Error::input(format!("weight {w} must be positive")));
            }
        }
        let mut prompt = tokenize(r.prompt.as_bytes());
        prompt.pop();
        let body = |s: &str| tokenize(s.as_bytes())[1..].to_vec();
        Ok(Self {
            prompt,
            response: body(&r.response),
            rejected: r.rejected.as_deref().map(body),
            label,
            weight: r.weight,
        })
    }
}

pub fn parse_preferences(text: &str) -> Result<Vec<PreferenceExample>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let rec: PreferenceRecord =
                serde_json::from_str(l).map_err(|e| Error::input(format!("line {}: {e}", i + 1)))?;
            PreferenceExample::try_from(&rec)
        })
        .collect()
}

/// Synthetic pairs from `corpus` lines: the preferred response is the rest of
/// the sentence, the dispreferred one the same words in reverse order.
/// Unpaired records alternate between the two with labels 1 and -1.
pub fn synthetic_preferences(corpus: &str, n: usize, paired: bool, seed: u64) -> Result<Vec<PreferenceRecord>> {
    let lines: Vec<&str> = corpus.lines().filter(|l| l.split(' ').count() >= 3).collect();
    if lines.is_empty() {
        return Err(Error::input("corpus has no sentences of three or more words"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let line = lines.choose(&mut rng).unwrap();
        let words: Vec<&str> = line.split(' ').collect();
        let cut = rng.random_range(1..words.len() - 1);
        let prompt = format!("{} ", words[..cut].join(" "));
        let good = words[cut..].join(" ");
        let bad = words[cut..].iter().rev().copied().collect::<Vec<_>>().join(" ");
        out.push(if paired {
            PreferenceRecord { prompt, response: good, label: 1, rejected: Some(bad), weight: None }
        } else if i % 2 == 0 {
            PreferenceRecord { prompt, response: good, label: 1, rejected: None, weight: None }
        } else {
            PreferenceRecord { prompt, response: bad, label: -1, rejected: None, weight: None }
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RlMethod {
    Dpo,
    Kto,
}

impl FromStr for RlMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dpo" => Ok(RlMethod::Dpo),
            "kto" => Ok(RlMethod::Kto),
            other => Err(Error::input(format!("unknown method `{other}` (expected dpo or kto)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RlConfig {
    pub method: RlMethod,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta_pref: f64,
    pub seed: u64,
    pub clip: f64,
    /// Sequences are truncated to this many tokens.
    pub max_len: usize,
    /// Fixed KTO baseline; the batch mean over desirable examples when absent.
    pub z_ref: Option<f64>,
    pub weight_desirable: f64,
    pub weight_undesirable: f64,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            method: RlMethod::Dpo,
            steps: 200,
            batch: 8,
            lr: 1e-4,
            beta_pref: 0.1,
            seed: 0,
            clip: 1.0,
            max_len: 64,
            z_ref: None,
            weight_desirable: 1.0,
            weight_undesirable: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RlRow {
    pub step: usize,
    pub loss: f64,
    pub margin: f64,
    pub fr_in: f64,
    pub fr_out: f64,
    pub lr: f64,
}

impl RlRow {
    pub const HEADER: &'static str = "step,loss,margin,fr_in,fr_out,lr";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step,
            f6(self.loss),
            f6(self.margin),
            f6(self.fr_in),
            f6(self.fr_out),
            f6(self.lr)
        )
    }
}

#[derive(Debug, Clone)]
pub struct RlReport<T> {
    pub policy: ModelParams<T>,
    pub rows: Vec<RlRow>,
}

/// Padded token batch whose segment map selects response-token predictions.
struct SeqBatch {
    tokens: Vec<usize>,
    targets: Vec<usize>,
    seg: Vec<Option<usize>>,
    seq_len: usize,
}

fn seq_batch(pairs: &[(&[usize], &[usize])], max_len: usize) -> Result<SeqBatch> {
    let len = pairs
        .iter()
        .map(|(p, r)| (p.len() + r.len()).min(max_len))
        .max()
        .ok_or_else(|| Error::input("empty preference batch"))?;
    let mut tokens = Vec::with_capacity(pairs.len() * len);
    let mut targets = Vec::with_capacity(pairs.len() * len);
    let mut seg = Vec::with_capacity(pairs.len() * len);
    for (i, (p, r)) in pairs.iter().enumerate() {
        if p.is_empty() {
            return Err(Error::input("prompt must contain at least BOS"));
        }
        let mut seq: Vec<usize> = p.iter().chain(r.iter()).copied().take(len).collect();
        let real = seq.len();
        seq.resize(len, PAD);
        for t in 0..len {
            let next = t + 1;
            let scored = next < real && next >= p.len();
            tokens.push(seq[t]);
            targets.push(if scored { seq[next] } else { 0 });
            seg.push(scored.then_some(i));
        }
    }
    Ok(SeqBatch { tokens, targets, seg, seq_len: len })
}

/// Sequence log-probs of the responses (policy node, plus fire rates) on `g`.
fn policy_logps<T: Scalar>(
    g: &mut Graph<T>,
    model: &ModelParams<T>,
    bound: &crate::mamba2::BoundModel,
    b: &SeqBatch,
    n: usize,
) -> Result<(NodeId, f64, f64)> {
    let out = forward_graph(g, model, bound, &b.tokens, b.seq_len, None)?;
    let ls = g.log_softmax(out.logits)?;
    let picked = g.pick(ls, &b.targets)?;
    let lp = g.segment_sum(picked, &b.seg, n)?;
    Ok((lp, pooled_rate(&out.fires, ProjSite::In), pooled_rate(&out.fires, ProjSite::Out)))
}

fn reference_logps<T: Scalar>(model: &ModelParams<T>, b: &SeqBatch, n: usize) -> Result<Vec<T>> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, &|_| false);
    let out = forward_graph(&mut g, model, &bound, &b.tokens, b.seq_len, None)?;
    let ls = ops::log_softmax(g.value(out.logits), 1)?;
    let mut acc = vec![T::zero(); n];
    for (r, (s, &t)) in b.seg.iter().zip(&b.targets).enumerate() {
        if let Some(i) = s {
            acc[*i] += ls.row(r)[t];
        }
    }
    Ok(acc)
}

/// Preference optimization of `policy` against a frozen copy of itself.
pub fn rl_run<T: Scalar>(policy: &ModelParams<T>, data: &[PreferenceExample], rc: &RlConfig) -> Result<RlReport<T>> {
    if data.is_empty() {
        return Err(Error::input("no preference examples"));
    }
    if rc.method == RlMethod::Dpo && data.iter().any(|e| e.rejected.is_none()) {
        return Err(Error::input("DPO needs a dispreferred response on every record"));
    }
    let reference = policy.clone();
    let mut model = policy.clone();
    let mut opt = AdamW::new(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(rc.seed ^ 0x5eed_0f);
    let beta = T::lit(rc.beta_pref);
    let mut rows = Vec::with_capacity(rc.steps);
    for step in 0..rc.steps {
        let batch: Vec<&PreferenceExample> = (0..rc.batch).map(|_| &data[rng.random_range(0..data.len())]).collect();
        let lr = lr_at(step, rc.steps, rc.lr);
        let mut g = Graph::new();
        let bound = model.bind(&mut g, &|_| true);
        let b = batch.len();
        let (loss, margin, fr_in, fr_out) = match rc.method {
            RlMethod::Dpo => {
                let mut pairs: Vec<(&[usize], &[usize])> =
                    batch.iter().map(|e| (e.prompt.as_slice(), e.response.as_slice())).collect();
                pairs.extend(batch.iter().map(|e| (e.prompt.as_slice(), e.rejected.as_deref().unwrap())));
                let sb = seq_batch(&pairs, rc.max_len)?;
                let r = reference_logps(&reference, &sb, 2 * b)?;
                let (lp, fi, fo) = policy_logps(&mut g, &model, &bound, &sb, 2 * b)?;
                let w_idx: Vec<Option<usize>> = (0..2 * b).map(|i| (i < b).then_some(i)).collect();
                let l_idx: Vec<Option<usize>> = (0..2 * b).map(|i| (i >= b).then(|| i - b)).collect();
                let pw = g.segment_sum(lp, &w_idx, b)?;
                let pl = g.segment_sum(lp, &l_idx, b)?;
                let (loss, m) = dpo_loss_graph(&mut g, pw, pl, &r[..b], &r[b..], beta)?;
                (loss, m.to_f64().unwrap(), fi, fo)
            }
            RlMethod::Kto => {
                let pairs: Vec<(&[usize], &[usize])> =
                    batch.iter().map(|e| (e.prompt.as_slice(), e.response.as_slice())).collect();
                let sb = seq_batch(&pairs, rc.max_len)?;
                let r = reference_logps(&reference, &sb, b)?;
                let (lp, fi, fo) = policy_logps(&mut g, &model, &bound, &sb, b)?;
                let labels: Vec<Label> = batch.iter().map(|e| e.label).collect();
                let weights: Vec<T> = batch
                    .iter()
                    .map(|e| {
                        T::lit(e.weight.unwrap_or(match e.label {
                            Label::Desirable => rc.weight_desirable,
                            Label::Undesirable => rc.weight_undesirable,
                        }))
                    })
                    .collect();
                let rewards: Vec<f64> = g
                    .value(lp)
                    .data()
                    .iter()
                    .zip(&r)
                    .map(|(&p, &q)| rc.beta_pref * (p - q).to_f64().unwrap())
                    .collect();
                let (loss, z) = kto_loss_graph(&mut g, &labels, lp, &r, beta, rc.z_ref.map(T::lit), &weights)?;
                let z = z.to_f64().unwrap();
                let m = labels
                    .iter()
                    .zip(&rewards)
                    .map(|(l, &ri)| l.sign::<f64>() * (ri - z))
                    .sum::<f64>()
                    / b as f64;
                (loss, m, fi, fo)
            }
        };
        let row = RlRow {
            step,
            loss: g.value(loss).item().to_f64().unwrap(),
            margin,
            fr_in,
            fr_out,
            lr,
        };
        let grads = g.backward(loss)?;
        apply_update(&mut model, &mut opt, &bound, grads, lr, rc.clip, &|_| true)?;
        rows.push(row);
    }
    Ok(RlReport { policy: model, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_parse() {
        let text = r#"{"prompt":"the cat ","response":"sees the river.","rejected":"river. the sees"}
{"prompt":"a ","response":"b","label":-1,"weight":2.0}
"#;
        let ex = parse_preferences(text).unwrap();
        assert_eq!(ex.len(), 2);
        assert_eq!(ex[0].prompt[0], crate::tokenizer::BOS);
        assert_eq!(*ex[0].response.last().unwrap(), crate::tokenizer::EOS);
        assert!(ex[0].rejected.is_some());
        assert_eq!(ex[1].label, Label::Undesirable);
        assert!(parse_preferences(r#"{"prompt":"a","response":"b","label":0}"#).is_err());
        assert!(parse_preferences(r#"{"prompt":"a","response":"b","weight":-1}"#).is_err());
        assert!(parse_preferences("not json").is_err());
    }

    #[test]
    fn segments_cover_response_only() {
        let p = [256, 1, 2];
        let r = [3, 4, 257];
        let b = seq_batch(&[(&p, &r)], 64).unwrap();
        let scored: Vec<usize> = b.seg.iter().zip(&b.targets).filter(|(s, _)| s.is_some()).map(|(_, &t)| t).collect();
        assert_eq!(scored, vec![3, 4, 257]);
    }

    #[test]
    fn synthetic_pairs() {
        let recs = synthetic_preferences("the cat sees the river.\n", 4, true, 0).unwrap();
        assert!(recs.iter().all(|r| r.rejected.is_some()));
        let u = synthetic_preferences("the cat sees the river.\n", 4, false, 0).unwrap();
        assert_eq!(u.iter().filter(|r| r.label == -1).count(), 2);
    }
}
