//! Distillation and preference losses, each as a plain value function and as
//! a graph builder for training.

use crate::error::{Error, Result};
use crate::numerics::{ops, Activation, Graph, NodeId, Scalar, Tensor};

fn sigmoid<T: Scalar>(x: T) -> T {
    Activation::Sigmoid.apply(x)
}

fn softplus<T: Scalar>(x: T) -> T {
    Activation::Softplus.apply(x)
}

/// `(1/T) Σ_t KL(p_teacher,t ‖ p_student,t)` over rows softmaxed along the last axis.
pub fn kl_distill_loss<T: Scalar>(teacher_logits: &Tensor<T>, student_logits: &Tensor<T>) -> Result<T> {
    teacher_logits.expect_same_shape(student_logits)?;
    let axis = teacher_logits.rank() - 1;
    let lt = ops::log_softmax(teacher_logits, axis)?;
    let ls = ops::log_softmax(student_logits, axis)?;
    let rows = teacher_logits.numel() / teacher_logits.cols();
    let kl: T = lt
        .data()
        .iter()
        .zip(ls.data())
        .map(|(&a, &b)| a.exp() * (a - b))
        .sum();
    Ok(kl / T::from_usize(rows).unwrap())
}

/// KL against fixed teacher logits, differentiable in the student logits.
pub fn kl_distill_loss_graph<T: Scalar>(g: &mut Graph<T>, teacher_logits: &Tensor<T>, student: NodeId) -> Result<NodeId> {
    g.value(student).expect_same_shape(teacher_logits)?;
    let rows = teacher_logits.rows();
    let lt = ops::log_softmax(teacher_logits, 1)?;
    let pt = lt.map(|v| v.exp());
    let ls = g.log_softmax(student)?;
    let lt = g.constant(lt);
    let pt = g.constant(pt);
    let diff = g.sub(lt, ls)?;
    let w = g.mul(pt, diff)?;
    let s = g.sum(w);
    Ok(g.scale(s, T::one() / T::from_usize(rows).unwrap()))
}

/// `L_KL + mean(hidden)`; no hidden terms leaves `L_KL`.
pub fn total_distill_loss<T: Scalar>(l_kl: T, hidden: &[T]) -> T {
    if hidden.is_empty() {
        return l_kl;
    }
    l_kl + hidden.iter().copied().sum::<T>() / T::from_usize(hidden.len()).unwrap()
}

pub fn total_distill_loss_graph<T: Scalar>(g: &mut Graph<T>, l_kl: NodeId, hidden: &[NodeId]) -> Result<NodeId> {
    let Some((&first, rest)) = hidden.split_first() else {
        return Ok(l_kl);
    };
    let mut acc = first;
    for &h in rest {
        acc = g.add(acc, h)?;
    }
    let mean = g.scale(acc, T::one() / T::from_usize(hidden.len()).unwrap());
    g.add(l_kl, mean)
}

/// Mean next-token cross-entropy over rows with a target.
pub fn cross_entropy_graph<T: Scalar>(g: &mut Graph<T>, logits: NodeId, targets: &[Option<usize>]) -> Result<NodeId> {
    let count = targets.iter().filter(|t| t.is_some()).count();
    if count == 0 {
        return Err(Error::input("cross-entropy needs at least one target"));
    }
    let ls = g.log_softmax(logits)?;
    let idx: Vec<usize> = targets.iter().map(|t| t.unwrap_or(0)).collect();
    let picked = g.pick(ls, &idx)?;
    let seg: Vec<Option<usize>> = targets.iter().map(|t| t.map(|_| 0)).collect();
    let s = g.segment_sum(picked, &seg, 1)?;
    let s = g.sum(s);
    Ok(g.scale(s, -T::one() / T::from_usize(count).unwrap()))
}

/// Summed log-probabilities of target tokens per segment: `seg[i]` names the
/// sequence row `i` contributes to, `None` for prompt and padding rows.
pub fn sequence_logprobs_graph<T: Scalar>(
    g: &mut Graph<T>,
    logits: NodeId,
    targets: &[usize],
    seg: &[Option<usize>],
    n_seq: usize,
) -> Result<NodeId> {
    let ls = g.log_softmax(logits)?;
    let picked = g.pick(ls, targets)?;
    g.segment_sum(picked, seg, n_seq)
}

/// Sequence log-probabilities of a preferred response and, for paired data,
/// a dispreferred one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairLogps<T> {
    pub chosen: T,
    pub rejected: Option<T>,
}

/// `−log σ(β((π_w − ref_w) − (π_l − ref_l)))`.
pub fn dpo_loss<T: Scalar>(policy: &PairLogps<T>, reference: &PairLogps<T>, beta_pref: T) -> Result<T> {
    let (Some(pl), Some(rl)) = (policy.rejected, reference.rejected) else {
        return Err(Error::input("DPO needs a dispreferred response"));
    };
    let margin = beta_pref * ((policy.chosen - reference.chosen) - (pl - rl));
    Ok(softplus(-margin))
}

/// Batched DPO over `[B]` policy log-prob nodes; returns (mean loss, mean margin value).
pub fn dpo_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    policy_w: NodeId,
    policy_l: NodeId,
    ref_w: &[T],
    ref_l: &[T],
    beta_pref: T,
) -> Result<(NodeId, T)> {
    let b = ref_w.len();
    if ref_l.len() != b || g.value(policy_w).numel() != b || g.value(policy_l).numel() != b {
        return Err(Error::dim("DPO batch sizes disagree"));
    }
    let diff = g.sub(policy_w, policy_l)?;
    let offset: Vec<T> = ref_w.iter().zip(ref_l).map(|(&w, &l)| l - w).collect();
    let offset = g.constant(Tensor::new(vec![b], offset)?);
    let logit = g.add(diff, offset)?;
    let margin = g.scale(logit, beta_pref);
    let mean_margin = g.value(margin).sum() / T::from_usize(b).unwrap();
    let neg = g.scale(margin, -T::one());
    let sp = g.act(Activation::Softplus, neg);
    Ok((g.mean(sp), mean_margin))
}

/// Desirable (`+1`) or undesirable (`−1`) response.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Desirable,
    Undesirable,
}

impl Label {
    pub fn sign<T: Scalar>(self) -> T {
        match self {
            Label::Desirable => T::one(),
            Label::Undesirable => -T::one(),
        }
    }
}

/// Mean of the implied rewards of the desirable examples; 0 when there are none.
pub fn kto_baseline<T: Scalar>(labels: &[Label], rewards: &[T]) -> T {
    let (mut s, mut n) = (T::zero(), 0usize);
    for (l, &r) in labels.iter().zip(rewards) {
        if *l == Label::Desirable {
            s += r;
            n += 1;
        }
    }
    if n == 0 {
        T::zero()
    } else {
        s / T::from_usize(n).unwrap()
    }
}

fn kto_check<T: Scalar>(labels: &[Label], policy: usize, reference: usize, weights: &[T]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::input("KTO batch is empty"));
    }
    let n = labels.len();
    if policy != n || reference != n || weights.len() != n {
        return Err(Error::dim("KTO batch sizes disagree"));
    }
    if weights.iter().any(|&w| !(w > T::zero())) {
        return Err(Error::input("KTO weights must be positive"));
    }
    Ok(())
}

/// Mean of `w(y)(1 − σ(s_y(r − z_ref)))` with `r = β(π − ref)`. `z_ref` defaults to
/// [`kto_baseline`] of the batch.
pub fn kto_loss<T: Scalar>(
    labels: &[Label],
    policy_logps: &[T],
    ref_logps: &[T],
    beta_pref: T,
    z_ref: Option<T>,
    weights: &[T],
) -> Result<T> {
    kto_check(labels, policy_logps.len(), ref_logps.len(), weights)?;
    let r: Vec<T> = policy_logps
        .iter()
        .zip(ref_logps)
        .map(|(&p, &q)| beta_pref * (p - q))
        .collect();
    let z = z_ref.unwrap_or_else(|| kto_baseline(labels, &r));
    let total: T = labels
        .iter()
        .zip(&r)
        .zip(weights)
        .map(|((l, &ri), &w)| w * (T::one() - sigmoid(l.sign::<T>() * (ri - z))))
        .sum();
    Ok(total / T::from_usize(labels.len()).unwrap())
}

/// Graph form of [`kto_loss`]; a computed baseline is treated as a constant.
/// Returns (loss, baseline used).
pub fn kto_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    labels: &[Label],
    policy_logps: NodeId,
    ref_logps: &[T],
    beta_pref: T,
    z_ref: Option<T>,
    weights: &[T],
) -> Result<(NodeId, T)> {
    kto_check(labels, g.value(policy_logps).numel(), ref_logps.len(), weights)?;
    let n = labels.len();
    let refs = g.constant(Tensor::new(vec![n], ref_logps.to_vec())?);
    let diff = g.sub(policy_logps, refs)?;
    let r = g.scale(diff, beta_pref);
    let z = z_ref.unwrap_or_else(|| kto_baseline(labels, g.value(r).data()));
    let centered = g.add_scalar(r, -z);
    let signs = g.constant(Tensor::new(vec![n], labels.iter().map(|l| l.sign()).collect())?);
    let signed = g.mul(centered, signs)?;
    let sig = g.act(Activation::Sigmoid, signed);
    let neg = g.scale(sig, -T::one());
    let one_minus = g.add_scalar(neg, T::one());
    let w = g.constant(Tensor::new(vec![n], weights.to_vec())?);
    let weighted = g.mul(one_minus, w)?;
    Ok((g.mean(weighted), z))
}
