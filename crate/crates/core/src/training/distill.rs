use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mamba2::{
    forward_graph, generate_greedy, hidden_align_loss_graph, model_forward, pooled_rate, Mamba2Config, ModelParams,
    ProjSite,
};
use crate::numerics::{Graph, NodeId, Scalar, Tensor};

use super::{apply_update, f6, kl_distill_loss, kl_distill_loss_graph, lr_at, total_distill_loss_graph, AdamW};

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip: f64,
    pub seed: u64,
    /// Teacher-labelled sequences to sample batches from.
    pub pool_size: usize,
    pub prompt_len: usize,
    /// Prompt plus greedy continuation.
    pub seq_len: usize,
    /// Treat the spiking projection output as a fixed target in the
    /// alignment loss, so it only trains the compensation weights and the
    /// activations feeding them.
    pub hidden_sgc_only: bool,
    pub freeze_embedding: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 8,
            lr: 1e-3,
            weight_decay: 0.0,
            clip: 1.0,
            seed: 0,
            pool_size: 64,
            prompt_len: 8,
            seq_len: 64,
            hidden_sgc_only: false,
            freeze_embedding: false,
        }
    }
}

/// Teacher pseudo-labels: prompts from the corpus with greedy continuations
/// and the teacher's logits on the continuation positions.
#[derive(Debug, Clone)]
pub struct DistillPool<T> {
    pub seqs: Vec<Vec<usize>>,
    /// Per sequence, `[(seq_len − prompt_len) × vocab]`; row `j` predicts continuation token `j`.
    pub teacher_logits: Vec<Tensor<T>>,
    pub prompt_len: usize,
}

impl<T: Scalar> DistillPool<T> {
    fn rows(&self) -> Vec<usize> {
        let s = self.seqs[0].len();
        (self.prompt_len - 1..s - 1).collect()
    }
}

pub fn build_pool<T: Scalar>(teacher: &ModelParams<T>, stream: &[usize], dc: &DistillConfig) -> Result<DistillPool<T>> {
    if dc.prompt_len == 0 || dc.seq_len <= dc.prompt_len {
        return Err(Error::input("need 0 < prompt_len < seq_len"));
    }
    if stream.len() <= dc.prompt_len || dc.pool_size == 0 {
        return Err(Error::input("corpus too short for the distillation pool"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(dc.seed ^ 0x9001);
    let mut seqs = Vec::with_capacity(dc.pool_size);
    let mut teacher_logits = Vec::with_capacity(dc.pool_size);
    let span = stream.len() - dc.prompt_len;
    let cont = dc.seq_len - dc.prompt_len;
    for _ in 0..dc.pool_size {
        let s = rng.random_range(0..span);
        let mut seq = stream[s..s + dc.prompt_len].to_vec();
        seq.extend(generate_greedy(teacher, &seq, cont, None)?);
        let (logits, _) = model_forward(teacher, &seq)?;
        let v = logits.cols();
        let rows = logits.data()[(dc.prompt_len - 1) * v..(dc.seq_len - 1) * v].to_vec();
        teacher_logits.push(Tensor::new(vec![cont, v], rows)?);
        seqs.push(seq);
    }
    Ok(DistillPool {
        seqs,
        teacher_logits,
        prompt_len: dc.prompt_len,
    })
}

/// Mean KL of `student` against the teacher over the whole pool.
pub fn eval_pool_kl<T: Scalar>(student: &ModelParams<T>, pool: &DistillPool<T>) -> Result<f64> {
    let rows = pool.rows();
    let mut acc = 0.0;
    for (seq, t) in pool.seqs.iter().zip(&pool.teacher_logits) {
        let (logits, _) = model_forward(student, seq)?;
        let v = logits.cols();
        let s = Tensor::new(
            vec![rows.len(), v],
            logits.data()[rows[0] * v..(rows[rows.len() - 1] + 1) * v].to_vec(),
        )?;
        acc += kl_distill_loss(t, &s)?.to_f64().unwrap();
    }
    Ok(acc / pool.seqs.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillRow {
    pub step: usize,
    pub loss_total: f64,
    pub loss_kl: f64,
    pub loss_hidden: f64,
    pub fr_in: f64,
    pub fr_out: f64,
    pub lr: f64,
}

impl DistillRow {
    pub const HEADER: &'static str = "step,loss_total,loss_kl,loss_hidden,fr_in,fr_out,lr";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            f6(self.loss_total),
            f6(self.loss_kl),
            f6(self.loss_hidden),
            f6(self.fr_in),
            f6(self.fr_out),
            f6(self.lr)
        )
    }
}

#[derive(Debug, Clone)]
pub struct DistillReport<T> {
    pub student: ModelParams<T>,
    pub rows: Vec<DistillRow>,
    /// Pool-wide KL before the first and after the last update.
    pub initial_kl: f64,
    pub final_kl: f64,
}

/// Distils a dense `teacher` into a student with configuration `student_cfg`,
/// initialized from the teacher's weights.
pub fn distill_run<T: Scalar>(
    teacher: &ModelParams<T>,
    student_cfg: &Mamba2Config,
    pool: &DistillPool<T>,
    dc: &DistillConfig,
) -> Result<DistillReport<T>> {
    if teacher.cfg.is_spiking() {
        return Err(Error::Config("the teacher must be a dense model".into()));
    }
    if !teacher.cfg.same_shape(student_cfg) {
        return Err(Error::Config("teacher and student architectures differ".into()));
    }
    let mut student = teacher.reconfigure(student_cfg)?;
    let initial_kl = eval_pool_kl(&student, pool)?;
    let rows_idx = pool.rows();
    let seq_len = pool.seqs[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(dc.seed ^ 0xd157);
    let mut opt = AdamW::new(dc.weight_decay);
    let freeze = dc.freeze_embedding;
    let trainable = move |name: &str| !(freeze && name == "embedding");
    let mut rows = Vec::with_capacity(dc.steps);
    for step in 0..dc.steps {
        let picks: Vec<usize> = (0..dc.batch).map(|_| rng.random_range(0..pool.seqs.len())).collect();
        let tokens: Vec<usize> = picks.iter().flat_map(|&i| pool.seqs[i].iter().copied()).collect();
        let lr = lr_at(step, dc.steps, dc.lr);

        let mut g = Graph::new();
        let bound = student.bind(&mut g, &trainable);
        let out = forward_graph(&mut g, &student, &bound, &tokens, seq_len, None)?;
        let sel: Vec<usize> = (0..picks.len())
            .flat_map(|b| rows_idx.iter().map(move |&r| b * seq_len + r))
            .collect();
        let s_logits = g.gather(out.logits, &sel)?;
        let v = student.cfg.vocab;
        let mut t_data = Vec::with_capacity(sel.len() * v);
        for &i in &picks {
            t_data.extend_from_slice(pool.teacher_logits[i].data());
        }
        let t_logits = Tensor::new(vec![sel.len(), v], t_data)?;
        let l_kl = kl_distill_loss_graph(&mut g, &t_logits, s_logits)?;

        let mut hidden: Vec<NodeId> = Vec::new();
        for &(spk, sgc) in out.sgc_pairs.iter().flatten() {
            let spk = if dc.hidden_sgc_only {
                let v = g.value(spk).clone();
                g.constant(v)
            } else {
                spk
            };
            hidden.push(hidden_align_loss_graph(&mut g, spk, sgc)?);
        }
        let loss_hidden = if hidden.is_empty() {
            0.0
        } else {
            hidden.iter().map(|&h| g.value(h).item().to_f64().unwrap()).sum::<f64>() / hidden.len() as f64
        };
        let total = total_distill_loss_graph(&mut g, l_kl, &hidden)?;
        let row = DistillRow {
            step,
            loss_total: g.value(total).item().to_f64().unwrap(),
            loss_kl: g.value(l_kl).item().to_f64().unwrap(),
            loss_hidden,
            fr_in: pooled_rate(&out.fires, ProjSite::In),
            fr_out: pooled_rate(&out.fires, ProjSite::Out),
            lr,
        };
        let grads = g.backward(total)?;
        apply_update(&mut student, &mut opt, &bound, grads, lr, dc.clip, &trainable)?;
        if step % 100 == 0 {
            log::info!("distill step {step}: kl {:.4} hidden {:.4}", row.loss_kl, row.loss_hidden);
        }
        rows.push(row);
    }
    let final_kl = eval_pool_kl(&student, pool)?;
    Ok(DistillReport {
        student,
        rows,
        initial_kl,
        final_kl,
    })
}
