use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::random_batch;
use crate::error::{Error, Result};
use crate::mamba2::{forward_graph, Mamba2Config, ModelParams};
use crate::numerics::{Graph, Scalar};

use super::{apply_update, cross_entropy_graph, f6, lr_at, AdamW};

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherConfig {
    pub steps: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip: f64,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch: 8,
            seq_len: 64,
            lr: 3e-3,
            weight_decay: 0.0,
            clip: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherRow {
    pub step: usize,
    pub loss_ce: f64,
    pub lr: f64,
}

impl TeacherRow {
    pub const HEADER: &'static str = "step,loss_ce,lr";

    pub fn csv(&self) -> String {
        format!("{},{},{}", self.step, f6(self.loss_ce), f6(self.lr))
    }
}

/// Trains a dense model on next-token prediction over random windows of `stream`.
pub fn train_teacher<T: Scalar>(
    cfg: &Mamba2Config,
    stream: &[usize],
    tc: &TeacherConfig,
) -> Result<(ModelParams<T>, Vec<TeacherRow>)> {
    if cfg.is_spiking() {
        return Err(Error::Config("the teacher must be a dense model".into()));
    }
    let mut model = ModelParams::<T>::init(cfg, tc.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x7e4c_0001);
    let mut opt = AdamW::new(tc.weight_decay);
    let mut rows = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let batch = random_batch(stream, tc.seq_len, tc.batch, &mut rng)?;
        let lr = lr_at(step, tc.steps, tc.lr);
        let mut g = Graph::new();
        let bound = model.bind(&mut g, &|_| true);
        let out = forward_graph(&mut g, &model, &bound, &batch.inputs, batch.seq_len, None)?;
        let targets: Vec<Option<usize>> = batch.targets.iter().map(|&t| Some(t)).collect();
        let loss = cross_entropy_graph(&mut g, out.logits, &targets)?;
        let loss_ce = g.value(loss).item().to_f64().unwrap();
        let grads = g.backward(loss)?;
        apply_update(&mut model, &mut opt, &bound, grads, lr, tc.clip, &|_| true)?;
        rows.push(TeacherRow { step, loss_ce, lr });
        if step % 100 == 0 {
            log::info!("teacher step {step}: ce {loss_ce:.4}");
        }
    }
    Ok((model, rows))
}
