//! Training: diffusion loss with min-SNR weighting, step loss, motion-aware
//! accumulative loss, the mini-batch Adam loop with divergence detection,
//! checkpoint I/O, and the full-model finite-difference gradient check.

use crate::container::{Container, ContainerError, ContainerWriter};
use crate::model::{Model, ModelConfig, ModelError, NoiseSchedule};
use crate::rng::Rng;
use crate::scene::{AffordanceSample, DisplacementSequence};
use crate::tensor::{adam_step, AdamState, Tensor, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("bad loss weights: {0}")]
    BadWeights(String),
    #[error("non-finite value in loss component '{0}'")]
    NonFiniteLoss(&'static str),
    #[error("training diverged at step {step}: loss {loss:.3e} > 10x initial {initial:.3e} for 50 consecutive steps")]
    Diverged { step: usize, loss: f64, initial: f64 },
    #[error("empty training set")]
    EmptyDataset,
    #[error("checkpoint config mismatch: stored model differs from requested configuration")]
    ConfigMismatch,
    #[error("checkpoint is missing '{0}'")]
    BadCheckpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

// ---------------------------------------------------------------------------
// loss weights

#[derive(Debug, Clone)]
pub struct LossWeights {
    pub lambda_diff: f64,
    pub lambda_step: f64,
    pub lambda_acc: f64,
    /// Mixing scalar between unweighted and motion-weighted accumulative
    /// terms, in [0, 1].
    pub lambda_mix: f64,
    /// Huber transition point, meters.
    pub huber_delta: f64,
    /// Additive floor of the motion weight g(x) = x + floor, meters.
    pub weight_floor: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_diff: 1.0,
            lambda_step: 0.1,
            lambda_acc: 0.1,
            lambda_mix: 0.5,
            huber_delta: 0.01,
            weight_floor: 1e-3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..=1.0).contains(&self.lambda_mix) {
            return Err(TrainError::BadWeights(format!("lambda_mix {} not in [0,1]", self.lambda_mix)));
        }
        if self.lambda_diff < 0.0 || self.lambda_step < 0.0 || self.lambda_acc < 0.0 {
            return Err(TrainError::BadWeights("negative loss weight".into()));
        }
        if self.lambda_diff + self.lambda_step + self.lambda_acc <= 0.0 {
            return Err(TrainError::BadWeights("all loss weights zero".into()));
        }
        if self.huber_delta <= 0.0 || self.weight_floor < 0.0 {
            return Err(TrainError::BadWeights("huber_delta must be > 0, weight_floor >= 0".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// loss components

/// Min-SNR-weighted diffusion loss: alpha(k) x mean squared error.
pub fn loss_diff(
    eps: &Tensor,
    eps_hat: &Tensor,
    k: usize,
    schedule: &NoiseSchedule,
    gamma: f64,
) -> Tensor {
    assert_eq!(eps.shape(), eps_hat.shape(), "loss_diff: shape mismatch");
    let d = eps_hat.sub(eps);
    d.mul(&d).mean_all().scale(schedule.minsnr_weight(k, gamma))
}

/// w_i = floor + mean per-step displacement norm of query i.
pub fn motion_weights(gt: &DisplacementSequence, floor: f64) -> Vec<f64> {
    (0..gt.n_q()).map(|i| floor + gt.mean_step_norm(i)).collect()
}

/// (1/N_q) sum_i sum_t ||predicted step - GT step||^2.
pub fn loss_step(pred_steps: &Tensor, gt_steps: &Tensor) -> Tensor {
    assert_eq!(pred_steps.shape(), gt_steps.shape(), "loss_step: shape mismatch");
    let n_q = pred_steps.shape()[0];
    let d = pred_steps.sub(gt_steps);
    d.mul(&d).sum_all().scale(1.0 / n_q as f64)
}

/// Motion-weighted accumulative loss over integrated trajectories:
/// r_i = sum of Huber residuals; L = (1-mix) mean r + mix weighted mean r.
pub fn loss_acc(pred_steps: &Tensor, gt_steps: &Tensor, w: &[f64], weights: &LossWeights) -> Tensor {
    assert_eq!(pred_steps.shape(), gt_steps.shape(), "loss_acc: shape mismatch");
    let n_q = pred_steps.shape()[0];
    assert_eq!(w.len(), n_q, "loss_acc: weight count mismatch");
    let resid = pred_steps.cumsum(1).sub(&gt_steps.cumsum(1));
    let r = resid
        .huber(weights.huber_delta)
        .sum_axis(2)
        .sum_axis(1)
        .reshape(vec![n_q]); // r_i
    let unweighted = r.mean_all();
    let total_w: f64 = w.iter().sum();
    let wt = Tensor::from_vec(vec![n_q], w.to_vec());
    let weighted = r.mul(&wt).sum_all().scale(1.0 / total_w);
    unweighted
        .scale(1.0 - weights.lambda_mix)
        .add(&weighted.scale(weights.lambda_mix))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub diff: f64,
    pub step: f64,
    pub acc: f64,
    pub total: f64,
}

/// One optimization objective over a batch, with the denoiser injectable so
/// tests can substitute a perfect one. The hook receives (x_k, k, cond,
/// true eps) and returns the noise estimate.
pub fn total_loss_with<F>(
    model: &Model,
    schedule: &NoiseSchedule,
    batch: &[&AffordanceSample],
    weights: &LossWeights,
    rng: &mut Rng,
    denoiser: F,
) -> Result<(Tensor, LossParts), TrainError>
where
    F: Fn(&Tensor, usize, &Tensor, &Tensor) -> Tensor,
{
    weights.validate()?;
    if batch.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut l_diff: Option<Tensor> = None;
    let mut l_step: Option<Tensor> = None;
    let mut l_acc: Option<Tensor> = None;
    let accum = |slot: &mut Option<Tensor>, t: Tensor| {
        *slot = Some(match slot.take() {
            None => t,
            Some(prev) => prev.add(&t),
        });
    };
    for sample in batch {
        let cond = model.condition(&sample.scene, &sample.queries, &sample.instruction)?;
        let n_q = sample.gt_flow.n_q();
        let m = sample.gt_flow.m();
        let x0 = Tensor::from_vec(vec![n_q, m, 3], sample.gt_flow.steps().to_vec());
        let k = rng.below(schedule.k_steps()) + 1;
        let eps_data = rng.normal_vec(n_q * m * 3);
        let x_k = Tensor::from_vec(
            vec![n_q, m, 3],
            schedule.q_sample(x0.data(), k, &eps_data),
        );
        let eps = Tensor::from_vec(vec![n_q, m, 3], eps_data);
        let eps_hat = denoiser(&x_k, k, &cond, &eps);
        accum(&mut l_diff, loss_diff(&eps, &eps_hat, k, schedule, model.cfg.gamma_minsnr));
        // step/accumulative losses on the one-step x0 reconstruction
        let x0_hat = schedule.predict_x0(&x_k, k, &eps_hat);
        accum(&mut l_step, loss_step(&x0_hat, &x0));
        let w = motion_weights(&sample.gt_flow, weights.weight_floor);
        accum(&mut l_acc, loss_acc(&x0_hat, &x0, &w, weights));
    }
    let inv_b = 1.0 / batch.len() as f64;
    let l_diff = l_diff.unwrap().scale(inv_b);
    let l_step = l_step.unwrap().scale(inv_b);
    let l_acc = l_acc.unwrap().scale(inv_b);
    let total = l_diff
        .scale(weights.lambda_diff)
        .add(&l_step.scale(weights.lambda_step))
        .add(&l_acc.scale(weights.lambda_acc));
    let parts = LossParts {
        diff: l_diff.item(),
        step: l_step.item(),
        acc: l_acc.item(),
        total: total.item(),
    };
    for (name, v) in [
        ("diff", parts.diff),
        ("step", parts.step),
        ("acc", parts.acc),
        ("total", parts.total),
    ] {
        if !v.is_finite() {
            return Err(TrainError::NonFiniteLoss(name));
        }
    }
    Ok((total, parts))
}

pub fn total_loss(
    model: &Model,
    schedule: &NoiseSchedule,
    batch: &[&AffordanceSample],
    weights: &LossWeights,
    rng: &mut Rng,
) -> Result<(Tensor, LossParts), TrainError> {
    total_loss_with(model, schedule, batch, weights, rng, |x_k, k, cond, _| {
        model.denoise(x_k, k, cond)
    })
}

// ---------------------------------------------------------------------------
// training loop

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 500, batch: 4, lr: 1e-3, clip_norm: 1.0, log_every: 10, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainRecord {
    pub step: usize,
    pub l_diff: f64,
    pub l_step: f64,
    pub l_acc: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub seconds: f64,
}

pub const TRAIN_CSV_HEADER: &str = "epoch, l_diff, l_step, l_acc, total, grad_norm, lr, seconds";

pub fn records_to_csv(records: &[TrainRecord]) -> String {
    let mut out = String::from(TRAIN_CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.3}\n",
            r.step, r.l_diff, r.l_step, r.l_acc, r.total, r.grad_norm, r.lr, r.seconds
        ));
    }
    out
}

/// Deterministic mini-batch Adam loop. Batches are drawn from a shuffled
/// index cycle; aborts when the loss exceeds 10x the initial value for 50
/// consecutive steps.
pub fn train(
    model: &mut Model,
    samples: &[AffordanceSample],
    cfg: &TrainConfig,
    weights: &LossWeights,
) -> Result<Vec<TrainRecord>, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    weights.validate()?;
    let schedule = model.schedule();
    let mut rng = Rng::derive(cfg.seed, 0x7121);
    let mut adam = AdamState::new(&model.store, cfg.lr);
    let mut order: Vec<usize> = Vec::new();
    let mut records = Vec::new();
    let mut initial = f64::NAN;
    let mut over_budget = 0usize;
    let start = std::time::Instant::now();
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            if order.is_empty() {
                order = (0..samples.len()).collect();
                rng.shuffle(&mut order);
            }
            batch.push(&samples[order.pop().unwrap()]);
        }
        model.store.zero_grads();
        let (total, parts) = total_loss(model, &schedule, &batch, weights, &mut rng)?;
        total.backward()?;
        let grad_norm = model.store.grad_norm();
        adam_step(&mut model.store, &mut adam, Some(cfg.clip_norm))?;
        if initial.is_nan() {
            initial = parts.total;
        }
        if parts.total > 10.0 * initial {
            over_budget += 1;
            if over_budget >= 50 {
                return Err(TrainError::Diverged { step, loss: parts.total, initial });
            }
        } else {
            over_budget = 0;
        }
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            records.push(TrainRecord {
                step,
                l_diff: parts.diff,
                l_step: parts.step,
                l_acc: parts.acc,
                total: parts.total,
                grad_norm,
                lr: cfg.lr,
                seconds: start.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// checkpoints

/// Write model parameters (and optionally optimizer state) as a container.
pub fn save_checkpoint(
    model: &Model,
    adam: Option<&AdamState>,
    step: u64,
    dir: &std::path::Path,
) -> Result<(), TrainError> {
    let mut w = ContainerWriter::new();
    for (name, t) in model.store.iter() {
        w.push_f32(&format!("param/{name}"), t.shape().to_vec(), t.data());
    }
    if let Some(a) = adam {
        for (i, (name, t)) in model.store.iter().enumerate() {
            w.push_f32(&format!("adam_m/{name}"), t.shape().to_vec(), &a.m[i]);
            w.push_f32(&format!("adam_v/{name}"), t.shape().to_vec(), &a.v[i]);
        }
    }
    let meta = serde_json::json!({
        "model_config": serde_json::to_value(&model.cfg).expect("config serializes"),
        "step": step,
        "adam": adam.map(|a| serde_json::json!({"lr": a.lr, "step": a.step})),
    });
    w.finish(dir, "checkpoint", meta)?;
    Ok(())
}

/// Load a checkpoint. When `expected` is given, the stored ModelConfig must
/// match exactly or loading is refused.
pub fn load_checkpoint(
    dir: &std::path::Path,
    expected: Option<&ModelConfig>,
) -> Result<(Model, Option<AdamState>, u64), TrainError> {
    let c = Container::open(dir)?;
    let cfg: ModelConfig = serde_json::from_value(c.manifest.meta["model_config"].clone())
        .map_err(|_| TrainError::BadCheckpoint("model_config".into()))?;
    if let Some(e) = expected {
        if *e != cfg {
            return Err(TrainError::ConfigMismatch);
        }
    }
    let step = c.manifest.meta["step"].as_u64().unwrap_or(0);
    let mut model = Model::new(cfg, 0)?;
    let ids: Vec<(String, crate::tensor::ParamId)> = model
        .store
        .iter()
        .map(|(n, _)| (n.to_string(), model.store.find(n).unwrap()))
        .collect();
    for (name, id) in &ids {
        let (_, data) = c.read_f32(&format!("param/{name}"))?;
        model.store.set_data(*id, data);
    }
    let adam = if c.record("adam_m/embed.scene.w").is_ok() {
        let lr = c.manifest.meta["adam"]["lr"].as_f64().unwrap_or(1e-3);
        let mut a = AdamState::new(&model.store, lr);
        a.step = c.manifest.meta["adam"]["step"].as_u64().unwrap_or(0);
        for (i, (name, _)) in ids.iter().enumerate() {
            a.m[i] = c.read_f32(&format!("adam_m/{name}"))?.1;
            a.v[i] = c.read_f32(&format!("adam_v/{name}"))?.1;
        }
        Some(a)
    } else {
        None
    };
    Ok((model, adam, step))
}

// ---------------------------------------------------------------------------
// full-model gradient check

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub params_checked: usize,
    pub entries_checked: usize,
}

/// Tiny configuration pinned by the gradient-correctness contract:
/// N_s = 32, N_q = 8, d = 16, K = 10, m = 3.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        d: 16,
        d_lang: 8,
        d_model: 16,
        heads: 2,
        layers: 1,
        ff_ratio: 2,
        pos_freqs: 2,
        m: 3,
        k_steps: 10,
        sa_levels: vec![crate::model::SaLevel { ratio: 2, radius: 0.3, k: 4, width: 16 }],
        ..ModelConfig::default()
    }
}

fn gradcheck_sample(seed: u64) -> AffordanceSample {
    use crate::geometry::{Point3, QuerySet, ScenePointCloud};
    use crate::scene::{Affordance, Instruction, SampleMeta};
    let mut rng = Rng::derive(seed, 0x6c);
    let n_s = 32;
    let points: Vec<Point3> = (0..n_s)
        .map(|_| Point3::new(rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(0.0, 0.3)))
        .collect();
    let colors: Vec<[f64; 3]> = (0..n_s).map(|_| [rng.unit(), rng.unit(), rng.unit()]).collect();
    let labels: Vec<(i32, i32)> = (0..n_s).map(|i| ((i % 2) as i32, 0)).collect();
    let scene = ScenePointCloud::new(points.clone(), colors, labels).unwrap();
    let queries = QuerySet { tool: points[..6].to_vec(), target: points[6..8].to_vec() };
    let steps: Vec<f64> = rng.normal_vec(8 * 3 * 3).iter().map(|v| v * 0.02).collect();
    let gt_flow = DisplacementSequence::new(steps, 8, 3, queries.role_mask()).unwrap();
    AffordanceSample {
        scene,
        queries,
        instruction: Instruction::new(Affordance::Open, "executor", "oven"),
        gt_flow,
        meta: SampleMeta {
            kind: Affordance::Open,
            scene_id: seed,
            clip_index: 0,
            timestamps: vec![0.0, 0.5, 1.0, 1.5],
        },
    }
}

/// Central finite differences of the full composed loss (condition ->
/// denoise -> all three loss terms) against analytic gradients, over up to
/// `entries_per_param` entries of every parameter.
pub fn gradcheck(seed: u64, h: f64, entries_per_param: usize) -> Result<GradCheckReport, TrainError> {
    let mut model = Model::new(gradcheck_config(), seed)?;
    let schedule = model.schedule();
    let sample = gradcheck_sample(seed);
    let weights = LossWeights::default();
    let eval = |model: &Model| -> Result<f64, TrainError> {
        // fresh identically-seeded rng so k and eps are constants of the check
        let mut rng = Rng::derive(seed, 0x9cad);
        let (total, _) = total_loss(model, &schedule, &[&sample], &weights, &mut rng)?;
        Ok(total.item())
    };
    {
        let mut rng = Rng::derive(seed, 0x9cad);
        model.store.zero_grads();
        let (total, _) = total_loss(&model, &schedule, &[&sample], &weights, &mut rng)?;
        total.backward()?;
    }
    let names_grads: Vec<(String, Vec<f64>, Vec<f64>)> = model
        .store
        .iter()
        .map(|(n, t)| (n.to_string(), t.data().to_vec(), t.grad().unwrap_or_default()))
        .collect();
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    let mut entries = 0usize;
    for (name, data, grad) in &names_grads {
        let id = model.store.find(name).unwrap();
        let n = data.len();
        let stride = (n / entries_per_param).max(1);
        for j in (0..n).step_by(stride).take(entries_per_param) {
            let mut plus = data.clone();
            plus[j] += h;
            model.store.set_data(id, plus);
            let fp = eval(&model)?;
            let mut minus = data.clone();
            minus[j] -= h;
            model.store.set_data(id, minus);
            let fm = eval(&model)?;
            model.store.set_data(id, data.clone());
            let fd = (fp - fm) / (2.0 * h);
            let g = grad.get(j).copied().unwrap_or(0.0);
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-3);
            entries += 1;
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{name}[{j}]");
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        worst_param: worst,
        params_checked: names_grads.len(),
        entries_checked: entries,
    })
}
