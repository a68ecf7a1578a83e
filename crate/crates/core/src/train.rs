//! Joint CTC/attention objective, warm-up Adam and the training loop.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::ctc::ctc_loss_graph;
use crate::error::{Error, Result};
use crate::features::{spec_augment, FeatureMatrix, SpecAugmentConfig};
use crate::model::{Checkpoint, Model, ModelConfig, Vocabulary};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-9;
pub const METRICS_HEADER: &str = "step,loss,ctc_loss,att_loss,lr,grad_norm";
pub const TREND_WINDOW: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the CTC term in the joint loss.
    pub lambda: f64,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub label_smoothing: f64,
    pub seed: u64,
    /// Seed for parameter initialization.
    pub model_seed: u64,
    /// Write a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: u64,
    pub spec_augment: bool,
    pub specaug_freq_masks: usize,
    pub specaug_freq_width: usize,
    pub specaug_time_masks: usize,
    pub specaug_time_width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let sa = SpecAugmentConfig::default();
        Self {
            lambda: 0.3,
            peak_lr: 0.002,
            warmup_steps: 25_000,
            grad_clip: 5.0,
            batch_size: 16,
            max_steps: 100_000,
            label_smoothing: 0.0,
            seed: 0,
            model_seed: 0,
            checkpoint_every: 0,
            spec_augment: true,
            specaug_freq_masks: sa.num_freq_masks,
            specaug_freq_width: sa.max_freq_bins,
            specaug_time_masks: sa.num_time_masks,
            specaug_time_width: sa.max_time_frames,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if self.warmup_steps == 0 {
            return fail("warmup_steps must be at least 1".into());
        }
        if !(self.grad_clip > 0.0) {
            return fail(format!("grad_clip {} must be positive", self.grad_clip));
        }
        if !(self.peak_lr > 0.0) {
            return fail(format!("peak_lr {} must be positive", self.peak_lr));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail(format!("label_smoothing {} outside [0, 1)", self.label_smoothing));
        }
        Ok(())
    }

    fn spec_augment_config(&self, seed: u64) -> SpecAugmentConfig {
        SpecAugmentConfig {
            num_freq_masks: self.specaug_freq_masks,
            max_freq_bins: self.specaug_freq_width,
            num_time_masks: self.specaug_time_masks,
            max_time_frames: self.specaug_time_width,
            seed,
        }
    }
}

/// Linear warm-up to `peak_lr` at `warmup_steps`, then inverse-sqrt decay.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    if step == 0 {
        return 0.0;
    }
    let (s, w) = (step as f64, cfg.warmup_steps as f64);
    cfg.peak_lr * (s / w).min((w / s).sqrt())
}

/// One training utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub utt_id: String,
    pub features: FeatureMatrix,
    pub target: Vec<usize>,
}

/// Scalar loss node plus the values of its two terms.
pub struct JointLoss {
    pub total: Var,
    pub ctc: f64,
    pub att: f64,
}

/// Summed teacher-forced cross-entropy of `log_probs` (S × |U|) against
/// `targets`, with `smoothing` of the mass spread uniformly.
pub fn cross_entropy_graph(
    g: &mut Graph,
    log_probs: Var,
    targets: &[usize],
    smoothing: f64,
) -> Result<Var> {
    let lp = g.value(log_probs);
    let (rows, vocab) = lp.dims2()?;
    if rows != targets.len() {
        return Err(Error::Dimension(format!(
            "{rows} decoder rows for {} targets",
            targets.len()
        )));
    }
    let uniform = smoothing / vocab as f64;
    let mut value = 0.0;
    let mut jac = Tensor::zeros(&[rows, vocab]);
    for (i, &y) in targets.iter().enumerate() {
        let row = lp.row(i);
        value -= (1.0 - smoothing) * row[y];
        if smoothing > 0.0 {
            value -= uniform * row.iter().sum::<f64>();
            jac.row_mut(i).iter_mut().for_each(|v| *v = -uniform);
        }
        jac.row_mut(i)[y] -= 1.0 - smoothing;
    }
    g.linearized(log_probs, value, jac)
}

/// `lambda·CTC + (1−lambda)·attention cross-entropy`, both negative
/// log-likelihoods of the whole utterance.
pub fn joint_loss_graph(
    model: &Model,
    g: &mut Graph,
    features: &Tensor,
    target: &[usize],
    lambda: f64,
    smoothing: f64,
) -> Result<JointLoss> {
    let x = g.input(features.clone());
    let h = model.encode_graph(g, x, None)?;
    let ctc_lp = model.ctc_graph(g, h)?;
    let ctc = ctc_loss_graph(g, ctc_lp, target, Vocabulary::BLANK_ID)?;

    let mut ys_in = Vec::with_capacity(target.len() + 1);
    ys_in.push(Vocabulary::SOS_ID);
    ys_in.extend_from_slice(target);
    let mut ys_out = target.to_vec();
    ys_out.push(Vocabulary::EOS_ID);
    let att_lp = model.decode_graph(g, h, &ys_in, None)?;
    let att = cross_entropy_graph(g, att_lp, &ys_out, smoothing)?;

    let a = g.scale(ctc, lambda);
    let b = g.scale(att, 1.0 - lambda);
    let total = g.add(a, b)?;
    Ok(JointLoss {
        total,
        ctc: g.value(ctc).item()?,
        att: g.value(att).item()?,
    })
}

/// Loss values without a backward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub ctc: f64,
    pub att: f64,
}

pub fn joint_loss(
    model: &Model,
    features: &Tensor,
    target: &[usize],
    lambda: f64,
    smoothing: f64,
) -> Result<LossValues> {
    let mut g = Graph::new(model.params());
    let l = joint_loss_graph(model, &mut g, features, target, lambda, smoothing)?;
    Ok(LossValues {
        total: g.value(l.total).item()?,
        ctc: l.ctc,
        att: l.att,
    })
}

/// Adam moments and step count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn to_checkpoint(&self, params: &ParamStore) -> Checkpoint {
        let mut ck = Checkpoint::default();
        for ((_, name, _), (m, v)) in params.iter().zip(self.m.iter().zip(&self.v)) {
            ck.tensors.push((format!("adam.m.{name}"), m.clone()));
            ck.tensors.push((format!("adam.v.{name}"), v.clone()));
        }
        ck.meta.insert("step".into(), self.step.to_string());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, params: &ParamStore) -> Result<Self> {
        let step = ck
            .meta
            .get("step")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Checkpoint("optimizer state lacks a step counter".into()))?;
        let mut state = Self::new(params);
        state.step = step;
        for (i, (_, name, p)) in params.iter().enumerate() {
            for (prefix, slot) in [("adam.m", &mut state.m[i]), ("adam.v", &mut state.v[i])] {
                let key = format!("{prefix}.{name}");
                let t = ck
                    .tensor(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("optimizer state lacks {key}")))?;
                if t.shape() != p.shape() {
                    return Err(Error::Checkpoint(format!("{key}: shape {:?}", t.shape())));
                }
                *slot = t.clone();
            }
        }
        Ok(state)
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` to norm `clip` when larger; returns the norm before.
pub fn clip_global_norm(grads: &mut [Tensor], clip: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > clip {
        let s = clip / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Clips `grads`, advances the step counter and applies one Adam update.
/// Returns `(grad_norm before clipping, learning rate)`.
pub fn apply_gradients(
    params: &mut ParamStore,
    opt: &mut OptimizerState,
    mut grads: Vec<Tensor>,
    cfg: &TrainConfig,
) -> (f64, f64) {
    let norm = clip_global_norm(&mut grads, cfg.grad_clip);
    opt.step += 1;
    let lr = lr_at(opt.step, cfg);
    let t = opt.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let p = params.get_mut(id).data_mut();
        let (m, v) = (opt.m[i].data_mut(), opt.v[i].data_mut());
        for (j, &g) in grads[i].data().iter().enumerate() {
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            p[j] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    (norm, lr)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub ctc_loss: f64,
    pub att_loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.loss, self.ctc_loss, self.att_loss, self.lr, self.grad_norm
        )
    }
}

/// Batch-mean loss gradients, accumulated in batch order.
pub fn batch_gradients(
    model: &Model,
    batch: &[Example],
    cfg: &TrainConfig,
) -> Result<(Vec<Tensor>, LossValues)> {
    if batch.is_empty() {
        return Err(Error::Training("empty batch".into()));
    }
    let params = model.params();
    let mut sum: Option<Vec<Tensor>> = None;
    let mut totals = LossValues { total: 0.0, ctc: 0.0, att: 0.0 };
    for ex in batch {
        let mut g = Graph::new(params);
        let l = joint_loss_graph(
            model,
            &mut g,
            ex.features.as_tensor(),
            &ex.target,
            cfg.lambda,
            cfg.label_smoothing,
        )
        .map_err(|e| e.for_utterance(&ex.utt_id))?;
        let total = g.value(l.total).item()?;
        if !total.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss {total} on utterance {} (ctc {}, att {})",
                ex.utt_id, l.ctc, l.att
            )));
        }
        totals.total += total;
        totals.ctc += l.ctc;
        totals.att += l.att;
        let grads = g.backward(l.total)?.into_dense(params);
        match &mut sum {
            None => sum = Some(grads),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&grads) {
                    a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
                }
            }
        }
    }
    let n = batch.len() as f64;
    let mut grads = sum.expect("non-empty batch");
    for g in &mut grads {
        g.data_mut().iter_mut().for_each(|v| *v /= n);
    }
    let mean = LossValues {
        total: totals.total / n,
        ctc: totals.ctc / n,
        att: totals.att / n,
    };
    Ok((grads, mean))
}

/// Forward, backward, clip and one Adam update on `batch`.
pub fn train_step(
    model: &mut Model,
    opt: &mut OptimizerState,
    batch: &[Example],
    cfg: &TrainConfig,
) -> Result<StepMetrics> {
    let (grads, loss) = batch_gradients(model, batch, cfg)?;
    let norm = global_norm(&grads);
    if !norm.is_finite() {
        return Err(Error::Training(format!(
            "non-finite gradient norm at step {}",
            opt.step + 1
        )));
    }
    let (grad_norm, lr) = apply_gradients(model.params_mut(), opt, grads, cfg);
    Ok(StepMetrics {
        step: opt.step,
        loss: loss.total,
        ctc_loss: loss.ctc,
        att_loss: loss.att,
        lr,
        grad_norm,
    })
}

/// Indices of the batch used for 0-based step `step`. Each epoch walks a
/// fresh seeded permutation, so a run can resume from any step.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, step: u64) -> Vec<usize> {
    let per_epoch = n.div_ceil(batch_size) as u64;
    let epoch = step / per_epoch;
    let offset = (step % per_epoch) as usize * batch_size;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, epoch, 0));
    order.shuffle(&mut rng);
    order[offset..(offset + batch_size).min(n)].to_vec()
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// True when the means of consecutive `window`-step blocks never rise.
pub fn smoothed_non_increasing(losses: &[f64], window: usize) -> bool {
    let means: Vec<f64> = losses
        .chunks_exact(window.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    means.windows(2).all(|w| w[1] <= w[0])
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Where checkpoints and `metrics.csv` go; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    /// Continue from this optimizer state instead of a fresh one.
    pub resume: Option<OptimizerState>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub optimizer: OptimizerState,
    pub metrics: Vec<StepMetrics>,
    pub checkpoints: Vec<PathBuf>,
    /// Smoothed loss over [`TREND_WINDOW`]-step blocks never rose.
    pub loss_trend_non_increasing: bool,
}

pub fn checkpoint_paths(out_dir: &Path, step: u64) -> (PathBuf, PathBuf) {
    (
        out_dir.join(format!("ckpt-{step:06}.brst")),
        out_dir.join(format!("ckpt-{step:06}.opt.brst")),
    )
}

fn save_pair(model: &Model, opt: &OptimizerState, model_path: &Path, opt_path: &Path) -> Result<()> {
    let mut ck = Checkpoint::from_model(model);
    ck.meta.insert("step".into(), opt.step.to_string());
    ck.write(model_path)?;
    opt.to_checkpoint(model.params()).write(opt_path)
}

/// Trains until `cfg.max_steps` total steps.
pub fn run_training(
    mut model: Model,
    corpus: &[Example],
    cfg: &TrainConfig,
    opts: RunOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    let mut opt = match opts.resume {
        Some(o) => o,
        None => OptimizerState::new(model.params()),
    };
    let mut metrics_out = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.csv");
            let fresh = opt.step == 0 || !path.exists();
            let file = fs::OpenOptions::new()
                .create(true)
                .append(!fresh)
                .write(true)
                .truncate(fresh)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(file);
            if fresh {
                writeln!(w, "{METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
            }
            Some((path, w))
        }
        None => None,
    };

    let mut metrics = Vec::new();
    let mut checkpoints = Vec::new();
    while opt.step < cfg.max_steps {
        let step = opt.step;
        let batch: Vec<Example> = batch_indices(corpus.len(), cfg.batch_size, cfg.seed, step)
            .into_iter()
            .enumerate()
            .map(|(j, i)| {
                let ex = &corpus[i];
                if !cfg.spec_augment {
                    return ex.clone();
                }
                let sa = cfg.spec_augment_config(mix(cfg.seed, step + 1, j as u64 + 1));
                Example {
                    utt_id: ex.utt_id.clone(),
                    features: spec_augment(&ex.features, &sa),
                    target: ex.target.clone(),
                }
            })
            .collect();
        let m = train_step(&mut model, &mut opt, &batch, cfg)?;
        log::debug!("step {} loss {:.4} lr {:.6}", m.step, m.loss, m.lr);
        if let Some((path, w)) = &mut metrics_out {
            writeln!(w, "{}", m.csv_row()).map_err(|e| Error::io(path.as_path(), e))?;
        }
        metrics.push(m);
        if let Some(dir) = &opts.out_dir {
            if cfg.checkpoint_every > 0 && opt.step % cfg.checkpoint_every == 0 {
                let (mp, op) = checkpoint_paths(dir, opt.step);
                save_pair(&model, &opt, &mp, &op)?;
                if let Some((path, w)) = &mut metrics_out {
                    w.flush().map_err(|e| Error::io(path.as_path(), e))?;
                }
                checkpoints.push(mp);
            }
        }
    }
    if let Some(dir) = &opts.out_dir {
        let (mp, op) = (dir.join("final.brst"), dir.join("final.opt.brst"));
        save_pair(&model, &opt, &mp, &op)?;
        checkpoints.push(mp);
    }
    if let Some((path, mut w)) = metrics_out {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    let losses: Vec<f64> = metrics.iter().map(|m| m.loss).collect();
    Ok(TrainOutcome {
        model,
        optimizer: opt,
        loss_trend_non_increasing: smoothed_non_increasing(&losses, TREND_WINDOW),
        metrics,
        checkpoints,
    })
}

/// Parses flat `key = value` text; `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn set_field(obj: &mut serde_json::Map<String, serde_json::Value>, key: &str, raw: &str) -> Result<()> {
    use serde_json::Value;
    let slot = obj.get_mut(key).expect("caller checked key");
    let bad = || Error::Config(format!("{key}: cannot parse {raw:?}"));
    *slot = match slot {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad())?),
        Value::Number(n) if n.is_f64() => {
            Value::from(raw.parse::<f64>().map_err(|_| bad())?)
        }
        Value::Number(_) => Value::from(raw.parse::<u64>().map_err(|_| bad())?),
        _ => Value::String(raw.to_string()),
    };
    Ok(())
}

/// Applies `key = value` pairs onto the two configs; keys are field names.
pub fn apply_config_pairs(
    model: &mut ModelConfig,
    train: &mut TrainConfig,
    pairs: &[(String, String)],
) -> Result<()> {
    let enc = |e: serde_json::Error| Error::Config(e.to_string());
    let mut m = serde_json::to_value(&*model).map_err(enc)?;
    let mut t = serde_json::to_value(&*train).map_err(enc)?;
    for (k, v) in pairs {
        let (mo, to) = (m.as_object_mut().unwrap(), t.as_object_mut().unwrap());
        if mo.contains_key(k) {
            set_field(mo, k, v)?;
        } else if to.contains_key(k) {
            set_field(to, k, v)?;
        } else {
            return Err(Error::Config(format!("unknown config key {k:?}")));
        }
    }
    *model = serde_json::from_value(m).map_err(enc)?;
    *train = serde_json::from_value(t).map_err(enc)?;
    model.validate()?;
    train.validate()
}

/// Renders both configs as `key = value` lines, model fields first.
pub fn render_config(model: &ModelConfig, train: &TrainConfig) -> String {
    let mut out = String::new();
    for v in [serde_json::to_value(model), serde_json::to_value(train)] {
        let v = v.expect("configs serialize");
        for (k, val) in v.as_object().expect("struct") {
            out.push_str(&format!("{k} = {}\n", val.to_string().trim_matches('"')));
        }
    }
    out
}

pub fn read_config_file(path: &Path, model: &mut ModelConfig, train: &mut TrainConfig) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    apply_config_pairs(model, train, &parse_config_text(&text)?)
}

pub fn write_metrics_csv(path: &Path, metrics: &[StepMetrics]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{METRICS_HEADER}").map_err(io)?;
    for m in metrics {
        writeln!(w, "{}", m.csv_row()).map_err(io)?;
    }
    w.flush().map_err(io)
}
