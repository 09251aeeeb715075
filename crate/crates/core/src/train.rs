//! Two-stage training: Stage 1 aligns encoder, projector and head on source
//! languages; Stage 2 freezes the encoder and trains adapters, projector,
//! prompts and the head LoRA on the long-tailed target languages.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::fly_balance_bias;
use crate::data::{hash_matrix, mse_on, Dataset, Metrics};
use crate::error::{Error, Result};
use crate::graph::{ParamGraph, Selector};
use crate::model::{Model, ParamRole};
use crate::rng::Rng;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Linear warmup, then cosine decay to zero.
    Cosine,
    Constant,
}

/// Linear ramp to `base_lr` over the warmup, cosine decay to 0 at `total`.
pub fn lr_at(step: usize, total: usize, base_lr: f64, warmup_ratio: f64) -> f64 {
    let step = step.min(total);
    let warm = warmup_ratio * total as f64;
    let s = step as f64;
    if s < warm {
        return base_lr * s / warm;
    }
    let span = total as f64 - warm;
    if span <= 0.0 {
        return base_lr;
    }
    let progress = (s - warm) / span;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub schedule: Schedule,
    /// Evaluate every `eval_fraction · steps` steps.
    pub eval_fraction: f64,
    /// Sample a chunk length per batch from the model's chunk set.
    pub chunked: bool,
    /// Keep projector and head LoRA frozen (Stage 2 isolation runs).
    pub freeze_shared: bool,
    pub train_lid: bool,
    /// Re-initialize the head LoRA at the start of the stage.
    pub reinit_head_lora: bool,
    /// Step size of FlyLoRA's load-balancing bias update.
    pub fly_balance_rate: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig::stage1_default()
    }
}

impl StageConfig {
    pub fn stage1_default() -> Self {
        StageConfig {
            steps: 600,
            batch_size: 8,
            lr: 3e-3,
            warmup_ratio: 0.1,
            schedule: Schedule::Cosine,
            eval_fraction: 0.05,
            chunked: false,
            freeze_shared: false,
            train_lid: false,
            reinit_head_lora: false,
            fly_balance_rate: 1e-3,
        }
    }

    pub fn stage2_default() -> Self {
        StageConfig {
            steps: 2000,
            lr: 1e-3,
            ..StageConfig::stage1_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.steps == 0 {
            problems.push("steps must be positive".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".to_string());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            problems.push("lr must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            problems.push("warmup_ratio must lie in [0, 1)".to_string());
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction <= 1.0) {
            problems.push("eval_fraction must lie in (0, 1]".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            Schedule::Cosine => lr_at(step, self.steps, self.lr, self.warmup_ratio),
            Schedule::Constant => self.lr,
        }
    }

    /// Parameter roles that receive gradient updates in `stage`.
    pub fn trainable_roles(&self, stage: u8) -> BTreeSet<ParamRole> {
        let mut roles: Vec<ParamRole> = match stage {
            1 => vec![ParamRole::EncoderBase, ParamRole::Projector, ParamRole::HeadAdapter, ParamRole::Prompt],
            _ => vec![
                ParamRole::EncoderAdapter,
                ParamRole::Router,
                ParamRole::Projector,
                ParamRole::HeadAdapter,
                ParamRole::Prompt,
            ],
        };
        if self.train_lid {
            roles.push(ParamRole::Lid);
        }
        if self.freeze_shared {
            roles.retain(|r| !matches!(r, ParamRole::Projector | ParamRole::HeadAdapter));
        }
        roles.into_iter().collect()
    }
}

/// Names of `model`'s parameters whose role is in `roles`.
pub fn trainable_names(model: &Model, roles: &BTreeSet<ParamRole>) -> BTreeSet<String> {
    model
        .named_params()
        .into_iter()
        .filter(|(_, r, _)| roles.contains(r))
        .map(|(n, _, _)| n)
        .collect()
}

// ---------------------------------------------------------------------------
// Adam

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Matrix,
    pub v: Matrix,
    /// Updates applied to this parameter so far.
    pub t: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl Default for OptimState {
    fn default() -> Self {
        OptimState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

/// Adam with bias correction. Only parameters that have an entry in `grads`
/// move; each keeps its own update count, so banks untouched by a batch
/// stay put.
pub fn optim_step(
    params: Vec<(String, &mut Matrix)>,
    grads: &BTreeMap<String, Matrix>,
    state: &mut OptimState,
    lr: f64,
) -> Result<()> {
    state.step += 1;
    for (name, p) in params {
        let Some(g) = grads.get(&name) else { continue };
        if g.shape() != p.shape() {
            return Err(Error::shape("optim_step", p.shape(), g.shape()));
        }
        let mom = state.moments.entry(name).or_insert_with(|| Moments {
            m: Matrix::zeros(p.rows(), p.cols()),
            v: Matrix::zeros(p.rows(), p.cols()),
            t: 0,
        });
        if mom.m.shape() != p.shape() {
            return Err(Error::shape("optim_step moments", p.shape(), mom.m.shape()));
        }
        mom.t += 1;
        let bc1 = 1.0 - state.beta1.powi(mom.t as i32);
        let bc2 = 1.0 - state.beta2.powi(mom.t as i32);
        for (((w, gi), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(mom.m.data_mut())
            .zip(mom.v.data_mut())
        {
            *m = state.beta1 * *m + (1.0 - state.beta1) * gi;
            *v = state.beta2 * *v + (1.0 - state.beta2) * gi * gi;
            let mh = *m / bc1;
            let vh = *v / bc2;
            *w -= lr * mh / (vh.sqrt() + state.eps);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Metric log

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub stage: u8,
    pub variant: String,
    pub language: String,
    pub mse: f64,
    pub normalized_error: f64,
    pub lr: f64,
    pub mean_p: Option<f64>,
}

pub const METRIC_HEADER: [&str; 8] = ["step", "stage", "variant", "language", "mse", "normalized_error", "lr", "mean_p"];

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(METRIC_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != METRIC_HEADER {
        return Err(Error::Structure(format!("{} has header {header:?}", path.display())));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

// ---------------------------------------------------------------------------
// Training loop

/// Everything a stage produces.
#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub model: Model,
    pub history: Vec<MetricRow>,
    /// Per language: mean over the last two evaluations.
    pub final_metrics: BTreeMap<String, Metrics>,
    /// `(step, mean eval mse over languages)` at each evaluation.
    pub loss_trace: Vec<(usize, f64)>,
    /// Per language: mean router output per rank at the end.
    pub routing: BTreeMap<String, Vec<f64>>,
    pub optim: OptimState,
}

pub struct StageData<'a> {
    pub train: &'a Dataset,
    pub eval: &'a Dataset,
    /// Reference mse per eval language (`normalized_error` denominator).
    pub base_mse: &'a BTreeMap<String, f64>,
}

/// Reference mse of `model` on every eval language.
pub fn reference_mse(model: &Model, eval: &Dataset, chunk_len: Option<usize>) -> Result<BTreeMap<String, f64>> {
    eval.per_language
        .iter()
        .map(|(l, s)| Ok((l.clone(), mse_on(model, s, l, chunk_len)?)))
        .collect()
}

fn frozen_hash(model: &Model, trainable: &BTreeSet<String>) -> String {
    let mut h = Sha256::new();
    for (name, role, m) in model.named_params() {
        if trainable.contains(&name) || role == ParamRole::FlyBias {
            continue;
        }
        h.update(name.as_bytes());
        hash_matrix(&mut h, m);
    }
    hex::encode(h.finalize())
}

fn eval_step(model: &Model, data: &StageData<'_>, chunk: Option<usize>) -> Result<BTreeMap<String, Metrics>> {
    let mut out = BTreeMap::new();
    for (l, samples) in &data.eval.per_language {
        let mse = mse_on(model, samples, l, chunk)?;
        let base = *data
            .base_mse
            .get(l)
            .ok_or_else(|| Error::Key(format!("no reference error for '{l}'")))?;
        if base <= 0.0 {
            return Err(Error::Contract(format!("reference error for '{l}' is zero")));
        }
        out.insert(l.clone(), Metrics { mse, normalized_error: mse / base });
    }
    Ok(out)
}

/// Runs one stage. `label` is the variant column of the metric log.
/// Batch mse, its gradients for the parameters `trainable` selects, and
/// FlyLoRA selection counts.
#[allow(clippy::type_complexity)]
pub fn batch_gradients(
    model: &Model,
    xs: &[&Matrix],
    ys: &[f64],
    lang: &str,
    chunk: Option<usize>,
    trainable: Selector<'_>,
) -> Result<(f64, BTreeMap<String, Matrix>, Vec<(String, Vec<f64>)>)> {
    let mut g = ParamGraph::new(trainable);
    let (pred, loads) = model.forward_batch(&mut g, xs, lang, chunk)?;
    let target = g.constant(Matrix::new(xs.len(), model.config.target_dim, ys.to_vec())?);
    let loss = g.tape.mse(pred, target)?;
    let value = g.value(loss).get(0, 0);
    let grads = g.backward(loss)?;
    Ok((value, g.param_grads(&grads), loads))
}

pub fn run_stage(
    mut model: Model,
    data: &StageData<'_>,
    cfg: &StageConfig,
    stage: u8,
    label: &str,
    seed: u64,
) -> Result<StageOutcome> {
    cfg.validate()?;
    let train_langs: Vec<(String, usize)> = data
        .train
        .per_language
        .iter()
        .filter(|(_, s)| !s.is_empty())
        .map(|(l, s)| (l.clone(), s.len()))
        .collect();
    if train_langs.is_empty() {
        return Err(Error::Contract("training split is empty".into()));
    }
    if data.eval.is_empty() {
        return Err(Error::Contract("eval split is empty".into()));
    }
    let roles = cfg.trainable_roles(stage);
    let trainable = trainable_names(&model, &roles);
    if trainable.is_empty() {
        return Err(Error::Config(format!("stage {stage} has no trainable parameters")));
    }
    let before = frozen_hash(&model, &trainable);
    let is_trainable = |n: &str| trainable.contains(n);

    let chunk_set = model.config.chunk_lengths.clone();
    let eval_chunk = cfg.chunked.then(|| model.config.eval_chunk());
    let weights: Vec<f64> = train_langs.iter().map(|(_, n)| *n as f64).collect();
    let mut schedule_rng = Rng::stream(seed, "batch-languages");
    let mut lang_rngs: BTreeMap<String, Rng> = train_langs
        .iter()
        .map(|(l, _)| (l.clone(), Rng::stream(seed, &format!("batches.{l}"))))
        .collect();

    let eval_every = ((cfg.steps as f64 * cfg.eval_fraction).round() as usize).max(1);
    let mut optim = OptimState::default();
    let mut history = Vec::new();
    let mut evals: Vec<BTreeMap<String, Metrics>> = Vec::new();
    let mut loss_trace = Vec::new();

    let mut record = |model: &Model, step: usize, lr: f64, evals: &mut Vec<BTreeMap<String, Metrics>>| -> Result<()> {
        let metrics = eval_step(model, data, eval_chunk)?;
        let mean_mse = metrics.values().map(|m| m.mse).sum::<f64>() / metrics.len() as f64;
        loss_trace.push((step, mean_mse));
        for (l, m) in &metrics {
            let mean_p = model
                .mean_routing(l)?
                .map(|p| p.iter().sum::<f64>() / p.len() as f64);
            history.push(MetricRow {
                step,
                stage,
                variant: label.to_string(),
                language: l.clone(),
                mse: m.mse,
                normalized_error: m.normalized_error,
                lr,
                mean_p,
            });
        }
        evals.push(metrics);
        Ok(())
    };

    for step in 0..cfg.steps {
        let li = schedule_rng.weighted_index(&weights);
        let lang = &train_langs[li].0;
        let samples = data.train.samples(lang)?;
        let rng = lang_rngs.get_mut(lang).expect("one stream per language");
        let picks: Vec<usize> = (0..cfg.batch_size).map(|_| rng.index(samples.len())).collect();
        let chunk = if cfg.chunked {
            Some(chunk_set[rng.index(chunk_set.len())])
        } else {
            None
        };
        let xs: Vec<&Matrix> = picks.iter().map(|&i| &samples[i].x).collect();
        let ys: Vec<f64> = picks.iter().flat_map(|&i| samples[i].y.iter().copied()).collect();

        let (_, grads, loads) = batch_gradients(&model, &xs, &ys, lang, chunk, &is_trainable)?;
        if let Some(bad) = grads.keys().find(|n| !trainable.contains(*n)) {
            return Err(Error::Invariant(format!("gradient produced for frozen parameter '{bad}'")));
        }
        if grads.values().any(|m| !m.is_finite()) {
            return Err(Error::Invariant(format!("non-finite gradient at step {step}")));
        }
        let lr = cfg.lr_at(step + 1);
        let params: Vec<(String, &mut Matrix)> = model
            .named_params_mut()
            .into_iter()
            .filter(|(n, _, _)| trainable.contains(n))
            .map(|(n, _, m)| (n, m))
            .collect();
        optim_step(params, &grads, &mut optim, lr)?;
        if !loads.is_empty() {
            let loads: BTreeMap<String, Vec<f64>> = loads.into_iter().collect();
            for (name, slot) in model.encoder_slots_mut() {
                if let Some(load) = loads.get(&name) {
                    fly_balance_bias(&mut slot.bank, load, cfg.fly_balance_rate);
                }
            }
        }
        if (step + 1) % eval_every == 0 || step + 1 == cfg.steps {
            record(&model, step + 1, lr, &mut evals)?;
        }
    }

    if frozen_hash(&model, &trainable) != before {
        return Err(Error::Invariant(format!("a frozen parameter changed during stage {stage}")));
    }
    let tail = &evals[evals.len().saturating_sub(2)..];
    let final_metrics = tail[0]
        .keys()
        .map(|l| {
            let n = tail.len() as f64;
            let mse = tail.iter().map(|e| e[l].mse).sum::<f64>() / n;
            let ne = tail.iter().map(|e| e[l].normalized_error).sum::<f64>() / n;
            (l.clone(), Metrics { mse, normalized_error: ne })
        })
        .collect();
    let mut routing = BTreeMap::new();
    for l in data.eval.per_language.keys() {
        if let Some(p) = model.mean_routing(l)? {
            routing.insert(l.clone(), p);
        }
    }
    Ok(StageOutcome {
        model,
        history,
        final_metrics,
        loss_trace,
        routing,
        optim,
    })
}

/// Stage 1 on source languages. The model must not carry encoder adapters.
pub fn train_stage1(model: Model, data: &StageData<'_>, cfg: &StageConfig, seed: u64) -> Result<StageOutcome> {
    if model.variant.is_some() || !model.encoder_slots().is_empty() {
        return Err(Error::Config("stage 1 does not use encoder adapters".into()));
    }
    run_stage(model, data, cfg, 1, "stage1", seed)
}

/// Stage 2 for one variant on a Stage-1 model with adapters attached.
pub fn train_stage2(
    mut model: Model,
    data: &StageData<'_>,
    cfg: &StageConfig,
    label: &str,
    seed: u64,
    head_seed: u64,
) -> Result<StageOutcome> {
    if model.variant.is_none() {
        return Err(Error::Config("stage 2 needs encoder adapters".into()));
    }
    if cfg.reinit_head_lora {
        let fresh = Model::init_base(&model.config, 0, head_seed)?;
        model.head.slot = fresh.head.slot;
    }
    run_stage(model, data, cfg, 2, label, seed)
}

/// What Initial-B copies from the source run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarmStartFlags {
    pub load_b_shared: bool,
    pub load_b_spec: bool,
    pub load_router: bool,
}

impl Default for WarmStartFlags {
    fn default() -> Self {
        WarmStartFlags {
            load_b_shared: true,
            load_b_spec: true,
            load_router: true,
        }
    }
}

/// Copies up-projection banks (and optionally routers) from `source` into
/// `target`. Shapes, variants and language sets must agree.
pub fn initial_b_warmstart(target: &mut Model, source: &Model, flags: &WarmStartFlags) -> Result<()> {
    let mut problems = Vec::new();
    if target.variant != source.variant {
        problems.push(format!("variant {:?} vs source {:?}", target.variant, source.variant));
    }
    let src: BTreeMap<String, _> = source.encoder_slots().into_iter().collect();
    let tgt_names: BTreeSet<String> = target.encoder_slots().into_iter().map(|(n, _)| n).collect();
    for n in &tgt_names {
        if !src.contains_key(n) {
            problems.push(format!("source lacks adapter layer {n}"));
        }
    }
    for (name, slot) in target.encoder_slots() {
        let Some(s) = src.get(&name) else { continue };
        if s.bank.config.rank != slot.bank.config.rank
            || s.bank.config.d_in != slot.bank.config.d_in
            || s.bank.config.d_out != slot.bank.config.d_out
        {
            problems.push(format!("{name}: adapter dims differ"));
        }
        if s.bank.languages() != slot.bank.languages() {
            problems.push(format!("{name}: language sets differ"));
        }
        if flags.load_router && s.router.is_some() != slot.router.is_some() {
            problems.push(format!("{name}: router presence differs"));
        }
    }
    if !problems.is_empty() {
        return Err(Error::Compat(problems));
    }
    for (name, slot) in target.encoder_slots_mut() {
        let s = src[&name];
        if flags.load_b_shared {
            slot.bank.b_shared = s.bank.b_shared.clone();
        }
        if flags.load_b_spec {
            slot.bank.b_spec = s.bank.b_spec.clone();
        }
        if flags.load_router {
            slot.router = s.router.clone();
        }
        slot.bank.validate()?;
    }
    Ok(())
}

/// First step in `trace` whose loss is at most `theta`.
pub fn steps_to_reach(trace: &[(usize, f64)], theta: f64) -> Option<usize> {
    trace.iter().find(|(_, l)| *l <= theta).map(|(s, _)| *s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_points() {
        assert_eq!(lr_at(0, 100, 1e-3, 0.1), 0.0);
        assert_eq!(lr_at(10, 100, 2e-5, 0.1), 2e-5);
        assert!(lr_at(100, 100, 1e-3, 0.1).abs() < 1e-12);
        let mid = lr_at(55, 100, 1e-3, 0.1);
        let oracle = 1e-3 * (1.0 + (std::f64::consts::PI / 2.0).cos()) / 2.0;
        assert!((mid - oracle).abs() < 1e-15);
        assert!((mid - 5e-4).abs() < 1e-12);
    }

    #[test]
    fn schedule_continuity_and_monotone_decay() {
        for total in [7usize, 20, 100, 333] {
            let warm = 0.1 * total as f64;
            let w = warm.ceil() as usize;
            let mut prev = f64::INFINITY;
            for s in w..=total {
                let v = lr_at(s, total, 1.0, 0.1);
                assert!(v <= prev + 1e-15);
                prev = v;
            }
            // Both sides of the boundary evaluated on the continuous formula.
            let left = 1.0 * warm / warm;
            let right = 0.5 * (1.0 + (std::f64::consts::PI * 0.0).cos());
            assert!((left - right).abs() < 1e-12);
        }
    }

    fn quad_step(p: &mut Matrix, state: &mut OptimState, lr: f64) {
        let g = p.scale(2.0);
        let grads: BTreeMap<String, Matrix> = [("p".to_string(), g)].into();
        optim_step(vec![("p".to_string(), p)], &grads, state, lr).unwrap();
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = Matrix::from_rows(&[[1.0, -2.0]]);
        let before = p.clone();
        let mut s = OptimState::default();
        let grads: BTreeMap<String, Matrix> = [("p".to_string(), Matrix::zeros(1, 2))].into();
        optim_step(vec![("p".to_string(), &mut p)], &grads, &mut s, 0.1).unwrap();
        assert!(p.bit_eq(&before));
        let bad: BTreeMap<String, Matrix> = [("p".to_string(), Matrix::zeros(2, 2))].into();
        assert!(matches!(
            optim_step(vec![("p".to_string(), &mut p)], &bad, &mut s, 0.1),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn adam_first_step_is_bounded() {
        let mut p = Matrix::scalar(1.0);
        let mut s = OptimState::default();
        quad_step(&mut p, &mut s, 0.01);
        let moved = 1.0 - p.get(0, 0);
        assert!(moved > 0.0 && moved <= 0.01 * (1.0 + 1e-8));
    }

    #[test]
    fn adam_converges_on_a_quadratic() {
        let mut p = Matrix::from_rows(&[[1.0, -0.5, 0.25]]);
        let mut s = OptimState::default();
        for step in 0..200 {
            quad_step(&mut p, &mut s, lr_at(step + 1, 200, 0.1, 0.1));
        }
        let loss: f64 = p.data().iter().map(|v| v * v).sum();
        assert!(loss < 1e-6, "{loss}");
    }

    #[test]
    fn untouched_parameters_stay() {
        let mut a = Matrix::scalar(1.0);
        let mut b = Matrix::scalar(1.0);
        let mut s = OptimState::default();
        let grads: BTreeMap<String, Matrix> = [("a".to_string(), Matrix::scalar(1.0))].into();
        optim_step(vec![("a".into(), &mut a), ("b".into(), &mut b)], &grads, &mut s, 0.1).unwrap();
        assert_eq!(b.get(0, 0), 1.0);
        assert!(a.get(0, 0) < 1.0);
        assert!(!s.moments.contains_key("b"));
    }

    #[test]
    fn stage_selectors() {
        let cfg = StageConfig::stage2_default();
        let r2 = cfg.trainable_roles(2);
        assert!(!r2.contains(&ParamRole::EncoderBase));
        assert!(r2.contains(&ParamRole::EncoderAdapter));
        assert!(!r2.contains(&ParamRole::Lid));
        let r1 = cfg.trainable_roles(1);
        assert!(r1.contains(&ParamRole::EncoderBase));
        assert!(!r1.contains(&ParamRole::EncoderAdapter));
        let iso = StageConfig { freeze_shared: true, ..cfg };
        let r = iso.trainable_roles(2);
        assert!(!r.contains(&ParamRole::Projector));
        assert!(!r.contains(&ParamRole::HeadAdapter));
    }

    #[test]
    fn steps_to_threshold() {
        let trace = [(10, 3.0), (20, 2.0), (30, 1.0)];
        assert_eq!(steps_to_reach(&trace, 2.5), Some(20));
        assert_eq!(steps_to_reach(&trace, 0.5), None);
    }

    #[test]
    fn metric_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows = vec![
            MetricRow {
                step: 5,
                stage: 2,
                variant: "ZipperSoft".into(),
                language: "ja".into(),
                mse: 0.125,
                normalized_error: 0.5,
                lr: 1e-3,
                mean_p: Some(0.25),
            },
            MetricRow {
                step: 5,
                stage: 2,
                variant: "Vanilla".into(),
                language: "ja".into(),
                mse: 0.3,
                normalized_error: 0.7,
                lr: 1e-3,
                mean_p: None,
            },
        ];
        write_metrics_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,stage,variant,language,mse,normalized_error,lr,mean_p\n"));
        assert!(text.lines().nth(2).unwrap().ends_with(','));
        assert_eq!(read_metrics_csv(&path).unwrap(), rows);
    }
}
