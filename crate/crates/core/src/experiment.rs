//! Runs a configured experiment: one Stage-1 foundation, then Stage 2 for
//! every (variant, seed) cell, writing metric logs, checkpoints and summaries.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapters::Variant;
use crate::config::RunConfig;
use crate::data::{
    long_tail_sizes, make_teachers, sample_dataset, Dataset, InputDistribution, Metrics, Split, TeacherSpec, Tier,
};
use crate::error::{Error, Result};
use crate::model::{Model, ModelCheckpoint, Projector};
use crate::rng::derive_seed;
use crate::router::{synth_lid_embeddings, LidEmbedding};
use crate::tensor::Matrix;
use crate::train::{
    initial_b_warmstart, reference_mse, train_stage1, train_stage2, write_metrics_csv, OptimState, StageData,
    StageOutcome,
};

pub const WARM_LABEL: &str = "ZipperSoft+InitB";

/// Teacher, inputs and evaluation data; everything fixed by `data_seed`.
#[derive(Clone, Debug)]
pub struct Task {
    pub similarity: Matrix,
    pub teacher: TeacherSpec,
    pub inputs: InputDistribution,
    pub stage1_inputs: InputDistribution,
    pub eval: Dataset,
    pub lid: Vec<LidEmbedding>,
}

pub fn adapter_seed(cfg: &RunConfig) -> u64 {
    derive_seed(cfg.data_seed, "adapter-init")
}

pub fn build_task(cfg: &RunConfig) -> Result<Task> {
    let langs = &cfg.model.languages;
    let similarity = cfg.similarity_matrix()?;
    let teacher = make_teachers(&cfg.model, &similarity, langs, &cfg.teacher, cfg.data_seed)?;
    let inputs = InputDistribution::standard(cfg.model.d_model, cfg.inputs.mean_norm, cfg.data_seed);
    let stage1_inputs = if cfg.inputs.domain_mismatch {
        inputs.mismatched(cfg.data_seed)
    } else {
        inputs.clone()
    };
    let counts: BTreeMap<String, usize> = langs.iter().map(|l| (l.clone(), cfg.eval_per_language)).collect();
    let eval = sample_dataset(&teacher, &counts, &inputs, Split::Eval, cfg.model.seq_len, cfg.data_seed)?;
    let lid = synth_lid_embeddings(&similarity, langs, cfg.model.d_lid, cfg.data_seed)?;
    Ok(Task {
        similarity,
        teacher,
        inputs,
        stage1_inputs,
        eval,
        lid,
    })
}

/// Stage 1 on the source languages, with data from the teacher base.
pub fn run_stage1(cfg: &RunConfig, task: &Task) -> Result<StageOutcome> {
    let base_teacher = task.teacher.base_view();
    let sources = &cfg.model.source_languages;
    let mk = |n: usize, split| {
        let counts: BTreeMap<String, usize> = sources.iter().map(|l| (l.clone(), n)).collect();
        sample_dataset(&base_teacher, &counts, &task.stage1_inputs, split, cfg.model.seq_len, cfg.data_seed)
    };
    let train = mk(cfg.stage1_per_language, Split::Train)?;
    let eval = mk(cfg.eval_per_language, Split::Eval)?;
    let mut student = task.teacher.base.clone();
    let noise = Projector::init(&cfg.model, derive_seed(cfg.data_seed, "student-projector"));
    let rho = cfg.stage1_init_noise;
    for (w, n) in [
        (&mut student.projector.gate, &noise.gate),
        (&mut student.projector.up, &noise.up),
        (&mut student.projector.out, &noise.out),
    ] {
        w.axpy(rho, n)?;
    }
    student.head.slot = Model::init_base(&cfg.model, 0, adapter_seed(cfg))?.head.slot;
    let base_mse = reference_mse(&student, &eval, None)?;
    let data = StageData {
        train: &train,
        eval: &eval,
        base_mse: &base_mse,
    };
    train_stage1(student, &data, &cfg.stage1, cfg.data_seed)
}

/// Long-tailed Stage-2 training set for one run seed.
pub fn stage2_train_set(cfg: &RunConfig, task: &Task, seed: u64) -> Result<Dataset> {
    let counts = long_tail_sizes(&cfg.profile, &cfg.tiers)?;
    sample_dataset(
        &task.teacher,
        &counts,
        &task.inputs,
        Split::Train,
        cfg.model.seq_len,
        derive_seed(seed, "stage2-train"),
    )
}

/// Everything Stage 2 cells share.
pub struct Foundation {
    pub stage1: Model,
    pub base_mse: BTreeMap<String, f64>,
}

pub fn foundation(cfg: &RunConfig, task: &Task, stage1: Model) -> Result<Foundation> {
    let chunk = cfg.stage2.chunked.then(|| cfg.model.eval_chunk());
    let base_mse = reference_mse(&stage1, &task.eval, chunk)?;
    Ok(Foundation { stage1, base_mse })
}

/// One Stage-2 cell. `warm` is a converged ZipperSoft model for Initial-B.
pub fn run_cell(
    cfg: &RunConfig,
    task: &Task,
    found: &Foundation,
    train: &Dataset,
    variant: Variant,
    seed: u64,
    warm: Option<&Model>,
) -> Result<StageOutcome> {
    let mut model = found.stage1.clone();
    model.attach_adapters(variant, &task.lid, adapter_seed(cfg))?;
    let label = match warm {
        Some(src) => {
            initial_b_warmstart(&mut model, src, &cfg.warm_start.flags)?;
            WARM_LABEL.to_string()
        }
        None => variant.name().to_string(),
    };
    let data = StageData {
        train,
        eval: &task.eval,
        base_mse: &found.base_mse,
    };
    train_stage2(model, &data, &cfg.stage2, &label, seed, adapter_seed(cfg))
}

/// Mean final normalized error over `langs`.
pub fn mean_error(metrics: &BTreeMap<String, Metrics>, langs: &[String]) -> f64 {
    langs.iter().map(|l| metrics[l].normalized_error).sum::<f64>() / langs.len() as f64
}

pub fn tail_languages(cfg: &RunConfig) -> Vec<String> {
    cfg.languages_in_tier(Tier::Low)
}

// ---------------------------------------------------------------------------
// Artifacts

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub config_hash: String,
    pub label: String,
    pub variant: Variant,
    pub seed: u64,
    pub final_metrics: BTreeMap<String, Metrics>,
    pub loss_trace: Vec<(usize, f64)>,
    pub routing: BTreeMap<String, Vec<f64>>,
    pub trainable_params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointFile {
    pub config_hash: String,
    pub checkpoint: ModelCheckpoint,
    pub optimizer: Option<OptimState>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub name: String,
    pub cells: Vec<CellRef>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRef {
    pub label: String,
    pub variant: Variant,
    pub seed: u64,
    pub dir: String,
}

pub const CELL_FILES: [&str; 3] = ["metrics.csv", "checkpoint.json", "summary.json"];

pub fn cell_dir(label: &str, seed: u64) -> String {
    format!("cells/{}/seed-{seed}", label.replace('+', "_"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Adapter, router and FlyLoRA-bias parameters that Stage 2 updates.
pub fn adapter_param_count(cfg: &RunConfig, model: &Model) -> usize {
    use crate::model::ParamRole;
    let roles = cfg.stage2.trainable_roles(2);
    model
        .named_params()
        .into_iter()
        .filter(|(_, r, _)| {
            *r == ParamRole::FlyBias || (roles.contains(r) && matches!(r, ParamRole::EncoderAdapter | ParamRole::Router))
        })
        .map(|(_, _, m)| m.len())
        .sum()
}

fn save_cell(out: &Path, cfg_hash: &str, cfg: &RunConfig, variant: Variant, seed: u64, o: &StageOutcome) -> Result<CellRef> {
    let label = o.history.first().map(|r| r.variant.clone()).unwrap_or_else(|| variant.name().to_string());
    let rel = cell_dir(&label, seed);
    let dir = out.join(&rel);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_metrics_csv(&dir.join("metrics.csv"), &o.history)?;
    write_json(
        &dir.join("checkpoint.json"),
        &CheckpointFile {
            config_hash: cfg_hash.to_string(),
            checkpoint: ModelCheckpoint::from_model(&o.model, 2),
            optimizer: Some(o.optim.clone()),
        },
    )?;
    write_json(
        &dir.join("summary.json"),
        &CellSummary {
            config_hash: cfg_hash.to_string(),
            label: label.clone(),
            variant,
            seed,
            final_metrics: o.final_metrics.clone(),
            loss_trace: o.loss_trace.clone(),
            routing: o.routing.clone(),
            trainable_params: adapter_param_count(cfg, &o.model),
        },
    )?;
    Ok(CellRef {
        label,
        variant,
        seed,
        dir: rel,
    })
}

/// Full run: writes `config.toml`, `stage1/`, one directory per cell, the
/// manifest, and the comparison report.
pub fn cmd_run(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let out = cfg.out_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let hash = cfg.hash()?;
    let cfg_path = out.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml_string()?).map_err(|e| Error::io(&cfg_path, e))?;

    let task = build_task(cfg)?;
    let s1 = run_stage1(cfg, &task)?;
    let s1_dir = out.join("stage1");
    std::fs::create_dir_all(&s1_dir).map_err(|e| Error::io(&s1_dir, e))?;
    write_metrics_csv(&s1_dir.join("metrics.csv"), &s1.history)?;
    write_json(
        &s1_dir.join("checkpoint.json"),
        &CheckpointFile {
            config_hash: hash.clone(),
            checkpoint: ModelCheckpoint::from_model(&s1.model, 1),
            optimizer: Some(s1.optim.clone()),
        },
    )?;
    let found = foundation(cfg, &task, s1.model)?;

    let mut seeds = cfg.seeds.clone();
    if cfg.warm_start.enabled {
        // The warm-start source must finish first.
        seeds.sort_by_key(|s| *s != cfg.warm_start.source_seed);
    }
    let mut cells = Vec::new();
    let mut warm_source: Option<Model> = None;
    for &seed in &seeds {
        let train = stage2_train_set(cfg, &task, seed)?;
        for &v in &cfg.variants {
            let o = run_cell(cfg, &task, &found, &train, v, seed, None)?;
            cells.push(save_cell(&out, &hash, cfg, v, seed, &o)?);
            if cfg.warm_start.enabled && v == Variant::ZipperSoft && seed == cfg.warm_start.source_seed {
                warm_source = Some(o.model);
            }
        }
        if let Some(src) = &warm_source {
            let o = run_cell(cfg, &task, &found, &train, Variant::ZipperSoft, seed, Some(src))?;
            cells.push(save_cell(&out, &hash, cfg, Variant::ZipperSoft, seed, &o)?);
        }
    }
    write_json(
        &out.join("manifest.json"),
        &RunManifest {
            config_hash: hash,
            name: cfg.name.clone(),
            cells,
        },
    )?;
    crate::report::cmd_report(&out)?;
    Ok(out)
}
