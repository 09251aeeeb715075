//! Post-run reports and encoder-output export.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::adapters::{count_trainable_params, Variant};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::experiment::{build_task, read_json, CellSummary, CheckpointFile, RunManifest, CELL_FILES};
use crate::model::Model;
use crate::tensor::Matrix;

pub const REPORT_FILES: [&str; 5] = [
    "comparison.csv",
    "relative_vs_vanilla.csv",
    "radar_data.csv",
    "params.csv",
    "routing.csv",
];

struct LoadedRun {
    cfg: RunConfig,
    manifest: RunManifest,
    summaries: Vec<CellSummary>,
}

/// Checks that a run directory is complete and internally consistent.
fn load_run(dir: &Path) -> Result<LoadedRun> {
    let mut missing = Vec::new();
    for f in ["config.toml", "manifest.json", "stage1/metrics.csv", "stage1/checkpoint.json"] {
        if !dir.join(f).is_file() {
            missing.push(f.to_string());
        }
    }
    if !missing.is_empty() {
        return Err(Error::Incomplete(missing));
    }
    let cfg = RunConfig::load(&dir.join("config.toml"))?;
    let manifest: RunManifest = read_json(&dir.join("manifest.json"))?;
    let hash = cfg.hash()?;
    if manifest.config_hash != hash {
        return Err(Error::Invariant("manifest was written for a different config".into()));
    }
    for c in &manifest.cells {
        for f in CELL_FILES {
            if !dir.join(&c.dir).join(f).is_file() {
                missing.push(format!("{}/{f}", c.dir));
            }
        }
    }
    for v in &cfg.variants {
        for s in &cfg.seeds {
            if !manifest.cells.iter().any(|c| c.label == v.name() && c.seed == *s) {
                missing.push(format!("cell {} seed {s}", v.name()));
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Incomplete(missing));
    }
    let mut summaries = Vec::new();
    for c in &manifest.cells {
        let s: CellSummary = read_json(&dir.join(&c.dir).join("summary.json"))?;
        if s.config_hash != hash {
            return Err(Error::Invariant(format!("{} belongs to a different config", c.dir)));
        }
        summaries.push(s);
    }
    Ok(LoadedRun { cfg, manifest, summaries })
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

#[derive(Serialize)]
struct ComparisonRow<'a> {
    variant: &'a str,
    language: &'a str,
    mean_normalized_error: f64,
    std_normalized_error: f64,
    n_seeds: usize,
    per_seed: String,
    trainable_params: usize,
}

#[derive(Serialize)]
struct RelativeRow<'a> {
    variant: &'a str,
    language: &'a str,
    relative_change_pct: f64,
}

#[derive(Serialize)]
struct RadarRow<'a> {
    variant: &'a str,
    language: &'a str,
    score: f64,
}

#[derive(Serialize)]
pub struct ParamsRow {
    pub variant: String,
    pub layers: usize,
    pub per_layer: usize,
    pub formula_total: usize,
    pub counted: usize,
}

#[derive(Serialize)]
struct RoutingRow<'a> {
    variant: &'a str,
    seed: u64,
    language: &'a str,
    rank: usize,
    mean_p: f64,
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Closed-form trainable adapter parameters per variant, summed over layers.
pub fn params_table(cfg: &RunConfig) -> Vec<ParamsRow> {
    let layers = cfg.model.adapted_layers();
    let l = cfg.model.languages.len();
    cfg.variants
        .iter()
        .map(|&v| {
            let per: Vec<usize> = layers
                .iter()
                .map(|(_, i, o)| count_trainable_params(v, &cfg.model.lora.with_dims(*i, *o), l, cfg.model.d_lid))
                .collect();
            ParamsRow {
                variant: v.name().to_string(),
                layers: layers.len(),
                per_layer: per[0],
                formula_total: per.iter().sum(),
                counted: 0,
            }
        })
        .collect()
}

/// Writes every report file into `dir`. Fails with `Incomplete` when cells
/// or stage artifacts are missing.
pub fn cmd_report(dir: &Path) -> Result<()> {
    let run = load_run(dir)?;
    let cfg = &run.cfg;
    let mut labels: Vec<String> = cfg.variants.iter().map(|v| v.name().to_string()).collect();
    for s in &run.summaries {
        if !labels.contains(&s.label) {
            labels.push(s.label.clone());
        }
    }
    let by_label = |label: &str| -> Vec<&CellSummary> { run.summaries.iter().filter(|s| s.label == label).collect() };

    let mut means: BTreeMap<(String, String), f64> = BTreeMap::new();
    let mut comparison = Vec::new();
    let mut per_label_rows = Vec::new();
    for label in &labels {
        let cells = by_label(label);
        for lang in &cfg.model.languages {
            let vals: Vec<f64> = cells.iter().map(|c| c.final_metrics[lang].normalized_error).collect();
            let (m, sd) = mean_std(&vals);
            means.insert((label.clone(), lang.clone()), m);
            per_label_rows.push((label.clone(), lang.clone(), m, sd, vals, cells[0].trainable_params));
        }
    }
    for (label, lang, m, sd, vals, params) in &per_label_rows {
        comparison.push(ComparisonRow {
            variant: label,
            language: lang,
            mean_normalized_error: *m,
            std_normalized_error: *sd,
            n_seeds: vals.len(),
            per_seed: vals.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(";"),
            trainable_params: *params,
        });
    }
    write_rows(
        &dir.join("comparison.csv"),
        &comparison,
        &[
            "variant",
            "language",
            "mean_normalized_error",
            "std_normalized_error",
            "n_seeds",
            "per_seed",
            "trainable_params",
        ],
    )?;

    let mut relative = Vec::new();
    if cfg.variants.contains(&Variant::Vanilla) {
        for (label, lang, m, ..) in &per_label_rows {
            let base = means[&(Variant::Vanilla.name().to_string(), lang.clone())];
            let pct = if label == Variant::Vanilla.name() {
                0.0
            } else {
                (base - m) / base * 100.0
            };
            relative.push(RelativeRow {
                variant: label,
                language: lang,
                relative_change_pct: pct,
            });
        }
    }
    write_rows(
        &dir.join("relative_vs_vanilla.csv"),
        &relative,
        &["variant", "language", "relative_change_pct"],
    )?;

    let radar: Vec<RadarRow> = per_label_rows
        .iter()
        .map(|(label, lang, m, ..)| RadarRow {
            variant: label,
            language: lang,
            score: (1.0 - m).clamp(0.0, 1.0),
        })
        .collect();
    write_rows(&dir.join("radar_data.csv"), &radar, &["variant", "language", "score"])?;

    let mut params = params_table(cfg);
    for row in &mut params {
        let counted = by_label(&row.variant).first().map(|c| c.trainable_params).unwrap_or(0);
        if counted != row.formula_total {
            return Err(Error::Invariant(format!(
                "{}: counted {counted} trainable adapter parameters, formula gives {}",
                row.variant, row.formula_total
            )));
        }
        row.counted = counted;
    }
    write_rows(
        &dir.join("params.csv"),
        &params,
        &["variant", "layers", "per_layer", "formula_total", "counted"],
    )?;

    let mut routing = Vec::new();
    for s in &run.summaries {
        for (lang, p) in &s.routing {
            for (rank, v) in p.iter().enumerate() {
                routing.push(RoutingRow {
                    variant: &s.label,
                    seed: s.seed,
                    language: lang,
                    rank,
                    mean_p: *v,
                });
            }
        }
    }
    write_rows(
        &dir.join("routing.csv"),
        &routing,
        &["variant", "seed", "language", "rank", "mean_p"],
    )?;
    Ok(())
}

/// Mean pairwise distance between language centroids divided by the mean
/// distance of points to their own centroid.
pub fn separation_statistic(points: &Matrix, labels: &[String]) -> Result<f64> {
    if points.rows() != labels.len() || points.rows() == 0 {
        return Err(Error::shape("separation_statistic", points.shape(), (labels.len(), points.cols())));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    if groups.len() < 2 {
        return Err(Error::Contract("separation needs at least two languages".into()));
    }
    let d = points.cols();
    let centroids: Vec<Vec<f64>> = groups
        .values()
        .map(|idx| {
            let mut c = vec![0.0; d];
            for &i in idx {
                for (a, v) in c.iter_mut().zip(points.row(i)) {
                    *a += v / idx.len() as f64;
                }
            }
            c
        })
        .collect();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let mut inter = 0.0;
    let mut pairs = 0.0;
    for i in 0..centroids.len() {
        for j in i + 1..centroids.len() {
            inter += dist(&centroids[i], &centroids[j]);
            pairs += 1.0;
        }
    }
    let mut intra = 0.0;
    for (c, idx) in centroids.iter().zip(groups.values()) {
        for &i in idx {
            intra += dist(points.row(i), c);
        }
    }
    intra /= points.rows() as f64;
    if intra == 0.0 {
        return Err(Error::Contract("all points coincide with their centroids".into()));
    }
    Ok((inter / pairs) / intra)
}

/// Mean-pooled encoder outputs for every eval utterance, with labels.
pub fn encoder_embeddings(model: &Model, eval: &crate::data::Dataset, chunk: Option<usize>) -> Result<(Matrix, Vec<String>)> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (l, samples) in &eval.per_language {
        let xs: Vec<&Matrix> = samples.iter().map(|s| &s.x).collect();
        let pooled = model.pooled_encoder_outputs(&xs, l, chunk)?;
        for r in 0..pooled.rows() {
            rows.push(pooled.row(r).to_vec());
            labels.push(l.clone());
        }
    }
    Ok((Matrix::from_rows(&rows), labels))
}

/// Writes `embeddings.csv` in every cell and `separation.csv` at the root.
pub fn cmd_export_embeddings(dir: &Path) -> Result<()> {
    let run = load_run(dir)?;
    let cfg = &run.cfg;
    let task = build_task(cfg)?;
    let chunk = cfg.stage2.chunked.then(|| cfg.model.eval_chunk());
    let mut sep_rows = Vec::new();
    for c in &run.manifest.cells {
        let ck: CheckpointFile = read_json(&dir.join(&c.dir).join("checkpoint.json"))?;
        let model = ck.checkpoint.restore()?;
        let (points, labels) = encoder_embeddings(&model, &task.eval, chunk)?;
        let path = dir.join(&c.dir).join("embeddings.csv");
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&path)?;
        let mut header = vec!["language".to_string(), "index".to_string()];
        header.extend((0..points.cols()).map(|i| format!("e{i}")));
        w.write_record(&header)?;
        let mut counter: BTreeMap<&str, usize> = BTreeMap::new();
        for (r, l) in labels.iter().enumerate() {
            let idx = counter.entry(l).or_default();
            let mut rec = vec![l.clone(), idx.to_string()];
            rec.extend(points.row(r).iter().map(|v| format!("{v:e}")));
            *idx += 1;
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        sep_rows.push((c.label.clone(), c.seed, separation_statistic(&points, &labels)?));
    }
    let path = dir.join("separation.csv");
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&path)?;
    w.write_record(["variant", "seed", "separation"])?;
    for (l, s, v) in sep_rows {
        w.write_record([l, s.to_string(), format!("{v:e}")])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separation_grows_with_centroid_distance() {
        let labels: Vec<String> = ["a", "a", "b", "b"].iter().map(|s| s.to_string()).collect();
        let near = Matrix::from_rows(&[[0.0, 1.0], [0.0, -1.0], [1.0, 1.0], [1.0, -1.0]]);
        let far = Matrix::from_rows(&[[0.0, 1.0], [0.0, -1.0], [5.0, 1.0], [5.0, -1.0]]);
        let s_near = separation_statistic(&near, &labels).unwrap();
        let s_far = separation_statistic(&far, &labels).unwrap();
        assert!((s_near - 1.0).abs() < 1e-12);
        assert!((s_far - 5.0).abs() < 1e-12);
        let one: Vec<String> = vec!["a".into(); 4];
        assert!(separation_statistic(&near, &one).is_err());
    }

    #[test]
    fn default_params_table() {
        let cfg = RunConfig::default();
        let rows = params_table(&cfg);
        let get = |v: &str| rows.iter().find(|r| r.variant == v).unwrap();
        assert_eq!(get("ZipperSoft").per_layer, 3752);
        assert_eq!(get("Independent").per_layer, 6144);
        assert!(get("ZipperSoft").formula_total < get("Independent").formula_total);
    }

    #[test]
    fn missing_run_is_incomplete() {
        let dir = tempfile::tempdir().unwrap();
        match cmd_report(dir.path()) {
            Err(Error::Incomplete(m)) => assert!(m.iter().any(|f| f == "manifest.json")),
            other => panic!("{other:?}"),
        }
    }
}
