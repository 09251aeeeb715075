//! Synthetic multilingual regression tasks.
//!
//! A frozen teacher network plus per-language weight deltas
//! `ΔW*_l = scale·(c_sh·Δ_sh + c_sp·Δ_l)` on every adapted encoder layer.
//! The `Δ_l` are built from Gram factors of a similarity matrix so their
//! pairwise cosines reproduce it.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::rng::Rng;
use crate::router::{gram_factor, random_orthonormal};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    High,
    Mid,
    Low,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LongTailProfile {
    pub high: usize,
    pub mid: usize,
    pub low: usize,
}

impl Default for LongTailProfile {
    fn default() -> Self {
        LongTailProfile {
            high: 2000,
            mid: 500,
            low: 2,
        }
    }
}

/// Default tiering of the stock 12 languages.
pub fn default_tiers() -> BTreeMap<String, Tier> {
    let mut out = BTreeMap::new();
    for l in ["de", "es", "fr", "ru"] {
        out.insert(l.to_string(), Tier::High);
    }
    for l in ["vi", "it", "en", "th"] {
        out.insert(l.to_string(), Tier::Mid);
    }
    for l in ["ar", "ja", "ko", "pt"] {
        out.insert(l.to_string(), Tier::Low);
    }
    out
}

pub fn long_tail_sizes(profile: &LongTailProfile, assignment: &BTreeMap<String, Tier>) -> Result<BTreeMap<String, usize>> {
    if profile.high == 0 || profile.mid == 0 || profile.low == 0 {
        return Err(Error::Config("long-tail counts must be at least 1".into()));
    }
    Ok(assignment
        .iter()
        .map(|(l, t)| {
            let n = match t {
                Tier::High => profile.high,
                Tier::Mid => profile.mid,
                Tier::Low => profile.low,
            };
            (l.clone(), n)
        })
        .collect())
}

/// Frame distribution: `x_t = mean + scales ⊙ z`, `z ~ N(0, I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputDistribution {
    pub mean: Vec<f64>,
    pub scales: Vec<f64>,
}

impl InputDistribution {
    /// Unit-variance frames around a fixed random mean of norm `mean_norm`.
    pub fn standard(d: usize, mean_norm: f64, seed: u64) -> Self {
        let mut rng = Rng::stream(seed, "input-mean");
        let raw: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        InputDistribution {
            mean: raw.iter().map(|v| v * mean_norm / norm).collect(),
            scales: vec![1.0; d],
        }
    }

    /// Same mean, per-dimension scales in `[0.5, 1.5)`.
    pub fn mismatched(&self, seed: u64) -> Self {
        let mut rng = Rng::stream(seed, "input-mismatch");
        InputDistribution {
            mean: self.mean.clone(),
            scales: self.scales.iter().map(|s| s * rng.uniform(0.5, 1.5)).collect(),
        }
    }

    pub fn sample(&self, t: usize, rng: &mut Rng) -> Matrix {
        let d = self.mean.len();
        Matrix::from_fn(t, d, |_, c| self.mean[c] + self.scales[c] * rng.normal())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherParams {
    pub c_shared: f64,
    pub c_spec: f64,
    /// Frobenius norm of each unit component before the `c` weights.
    pub delta_scale: f64,
    /// Rank of every teacher delta; `0` means the student adapter rank.
    pub teacher_rank: usize,
    /// Noise std as a fraction of the clean target std.
    pub noise_rel: f64,
}

impl Default for TeacherParams {
    fn default() -> Self {
        TeacherParams {
            c_shared: 2.0,
            c_spec: 1.0,
            delta_scale: 3.0,
            teacher_rank: 0,
            noise_rel: 0.01,
        }
    }
}

/// Frozen teacher: base network, unit delta components, and one merged
/// network per language.
#[derive(Clone, Debug)]
pub struct TeacherSpec {
    pub base: Model,
    pub languages: Vec<String>,
    pub params: TeacherParams,
    /// Layer name → `Δ_sh`.
    pub shared: BTreeMap<String, Matrix>,
    /// Language → layer name → `Δ_l`.
    pub specific: BTreeMap<String, BTreeMap<String, Matrix>>,
    pub noise_std: f64,
    merged: BTreeMap<String, Model>,
}

/// Orthonormal `k×k` matrices `Ξ_0..Ξ_n` (flattened Frobenius-orthonormal).
fn core_basis(k: usize, n: usize, rng: &mut Rng) -> Result<Vec<Matrix>> {
    if n > k * k {
        return Err(Error::Config(format!(
            "teacher rank {k} leaves room for {} orthogonal components, {n} needed",
            k * k
        )));
    }
    let q = random_orthonormal(k * k, n, rng);
    Ok((0..n)
        .map(|j| Matrix::from_fn(k, k, |a, b| q.get(a * k + b, j)))
        .collect())
}

/// Builds the teacher. `sim` is indexed like `languages`; construction runs
/// in sorted-name order so the teacher does not depend on that order.
pub fn make_teachers(
    cfg: &ModelConfig,
    sim: &Matrix,
    languages: &[String],
    params: &TeacherParams,
    seed: u64,
) -> Result<TeacherSpec> {
    let n = languages.len();
    if sim.shape() != (n, n) {
        return Err(Error::shape("make_teachers", sim.shape(), (n, n)));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| languages[a].cmp(&languages[b]));
    let sorted = Matrix::from_fn(n, n, |i, j| sim.get(order[i], order[j]));
    let factors = gram_factor(&sorted)?;

    let k = if params.teacher_rank == 0 { cfg.lora.rank } else { params.teacher_rank };
    let mut base = Model::init_base(cfg, Rng::stream(seed, "teacher-base").index(u32::MAX as usize) as u64, 0)?;
    if let Some(slot) = &mut base.head.slot {
        slot.bank.zero_up_projections();
    }
    let mut shared = BTreeMap::new();
    let mut specific: BTreeMap<String, BTreeMap<String, Matrix>> =
        languages.iter().map(|l| (l.clone(), BTreeMap::new())).collect();
    for (layer, d_in, d_out) in cfg.adapted_layers() {
        if k > d_in.min(d_out) {
            return Err(Error::Config(format!("teacher rank {k} exceeds layer {layer} dims")));
        }
        let mut rng = Rng::stream(seed, &format!("teacher.{layer}"));
        let u = random_orthonormal(d_out, k, &mut rng);
        let v = random_orthonormal(d_in, k, &mut rng);
        let xi = core_basis(k, n + 1, &mut rng)?;
        let lift = |core: &Matrix| -> Result<Matrix> { u.matmul(core)?.matmul_t(&v) };
        shared.insert(layer.clone(), lift(&xi[0])?);
        for (i, &orig) in order.iter().enumerate() {
            let mut core = Matrix::zeros(k, k);
            for m in 0..n {
                core.axpy(factors.get(i, m), &xi[m + 1])?;
            }
            specific
                .get_mut(&languages[orig])
                .expect("inserted above")
                .insert(layer.clone(), lift(&core)?);
        }
    }

    let mut teacher = TeacherSpec {
        base,
        languages: languages.to_vec(),
        params: params.clone(),
        shared,
        specific,
        noise_std: 0.0,
        merged: BTreeMap::new(),
    };
    for l in languages {
        let m = teacher.build_merged(l)?;
        teacher.merged.insert(l.clone(), m);
    }
    // Noise level from the clean base-teacher target spread.
    let dist = InputDistribution::standard(cfg.d_model, 0.0, seed);
    let mut rng = Rng::stream(seed, "noise-pilot");
    let xs: Vec<Matrix> = (0..64).map(|_| dist.sample(cfg.seq_len, &mut rng)).collect();
    let refs: Vec<&Matrix> = xs.iter().collect();
    let lang = cfg.prompt_languages()[0].clone();
    let ys = teacher.base.predict(&refs, &lang, None)?;
    let mean = ys.mean();
    let var = ys.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / ys.len() as f64;
    teacher.noise_std = params.noise_rel * var.sqrt();
    Ok(teacher)
}

impl TeacherSpec {
    /// `ΔW*_l` for one layer.
    pub fn delta(&self, l: &str, layer: &str) -> Result<Matrix> {
        let spec = self
            .specific
            .get(l)
            .ok_or_else(|| Error::Key(format!("teacher has no language '{l}'")))?;
        let mut d = self.shared[layer].scale(self.params.c_shared);
        d.axpy(self.params.c_spec, &spec[layer])?;
        Ok(d.scale(self.params.delta_scale))
    }

    fn build_merged(&self, l: &str) -> Result<Model> {
        let mut m = self.base.clone();
        for (b, block) in m.blocks.iter_mut().enumerate() {
            for (name, lin) in block.linears.iter_mut() {
                let layer = format!("enc.{b}.{name}");
                lin.weight.add_assign(&self.delta(l, &layer)?)?;
            }
        }
        Ok(m)
    }

    /// The same teacher with every language mapped to the base network.
    pub fn base_view(&self) -> TeacherSpec {
        TeacherSpec {
            merged: BTreeMap::new(),
            ..self.clone()
        }
    }

    /// Teacher network for `l`; languages without a delta use the base.
    pub fn model(&self, l: &str) -> &Model {
        self.merged.get(l).unwrap_or(&self.base)
    }

    /// Clean targets for a batch of inputs.
    pub fn forward(&self, xs: &[&Matrix], l: &str) -> Result<Matrix> {
        self.model(l).predict(xs, self.prompt_language(l), None)
    }

    fn prompt_language<'a>(&'a self, l: &'a str) -> &'a str {
        if self.base.prompts.contains_key(l) {
            l
        } else {
            self.base.prompts.keys().next().map(String::as_str).unwrap_or(l)
        }
    }

    /// Pairwise cosines of the flattened specific deltas, over all layers.
    pub fn delta_cosines(&self) -> Matrix {
        let flat: Vec<Vec<f64>> = self
            .languages
            .iter()
            .map(|l| self.specific[l].values().flat_map(|m| m.data().iter().copied()).collect())
            .collect();
        let n = flat.len();
        Matrix::from_fn(n, n, |i, j| {
            let dot = crate::tensor::dot(&flat[i], &flat[j]);
            let ni = crate::tensor::dot(&flat[i], &flat[i]).sqrt();
            let nj = crate::tensor::dot(&flat[j], &flat[j]).sqrt();
            dot / (ni * nj)
        })
    }

    /// SHA-256 over every teacher parameter and delta.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, _, m) in self.base.named_params() {
            h.update(name.as_bytes());
            hash_matrix(&mut h, m);
        }
        for (layer, m) in &self.shared {
            h.update(layer.as_bytes());
            hash_matrix(&mut h, m);
        }
        for (l, layers) in &self.specific {
            for (layer, m) in layers {
                h.update(l.as_bytes());
                h.update(layer.as_bytes());
                hash_matrix(&mut h, m);
            }
        }
        h.update(self.noise_std.to_le_bytes());
        hex::encode(h.finalize())
    }
}

pub(crate) fn hash_matrix(h: &mut Sha256, m: &Matrix) {
    h.update((m.rows() as u64).to_le_bytes());
    h.update((m.cols() as u64).to_le_bytes());
    for v in m.data() {
        h.update(v.to_bits().to_le_bytes());
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Matrix,
    pub y: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub per_language: BTreeMap<String, Vec<Sample>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.per_language.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn samples(&self, l: &str) -> Result<&[Sample]> {
        self.per_language
            .get(l)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Key(format!("dataset has no language '{l}'")))
    }
}

/// Generates `counts[l]` samples per language. Every language draws from its
/// own `(seed, split, language)` stream.
pub fn sample_dataset(
    teacher: &TeacherSpec,
    counts: &BTreeMap<String, usize>,
    inputs: &InputDistribution,
    split: Split,
    seq_len: usize,
    seed: u64,
) -> Result<Dataset> {
    let mut per_language = BTreeMap::new();
    for (l, &n) in counts {
        let mut rng = Rng::stream(seed, &format!("{}.{l}", split.name()));
        let xs: Vec<Matrix> = (0..n).map(|_| inputs.sample(seq_len, &mut rng)).collect();
        let mut samples = Vec::with_capacity(n);
        for chunk in xs.chunks(64) {
            let refs: Vec<&Matrix> = chunk.iter().collect();
            let ys = teacher.forward(&refs, l)?;
            for (i, x) in chunk.iter().enumerate() {
                let y = ys.row(i).iter().map(|v| v + teacher.noise_std * rng.normal()).collect();
                samples.push(Sample { x: x.clone(), y });
            }
        }
        per_language.insert(l.clone(), samples);
    }
    Ok(Dataset { split, per_language })
}

fn sample_digest(s: &Sample) -> [u8; 32] {
    let mut h = Sha256::new();
    hash_matrix(&mut h, &s.x);
    for v in &s.y {
        h.update(v.to_bits().to_le_bytes());
    }
    h.finalize().into()
}

/// Fails if any `(x, y)` pair occurs in both datasets.
pub fn check_disjoint(a: &Dataset, b: &Dataset) -> Result<()> {
    let seen: HashSet<[u8; 32]> = a.per_language.values().flatten().map(sample_digest).collect();
    for (l, samples) in &b.per_language {
        if samples.iter().any(|s| seen.contains(&sample_digest(s))) {
            return Err(Error::Invariant(format!("train/eval overlap in language '{l}'")));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub normalized_error: f64,
}

/// Mean squared error of `model` on `samples`, evaluated in batches.
pub fn mse_on(model: &Model, samples: &[Sample], l: &str, chunk_len: Option<usize>) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Contract(format!("eval split for '{l}' is empty")));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in samples.chunks(64) {
        let refs: Vec<&Matrix> = chunk.iter().map(|s| &s.x).collect();
        let pred = model.predict(&refs, l, chunk_len)?;
        for (i, s) in chunk.iter().enumerate() {
            for (p, y) in pred.row(i).iter().zip(&s.y) {
                total += (p - y) * (p - y);
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// `mse` and `mse / base_mse`, where `base_mse` is the un-adapted model's.
pub fn eval_metrics(
    model: &Model,
    dataset: &Dataset,
    l: &str,
    chunk_len: Option<usize>,
    base_mse: f64,
) -> Result<Metrics> {
    let mse = mse_on(model, dataset.samples(l)?, l, chunk_len)?;
    if base_mse <= 0.0 {
        return Err(Error::Contract(format!("reference error for '{l}' is zero")));
    }
    Ok(Metrics {
        mse,
        normalized_error: mse / base_mse,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub teacher_hash: String,
    pub split: Split,
    pub counts: BTreeMap<String, usize>,
    pub config_hash: String,
}

#[derive(Serialize)]
struct Record<'a> {
    x: &'a Matrix,
    y: &'a [f64],
}

/// One JSON-lines file per language (`<split>.<lang>.jsonl`) plus a manifest.
pub fn export_dataset(dir: &Path, dataset: &Dataset, manifest: &DatasetManifest) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (l, samples) in &dataset.per_language {
        let path = dir.join(format!("{}.{l}.jsonl", dataset.split.name()));
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for s in samples {
            serde_json::to_writer(&mut w, &Record { x: &s.x, y: &s.y })?;
            w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join(format!("{}.manifest.json", dataset.split.name()));
    let text = serde_json::to_string_pretty(manifest)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::LoraConfig;
    use crate::router::default_similarity;

    fn tiny_cfg(langs: &[&str]) -> ModelConfig {
        let mut lora = LoraConfig::new(4, 8.0, 8, 8);
        lora.top_k = 1;
        ModelConfig {
            d_model: 8,
            d_ffn: 8,
            depth: 1,
            seq_len: 4,
            stack_factor: 2,
            target_dim: 3,
            chunk_lengths: vec![2, 4],
            languages: langs.iter().map(|s| s.to_string()).collect(),
            source_languages: vec!["src".into()],
            d_lid: 4,
            lora,
        }
    }

    #[test]
    fn default_long_tail() {
        let counts = long_tail_sizes(&LongTailProfile::default(), &default_tiers()).unwrap();
        assert_eq!(counts["de"], 2000);
        assert_eq!(counts["it"], 500);
        assert_eq!(counts["ja"], 2);
        assert_eq!(counts.values().sum::<usize>(), 4 * 2000 + 4 * 500 + 4 * 2);
        let flat = LongTailProfile { high: 7, mid: 7, low: 7 };
        assert!(long_tail_sizes(&flat, &default_tiers()).unwrap().values().all(|&n| n == 7));
        let bad = LongTailProfile { high: 1, mid: 1, low: 0 };
        assert!(long_tail_sizes(&bad, &default_tiers()).is_err());
    }

    #[test]
    fn default_similarity_is_reproduced() {
        let (langs, sim) = default_similarity();
        let mut cfg = ModelConfig::default();
        cfg.depth = 1;
        let t = make_teachers(&cfg, &sim, &langs, &TeacherParams::default(), 0).unwrap();
        let cos = t.delta_cosines();
        assert!(cos.max_abs_diff(&sim) < 1e-9);
        let ja = langs.iter().position(|l| l == "ja").unwrap();
        let ko = langs.iter().position(|l| l == "ko").unwrap();
        assert!((cos.get(ja, ko) - 0.41).abs() < 0.05);
        for i in 0..12 {
            assert!((cos.get(i, i) - 1.0).abs() < 1e-12);
            for j in 0..12 {
                assert_eq!(cos.get(i, j), cos.get(j, i));
            }
        }
    }

    #[test]
    fn identity_similarity_gives_orthogonal_deltas() {
        let langs: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let cfg = tiny_cfg(&["a", "b", "c"]);
        let t = make_teachers(&cfg, &Matrix::identity(3), &langs, &TeacherParams::default(), 1).unwrap();
        let cos = t.delta_cosines();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!(cos.get(i, j).abs() < 0.05);
                }
            }
        }
    }

    #[test]
    fn rank_limits() {
        let langs: Vec<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        let cfg = tiny_cfg(&["a", "b"]);
        let t = make_teachers(&cfg, &Matrix::identity(2), &langs, &TeacherParams::default(), 1).unwrap();
        let d = t.delta("a", "enc.0.q").unwrap();
        let svd = nalgebra::DMatrix::from_row_slice(8, 8, d.data()).svd(false, false);
        let big = svd.singular_values.iter().filter(|s| **s > 1e-9).count();
        assert!(big <= 4);
        let too_many = TeacherParams { teacher_rank: 1, ..TeacherParams::default() };
        assert!(matches!(
            make_teachers(&cfg, &Matrix::identity(2), &langs, &too_many, 1),
            Err(Error::Config(_))
        ));
        let mut bad = Matrix::identity(2);
        bad.set(0, 1, 2.0);
        bad.set(1, 0, 2.0);
        assert!(matches!(
            make_teachers(&cfg, &bad, &langs, &TeacherParams::default(), 1),
            Err(Error::Structure(_))
        ));
    }

    #[test]
    fn no_spec_means_one_teacher() {
        let langs: Vec<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        let cfg = tiny_cfg(&["a", "b"]);
        let p = TeacherParams { c_spec: 0.0, ..TeacherParams::default() };
        let t = make_teachers(&cfg, &Matrix::identity(2), &langs, &p, 3).unwrap();
        let x = Rng::seed(0).normal_matrix(4, 8, 1.0);
        let ya = t.model("a").predict(&[&x], "src", None).unwrap();
        let yb = t.model("b").predict(&[&x], "src", None).unwrap();
        assert!(ya.bit_eq(&yb));
    }

    #[test]
    fn datasets_are_deterministic_and_disjoint() {
        let langs: Vec<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        let cfg = tiny_cfg(&["a", "b"]);
        let t = make_teachers(&cfg, &Matrix::identity(2), &langs, &TeacherParams::default(), 3).unwrap();
        let hash = t.hash();
        let inputs = InputDistribution::standard(8, 1.0, 3);
        let counts: BTreeMap<String, usize> = [("a".to_string(), 5), ("b".to_string(), 3)].into();
        let tr = sample_dataset(&t, &counts, &inputs, Split::Train, 4, 9).unwrap();
        let tr2 = sample_dataset(&t, &counts, &inputs, Split::Train, 4, 9).unwrap();
        let ev = sample_dataset(&t, &counts, &inputs, Split::Eval, 4, 9).unwrap();
        assert_eq!(tr, tr2);
        assert_eq!(tr.len(), 8);
        check_disjoint(&tr, &ev).unwrap();
        assert!(check_disjoint(&tr, &tr2).is_err());
        assert_eq!(hash, t.hash());
    }

    #[test]
    fn teacher_is_a_perfect_student() {
        let langs: Vec<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        let cfg = tiny_cfg(&["a", "b"]);
        let p = TeacherParams { noise_rel: 0.0, ..TeacherParams::default() };
        let t = make_teachers(&cfg, &Matrix::identity(2), &langs, &p, 3).unwrap();
        let counts: BTreeMap<String, usize> = [("a".to_string(), 6)].into();
        let inputs = InputDistribution::standard(8, 1.0, 3);
        let ev = sample_dataset(&t, &counts, &inputs, Split::Eval, 4, 2).unwrap();
        // The teacher's prompts are zero for every language, so its own
        // forward under "a" reproduces the targets.
        let mse = mse_on(t.model("a"), ev.samples("a").unwrap(), "a", None).unwrap();
        assert!(mse < 1e-24);
        let base = mse_on(&t.base, ev.samples("a").unwrap(), "a", None).unwrap();
        let m = eval_metrics(&t.base, &ev, "a", None, base).unwrap();
        assert!((m.normalized_error - 1.0).abs() < 1e-12);
        assert!(matches!(eval_metrics(&t.base, &ev, "a", None, 0.0), Err(Error::Contract(_))));
        let empty = Dataset { split: Split::Eval, per_language: [("a".to_string(), vec![])].into() };
        assert!(matches!(eval_metrics(&t.base, &empty, "a", None, 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn normalized_error_ignores_target_scale() {
        let langs: Vec<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        let cfg = tiny_cfg(&["a", "b"]);
        let t = make_teachers(&cfg, &Matrix::identity(2), &langs, &TeacherParams::default(), 5).unwrap();
        let counts: BTreeMap<String, usize> = [("a".to_string(), 6)].into();
        let inputs = InputDistribution::standard(8, 1.0, 5);
        let ev = sample_dataset(&t, &counts, &inputs, Split::Eval, 4, 2).unwrap();
        let base = Model::init_base(&cfg, 11, 12).unwrap();
        let mut student = base.clone();
        for v in student.projector.out.data_mut() {
            *v *= 0.9;
        }
        let ne = |s: &Model, b: &Model, d: &Dataset| {
            let bm = mse_on(b, d.samples("a").unwrap(), "a", None).unwrap();
            eval_metrics(s, d, "a", None, bm).unwrap().normalized_error
        };
        let before = ne(&student, &base, &ev);
        let c = 3.5;
        let mut scaled = ev.clone();
        for s in scaled.per_language.get_mut("a").unwrap() {
            s.y.iter_mut().for_each(|v| *v *= c);
        }
        // Rescale the output layer of both networks by the same constant.
        let rescale = |m: &Model| {
            let mut m = m.clone();
            m.head.weight = m.head.weight.scale(c);
            if let Some(slot) = &mut m.head.slot {
                if let Some(b) = &mut slot.bank.b_shared {
                    *b = b.scale(c);
                }
            }
            m
        };
        let after = ne(&rescale(&student), &rescale(&base), &scaled);
        assert!((before - after).abs() < 1e-12 * before.max(1.0));
    }
}
