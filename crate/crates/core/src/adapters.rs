//! Low-rank adapter variants as parameterizations of a layer update `ΔW`.
//!
//! All variants scale by `α/r` when the delta is built; stored factors are
//! never pre-scaled. Zipper variants share one down-projection `A` and
//! compose the up-projection rank-wise from a shared bank and a
//! per-language bank.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::graph::ParamGraph;
use crate::rng::Rng;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    Vanilla,
    Independent,
    #[serde(rename = "FlyLoRA")]
    FlyLora,
    ZipperStatic,
    ZipperHard,
    ZipperSoft,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Vanilla,
        Variant::Independent,
        Variant::FlyLora,
        Variant::ZipperStatic,
        Variant::ZipperHard,
        Variant::ZipperSoft,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Vanilla => "Vanilla",
            Variant::Independent => "Independent",
            Variant::FlyLora => "FlyLoRA",
            Variant::ZipperStatic => "ZipperStatic",
            Variant::ZipperHard => "ZipperHard",
            Variant::ZipperSoft => "ZipperSoft",
        }
    }

    /// Hard and Soft take their rank mixing from a router.
    pub fn is_routed(self) -> bool {
        matches!(self, Variant::ZipperHard | Variant::ZipperSoft)
    }

    pub fn has_language_banks(self) -> bool {
        matches!(
            self,
            Variant::Independent | Variant::ZipperStatic | Variant::ZipperHard | Variant::ZipperSoft
        )
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}'")))
    }
}

/// Which bank a hard-mask value of 1 selects.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HardPolarity {
    /// `s_i = 1` takes the language-specific column (agrees with Soft's `p`).
    #[default]
    SpecOnOne,
    /// `s_i = 1` takes the shared column.
    SharedOnOne,
}

impl FromStr for HardPolarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spec_on_one" => Ok(HardPolarity::SpecOnOne),
            "shared_on_one" => Ok(HardPolarity::SharedOnOne),
            _ => Err(Error::Config(format!("unknown hard polarity '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub d_in: usize,
    pub d_out: usize,
    /// Hard-mask threshold.
    pub tau: f64,
    /// FlyLoRA active components.
    pub top_k: usize,
    /// Static split: shared ranks.
    pub r_shared: usize,
    /// Static split: language-specific ranks.
    pub r_spec: usize,
    /// Fraction of nonzeros per row of FlyLoRA's frozen `A`.
    pub fly_density: f64,
    pub hard_polarity: HardPolarity,
}

impl Default for LoraConfig {
    /// Desk-scale default: `r = 8`, `α = 16`, 32×32 layers, top-2 FlyLoRA.
    fn default() -> Self {
        let mut cfg = LoraConfig::new(8, 16.0, 32, 32);
        cfg.top_k = 2;
        cfg
    }
}

impl LoraConfig {
    /// Square layer with an even Static split, `τ = 0.5`, `k = ⌈r/4⌉`.
    pub fn new(rank: usize, alpha: f64, d_in: usize, d_out: usize) -> Self {
        LoraConfig {
            rank,
            alpha,
            d_in,
            d_out,
            tau: 0.5,
            top_k: rank.div_ceil(4),
            r_shared: rank / 2,
            r_spec: rank - rank / 2,
            fly_density: 0.1,
            hard_polarity: HardPolarity::SpecOnOne,
        }
    }

    pub fn with_dims(&self, d_in: usize, d_out: usize) -> Self {
        LoraConfig {
            d_in,
            d_out,
            ..self.clone()
        }
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.rank == 0 {
            problems.push("rank must be >= 1".to_string());
        }
        if self.d_in == 0 || self.d_out == 0 {
            problems.push("d_in and d_out must be >= 1".to_string());
        }
        if !(self.alpha > 0.0) {
            problems.push(format!("alpha must be positive, got {}", self.alpha));
        }
        if self.top_k == 0 || self.top_k > self.rank {
            problems.push(format!("top_k must be in 1..={}, got {}", self.rank, self.top_k));
        }
        if self.r_shared + self.r_spec != self.rank {
            problems.push(format!(
                "r_shared + r_spec = {} must equal rank {}",
                self.r_shared + self.r_spec,
                self.rank
            ));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            problems.push(format!("tau must lie in (0,1), got {}", self.tau));
        }
        if !(self.fly_density > 0.0 && self.fly_density <= 1.0) {
            problems.push(format!("fly_density must lie in (0,1], got {}", self.fly_density));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Per-layer adapter parameters. Only the fields a variant uses are populated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterBank {
    pub variant: Variant,
    #[serde(rename = "A")]
    pub a: Option<Matrix>,
    /// Up-projection for Vanilla and FlyLoRA; the shared bank for Zipper.
    #[serde(rename = "B_shared")]
    pub b_shared: Option<Matrix>,
    #[serde(rename = "B_spec")]
    pub b_spec: BTreeMap<String, Matrix>,
    #[serde(rename = "A_spec")]
    pub a_spec: BTreeMap<String, Matrix>,
    /// FlyLoRA routing bias, `1×r`.
    pub fly_bias: Option<Matrix>,
    pub config: LoraConfig,
}

/// `ΔW^(l)` together with the mixing vector that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct MergedDelta {
    pub delta: Matrix,
    pub language: String,
    pub mixing: Option<Vec<f64>>,
}

impl AdapterBank {
    /// Fresh bank: Gaussian `A` with std `1/√d_in`, zero up-projections.
    pub fn init(variant: Variant, cfg: &LoraConfig, languages: &[String], rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (r, d_in, d_out) = (cfg.rank, cfg.d_in, cfg.d_out);
        let std = 1.0 / (d_in as f64).sqrt();
        let per_lang = |cols: usize| -> BTreeMap<String, Matrix> {
            languages
                .iter()
                .map(|l| (l.clone(), Matrix::zeros(d_out, cols)))
                .collect()
        };
        let mut bank = AdapterBank {
            variant,
            a: None,
            b_shared: None,
            b_spec: BTreeMap::new(),
            a_spec: BTreeMap::new(),
            fly_bias: None,
            config: cfg.clone(),
        };
        match variant {
            Variant::Vanilla => {
                bank.a = Some(rng.normal_matrix(r, d_in, std));
                bank.b_shared = Some(Matrix::zeros(d_out, r));
            }
            Variant::Independent => {
                bank.a_spec = languages
                    .iter()
                    .map(|l| (l.clone(), rng.normal_matrix(r, d_in, std)))
                    .collect();
                bank.b_spec = per_lang(r);
            }
            Variant::FlyLora => {
                bank.a = Some(sparse_frozen_a(r, d_in, cfg.fly_density, rng));
                bank.b_shared = Some(Matrix::zeros(d_out, r));
                bank.fly_bias = Some(Matrix::zeros(1, r));
            }
            Variant::ZipperStatic => {
                bank.a = Some(rng.normal_matrix(r, d_in, std));
                bank.b_shared = Some(Matrix::zeros(d_out, cfg.r_shared));
                bank.b_spec = per_lang(cfg.r_spec);
            }
            Variant::ZipperHard | Variant::ZipperSoft => {
                bank.a = Some(rng.normal_matrix(r, d_in, std));
                bank.b_shared = Some(Matrix::zeros(d_out, r));
                bank.b_spec = per_lang(r);
            }
        }
        Ok(bank)
    }

    /// Checks that exactly the variant's fields are present with consistent shapes.
    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        let (r, d_in, d_out) = (cfg.rank, cfg.d_in, cfg.d_out);
        let expect = |name: &str, m: &Option<Matrix>, shape: Option<(usize, usize)>| -> Result<()> {
            match (m, shape) {
                (Some(m), Some(s)) if m.shape() == s => Ok(()),
                (None, None) => Ok(()),
                (Some(m), Some(s)) => Err(Error::Contract(format!(
                    "{}: {name} has shape {:?}, expected {s:?}",
                    self.variant,
                    m.shape()
                ))),
                (Some(_), None) => Err(Error::Contract(format!("{}: unexpected {name}", self.variant))),
                (None, Some(_)) => Err(Error::Contract(format!("{}: missing {name}", self.variant))),
            }
        };
        let (a, b, spec_cols, a_spec, fly) = match self.variant {
            Variant::Vanilla => (Some((r, d_in)), Some((d_out, r)), None, false, false),
            Variant::Independent => (None, None, Some(r), true, false),
            Variant::FlyLora => (Some((r, d_in)), Some((d_out, r)), None, false, true),
            Variant::ZipperStatic => (Some((r, d_in)), Some((d_out, cfg.r_shared)), Some(cfg.r_spec), false, false),
            Variant::ZipperHard | Variant::ZipperSoft => (Some((r, d_in)), Some((d_out, r)), Some(r), false, false),
        };
        expect("A", &self.a, a)?;
        expect("B_shared", &self.b_shared, b)?;
        expect("fly_bias", &self.fly_bias, fly.then_some((1, r)))?;
        match spec_cols {
            Some(c) => {
                for (l, m) in &self.b_spec {
                    if m.shape() != (d_out, c) {
                        return Err(Error::Contract(format!("B_spec[{l}] has shape {:?}", m.shape())));
                    }
                }
            }
            None if !self.b_spec.is_empty() => {
                return Err(Error::Contract(format!("{}: unexpected B_spec", self.variant)))
            }
            None => {}
        }
        if a_spec {
            if self.a_spec.keys().ne(self.b_spec.keys()) {
                return Err(Error::Contract("A_spec and B_spec language sets differ".into()));
            }
            for (l, m) in &self.a_spec {
                if m.shape() != (r, d_in) {
                    return Err(Error::Contract(format!("A_spec[{l}] has shape {:?}", m.shape())));
                }
            }
        } else if !self.a_spec.is_empty() {
            return Err(Error::Contract(format!("{}: unexpected A_spec", self.variant)));
        }
        Ok(())
    }

    pub fn languages(&self) -> Vec<String> {
        self.b_spec.keys().cloned().collect()
    }

    fn need<'m>(&self, m: &'m Option<Matrix>, name: &str) -> Result<&'m Matrix> {
        m.as_ref()
            .ok_or_else(|| Error::Contract(format!("{} bank has no {name}", self.variant)))
    }

    pub fn b_spec_for(&self, l: &str) -> Result<&Matrix> {
        self.b_spec
            .get(l)
            .ok_or_else(|| Error::Key(format!("language '{l}' has no specific bank")))
    }

    /// Named parameter matrices, suffixes relative to the bank.
    pub fn named(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        if let Some(a) = &self.a {
            out.push(("A".to_string(), a));
        }
        if let Some(b) = &self.b_shared {
            out.push(("B_shared".to_string(), b));
        }
        for (l, m) in &self.b_spec {
            out.push((format!("B_spec.{l}"), m));
        }
        for (l, m) in &self.a_spec {
            out.push((format!("A_spec.{l}"), m));
        }
        if let Some(d) = &self.fly_bias {
            out.push(("fly_bias".to_string(), d));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        if let Some(a) = &mut self.a {
            out.push(("A".to_string(), a));
        }
        if let Some(b) = &mut self.b_shared {
            out.push(("B_shared".to_string(), b));
        }
        for (l, m) in &mut self.b_spec {
            out.push((format!("B_spec.{l}"), m));
        }
        for (l, m) in &mut self.a_spec {
            out.push((format!("A_spec.{l}"), m));
        }
        if let Some(d) = &mut self.fly_bias {
            out.push(("fly_bias".to_string(), d));
        }
        out
    }

    /// Whether the optimizer may touch `suffix`. FlyLoRA's `A` is frozen and its
    /// bias moves by the load-balancing rule, not by gradient.
    pub fn is_gradient_param(&self, suffix: &str) -> bool {
        !(self.variant == Variant::FlyLora && (suffix == "A" || suffix == "fly_bias"))
    }

    pub fn zero_up_projections(&mut self) {
        if let Some(b) = &mut self.b_shared {
            *b = Matrix::zeros(b.rows(), b.cols());
        }
        for b in self.b_spec.values_mut() {
            *b = Matrix::zeros(b.rows(), b.cols());
        }
    }
}

/// Frozen sparse down-projection: `⌈density·d_in⌉` nonzeros per row at random
/// positions, each `±1/√nnz`.
pub fn sparse_frozen_a(rank: usize, d_in: usize, density: f64, rng: &mut Rng) -> Matrix {
    let nnz = ((density * d_in as f64).ceil() as usize).clamp(1, d_in);
    let v = 1.0 / (nnz as f64).sqrt();
    let mut a = Matrix::zeros(rank, d_in);
    for r in 0..rank {
        for c in rng.choose_distinct(d_in, nnz) {
            a.set(r, c, if rng.coin() { v } else { -v });
        }
    }
    a
}

fn check_variant(bank: &AdapterBank, want: &[Variant]) -> Result<()> {
    if want.contains(&bank.variant) {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "operation expects {:?}, bank is {}",
            want, bank.variant
        )))
    }
}

/// `ΔW = (α/r)·B·A`, shared by every language.
pub fn vanilla_delta(bank: &AdapterBank, cfg: &LoraConfig) -> Result<MergedDelta> {
    check_variant(bank, &[Variant::Vanilla])?;
    let a = bank.need(&bank.a, "A")?;
    let b = bank.need(&bank.b_shared, "B_shared")?;
    Ok(MergedDelta {
        delta: b.matmul(a)?.scale(cfg.scaling()),
        language: String::new(),
        mixing: None,
    })
}

/// `ΔW^(l) = (α/r)·B^(l)·A^(l)`.
pub fn independent_delta(bank: &AdapterBank, cfg: &LoraConfig, l: &str) -> Result<MergedDelta> {
    check_variant(bank, &[Variant::Independent])?;
    let b = bank.b_spec_for(l)?;
    let a = bank
        .a_spec
        .get(l)
        .ok_or_else(|| Error::Key(format!("language '{l}' has no down-projection")))?;
    Ok(MergedDelta {
        delta: b.matmul(a)?.scale(cfg.scaling()),
        language: l.to_string(),
        mixing: None,
    })
}

/// Indices of the `k` largest scores, ties broken toward the lower index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// FlyLoRA routing scores `y = A·x + d` for one input column.
pub fn fly_scores(bank: &AdapterBank, x: &[f64]) -> Result<Vec<f64>> {
    let a = bank.need(&bank.a, "A")?;
    if x.len() != a.cols() {
        return Err(Error::shape("flylora_delta", a.shape(), (x.len(), 1)));
    }
    let d = bank.need(&bank.fly_bias, "fly_bias")?;
    Ok((0..a.rows())
        .map(|i| crate::tensor::dot(a.row(i), x) + d.data()[i])
        .collect())
}

/// `ΔW = (α/r)·Σ_{i ∈ topk(Ax+d)} b_i a_iᵀ` for a single input column `x`.
pub fn flylora_delta(bank: &AdapterBank, cfg: &LoraConfig, x: &[f64]) -> Result<MergedDelta> {
    check_variant(bank, &[Variant::FlyLora])?;
    if cfg.top_k == 0 || cfg.top_k > cfg.rank {
        return Err(Error::Config(format!("top_k {} must be in 1..={}", cfg.top_k, cfg.rank)));
    }
    let a = bank.need(&bank.a, "A")?;
    let b = bank.need(&bank.b_shared, "B_shared")?;
    let scores = fly_scores(bank, x)?;
    let active = top_k_indices(&scores, cfg.top_k);
    let mask: Vec<f64> = (0..cfg.rank)
        .map(|i| if active.contains(&i) { 1.0 } else { 0.0 })
        .collect();
    let delta = b.diag_scale_cols(&mask)?.matmul(a)?.scale(cfg.scaling());
    Ok(MergedDelta {
        delta,
        language: String::new(),
        mixing: Some(mask),
    })
}

/// `[B_shared, B_spec^(l)]`.
pub fn zipper_static_merge(bank: &AdapterBank, _cfg: &LoraConfig, l: &str) -> Result<Matrix> {
    check_variant(bank, &[Variant::ZipperStatic])?;
    let shared = bank.need(&bank.b_shared, "B_shared")?;
    shared.concat_cols(bank.b_spec_for(l)?)
}

/// `s_i = 1[p_i ≥ τ]`.
pub fn zipper_hard_mask(p: &[f64], tau: f64) -> Vec<f64> {
    p.iter().map(|&v| if v >= tau { 1.0 } else { 0.0 }).collect()
}

/// Rank-wise column selection between the two banks under a binary mask.
pub fn zip(b_shared: &Matrix, b_spec: &Matrix, s: &[f64], polarity: HardPolarity) -> Result<Matrix> {
    if b_shared.shape() != b_spec.shape() {
        return Err(Error::shape("zip", b_shared.shape(), b_spec.shape()));
    }
    if s.len() != b_shared.cols() {
        return Err(Error::shape("zip", b_shared.shape(), (1, s.len())));
    }
    Ok(Matrix::from_fn(b_shared.rows(), b_shared.cols(), |r, c| {
        let take_spec = match polarity {
            HardPolarity::SpecOnOne => s[c] == 1.0,
            HardPolarity::SharedOnOne => s[c] != 1.0,
        };
        if take_spec {
            b_spec.get(r, c)
        } else {
            b_shared.get(r, c)
        }
    }))
}

/// `B_shared·diag(1−p) + B_spec·diag(p)`.
pub fn zipper_soft_merge(b_shared: &Matrix, b_spec: &Matrix, p: &[f64]) -> Result<Matrix> {
    if b_shared.shape() != b_spec.shape() {
        return Err(Error::shape("zipper_soft_merge", b_shared.shape(), b_spec.shape()));
    }
    if p.len() != b_shared.cols() {
        return Err(Error::shape("zipper_soft_merge", b_shared.shape(), (1, p.len())));
    }
    let keep: Vec<f64> = p.iter().map(|v| 1.0 - v).collect();
    b_shared.diag_scale_cols(&keep)?.add(&b_spec.diag_scale_cols(p)?)
}

/// `(α/r)·B_merged·A`.
pub fn zipper_delta(b_merged: &Matrix, a: &Matrix, cfg: &LoraConfig) -> Result<Matrix> {
    Ok(b_merged.matmul(a)?.scale(cfg.scaling()))
}

/// `ΔW^(l)` for every non-FlyLoRA variant; `router_p` is required exactly for Hard/Soft.
pub fn merged_delta(bank: &AdapterBank, l: &str, router_p: Option<&[f64]>) -> Result<MergedDelta> {
    let cfg = &bank.config;
    check_router_arg(bank.variant, router_p.is_some())?;
    match bank.variant {
        Variant::Vanilla => vanilla_delta(bank, cfg).map(|d| MergedDelta {
            language: l.to_string(),
            ..d
        }),
        Variant::Independent => independent_delta(bank, cfg, l),
        Variant::FlyLora => Err(Error::Contract(
            "FlyLoRA deltas depend on the input; use flylora_delta".into(),
        )),
        Variant::ZipperStatic => {
            let merged = zipper_static_merge(bank, cfg, l)?;
            Ok(MergedDelta {
                delta: zipper_delta(&merged, bank.need(&bank.a, "A")?, cfg)?,
                language: l.to_string(),
                mixing: None,
            })
        }
        Variant::ZipperHard | Variant::ZipperSoft => {
            let p = router_p.expect("checked above");
            let shared = bank.need(&bank.b_shared, "B_shared")?;
            let spec = bank.b_spec_for(l)?;
            let (merged, mix) = if bank.variant == Variant::ZipperHard {
                let s = zipper_hard_mask(p, cfg.tau);
                (zip(shared, spec, &s, cfg.hard_polarity)?, s)
            } else {
                (zipper_soft_merge(shared, spec, p)?, p.to_vec())
            };
            Ok(MergedDelta {
                delta: zipper_delta(&merged, bank.need(&bank.a, "A")?, cfg)?,
                language: l.to_string(),
                mixing: Some(mix),
            })
        }
    }
}

fn check_router_arg(variant: Variant, given: bool) -> Result<()> {
    match (variant.is_routed(), given) {
        (true, false) => Err(Error::Contract(format!("{variant} requires router_p"))),
        (false, true) => Err(Error::Contract(format!("{variant} does not accept router_p"))),
        _ => Ok(()),
    }
}

/// `W0·x + ΔW^(l)·x` for input columns `x` (`d_in × n`).
pub fn adapted_forward(
    w0: &Matrix,
    bank: &AdapterBank,
    l: &str,
    x: &Matrix,
    router_p: Option<&[f64]>,
) -> Result<Matrix> {
    let cfg = &bank.config;
    if w0.shape() != (cfg.d_out, cfg.d_in) {
        return Err(Error::shape("adapted_forward", w0.shape(), (cfg.d_out, cfg.d_in)));
    }
    if bank.variant.has_language_banks() && !bank.b_spec.contains_key(l) {
        return Err(Error::Key(format!("language '{l}' has no specific bank")));
    }
    let base = w0.matmul(x)?;
    if bank.variant == Variant::FlyLora {
        check_router_arg(bank.variant, router_p.is_some())?;
        let mut out = base;
        for c in 0..x.cols() {
            let col = x.col(c);
            let d = flylora_delta(bank, cfg, &col)?;
            let dx = d.delta.matmul(&Matrix::col_vector(&col))?;
            for r in 0..out.rows() {
                out.set(r, c, out.get(r, c) + dx.get(r, 0));
            }
        }
        return Ok(out);
    }
    let d = merged_delta(bank, l, router_p)?;
    base.add(&d.delta.matmul(x)?)
}

/// Trainable parameter count for one adapted layer. `router_dims` is `d_lid`
/// for the routed variants.
pub fn count_trainable_params(variant: Variant, cfg: &LoraConfig, languages: usize, router_dims: usize) -> usize {
    let (r, d_in, d_out, l) = (cfg.rank, cfg.d_in, cfg.d_out, languages);
    match variant {
        Variant::Vanilla => r * d_in + d_out * r,
        Variant::Independent => l * (r * d_in + d_out * r),
        Variant::FlyLora => d_out * r + r,
        Variant::ZipperStatic => r * d_in + d_out * cfg.r_shared + l * d_out * cfg.r_spec,
        Variant::ZipperHard | Variant::ZipperSoft => {
            r * d_in + d_out * r + l * d_out * r + router_param_count(r, router_dims)
        }
    }
}

/// `W_r`, `b_r` and the LayerNorm affine pair.
pub fn router_param_count(rank: usize, d_lid: usize) -> usize {
    rank * d_lid + rank + 2 * d_lid
}

// ---------------------------------------------------------------------------
// Tape-side construction

/// Scaled `ΔW^(l)` as a tape variable for every variant except FlyLoRA.
///
/// `prefix` names the bank's parameters in `graph`; `router_p` is the `1×r`
/// router output for Hard/Soft.
pub fn delta_var(
    graph: &mut ParamGraph<'_>,
    prefix: &str,
    bank: &AdapterBank,
    l: &str,
    router_p: Option<Var>,
) -> Result<Var> {
    let cfg = &bank.config;
    check_router_arg(bank.variant, router_p.is_some())?;
    let name = |s: &str| format!("{prefix}.{s}");
    let (b, a) = match bank.variant {
        Variant::Vanilla => {
            let b = graph.bind(&name("B_shared"), bank.need(&bank.b_shared, "B_shared")?);
            let a = graph.bind(&name("A"), bank.need(&bank.a, "A")?);
            (b, a)
        }
        Variant::Independent => {
            let b = graph.bind(&name(&format!("B_spec.{l}")), bank.b_spec_for(l)?);
            let a_l = bank
                .a_spec
                .get(l)
                .ok_or_else(|| Error::Key(format!("language '{l}' has no down-projection")))?;
            let a = graph.bind(&name(&format!("A_spec.{l}")), a_l);
            (b, a)
        }
        Variant::FlyLora => {
            return Err(Error::Contract("FlyLoRA is applied per input; use fly_apply_rows".into()))
        }
        Variant::ZipperStatic => {
            let sh = graph.bind(&name("B_shared"), bank.need(&bank.b_shared, "B_shared")?);
            let sp = graph.bind(&name(&format!("B_spec.{l}")), bank.b_spec_for(l)?);
            let b = graph.tape.concat_cols(sh, sp)?;
            (b, graph.bind(&name("A"), bank.need(&bank.a, "A")?))
        }
        Variant::ZipperHard | Variant::ZipperSoft => {
            let p = router_p.expect("checked above");
            let sh = graph.bind(&name("B_shared"), bank.need(&bank.b_shared, "B_shared")?);
            let sp = graph.bind(&name(&format!("B_spec.{l}")), bank.b_spec_for(l)?);
            let mix = if bank.variant == Variant::ZipperHard {
                graph.tape.ste_threshold(p, cfg.tau)
            } else {
                p
            };
            let b = soft_merge_var(graph, sh, sp, mix, bank.variant, cfg.hard_polarity)?;
            (b, graph.bind(&name("A"), bank.need(&bank.a, "A")?))
        }
    };
    let ba = graph.tape.matmul(b, a)?;
    Ok(graph.tape.scale(ba, cfg.scaling()))
}

fn soft_merge_var(
    graph: &mut ParamGraph<'_>,
    shared: Var,
    spec: Var,
    mix: Var,
    variant: Variant,
    polarity: HardPolarity,
) -> Result<Var> {
    let rest = graph.tape.one_minus(mix);
    let (w_shared, w_spec) = if variant == Variant::ZipperHard && polarity == HardPolarity::SharedOnOne {
        (mix, rest)
    } else {
        (rest, mix)
    };
    let a = graph.tape.diag_scale_cols(shared, w_shared)?;
    let b = graph.tape.diag_scale_cols(spec, w_spec)?;
    graph.tape.add(a, b)
}

/// Row-convention FlyLoRA: `h` is `N×d_in`, result `N×d_out` (adapter part only).
///
/// Each row gets its own top-k selection from `h·Aᵀ + d`. Also returns the
/// per-row selection masks for load accounting.
pub fn fly_apply_rows(
    graph: &mut ParamGraph<'_>,
    prefix: &str,
    bank: &AdapterBank,
    h: Var,
) -> Result<(Var, Matrix)> {
    check_variant(bank, &[Variant::FlyLora])?;
    let cfg = &bank.config;
    let a = graph.bind(&format!("{prefix}.A"), bank.need(&bank.a, "A")?);
    let b = graph.bind(&format!("{prefix}.B_shared"), bank.need(&bank.b_shared, "B_shared")?);
    let ha = graph.tape.matmul_t(h, a)?;
    let bias = bank.need(&bank.fly_bias, "fly_bias")?.data();
    let hv = graph.value(ha);
    let mut mask = Matrix::zeros(hv.rows(), hv.cols());
    for r in 0..hv.rows() {
        let scores: Vec<f64> = hv.row(r).iter().zip(bias).map(|(y, d)| y + d).collect();
        for i in top_k_indices(&scores, cfg.top_k) {
            mask.set(r, i, 1.0);
        }
    }
    let m = graph.constant(mask.clone());
    let gated = graph.tape.hadamard(ha, m)?;
    let out = graph.tape.matmul_t(gated, b)?;
    Ok((graph.tape.scale(out, cfg.scaling()), mask))
}

/// Aux-loss-free balancing: nudge `d_i` up for under-used ranks and down for
/// over-used ones, given selection counts from a batch.
pub fn fly_balance_bias(bank: &mut AdapterBank, load: &[f64], step_size: f64) {
    let Some(d) = &mut bank.fly_bias else { return };
    let total: f64 = load.iter().sum();
    if total <= 0.0 {
        return;
    }
    let target = total / load.len() as f64;
    for (b, l) in d.data_mut().iter_mut().zip(load) {
        if *l < target {
            *b += step_size;
        } else if *l > target {
            *b -= step_size;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn langs(ls: &[&str]) -> Vec<String> {
        ls.iter().map(|s| s.to_string()).collect()
    }

    fn randomize(bank: &mut AdapterBank, rng: &mut Rng) {
        for (_, m) in bank.named_mut() {
            *m = rng.uniform_matrix(m.rows(), m.cols(), -1.0, 1.0);
        }
    }

    #[test]
    fn zero_b_gives_base_output() {
        let mut rng = Rng::seed(0);
        let cfg = LoraConfig::new(4, 8.0, 6, 5);
        let ls = langs(&["a", "b"]);
        let w0 = rng.uniform_matrix(5, 6, -1.0, 1.0);
        let x = rng.uniform_matrix(6, 3, -1.0, 1.0);
        for v in Variant::ALL {
            let bank = AdapterBank::init(v, &cfg, &ls, &mut rng).unwrap();
            let p = vec![0.7; 4];
            let rp = v.is_routed().then_some(p.as_slice());
            let y = adapted_forward(&w0, &bank, "a", &x, rp).unwrap();
            assert!(y.bit_eq(&w0.matmul(&x).unwrap()), "{v}");
        }
    }

    #[test]
    fn vanilla_hand_case() {
        let mut cfg = LoraConfig::new(1, 1.0, 2, 2);
        cfg.top_k = 1;
        cfg.r_shared = 1;
        cfg.r_spec = 0;
        let bank = AdapterBank {
            variant: Variant::Vanilla,
            a: Some(Matrix::from_rows(&[[1.0, 0.0]])),
            b_shared: Some(Matrix::from_rows(&[[1.0], [0.0]])),
            b_spec: BTreeMap::new(),
            a_spec: BTreeMap::new(),
            fly_bias: None,
            config: cfg,
        };
        bank.validate().unwrap();
        let x = Matrix::from_rows(&[[1.0], [1.0]]);
        let y = adapted_forward(&Matrix::zeros(2, 2), &bank, "any", &x, None).unwrap();
        assert_eq!(y, Matrix::from_rows(&[[1.0], [0.0]]));
    }

    #[test]
    fn vanilla_prefactor() {
        let mut cfg = LoraConfig::new(2, 4.0, 2, 2);
        cfg.top_k = 1;
        let b = Matrix::from_rows(&[[1.0, 2.0], [0.0, 1.0]]);
        let a = Matrix::from_rows(&[[1.0, 0.0], [1.0, 1.0]]);
        let bank = AdapterBank {
            variant: Variant::Vanilla,
            a: Some(a.clone()),
            b_shared: Some(b.clone()),
            b_spec: BTreeMap::new(),
            a_spec: BTreeMap::new(),
            fly_bias: None,
            config: cfg.clone(),
        };
        let d = vanilla_delta(&bank, &cfg).unwrap();
        assert_eq!(d.delta, b.matmul(&a).unwrap().scale(2.0));
        assert!(vanilla_delta(&AdapterBank { variant: Variant::ZipperSoft, ..bank }, &cfg).is_err());
    }

    #[test]
    fn router_argument_contract() {
        let mut rng = Rng::seed(1);
        let cfg = LoraConfig::new(4, 4.0, 3, 3);
        let ls = langs(&["a"]);
        let w0 = Matrix::zeros(3, 3);
        let x = Matrix::zeros(3, 1);
        let soft = AdapterBank::init(Variant::ZipperSoft, &cfg, &ls, &mut rng).unwrap();
        assert!(matches!(adapted_forward(&w0, &soft, "a", &x, None), Err(Error::Contract(_))));
        let van = AdapterBank::init(Variant::Vanilla, &cfg, &ls, &mut rng).unwrap();
        assert!(matches!(
            adapted_forward(&w0, &van, "a", &x, Some(&[0.5; 4])),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            adapted_forward(&w0, &soft, "zz", &x, Some(&[0.5; 4])),
            Err(Error::Key(_))
        ));
    }

    #[test]
    fn independent_isolation_and_identity() {
        let mut rng = Rng::seed(2);
        let cfg = LoraConfig::new(3, 6.0, 4, 4);
        let mut bank = AdapterBank::init(Variant::Independent, &cfg, &langs(&["a", "b"]), &mut rng).unwrap();
        randomize(&mut bank, &mut rng);
        let a_b = bank.a_spec["b"].clone();
        let b_b = bank.b_spec["b"].clone();
        bank.a_spec.insert("a".into(), a_b);
        bank.b_spec.insert("a".into(), b_b);
        let da = independent_delta(&bank, &cfg, "a").unwrap();
        let db = independent_delta(&bank, &cfg, "b").unwrap();
        assert!(da.delta.bit_eq(&db.delta));
        let before = independent_delta(&bank, &cfg, "b").unwrap();
        bank.b_spec.get_mut("a").unwrap().data_mut()[0] += 1.0;
        assert!(independent_delta(&bank, &cfg, "b").unwrap().delta.bit_eq(&before.delta));
        assert!(matches!(independent_delta(&bank, &cfg, "c"), Err(Error::Key(_))));
    }

    #[test]
    fn fly_top1_picks_argmax() {
        assert_eq!(top_k_indices(&[3.0, 1.0, 2.0], 1), vec![0]);
        assert_eq!(top_k_indices(&[1.0, 1.0, 1.0], 2), vec![0, 1]);
        let mut cfg = LoraConfig::new(3, 3.0, 3, 2);
        cfg.top_k = 1;
        let mut rng = Rng::seed(3);
        let mut bank = AdapterBank::init(Variant::FlyLora, &cfg, &[], &mut rng).unwrap();
        bank.a = Some(Matrix::identity(3));
        bank.b_shared = Some(rng.uniform_matrix(2, 3, -1.0, 1.0));
        let d = flylora_delta(&bank, &cfg, &[3.0, 1.0, 2.0]).unwrap();
        assert_eq!(d.mixing.unwrap(), vec![1.0, 0.0, 0.0]);
        cfg.top_k = 4;
        assert!(matches!(flylora_delta(&bank, &cfg, &[3.0, 1.0, 2.0]), Err(Error::Config(_))));
    }

    #[test]
    fn sparse_a_has_fixed_row_support() {
        let mut rng = Rng::seed(4);
        let a = sparse_frozen_a(8, 32, 0.1, &mut rng);
        for r in 0..8 {
            let nnz: Vec<f64> = a.row(r).iter().copied().filter(|v| *v != 0.0).collect();
            assert_eq!(nnz.len(), 4);
            assert!(nnz.iter().all(|v| (v.abs() - 0.5).abs() < 1e-15));
        }
    }

    #[test]
    fn static_degenerate_splits() {
        let mut rng = Rng::seed(5);
        let mut cfg = LoraConfig::new(4, 4.0, 3, 3);
        cfg.r_shared = 4;
        cfg.r_spec = 0;
        let mut bank = AdapterBank::init(Variant::ZipperStatic, &cfg, &langs(&["a"]), &mut rng).unwrap();
        randomize(&mut bank, &mut rng);
        let m = zipper_static_merge(&bank, &cfg, "a").unwrap();
        assert!(m.bit_eq(bank.b_shared.as_ref().unwrap()));

        cfg.r_shared = 0;
        cfg.r_spec = 4;
        let mut bank = AdapterBank::init(Variant::ZipperStatic, &cfg, &langs(&["a"]), &mut rng).unwrap();
        randomize(&mut bank, &mut rng);
        let m = zipper_static_merge(&bank, &cfg, "a").unwrap();
        assert!(m.bit_eq(&bank.b_spec["a"]));
        assert!(matches!(zipper_static_merge(&bank, &cfg, "q"), Err(Error::Key(_))));
    }

    #[test]
    fn hard_mask_is_inclusive() {
        assert_eq!(zipper_hard_mask(&[0.2, 0.8], 0.5), vec![0.0, 1.0]);
        assert_eq!(zipper_hard_mask(&[0.5], 0.5), vec![1.0]);
    }

    #[test]
    fn zip_endpoints_and_shape_errors() {
        let mut rng = Rng::seed(6);
        let sh = rng.uniform_matrix(4, 3, -1.0, 1.0);
        let sp = rng.uniform_matrix(4, 3, -1.0, 1.0);
        let pol = HardPolarity::SpecOnOne;
        assert!(zip(&sh, &sp, &[0.0; 3], pol).unwrap().bit_eq(&sh));
        assert!(zip(&sh, &sp, &[1.0; 3], pol).unwrap().bit_eq(&sp));
        assert!(zip(&sh, &sp, &[1.0; 3], HardPolarity::SharedOnOne).unwrap().bit_eq(&sh));
        assert!(zip(&sh, &sp, &[1.0; 2], pol).is_err());
    }

    #[test]
    fn soft_merge_endpoints_and_midpoint() {
        let mut rng = Rng::seed(7);
        let sh = rng.uniform_matrix(4, 3, -1.0, 1.0);
        let sp = rng.uniform_matrix(4, 3, -1.0, 1.0);
        assert!(zipper_soft_merge(&sh, &sp, &[0.0; 3]).unwrap().bit_eq(&sh));
        assert!(zipper_soft_merge(&sh, &sp, &[1.0; 3]).unwrap().bit_eq(&sp));
        let mid = zipper_soft_merge(&sh, &sp, &[0.5; 3]).unwrap();
        let expect = sh.add(&sp).unwrap().scale(0.5);
        assert!(mid.max_abs_diff(&expect) < 1e-15);
        assert!(zipper_soft_merge(&sh, &sp, &[0.5; 4]).is_err());
    }

    #[test]
    fn parameter_counts() {
        let cfg = LoraConfig::new(32, 64.0, 64, 64);
        assert_eq!(count_trainable_params(Variant::Vanilla, &cfg, 12, 16), 4096);
        let small = LoraConfig::new(8, 16.0, 32, 32);
        // one language: router overhead makes Soft larger than Independent
        assert!(
            count_trainable_params(Variant::ZipperSoft, &small, 1, 16)
                > count_trainable_params(Variant::Independent, &small, 1, 16)
        );
        assert_eq!(count_trainable_params(Variant::FlyLora, &small, 12, 16), 32 * 8 + 8);
        assert_eq!(
            count_trainable_params(Variant::ZipperStatic, &small, 12, 16),
            8 * 32 + 32 * 4 + 12 * 32 * 4
        );
    }

    #[test]
    fn config_validation() {
        let mut cfg = LoraConfig::new(8, 16.0, 4, 4);
        cfg.validate().unwrap();
        cfg.top_k = 9;
        cfg.tau = 1.0;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("top_k") && err.contains("tau"), "{err}");
    }

    #[test]
    fn bank_json_field_names() {
        let mut rng = Rng::seed(8);
        let cfg = LoraConfig::new(2, 4.0, 3, 3);
        let bank = AdapterBank::init(Variant::ZipperSoft, &cfg, &langs(&["ja", "ko"]), &mut rng).unwrap();
        let v: serde_json::Value = serde_json::to_value(&bank).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(|s| s.as_str()).collect();
        for k in ["variant", "A", "B_shared", "B_spec", "A_spec", "fly_bias", "config"] {
            assert!(keys.contains(&k), "{k} missing from {keys:?}");
        }
        assert_eq!(v["variant"], "ZipperSoft");
        assert!(v["B_spec"]["ko"]["rows"].is_number());
        let back: AdapterBank = serde_json::from_value(v).unwrap();
        assert_eq!(back, bank);
    }

    #[test]
    fn validate_rejects_foreign_fields() {
        let mut rng = Rng::seed(9);
        let cfg = LoraConfig::new(2, 4.0, 3, 3);
        let mut bank = AdapterBank::init(Variant::Vanilla, &cfg, &langs(&["a"]), &mut rng).unwrap();
        bank.validate().unwrap();
        bank.fly_bias = Some(Matrix::zeros(1, 2));
        assert!(bank.validate().is_err());
    }
}
