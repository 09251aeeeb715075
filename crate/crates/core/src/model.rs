//! Desk-scale speech-LLM analogue.
//!
//! frames `X (T×d)` → encoder (single-head attention + SiLU FFN blocks, an
//! adapter slot on every linear) → projector (stack `f` frames, SiLU-gated
//! interaction, output linear, post-norm residual) → per-language prompt
//! prepended as frame 0 → mean-pool → linear head with its own LoRA.
//!
//! Activations are row-major: one row per frame.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::adapters::{delta_var, fly_apply_rows, AdapterBank, LoraConfig, Variant};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::graph::ParamGraph;
use crate::rng::{derive_seed, Rng};
use crate::router::{route_var, LidEmbedding, RouterParams};
use crate::tensor::Matrix;

pub const ENCODER_LINEARS: [&str; 6] = ["q", "k", "v", "o", "ffn1", "ffn2"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Model width; input frames have the same width.
    pub d_model: usize,
    pub d_ffn: usize,
    pub depth: usize,
    pub seq_len: usize,
    pub stack_factor: usize,
    pub target_dim: usize,
    /// Chunk lengths in frames used in chunked mode.
    pub chunk_lengths: Vec<usize>,
    /// Languages with adapters, prompts and LID embeddings.
    pub languages: Vec<String>,
    /// Stage-1 languages; they get prompts only.
    pub source_languages: Vec<String>,
    pub d_lid: usize,
    /// Per-layer adapter settings; `d_in`/`d_out` are overridden per layer.
    pub lora: LoraConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            d_ffn: 32,
            depth: 2,
            seq_len: 16,
            stack_factor: 4,
            target_dim: 16,
            chunk_lengths: vec![2, 4, 8, 16],
            languages: crate::router::DEFAULT_LANGUAGES.iter().map(|s| s.to_string()).collect(),
            source_languages: ["en", "fr", "th", "zh"].iter().map(|s| s.to_string()).collect(),
            d_lid: 16,
            lora: LoraConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("d_model", self.d_model),
            ("d_ffn", self.d_ffn),
            ("depth", self.depth),
            ("seq_len", self.seq_len),
            ("stack_factor", self.stack_factor),
            ("target_dim", self.target_dim),
            ("d_lid", self.d_lid),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if self.chunk_lengths.is_empty() || self.chunk_lengths.contains(&0) {
            problems.push("chunk_lengths must be a non-empty list of positive lengths".into());
        }
        if self.languages.is_empty() {
            problems.push("at least one language is required".into());
        }
        let uniq: BTreeSet<&String> = self.languages.iter().collect();
        if uniq.len() != self.languages.len() {
            problems.push("languages contain duplicates".into());
        }
        if let Err(e) = self.lora.validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn prompt_languages(&self) -> Vec<String> {
        let set: BTreeSet<String> = self
            .languages
            .iter()
            .chain(&self.source_languages)
            .cloned()
            .collect();
        set.into_iter().collect()
    }

    pub fn eval_chunk(&self) -> usize {
        *self.chunk_lengths.iter().max().unwrap_or(&self.seq_len)
    }

    fn linear_dims(&self, name: &str) -> (usize, usize) {
        match name {
            "ffn1" => (self.d_model, self.d_ffn),
            "ffn2" => (self.d_ffn, self.d_model),
            _ => (self.d_model, self.d_model),
        }
    }

    /// `(d_in, d_out)` of every adapted encoder linear, in layer order.
    pub fn adapted_layers(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        for b in 0..self.depth {
            for lin in ENCODER_LINEARS {
                let (i, o) = self.linear_dims(lin);
                out.push((format!("enc.{b}.{lin}"), i, o));
            }
        }
        out
    }
}

/// What a named parameter is, for stage selectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamRole {
    EncoderBase,
    EncoderAdapter,
    /// FlyLoRA's sparse `A`.
    FrozenAdapter,
    /// FlyLoRA's routing bias; moved by load balancing, not by gradient.
    FlyBias,
    Router,
    Projector,
    HeadBase,
    HeadAdapter,
    Prompt,
    Lid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSlot {
    pub bank: AdapterBank,
    pub router: Option<RouterParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `d_out × d_in`.
    pub weight: Matrix,
    pub slot: Option<AdapterSlot>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock {
    pub linears: BTreeMap<String, Linear>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projector {
    pub factor: usize,
    /// `d × f·d`.
    pub gate: Matrix,
    pub gate_bias: Matrix,
    pub up: Matrix,
    pub up_bias: Matrix,
    /// `d × d`.
    pub out: Matrix,
    pub ln_gamma: Matrix,
    pub ln_beta: Matrix,
}

pub const PROJECTOR_LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub variant: Option<Variant>,
    pub blocks: Vec<EncoderBlock>,
    pub projector: Projector,
    /// Language → `1×d` prompt vector.
    pub prompts: BTreeMap<String, Matrix>,
    pub head: Linear,
    /// Language → `1×d_lid` LID embedding.
    pub lid: BTreeMap<String, Matrix>,
}

/// Contiguous `(start, len)` segments covering `0..total`; the last may be short.
pub fn chunk_split(total: usize, chunk_len: usize) -> Vec<(usize, usize)> {
    assert!(chunk_len >= 1, "chunk length must be positive");
    (0..total)
        .step_by(chunk_len)
        .map(|s| (s, chunk_len.min(total - s)))
        .collect()
}

fn stream(seed: u64, name: &str) -> Rng {
    Rng::stream(seed, name)
}

fn gaussian(seed: u64, name: &str, rows: usize, cols: usize) -> Matrix {
    stream(seed, name).normal_matrix(rows, cols, 1.0 / (cols as f64).sqrt())
}

impl Projector {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let d = cfg.d_model;
        let f = cfg.stack_factor;
        Projector {
            factor: f,
            gate: gaussian(seed, "proj.gate", d, f * d),
            gate_bias: Matrix::zeros(1, d),
            up: gaussian(seed, "proj.up", d, f * d),
            up_bias: Matrix::zeros(1, d),
            out: gaussian(seed, "proj.out", d, d),
            ln_gamma: Matrix::filled(1, d, 1.0),
            ln_beta: Matrix::zeros(1, d),
        }
    }

    fn named(&self) -> Vec<(&'static str, &Matrix)> {
        vec![
            ("proj.gate", &self.gate),
            ("proj.gate_bias", &self.gate_bias),
            ("proj.up", &self.up),
            ("proj.up_bias", &self.up_bias),
            ("proj.out", &self.out),
            ("proj.ln.gamma", &self.ln_gamma),
            ("proj.ln.beta", &self.ln_beta),
        ]
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        vec![
            ("proj.gate", &mut self.gate),
            ("proj.gate_bias", &mut self.gate_bias),
            ("proj.up", &mut self.up),
            ("proj.up_bias", &mut self.up_bias),
            ("proj.out", &mut self.out),
            ("proj.ln.gamma", &mut self.ln_gamma),
            ("proj.ln.beta", &mut self.ln_beta),
        ]
    }
}

/// Fresh adapter slot for one layer. Every random draw is keyed by parameter
/// name, so language order never changes initial values.
pub fn init_slot(
    variant: Variant,
    lora: &LoraConfig,
    languages: &[String],
    d_lid: usize,
    seed: u64,
    prefix: &str,
) -> Result<AdapterSlot> {
    let mut langs = languages.to_vec();
    langs.sort();
    let mut bank = AdapterBank::init(variant, lora, &[], &mut stream(seed, &format!("{prefix}.lora.A")))?;
    match variant {
        Variant::Independent => {
            for l in &langs {
                let mut rng = stream(seed, &format!("{prefix}.lora.A_spec.{l}"));
                bank.a_spec.insert(
                    l.clone(),
                    rng.normal_matrix(lora.rank, lora.d_in, 1.0 / (lora.d_in as f64).sqrt()),
                );
                bank.b_spec.insert(l.clone(), Matrix::zeros(lora.d_out, lora.rank));
            }
        }
        Variant::ZipperStatic => {
            for l in &langs {
                bank.b_spec.insert(l.clone(), Matrix::zeros(lora.d_out, lora.r_spec));
            }
        }
        Variant::ZipperHard | Variant::ZipperSoft => {
            for l in &langs {
                bank.b_spec.insert(l.clone(), Matrix::zeros(lora.d_out, lora.rank));
            }
        }
        Variant::Vanilla | Variant::FlyLora => {}
    }
    bank.validate()?;
    let router = variant
        .is_routed()
        .then(|| RouterParams::init(lora.rank, d_lid, &mut stream(seed, &format!("{prefix}.router"))));
    Ok(AdapterSlot { bank, router })
}

impl Model {
    /// A model without encoder adapters. Base weights come from `seed`; the
    /// head carries a Vanilla LoRA drawn from `adapter_seed`.
    pub fn init_base(cfg: &ModelConfig, seed: u64, adapter_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for b in 0..cfg.depth {
            let mut linears = BTreeMap::new();
            for lin in ENCODER_LINEARS {
                let (d_in, d_out) = cfg.linear_dims(lin);
                let name = format!("enc.{b}.{lin}");
                linears.insert(
                    lin.to_string(),
                    Linear {
                        weight: gaussian(seed, &name, d_out, d_in),
                        slot: None,
                    },
                );
            }
            blocks.push(EncoderBlock { linears });
        }
        let head_lora = cfg.lora.with_dims(cfg.d_model, cfg.target_dim);
        let head = Linear {
            weight: gaussian(seed, "head", cfg.target_dim, cfg.d_model),
            slot: Some(init_slot(Variant::Vanilla, &head_lora, &[], cfg.d_lid, adapter_seed, "head")?),
        };
        Ok(Model {
            config: cfg.clone(),
            variant: None,
            blocks,
            projector: Projector::init(cfg, seed),
            prompts: cfg
                .prompt_languages()
                .into_iter()
                .map(|l| (l, Matrix::zeros(1, cfg.d_model)))
                .collect(),
            head,
            lid: BTreeMap::new(),
        })
    }

    /// Installs fresh encoder adapters of `variant` on every encoder linear.
    pub fn attach_adapters(&mut self, variant: Variant, lid: &[LidEmbedding], adapter_seed: u64) -> Result<()> {
        let cfg = self.config.clone();
        for (b, block) in self.blocks.iter_mut().enumerate() {
            for lin in ENCODER_LINEARS {
                let (d_in, d_out) = cfg.linear_dims(lin);
                let lora = cfg.lora.with_dims(d_in, d_out);
                let prefix = format!("enc.{b}.{lin}");
                let slot = init_slot(variant, &lora, &cfg.languages, cfg.d_lid, adapter_seed, &prefix)?;
                block.linears.get_mut(lin).expect("all linears exist").slot = Some(slot);
            }
        }
        if variant.is_routed() {
            self.set_lid(lid)?;
        }
        self.variant = Some(variant);
        Ok(())
    }

    pub fn set_lid(&mut self, lid: &[LidEmbedding]) -> Result<()> {
        let mut map = BTreeMap::new();
        for e in lid {
            if e.vector.len() != self.config.d_lid {
                return Err(Error::shape("lid embedding", (1, self.config.d_lid), (1, e.vector.len())));
            }
            map.insert(e.language.clone(), e.as_row());
        }
        for l in &self.config.languages {
            if !map.contains_key(l) {
                return Err(Error::Key(format!("no LID embedding for language '{l}'")));
            }
        }
        self.lid = map;
        Ok(())
    }

    pub fn detach_adapters(&mut self) {
        for block in &mut self.blocks {
            for lin in block.linears.values_mut() {
                lin.slot = None;
            }
        }
        self.variant = None;
    }

    pub fn encoder_slots(&self) -> Vec<(String, &AdapterSlot)> {
        let mut out = Vec::new();
        for (b, block) in self.blocks.iter().enumerate() {
            for lin in ENCODER_LINEARS {
                if let Some(s) = &block.linears[lin].slot {
                    out.push((format!("enc.{b}.{lin}"), s));
                }
            }
        }
        out
    }

    pub fn encoder_slots_mut(&mut self) -> Vec<(String, &mut AdapterSlot)> {
        let mut out = Vec::new();
        for (b, block) in self.blocks.iter_mut().enumerate() {
            for (lin, l) in block.linears.iter_mut() {
                if let Some(s) = &mut l.slot {
                    out.push((format!("enc.{b}.{lin}"), s));
                }
            }
        }
        out
    }

    /// Every parameter with its stable name and role.
    pub fn named_params(&self) -> Vec<(String, ParamRole, &Matrix)> {
        let mut out = Vec::new();
        for (b, block) in self.blocks.iter().enumerate() {
            for (lin, l) in &block.linears {
                let prefix = format!("enc.{b}.{lin}");
                out.push((prefix.clone(), ParamRole::EncoderBase, &l.weight));
                if let Some(slot) = &l.slot {
                    push_slot(&mut out, &prefix, slot, ParamRole::EncoderAdapter);
                }
            }
        }
        for (n, m) in self.projector.named() {
            out.push((n.to_string(), ParamRole::Projector, m));
        }
        for (l, m) in &self.prompts {
            out.push((format!("prompt.{l}"), ParamRole::Prompt, m));
        }
        out.push(("head".to_string(), ParamRole::HeadBase, &self.head.weight));
        if let Some(slot) = &self.head.slot {
            push_slot(&mut out, "head", slot, ParamRole::HeadAdapter);
        }
        for (l, m) in &self.lid {
            out.push((format!("lid.{l}"), ParamRole::Lid, m));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, ParamRole, &mut Matrix)> {
        let mut out = Vec::new();
        for (b, block) in self.blocks.iter_mut().enumerate() {
            for (lin, l) in block.linears.iter_mut() {
                let prefix = format!("enc.{b}.{lin}");
                out.push((prefix.clone(), ParamRole::EncoderBase, &mut l.weight));
                if let Some(slot) = &mut l.slot {
                    push_slot_mut(&mut out, &prefix, slot, ParamRole::EncoderAdapter);
                }
            }
        }
        for (n, m) in self.projector.named_mut() {
            out.push((n.to_string(), ParamRole::Projector, m));
        }
        for (l, m) in self.prompts.iter_mut() {
            out.push((format!("prompt.{l}"), ParamRole::Prompt, m));
        }
        out.push(("head".to_string(), ParamRole::HeadBase, &mut self.head.weight));
        if let Some(slot) = &mut self.head.slot {
            push_slot_mut(&mut out, "head", slot, ParamRole::HeadAdapter);
        }
        for (l, m) in self.lid.iter_mut() {
            out.push((format!("lid.{l}"), ParamRole::Lid, m));
        }
        out
    }

    pub fn param_map(&self) -> BTreeMap<String, Matrix> {
        self.named_params()
            .into_iter()
            .map(|(n, _, m)| (n, m.clone()))
            .collect()
    }

    /// Overwrites parameters by name; every name must exist with the same shape.
    pub fn load_params(&mut self, params: &BTreeMap<String, Matrix>) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (name, _, slot) in self.named_params_mut() {
            let m = params
                .get(&name)
                .ok_or_else(|| Error::Key(format!("checkpoint lacks parameter '{name}'")))?;
            if m.shape() != slot.shape() {
                return Err(Error::shape("load_params", slot.shape(), m.shape()));
            }
            *slot = m.clone();
            seen.insert(name);
        }
        if let Some(extra) = params.keys().find(|k| !seen.contains(*k)) {
            return Err(Error::Key(format!("checkpoint has unknown parameter '{extra}'")));
        }
        Ok(())
    }

    // -----------------------------------------------------------------------
    // Tape forward

    fn linear_var(
        &self,
        g: &mut ParamGraph<'_>,
        prefix: &str,
        lin: &Linear,
        h: Var,
        lang: &str,
        fly_loads: &mut Vec<(String, Vec<f64>)>,
    ) -> Result<Var> {
        let w = g.bind(prefix, &lin.weight);
        let Some(slot) = &lin.slot else {
            return g.tape.matmul_t(h, w);
        };
        if slot.bank.variant == Variant::FlyLora {
            let base = g.tape.matmul_t(h, w)?;
            let (extra, mask) = fly_apply_rows(g, &format!("{prefix}.lora"), &slot.bank, h)?;
            let mut load = vec![0.0; mask.cols()];
            for r in 0..mask.rows() {
                for (l, m) in load.iter_mut().zip(mask.row(r)) {
                    *l += m;
                }
            }
            fly_loads.push((prefix.to_string(), load));
            return g.tape.add(base, extra);
        }
        let p = match &slot.router {
            Some(router) => {
                let lid = self
                    .lid
                    .get(lang)
                    .ok_or_else(|| Error::Key(format!("no LID embedding for language '{lang}'")))?;
                let e = g.bind(&format!("lid.{lang}"), lid);
                Some(route_var(g, &format!("{prefix}.router"), router, e)?)
            }
            None => None,
        };
        let delta = delta_var(g, &format!("{prefix}.lora"), &slot.bank, lang, p)?;
        let eff = g.tape.add(w, delta)?;
        g.tape.matmul_t(h, eff)
    }

    /// Encoder over `batch` back-to-back sequences stacked in `x` (`batch·T × d`).
    pub fn encode_var(
        &self,
        g: &mut ParamGraph<'_>,
        x: Var,
        lang: &str,
        chunk_len: Option<usize>,
        fly_loads: &mut Vec<(String, Vec<f64>)>,
    ) -> Result<Var> {
        let t = self.config.seq_len;
        let (n, d) = g.value(x).shape();
        if d != self.config.d_model || n % t != 0 {
            return Err(Error::shape("encode", (n, d), (t, self.config.d_model)));
        }
        let seg_len = match chunk_len {
            Some(0) => return Err(Error::Config("chunk length must be positive".into())),
            Some(c) => c.min(t),
            None => t,
        };
        let mut segments = Vec::new();
        for b in 0..n / t {
            for (s, len) in chunk_split(t, seg_len) {
                segments.push((b * t + s, len));
            }
        }
        let scale = 1.0 / (d as f64).sqrt();
        let mut h = x;
        for (bi, block) in self.blocks.iter().enumerate() {
            let lin = |name: &str| -> (&Linear, String) { (&block.linears[name], format!("enc.{bi}.{name}")) };
            let (lq, nq) = lin("q");
            let q = self.linear_var(g, &nq, lq, h, lang, fly_loads)?;
            let (lk, nk) = lin("k");
            let k = self.linear_var(g, &nk, lk, h, lang, fly_loads)?;
            let (lv, nv) = lin("v");
            let v = self.linear_var(g, &nv, lv, h, lang, fly_loads)?;
            let att = g.tape.segment_attention(q, k, v, &segments, scale)?;
            let (lo, no) = lin("o");
            let o = self.linear_var(g, &no, lo, att, lang, fly_loads)?;
            h = g.tape.add(h, o)?;
            let (l1, n1) = lin("ffn1");
            let f1 = self.linear_var(g, &n1, l1, h, lang, fly_loads)?;
            let f1 = g.tape.silu(f1);
            let (l2, n2) = lin("ffn2");
            let f2 = self.linear_var(g, &n2, l2, f1, lang, fly_loads)?;
            h = g.tape.add(h, f2)?;
        }
        Ok(h)
    }

    /// Projector over stacked sequences of length `seq_len`; returns
    /// `batch·⌈seq_len/f⌉ × d`.
    pub fn project_var(&self, g: &mut ParamGraph<'_>, h: Var, seq_len: usize) -> Result<Var> {
        let p = &self.projector;
        let stacked = g.tape.stack_frames(h, seq_len, p.factor)?;
        let gate_w = g.bind("proj.gate", &p.gate);
        let gate_b = g.bind("proj.gate_bias", &p.gate_bias);
        let up_w = g.bind("proj.up", &p.up);
        let up_b = g.bind("proj.up_bias", &p.up_bias);
        let out_w = g.bind("proj.out", &p.out);
        let gamma = g.bind("proj.ln.gamma", &p.ln_gamma);
        let beta = g.bind("proj.ln.beta", &p.ln_beta);
        let gate = g.tape.matmul_t(stacked, gate_w)?;
        let gate = g.tape.add_row_bias(gate, gate_b)?;
        let gate = g.tape.silu(gate);
        let up = g.tape.matmul_t(stacked, up_w)?;
        let up = g.tape.add_row_bias(up, up_b)?;
        let fused = g.tape.hadamard(gate, up)?;
        let lin = g.tape.matmul_t(fused, out_w)?;
        let res = g.tape.add(fused, lin)?;
        g.tape.layernorm_rows(res, gamma, beta, PROJECTOR_LN_EPS)
    }

    /// Inserts language `lang`'s prompt before each group of `groups` rows.
    pub fn prepend_prompt_var(&self, g: &mut ParamGraph<'_>, hp: Var, groups: usize, lang: &str) -> Result<Var> {
        let prompt = self
            .prompts
            .get(lang)
            .ok_or_else(|| Error::Key(format!("no prompt for language '{lang}'")))?;
        let pv = g.bind(&format!("prompt.{lang}"), prompt);
        let n = g.value(hp).rows();
        let mut index = Vec::with_capacity(n + n / groups.max(1));
        for b in 0..n / groups {
            index.push(Some((1, 0)));
            for r in 0..groups {
                index.push(Some((0, b * groups + r)));
            }
        }
        g.tape.gather_rows(&[hp, pv], index)
    }

    /// Mean-pool each `frames`-row sequence and apply the adapted head.
    pub fn head_var(&self, g: &mut ParamGraph<'_>, z: Var, frames: usize) -> Result<Var> {
        let n = g.value(z).rows();
        let batch = n / frames;
        let pool = Matrix::from_fn(batch, n, |b, r| {
            if r / frames == b {
                1.0 / frames as f64
            } else {
                0.0
            }
        });
        let pool = g.constant(pool);
        let pooled = g.tape.matmul(pool, z)?;
        let mut unused = Vec::new();
        self.linear_var(g, "head", &self.head, pooled, "", &mut unused)
    }

    /// Full forward for a single-language batch. Returns `batch × target_dim`
    /// plus FlyLoRA selection counts per adapted layer.
    pub fn forward_batch(
        &self,
        g: &mut ParamGraph<'_>,
        xs: &[&Matrix],
        lang: &str,
        chunk_len: Option<usize>,
    ) -> Result<(Var, Vec<(String, Vec<f64>)>)> {
        if !self.prompts.contains_key(lang) {
            return Err(Error::Key(format!("unknown language '{lang}'")));
        }
        let t = self.config.seq_len;
        let mut data = Vec::with_capacity(xs.len() * t * self.config.d_model);
        for x in xs {
            if x.shape() != (t, self.config.d_model) {
                return Err(Error::shape("forward", x.shape(), (t, self.config.d_model)));
            }
            if !x.is_finite() {
                return Err(Error::Contract("input frames must be finite".into()));
            }
            data.extend_from_slice(x.data());
        }
        let x = g.constant(Matrix::new(xs.len() * t, self.config.d_model, data)?);
        let mut loads = Vec::new();
        let h = self.encode_var(g, x, lang, chunk_len, &mut loads)?;
        let hp = self.project_var(g, h, t)?;
        let groups = t.div_ceil(self.config.stack_factor);
        let z = self.prepend_prompt_var(g, hp, groups, lang)?;
        let y = self.head_var(g, z, groups + 1)?;
        Ok((y, loads))
    }

    // -----------------------------------------------------------------------
    // Eager conveniences

    /// `H_enc` for one utterance.
    pub fn encode(&self, x: &Matrix, lang: &str, chunk_len: Option<usize>) -> Result<Matrix> {
        let mut g = ParamGraph::frozen();
        let xv = g.constant(x.clone());
        let h = self.encode_var(&mut g, xv, lang, chunk_len, &mut Vec::new())?;
        Ok(g.value(h).clone())
    }

    /// `H_proj` for one encoded utterance (`T' × d`).
    pub fn project(&self, h: &Matrix) -> Result<Matrix> {
        if h.rows() == 0 {
            return Err(Error::Contract("projector input must have at least one frame".into()));
        }
        let mut g = ParamGraph::frozen();
        let hv = g.constant(h.clone());
        let p = self.project_var(&mut g, hv, h.rows())?;
        Ok(g.value(p).clone())
    }

    /// `Z = prompt ⊕ H_proj`.
    pub fn prepend_prompt(&self, hp: &Matrix, lang: &str) -> Result<Matrix> {
        let prompt = self
            .prompts
            .get(lang)
            .ok_or_else(|| Error::Key(format!("no prompt for language '{lang}'")))?;
        prompt.concat_rows(hp)
    }

    /// `Ŷ` for one utterance, as a `1 × target_dim` row.
    pub fn forward(&self, x: &Matrix, lang: &str, chunk_len: Option<usize>) -> Result<Matrix> {
        let mut g = ParamGraph::frozen();
        let (y, _) = self.forward_batch(&mut g, &[x], lang, chunk_len)?;
        Ok(g.value(y).clone())
    }

    /// Batched eager forward, one row per input.
    pub fn predict(&self, xs: &[&Matrix], lang: &str, chunk_len: Option<usize>) -> Result<Matrix> {
        let mut g = ParamGraph::frozen();
        let (y, _) = self.forward_batch(&mut g, xs, lang, chunk_len)?;
        Ok(g.value(y).clone())
    }

    /// Mean over frames of the encoder output, one row per input.
    pub fn pooled_encoder_outputs(&self, xs: &[&Matrix], lang: &str, chunk_len: Option<usize>) -> Result<Matrix> {
        let t = self.config.seq_len;
        let mut out = Matrix::zeros(xs.len(), self.config.d_model);
        for (i, x) in xs.iter().enumerate() {
            let h = self.encode(x, lang, chunk_len)?;
            for r in 0..t {
                for (o, v) in out.row_mut(i).iter_mut().zip(h.row(r)) {
                    *o += v / t as f64;
                }
            }
        }
        Ok(out)
    }

    /// Mean router output per rank for `lang`, averaged over adapted layers.
    pub fn mean_routing(&self, lang: &str) -> Result<Option<Vec<f64>>> {
        let Some(lid) = self.lid.get(lang) else {
            return Ok(None);
        };
        let e = LidEmbedding::new(lang, lid.data().to_vec())?;
        let mut acc: Option<Vec<f64>> = None;
        let mut count = 0.0;
        for (_, slot) in self.encoder_slots() {
            if let Some(router) = &slot.router {
                let p = crate::router::route(router, &e)?;
                match &mut acc {
                    Some(a) => a.iter_mut().zip(&p).for_each(|(x, y)| *x += y),
                    None => acc = Some(p),
                }
                count += 1.0;
            }
        }
        Ok(acc.map(|a| a.into_iter().map(|v| v / count).collect()))
    }

    /// Seed used for named-parameter streams, exposed for reproducible re-inits.
    pub fn adapter_seed(base: u64) -> u64 {
        derive_seed(base, "adapters")
    }
}

fn push_slot<'a>(out: &mut Vec<(String, ParamRole, &'a Matrix)>, prefix: &str, slot: &'a AdapterSlot, role: ParamRole) {
    for (suffix, m) in slot.bank.named() {
        let r = match (slot.bank.variant, suffix.as_str()) {
            (Variant::FlyLora, "A") => ParamRole::FrozenAdapter,
            (Variant::FlyLora, "fly_bias") => ParamRole::FlyBias,
            _ => role,
        };
        out.push((format!("{prefix}.lora.{suffix}"), r, m));
    }
    if let Some(router) = &slot.router {
        for (n, m) in router.named() {
            out.push((format!("{prefix}.router.{n}"), ParamRole::Router, m));
        }
    }
}

fn push_slot_mut<'a>(
    out: &mut Vec<(String, ParamRole, &'a mut Matrix)>,
    prefix: &str,
    slot: &'a mut AdapterSlot,
    role: ParamRole,
) {
    let variant = slot.bank.variant;
    for (suffix, m) in slot.bank.named_mut() {
        let r = match (variant, suffix.as_str()) {
            (Variant::FlyLora, "A") => ParamRole::FrozenAdapter,
            (Variant::FlyLora, "fly_bias") => ParamRole::FlyBias,
            _ => role,
        };
        out.push((format!("{prefix}.lora.{suffix}"), r, m));
    }
    if let Some(router) = &mut slot.router {
        for (n, m) in router.named_mut() {
            out.push((format!("{prefix}.router.{n}"), ParamRole::Router, m));
        }
    }
}

/// Serialized model: stage, config, variant and every named parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCheckpoint {
    pub stage: u8,
    pub config: ModelConfig,
    pub variant: Option<Variant>,
    pub params: BTreeMap<String, Matrix>,
}

impl ModelCheckpoint {
    pub fn from_model(model: &Model, stage: u8) -> Self {
        ModelCheckpoint {
            stage,
            config: model.config.clone(),
            variant: model.variant,
            params: model.param_map(),
        }
    }

    /// Rebuilds the model skeleton from the config and fills it by name.
    pub fn restore(&self) -> Result<Model> {
        let mut model = Model::init_base(&self.config, 0, 0)?;
        if let Some(v) = self.variant {
            let lid: Vec<LidEmbedding> = self
                .config
                .languages
                .iter()
                .map(|l| {
                    let m = self
                        .params
                        .get(&format!("lid.{l}"))
                        .cloned()
                        .unwrap_or_else(|| Matrix::filled(1, self.config.d_lid, 1.0));
                    LidEmbedding::new(l.clone(), m.data().to_vec())
                })
                .collect::<Result<_>>()?;
            model.attach_adapters(v, &lid, 0)?;
            if !v.is_routed() {
                model.lid = self
                    .params
                    .iter()
                    .filter_map(|(k, m)| k.strip_prefix("lid.").map(|l| (l.to_string(), m.clone())))
                    .collect();
            }
        }
        model.load_params(&self.params)?;
        Ok(model)
    }
}
