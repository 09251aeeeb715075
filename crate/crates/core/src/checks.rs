//! Gradient and algebraic-identity suites behind the `gradcheck` and `equiv`
//! commands, plus the per-language gradient isolation check.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::adapters::{
    delta_var, fly_apply_rows, flylora_delta, merged_delta, vanilla_delta, zip, zipper_delta, zipper_soft_merge,
    zipper_static_merge, AdapterBank, HardPolarity, LoraConfig, Variant,
};
use crate::autodiff::{OpKind, Var};
use crate::error::{Error, Result};
use crate::gradcheck::{finite_diff_grad, rel_error, FD_STEP, FD_TOLERANCE};
use crate::graph::ParamGraph;
use crate::model::{Model, ModelConfig, ParamRole};
use crate::rng::{derive_seed, Rng};
use crate::router::{route_var, synth_lid_embeddings, RouterParams};
use crate::tensor::Matrix;
use crate::train::batch_gradients;

/// Tolerance of the identity suite.
pub const EQUIV_TOLERANCE: f64 = 1e-12;
/// Seeds the identity suite runs over by default.
pub const EQUIV_SEEDS: u64 = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Adapters,
    Router,
    Model,
}

impl Scope {
    pub const ALL: [Scope; 4] = [Scope::Ops, Scope::Adapters, Scope::Router, Scope::Model];

    pub fn name(self) -> &'static str {
        match self {
            Scope::Ops => "ops",
            Scope::Adapters => "adapters",
            Scope::Router => "router",
            Scope::Model => "model",
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Scope::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradcheck scope '{s}' (ops, adapters, router, model)")))
    }
}

/// One line of a check table. `detail` names the worst parameter path or
/// the identity that was measured.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub suite: String,
    pub check: String,
    pub detail: String,
    pub error: f64,
    pub tolerance: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.error.is_finite() && self.error < self.tolerance
    }
}

pub fn all_passed(rows: &[CheckRow]) -> bool {
    rows.iter().all(CheckRow::passed)
}

pub fn render_table(rows: &[CheckRow]) -> String {
    let mut out = format!("{:<9} {:<32} {:<44} {:>12} {:>9}  result\n", "suite", "check", "worst", "error", "tol");
    for r in rows {
        out.push_str(&format!(
            "{:<9} {:<32} {:<44} {:>12.3e} {:>9.0e}  {}\n",
            r.suite,
            r.check,
            r.detail,
            r.error,
            r.tolerance,
            if r.passed() { "PASS" } else { "FAIL" }
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Finite-difference harness

type Build<'a> = dyn Fn(&mut ParamGraph<'_>, &BTreeMap<String, Matrix>) -> Result<Var> + 'a;

/// Backward vs central differences for every matrix in `params`. Straight-
/// through gates are replayed as identity gates pinned at the unperturbed
/// inputs, so a Hard path is compared against its surrogate.
fn fd_check(
    suite: Scope,
    check: &str,
    params: &BTreeMap<String, Matrix>,
    build: &Build<'_>,
    fault: Option<OpKind>,
) -> Result<CheckRow> {
    let mut g = ParamGraph::all_trainable();
    if let Some(kind) = fault {
        g.tape.inject_fault(kind);
    }
    let loss = build(&mut g, params)?;
    let grads = g.backward(loss)?;
    let analytic = g.param_grads(&grads);
    let anchors = g.tape.ste_inputs();

    let eval = |ps: &BTreeMap<String, Matrix>| -> f64 {
        let mut g = ParamGraph::frozen();
        g.tape.anchor_ste(anchors.clone());
        match build(&mut g, ps) {
            Ok(l) => g.value(l).get(0, 0),
            Err(_) => f64::NAN,
        }
    };
    let mut worst = (String::from("-"), 0.0_f64);
    for (name, p) in params {
        let mut probe = params.clone();
        let fd = finite_diff_grad(
            |q| {
                probe.insert(name.clone(), q.clone());
                eval(&probe)
            },
            p,
            FD_STEP,
        );
        let got = analytic
            .get(name)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols()));
        let err = rel_error(&got, &fd);
        if err.is_nan() || err > worst.1 || worst.0 == "-" {
            worst = (name.clone(), if err.is_nan() { f64::INFINITY } else { err });
        }
    }
    Ok(CheckRow {
        suite: suite.name().into(),
        check: check.into(),
        detail: worst.0,
        error: worst.1,
        tolerance: FD_TOLERANCE,
    })
}

/// `Σ out ⊙ w` with a fixed random `w`, so every output entry matters.
fn weighted_sum(g: &mut ParamGraph<'_>, out: Var, seed: u64) -> Result<Var> {
    let (r, c) = g.value(out).shape();
    let w = g.constant(Rng::stream(seed, "weights").uniform_matrix(r, c, -1.0, 1.0));
    let prod = g.tape.hadamard(out, w)?;
    Ok(g.tape.sum(prod))
}

fn p(ps: &BTreeMap<String, Matrix>, name: &str) -> Matrix {
    ps[name].clone()
}

/// Values bounded away from zero, for kinks at the origin.
fn away_from_zero(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    rng.uniform_matrix(rows, cols, -1.0, 1.0)
        .map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

// ---------------------------------------------------------------------------
// ops

fn op_cases(seed: u64) -> Vec<(OpKind, BTreeMap<String, Matrix>)> {
    let mut rng = Rng::stream(seed, "ops");
    let mut u = |r: usize, c: usize| rng.uniform_matrix(r, c, -1.0, 1.0);
    let m = |pairs: Vec<(&str, Matrix)>| -> BTreeMap<String, Matrix> {
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    };
    let mut cases = vec![
        (OpKind::MatMul, m(vec![("a", u(3, 4)), ("b", u(4, 2))])),
        (OpKind::MatMulT, m(vec![("a", u(3, 4)), ("b", u(2, 4))])),
        (OpKind::Add, m(vec![("a", u(3, 4)), ("b", u(3, 4))])),
        (OpKind::Sub, m(vec![("a", u(3, 4)), ("b", u(3, 4))])),
        (OpKind::Hadamard, m(vec![("a", u(3, 4)), ("b", u(3, 4))])),
        (OpKind::Affine, m(vec![("a", u(3, 4))])),
        (OpKind::Sigmoid, m(vec![("a", u(3, 4).scale(3.0))])),
        (OpKind::Silu, m(vec![("a", u(3, 4).scale(3.0))])),
        (OpKind::ConcatCols, m(vec![("a", u(3, 2)), ("b", u(3, 3))])),
        (OpKind::SelectCols, m(vec![("a", u(3, 5))])),
        (OpKind::DiagScaleCols, m(vec![("a", u(3, 4)), ("w", u(1, 4))])),
        (
            OpKind::LayerNorm,
            m(vec![("x", u(3, 5).scale(2.0)), ("gamma", u(1, 5)), ("beta", u(1, 5))]),
        ),
        (OpKind::Softmax, m(vec![("a", u(3, 4).scale(2.0))])),
        (OpKind::SegmentAttention, m(vec![("q", u(6, 4)), ("k", u(6, 4)), ("v", u(6, 4))])),
        (OpKind::GatherRows, m(vec![("a", u(2, 3)), ("b", u(3, 3))])),
        (OpKind::StackFrames, m(vec![("x", u(12, 3))])),
        (OpKind::AddRowBias, m(vec![("a", u(3, 4)), ("b", u(1, 4))])),
        (OpKind::Sum, m(vec![("a", u(3, 4))])),
        (OpKind::Mean, m(vec![("a", u(3, 4))])),
        (OpKind::SteThreshold, m(vec![("a", u(1, 6).map(|v| 0.5 + 0.4 * v))])),
    ];
    let mut rng = Rng::stream(seed, "ops-relu");
    cases.insert(8, (OpKind::Relu, m(vec![("a", away_from_zero(&mut rng, 3, 4))])));
    cases
}

fn op_graph(kind: OpKind, g: &mut ParamGraph<'_>, ps: &BTreeMap<String, Matrix>, seed: u64) -> Result<Var> {
    let mut v = |n: &str| g.bind(n, &p(ps, n));
    let out = match kind {
        OpKind::MatMul => {
            let (a, b) = (v("a"), v("b"));
            g.tape.matmul(a, b)?
        }
        OpKind::MatMulT => {
            let (a, b) = (v("a"), v("b"));
            g.tape.matmul_t(a, b)?
        }
        OpKind::Add => {
            let (a, b) = (v("a"), v("b"));
            g.tape.add(a, b)?
        }
        OpKind::Sub => {
            let (a, b) = (v("a"), v("b"));
            g.tape.sub(a, b)?
        }
        OpKind::Hadamard => {
            let (a, b) = (v("a"), v("b"));
            g.tape.hadamard(a, b)?
        }
        OpKind::Affine => {
            let a = v("a");
            g.tape.affine(a, 1.7, 0.3)
        }
        OpKind::Sigmoid => {
            let a = v("a");
            g.tape.sigmoid(a)
        }
        OpKind::Silu => {
            let a = v("a");
            g.tape.silu(a)
        }
        OpKind::Relu => {
            let a = v("a");
            g.tape.relu(a)
        }
        OpKind::ConcatCols => {
            let (a, b) = (v("a"), v("b"));
            g.tape.concat_cols(a, b)?
        }
        OpKind::SelectCols => {
            let a = v("a");
            g.tape.select_cols(a, &[4, 0, 2])?
        }
        OpKind::DiagScaleCols => {
            let (a, w) = (v("a"), v("w"));
            g.tape.diag_scale_cols(a, w)?
        }
        OpKind::LayerNorm => {
            let (x, gm, bt) = (v("x"), v("gamma"), v("beta"));
            g.tape.layernorm_rows(x, gm, bt, 1e-5)?
        }
        OpKind::Softmax => {
            let a = v("a");
            g.tape.softmax_rows(a)
        }
        OpKind::SegmentAttention => {
            let (q, k, vv) = (v("q"), v("k"), v("v"));
            g.tape.segment_attention(q, k, vv, &[(0, 2), (2, 4)], 0.5)?
        }
        OpKind::GatherRows => {
            let (a, b) = (v("a"), v("b"));
            let index = vec![Some((0, 1)), None, Some((1, 2)), Some((1, 0)), Some((0, 1))];
            g.tape.gather_rows(&[a, b], index)?
        }
        OpKind::StackFrames => {
            let x = v("x");
            g.tape.stack_frames(x, 6, 4)?
        }
        OpKind::AddRowBias => {
            let (a, b) = (v("a"), v("b"));
            g.tape.add_row_bias(a, b)?
        }
        OpKind::Sum => {
            let a = v("a");
            let sq = g.tape.hadamard(a, a)?;
            g.tape.sum(sq)
        }
        OpKind::Mean => {
            let a = v("a");
            let sq = g.tape.hadamard(a, a)?;
            g.tape.mean(sq)
        }
        OpKind::SteThreshold => {
            let a = v("a");
            g.tape.ste_threshold(a, 0.5)
        }
        OpKind::Leaf => return Err(Error::Contract("leaf is not an op".into())),
    };
    weighted_sum(g, out, seed)
}

fn ops_suite(seed: u64, fault: Option<OpKind>) -> Result<Vec<CheckRow>> {
    op_cases(seed)
        .into_iter()
        .map(|(kind, params)| {
            let build = move |g: &mut ParamGraph<'_>, ps: &BTreeMap<String, Matrix>| op_graph(kind, g, ps, seed);
            fd_check(Scope::Ops, kind.name(), &params, &build, fault)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// adapters and router

const LANGS: [&str; 2] = ["aa", "bb"];

fn langs() -> Vec<String> {
    LANGS.iter().map(|s| s.to_string()).collect()
}

/// A bank of `variant` with every matrix random (up-projections included).
pub fn random_bank(variant: Variant, cfg: &LoraConfig, languages: &[String], rng: &mut Rng) -> Result<AdapterBank> {
    let mut bank = AdapterBank::init(variant, cfg, languages, rng)?;
    for (name, m) in bank.named_mut() {
        if variant == Variant::FlyLora && (name == "A" || name == "fly_bias") {
            continue;
        }
        *m = rng.normal_matrix(m.rows(), m.cols(), 0.5);
    }
    Ok(bank)
}

fn bank_params(bank: &AdapterBank, prefix: &str) -> BTreeMap<String, Matrix> {
    bank.named()
        .into_iter()
        .filter(|(n, _)| n != "fly_bias")
        .map(|(n, m)| (format!("{prefix}.{n}"), m.clone()))
        .collect()
}

fn with_bank_params(bank: &AdapterBank, prefix: &str, ps: &BTreeMap<String, Matrix>) -> AdapterBank {
    let mut b = bank.clone();
    for (n, m) in b.named_mut() {
        if let Some(v) = ps.get(&format!("{prefix}.{n}")) {
            *m = v.clone();
        }
    }
    b
}

fn router_params(r: &RouterParams, prefix: &str) -> BTreeMap<String, Matrix> {
    r.named()
        .into_iter()
        .map(|(n, m)| (format!("{prefix}.{n}"), m.clone()))
        .collect()
}

fn with_router_params(r: &RouterParams, prefix: &str, ps: &BTreeMap<String, Matrix>) -> RouterParams {
    let mut out = r.clone();
    for (n, m) in out.named_mut() {
        if let Some(v) = ps.get(&format!("{prefix}.{n}")) {
            *m = v.clone();
        }
    }
    out
}

/// `mse(h·(W0 + ΔW)ᵀ, y)` for one adapted layer.
fn adapted_loss(
    g: &mut ParamGraph<'_>,
    ps: &BTreeMap<String, Matrix>,
    bank: &AdapterBank,
    p_var: Option<Var>,
    seed: u64,
) -> Result<Var> {
    let bank = with_bank_params(bank, "lora", ps);
    let h = g.bind("h", &ps["h"]);
    let w0 = g.bind("W0", &ps["W0"]);
    let base = g.tape.matmul_t(h, w0)?;
    let out = if bank.variant == Variant::FlyLora {
        let (extra, _) = fly_apply_rows(g, "lora", &bank, h)?;
        g.tape.add(base, extra)?
    } else {
        let delta = delta_var(g, "lora", &bank, LANGS[0], p_var)?;
        let eff = g.tape.add(w0, delta)?;
        g.tape.matmul_t(h, eff)?
    };
    let (n, d) = g.value(out).shape();
    let y = g.constant(Rng::stream(seed, "target").uniform_matrix(n, d, -1.0, 1.0));
    g.tape.mse(out, y)
}

fn adapters_suite(seed: u64, fault: Option<OpKind>) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    let mut cfg = LoraConfig::new(4, 8.0, 5, 3);
    cfg.top_k = 2;
    cfg.fly_density = 0.4;
    for variant in Variant::ALL {
        let mut rng = Rng::stream(seed, &format!("adapters.{}", variant.name()));
        let bank = random_bank(variant, &cfg, &langs(), &mut rng)?;
        let mut params = bank_params(&bank, "lora");
        params.insert("h".into(), rng.uniform_matrix(6, cfg.d_in, -1.0, 1.0));
        params.insert("W0".into(), rng.uniform_matrix(cfg.d_out, cfg.d_in, -1.0, 1.0));
        if variant.is_routed() {
            // Keep p clear of the threshold; the surrogate handles the rest.
            params.insert("p".into(), rng.uniform_matrix(1, cfg.rank, 0.1, 0.9));
        }
        let build = |g: &mut ParamGraph<'_>, ps: &BTreeMap<String, Matrix>| {
            let p_var = ps.get("p").map(|m| g.bind("p", m));
            adapted_loss(g, ps, &bank, p_var, seed)
        };
        rows.push(fd_check(Scope::Adapters, &format!("layer/{}", variant.name()), &params, &build, fault)?);
    }
    Ok(rows)
}

fn router_suite(seed: u64, fault: Option<OpKind>) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    let (rank, d_lid) = (4, 6);
    let mut rng = Rng::stream(seed, "router");
    let mut router = RouterParams::init(rank, d_lid, &mut rng);
    router.gamma = rng.uniform_matrix(1, d_lid, 0.5, 1.5);
    router.beta = rng.uniform_matrix(1, d_lid, -0.3, 0.3);
    router.b_r = rng.uniform_matrix(1, rank, -0.5, 0.5);
    let mut params = router_params(&router, "router");
    params.insert("e".into(), rng.normal_matrix(1, d_lid, 1.0));
    let route_only = |g: &mut ParamGraph<'_>, ps: &BTreeMap<String, Matrix>| {
        let r = with_router_params(&router, "router", ps);
        let e = g.bind("e", &ps["e"]);
        let pv = route_var(g, "router", &r, e)?;
        weighted_sum(g, pv, seed)
    };
    rows.push(fd_check(Scope::Router, "route", &params, &route_only, fault)?);

    // Full routed path: router → merge → delta → forward → loss.
    let cfg = LoraConfig::new(rank, 8.0, 5, 3);
    for variant in [Variant::ZipperSoft, Variant::ZipperHard] {
        let bank = random_bank(variant, &cfg, &langs(), &mut rng)?;
        let mut ps = params.clone();
        ps.extend(bank_params(&bank, "lora"));
        ps.insert("h".into(), rng.uniform_matrix(6, cfg.d_in, -1.0, 1.0));
        ps.insert("W0".into(), rng.uniform_matrix(cfg.d_out, cfg.d_in, -1.0, 1.0));
        let build = |g: &mut ParamGraph<'_>, ps: &BTreeMap<String, Matrix>| {
            let r = with_router_params(&router, "router", ps);
            let e = g.bind("e", &ps["e"]);
            let pv = route_var(g, "router", &r, e)?;
            adapted_loss(g, ps, &bank, Some(pv), seed)
        };
        let name = if variant == Variant::ZipperHard {
            "routed-path/ZipperHard(ste)"
        } else {
            "routed-path/ZipperSoft"
        };
        rows.push(fd_check(Scope::Router, name, &ps, &build, fault)?);
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// model

/// Width-8 model configuration small enough for full finite differences.
pub fn tiny_model_config() -> ModelConfig {
    let mut lora = LoraConfig::new(2, 4.0, 8, 8);
    lora.top_k = 1;
    lora.fly_density = 0.5;
    ModelConfig {
        d_model: 8,
        d_ffn: 8,
        depth: 1,
        seq_len: 8,
        stack_factor: 4,
        target_dim: 4,
        chunk_lengths: vec![2, 4, 8],
        languages: vec!["aa".into(), "bb".into(), "cc".into()],
        source_languages: vec!["aa".into()],
        d_lid: 4,
        lora,
    }
}

/// Tiny model with `variant` attached and every parameter randomized.
pub fn tiny_model(variant: Variant, seed: u64) -> Result<Model> {
    let cfg = tiny_model_config();
    let sim = Matrix::from_rows(&[[1.0, 0.3, 0.1], [0.3, 1.0, 0.2], [0.1, 0.2, 1.0]]);
    let lid = synth_lid_embeddings(&sim, &cfg.languages, cfg.d_lid, seed)?;
    let mut model = Model::init_base(&cfg, seed, derive_seed(seed, "adapters"))?;
    model.attach_adapters(variant, &lid, derive_seed(seed, "adapters"))?;
    let mut rng = Rng::stream(seed, "tiny-model");
    for (_, role, m) in model.named_params_mut() {
        if matches!(role, ParamRole::FrozenAdapter | ParamRole::FlyBias) {
            continue;
        }
        let noise = rng.normal_matrix(m.rows(), m.cols(), 0.3);
        m.add_assign(&noise)?;
    }
    Ok(model)
}

fn tiny_batch(cfg: &ModelConfig, n: usize, seed: u64) -> (Vec<Matrix>, Vec<f64>) {
    let mut rng = Rng::stream(seed, "tiny-batch");
    let xs = (0..n)
        .map(|_| rng.normal_matrix(cfg.seq_len, cfg.d_model, 1.0))
        .collect();
    let ys = (0..n * cfg.target_dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
    (xs, ys)
}

fn model_suite(seed: u64, fault: Option<OpKind>) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    for (variant, chunk) in Variant::ALL
        .into_iter()
        .map(|v| (v, None))
        .chain([(Variant::ZipperSoft, Some(4))])
    {
        let model = tiny_model(variant, seed)?;
        let cfg = model.config.clone();
        let (xs, ys) = tiny_batch(&cfg, 2, seed);
        let params: BTreeMap<String, Matrix> = model
            .named_params()
            .into_iter()
            .filter(|(_, r, _)| !matches!(r, ParamRole::FrozenAdapter | ParamRole::FlyBias))
            .map(|(n, _, m)| (n, m.clone()))
            .collect();
        let build = |g: &mut ParamGraph<'_>, ps: &BTreeMap<String, Matrix>| {
            let mut m = model.clone();
            for (n, _, slot) in m.named_params_mut() {
                if let Some(v) = ps.get(&n) {
                    *slot = v.clone();
                }
            }
            let refs: Vec<&Matrix> = xs.iter().collect();
            let (pred, _) = m.forward_batch(g, &refs, "bb", chunk)?;
            let target = g.constant(Matrix::new(refs.len(), cfg.target_dim, ys.clone())?);
            g.tape.mse(pred, target)
        };
        let mut name = format!("forward/{}", variant.name());
        if variant == Variant::ZipperHard {
            name.push_str("(ste)");
        }
        if let Some(c) = chunk {
            name.push_str(&format!("/chunk{c}"));
        }
        rows.push(fd_check(Scope::Model, &name, &params, &build, fault)?);
    }
    Ok(rows)
}

/// Gradient suites for `scope`. `fault` corrupts one backward rule (negative
/// control).
pub fn gradcheck(scope: Scope, seed: u64, fault: Option<OpKind>) -> Result<Vec<CheckRow>> {
    match scope {
        Scope::Ops => ops_suite(seed, fault),
        Scope::Adapters => adapters_suite(seed, fault),
        Scope::Router => router_suite(seed, fault),
        Scope::Model => model_suite(seed, fault),
    }
}

// ---------------------------------------------------------------------------
// Identity suite

struct Acc {
    rows: BTreeMap<&'static str, (f64, String)>,
}

impl Acc {
    fn record(&mut self, name: &'static str, what: &str, err: f64) {
        let e = self.rows.entry(name).or_insert((0.0, what.to_string()));
        if err.is_nan() || err > e.0 {
            *e = (if err.is_nan() { f64::INFINITY } else { err }, what.to_string());
        }
    }
}

fn diff(a: &Matrix, b: &Matrix) -> f64 {
    if a.shape() != b.shape() {
        f64::INFINITY
    } else {
        a.max_abs_diff(b)
    }
}

fn equiv_seed(seed: u64, polarity: HardPolarity, acc: &mut Acc) -> Result<()> {
    let mut rng = Rng::stream(seed, "equiv");
    let rank = 2 + rng.index(7);
    let (d_in, d_out) = (2 + rng.index(9), 2 + rng.index(9));
    let mut cfg = LoraConfig::new(rank, 1.0 + 31.0 * rng.uniform(0.0, 1.0), d_in, d_out);
    cfg.hard_polarity = polarity;
    let ls = langs();

    // Soft endpoints.
    let bank = random_bank(Variant::ZipperSoft, &cfg, &ls, &mut rng)?;
    let sh = bank.b_shared.clone().expect("soft bank");
    let sp = bank.b_spec[LANGS[0]].clone();
    let zeros = vec![0.0; rank];
    let ones = vec![1.0; rank];
    acc.record("soft(p=0) = B_shared", "B_merged", diff(&zipper_soft_merge(&sh, &sp, &zeros)?, &sh));
    acc.record("soft(p=1) = B_spec", "B_merged", diff(&zipper_soft_merge(&sh, &sp, &ones)?, &sp));
    let d0 = merged_delta(&bank, LANGS[0], Some(&zeros))?.delta;
    acc.record("soft(p=0) = B_shared", "delta", diff(&d0, &zipper_delta(&sh, bank.a.as_ref().unwrap(), &cfg)?));

    // zip(s) = soft(p = s) for binary s.
    let s: Vec<f64> = (0..rank).map(|_| if rng.coin() { 1.0 } else { 0.0 }).collect();
    acc.record(
        "zip(s) = soft(p=s)",
        "B_merged",
        diff(&zip(&sh, &sp, &s, cfg.hard_polarity)?, &zipper_soft_merge(&sh, &sp, &s)?),
    );
    let mut hard = bank.clone();
    hard.variant = Variant::ZipperHard;
    // Router outputs whose threshold pattern is `s`.
    let p_for_s: Vec<f64> = s.iter().map(|&v| if v == 1.0 { 0.75 } else { 0.25 }).collect();
    acc.record(
        "zip(s) = soft(p=s)",
        "hard delta",
        diff(
            &merged_delta(&hard, LANGS[0], Some(&p_for_s))?.delta,
            &merged_delta(&bank, LANGS[0], Some(&s))?.delta,
        ),
    );

    // Static = Soft with the block pattern, including both corners.
    for r_shared in [0, 1 + rng.index(rank - 1), rank] {
        let mut scfg = cfg.clone();
        scfg.r_shared = r_shared;
        scfg.r_spec = rank - r_shared;
        let st = random_bank(Variant::ZipperStatic, &scfg, &ls, &mut rng)?;
        let a = st.a.clone().expect("static bank");
        let st_sh = st.b_shared.clone().expect("static bank");
        let st_sp = st.b_spec[LANGS[1]].clone();
        let merged = zipper_static_merge(&st, &scfg, LANGS[1])?;
        let zero_right = Matrix::zeros(d_out, rank - r_shared);
        let zero_left = Matrix::zeros(d_out, r_shared);
        let padded_sh = st_sh.concat_cols(&zero_right)?;
        let padded_sp = zero_left.concat_cols(&st_sp)?;
        let block: Vec<f64> = (0..rank).map(|i| if i < r_shared { 0.0 } else { 1.0 }).collect();
        let soft = zipper_soft_merge(&padded_sh, &padded_sp, &block)?;
        acc.record("static = soft(block pattern)", "B_merged", diff(&merged, &soft));
        let st_delta = merged_delta(&st, LANGS[1], None)?.delta;
        acc.record(
            "static = soft(block pattern)",
            "delta",
            diff(&st_delta, &zipper_delta(&soft, &a, &scfg)?),
        );
        if r_shared == rank {
            let mut van = AdapterBank::init(Variant::Vanilla, &scfg, &[], &mut rng)?;
            van.a = Some(a.clone());
            van.b_shared = Some(st_sh.clone());
            acc.record("static(r_s=r) = vanilla", "delta", diff(&st_delta, &vanilla_delta(&van, &scfg)?.delta));
        }
        if r_shared == 0 {
            acc.record(
                "static(r_p=r) = B_spec A",
                "delta",
                diff(&st_delta, &st_sp.matmul(&a)?.scale(scfg.scaling())),
            );
        }
    }

    // FlyLoRA with k = r is Vanilla, for every input in a batch.
    let mut fcfg = cfg.clone();
    fcfg.top_k = rank;
    let mut fly = random_bank(Variant::FlyLora, &fcfg, &[], &mut rng)?;
    fly.fly_bias = Some(rng.normal_matrix(1, rank, 1.0));
    let mut van = AdapterBank::init(Variant::Vanilla, &fcfg, &[], &mut rng)?;
    van.a = fly.a.clone();
    van.b_shared = fly.b_shared.clone();
    let vd = vanilla_delta(&van, &fcfg)?.delta;
    for _ in 0..8 {
        let x: Vec<f64> = (0..d_in).map(|_| rng.normal()).collect();
        acc.record("flylora(k=r) = vanilla", "delta", diff(&flylora_delta(&fly, &fcfg, &x)?.delta, &vd));
    }
    Ok(())
}

/// Cross-variant identities over `seeds` random draws. `polarity` sets the
/// Hard-mask convention; the flipped convention is the negative control.
pub fn equiv(seeds: u64, polarity: HardPolarity) -> Result<Vec<CheckRow>> {
    let mut acc = Acc { rows: BTreeMap::new() };
    for seed in 0..seeds {
        equiv_seed(seed, polarity, &mut acc)?;
    }
    Ok(acc
        .rows
        .into_iter()
        .map(|(name, (err, what))| CheckRow {
            suite: "equiv".into(),
            check: name.into(),
            detail: format!("{what} over {seeds} seeds"),
            error: err,
            tolerance: EQUIV_TOLERANCE,
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Isolation

/// Largest gradient magnitude that a language-`l` batch puts on any other
/// language's specific parameters, over `batches` random batches per variant.
pub fn isolation(batches: usize, seed: u64) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    for variant in [
        Variant::Independent,
        Variant::ZipperStatic,
        Variant::ZipperHard,
        Variant::ZipperSoft,
    ] {
        let model = tiny_model(variant, seed)?;
        let cfg = model.config.clone();
        let all = |_: &str| true;
        let mut worst = (String::from("-"), 0.0_f64);
        let mut touched_own = true;
        for b in 0..batches {
            let lang = &cfg.languages[b % cfg.languages.len()];
            let (xs, ys) = tiny_batch(&cfg, 2, derive_seed(seed, &format!("isolation.{b}")));
            let refs: Vec<&Matrix> = xs.iter().collect();
            let chunk = (b % 2 == 1).then_some(cfg.chunk_lengths[b % cfg.chunk_lengths.len()]);
            let (_, grads, _) = batch_gradients(&model, &refs, &ys, lang, chunk, &all)?;
            let mut own = 0.0_f64;
            for (name, role, _) in model.named_params() {
                if role != ParamRole::EncoderAdapter || !(name.contains(".B_spec.") || name.contains(".A_spec.")) {
                    continue;
                }
                let owner = name.rsplit('.').next().unwrap_or_default();
                let g = grads.get(&name).map_or(0.0, Matrix::max_abs);
                if owner == lang {
                    own = own.max(g);
                } else if g > worst.1 || worst.0 == "-" {
                    worst = (format!("{lang} -> {name}"), g);
                }
            }
            touched_own &= own > 0.0;
        }
        if !touched_own {
            return Err(Error::Invariant(format!(
                "{variant}: a batch left its own language bank without gradient"
            )));
        }
        rows.push(CheckRow {
            suite: "isolation".into(),
            check: variant.name().into(),
            detail: worst.0,
            error: worst.1,
            // Exactly zero is required.
            tolerance: f64::MIN_POSITIVE,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scope_names_round_trip() {
        for s in Scope::ALL {
            assert_eq!(s.name().parse::<Scope>().unwrap(), s);
        }
        assert!(matches!("all".parse::<Scope>(), Err(Error::Config(_))));
    }

    #[test]
    fn ops_pass_and_cover_every_differentiable_kind() {
        let rows = gradcheck(Scope::Ops, 0, None).unwrap();
        assert!(all_passed(&rows), "{}", render_table(&rows));
        for kind in OpKind::DIFFERENTIABLE {
            assert!(rows.iter().any(|r| r.check == kind.name()), "no check for {kind}");
        }
    }

    #[test]
    fn corrupted_backward_is_caught_by_name() {
        for kind in [OpKind::MatMul, OpKind::LayerNorm, OpKind::SegmentAttention] {
            let rows = gradcheck(Scope::Ops, 0, Some(kind)).unwrap();
            let failed: Vec<&CheckRow> = rows.iter().filter(|r| !r.passed()).collect();
            assert!(failed.iter().any(|r| r.check == kind.name()), "{}", render_table(&rows));
        }
    }

    #[test]
    fn adapters_and_router_pass() {
        for scope in [Scope::Adapters, Scope::Router] {
            let rows = gradcheck(scope, 3, None).unwrap();
            assert!(all_passed(&rows), "{}", render_table(&rows));
        }
    }

    #[test]
    fn ste_surrogate_differs_from_the_true_hard_function() {
        // Without the pinned identity gate the Hard path is piecewise constant
        // in p, so a plain difference quotient sees zero.
        let mut g = ParamGraph::all_trainable();
        let p = g.bind("p", &Matrix::row_vector(&[0.3, 0.7]));
        let s = g.tape.ste_threshold(p, 0.5);
        let l = weighted_sum(&mut g, s, 1).unwrap();
        let grads = g.param_grads(&g.backward(l).unwrap());
        assert!(grads["p"].max_abs() > 0.1);
        let plain = finite_diff_grad(
            |q| {
                let mut g = ParamGraph::frozen();
                let p = g.bind("p", q);
                let s = g.tape.ste_threshold(p, 0.5);
                let l = weighted_sum(&mut g, s, 1).unwrap();
                g.value(l).get(0, 0)
            },
            &Matrix::row_vector(&[0.3, 0.7]),
            FD_STEP,
        );
        assert_eq!(plain.max_abs(), 0.0);
    }

    #[test]
    fn equiv_holds_and_polarity_flip_breaks_zip() {
        let rows = equiv(8, HardPolarity::SpecOnOne).unwrap();
        assert!(all_passed(&rows), "{}", render_table(&rows));
        let flipped = equiv(8, HardPolarity::SharedOnOne).unwrap();
        let zip_row = flipped.iter().find(|r| r.check.starts_with("zip(s)")).unwrap();
        assert!(!zip_row.passed());
        assert!(flipped.iter().filter(|r| !r.check.starts_with("zip(s)")).all(CheckRow::passed));
    }

    #[test]
    fn isolation_is_exact() {
        let rows = isolation(6, 0).unwrap();
        assert!(all_passed(&rows), "{}", render_table(&rows));
    }
}
