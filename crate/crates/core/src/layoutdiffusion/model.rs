use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::nn::{Mat, Tape, Var};
use super::text::{TextEmbedding, TEXT_DIM};
use super::DiffusionError;
use crate::jawgraph::{JawGraph, ToothId, ToothLayout, FEATURE_DIM, LAYOUT_DIM, NUM_CATEGORIES};

/// Text embeddings are split into this many cross-attention tokens.
pub const TEXT_TOKENS: usize = 4;
const TOKEN_DIM: usize = TEXT_DIM / TEXT_TOKENS;
const CATEGORY_DIM: usize = 16;
pub(crate) const TIME_DIM: usize = 16;
/// Attention relations: the three edge kinds plus self.
const NUM_RELATIONS: usize = 4;
const INPUT_DIM: usize = CATEGORY_DIM + LAYOUT_DIM + FEATURE_DIM + LAYOUT_DIM + 1 + TIME_DIM;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub blocks: usize,
    pub heads: usize,
    pub width: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
}

impl DenoiserConfig {
    /// Five blocks, eight heads, 512-wide attention.
    pub fn paper() -> Self {
        DenoiserConfig {
            blocks: 5,
            heads: 8,
            width: 512,
            ffn_mult: 4,
            dropout: 0.1,
        }
    }

    /// Reduced-width profile for desk-scale training and tests.
    pub fn toy() -> Self {
        DenoiserConfig {
            blocks: 3,
            heads: 4,
            width: 64,
            ffn_mult: 2,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<(), DiffusionError> {
        if self.blocks == 0 || self.heads == 0 || self.width == 0 || self.ffn_mult == 0 {
            return Err(DiffusionError::Config("denoiser dimensions must be positive".into()));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(DiffusionError::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(DiffusionError::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Per-channel affine map of layouts to zero mean and unit variance,
/// with separate statistics for every tooth category. Categories absent
/// from the training set use the pooled statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<[f64; LAYOUT_DIM]>,
    pub std: Vec<[f64; LAYOUT_DIM]>,
}

/// Smallest per-channel standard deviation, in layout units.
const STD_FLOOR: f64 = 1e-2;

fn moments(rows: &[[f64; LAYOUT_DIM]]) -> ([f64; LAYOUT_DIM], [f64; LAYOUT_DIM]) {
    let n = rows.len() as f64;
    let mut mean = [0.0; LAYOUT_DIM];
    let mut std = [0.0; LAYOUT_DIM];
    for c in 0..LAYOUT_DIM {
        mean[c] = rows.iter().map(|r| r[c]).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r[c] - mean[c]).powi(2)).sum::<f64>() / n;
        std[c] = var.sqrt().max(STD_FLOOR);
    }
    (mean, std)
}

impl Normalizer {
    pub fn identity() -> Self {
        Normalizer {
            mean: vec![[0.0; LAYOUT_DIM]; NUM_CATEGORIES],
            std: vec![[1.0; LAYOUT_DIM]; NUM_CATEGORIES],
        }
    }

    /// Statistics over every defined layout in `graphs`.
    pub fn fit(graphs: &[JawGraph]) -> Self {
        let mut by_cat: Vec<Vec<[f64; LAYOUT_DIM]>> = vec![Vec::new(); NUM_CATEGORIES];
        let mut all = Vec::new();
        for g in graphs {
            for node in &g.nodes {
                if let (Some(l), Some(c)) = (node.layout, node.tooth_id.category()) {
                    by_cat[c].push(l.to_array());
                    all.push(l.to_array());
                }
            }
        }
        if all.is_empty() {
            return Normalizer::identity();
        }
        let pooled = moments(&all);
        let (mean, std) = by_cat
            .iter()
            .map(|rows| if rows.len() >= 2 { moments(rows) } else { pooled })
            .unzip();
        Normalizer { mean, std }
    }

    pub fn check(&self) -> Result<(), DiffusionError> {
        if self.mean.len() != NUM_CATEGORIES || self.std.len() != NUM_CATEGORIES {
            return Err(DiffusionError::Config(format!(
                "normalizer needs {NUM_CATEGORIES} categories, has {} means and {} deviations",
                self.mean.len(),
                self.std.len()
            )));
        }
        if self.std.iter().flatten().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(DiffusionError::Config("normalizer deviations must be positive".into()));
        }
        Ok(())
    }

    pub fn normalize(&self, category: usize, l: &ToothLayout) -> [f64; LAYOUT_DIM] {
        let a = l.to_array();
        let (m, s) = (&self.mean[category], &self.std[category]);
        std::array::from_fn(|c| (a[c] - m[c]) / s[c])
    }

    pub fn denormalize(&self, category: usize, x: &[f64; LAYOUT_DIM]) -> [f64; LAYOUT_DIM] {
        let (m, s) = (&self.mean[category], &self.std[category]);
        std::array::from_fn(|c| x[c] * s[c] + m[c])
    }
}

/// A jaw graph reordered along the arch and flattened into the tensors the
/// denoiser consumes.
#[derive(Debug, Clone)]
pub struct GraphInput {
    pub ids: Vec<ToothId>,
    /// `perm[i]` is the index in the original graph of canonical node `i`.
    pub perm: Vec<usize>,
    pub categories: Vec<usize>,
    pub observed: Vec<bool>,
    /// Normalized layouts of observed nodes; zeros for missing ones.
    pub source: Vec<[f64; LAYOUT_DIM]>,
    pub features: Mat,
    relations: Rc<Vec<Mat>>,
    mask: Mat,
}

impl GraphInput {
    pub fn new(graph: &JawGraph, norm: &Normalizer) -> Result<Self, DiffusionError> {
        let (canon, perm) = graph.canonicalized()?;
        let n = canon.nodes.len();
        let mut relations = vec![Mat::zeros(n, n); NUM_RELATIONS];
        let mut mask = Mat::filled(n, n, f64::NEG_INFINITY);
        for i in 0..n {
            *relations[NUM_RELATIONS - 1].at_mut(i, i) = 1.0;
            *mask.at_mut(i, i) = 0.0;
        }
        for e in &canon.edges {
            let r = e.relation.index();
            for (a, b) in [(e.src, e.dst), (e.dst, e.src)] {
                *relations[r].at_mut(a, b) = 1.0;
                *mask.at_mut(a, b) = 0.0;
            }
        }
        let mut features = Mat::zeros(n, FEATURE_DIM);
        let mut source = Vec::with_capacity(n);
        let mut observed = Vec::with_capacity(n);
        let mut categories = Vec::with_capacity(n);
        for (i, node) in canon.nodes.iter().enumerate() {
            categories.push(node.tooth_id.category().ok_or(DiffusionError::Graph(
                crate::jawgraph::JawGraphError::InvalidFdi(node.tooth_id.0),
            ))?);
            let obs = !node.missing && node.layout.is_some();
            observed.push(obs);
            source.push(match (obs, &node.layout) {
                (true, Some(l)) => norm.normalize(categories[i], l),
                _ => [0.0; LAYOUT_DIM],
            });
            for (c, v) in node.features.iter().take(FEATURE_DIM).enumerate() {
                *features.at_mut(i, c) = *v;
            }
        }
        Ok(GraphInput {
            ids: canon.nodes.iter().map(|n| n.tooth_id).collect(),
            perm,
            categories,
            observed,
            source,
            features,
            relations: Rc::new(relations),
            mask,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn missing_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.observed[i]).collect()
    }
}

struct BlockParams {
    ln1: (usize, usize),
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    bo: usize,
    rel_bias: usize,
    ln2: (usize, usize),
    cq: usize,
    ck: usize,
    cv: usize,
    co: usize,
    ln3: (usize, usize),
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Graph transformer predicting the noise in each node's layout.
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: Vec<Mat>,
    pub names: Vec<String>,
    cat_emb: usize,
    w_in: usize,
    b_in: usize,
    blocks: Vec<BlockParams>,
    ln_out: (usize, usize),
    w_out: usize,
    b_out: usize,
}

impl Clone for Denoiser {
    fn clone(&self) -> Self {
        let mut d = Denoiser::layout_only(self.config);
        d.params = self.params.clone();
        d
    }
}

impl std::fmt::Debug for Denoiser {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Denoiser")
            .field("config", &self.config)
            .field("num_params", &self.num_params())
            .finish()
    }
}

struct Builder<'r> {
    params: Vec<Mat>,
    names: Vec<String>,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl Builder<'_> {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        let m = match (&mut self.rng, init) {
            (None, _) => Mat::zeros(0, 0),
            (Some(_), Init::Zeros) => Mat::zeros(rows, cols),
            (Some(_), Init::Ones) => Mat::filled(rows, cols, 1.0),
            (Some(rng), Init::Normal(s)) => Mat::randn(rows, cols, s, *rng),
        };
        self.params.push(m);
        self.names.push(name);
        self.params.len() - 1
    }

    fn linear(&mut self, name: String, fan_in: usize, fan_out: usize) -> usize {
        self.add(name, fan_in, fan_out, Init::Normal(1.0 / (fan_in as f64).sqrt()))
    }

    fn ln(&mut self, name: &str, width: usize) -> (usize, usize) {
        (
            self.add(format!("{name}.gain"), 1, width, Init::Ones),
            self.add(format!("{name}.bias"), 1, width, Init::Zeros),
        )
    }
}

#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

impl Denoiser {
    /// Randomly initialized denoiser.
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self, DiffusionError> {
        use rand::SeedableRng;
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self::build(config, Some(&mut rng)))
    }

    /// Parameter shapes as `(name, rows, cols)`.
    pub fn shapes(config: DenoiserConfig) -> Vec<(String, usize, usize)> {
        let d = config.width;
        let f = d * config.ffn_mult;
        let mut out = vec![
            ("category_embedding".to_string(), NUM_CATEGORIES, CATEGORY_DIM),
            ("input.weight".into(), INPUT_DIM, d),
            ("input.bias".into(), 1, d),
        ];
        for b in 0..config.blocks {
            let p = |s: &str| format!("block{b}.{s}");
            out.extend([
                (p("ln1.gain"), 1, d),
                (p("ln1.bias"), 1, d),
                (p("attn.q"), d, d),
                (p("attn.k"), d, d),
                (p("attn.v"), d, d),
                (p("attn.o"), d, d),
                (p("attn.o_bias"), 1, d),
                (p("attn.relation_bias"), 1, NUM_RELATIONS * config.heads),
                (p("ln2.gain"), 1, d),
                (p("ln2.bias"), 1, d),
                (p("cross.q"), d, d),
                (p("cross.k"), TOKEN_DIM, d),
                (p("cross.v"), TOKEN_DIM, d),
                (p("cross.o"), d, d),
                (p("ln3.gain"), 1, d),
                (p("ln3.bias"), 1, d),
                (p("ffn.w1"), d, f),
                (p("ffn.b1"), 1, f),
                (p("ffn.w2"), f, d),
                (p("ffn.b2"), 1, d),
            ]);
        }
        out.extend([
            ("output.ln.gain".to_string(), 1, d),
            ("output.ln.bias".into(), 1, d),
            ("output.weight".into(), d, LAYOUT_DIM),
            ("output.bias".into(), 1, LAYOUT_DIM),
        ]);
        out
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Mat::len).sum()
    }

    /// Index bookkeeping without allocating weights.
    fn layout_only(config: DenoiserConfig) -> Self {
        Self::build(config, None)
    }

    fn build(config: DenoiserConfig, rng: Option<&mut ChaCha8Rng>) -> Self {
        let shapes = Self::shapes(config);
        let d = config.width;
        let f = d * config.ffn_mult;
        let mut b = Builder {
            params: Vec::new(),
            names: Vec::new(),
            rng,
        };
        let cat_emb = b.add(shapes[0].0.clone(), NUM_CATEGORIES, CATEGORY_DIM, Init::Normal(1.0));
        let w_in = b.linear(shapes[1].0.clone(), INPUT_DIM, d);
        let b_in = b.add(shapes[2].0.clone(), 1, d, Init::Zeros);
        let mut blocks = Vec::new();
        for i in 0..config.blocks {
            let p = |s: &str| format!("block{i}.{s}");
            let ln1 = b.ln(&p("ln1"), d);
            let wq = b.linear(p("attn.q"), d, d);
            let wk = b.linear(p("attn.k"), d, d);
            let wv = b.linear(p("attn.v"), d, d);
            let wo = b.linear(p("attn.o"), d, d);
            let bo = b.add(p("attn.o_bias"), 1, d, Init::Zeros);
            let rel_bias = b.add(p("attn.relation_bias"), 1, NUM_RELATIONS * config.heads, Init::Zeros);
            let ln2 = b.ln(&p("ln2"), d);
            let cq = b.linear(p("cross.q"), d, d);
            let ck = b.linear(p("cross.k"), TOKEN_DIM, d);
            let cv = b.linear(p("cross.v"), TOKEN_DIM, d);
            let co = b.linear(p("cross.o"), d, d);
            let ln3 = b.ln(&p("ln3"), d);
            let w1 = b.linear(p("ffn.w1"), d, f);
            let b1 = b.add(p("ffn.b1"), 1, f, Init::Zeros);
            let w2 = b.linear(p("ffn.w2"), f, d);
            let b2 = b.add(p("ffn.b2"), 1, d, Init::Zeros);
            blocks.push(BlockParams {
                ln1,
                wq,
                wk,
                wv,
                wo,
                bo,
                rel_bias,
                ln2,
                cq,
                ck,
                cv,
                co,
                ln3,
                w1,
                b1,
                w2,
                b2,
            });
        }
        let ln_out = b.ln("output.ln", d);
        let w_out = b.add("output.weight".into(), d, LAYOUT_DIM, Init::Normal(0.01 / (d as f64).sqrt()));
        let b_out = b.add("output.bias".into(), 1, LAYOUT_DIM, Init::Zeros);

        debug_assert!(b.names.iter().zip(&shapes).all(|(a, s)| *a == s.0));
        Denoiser {
            config,
            params: b.params,
            names: b.names,
            cat_emb,
            w_in,
            b_in,
            blocks,
            ln_out,
            w_out,
            b_out,
        }
    }

    /// Rebuilds a denoiser from stored parameters, checking their shapes.
    pub fn from_params(config: DenoiserConfig, params: Vec<Mat>) -> Result<Self, DiffusionError> {
        config.validate()?;
        let shapes = Self::shapes(config);
        if shapes.len() != params.len() {
            return Err(DiffusionError::Config(format!(
                "expected {} parameter tensors, found {}",
                shapes.len(),
                params.len()
            )));
        }
        for ((name, r, c), p) in shapes.iter().zip(&params) {
            if (p.rows, p.cols) != (*r, *c) {
                return Err(DiffusionError::Config(format!(
                    "{name}: expected {r}x{c}, found {}x{}",
                    p.rows, p.cols
                )));
            }
        }
        let mut d = Self::layout_only(config);
        d.params = params;
        Ok(d)
    }

    /// Records the forward pass on `tape` and returns the `n x 8` noise
    /// prediction. Rows of `x` for observed nodes should hold their clean
    /// normalized layouts. `dropout_rng` enables dropout.
    pub fn forward(
        &self,
        tape: &mut Tape,
        input: &GraphInput,
        x: &[[f64; LAYOUT_DIM]],
        t: usize,
        t_max: usize,
        text: &TextEmbedding,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Var {
        let n = input.len();
        let cfg = &self.config;
        let d = cfg.width;
        let heads = cfg.heads;
        let dh = d / heads;

        let mut noisy = Mat::zeros(n, LAYOUT_DIM);
        let mut src = Mat::zeros(n, LAYOUT_DIM + 1);
        for i in 0..n {
            noisy.data[i * LAYOUT_DIM..(i + 1) * LAYOUT_DIM].copy_from_slice(&x[i]);
            src.data[i * (LAYOUT_DIM + 1)..i * (LAYOUT_DIM + 1) + LAYOUT_DIM]
                .copy_from_slice(&input.source[i]);
            src.data[i * (LAYOUT_DIM + 1) + LAYOUT_DIM] = if input.observed[i] { 1.0 } else { 0.0 };
        }
        let temb = timestep_embedding(t, t_max);
        let mut time = Mat::zeros(n, TIME_DIM);
        for i in 0..n {
            time.data[i * TIME_DIM..(i + 1) * TIME_DIM].copy_from_slice(&temb);
        }
        let tokens = Mat::from_vec(TEXT_TOKENS, TOKEN_DIM, text.vector.clone());

        let cat_table = tape.param(self.cat_emb);
        let cat = tape.gather(cat_table, input.categories.clone());
        let noisy = tape.constant(noisy);
        let feats = tape.constant(input.features.clone());
        let src = tape.constant(src);
        let time = tape.constant(time);
        let h = tape.hcat(&[cat, noisy, feats, src, time]);
        let w_in = tape.param(self.w_in);
        let b_in = tape.param(self.b_in);
        let h = tape.matmul(h, w_in);
        let mut h = tape.add_row(h, b_in);

        let mask = tape.constant(input.mask.clone());
        let tokens = tape.constant(tokens);
        let scale = 1.0 / (dh as f64).sqrt();

        for bp in &self.blocks {
            // graph self-attention over edges with per-relation biases
            let a = layer_norm(tape, h, bp.ln1);
            let wq = tape.param(bp.wq);
            let wk = tape.param(bp.wk);
            let wv = tape.param(bp.wv);
            let q = tape.matmul(a, wq);
            let k = tape.matmul(a, wk);
            let v = tape.matmul(a, wv);
            let rel = tape.param(bp.rel_bias);
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = tape.cols(q, hd * dh, dh);
                let kh = tape.cols(k, hd * dh, dh);
                let vh = tape.cols(v, hd * dh, dh);
                let s = tape.matmul_nt(qh, kh);
                let s = tape.scale(s, scale);
                let idx = (0..NUM_RELATIONS).map(|r| r * heads + hd).collect();
                let s = tape.add_weighted(s, input.relations.clone(), rel, idx);
                let s = tape.add(s, mask);
                let p = tape.softmax_rows(s);
                outs.push(tape.matmul(p, vh));
            }
            let o = tape.hcat(&outs);
            let wo = tape.param(bp.wo);
            let bo = tape.param(bp.bo);
            let o = tape.matmul(o, wo);
            let o = tape.add_row(o, bo);
            let o = dropout(tape, o, cfg.dropout, dropout_rng.as_deref_mut());
            h = tape.add(h, o);

            // cross-attention to the prompt tokens
            let c = layer_norm(tape, h, bp.ln2);
            let cq = tape.param(bp.cq);
            let ck = tape.param(bp.ck);
            let cv = tape.param(bp.cv);
            let q = tape.matmul(c, cq);
            let k = tape.matmul(tokens, ck);
            let v = tape.matmul(tokens, cv);
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = tape.cols(q, hd * dh, dh);
                let kh = tape.cols(k, hd * dh, dh);
                let vh = tape.cols(v, hd * dh, dh);
                let s = tape.matmul_nt(qh, kh);
                let s = tape.scale(s, scale);
                let p = tape.softmax_rows(s);
                outs.push(tape.matmul(p, vh));
            }
            let o = tape.hcat(&outs);
            let co = tape.param(bp.co);
            let o = tape.matmul(o, co);
            let o = dropout(tape, o, cfg.dropout, dropout_rng.as_deref_mut());
            h = tape.add(h, o);

            let f = layer_norm(tape, h, bp.ln3);
            let w1 = tape.param(bp.w1);
            let b1 = tape.param(bp.b1);
            let w2 = tape.param(bp.w2);
            let b2 = tape.param(bp.b2);
            let f = tape.matmul(f, w1);
            let f = tape.add_row(f, b1);
            let f = tape.silu(f);
            let f = tape.matmul(f, w2);
            let f = tape.add_row(f, b2);
            let f = dropout(tape, f, cfg.dropout, dropout_rng.as_deref_mut());
            h = tape.add(h, f);
        }

        let h = layer_norm(tape, h, self.ln_out);
        let w_out = tape.param(self.w_out);
        let b_out = tape.param(self.b_out);
        let y = tape.matmul(h, w_out);
        tape.add_row(y, b_out)
    }

    /// Noise prediction without dropout, one row per canonical node.
    pub fn predict(
        &self,
        input: &GraphInput,
        x: &[[f64; LAYOUT_DIM]],
        t: usize,
        t_max: usize,
        text: &TextEmbedding,
    ) -> Vec<[f64; LAYOUT_DIM]> {
        let mut tape = Tape::new(&self.params);
        let out = self.forward(&mut tape, input, x, t, t_max, text, None);
        let m = tape.value(out);
        (0..m.rows)
            .map(|r| std::array::from_fn(|c| m.at(r, c)))
            .collect()
    }
}

fn layer_norm(tape: &mut Tape, x: Var, (gain, bias): (usize, usize)) -> Var {
    let n = tape.normalize(x);
    let g = tape.param(gain);
    let b = tape.param(bias);
    let n = tape.mul_row(n, g);
    tape.add_row(n, b)
}

fn dropout(tape: &mut Tape, x: Var, p: f64, rng: Option<&mut ChaCha8Rng>) -> Var {
    let Some(rng) = rng else { return x };
    if p == 0.0 {
        return x;
    }
    let shape = tape.value(x);
    let (rows, cols) = (shape.rows, shape.cols);
    let keep = 1.0 / (1.0 - p);
    let m = Mat::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect(),
    );
    let m = tape.constant(m);
    tape.mul(x, m)
}

/// Sinusoidal embedding of `t / t_max` on a 0..1000 scale.
pub fn timestep_embedding(t: usize, t_max: usize) -> [f64; TIME_DIM] {
    let pos = 1000.0 * t as f64 / t_max.max(1) as f64;
    let half = TIME_DIM / 2;
    let mut out = [0.0; TIME_DIM];
    for k in 0..half {
        let freq = (-(1000f64).ln() * k as f64 / half as f64).exp();
        out[k] = (pos * freq).sin();
        out[half + k] = (pos * freq).cos();
    }
    out
}

/// Prompt describing which teeth a source graph lacks.
pub fn missing_prompt(graph: &JawGraph) -> String {
    let missing: Vec<String> = graph
        .nodes
        .iter()
        .filter(|n| n.missing)
        .map(|n| n.tooth_id.to_string())
        .collect();
    if missing.is_empty() {
        format!("complete {} jaw", graph.jaw_side)
    } else {
        format!("{} jaw missing teeth {}", graph.jaw_side, missing.join(" "))
    }
}
