//! Post-norm transformer encoder over fused text and region inputs, with a
//! linear prediction head over the text positions and hand-written
//! backpropagation.
//!
//! Parameters are stored as an ordered list of named flat tensors so that the
//! optimizer, checkpointing and gradient checks can treat them uniformly. The
//! role of each tensor is fixed by [`EncoderConfig`]; see [`Parameters::names`].

mod checkpoint;

pub use checkpoint::{
    load, load_with_config, read_tensor_file, save, write_tensor_file, TensorFile,
};

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batch::{EncodedBatch, SEGMENT_REGION};
use crate::rng;

/// Added to disallowed attention scores before the softmax.
pub const MASK_BIAS: f64 = -1e9;
const LN_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite input: {0}")]
    NonFiniteInput(String),
    #[error("forward result carries no cached intermediates")]
    MissingForwardCache,
    #[error("invalid encoder configuration: {0}")]
    BadConfig(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub n_segments: usize,
    /// Appearance features plus the six geometry values.
    pub d_region: usize,
    /// Reuse the token embedding table as the prediction head weight.
    pub tie_head: bool,
    /// Inverted dropout after the attention and feed-forward projections.
    /// Only applied by [`forward_with_dropout`].
    pub dropout: f64,
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 32,
            heads: 2,
            ff_dim: 64,
            vocab_size: 0,
            max_positions: 64,
            n_segments: 3,
            d_region: 22,
            tie_head: false,
            dropout: 0.0,
            init_std: 0.02,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: String| Err(EncoderError::BadConfig(m));
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.ff_dim == 0 {
            return bad("layers, hidden, heads and ff_dim must be positive".into());
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return bad(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            ));
        }
        if self.vocab_size == 0 || self.max_positions == 0 || self.d_region == 0 {
            return bad("vocab_size, max_positions and d_region must be positive".into());
        }
        if self.n_segments != 3 {
            return bad(format!("n_segments must be 3, got {}", self.n_segments));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return bad(format!("init_std {}", self.init_std));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct LayerSlots {
    q_w: usize,
    q_b: usize,
    k_w: usize,
    k_b: usize,
    v_w: usize,
    v_b: usize,
    o_w: usize,
    o_b: usize,
    attn_gamma: usize,
    attn_beta: usize,
    ff_in_w: usize,
    ff_in_b: usize,
    ff_out_w: usize,
    ff_out_b: usize,
    ff_gamma: usize,
    ff_beta: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Slots {
    token: usize,
    segment: usize,
    position: usize,
    region_w: usize,
    region_b: usize,
    embed_gamma: usize,
    embed_beta: usize,
    layers: Vec<LayerSlots>,
    head_w: Option<usize>,
    head_b: usize,
}

#[derive(Default)]
struct LayoutBuilder {
    specs: Vec<(String, Vec<usize>, Init)>,
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Zero,
    One,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push((name, shape, init));
        self.specs.len() - 1
    }
}

fn layout(c: &EncoderConfig) -> (Slots, Vec<(String, Vec<usize>, Init)>) {
    let h = c.hidden;
    let mut b = LayoutBuilder::default();
    let token = b.add(
        "embeddings.token".into(),
        vec![c.vocab_size, h],
        Init::Normal,
    );
    let segment = b.add(
        "embeddings.segment".into(),
        vec![c.n_segments, h],
        Init::Normal,
    );
    let position = b.add(
        "embeddings.position".into(),
        vec![c.max_positions, h],
        Init::Normal,
    );
    let region_w = b.add(
        "embeddings.region.weight".into(),
        vec![c.d_region, h],
        Init::Normal,
    );
    let region_b = b.add("embeddings.region.bias".into(), vec![h], Init::Zero);
    let embed_gamma = b.add("embeddings.norm.gamma".into(), vec![h], Init::One);
    let embed_beta = b.add("embeddings.norm.beta".into(), vec![h], Init::Zero);
    let mut layers = Vec::with_capacity(c.layers);
    for l in 0..c.layers {
        let p = |n: &str| format!("layers.{l}.{n}");
        layers.push(LayerSlots {
            q_w: b.add(p("attention.query.weight"), vec![h, h], Init::Normal),
            q_b: b.add(p("attention.query.bias"), vec![h], Init::Zero),
            k_w: b.add(p("attention.key.weight"), vec![h, h], Init::Normal),
            k_b: b.add(p("attention.key.bias"), vec![h], Init::Zero),
            v_w: b.add(p("attention.value.weight"), vec![h, h], Init::Normal),
            v_b: b.add(p("attention.value.bias"), vec![h], Init::Zero),
            o_w: b.add(p("attention.output.weight"), vec![h, h], Init::Normal),
            o_b: b.add(p("attention.output.bias"), vec![h], Init::Zero),
            attn_gamma: b.add(p("attention.norm.gamma"), vec![h], Init::One),
            attn_beta: b.add(p("attention.norm.beta"), vec![h], Init::Zero),
            ff_in_w: b.add(p("feed_forward.in.weight"), vec![h, c.ff_dim], Init::Normal),
            ff_in_b: b.add(p("feed_forward.in.bias"), vec![c.ff_dim], Init::Zero),
            ff_out_w: b.add(
                p("feed_forward.out.weight"),
                vec![c.ff_dim, h],
                Init::Normal,
            ),
            ff_out_b: b.add(p("feed_forward.out.bias"), vec![h], Init::Zero),
            ff_gamma: b.add(p("feed_forward.norm.gamma"), vec![h], Init::One),
            ff_beta: b.add(p("feed_forward.norm.beta"), vec![h], Init::Zero),
        });
    }
    let head_w =
        (!c.tie_head).then(|| b.add("head.weight".into(), vec![h, c.vocab_size], Init::Normal));
    let head_b = b.add("head.bias".into(), vec![c.vocab_size], Init::Zero);
    (
        Slots {
            token,
            segment,
            position,
            region_w,
            region_b,
            embed_gamma,
            embed_beta,
            layers,
            head_w,
            head_b,
        },
        b.specs,
    )
}

/// Model parameters (and, with the same layout, their gradients).
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    config: EncoderConfig,
    slots: Slots,
    tensors: Vec<Tensor>,
}

pub type Gradients = Parameters;

impl Parameters {
    /// Weights drawn from `N(0, init_std)`, layer-norm scales one, biases zero.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut rng = rng::seeded(seed);
        let normal = Normal::new(0.0, config.init_std)
            .map_err(|e| EncoderError::BadConfig(e.to_string()))?;
        Ok(Self::build(config, |init, len| match init {
            Init::Normal => (0..len).map(|_| normal.sample(&mut rng)).collect(),
            Init::Zero => vec![0.0; len],
            Init::One => vec![1.0; len],
        }))
    }

    /// Every value zero except layer-norm scales, which are one.
    pub fn zeros(config: &EncoderConfig) -> Result<Self, EncoderError> {
        config.validate()?;
        Ok(Self::build(config, |init, len| match init {
            Init::One => vec![1.0; len],
            _ => vec![0.0; len],
        }))
    }

    /// Same layout, all values zero. Used for gradient accumulators.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in &mut out.tensors {
            t.data.iter_mut().for_each(|x| *x = 0.0);
        }
        out
    }

    fn build(config: &EncoderConfig, mut fill: impl FnMut(Init, usize) -> Vec<f64>) -> Self {
        let (slots, specs) = layout(config);
        let tensors = specs
            .into_iter()
            .map(|(name, shape, init)| {
                let data = fill(init, shape.iter().product());
                Tensor { name, shape, data }
            })
            .collect();
        Self {
            config: config.clone(),
            slots,
            tensors,
        }
    }

    /// Assembles parameters from named tensors, which must match the layout
    /// implied by `config` exactly (names, order and shapes).
    pub fn from_tensors(
        config: &EncoderConfig,
        tensors: Vec<Tensor>,
    ) -> Result<Self, EncoderError> {
        config.validate()?;
        let (slots, specs) = layout(config);
        if specs.len() != tensors.len() {
            return Err(EncoderError::ShapeMismatch(format!(
                "expected {} tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        for ((name, shape, _), t) in specs.iter().zip(&tensors) {
            if *name != t.name || *shape != t.shape {
                return Err(EncoderError::ShapeMismatch(format!(
                    "expected {name} {shape:?}, got {} {:?}",
                    t.name, t.shape
                )));
            }
            if t.data.len() != shape.iter().product::<usize>() {
                return Err(EncoderError::ShapeMismatch(format!(
                    "{name}: {} values for shape {shape:?}",
                    t.data.len()
                )));
            }
        }
        Ok(Self {
            config: config.clone(),
            slots,
            tensors,
        })
    }

    /// Names and shapes of every tensor for `config`, in storage order.
    pub fn names(config: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
        layout(config)
            .1
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect()
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    /// `self += scale * other`. Layouts must match.
    pub fn add_scaled(&mut self, other: &Parameters, scale: f64) {
        debug_assert_eq!(self.config, other.config);
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|x| x * x)
            .sum()
    }

    fn mat(&self, slot: usize) -> ArrayView2<'_, f64> {
        let t = &self.tensors[slot];
        ArrayView2::from_shape((t.shape[0], t.shape[1]), &t.data).expect("layout shape")
    }

    fn vec(&self, slot: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.tensors[slot].data[..])
    }

    fn mat_mut(&mut self, slot: usize) -> ArrayViewMut2<'_, f64> {
        let t = &mut self.tensors[slot];
        ArrayViewMut2::from_shape((t.shape[0], t.shape[1]), &mut t.data).expect("layout shape")
    }

    fn vec_mut(&mut self, slot: usize) -> ArrayViewMut1<'_, f64> {
        ArrayViewMut1::from(&mut self.tensors[slot].data[..])
    }

    fn head_weight(&self) -> ArrayView2<'_, f64> {
        match self.slots.head_w {
            Some(w) => self.mat(w),
            None => self.mat(self.slots.token).reversed_axes(),
        }
    }
}

#[derive(Debug, Clone)]
struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    context: Array2<f64>,
    attn_drop: Option<Array2<f64>>,
    attn_norm: NormCache,
    h1: Array2<f64>,
    ff_pre: Array2<f64>,
    ff_act: Array2<f64>,
    ff_drop: Option<Array2<f64>>,
    ff_norm: NormCache,
}

#[derive(Debug, Clone)]
struct Cache {
    embed_norm: NormCache,
    layers: Vec<LayerCache>,
}

#[derive(Debug, Clone)]
pub struct ForwardResult {
    /// `(text + regions) x hidden` output of the last layer.
    pub last_layer: Array2<f64>,
    /// `text x vocab_size` prediction logits.
    pub logits: Array2<f64>,
    cache: Option<Cache>,
}

impl ForwardResult {
    pub fn logits_at(&self, position: usize) -> ArrayView1<'_, f64> {
        self.logits.row(position)
    }

    pub fn probs_at(&self, position: usize) -> Array1<f64> {
        softmax(self.logits.row(position))
    }

    pub fn log_probs_at(&self, position: usize) -> Array1<f64> {
        log_softmax(self.logits.row(position))
    }

    /// Drops the intermediates kept for [`backward`].
    pub fn without_cache(mut self) -> Self {
        self.cache = None;
        self
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }
}

pub fn softmax(logits: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let mut out = logits.mapv(|x| (x - max).exp());
    let sum = out.sum();
    out /= sum;
    out
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn log_softmax(logits: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let lse = logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    logits.mapv(|x| x - lse)
}

fn check_batch(c: &EncoderConfig, batch: &EncodedBatch) -> Result<(), EncoderError> {
    let text = batch.text_len();
    let n = batch.seq_len();
    let err = |m: String| Err(EncoderError::ShapeMismatch(m));
    if text == 0 && batch.num_regions() == 0 {
        return err("empty batch".into());
    }
    if batch.position_ids.len() != text {
        return err(format!(
            "{} position ids for {text} tokens",
            batch.position_ids.len()
        ));
    }
    if batch.segment_ids.len() != n {
        return err(format!(
            "{} segment ids for {n} positions",
            batch.segment_ids.len()
        ));
    }
    if batch.attn_mask.shape() != [n, n] {
        return err(format!(
            "attention mask {:?} for {n} positions",
            batch.attn_mask.shape()
        ));
    }
    if batch.num_regions() > 0 && batch.regions.ncols() != c.d_region {
        return err(format!(
            "region width {} != d_region {}",
            batch.regions.ncols(),
            c.d_region
        ));
    }
    if let Some(id) = batch
        .token_ids
        .iter()
        .find(|&&id| id as usize >= c.vocab_size)
    {
        return err(format!("token id {id} >= vocab_size {}", c.vocab_size));
    }
    if let Some(p) = batch.position_ids.iter().find(|&&p| p >= c.max_positions) {
        return err(format!(
            "position id {p} >= max_positions {}",
            c.max_positions
        ));
    }
    if let Some(s) = batch.segment_ids.iter().find(|&&s| s >= c.n_segments) {
        return err(format!("segment id {s} >= {}", c.n_segments));
    }
    if !batch.regions.iter().all(|x| x.is_finite()) {
        return Err(EncoderError::NonFiniteInput("region features".into()));
    }
    Ok(())
}

fn layer_norm(
    x: &Array2<f64>,
    gamma: ArrayView1<'_, f64>,
    beta: ArrayView1<'_, f64>,
) -> (Array2<f64>, NormCache) {
    let (n, h) = x.dim();
    let mut xhat = Array2::zeros((n, h));
    let mut inv_std = Array1::zeros(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.sum() / h as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = inv;
        for j in 0..h {
            xhat[[i, j]] = (row[j] - mean) * inv;
        }
    }
    let y = &xhat * &gamma + beta;
    (y, NormCache { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &NormCache,
    gamma: ArrayView1<'_, f64>,
    mut dgamma: ArrayViewMut1<'_, f64>,
    mut dbeta: ArrayViewMut1<'_, f64>,
) -> Array2<f64> {
    let (n, h) = dy.dim();
    dgamma += &(dy * &cache.xhat).sum_axis(Axis(0));
    dbeta += &dy.sum_axis(Axis(0));
    let dxhat = dy * &gamma;
    let mut dx = Array2::zeros((n, h));
    let hf = h as f64;
    for i in 0..n {
        let d = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let sum_d = d.sum();
        let sum_dx = d.dot(&xh);
        let scale = cache.inv_std[i] / hf;
        for j in 0..h {
            dx[[i, j]] = scale * (hf * d[j] - sum_d - xh[j] * sum_dx);
        }
    }
    dx
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn dropout_mask(rows: usize, cols: usize, p: f64, seed: u64) -> Array2<f64> {
    let mut rng = rng::seeded(seed);
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_simple_fn(
        (rows, cols),
        || if rng.gen::<f64>() < p { 0.0 } else { keep },
    )
}

fn linear(x: &Array2<f64>, w: ArrayView2<'_, f64>, b: ArrayView1<'_, f64>) -> Array2<f64> {
    x.dot(&w) + b
}

/// `grad_w += x^T dy`, `grad_b += sum_rows(dy)`.
fn linear_grads(params: &mut Parameters, w: usize, b: usize, x: &Array2<f64>, dy: &Array2<f64>) {
    general_mat_mul(1.0, &x.t(), dy, 1.0, &mut params.mat_mut(w));
    let mut gb = params.vec_mut(b);
    gb += &dy.sum_axis(Axis(0));
}

fn layer_forward(
    params: &Parameters,
    ls: &LayerSlots,
    input: Array2<f64>,
    bias: &Array2<f64>,
    dropout: Option<(f64, u64)>,
) -> (Array2<f64>, LayerCache) {
    let c = &params.config;
    let n = input.nrows();
    let dh = c.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let q = linear(&input, params.mat(ls.q_w), params.vec(ls.q_b));
    let k = linear(&input, params.mat(ls.k_w), params.vec(ls.k_b));
    let v = linear(&input, params.mat(ls.v_w), params.vec(ls.v_b));
    let mut context = Array2::zeros((n, c.hidden));
    let mut probs = Vec::with_capacity(c.heads);
    for head in 0..c.heads {
        let cols = s![.., head * dh..(head + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        scores *= scale;
        scores += bias;
        for mut row in scores.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        context.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    let mut attn = linear(&context, params.mat(ls.o_w), params.vec(ls.o_b));
    let attn_drop = dropout.map(|(p, seed)| dropout_mask(n, c.hidden, p, rng::derive(seed, 0, 0)));
    if let Some(m) = &attn_drop {
        attn *= m;
    }
    let (h1, attn_norm) = layer_norm(
        &(&input + &attn),
        params.vec(ls.attn_gamma),
        params.vec(ls.attn_beta),
    );
    let ff_pre = linear(&h1, params.mat(ls.ff_in_w), params.vec(ls.ff_in_b));
    let ff_act = ff_pre.mapv(gelu);
    let mut ff = linear(&ff_act, params.mat(ls.ff_out_w), params.vec(ls.ff_out_b));
    let ff_drop = dropout.map(|(p, seed)| dropout_mask(n, c.hidden, p, rng::derive(seed, 1, 0)));
    if let Some(m) = &ff_drop {
        ff *= m;
    }
    let (out, ff_norm) = layer_norm(
        &(&h1 + &ff),
        params.vec(ls.ff_gamma),
        params.vec(ls.ff_beta),
    );
    let cache = LayerCache {
        input,
        q,
        k,
        v,
        probs,
        context,
        attn_drop,
        attn_norm,
        h1,
        ff_pre,
        ff_act,
        ff_drop,
        ff_norm,
    };
    (out, cache)
}

fn layer_backward(
    params: &Parameters,
    ls: &LayerSlots,
    cache: &LayerCache,
    d_out: &Array2<f64>,
    grads: &mut Parameters,
) -> Array2<f64> {
    let c = &params.config;
    let dh = c.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let (dgamma, dbeta) = (ls.ff_gamma, ls.ff_beta);
    let d_sum2 = {
        let (g, b) = two_vecs_mut(grads, dgamma, dbeta);
        layer_norm_backward(d_out, &cache.ff_norm, params.vec(ls.ff_gamma), g, b)
    };
    let mut d_ff = d_sum2.clone();
    if let Some(m) = &cache.ff_drop {
        d_ff *= m;
    }
    linear_grads(grads, ls.ff_out_w, ls.ff_out_b, &cache.ff_act, &d_ff);
    let d_act = d_ff.dot(&params.mat(ls.ff_out_w).t());
    let d_pre = &d_act * &cache.ff_pre.mapv(gelu_grad);
    linear_grads(grads, ls.ff_in_w, ls.ff_in_b, &cache.h1, &d_pre);
    let d_h1 = d_sum2 + d_pre.dot(&params.mat(ls.ff_in_w).t());

    let d_sum1 = {
        let (g, b) = two_vecs_mut(grads, ls.attn_gamma, ls.attn_beta);
        layer_norm_backward(&d_h1, &cache.attn_norm, params.vec(ls.attn_gamma), g, b)
    };
    let mut d_attn = d_sum1.clone();
    if let Some(m) = &cache.attn_drop {
        d_attn *= m;
    }
    linear_grads(grads, ls.o_w, ls.o_b, &cache.context, &d_attn);
    let d_context = d_attn.dot(&params.mat(ls.o_w).t());

    let n = d_out.nrows();
    let mut dq = Array2::zeros((n, c.hidden));
    let mut dk = Array2::zeros((n, c.hidden));
    let mut dv = Array2::zeros((n, c.hidden));
    for (head, p) in cache.probs.iter().enumerate() {
        let cols = s![.., head * dh..(head + 1) * dh];
        let dctx = d_context.slice(cols);
        let dp = dctx.dot(&cache.v.slice(cols).t());
        dv.slice_mut(cols).assign(&p.t().dot(&dctx));
        let mut ds = dp;
        for (mut ds_row, p_row) in ds.rows_mut().into_iter().zip(p.rows()) {
            let inner = ds_row.dot(&p_row);
            ds_row -= inner;
            ds_row *= &p_row;
        }
        ds *= scale;
        dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
    }
    linear_grads(grads, ls.q_w, ls.q_b, &cache.input, &dq);
    linear_grads(grads, ls.k_w, ls.k_b, &cache.input, &dk);
    linear_grads(grads, ls.v_w, ls.v_b, &cache.input, &dv);
    d_sum1
        + dq.dot(&params.mat(ls.q_w).t())
        + dk.dot(&params.mat(ls.k_w).t())
        + dv.dot(&params.mat(ls.v_w).t())
}

fn two_vecs_mut(
    p: &mut Parameters,
    a: usize,
    b: usize,
) -> (ArrayViewMut1<'_, f64>, ArrayViewMut1<'_, f64>) {
    assert!(a < b);
    let (lo, hi) = p.tensors.split_at_mut(b);
    (
        ArrayViewMut1::from(&mut lo[a].data[..]),
        ArrayViewMut1::from(&mut hi[0].data[..]),
    )
}

/// Deterministic forward pass without dropout.
pub fn forward(params: &Parameters, batch: &EncodedBatch) -> Result<ForwardResult, EncoderError> {
    run_forward(params, batch, None)
}

/// Forward pass applying the configured dropout rate with masks drawn from
/// `seed`. Identical to [`forward`] when the rate is zero.
pub fn forward_with_dropout(
    params: &Parameters,
    batch: &EncodedBatch,
    seed: u64,
) -> Result<ForwardResult, EncoderError> {
    run_forward(params, batch, Some(seed))
}

fn run_forward(
    params: &Parameters,
    batch: &EncodedBatch,
    dropout_seed: Option<u64>,
) -> Result<ForwardResult, EncoderError> {
    let c = &params.config;
    check_batch(c, batch)?;
    let s = &params.slots;
    let text = batch.text_len();
    let n = batch.seq_len();
    let mut x = Array2::zeros((n, c.hidden));
    let tok = params.mat(s.token);
    let seg = params.mat(s.segment);
    let pos = params.mat(s.position);
    for i in 0..text {
        let mut row = x.row_mut(i);
        row += &tok.row(batch.token_ids[i] as usize);
        row += &seg.row(batch.segment_ids[i]);
        row += &pos.row(batch.position_ids[i]);
    }
    if batch.num_regions() > 0 {
        let projected = batch.regions.dot(&params.mat(s.region_w)) + params.vec(s.region_b);
        let mut block = x.slice_mut(s![text.., ..]);
        block.assign(&projected);
        for k in 0..batch.num_regions() {
            let mut row = block.row_mut(k);
            row += &seg.row(batch.segment_ids[text + k]);
        }
    }
    let (mut hidden, embed_norm) =
        layer_norm(&x, params.vec(s.embed_gamma), params.vec(s.embed_beta));
    let bias = batch
        .attn_mask
        .mapv(|allowed| if allowed { 0.0 } else { MASK_BIAS });
    let dropout = match dropout_seed {
        Some(seed) if c.dropout > 0.0 => Some((c.dropout, seed)),
        _ => None,
    };
    let mut layers = Vec::with_capacity(c.layers);
    for (l, ls) in s.layers.iter().enumerate() {
        let layer_dropout = dropout.map(|(p, seed)| (p, rng::derive(seed, 17, l as u64)));
        let (out, cache) = layer_forward(params, ls, hidden, &bias, layer_dropout);
        layers.push(cache);
        hidden = out;
    }
    let logits = hidden.slice(s![..text, ..]).dot(&params.head_weight()) + params.vec(s.head_b);
    Ok(ForwardResult {
        last_layer: hidden,
        logits,
        cache: Some(Cache { embed_norm, layers }),
    })
}

/// Gradients of a loss whose derivative with respect to the logits is given
/// at a set of text positions.
pub fn backward(
    params: &Parameters,
    batch: &EncodedBatch,
    fwd: &ForwardResult,
    slot_grads: &[(usize, Array1<f64>)],
) -> Result<Gradients, EncoderError> {
    let mut grads = params.zeros_like();
    backward_into(params, batch, fwd, slot_grads, &mut grads)?;
    Ok(grads)
}

/// Like [`backward`] but accumulates into an existing gradient buffer.
pub fn backward_into(
    params: &Parameters,
    batch: &EncodedBatch,
    fwd: &ForwardResult,
    slot_grads: &[(usize, Array1<f64>)],
    grads: &mut Gradients,
) -> Result<(), EncoderError> {
    let cache = fwd
        .cache
        .as_ref()
        .ok_or(EncoderError::MissingForwardCache)?;
    let c = &params.config;
    let s = &params.slots;
    if grads.config != *c {
        return Err(EncoderError::ShapeMismatch(
            "gradient buffer layout differs".into(),
        ));
    }
    let text = batch.text_len();
    let n = fwd.last_layer.nrows();
    if n != batch.seq_len() || cache.layers.len() != c.layers {
        return Err(EncoderError::ShapeMismatch(
            "forward result does not match batch".into(),
        ));
    }
    let mut d_hidden = Array2::zeros((n, c.hidden));
    for (position, d_logits) in slot_grads {
        if *position >= text || d_logits.len() != c.vocab_size {
            return Err(EncoderError::ShapeMismatch(format!(
                "logit gradient at position {position} with {} entries",
                d_logits.len()
            )));
        }
        let h = fwd.last_layer.row(*position);
        let mut d_row = d_hidden.row_mut(*position);
        d_row += &params.head_weight().dot(d_logits);
        match s.head_w {
            Some(w) => {
                let mut gw = grads.mat_mut(w);
                for (i, hi) in h.iter().enumerate() {
                    gw.row_mut(i).scaled_add(*hi, d_logits);
                }
            }
            None => {
                let mut ge = grads.mat_mut(s.token);
                for (v, dv) in d_logits.iter().enumerate() {
                    if *dv != 0.0 {
                        ge.row_mut(v).scaled_add(*dv, &h);
                    }
                }
            }
        }
        let mut gb = grads.vec_mut(s.head_b);
        gb += d_logits;
    }
    for (ls, lc) in s.layers.iter().zip(&cache.layers).rev() {
        d_hidden = layer_backward(params, ls, lc, &d_hidden, grads);
    }
    let dx = {
        let (g, b) = two_vecs_mut(grads, s.embed_gamma, s.embed_beta);
        layer_norm_backward(
            &d_hidden,
            &cache.embed_norm,
            params.vec(s.embed_gamma),
            g,
            b,
        )
    };
    for i in 0..text {
        let d = dx.row(i);
        grads
            .mat_mut(s.token)
            .row_mut(batch.token_ids[i] as usize)
            .scaled_add(1.0, &d);
        grads
            .mat_mut(s.segment)
            .row_mut(batch.segment_ids[i])
            .scaled_add(1.0, &d);
        grads
            .mat_mut(s.position)
            .row_mut(batch.position_ids[i])
            .scaled_add(1.0, &d);
    }
    if batch.num_regions() > 0 {
        let d_regions = dx.slice(s![text.., ..]).to_owned();
        linear_grads(grads, s.region_w, s.region_b, &batch.regions, &d_regions);
        for k in 0..batch.num_regions() {
            let seg_id = batch.segment_ids[text + k];
            debug_assert_eq!(seg_id, SEGMENT_REGION);
            grads
                .mat_mut(s.segment)
                .row_mut(seg_id)
                .scaled_add(1.0, &d_regions.row(k));
        }
    }
    Ok(())
}
