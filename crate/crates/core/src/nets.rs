//! Learnable model: representation, dynamics, prediction heads, the
//! invertible value transform with its two-hot support codec, and exact
//! reverse-mode gradients for all of it.
//!
//! All math runs in f64, but parameters live on the f32 grid (snapped after
//! init and after every update), so checkpoints serialize to f32 without
//! loss. Architecture summary:
//!
//! - per-keypoint features: 9×9 pixel window + sinusoidal position encoding
//!   → 2-layer MLP → D; a learned row stands in for the EOS action
//! - represent: h = tanh(W·mean(features) + b + Σ_t σ(Wg u_t) ⊙ tanh(Wc u_t))
//!   over token inputs u_t (feature row + learned type/position encodings);
//!   the sum makes h permutation-invariant once token-order encodings are
//!   disabled
//! - dynamics: GRU cell over the action embedding (plus degree- and
//!   length-bucket embeddings when the action completes an edge), with a
//!   reward head on the new state; degree tallies ride inside the latent
//! - predict: pointer policy logit_k = (W_q h)·feature_k/√D and a value head
//!   over [h; step encoding]

use crate::geom::Point;
use crate::raster::GrayImage;
use crate::rng::{self, salt};
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read as _, Write as _};
use std::path::Path;
use std::sync::Arc;

pub const DEG_BUCKETS: usize = 5; // degrees 0,1,2,3,4+
pub const LEN_BUCKETS: usize = 8; // log2-spaced edge lengths 2..256+ px
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    /// Latent width D.
    pub d: usize,
    /// Square pixel window side (odd).
    pub window: usize,
    /// Sinusoidal position-encoding width (multiple of 4).
    pub posenc: usize,
    pub feat_hidden: usize,
    pub value_hidden: usize,
    pub reward_hidden: usize,
    /// Support atoms for value/reward heads (odd; spans ±(support−1)/2).
    pub support: usize,
    /// Longest token sequence the position table covers.
    pub max_tokens: usize,
    /// Step-encoding width (multiple of 2).
    pub step_enc: usize,
    /// Feed learned type/position encodings to represent. Disabling them
    /// makes the latent invariant to edge-token permutation.
    pub use_token_order: bool,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            d: 128,
            window: 9,
            posenc: 16,
            feat_hidden: 128,
            value_hidden: 128,
            reward_hidden: 64,
            support: 601,
            max_tokens: 513,
            step_enc: 16,
            use_token_order: true,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.feat_hidden == 0 || self.value_hidden == 0 || self.reward_hidden == 0 {
            return Err(Error::validation("model dims must be positive"));
        }
        if self.window % 2 == 0 {
            return Err(Error::validation("window must be odd"));
        }
        if self.posenc % 4 != 0 || self.posenc == 0 {
            return Err(Error::validation("posenc must be a positive multiple of 4"));
        }
        if self.step_enc % 2 != 0 || self.step_enc == 0 {
            return Err(Error::validation("step_enc must be a positive multiple of 2"));
        }
        if self.support % 2 == 0 || self.support < 3 {
            return Err(Error::validation("support must be odd and at least 3"));
        }
        if self.max_tokens == 0 {
            return Err(Error::validation("max_tokens must be positive"));
        }
        Ok(())
    }

    pub fn feature_input(&self) -> usize {
        self.window * self.window + self.posenc
    }

    fn half_support(&self) -> f64 {
        ((self.support - 1) / 2) as f64
    }
}

// ---------------------------------------------------------------------------
// tensors

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// y = W·x for row-major W (rows × cols), |x| = cols.
fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(w.cols, x.len());
    let mut y = vec![0.0; w.rows];
    for r in 0..w.rows {
        let row = w.row(r);
        let mut acc = 0.0;
        for (a, b) in row.iter().zip(x) {
            acc += a * b;
        }
        y[r] = acc;
    }
    y
}

/// x += Wᵀ·y (backward through matvec).
fn matvec_t_acc(w: &Tensor, y: &[f64], x: &mut [f64]) {
    debug_assert_eq!(w.rows, y.len());
    debug_assert_eq!(w.cols, x.len());
    for r in 0..w.rows {
        let row = w.row(r);
        let yr = y[r];
        for (xi, wi) in x.iter_mut().zip(row) {
            *xi += wi * yr;
        }
    }
}

/// gw += dy ⊗ x.
fn outer_acc(gw: &mut Tensor, dy: &[f64], x: &[f64]) {
    debug_assert_eq!(gw.rows, dy.len());
    debug_assert_eq!(gw.cols, x.len());
    for r in 0..gw.rows {
        let row = gw.row_mut(r);
        let d = dy[r];
        for (wi, xi) in row.iter_mut().zip(x) {
            *wi += d * xi;
        }
    }
}

fn add_acc(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.iter().map(|e| e / s).collect()
}

// ---------------------------------------------------------------------------
// parameters

macro_rules! params {
    ($($name:ident),* $(,)?) => {
        /// Every learnable tensor. Field order is the checkpoint manifest
        /// order and must match `shape_manifest`.
        #[derive(Debug, Clone, PartialEq)]
        pub struct ModelParams {
            pub dims: ModelDims,
            $(pub $name: Tensor,)*
        }

        impl ModelParams {
            pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
                vec![$((stringify!($name), &self.$name),)*]
            }

            pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
                vec![$((stringify!($name), &mut self.$name),)*]
            }
        }
    };
}

params![
    feat_w1, feat_b1, feat_w2, feat_b2, eos_emb, type_emb, pos_emb, init_w, init_b, gate_w,
    gate_b, cand_w, cand_b, gru_wr, gru_ur, gru_br, gru_wz, gru_uz, gru_bz, gru_wn, gru_un,
    gru_bn, deg_emb, len_emb, policy_q, val_w1, val_b1, val_w2, val_b2, rew_w1, rew_b1, rew_w2,
    rew_b2,
];

fn shape_manifest(dims: &ModelDims) -> Vec<(&'static str, usize, usize)> {
    let d = dims.d;
    vec![
        ("feat_w1", dims.feat_hidden, dims.feature_input()),
        ("feat_b1", dims.feat_hidden, 1),
        ("feat_w2", d, dims.feat_hidden),
        ("feat_b2", d, 1),
        ("eos_emb", d, 1),
        ("type_emb", 2, d),
        ("pos_emb", dims.max_tokens, d),
        ("init_w", d, d),
        ("init_b", d, 1),
        ("gate_w", d, d),
        ("gate_b", d, 1),
        ("cand_w", d, d),
        ("cand_b", d, 1),
        ("gru_wr", d, d),
        ("gru_ur", d, d),
        ("gru_br", d, 1),
        ("gru_wz", d, d),
        ("gru_uz", d, d),
        ("gru_bz", d, 1),
        ("gru_wn", d, d),
        ("gru_un", d, d),
        ("gru_bn", d, 1),
        ("deg_emb", DEG_BUCKETS, d),
        ("len_emb", LEN_BUCKETS, d),
        ("policy_q", d, d),
        ("val_w1", dims.value_hidden, d + dims.step_enc),
        ("val_b1", dims.value_hidden, 1),
        ("val_w2", dims.support, dims.value_hidden),
        ("val_b2", dims.support, 1),
        ("rew_w1", dims.reward_hidden, d),
        ("rew_b1", dims.reward_hidden, 1),
        ("rew_w2", dims.support, dims.reward_hidden),
        ("rew_b2", dims.support, 1),
    ]
}

impl ModelParams {
    pub fn zeros(dims: &ModelDims) -> Result<Self> {
        dims.validate()?;
        let mut tensors = shape_manifest(dims)
            .into_iter()
            .map(|(_, r, c)| Tensor::zeros(r, c));
        let mut next = || tensors.next().expect("manifest covers all fields");
        Ok(ModelParams {
            dims: dims.clone(),
            feat_w1: next(),
            feat_b1: next(),
            feat_w2: next(),
            feat_b2: next(),
            eos_emb: next(),
            type_emb: next(),
            pos_emb: next(),
            init_w: next(),
            init_b: next(),
            gate_w: next(),
            gate_b: next(),
            cand_w: next(),
            cand_b: next(),
            gru_wr: next(),
            gru_ur: next(),
            gru_br: next(),
            gru_wz: next(),
            gru_uz: next(),
            gru_bz: next(),
            gru_wn: next(),
            gru_un: next(),
            gru_bn: next(),
            deg_emb: next(),
            len_emb: next(),
            policy_q: next(),
            val_w1: next(),
            val_b1: next(),
            val_w2: next(),
            val_b2: next(),
            rew_w1: next(),
            rew_b1: next(),
            rew_w2: next(),
            rew_b2: next(),
        })
    }

    /// Glorot-uniform init; biases zero; final value/reward layers zero so
    /// initial support predictions are uniform and decode to exactly 0.
    pub fn init(dims: &ModelDims, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(dims)?;
        let mut rng = rng::stream(seed, salt::INIT);
        for (name, t) in p.tensors_mut() {
            let zero_init = matches!(name, "val_w2" | "val_b2" | "rew_w2" | "rew_b2");
            if zero_init || name.contains("_b") {
                continue; // biases and the final head layers stay zero
            }
            let bound = (6.0 / (t.rows + t.cols) as f64).sqrt();
            for v in &mut t.data {
                *v = rng.gen_range(-bound..=bound);
            }
        }
        p.snap_to_f32();
        Ok(p)
    }

    /// Quantize every parameter to the nearest f32. Keeps training math in
    /// f64 while checkpoints stay lossless.
    pub fn snap_to_f32(&mut self) {
        for (_, t) in self.tensors_mut() {
            for v in &mut t.data {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.data.len()).sum()
    }
}

// ---------------------------------------------------------------------------
// checkpoints

#[derive(Serialize, Deserialize)]
struct LayerInfo {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    dims: ModelDims,
    layers: Vec<LayerInfo>,
}

pub fn write_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let mut layers = Vec::new();
    let mut offset = 0usize;
    for (name, t) in params.tensors() {
        layers.push(LayerInfo { name: name.to_string(), rows: t.rows, cols: t.cols, offset });
        offset += t.data.len() * 4;
    }
    let header = CheckpointHeader { version: CHECKPOINT_VERSION, dims: params.dims.clone(), layers };
    let mut blob = Vec::with_capacity(offset);
    for (_, t) in params.tensors() {
        for v in &t.data {
            blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    serde_json::to_writer(&mut f, &header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    f.write_all(b"\n")?;
    f.write_all(&blob)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<ModelParams> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    let nl = raw
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&raw[..nl]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", header.version)));
    }
    let expected = shape_manifest(&header.dims);
    if header.layers.len() != expected.len() {
        return Err(Error::Checkpoint("layer manifest length mismatch".into()));
    }
    let blob = &raw[nl + 1..];
    let mut params = ModelParams::zeros(&header.dims)?;
    for ((info, (name, rows, cols)), (_, t)) in
        header.layers.iter().zip(expected).zip(params.tensors_mut())
    {
        if info.name != name || info.rows != rows || info.cols != cols {
            return Err(Error::Checkpoint(format!(
                "layer {} has shape {}x{}, expected {name} {rows}x{cols}",
                info.name, info.rows, info.cols
            )));
        }
        let bytes = rows * cols * 4;
        let Some(chunk) = blob.get(info.offset..info.offset + bytes) else {
            return Err(Error::Checkpoint(format!("blob truncated at layer {name}")));
        };
        for (v, b) in t.data.iter_mut().zip(chunk.chunks_exact(4)) {
            *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
        }
    }
    Ok(params)
}

// ---------------------------------------------------------------------------
// value transform and support codec

const EPS: f64 = 0.001;

/// y = sign(x)·(√(|x|+1) − 1) + ε·x, strictly increasing and odd.
pub fn transform_value(x: f64) -> f64 {
    x.signum() * ((x.abs() + 1.0).sqrt() - 1.0) + EPS * x
}

/// Closed-form inverse of `transform_value`.
pub fn inverse_transform(y: f64) -> f64 {
    if y == 0.0 {
        return 0.0;
    }
    let a = y.abs();
    let s = ((1.0 + 4.0 * EPS * (a + 1.0 + EPS)).sqrt() - 1.0) / (2.0 * EPS);
    y.signum() * (s * s - 1.0)
}

/// Two-hot encoding of `transform_value(x)` over the integer atoms.
pub fn support_encode(x: f64, dims: &ModelDims) -> Vec<f64> {
    let half = dims.half_support();
    let mut y = transform_value(x);
    if y < -half || y > half {
        log::warn!("support_encode: {y:.3} outside ±{half}, clamping");
        y = y.clamp(-half, half);
    }
    let mut probs = vec![0.0; dims.support];
    let lo = y.floor().max(-half).min(half);
    let idx = (lo + half) as usize;
    let frac = y - lo;
    if idx + 1 < dims.support {
        probs[idx] = 1.0 - frac;
        probs[idx + 1] = frac;
    } else {
        probs[idx] = 1.0;
    }
    probs
}

/// Expectation over atoms, mapped back through the inverse transform.
/// Mirror atoms are paired so symmetric distributions (e.g. the uniform
/// output of a zero-initialized head) decode to exactly 0.
pub fn support_decode(probs: &[f64], dims: &ModelDims) -> f64 {
    debug_assert_eq!(probs.len(), dims.support);
    let half = (dims.support - 1) / 2;
    let mut e = 0.0;
    for i in 0..half {
        let j = dims.support - 1 - i;
        e += (i as f64 - half as f64) * (probs[i] - probs[j]);
    }
    inverse_transform(e)
}

// ---------------------------------------------------------------------------
// fixed encodings

/// Interleaved sin/cos of (x, y) at geometrically spaced frequencies.
fn position_encoding(x: f64, y: f64, width: usize) -> Vec<f64> {
    let freqs = width / 4;
    let mut out = Vec::with_capacity(width);
    for f in 0..freqs {
        let w = 1.0 / 10000f64.powf(f as f64 / freqs as f64);
        out.push((x * w).sin());
        out.push((x * w).cos());
        out.push((y * w).sin());
        out.push((y * w).cos());
    }
    out
}

fn step_encoding(t: usize, width: usize) -> Vec<f64> {
    let freqs = width / 2;
    let mut out = Vec::with_capacity(width);
    for f in 0..freqs {
        let w = 1.0 / 10000f64.powf(f as f64 / freqs as f64);
        out.push((t as f64 * w).sin());
        out.push((t as f64 * w).cos());
    }
    out
}

pub fn degree_bucket(degree: u32) -> usize {
    (degree as usize).min(DEG_BUCKETS - 1)
}

/// log2-spaced buckets with boundaries at 2, 4, 8, …, 256 px.
pub fn length_bucket(len: f64) -> usize {
    if len < 2.0 {
        return 0;
    }
    ((len.log2().floor() as isize - 1).max(0) as usize).min(LEN_BUCKETS - 1)
}

// ---------------------------------------------------------------------------
// scene features

/// Parameter-independent per-keypoint inputs: normalized pixel window plus
/// position encoding. Computed once per scene.
#[derive(Debug, Clone)]
pub struct SceneTensor {
    pub inputs: Vec<Vec<f64>>,
    pub keypoints: Vec<Point>,
}

impl SceneTensor {
    pub fn new(image: &GrayImage, keypoints: &[Point], dims: &ModelDims) -> Self {
        let half = (dims.window / 2) as i64;
        let inputs = keypoints
            .iter()
            .map(|p| {
                let (cx, cy) = (p.x.round() as i64, p.y.round() as i64);
                let mut v = Vec::with_capacity(dims.feature_input());
                for dy in -half..=half {
                    for dx in -half..=half {
                        let x = (cx + dx).clamp(0, image.width as i64 - 1);
                        let y = (cy + dy).clamp(0, image.height as i64 - 1);
                        v.push(image.get(x, y) as f64 / 255.0);
                    }
                }
                v.extend(position_encoding(p.x, p.y, dims.posenc));
                v
            })
            .collect();
        SceneTensor { inputs, keypoints: keypoints.to_vec() }
    }

    pub fn n_keypoints(&self) -> usize {
        self.inputs.len()
    }
}

/// Parameter-dependent feature rows; row `n_keypoints` is the EOS embedding.
/// Hidden activations are kept for the backward pass.
#[derive(Debug, Clone)]
pub struct SceneEmbedding {
    pub feats: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    hidden: Vec<Vec<f64>>,
}

pub fn embed_scene(scene: &SceneTensor, params: &ModelParams) -> SceneEmbedding {
    let d = params.dims.d;
    let n = scene.n_keypoints();
    let mut feats = Vec::with_capacity(n + 1);
    let mut hidden = Vec::with_capacity(n);
    for inp in &scene.inputs {
        let mut a1 = matvec(&params.feat_w1, inp);
        for (a, b) in a1.iter_mut().zip(&params.feat_b1.data) {
            *a = (*a + b).tanh();
        }
        let mut f = matvec(&params.feat_w2, &a1);
        add_acc(&mut f, &params.feat_b2.data);
        hidden.push(a1);
        feats.push(f);
    }
    feats.push(params.eos_emb.data.clone());
    let mut mean = vec![0.0; d];
    for f in feats.iter().take(n) {
        add_acc(&mut mean, f);
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    SceneEmbedding { feats, mean, hidden }
}

// ---------------------------------------------------------------------------
// latent state and the three model functions

#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub h: Vec<f64>,
    /// Token count; parity decides edge-completion semantics.
    pub steps: usize,
    /// First endpoint of a half-built edge.
    pub pending: Option<u32>,
    /// Per-keypoint degree tallies (incremented per completed pair, no
    /// dedup — the model's cheap approximation of graph degree).
    pub degrees: Vec<u32>,
    /// EOS taken; the latent is terminal.
    pub eos: bool,
}

impl Latent {
    pub fn parity_odd(&self) -> bool {
        self.steps % 2 == 1
    }
}

fn token_input(
    token: u32,
    position: usize,
    emb: &SceneEmbedding,
    params: &ModelParams,
) -> Vec<f64> {
    let mut u = emb.feats[token as usize].clone();
    if params.dims.use_token_order {
        add_acc(&mut u, params.type_emb.row(position % 2));
        let row = position.min(params.dims.max_tokens - 1);
        add_acc(&mut u, params.pos_emb.row(row));
    }
    u
}

/// Fold a token prefix into a latent. Degree tallies come from the deduped
/// edge set of the prefix, so represent and the environment agree at the
/// root.
pub fn represent(tokens: &[u32], emb: &SceneEmbedding, params: &ModelParams) -> Result<Latent> {
    let n_kp = emb.feats.len() - 1;
    for &t in tokens {
        if t as usize > n_kp {
            return Err(Error::validation(format!("token {t} out of range for {n_kp} keypoints")));
        }
    }
    let mut acc = matvec(&params.init_w, &emb.mean);
    add_acc(&mut acc, &params.init_b.data);
    for (pos, &tok) in tokens.iter().enumerate() {
        let u = token_input(tok, pos, emb, params);
        let g = matvec(&params.gate_w, &u);
        let c = matvec(&params.cand_w, &u);
        for i in 0..params.dims.d {
            acc[i] += sigmoid(g[i] + params.gate_b.data[i]) * (c[i] + params.cand_b.data[i]).tanh();
        }
    }
    let h: Vec<f64> = acc.iter().map(|a| a.tanh()).collect();

    let mut degrees = vec![0u32; n_kp];
    let mut seen = std::collections::BTreeSet::new();
    for c in tokens.chunks_exact(2) {
        let (a, b) = (c[0].min(c[1]), c[0].max(c[1]));
        if (a as usize) < n_kp && (b as usize) < n_kp && a != b && seen.insert((a, b)) {
            degrees[a as usize] += 1;
            degrees[b as usize] += 1;
        }
    }
    let eos = tokens.last() == Some(&(n_kp as u32));
    let pending = if tokens.len() % 2 == 1 && !eos { tokens.last().copied() } else { None };
    Ok(Latent { h, steps: tokens.len(), pending, degrees, eos })
}

/// Policy logits over |keypoints|+1 actions and the value support.
pub fn predict(latent: &Latent, emb: &SceneEmbedding, params: &ModelParams) -> (Vec<f64>, Vec<f64>) {
    let d = params.dims.d;
    let q = matvec(&params.policy_q, &latent.h);
    let scale = 1.0 / (d as f64).sqrt();
    let logits: Vec<f64> = emb
        .feats
        .iter()
        .map(|f| scale * q.iter().zip(f).map(|(a, b)| a * b).sum::<f64>())
        .collect();

    let mut vin = latent.h.clone();
    vin.extend(step_encoding(latent.steps, params.dims.step_enc));
    let mut a = matvec(&params.val_w1, &vin);
    for (x, b) in a.iter_mut().zip(&params.val_b1.data) {
        *x = (*x + b).tanh();
    }
    let mut vlogits = matvec(&params.val_w2, &a);
    add_acc(&mut vlogits, &params.val_b2.data);
    (logits, softmax(&vlogits))
}

struct Transition {
    next: Latent,
    x: Vec<f64>,
    gru: GruTape,
    /// Degree/length bucket rows added to the input, present iff the action
    /// completed an edge.
    extras: Option<(usize, usize, usize)>,
}

/// Shared single-step transition used by both inference (`dynamics`) and the
/// training unroll.
fn transition(
    latent: &Latent,
    action: u32,
    scene: &SceneTensor,
    emb: &SceneEmbedding,
    params: &ModelParams,
) -> Transition {
    let n_kp = emb.feats.len() - 1;
    let is_eos = action as usize == n_kp;
    let completes = latent.parity_odd() && !is_eos;

    let mut x = emb.feats[action as usize].clone();
    let mut extras = None;
    if completes {
        let from = latent.pending.expect("odd parity carries a pending endpoint") as usize;
        let da = degree_bucket(latent.degrees[from]);
        let db = degree_bucket(latent.degrees[action as usize]);
        let len = scene.keypoints[from].dist(&scene.keypoints[action as usize]);
        let lb = length_bucket(len);
        add_acc(&mut x, params.deg_emb.row(da));
        add_acc(&mut x, params.deg_emb.row(db));
        add_acc(&mut x, params.len_emb.row(lb));
        extras = Some((da, db, lb));
    }

    let (h2, gru) = gru_forward(&latent.h, &x, params);

    let mut next = Latent {
        h: h2,
        steps: latent.steps + 1,
        pending: None,
        degrees: latent.degrees.clone(),
        eos: latent.eos || is_eos,
    };
    if completes {
        let from = latent.pending.unwrap() as usize;
        next.degrees[from] += 1;
        next.degrees[action as usize] += 1;
    } else if !is_eos && !latent.parity_odd() {
        next.pending = Some(action);
    }
    Transition { next, x, gru, extras }
}

/// One imagined action. Returns the successor latent and the reward
/// support; on steps that do not complete an edge the reward is pinned to
/// the zero atom (the environment only pays on completion).
pub fn dynamics(
    latent: &Latent,
    action: u32,
    scene: &SceneTensor,
    emb: &SceneEmbedding,
    params: &ModelParams,
) -> (Latent, Vec<f64>) {
    let tr = transition(latent, action, scene, emb, params);
    let reward = if tr.extras.is_some() {
        let (_, rlogits) =
            head_forward(&params.rew_w1, &params.rew_b1, &params.rew_w2, &params.rew_b2, &tr.next.h);
        softmax(&rlogits)
    } else {
        support_encode(0.0, &params.dims)
    };
    (tr.next, reward)
}

struct GruTape {
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    unh: Vec<f64>,
}

fn gru_forward(h: &[f64], x: &[f64], params: &ModelParams) -> (Vec<f64>, GruTape) {
    let d = params.dims.d;
    let mut r = matvec(&params.gru_wr, x);
    matvec_t_add(&params.gru_ur, h, &mut r);
    let mut z = matvec(&params.gru_wz, x);
    matvec_t_add(&params.gru_uz, h, &mut z);
    for i in 0..d {
        r[i] = sigmoid(r[i] + params.gru_br.data[i]);
        z[i] = sigmoid(z[i] + params.gru_bz.data[i]);
    }
    let unh = matvec(&params.gru_un, h);
    let mut n = matvec(&params.gru_wn, x);
    for i in 0..d {
        n[i] = (n[i] + r[i] * unh[i] + params.gru_bn.data[i]).tanh();
    }
    let h2: Vec<f64> = (0..d).map(|i| (1.0 - z[i]) * n[i] + z[i] * h[i]).collect();
    (h2, GruTape { r, z, n, unh })
}

/// y += W·x (forward helper for pre-allocated accumulation).
fn matvec_t_add(w: &Tensor, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(w.cols, x.len());
    debug_assert_eq!(w.rows, y.len());
    for (r, yr) in y.iter_mut().enumerate() {
        let row = w.row(r);
        let mut acc = 0.0;
        for (a, b) in row.iter().zip(x) {
            acc += a * b;
        }
        *yr += acc;
    }
}

// ---------------------------------------------------------------------------
// static cost audit

/// Multiply-accumulates of one represent call (feature extraction excluded:
/// it is computed once per episode and cached).
pub fn represent_macs(dims: &ModelDims, n_tokens: usize) -> u64 {
    let d = dims.d as u64;
    d * d + n_tokens as u64 * 2 * d * d
}

/// Multiply-accumulates of one dynamics call (GRU cell plus reward head).
pub fn dynamics_macs(dims: &ModelDims) -> u64 {
    let d = dims.d as u64;
    6 * d * d + d * dims.reward_hidden as u64 + dims.reward_hidden as u64 * dims.support as u64
}

// ---------------------------------------------------------------------------
// training: losses and exact gradients

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSpec {
    pub policy: f64,
    pub value: f64,
    pub reward: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec { policy: 1.0, value: 1.0, reward: 1.0 }
    }
}

/// Targets at one unroll position. `None` fields are masked out of the
/// loss. `action_in`/`reward_target` describe the transition INTO this
/// position (absent at the root).
#[derive(Debug, Clone)]
pub struct UnrollStep {
    pub action_in: Option<u32>,
    pub reward_target: Option<f64>,
    pub policy_target: Option<Vec<f64>>,
    pub value_target: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainSample {
    pub scene: Arc<SceneTensor>,
    /// Observation token prefix fed to represent.
    pub tokens: Vec<u32>,
    /// Root position followed by up to t_d unrolled positions.
    pub unroll: Vec<UnrollStep>,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub policy: f64,
    pub value: f64,
    pub reward: f64,
    pub total: f64,
}

/// Cross-entropy −Σ t·log p against the softmax of `logits`; gradient in
/// logit space is (p − t)·w.
fn ce_loss_backward(logits: &[f64], target: &[f64], w: f64, dlogits: &mut [f64]) -> f64 {
    let p = softmax(logits);
    let mut loss = 0.0;
    for i in 0..p.len() {
        if target[i] > 0.0 {
            loss -= target[i] * p[i].max(1e-300).ln();
        }
        dlogits[i] += w * (p[i] - target[i]);
    }
    loss
}

/// MSE on softmax probabilities against a target support; returns the loss
/// and accumulates the logit-space gradient.
fn support_mse_backward(logits: &[f64], target: &[f64], w: f64, dlogits: &mut [f64]) -> f64 {
    let p = softmax(logits);
    let mut loss = 0.0;
    let mut dp: Vec<f64> = vec![0.0; p.len()];
    for i in 0..p.len() {
        let diff = p[i] - target[i];
        loss += diff * diff;
        dp[i] = 2.0 * w * diff;
    }
    let dot: f64 = dp.iter().zip(&p).map(|(a, b)| a * b).sum();
    for i in 0..p.len() {
        dlogits[i] += p[i] * (dp[i] - dot);
    }
    loss
}

struct HeadTape {
    input: Vec<f64>,
    hidden: Vec<f64>,
    dlogits: Vec<f64>,
}

/// Forward a 2-layer head (tanh hidden, linear output).
fn head_forward(w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor, input: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut hidden = matvec(w1, input);
    for (v, b) in hidden.iter_mut().zip(&b1.data) {
        *v = (*v + b).tanh();
    }
    let mut logits = matvec(w2, &hidden);
    add_acc(&mut logits, &b2.data);
    (hidden, logits)
}

fn head_backward(
    w1: &Tensor,
    w2: &Tensor,
    g_w1: &mut Tensor,
    g_b1: &mut Tensor,
    g_w2: &mut Tensor,
    g_b2: &mut Tensor,
    tape: &HeadTape,
    dinput: &mut [f64],
) {
    outer_acc(g_w2, &tape.dlogits, &tape.hidden);
    add_acc(&mut g_b2.data, &tape.dlogits);
    let mut da = vec![0.0; tape.hidden.len()];
    matvec_t_acc(w2, &tape.dlogits, &mut da);
    for i in 0..da.len() {
        da[i] *= 1.0 - tape.hidden[i] * tape.hidden[i];
    }
    outer_acc(g_w1, &da, &tape.input);
    add_acc(&mut g_b1.data, &da);
    matvec_t_acc(w1, &da, dinput);
}

/// Exact gradients of the batch loss. Losses are summed over samples (a
/// duplicated sample contributes exactly twice); each sample is weighted by
/// its importance weight and the loss-spec term weights.
pub fn backward(
    params: &ModelParams,
    batch: &[TrainSample],
    spec: &LossSpec,
) -> Result<(ModelParams, LossReport)> {
    let mut grads = ModelParams::zeros(&params.dims)?;
    let mut report = LossReport::default();
    for sample in batch {
        backward_sample(params, sample, spec, &mut grads, &mut report)?;
    }
    report.total = report.policy + report.value + report.reward;
    if !report.total.is_finite() {
        let term = if !report.policy.is_finite() {
            "policy"
        } else if !report.value.is_finite() {
            "value"
        } else {
            "reward"
        };
        return Err(Error::Numeric(format!("non-finite {term} loss")));
    }
    Ok((grads, report))
}

fn backward_sample(
    params: &ModelParams,
    sample: &TrainSample,
    spec: &LossSpec,
    grads: &mut ModelParams,
    report: &mut LossReport,
) -> Result<()> {
    let dims = &params.dims;
    let d = dims.d;
    let emb = embed_scene(&sample.scene, params);
    let n_rows = emb.feats.len();
    let w = sample.weight;

    // ---- forward, keeping tapes -------------------------------------------------
    let root = represent(&sample.tokens, &emb, params)?;

    struct StepTape {
        latent: Latent,
        x: Vec<f64>,
        gru: Option<GruTape>,
        action: Option<u32>,
        extras: Option<(usize, usize, usize)>, // deg buckets + len bucket
        policy: Option<(Vec<f64>, Vec<f64>, HeadTape)>, // (q, policy dlogits, value tape)
        reward: Option<HeadTape>,
    }

    let mut steps: Vec<StepTape> = Vec::with_capacity(sample.unroll.len());
    let mut cur = root.clone();
    for (k, u) in sample.unroll.iter().enumerate() {
        // transition into this position (k > 0)
        let (latent, x, gru, extras, reward_tape) = if k == 0 {
            (cur.clone(), Vec::new(), None, None, None)
        } else {
            let action = u.action_in.expect("unroll positions after the root carry actions");
            let tr = transition(&cur, action, &sample.scene, &emb, params);
            // reward head only where the transition completes an edge; the
            // pinned zero-atom output elsewhere carries no gradient
            let reward_tape = if tr.extras.is_some() && u.reward_target.is_some() && spec.reward != 0.0 {
                let (hidden, logits) =
                    head_forward(&params.rew_w1, &params.rew_b1, &params.rew_w2, &params.rew_b2, &tr.next.h);
                let target = support_encode(u.reward_target.unwrap(), dims);
                let mut dlogits = vec![0.0; dims.support];
                let w_eff = w * spec.reward;
                let l = support_mse_backward(&logits, &target, w_eff, &mut dlogits);
                report.reward += w_eff * l;
                Some(HeadTape { input: tr.next.h.clone(), hidden, dlogits })
            } else {
                None
            };
            (tr.next, tr.x, Some(tr.gru), tr.extras, reward_tape)
        };
        cur = latent.clone();

        // predictions at this position
        let policy = {
            let need_policy = u.policy_target.is_some() && spec.policy != 0.0;
            let need_value = u.value_target.is_some() && spec.value != 0.0;
            if need_policy || need_value {
                let q = matvec(&params.policy_q, &latent.h);
                let scale = 1.0 / (d as f64).sqrt();
                let logits: Vec<f64> = emb
                    .feats
                    .iter()
                    .map(|f| scale * q.iter().zip(f).map(|(a, b)| a * b).sum::<f64>())
                    .collect();
                let mut dlogits = vec![0.0; n_rows];
                if need_policy {
                    let t = u.policy_target.as_ref().unwrap();
                    let l = ce_loss_backward(&logits, t, w * spec.policy, &mut dlogits);
                    report.policy += w * spec.policy * l;
                }
                let mut vin = latent.h.clone();
                vin.extend(step_encoding(latent.steps, dims.step_enc));
                let (hidden, vlogits) =
                    head_forward(&params.val_w1, &params.val_b1, &params.val_w2, &params.val_b2, &vin);
                let mut dvlogits = vec![0.0; dims.support];
                if need_value {
                    let w_eff = w * spec.value;
                    let target = support_encode(u.value_target.unwrap(), dims);
                    let l = support_mse_backward(&vlogits, &target, w_eff, &mut dvlogits);
                    report.value += w_eff * l;
                }
                Some((q, dlogits, HeadTape { input: vin, hidden, dlogits: dvlogits }))
            } else {
                None
            }
        };

        steps.push(StepTape {
            latent,
            x,
            gru,
            action: u.action_in,
            extras,
            policy,
            reward: reward_tape,
        });
    }

    // ---- backward ----------------------------------------------------------------
    let mut d_feats = vec![vec![0.0; d]; n_rows];
    let mut dh_next = vec![0.0; d]; // gradient flowing into h of the step being processed

    for k in (0..steps.len()).rev() {
        let st = &steps[k];
        let mut dh = std::mem::replace(&mut dh_next, vec![0.0; d]);

        // prediction heads at this position
        if let Some((q, dlogits, vtape)) = &st.policy {
            let scale = 1.0 / (d as f64).sqrt();
            let mut dq = vec![0.0; d];
            for (i, f) in emb.feats.iter().enumerate() {
                let g = dlogits[i] * scale;
                if g != 0.0 {
                    for j in 0..d {
                        dq[j] += g * f[j];
                        d_feats[i][j] += g * q[j];
                    }
                }
            }
            outer_acc(&mut grads.policy_q, &dq, &st.latent.h);
            matvec_t_acc(&params.policy_q, &dq, &mut dh);

            let mut dvin = vec![0.0; d + params.dims.step_enc];
            head_backward(
                &params.val_w1,
                &params.val_w2,
                &mut grads.val_w1,
                &mut grads.val_b1,
                &mut grads.val_w2,
                &mut grads.val_b2,
                vtape,
                &mut dvin,
            );
            add_acc(&mut dh, &dvin[..d]);
        }

        if let Some(rtape) = &st.reward {
            let mut dhr = vec![0.0; d];
            head_backward(
                &params.rew_w1,
                &params.rew_w2,
                &mut grads.rew_w1,
                &mut grads.rew_b1,
                &mut grads.rew_w2,
                &mut grads.rew_b2,
                rtape,
                &mut dhr,
            );
            add_acc(&mut dh, &dhr);
        }

        if k == 0 {
            // through represent into features and aggregator params
            represent_backward(&sample.tokens, &emb, params, grads, &dh, &mut d_feats);
        } else {
            // through the GRU into (previous h, x)
            let tape = st.gru.as_ref().expect("non-root steps have a GRU tape");
            let prev_h = &steps[k - 1].latent.h;
            let mut dx = vec![0.0; d];
            gru_backward(prev_h, &st.x, tape, &st.latent.h, params, grads, &dh, &mut dx, &mut dh_next);
            let action = st.action.unwrap() as usize;
            add_acc(&mut d_feats[action], &dx);
            if let Some((da, db, lb)) = st.extras {
                add_acc(grads.deg_emb.row_mut(da), &dx);
                add_acc(grads.deg_emb.row_mut(db), &dx);
                add_acc(grads.len_emb.row_mut(lb), &dx);
            }
        }
    }

    // ---- features into the feature MLP -------------------------------------------
    add_acc(&mut grads.eos_emb.data, &d_feats[n_rows - 1]);
    for (i, df) in d_feats.iter().take(n_rows - 1).enumerate() {
        if df.iter().all(|v| *v == 0.0) {
            continue;
        }
        outer_acc(&mut grads.feat_w2, df, &emb.hidden[i]);
        add_acc(&mut grads.feat_b2.data, df);
        let mut da1 = vec![0.0; params.dims.feat_hidden];
        matvec_t_acc(&params.feat_w2, df, &mut da1);
        for j in 0..da1.len() {
            da1[j] *= 1.0 - emb.hidden[i][j] * emb.hidden[i][j];
        }
        outer_acc(&mut grads.feat_w1, &da1, &sample.scene.inputs[i]);
        add_acc(&mut grads.feat_b1.data, &da1);
    }
    Ok(())
}

/// Backward of a GRU step given upstream dh2; accumulates into parameter
/// grads, dx, and dh_prev.
#[allow(clippy::too_many_arguments)]
fn gru_backward(
    h: &[f64],
    x: &[f64],
    tape: &GruTape,
    _h2: &[f64],
    params: &ModelParams,
    grads: &mut ModelParams,
    dh2: &[f64],
    dx: &mut [f64],
    dh_prev: &mut [f64],
) {
    let d = params.dims.d;
    let mut dn = vec![0.0; d];
    let mut dz = vec![0.0; d];
    for i in 0..d {
        dn[i] = dh2[i] * (1.0 - tape.z[i]);
        dz[i] = dh2[i] * (h[i] - tape.n[i]);
        dh_prev[i] += dh2[i] * tape.z[i];
    }
    let mut dnpre = vec![0.0; d];
    let mut dr = vec![0.0; d];
    let mut dunh = vec![0.0; d];
    for i in 0..d {
        dnpre[i] = dn[i] * (1.0 - tape.n[i] * tape.n[i]);
        dr[i] = dnpre[i] * tape.unh[i];
        dunh[i] = dnpre[i] * tape.r[i];
    }
    outer_acc(&mut grads.gru_wn, &dnpre, x);
    add_acc(&mut grads.gru_bn.data, &dnpre);
    matvec_t_acc(&params.gru_wn, &dnpre, dx);
    outer_acc(&mut grads.gru_un, &dunh, h);
    matvec_t_acc(&params.gru_un, &dunh, dh_prev);

    let mut dzpre = vec![0.0; d];
    let mut drpre = vec![0.0; d];
    for i in 0..d {
        dzpre[i] = dz[i] * tape.z[i] * (1.0 - tape.z[i]);
        drpre[i] = dr[i] * tape.r[i] * (1.0 - tape.r[i]);
    }
    outer_acc(&mut grads.gru_wz, &dzpre, x);
    outer_acc(&mut grads.gru_uz, &dzpre, h);
    add_acc(&mut grads.gru_bz.data, &dzpre);
    matvec_t_acc(&params.gru_wz, &dzpre, dx);
    matvec_t_acc(&params.gru_uz, &dzpre, dh_prev);

    outer_acc(&mut grads.gru_wr, &drpre, x);
    outer_acc(&mut grads.gru_ur, &drpre, h);
    add_acc(&mut grads.gru_br.data, &drpre);
    matvec_t_acc(&params.gru_wr, &drpre, dx);
    matvec_t_acc(&params.gru_ur, &drpre, dh_prev);
}

/// Backward of represent: recomputes the per-token gates (cheap) and
/// distributes gradients into aggregator params, token encodings, and the
/// feature rows.
fn represent_backward(
    tokens: &[u32],
    emb: &SceneEmbedding,
    params: &ModelParams,
    grads: &mut ModelParams,
    dh: &[f64],
    d_feats: &mut [Vec<f64>],
) {
    let d = params.dims.d;
    let n_kp = emb.feats.len() - 1;
    // h = tanh(acc); recompute h to get acc's gradient
    let mut acc = matvec(&params.init_w, &emb.mean);
    add_acc(&mut acc, &params.init_b.data);
    let mut token_gates = Vec::with_capacity(tokens.len());
    for (pos, &tok) in tokens.iter().enumerate() {
        let u = token_input(tok, pos, emb, params);
        let gpre = matvec(&params.gate_w, &u);
        let cpre = matvec(&params.cand_w, &u);
        let mut g = vec![0.0; d];
        let mut c = vec![0.0; d];
        for i in 0..d {
            g[i] = sigmoid(gpre[i] + params.gate_b.data[i]);
            c[i] = (cpre[i] + params.cand_b.data[i]).tanh();
            acc[i] += g[i] * c[i];
        }
        token_gates.push((u, g, c));
    }
    let dacc: Vec<f64> = acc.iter().zip(dh).map(|(a, dhi)| {
        let t = a.tanh();
        dhi * (1.0 - t * t)
    }).collect();

    for (pos, &tok) in tokens.iter().enumerate() {
        let (u, g, c) = &token_gates[pos];
        let mut dgpre = vec![0.0; d];
        let mut dcpre = vec![0.0; d];
        for i in 0..d {
            let dg = dacc[i] * c[i];
            let dc = dacc[i] * g[i];
            dgpre[i] = dg * g[i] * (1.0 - g[i]);
            dcpre[i] = dc * (1.0 - c[i] * c[i]);
        }
        outer_acc(&mut grads.gate_w, &dgpre, u);
        add_acc(&mut grads.gate_b.data, &dgpre);
        outer_acc(&mut grads.cand_w, &dcpre, u);
        add_acc(&mut grads.cand_b.data, &dcpre);
        let mut du = vec![0.0; d];
        matvec_t_acc(&params.gate_w, &dgpre, &mut du);
        matvec_t_acc(&params.cand_w, &dcpre, &mut du);
        add_acc(&mut d_feats[tok as usize], &du);
        if params.dims.use_token_order {
            add_acc(grads.type_emb.row_mut(pos % 2), &du);
            let row = pos.min(params.dims.max_tokens - 1);
            add_acc(grads.pos_emb.row_mut(row), &du);
        }
    }

    outer_acc(&mut grads.init_w, &dacc, &emb.mean);
    add_acc(&mut grads.init_b.data, &dacc);
    let mut dmean = vec![0.0; d];
    matvec_t_acc(&params.init_w, &dacc, &mut dmean);
    for df in d_feats.iter_mut().take(n_kp) {
        for (a, b) in df.iter_mut().zip(&dmean) {
            *a += b / n_kp as f64;
        }
    }
}
