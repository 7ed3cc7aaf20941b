// SPDX-License-Identifier: MIT OR Apache-2.0

//! Instrumented decoder-only forward pass.
//!
//! The residual stream is decomposed exactly as
//! `r^(ℓ+1) = r^(ℓ) + Σ_h head_contrib[ℓ][h] + mlp_out[ℓ]`, where each head's
//! contribution includes its share `b_O / H` of the output-projection bias.
//! Recording is opt-in per site ([`Recording`]); overrides ([`Override`])
//! replace a component's contribution, replace attention rows, or add a
//! delta to the stream or to the normalized attention input.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Mlp, ModelBundle, Norm, NormKind, PositionalScheme};
use crate::tensor::{self, Matrix};

// ---------------------------------------------------------------------------
// Component ids
// ---------------------------------------------------------------------------

/// One additive contributor to the residual stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ComponentId {
    Head { layer: usize, head: usize },
    Mlp { layer: usize },
}

impl ComponentId {
    pub fn head(layer: usize, head: usize) -> Self {
        Self::Head { layer, head }
    }

    pub fn mlp(layer: usize) -> Self {
        Self::Mlp { layer }
    }

    pub fn layer(&self) -> usize {
        match *self {
            Self::Head { layer, .. } | Self::Mlp { layer } => layer,
        }
    }

    /// Every head and MLP of the model, in layer order (heads before the MLP).
    pub fn all(bundle: &ModelBundle) -> Vec<ComponentId> {
        let mut out = Vec::new();
        for l in 0..bundle.n_layers() {
            for h in 0..bundle.n_heads() {
                out.push(Self::head(l, h));
            }
            out.push(Self::mlp(l));
        }
        out
    }

    pub fn validate(&self, bundle: &ModelBundle) -> Result<()> {
        match *self {
            Self::Head { layer, head } => bundle.check_head(layer, head),
            Self::Mlp { layer } if layer < bundle.n_layers() => Ok(()),
            Self::Mlp { layer } => Err(Error::InvalidInput(format!("MLP layer {layer} out of range"))),
        }
    }
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Head { layer, head } => write!(f, "L{layer}H{head}"),
            Self::Mlp { layer } => write!(f, "MLP{layer}"),
        }
    }
}

impl FromStr for ComponentId {
    type Err = Error;

    /// Accepts `L:H`, `LxHy` style (`L3H2`) and `MLP3`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse component {s:?} (expected L:H, L3H2 or MLP3)"));
        let t = s.trim();
        if let Some(rest) = t.strip_prefix("MLP").or_else(|| t.strip_prefix("mlp")) {
            return rest.parse().map(Self::mlp).map_err(|_| bad());
        }
        if let Some((l, h)) = t.split_once(':') {
            return Ok(Self::head(l.parse().map_err(|_| bad())?, h.parse().map_err(|_| bad())?));
        }
        let body = t.strip_prefix('L').ok_or_else(bad)?;
        let (l, h) = body.split_once('H').ok_or_else(bad)?;
        Ok(Self::head(l.parse().map_err(|_| bad())?, h.parse().map_err(|_| bad())?))
    }
}

// ---------------------------------------------------------------------------
// Recording and overrides
// ---------------------------------------------------------------------------

/// Which activations to keep in the trace.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Recording {
    /// Pre-norm residual stream `r^(ℓ)`, `ℓ = 0..=L`.
    pub residual: bool,
    /// Normalized input to each attention sublayer.
    pub attn_input: bool,
    /// Normalized input to each MLP.
    pub mlp_input: bool,
    /// Per-head `z_h` before `W_O`.
    pub head_out: bool,
    /// Per-head `z_h W_O + b_O/H`.
    pub head_contrib: bool,
    /// Post-softmax attention patterns.
    pub attn: bool,
    /// Pre-softmax attention logits (masked entries are `-inf`).
    pub attn_scores: bool,
    pub mlp_out: bool,
    /// Restrict per-layer recordings to these layers (residual is unaffected).
    pub layers: Option<Vec<usize>>,
}

impl Recording {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all() -> Self {
        Self {
            residual: true,
            attn_input: true,
            mlp_input: true,
            head_out: true,
            head_contrib: true,
            attn: true,
            attn_scores: true,
            mlp_out: true,
            layers: None,
        }
    }

    pub fn only_layers(mut self, layers: Vec<usize>) -> Self {
        self.layers = Some(layers);
        self
    }

    fn wants(&self, layer: usize) -> bool {
        self.layers.as_ref().is_none_or(|l| l.contains(&layer))
    }
}

/// Where a residual delta is added.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DeltaSite {
    /// Pre-norm stream read by the layer; the delta persists downstream.
    Stream,
    /// Post-norm input of the layer's attention only.
    #[default]
    AttnInput,
}

/// One intervention applied during a run. Payload row `k` applies to
/// `positions[k]`.
#[derive(Debug, Clone, PartialEq)]
pub enum Override {
    Component { id: ComponentId, positions: Vec<usize>, values: Matrix },
    AttentionPattern { layer: usize, head: usize, positions: Vec<usize>, rows: Matrix },
    ResidualDelta { layer: usize, positions: Vec<usize>, delta: Matrix, site: DeltaSite },
}

/// Interventions for one run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OverrideSet {
    pub items: Vec<Override>,
}

impl OverrideSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, o: Override) -> &mut Self {
        self.items.push(o);
        self
    }

    pub fn with(mut self, o: Override) -> Self {
        self.items.push(o);
        self
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn validate(&self, bundle: &ModelBundle, seq: usize, start_layer: usize) -> Result<()> {
        let d = bundle.d_model();
        let check_pos = |positions: &[usize], rows: usize| -> Result<()> {
            if let Some(&p) = positions.iter().find(|&&p| p >= seq) {
                return Err(Error::InvalidInput(format!("override position {p} outside sequence of length {seq}")));
            }
            if positions.len() != rows {
                return Err(Error::Shape(format!(
                    "override has {} positions but {rows} payload rows",
                    positions.len()
                )));
            }
            Ok(())
        };
        for o in &self.items {
            let layer = match o {
                Override::Component { id, positions, values } => {
                    id.validate(bundle)?;
                    check_pos(positions, values.rows())?;
                    if values.cols() != d {
                        return Err(Error::Shape(format!("component payload width {} != d_model {d}", values.cols())));
                    }
                    id.layer()
                }
                Override::AttentionPattern { layer, head, positions, rows } => {
                    bundle.check_head(*layer, *head)?;
                    check_pos(positions, rows.rows())?;
                    if rows.cols() != seq {
                        return Err(Error::Shape(format!(
                            "pattern rows have width {} != sequence length {seq}",
                            rows.cols()
                        )));
                    }
                    *layer
                }
                Override::ResidualDelta { layer, positions, delta, .. } => {
                    if *layer >= bundle.n_layers() {
                        return Err(Error::InvalidInput(format!("delta layer {layer} out of range")));
                    }
                    check_pos(positions, delta.rows())?;
                    if delta.cols() != d {
                        return Err(Error::Shape(format!("delta width {} != d_model {d}", delta.cols())));
                    }
                    *layer
                }
            };
            if layer < start_layer {
                return Err(Error::InvalidInput(format!(
                    "override at layer {layer} precedes the resume layer {start_layer}"
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Trace
// ---------------------------------------------------------------------------

/// Activations recorded during one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub token_ids: Vec<u32>,
    /// First layer actually computed (0 unless resumed).
    pub start_layer: usize,
    pub residual: Vec<Option<Matrix>>,
    pub attn_input: Vec<Option<Matrix>>,
    pub mlp_input: Vec<Option<Matrix>>,
    pub head_out: Vec<Option<Vec<Matrix>>>,
    pub head_contrib: Vec<Option<Vec<Matrix>>>,
    pub attn: Vec<Option<Vec<Matrix>>>,
    pub attn_scores: Vec<Option<Vec<Matrix>>>,
    pub mlp_out: Vec<Option<Matrix>>,
    /// Next-token logits at the final position.
    pub logits: Vec<f32>,
}

impl RunTrace {
    pub fn seq_len(&self) -> usize {
        self.token_ids.len()
    }

    /// Index of the final position `T`.
    pub fn last(&self) -> usize {
        self.token_ids.len() - 1
    }

    pub fn residual(&self, layer: usize) -> Result<&Matrix> {
        self.residual.get(layer).and_then(Option::as_ref).ok_or(Error::NotRecorded("residual"))
    }

    pub fn attn_input(&self, layer: usize) -> Result<&Matrix> {
        self.attn_input.get(layer).and_then(Option::as_ref).ok_or(Error::NotRecorded("attn_input"))
    }

    pub fn mlp_input(&self, layer: usize) -> Result<&Matrix> {
        self.mlp_input.get(layer).and_then(Option::as_ref).ok_or(Error::NotRecorded("mlp_input"))
    }

    pub fn head_out(&self, layer: usize, head: usize) -> Result<&Matrix> {
        pick(&self.head_out, layer, head).ok_or(Error::NotRecorded("head_out"))
    }

    pub fn head_contrib(&self, layer: usize, head: usize) -> Result<&Matrix> {
        pick(&self.head_contrib, layer, head).ok_or(Error::NotRecorded("head_contrib"))
    }

    pub fn attn(&self, layer: usize, head: usize) -> Result<&Matrix> {
        pick(&self.attn, layer, head).ok_or(Error::NotRecorded("attn"))
    }

    pub fn attn_scores(&self, layer: usize, head: usize) -> Result<&Matrix> {
        pick(&self.attn_scores, layer, head).ok_or(Error::NotRecorded("attn_scores"))
    }

    pub fn mlp_out(&self, layer: usize) -> Result<&Matrix> {
        self.mlp_out.get(layer).and_then(Option::as_ref).ok_or(Error::NotRecorded("mlp_out"))
    }

    /// Contribution of any component (head or MLP).
    pub fn contribution(&self, id: ComponentId) -> Result<&Matrix> {
        match id {
            ComponentId::Head { layer, head } => self.head_contrib(layer, head),
            ComponentId::Mlp { layer } => self.mlp_out(layer),
        }
    }
}

fn pick(v: &[Option<Vec<Matrix>>], layer: usize, head: usize) -> Option<&Matrix> {
    v.get(layer).and_then(Option::as_ref).and_then(|hs| hs.get(head))
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

/// Forward pass from the token embeddings.
pub fn run(
    bundle: &ModelBundle,
    token_ids: &[u32],
    overrides: &OverrideSet,
    recording: &Recording,
) -> Result<RunTrace> {
    let x = embed(bundle, token_ids)?;
    forward(bundle, token_ids, 0, x, overrides, recording)
}

/// Forward pass resumed at `start_layer` from a cached stream `r^(start_layer)`.
///
/// With no overrides below `start_layer` this reproduces [`run`] exactly,
/// so sweeps can skip the unchanged prefix.
pub fn run_from(
    bundle: &ModelBundle,
    token_ids: &[u32],
    start_layer: usize,
    residual_in: &Matrix,
    overrides: &OverrideSet,
    recording: &Recording,
) -> Result<RunTrace> {
    if start_layer > bundle.n_layers() {
        return Err(Error::InvalidInput(format!("resume layer {start_layer} out of range")));
    }
    if residual_in.shape() != (token_ids.len(), bundle.d_model()) {
        return Err(Error::Shape(format!(
            "cached residual is {:?}, expected ({}, {})",
            residual_in.shape(),
            token_ids.len(),
            bundle.d_model()
        )));
    }
    forward(bundle, token_ids, start_layer, residual_in.clone(), overrides, recording)
}

/// Token (plus learned position) embeddings, `T × d`.
pub fn embed(bundle: &ModelBundle, token_ids: &[u32]) -> Result<Matrix> {
    let arch = &bundle.arch;
    if token_ids.is_empty() {
        return Err(Error::InvalidInput("empty token sequence".into()));
    }
    if token_ids.len() > arch.max_positions {
        return Err(Error::InvalidInput(format!(
            "sequence length {} exceeds max_positions {}",
            token_ids.len(),
            arch.max_positions
        )));
    }
    let d = arch.d_model;
    let mut x = Matrix::zeros(token_ids.len(), d);
    for (i, &t) in token_ids.iter().enumerate() {
        if t as usize >= arch.vocab_size {
            return Err(Error::InvalidInput(format!("token id {t} >= vocab size {}", arch.vocab_size)));
        }
        let row = x.row_mut(i);
        row.copy_from_slice(bundle.embed.row(t as usize));
        if let Some(p) = &bundle.positional {
            for (r, &pv) in row.iter_mut().zip(p.row(i)) {
                *r += pv;
            }
        }
    }
    Ok(x)
}

fn forward(
    bundle: &ModelBundle,
    token_ids: &[u32],
    start_layer: usize,
    mut x: Matrix,
    overrides: &OverrideSet,
    rec: &Recording,
) -> Result<RunTrace> {
    let arch = &bundle.arch;
    let (seq, n_layers, n_heads, dk) = (token_ids.len(), arch.n_layers, arch.n_heads, arch.d_head);
    overrides.validate(bundle, seq, start_layer)?;
    if seq > arch.max_positions {
        return Err(Error::InvalidInput(format!("sequence length {seq} exceeds max_positions {}", arch.max_positions)));
    }

    let mut trace = RunTrace {
        token_ids: token_ids.to_vec(),
        start_layer,
        residual: vec![None; n_layers + 1],
        attn_input: vec![None; n_layers],
        mlp_input: vec![None; n_layers],
        head_out: vec![None; n_layers],
        head_contrib: vec![None; n_layers],
        attn: vec![None; n_layers],
        attn_scores: vec![None; n_layers],
        mlp_out: vec![None; n_layers],
        logits: Vec::new(),
    };
    let rope = (arch.positional == PositionalScheme::Rotary).then(|| RopeTable::new(seq, dk, arch.rope_theta));
    let scale = 1.0 / (dk as f32).sqrt();

    for l in start_layer..n_layers {
        let layer = &bundle.layers[l];
        let want = rec.wants(l);
        for o in &overrides.items {
            if let Override::ResidualDelta { layer: ol, positions, delta, site: DeltaSite::Stream } = o {
                if *ol == l {
                    add_rows(&mut x, positions, delta);
                }
            }
        }
        if rec.residual {
            trace.residual[l] = Some(x.clone());
        }

        // Attention sublayer.
        let mut a = apply_norm(&x, &layer.ln_attn, arch.norm, arch.norm_eps);
        for o in &overrides.items {
            if let Override::ResidualDelta { layer: ol, positions, delta, site: DeltaSite::AttnInput } = o {
                if *ol == l {
                    add_rows(&mut a, positions, delta);
                }
            }
        }
        let w = &layer.attn;
        let mut q = a.matmul(&w.w_q)?;
        let mut k = a.matmul(&w.w_k)?;
        let mut v = a.matmul(&w.w_v)?;
        add_bias(&mut q, w.b_q.as_deref());
        add_bias(&mut k, w.b_k.as_deref());
        add_bias(&mut v, w.b_v.as_deref());
        if let Some(rt) = &rope {
            rt.apply(&mut q, dk);
            rt.apply(&mut k, dk);
        }
        let bias_share: Option<Vec<f32>> = w.b_o.as_ref().map(|b| b.iter().map(|x| x / n_heads as f32).collect());

        let mut attn_total = Matrix::zeros(seq, arch.d_model);
        let mut heads_out = Vec::new();
        let mut heads_contrib = Vec::new();
        let mut heads_attn = Vec::new();
        let mut heads_scores = Vec::new();
        for h in 0..n_heads {
            let kv = arch.kv_head(h);
            let mut scores = Matrix::from_fn(seq, seq, |_, _| f32::NEG_INFINITY);
            for i in 0..seq {
                let qi = &q.row(i)[h * dk..(h + 1) * dk];
                for j in 0..=i {
                    let kj = &k.row(j)[kv * dk..(kv + 1) * dk];
                    let s: f32 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                    scores.set(i, j, s * scale);
                }
            }
            let mut pattern = scores.clone();
            for i in 0..seq {
                tensor::softmax_in_place(&mut pattern.row_mut(i)[..=i]);
                pattern.row_mut(i)[i + 1..].iter_mut().for_each(|p| *p = 0.0);
            }
            for o in &overrides.items {
                if let Override::AttentionPattern { layer: ol, head: oh, positions, rows } = o {
                    if *ol == l && *oh == h {
                        for (r, &p) in positions.iter().enumerate() {
                            pattern.row_mut(p).copy_from_slice(rows.row(r));
                        }
                    }
                }
            }
            let mut z = Matrix::zeros(seq, dk);
            for i in 0..seq {
                let zi = z.row_mut(i);
                for j in 0..=i.max(last_nonzero(pattern.row(i))) {
                    let p = pattern.get(i, j);
                    if p == 0.0 {
                        continue;
                    }
                    let vj = &v.row(j)[kv * dk..(kv + 1) * dk];
                    for (zz, &vv) in zi.iter_mut().zip(vj) {
                        *zz += p * vv;
                    }
                }
            }
            let w_o_h = w.w_o.slice_rows(h * dk, (h + 1) * dk);
            let mut contrib = z.matmul(&w_o_h)?;
            if let Some(b) = &bias_share {
                add_bias(&mut contrib, Some(b));
            }
            let id = ComponentId::head(l, h);
            replace_component(&mut contrib, id, overrides);
            for (t, c) in attn_total.data_mut().iter_mut().zip(contrib.data()) {
                *t += c;
            }
            if want && rec.head_out {
                heads_out.push(z);
            }
            if want && rec.attn_scores {
                heads_scores.push(scores);
            }
            if want && rec.attn {
                heads_attn.push(pattern);
            }
            if want && rec.head_contrib {
                heads_contrib.push(contrib);
            }
        }
        for (xv, t) in x.data_mut().iter_mut().zip(attn_total.data()) {
            *xv += t;
        }

        // MLP sublayer.
        let m_in = apply_norm(&x, &layer.ln_mlp, arch.norm, arch.norm_eps);
        let mut m = mlp_forward(&layer.mlp, &m_in)?;
        replace_component(&mut m, ComponentId::mlp(l), overrides);
        for (xv, mv) in x.data_mut().iter_mut().zip(m.data()) {
            *xv += mv;
        }

        if want {
            if rec.attn_input {
                trace.attn_input[l] = Some(a);
            }
            if rec.mlp_input {
                trace.mlp_input[l] = Some(m_in);
            }
            if rec.mlp_out {
                trace.mlp_out[l] = Some(m);
            }
            if rec.head_out {
                trace.head_out[l] = Some(heads_out);
            }
            if rec.head_contrib {
                trace.head_contrib[l] = Some(heads_contrib);
            }
            if rec.attn {
                trace.attn[l] = Some(heads_attn);
            }
            if rec.attn_scores {
                trace.attn_scores[l] = Some(heads_scores);
            }
        }
    }

    let last = x.row(seq - 1);
    let mut xn = vec![0.0; arch.d_model];
    norm_row(last, &bundle.ln_final, arch.norm, arch.norm_eps, &mut xn);
    let mut logits = bundle.unembed.mul_vec(&xn)?;
    if let Some(b) = &bundle.unembed_bias {
        for (l, bv) in logits.iter_mut().zip(b) {
            *l += bv;
        }
    }
    trace.logits = logits;
    if rec.residual {
        trace.residual[n_layers] = Some(x);
    }
    Ok(trace)
}

fn last_nonzero(row: &[f32]) -> usize {
    row.iter().rposition(|&p| p != 0.0).unwrap_or(0)
}

fn add_rows(m: &mut Matrix, positions: &[usize], rows: &Matrix) {
    for (r, &p) in positions.iter().enumerate() {
        for (a, &b) in m.row_mut(p).iter_mut().zip(rows.row(r)) {
            *a += b;
        }
    }
}

fn add_bias(m: &mut Matrix, bias: Option<&[f32]>) {
    if let Some(b) = bias {
        for i in 0..m.rows() {
            for (a, &bv) in m.row_mut(i).iter_mut().zip(b) {
                *a += bv;
            }
        }
    }
}

fn replace_component(m: &mut Matrix, id: ComponentId, overrides: &OverrideSet) {
    for o in &overrides.items {
        if let Override::Component { id: oid, positions, values } = o {
            if *oid == id {
                for (r, &p) in positions.iter().enumerate() {
                    m.row_mut(p).copy_from_slice(values.row(r));
                }
            }
        }
    }
}

fn norm_row(x: &[f32], n: &Norm, kind: NormKind, eps: f32, out: &mut [f32]) {
    match kind {
        NormKind::LayerNorm => tensor::layer_norm_row(x, &n.gain, n.bias.as_deref(), eps, out),
        NormKind::RmsNorm => tensor::rms_norm_row(x, &n.gain, eps, out),
    }
}

fn apply_norm(x: &Matrix, n: &Norm, kind: NormKind, eps: f32) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        norm_row(x.row(i), n, kind, eps, out.row_mut(i));
    }
    out
}

/// GELU, tanh approximation (GPT-2's `gelu_new`).
pub fn gelu(x: f32) -> f32 {
    let c = (2.0f32 / std::f32::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044_715 * x * x * x)).tanh())
}

pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

fn mlp_forward(mlp: &Mlp, x: &Matrix) -> Result<Matrix> {
    match mlp {
        Mlp::Gelu { w_in, b_in, w_out, b_out } => {
            let mut h = x.matmul(w_in)?;
            add_bias(&mut h, Some(b_in));
            h.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
            let mut o = h.matmul(w_out)?;
            add_bias(&mut o, Some(b_out));
            Ok(o)
        }
        Mlp::SwiGlu { w_gate, w_up, w_down } => {
            let mut g = x.matmul(w_gate)?;
            let u = x.matmul(w_up)?;
            for (gv, &uv) in g.data_mut().iter_mut().zip(u.data()) {
                *gv = silu(*gv) * uv;
            }
            g.matmul(w_down)
        }
    }
}

// ---------------------------------------------------------------------------
// Rotary embeddings
// ---------------------------------------------------------------------------

struct RopeTable {
    cos: Vec<Vec<f32>>,
    sin: Vec<Vec<f32>>,
}

impl RopeTable {
    fn new(seq: usize, dk: usize, theta: f32) -> Self {
        let half = dk / 2;
        let mut cos = Vec::with_capacity(seq);
        let mut sin = Vec::with_capacity(seq);
        for p in 0..seq {
            let (c, s): (Vec<f32>, Vec<f32>) = (0..half)
                .map(|i| {
                    let ang = p as f64 * rope_freq(i, dk, theta);
                    (ang.cos() as f32, ang.sin() as f32)
                })
                .unzip();
            cos.push(c);
            sin.push(s);
        }
        Self { cos, sin }
    }

    /// Rotate every head block of every row in place.
    fn apply(&self, m: &mut Matrix, dk: usize) {
        let half = dk / 2;
        for p in 0..m.rows() {
            let row = m.row_mut(p);
            for block in row.chunks_exact_mut(dk) {
                for i in 0..half {
                    let (a, b) = (block[i], block[i + half]);
                    block[i] = a * self.cos[p][i] - b * self.sin[p][i];
                    block[i + half] = b * self.cos[p][i] + a * self.sin[p][i];
                }
            }
        }
    }
}

fn rope_freq(i: usize, dk: usize, theta: f32) -> f64 {
    f64::from(theta).powf(-2.0 * i as f64 / dk as f64)
}

/// Rotate one head vector by `offset` positions (negative offsets allowed).
pub fn rope_rotate(vec: &mut [f32], offset: i64, theta: f32) {
    let dk = vec.len();
    let half = dk / 2;
    for i in 0..half {
        let ang = offset as f64 * rope_freq(i, dk, theta);
        let (c, s) = (ang.cos(), ang.sin());
        let (a, b) = (f64::from(vec[i]), f64::from(vec[i + half]));
        vec[i] = (a * c - b * s) as f32;
        vec[i + half] = (b * c + a * s) as f32;
    }
}

// ---------------------------------------------------------------------------
// Circuits and readout
// ---------------------------------------------------------------------------

/// `W_QK = W_Q W_Kᵀ / √d_k` and `W_OV = W_V W_O`, both `d × d`.
///
/// The attention logit from query row `r_q` to key row `r_k` is
/// `r_q W_QK r_kᵀ` (query/key biases and rotary positions excluded).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CircuitMatrices {
    pub w_qk: Matrix,
    pub w_ov: Matrix,
}

pub fn circuit_matrices(bundle: &ModelBundle, layer: usize, head: usize) -> Result<CircuitMatrices> {
    let hw = bundle.head_weights(layer, head)?;
    let scale = 1.0 / (bundle.arch.d_head as f32).sqrt();
    Ok(CircuitMatrices { w_qk: hw.w_q.matmul_t(&hw.w_k)?.scale(scale), w_ov: hw.w_v.matmul(&hw.w_o)? })
}

/// Next-token probabilities of the four option tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Readout {
    /// Softmax over the full vocabulary.
    pub raw: [f64; 4],
    /// `raw` renormalized over the four options.
    pub renormalized: [f64; 4],
    /// Highest-probability option (lowest index on ties).
    pub argmax: usize,
    pub tied: bool,
}

impl Readout {
    pub fn p(&self, option: usize) -> f64 {
        self.raw[option]
    }
}

pub fn decision_readout(trace: &RunTrace, option_token_ids: &[u32; 4]) -> Result<Readout> {
    readout_from_logits(&trace.logits, option_token_ids)
}

pub fn readout_from_logits(logits: &[f32], option_token_ids: &[u32; 4]) -> Result<Readout> {
    for i in 0..4 {
        for j in i + 1..4 {
            if option_token_ids[i] == option_token_ids[j] {
                return Err(Error::InvalidInput(format!(
                    "option token ids must be distinct, got {option_token_ids:?}"
                )));
            }
        }
        if option_token_ids[i] as usize >= logits.len() {
            return Err(Error::InvalidInput(format!("option token id {} out of vocab", option_token_ids[i])));
        }
    }
    let probs = tensor::softmax_f64(logits);
    let raw = option_token_ids.map(|t| probs[t as usize]);
    let total: f64 = raw.iter().sum();
    let renormalized = raw.map(|p| if total > 0.0 { p / total } else { 0.25 });
    // Compare logits, which keeps ties exact where probabilities underflow.
    let opt_logits = option_token_ids.map(|t| logits[t as usize]);
    let mut argmax = 0;
    for i in 1..4 {
        if opt_logits[i] > opt_logits[argmax] {
            argmax = i;
        }
    }
    let tied = (0..4).filter(|&i| opt_logits[i] == opt_logits[argmax]).count() > 1;
    if tied {
        log::debug!("readout tie among options, picked {argmax}");
    }
    Ok(Readout { raw, renormalized, argmax, tied })
}

/// Greedy continuation of `prompt` by `n` tokens (full recompute per step).
pub fn generate_greedy(bundle: &ModelBundle, prompt: &[u32], n: usize) -> Result<Vec<u32>> {
    let mut ids = prompt.to_vec();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let t = run(bundle, &ids, &OverrideSet::new(), &Recording::none())?;
        let next = argmax(&t.logits) as u32;
        out.push(next);
        ids.push(next);
    }
    Ok(out)
}

/// Index of the largest value (lowest index on ties).
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn component_id_parsing() {
        assert_eq!("3:2".parse::<ComponentId>().unwrap(), ComponentId::head(3, 2));
        assert_eq!("L17H24".parse::<ComponentId>().unwrap(), ComponentId::head(17, 24));
        assert_eq!("MLP4".parse::<ComponentId>().unwrap(), ComponentId::mlp(4));
        assert!("H3".parse::<ComponentId>().is_err());
        assert_eq!(ComponentId::head(1, 2).to_string(), "L1H2");
    }

    #[test]
    fn uniform_logits_readout() {
        let logits = vec![0.0f32; 10];
        let r = readout_from_logits(&logits, &[1, 2, 3, 4]).unwrap();
        for p in r.raw {
            assert!((p - 0.1).abs() < 1e-12);
        }
        for p in r.renormalized {
            assert!((p - 0.25).abs() < 1e-12);
        }
        assert_eq!(r.argmax, 0);
        assert!(r.tied);
    }

    #[test]
    fn boosted_option_wins() {
        let mut logits = vec![0.0f32; 10];
        logits[3] = 10.0;
        let r = readout_from_logits(&logits, &[1, 2, 3, 4]).unwrap();
        assert_eq!(r.argmax, 2);
        assert!(!r.tied);
        assert!(readout_from_logits(&logits, &[1, 1, 3, 4]).is_err());
    }

    #[test]
    fn rope_rotation_composes() {
        let mut a = vec![0.3f32, -1.0, 0.5, 2.0];
        let orig = a.clone();
        rope_rotate(&mut a, 5, 10_000.0);
        rope_rotate(&mut a, -5, 10_000.0);
        for (x, y) in a.iter().zip(&orig) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}
