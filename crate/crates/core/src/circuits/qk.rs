// SPDX-License-Identifier: MIT OR Apache-2.0

//! Rank-1 factorization of a head's QK circuit.
//!
//! With logits `l_j = r_q·W_QK·r_j`, the fit finds unit `u_q`, `u_k` so
//! that `c·(u_q·r_q)·(u_k·r_j)` with the fixed coupling `c = u_qᵀW_QK u_k`
//! reproduces every key logit. The objective, averaged over samples `n`, is
//!
//! ```text
//! J = (1/N) Σ_n ‖c·α_n·κ_n − L_n‖² / (‖L_n‖² + ε),
//! α_n = u_q·r_q[n],  κ_n = R_K[n]·u_k,  L_n = R_K[n]·W_QKᵀ·r_q[n]
//! ```
//!
//! minimized jointly on the two unit spheres by projected gradient descent
//! (Barzilai-Borwein step, Armijo backtracking) from several starts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::engine::{self, ComponentId, OverrideSet, Recording};
use crate::error::{Error, Result};
use crate::model::arch::PositionalScheme;
use crate::model::ModelBundle;
use crate::parallel;
use crate::promptkit::{Condition, PromptPair, Span};
use crate::tensor::{svd, Matrix};

/// Query and key representations of one prompt at the decision layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QkSample {
    pub example: String,
    pub condition: Condition,
    /// Post-norm input at the answer slot.
    pub r_q: Vec<f32>,
    /// `(T+1) × d` post-norm key inputs (rotation-folded for rotary models).
    pub keys: Matrix,
    pub option_spans: [Span; 4],
    /// Option holding the head's most-attended option token.
    pub attended_option: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QkDataset {
    pub head: ComponentId,
    pub samples: Vec<QkSample>,
}

impl QkDataset {
    pub fn n_examples(&self) -> usize {
        let mut ids: Vec<&str> = self.samples.iter().map(|s| s.example.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }
}

/// Moore-Penrose pseudo-inverse of a tall full-column-rank matrix.
fn pinv(a: &Matrix) -> Result<Matrix> {
    let s = svd(a)?;
    let smax = s.singular_values[0];
    let k = s.singular_values.len();
    // V Σ⁻¹ Uᵀ
    Ok(Matrix::from_fn(a.cols(), a.rows(), |i, j| {
        (0..k)
            .filter(|&r| s.singular_values[r] > smax * 1e-7)
            .map(|r| {
                f64::from(s.right_vectors.get(i, r)) * f64::from(s.left_vectors.get(j, r))
                    / f64::from(s.singular_values[r])
            })
            .sum::<f64>() as f32
    }))
}

/// Extracts the query row and rotation-folded key rows a head sees.
pub struct KeyFolder {
    layer: usize,
    head: usize,
    fold: Option<(Matrix, Matrix)>,
    theta: f32,
}

impl KeyFolder {
    pub fn new(bundle: &ModelBundle, layer: usize, head: usize) -> Result<Self> {
        bundle.check_head(layer, head)?;
        let fold = if bundle.arch.positional == PositionalScheme::Rotary {
            let w_k = bundle.head_weights(layer, head)?.w_k;
            Some((pinv(&w_k)?, w_k))
        } else {
            None
        };
        Ok(Self { layer, head, fold, theta: bundle.arch.rope_theta })
    }

    pub fn head(&self) -> ComponentId {
        ComponentId::head(self.layer, self.head)
    }

    /// Fold key rows `0..=last` of `x` so that `r_q·W_QK·r̃_j` is the logit
    /// the head computes (biases excluded).
    pub fn fold(&self, x: &Matrix, last: usize) -> Result<Matrix> {
        let keys = x.slice_rows(0, last + 1);
        let Some((pinv, w_k)) = &self.fold else {
            return Ok(keys);
        };
        let mut k = keys.matmul(w_k)?;
        for j in 0..k.rows() {
            engine::rope_rotate(k.row_mut(j), j as i64 - last as i64, self.theta);
        }
        k.matmul(pinv)
    }

    /// `(r_q, keys)` for one prompt.
    pub fn query_and_keys(&self, bundle: &ModelBundle, ids: &[u32]) -> Result<(Vec<f32>, Matrix)> {
        let rec = Recording { attn_input: true, layers: Some(vec![self.layer]), ..Recording::none() };
        let t = engine::run(bundle, ids, &OverrideSet::new(), &rec)?;
        let x = t.attn_input(self.layer)?;
        Ok((x.row(t.last()).to_vec(), self.fold(x, t.last())?))
    }
}

/// Collect rank-1 fit samples for `head` from the given prompt conditions.
pub fn build_qk_dataset(
    bundle: &ModelBundle,
    pairs: &[PromptPair],
    head: ComponentId,
    conditions: &[Condition],
) -> Result<QkDataset> {
    let ComponentId::Head { layer, head: h } = head else {
        return Err(Error::InvalidInput(format!("{head} is not an attention head")));
    };
    let folder = KeyFolder::new(bundle, layer, h)?;
    let rec = Recording { attn: true, attn_input: true, layers: Some(vec![layer]), ..Recording::none() };
    let per_pair = parallel::try_par_map(pairs, |pair| {
        conditions
            .iter()
            .map(|&condition| {
                let t = engine::run(bundle, pair.ids(condition)?, &OverrideSet::new(), &rec)?;
                let x = t.attn_input(layer)?;
                let last = t.last();
                let spans = pair.spans_for(condition).options;
                let row = t.attn(layer, h)?.row(last);
                let mut best = (0usize, f32::NEG_INFINITY);
                for (k, s) in spans.iter().enumerate() {
                    for p in s.positions() {
                        if row[p] > best.1 {
                            best = (k, row[p]);
                        }
                    }
                }
                Ok(QkSample {
                    example: pair.id.clone(),
                    condition,
                    r_q: x.row(last).to_vec(),
                    keys: folder.fold(x, last)?,
                    option_spans: spans,
                    attended_option: best.0,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(QkDataset { head, samples: per_pair.into_iter().flatten().collect() })
}

// ---------------------------------------------------------------------------
// Objective
// ---------------------------------------------------------------------------

struct Prepared {
    keys: Vec<f64>,
    m: usize,
    r_q: Vec<f64>,
    logits: Vec<f64>,
    denom: f64,
}

/// Dense `f64` copy of `W_QK`.
struct Dense {
    d: usize,
    w: Vec<f64>,
}

impl Dense {
    fn new(m: &Matrix) -> Self {
        Self { d: m.rows(), w: m.data().iter().map(|&x| f64::from(x)).collect() }
    }

    /// `W x`.
    fn mul(&self, x: &[f64]) -> Vec<f64> {
        (0..self.d).map(|i| self.w[i * self.d..(i + 1) * self.d].iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }

    /// `Wᵀ x`.
    fn t_mul(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                for (o, &w) in out.iter_mut().zip(&self.w[i * self.d..(i + 1) * self.d]) {
                    *o += xi * w;
                }
            }
        }
        out
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn prepare(samples: &[&QkSample], w: &Dense, eps: f64) -> Vec<Prepared> {
    samples
        .iter()
        .map(|s| {
            let r_q: Vec<f64> = s.r_q.iter().map(|&x| f64::from(x)).collect();
            let keys: Vec<f64> = s.keys.data().iter().map(|&x| f64::from(x)).collect();
            let m = s.keys.rows();
            let wq = w.t_mul(&r_q);
            let logits: Vec<f64> = (0..m).map(|j| dot(&keys[j * w.d..(j + 1) * w.d], &wq)).collect();
            let denom = dot(&logits, &logits) + eps;
            Prepared { keys, m, r_q, logits, denom }
        })
        .collect()
}

fn objective(prep: &[Prepared], w: &Dense, u_q: &[f64], u_k: &[f64]) -> f64 {
    let c = dot(u_q, &w.mul(u_k));
    let d = w.d;
    let total: f64 = prep
        .iter()
        .map(|p| {
            let a = c * dot(u_q, &p.r_q);
            (0..p.m)
                .map(|j| {
                    let e = a * dot(&p.keys[j * d..(j + 1) * d], u_k) - p.logits[j];
                    e * e
                })
                .sum::<f64>()
                / p.denom
        })
        .sum();
    total / prep.len() as f64
}

/// Objective and Euclidean gradients.
fn gradient(prep: &[Prepared], w: &Dense, u_q: &[f64], u_k: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let d = w.d;
    let w_uk = w.mul(u_k);
    let wt_uq = w.t_mul(u_q);
    let c = dot(u_q, &w_uk);
    let mut g_q = vec![0.0; d];
    let mut g_k = vec![0.0; d];
    let mut total = 0.0;
    for p in prep {
        let alpha = dot(u_q, &p.r_q);
        let kappa: Vec<f64> = (0..p.m).map(|j| dot(&p.keys[j * d..(j + 1) * d], u_k)).collect();
        let e: Vec<f64> = kappa.iter().zip(&p.logits).map(|(k, l)| c * alpha * k - l).collect();
        let s = 1.0 / p.denom;
        total += dot(&e, &e) * s;
        let e_kappa = dot(&e, &kappa);
        // ∂/∂u_k: (e·ακ) Wᵀu_q + c α R_Kᵀ e
        for (g, &x) in g_k.iter_mut().zip(&wt_uq) {
            *g += s * alpha * e_kappa * x;
        }
        for j in 0..p.m {
            let f = s * c * alpha * e[j];
            if f != 0.0 {
                for (g, &x) in g_k.iter_mut().zip(&p.keys[j * d..(j + 1) * d]) {
                    *g += f * x;
                }
            }
        }
        // ∂/∂u_q: (e·κ) (α W u_k + c r_q)
        for i in 0..d {
            g_q[i] += s * e_kappa * (alpha * w_uk[i] + c * p.r_q[i]);
        }
    }
    let n = prep.len() as f64;
    g_q.iter_mut().for_each(|g| *g *= 2.0 / n);
    g_k.iter_mut().for_each(|g| *g *= 2.0 / n);
    (total / n, g_q, g_k)
}

fn project_tangent(g: &mut [f64], u: &[f64]) {
    let p = dot(g, u);
    g.iter_mut().zip(u).for_each(|(g, u)| *g -= p * u);
}

fn normalize(v: &mut [f64]) -> bool {
    let n = dot(v, v).sqrt();
    if n == 0.0 || !n.is_finite() {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

fn retract(u: &[f64], g: &[f64], step: f64) -> Vec<f64> {
    let mut v: Vec<f64> = u.iter().zip(g).map(|(u, g)| u - step * g).collect();
    if !normalize(&mut v) {
        return u.to_vec();
    }
    v
}

struct Run {
    u_q: Vec<f64>,
    u_k: Vec<f64>,
    value: f64,
    iterations: usize,
    converged: bool,
}

fn descend(prep: &[Prepared], w: &Dense, mut u_q: Vec<f64>, mut u_k: Vec<f64>, opts: &FitOptions) -> Run {
    let (mut value, mut g_q, mut g_k) = gradient(prep, w, &u_q, &u_k);
    project_tangent(&mut g_q, &u_q);
    project_tangent(&mut g_k, &u_k);
    let mut step: Option<f64> = None;
    let mut prev: Option<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> = None;
    for it in 0..opts.max_iter {
        let g2 = dot(&g_q, &g_q) + dot(&g_k, &g_k);
        if g2 <= 1e-30 || value <= 1e-15 {
            return Run { u_q, u_k, value, iterations: it, converged: true };
        }
        let mut eta = match (step, &prev) {
            (Some(_), Some((pq, pk, pgq, pgk))) => {
                let s: Vec<f64> = u_q.iter().zip(pq).chain(u_k.iter().zip(pk)).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = g_q.iter().zip(pgq).chain(g_k.iter().zip(pgk)).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &y).abs();
                if sy > 0.0 {
                    (dot(&s, &s) / sy).clamp(1e-12, 1e6)
                } else {
                    step.unwrap_or(1.0)
                }
            }
            _ => 0.1 / g2.sqrt(),
        };
        let mut accepted = None;
        for _ in 0..60 {
            let nq = retract(&u_q, &g_q, eta);
            let nk = retract(&u_k, &g_k, eta);
            let nv = objective(prep, w, &nq, &nk);
            if nv <= value - 1e-4 * eta * g2 {
                accepted = Some((nq, nk, nv));
                break;
            }
            eta *= 0.5;
        }
        let Some((nq, nk, nv)) = accepted else {
            return Run { u_q, u_k, value, iterations: it, converged: true };
        };
        let change = value - nv;
        prev = Some((u_q, u_k, g_q, g_k));
        u_q = nq;
        u_k = nk;
        step = Some(eta);
        let (v, mut gq, mut gk) = gradient(prep, w, &u_q, &u_k);
        project_tangent(&mut gq, &u_q);
        project_tangent(&mut gk, &u_k);
        value = v;
        g_q = gq;
        g_k = gk;
        let _ = nv;
        if change <= opts.tol * value.max(0.0) + 1e-15 {
            return Run { u_q, u_k, value, iterations: it + 1, converged: true };
        }
    }
    Run { u_q, u_k, value, iterations: opts.max_iter, converged: false }
}

/// Top singular pair of `W` by power iteration.
fn top_singular_pair(w: &Dense, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let mut v: Vec<f64> = (0..w.d).map(|_| StandardNormal.sample(rng)).collect();
    normalize(&mut v);
    let mut u = w.mul(&v);
    for _ in 0..300 {
        u = w.mul(&v);
        if !normalize(&mut u) {
            break;
        }
        let mut nv = w.t_mul(&u);
        if !normalize(&mut nv) {
            break;
        }
        let delta: f64 = nv.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
        v = nv;
        if delta < 1e-13 {
            break;
        }
    }
    (u, v)
}

fn random_unit(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        if normalize(&mut v) {
            return v;
        }
    }
}

/// Optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub folds: usize,
    pub epsilon: f64,
    pub restarts: usize,
    pub max_iter: usize,
    /// Relative objective change that counts as converged.
    pub tol: f64,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { folds: 10, epsilon: 1e-8, restarts: 8, max_iter: 500, tol: 1e-8, seed: 0 }
    }
}

/// Result of one fit on a fixed sample set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rank1Fit {
    pub u_q: Vec<f32>,
    pub u_k: Vec<f32>,
    pub coupling: f64,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn fit_prepared(prep: &[Prepared], w: &Dense, query_mean: &[f64], opts: &FitOptions) -> Rank1Fit {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut starts = vec![top_singular_pair(w, &mut rng)];
    for _ in 0..opts.restarts {
        starts.push((random_unit(w.d, &mut rng), random_unit(w.d, &mut rng)));
    }
    let mut best: Option<Run> = None;
    for (q, k) in starts {
        let run = descend(prep, w, q, k, opts);
        if best.as_ref().is_none_or(|b| run.value < b.value) {
            best = Some(run);
        }
    }
    let mut b = best.expect("at least one start");
    // Signs: mean query side positive, then coupling positive.
    if dot(&b.u_q, query_mean) < 0.0 {
        b.u_q.iter_mut().for_each(|x| *x = -*x);
    }
    let mut c = dot(&b.u_q, &w.mul(&b.u_k));
    if c < 0.0 {
        b.u_k.iter_mut().for_each(|x| *x = -*x);
        c = -c;
    }
    if !b.converged {
        log::warn!("rank-1 fit did not converge within {} iterations", opts.max_iter);
    }
    Rank1Fit {
        u_q: b.u_q.iter().map(|&x| x as f32).collect(),
        u_k: b.u_k.iter().map(|&x| x as f32).collect(),
        coupling: c,
        objective: b.value,
        iterations: b.iterations,
        converged: b.converged,
    }
}

fn check_dims(samples: &[&QkSample], w_qk: &Matrix) -> Result<()> {
    let d = w_qk.rows();
    if w_qk.cols() != d {
        return Err(Error::Shape(format!("W_QK must be square, got {:?}", w_qk.shape())));
    }
    w_qk.ensure_finite("W_QK")?;
    for s in samples {
        if s.r_q.len() != d || s.keys.cols() != d {
            return Err(Error::Shape(format!("sample {} does not match d = {d}", s.example)));
        }
        if s.keys.rows() == 0 {
            return Err(Error::Data(format!("sample {} has no key positions", s.example)));
        }
    }
    Ok(())
}

/// Evaluate the objective for given directions (coupling taken from `W_QK`).
pub fn rank1_objective(samples: &[&QkSample], w_qk: &Matrix, u_q: &[f32], u_k: &[f32], epsilon: f64) -> Result<f64> {
    check_dims(samples, w_qk)?;
    if samples.is_empty() {
        return Err(Error::Data("no samples".into()));
    }
    let w = Dense::new(w_qk);
    let prep = prepare(samples, &w, epsilon);
    let uq: Vec<f64> = u_q.iter().map(|&x| f64::from(x)).collect();
    let uk: Vec<f64> = u_k.iter().map(|&x| f64::from(x)).collect();
    Ok(objective(&prep, &w, &uq, &uk))
}

/// Fit on all given samples, no cross-validation.
pub fn fit_rank1(samples: &[&QkSample], w_qk: &Matrix, opts: &FitOptions) -> Result<Rank1Fit> {
    check_dims(samples, w_qk)?;
    if samples.is_empty() {
        return Err(Error::Data("no samples".into()));
    }
    let w = Dense::new(w_qk);
    let prep = prepare(samples, &w, opts.epsilon);
    let mut mean = vec![0.0; w.d];
    for p in &prep {
        mean.iter_mut().zip(&p.r_q).for_each(|(m, x)| *m += x);
    }
    Ok(fit_prepared(&prep, &w, &mean, opts))
}

/// Fitted routing feature with cross-validation diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingFeature {
    pub head: ComponentId,
    pub u_q: Vec<f32>,
    pub u_k: Vec<f32>,
    /// `u_qᵀ W_QK u_k`, positive.
    pub coupling: f64,
    pub epsilon: f64,
    pub train_objective: f64,
    pub validation_mean: f64,
    /// Sample standard deviation across folds.
    pub validation_std: f64,
    pub fold_objectives: Vec<f64>,
    pub folds: usize,
    pub n_samples: usize,
    pub n_examples: usize,
    pub converged: bool,
    pub iterations: usize,
}

/// Example ids assigned to folds after a seeded shuffle.
pub fn assign_folds(example_ids: &[&str], folds: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut unique: Vec<&str> = Vec::new();
    for &e in example_ids {
        if !unique.contains(&e) {
            unique.push(e);
        }
    }
    let mut order: Vec<usize> = (0..unique.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xf01d));
    let mut fold_of = vec![0; unique.len()];
    for (rank, &u) in order.iter().enumerate() {
        fold_of[u] = rank % folds;
    }
    example_ids.iter().map(|e| fold_of[unique.iter().position(|u| u == e).expect("id present")]).collect()
}

/// k-fold cross-validated fit (folds split by example), then a refit on
/// all samples.
pub fn fit_rank1_qk(dataset: &QkDataset, w_qk: &Matrix, opts: &FitOptions) -> Result<RoutingFeature> {
    let all: Vec<&QkSample> = dataset.samples.iter().collect();
    check_dims(&all, w_qk)?;
    let n_examples = dataset.n_examples();
    if opts.folds < 2 || n_examples < opts.folds {
        return Err(Error::InvalidInput(format!(
            "cross-validation needs 2 <= folds <= examples, got {} folds for {n_examples} examples",
            opts.folds
        )));
    }
    if !(opts.epsilon > 0.0) {
        return Err(Error::InvalidInput("epsilon must be positive".into()));
    }
    let ids: Vec<&str> = all.iter().map(|s| s.example.as_str()).collect();
    let fold_of = assign_folds(&ids, opts.folds, opts.seed);
    let folds: Vec<usize> = (0..opts.folds).collect();
    let results = parallel::try_par_map(&folds, |&f| {
        let train: Vec<&QkSample> = all.iter().zip(&fold_of).filter(|(_, &g)| g != f).map(|(s, _)| *s).collect();
        let val: Vec<&QkSample> = all.iter().zip(&fold_of).filter(|(_, &g)| g == f).map(|(s, _)| *s).collect();
        let fit = fit_rank1(&train, w_qk, opts)?;
        let v = rank1_objective(&val, w_qk, &fit.u_q, &fit.u_k, opts.epsilon)?;
        Ok((v, fit.converged))
    })?;
    let fold_objectives: Vec<f64> = results.iter().map(|r| r.0).collect();
    let k = fold_objectives.len() as f64;
    let mean = fold_objectives.iter().sum::<f64>() / k;
    let std = (fold_objectives.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt();
    let full = fit_rank1(&all, w_qk, opts)?;
    Ok(RoutingFeature {
        head: dataset.head,
        u_q: full.u_q,
        u_k: full.u_k,
        coupling: full.coupling,
        epsilon: opts.epsilon,
        train_objective: full.objective,
        validation_mean: mean,
        validation_std: std,
        fold_objectives,
        folds: opts.folds,
        n_samples: all.len(),
        n_examples,
        converged: full.converged && results.iter().all(|r| r.1),
        iterations: full.iterations,
    })
}

/// Key-side, coupling and query-side factors of one logit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactoredLogit {
    pub key_side: f64,
    pub coupling: f64,
    pub query_side: f64,
    pub product: f64,
}

pub fn factored_logit(
    u_q: &[f32],
    u_k: &[f32],
    w_qk: &Matrix,
    r_key: &[f32],
    r_query: &[f32],
) -> Result<FactoredLogit> {
    let d = w_qk.rows();
    if [u_q.len(), u_k.len(), r_key.len(), r_query.len(), w_qk.cols()].iter().any(|&n| n != d) {
        return Err(Error::Shape(format!("factored_logit expects vectors of length {d}")));
    }
    let f = |v: &[f32]| -> Vec<f64> { v.iter().map(|&x| f64::from(x)).collect() };
    let w = Dense::new(w_qk);
    let (uq, uk) = (f(u_q), f(u_k));
    let key_side = dot(&uk, &f(r_key));
    let coupling = dot(&uq, &w.mul(&uk));
    let query_side = dot(&uq, &f(r_query));
    Ok(FactoredLogit { key_side, coupling, query_side, product: key_side * coupling * query_side })
}

/// Option whose best token has the largest key-side score.
pub fn key_side_option(sample: &QkSample, u_k: &[f32]) -> usize {
    let mut best = (0usize, f64::NEG_INFINITY);
    for (k, s) in sample.option_spans.iter().enumerate() {
        for p in s.positions() {
            let v = crate::tensor::dot(sample.keys.row(p), u_k);
            if v > best.1 {
                best = (k, v);
            }
        }
    }
    best.0
}

/// Fraction of samples where the key-side argmax option is the attended one.
pub fn routing_agreement(dataset: &QkDataset, u_k: &[f32]) -> f64 {
    if dataset.samples.is_empty() {
        return 0.0;
    }
    let hits = dataset.samples.iter().filter(|s| key_side_option(s, u_k) == s.attended_option).count();
    hits as f64 / dataset.samples.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    pub(crate) fn synthetic(d: usize, n: usize, m: usize, seed: u64) -> Vec<QkSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| QkSample {
                example: format!("e{i}"),
                condition: Condition::Clean,
                r_q: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                keys: Matrix::from_fn(m, d, |_, _| rng.random_range(-1.0..1.0)),
                option_spans: [Span { start: 0, end: 0 }; 4],
                attended_option: 0,
            })
            .collect()
    }

    fn outer(a: &[f32], b: &[f32], s: f32) -> Matrix {
        Matrix::from_fn(a.len(), b.len(), |i, j| s * a[i] * b[j])
    }

    #[test]
    fn exact_rank_one_is_recovered() {
        let d = 6;
        let samples = synthetic(d, 12, 5, 1);
        let a = crate::tensor::normalized(&[1.0, 2.0, -1.0, 0.5, 0.0, 1.0]).unwrap();
        let b = crate::tensor::normalized(&[0.0, 1.0, 1.0, -2.0, 1.0, 0.3]).unwrap();
        let w = outer(&a, &b, 3.0);
        let refs: Vec<&QkSample> = samples.iter().collect();
        let fit = fit_rank1(&refs, &w, &FitOptions::default()).unwrap();
        assert!(fit.objective <= 1e-6, "{}", fit.objective);
        assert!(crate::tensor::cosine(&fit.u_q, &a).unwrap().abs() >= 0.999);
        assert!(crate::tensor::cosine(&fit.u_k, &b).unwrap().abs() >= 0.999);
        assert!(fit.coupling > 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let d = 4;
        let samples = synthetic(d, 5, 3, 2);
        let refs: Vec<&QkSample> = samples.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let wm = Matrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let w = Dense::new(&wm);
        let prep = prepare(&refs, &w, 1e-8);
        let uq = random_unit(d, &mut rng);
        let uk = random_unit(d, &mut rng);
        let (_, gq, gk) = gradient(&prep, &w, &uq, &uk);
        let h = 1e-6;
        for i in 0..d {
            let mut p = uq.clone();
            p[i] += h;
            let mut m = uq.clone();
            m[i] -= h;
            let fd = (objective(&prep, &w, &p, &uk) - objective(&prep, &w, &m, &uk)) / (2.0 * h);
            assert!((fd - gq[i]).abs() < 1e-5, "q {i}: {fd} vs {}", gq[i]);
            let mut p = uk.clone();
            p[i] += h;
            let mut m = uk.clone();
            m[i] -= h;
            let fd = (objective(&prep, &w, &uq, &p) - objective(&prep, &w, &uq, &m)) / (2.0 * h);
            assert!((fd - gk[i]).abs() < 1e-5, "k {i}: {fd} vs {}", gk[i]);
        }
    }

    #[test]
    fn folds_group_examples() {
        let ids = ["a", "b", "a", "c", "b", "d"];
        let f = assign_folds(&ids, 2, 0);
        assert_eq!(f[0], f[2]);
        assert_eq!(f[1], f[4]);
        assert!(f.iter().all(|&x| x < 2));
    }

    #[test]
    fn factored_product_matches_bilinear_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = 5;
        let v = |rng: &mut ChaCha8Rng| -> Vec<f32> { (0..d).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let uq = crate::tensor::normalized(&v(&mut rng)).unwrap();
        let uk = crate::tensor::normalized(&v(&mut rng)).unwrap();
        let w = Matrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let (rk, rq) = (v(&mut rng), v(&mut rng));
        let f = factored_logit(&uq, &uk, &w, &rk, &rq).unwrap();
        // r_q (u_q u_qᵀ W u_k u_kᵀ) r_k
        let m = outer(&uq, &uq, 1.0).matmul(&w).unwrap().matmul(&outer(&uk, &uk, 1.0)).unwrap();
        let direct = crate::tensor::dot(&m.vec_mul(&rq).unwrap(), &rk);
        assert!((f.product - direct).abs() < 1e-5);
        let perp = {
            let mut r = rk.clone();
            let p = crate::tensor::dot(&r, &uk) as f32;
            r.iter_mut().zip(&uk).for_each(|(x, u)| *x -= p * u);
            r
        };
        assert!(factored_logit(&uq, &uk, &w, &perp, &rq).unwrap().product.abs() < 1e-6);
    }
}
