// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decision subspace: PCA of a head's output at the answer slot, pooled
//! over clean and persuasive runs, with one centroid per chosen option.

use serde::{Deserialize, Serialize};

use crate::engine::{self, ComponentId, OverrideSet, Recording};
use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::parallel;
use crate::promptkit::{Condition, PromptPair};
use crate::tensor::{pca_fit, Matrix};

/// One head output at the answer slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionSample {
    pub example: String,
    pub condition: Condition,
    pub output: Vec<f32>,
    /// Model's chosen option in this run.
    pub chosen: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionSubspace {
    pub head: ComponentId,
    pub mean: Vec<f32>,
    /// `d × 3`, orthonormal columns.
    pub basis: Matrix,
    /// Full explained-variance spectrum.
    pub explained_variance_ratio: Vec<f64>,
    /// Per chosen option; `None` when no sample chose it.
    pub centroids: [Option<[f64; 3]>; 4],
    pub counts: [usize; 4],
    /// Zero variance, too few samples or rank below 3.
    pub degenerate: bool,
}

impl DecisionSubspace {
    pub fn d_model(&self) -> usize {
        self.basis.rows()
    }

    pub fn top3(&self) -> f64 {
        self.explained_variance_ratio.iter().take(3).sum()
    }

    /// `P_dec = U_dec U_decᵀ`.
    pub fn projector(&self) -> Matrix {
        self.basis.matmul_t(&self.basis).expect("basis shapes agree")
    }

    /// Coordinates of `x − mean` in the basis.
    pub fn coords(&self, x: &[f32]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            *o = (0..self.basis.rows())
                .map(|i| (f64::from(x[i]) - f64::from(self.mean[i])) * f64::from(self.basis.get(i, c)))
                .sum();
        }
        out
    }

    pub fn is_partial(&self) -> bool {
        self.centroids.iter().any(Option::is_none)
    }
}

fn head_index(head: ComponentId) -> Result<(usize, usize)> {
    match head {
        ComponentId::Head { layer, head } => Ok((layer, head)),
        ComponentId::Mlp { .. } => Err(Error::InvalidInput(format!("{head} is not an attention head"))),
    }
}

/// Run both conditions of every pair and keep the head's output at `T`.
pub fn collect_decision_samples(
    bundle: &ModelBundle,
    pairs: &[PromptPair],
    head: ComponentId,
) -> Result<Vec<DecisionSample>> {
    let (layer, h) = head_index(head)?;
    bundle.check_head(layer, h)?;
    let rec = Recording { head_contrib: true, layers: Some(vec![layer]), ..Recording::none() };
    let per_pair = parallel::try_par_map(pairs, |pair| {
        [Condition::Clean, Condition::Persuasive]
            .into_iter()
            .map(|condition| {
                let t = engine::run(bundle, pair.ids(condition)?, &OverrideSet::new(), &rec)?;
                let r = engine::decision_readout(&t, &pair.option_token_ids)?;
                Ok(DecisionSample {
                    example: pair.id.clone(),
                    condition,
                    output: t.head_contrib(layer, h)?.row(t.last()).to_vec(),
                    chosen: r.argmax,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(per_pair.into_iter().flatten().collect())
}

/// PCA on pooled samples; top three components kept.
pub fn fit_subspace(samples: &[DecisionSample], head: ComponentId) -> Result<DecisionSubspace> {
    if samples.is_empty() {
        return Err(Error::Data("no decision-head samples".into()));
    }
    let mut rows: Vec<Vec<f32>> = samples.iter().map(|s| s.output.clone()).collect();
    let d = rows[0].len();
    if d < 3 {
        return Err(Error::Shape(format!("decision subspace needs d >= 3, got {d}")));
    }
    let too_few = rows.len() < 4;
    // Repeating samples leaves the mean and covariance directions unchanged.
    while rows.len() < 4 {
        rows.push(rows[rows.len() % samples.len()].clone());
    }
    let pca = pca_fit(&Matrix::from_rows(&rows)?, 3)?;
    let mut sums = [[0.0f64; 3]; 4];
    let mut counts = [0usize; 4];
    let mut sub = DecisionSubspace {
        head,
        mean: pca.mean.clone(),
        basis: pca.components.clone(),
        explained_variance_ratio: pca.spectrum_ratio.clone(),
        centroids: [None; 4],
        counts,
        degenerate: false,
    };
    for s in samples {
        let c = sub.coords(&s.output);
        counts[s.chosen] += 1;
        for k in 0..3 {
            sums[s.chosen][k] += c[k];
        }
    }
    for o in 0..4 {
        if counts[o] > 0 {
            sub.centroids[o] = Some(sums[o].map(|x| x / counts[o] as f64));
        }
    }
    sub.counts = counts;
    let rank_short = pca.spectrum_ratio.get(2).is_none_or(|&r| r < 1e-9);
    sub.degenerate = pca.degenerate || too_few || rank_short;
    if sub.degenerate {
        log::warn!("decision subspace for {head} is degenerate (rank below 3 or too few samples)");
    }
    if sub.is_partial() {
        log::warn!("decision subspace for {head}: options {:?} were never chosen, centroids partial", missing(&sub));
    }
    Ok(sub)
}

fn missing(sub: &DecisionSubspace) -> Vec<usize> {
    (0..4).filter(|&o| sub.centroids[o].is_none()).collect()
}

pub fn fit_decision_subspace(
    bundle: &ModelBundle,
    pairs: &[PromptPair],
    head: ComponentId,
) -> Result<(DecisionSubspace, Vec<DecisionSample>)> {
    let samples = collect_decision_samples(bundle, pairs, head)?;
    Ok((fit_subspace(&samples, head)?, samples))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpLabel {
    pub clean_vertex: usize,
    pub pers_vertex: usize,
    pub jumped: bool,
    /// Second-nearest minus nearest centroid distance of the persuasive output.
    pub margin: f64,
    pub clean_margin: f64,
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Nearest centroid (ties to `prefer`, then lowest index) and its margin.
fn nearest(sub: &DecisionSubspace, c: &[f64; 3], prefer: Option<usize>) -> Result<(usize, f64)> {
    let mut d: Vec<(usize, f64)> = (0..4).filter_map(|o| sub.centroids[o].map(|m| (o, dist(c, &m)))).collect();
    if d.is_empty() {
        return Err(Error::Degenerate("decision subspace has no centroids".into()));
    }
    d.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let mut best = d[0];
    if let Some(p) = prefer {
        if let Some(&(o, dp)) = d.iter().find(|x| x.0 == p) {
            if dp == best.1 && o != best.0 {
                log::debug!("jump tie between vertices {} and {o}, kept clean vertex", best.0);
                best = (o, dp);
            }
        }
    }
    let second = d.iter().find(|x| x.0 != best.0).map_or(f64::INFINITY, |x| x.1);
    Ok((best.0, second - best.1))
}

/// Nearest-centroid vertices of a clean and a persuasive output.
pub fn classify_jump(sub: &DecisionSubspace, clean_output: &[f32], pers_output: &[f32]) -> Result<JumpLabel> {
    let d = sub.d_model();
    if clean_output.len() != d || pers_output.len() != d {
        return Err(Error::Shape(format!("outputs must have {d} entries")));
    }
    let (cv, cm) = nearest(sub, &sub.coords(clean_output), None)?;
    let (pv, pm) = nearest(sub, &sub.coords(pers_output), Some(cv))?;
    Ok(JumpLabel { clean_vertex: cv, pers_vertex: pv, jumped: cv != pv, margin: pm, clean_margin: cm })
}

/// Per-example geometry row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpRow {
    pub example: String,
    pub label: JumpLabel,
    pub clean_coords: [f64; 3],
    pub pers_coords: [f64; 3],
    /// Persuasive argmax differs from clean argmax.
    pub behavioral_flip: bool,
}

/// Jump labels for every example with both conditions in `samples`.
pub fn jump_table(sub: &DecisionSubspace, samples: &[DecisionSample]) -> Result<Vec<JumpRow>> {
    let mut out = Vec::new();
    for c in samples.iter().filter(|s| s.condition == Condition::Clean) {
        let Some(p) = samples.iter().find(|s| s.condition == Condition::Persuasive && s.example == c.example) else {
            continue;
        };
        out.push(JumpRow {
            example: c.example.clone(),
            label: classify_jump(sub, &c.output, &p.output)?,
            clean_coords: sub.coords(&c.output),
            pers_coords: sub.coords(&p.output),
            behavioral_flip: c.chosen != p.chosen,
        });
    }
    Ok(out)
}

/// Fraction of rows where the geometric jump matches the behavioural flip.
pub fn jump_agreement(rows: &[JumpRow]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().filter(|r| r.label.jumped == r.behavioral_flip).count() as f64 / rows.len() as f64
}
