// SPDX-License-Identifier: MIT OR Apache-2.0

//! Projected OV map of a decision head and the option alignment matrix.
//!
//! `W_OV` is row-form (a position `x` contributes `x·W_OV`). The projected
//! map is `C_dec = P_dec·W_OVᵀ`, whose right singular vectors are the input
//! directions the head copies into the decision subspace.

use serde::{Deserialize, Serialize};

use super::subspace::{DecisionSample, DecisionSubspace};
use crate::engine::{self, ComponentId, OverrideSet, Recording};
use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::parallel;
use crate::promptkit::{Condition, PromptPair};
use crate::tensor::{cosine, svd, Matrix};

/// One selected option token projected onto `V_opt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenProjection {
    pub example: String,
    pub condition: Condition,
    pub option: usize,
    pub position: usize,
    /// Attention weight from the answer slot.
    pub weight: f64,
    pub coords: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OvAnalysis {
    pub head: ComponentId,
    /// Singular values of `C_dec` (at most 3 are nonzero).
    pub singular_values: Vec<f64>,
    /// `d × 3` top right singular vectors of `C_dec`.
    pub v_opt: Matrix,
    /// Row `k`: OV-mapped option-`k` tokens; column `j`: outputs choosing `j`.
    /// Entries are NaN where a side has no data.
    pub alignment: [[f64; 4]; 4],
    pub tokens_per_option: [usize; 4],
    /// Attention-mass fraction used to select tokens inside each option span.
    pub mass: f64,
    pub tokens: Vec<TokenProjection>,
}

impl OvAnalysis {
    pub fn diagonal(&self) -> [f64; 4] {
        [0, 1, 2, 3].map(|k| self.alignment[k][k])
    }

    pub fn max_off_diagonal(&self) -> f64 {
        let mut m = f64::NEG_INFINITY;
        for i in 0..4 {
            for j in 0..4 {
                if i != j && !self.alignment[i][j].is_nan() {
                    m = m.max(self.alignment[i][j]);
                }
            }
        }
        m
    }
}

/// `C_dec = P_dec · W_OVᵀ` for a row-form `W_OV` (`d × d`).
pub fn c_dec(sub: &DecisionSubspace, w_ov: &Matrix) -> Result<Matrix> {
    sub.projector().matmul_t(w_ov)
}

/// Positions holding the top `mass` share of attention inside `span`.
pub fn top_mass_positions(row: &[f32], span: std::ops::Range<usize>, mass: f64) -> Vec<usize> {
    let mut w: Vec<(usize, f64)> = span.map(|p| (p, f64::from(row[p]))).collect();
    let total: f64 = w.iter().map(|x| x.1).sum();
    if total <= 0.0 {
        return Vec::new();
    }
    w.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut out = Vec::new();
    let mut acc = 0.0;
    for (p, x) in w {
        out.push(p);
        acc += x;
        if acc >= mass * total {
            break;
        }
    }
    out.sort_unstable();
    out
}

fn centered(means: &[Option<Vec<f64>>; 4]) -> [Option<Vec<f64>>; 4] {
    let present: Vec<&Vec<f64>> = means.iter().flatten().collect();
    if present.is_empty() {
        return [None, None, None, None];
    }
    let d = present[0].len();
    let mut grand = vec![0.0; d];
    for m in &present {
        grand.iter_mut().zip(m.iter()).for_each(|(g, x)| *g += x / present.len() as f64);
    }
    means.clone().map(|m| m.map(|v| v.iter().zip(&grand).map(|(x, g)| x - g).collect()))
}

fn mean_rows(rows: &[Vec<f32>]) -> Option<Vec<f64>> {
    let first = rows.first()?;
    let mut m = vec![0.0; first.len()];
    for r in rows {
        m.iter_mut().zip(r).for_each(|(a, &x)| *a += f64::from(x));
    }
    Some(m.into_iter().map(|x| x / rows.len() as f64).collect())
}

struct Collected {
    tokens: Vec<(TokenProjection, Vec<f32>)>,
}

/// Copy analysis of `sub.head` over both conditions of every pair.
pub fn ov_analysis(
    bundle: &ModelBundle,
    sub: &DecisionSubspace,
    samples: &[DecisionSample],
    pairs: &[PromptPair],
    mass: f64,
) -> Result<OvAnalysis> {
    let ComponentId::Head { layer, head } = sub.head else {
        return Err(Error::InvalidInput(format!("{} is not an attention head", sub.head)));
    };
    if !(0.0..=1.0).contains(&mass) || mass == 0.0 {
        return Err(Error::InvalidInput(format!("attention mass fraction must be in (0, 1], got {mass}")));
    }
    let hw = bundle.head_weights(layer, head)?;
    // U_decᵀ W_OVᵀ = (W_V (W_O U_dec))ᵀ, 3 × d
    let reduced = hw.w_v.matmul(&hw.w_o.matmul(&sub.basis)?)?.transpose();
    let s = svd(&reduced)?;
    let v_opt = s.right_vectors.slice_cols(0, 3.min(s.right_vectors.cols()));
    let singular_values: Vec<f64> = s.singular_values.iter().map(|&x| f64::from(x)).collect();

    let rec = Recording { attn: true, attn_input: true, layers: Some(vec![layer]), ..Recording::none() };
    let collected = parallel::try_par_map(pairs, |pair| {
        let mut tokens = Vec::new();
        for condition in [Condition::Clean, Condition::Persuasive] {
            let t = engine::run(bundle, pair.ids(condition)?, &OverrideSet::new(), &rec)?;
            let attn = t.attn(layer, head)?;
            let x = t.attn_input(layer)?;
            let row = attn.row(t.last());
            let spans = pair.spans_for(condition);
            for (k, span) in spans.options.iter().enumerate() {
                for p in top_mass_positions(row, span.positions(), mass) {
                    let xr = x.row(p);
                    let mut coords = [0.0; 3];
                    for (c, o) in coords.iter_mut().enumerate().take(v_opt.cols()) {
                        *o = xr.iter().enumerate().map(|(i, &v)| f64::from(v) * f64::from(v_opt.get(i, c))).sum();
                    }
                    tokens.push((
                        TokenProjection {
                            example: pair.id.clone(),
                            condition,
                            option: k,
                            position: p,
                            weight: f64::from(row[p]),
                            coords,
                        },
                        xr.to_vec(),
                    ));
                }
            }
        }
        Ok(Collected { tokens })
    })?;
    let tokens: Vec<(TokenProjection, Vec<f32>)> = collected.into_iter().flat_map(|c| c.tokens).collect();
    if tokens.is_empty() {
        return Err(Error::Data("no option tokens received attention from the answer slot".into()));
    }

    let mut tokens_per_option = [0usize; 4];
    let mut mapped: [Vec<Vec<f32>>; 4] = Default::default();
    for (tp, x) in &tokens {
        tokens_per_option[tp.option] += 1;
        let xm = Matrix::new(1, x.len(), x.clone())?;
        mapped[tp.option].push(xm.matmul(&hw.w_v)?.matmul(&hw.w_o)?.into_data());
    }
    let mut outputs: [Vec<Vec<f32>>; 4] = Default::default();
    for s in samples {
        outputs[s.chosen].push(s.output.clone());
    }
    let src = centered(&[0, 1, 2, 3].map(|k| mean_rows(&mapped[k])));
    let dst = centered(&[0, 1, 2, 3].map(|k| mean_rows(&outputs[k])));
    let mut alignment = [[f64::NAN; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            if let (Some(a), Some(b)) = (&src[i], &dst[j]) {
                let a32: Vec<f32> = a.iter().map(|&x| x as f32).collect();
                let b32: Vec<f32> = b.iter().map(|&x| x as f32).collect();
                alignment[i][j] = cosine(&a32, &b32).unwrap_or(f64::NAN);
            }
        }
    }
    Ok(OvAnalysis {
        head: sub.head,
        singular_values,
        v_opt,
        alignment,
        tokens_per_option,
        mass,
        tokens: tokens.into_iter().map(|t| t.0).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mass_selection_is_per_span() {
        let row = [0.0, 0.5, 0.3, 0.15, 0.05, 0.0];
        assert_eq!(top_mass_positions(&row, 1..5, 0.9), vec![1, 2, 3]);
        assert_eq!(top_mass_positions(&row, 1..5, 0.5), vec![1, 2]);
        assert!(top_mass_positions(&row, 5..6, 0.9).is_empty());
    }

    #[test]
    fn identity_ov_right_vectors_span_basis_axes() {
        let d = 6;
        let basis = Matrix::from_fn(d, 3, |i, j| if i == j + 1 { 1.0 } else { 0.0 });
        let sub = DecisionSubspace {
            head: ComponentId::head(0, 0),
            mean: vec![0.0; d],
            basis,
            explained_variance_ratio: vec![1.0, 0.0, 0.0],
            centroids: [None; 4],
            counts: [0; 4],
            degenerate: false,
        };
        let c = c_dec(&sub, &Matrix::identity(d)).unwrap();
        let s = svd(&c).unwrap();
        assert!(s.singular_values[3] <= 1e-4 * s.singular_values[0]);
        for col in 0..3 {
            let v = s.right_vectors.col(col);
            let in_span: f64 = (1..4).map(|i| f64::from(v[i]).powi(2)).sum();
            assert!((in_span - 1.0).abs() < 1e-6);
        }
    }
}
