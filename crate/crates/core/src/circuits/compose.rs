// SPDX-License-Identifier: MIT OR Apache-2.0

//! Composition between shallow heads' OV circuits and a routing feature.

use serde::{Deserialize, Serialize};

use super::qk::RoutingFeature;
use crate::engine::ComponentId;
use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::parallel;
use crate::tensor::Matrix;

fn to_f64(m: &Matrix) -> Vec<f64> {
    m.data().iter().map(|&x| f64::from(x)).collect()
}

/// `‖AB‖_F / (‖A‖_F ‖B‖_F)`, computed in `f64`.
pub fn composition_score(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.cols() != b.rows() {
        return Err(Error::Shape(format!("cannot compose {:?} with {:?}", a.shape(), b.shape())));
    }
    let (na, nb) = (a.frobenius_norm(), b.frobenius_norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("composition score of a zero matrix".into()));
    }
    let (ad, bd) = (to_f64(a), to_f64(b));
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut sq = 0.0;
    let mut row = vec![0.0; m];
    for i in 0..n {
        row.iter_mut().for_each(|x| *x = 0.0);
        for t in 0..k {
            let av = ad[i * k + t];
            if av != 0.0 {
                for (r, &bv) in row.iter_mut().zip(&bd[t * m..(t + 1) * m]) {
                    *r += av * bv;
                }
            }
        }
        sq += row.iter().map(|x| x * x).sum::<f64>();
    }
    Ok(sq.sqrt() / (na * nb))
}

/// Score of one candidate head. `None` when its OV circuit is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadScore {
    pub head: ComponentId,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionScan {
    pub decision_head: ComponentId,
    /// Every head below the decision layer, in (layer, head) order.
    pub scores: Vec<HeadScore>,
}

impl CompositionScan {
    /// Scored heads, highest first.
    pub fn ranked(&self) -> Vec<(ComponentId, f64)> {
        let mut v: Vec<(ComponentId, f64)> = self.scores.iter().filter_map(|s| s.score.map(|x| (s.head, x))).collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1));
        v
    }

    pub fn top(&self, n: usize) -> Vec<(ComponentId, f64)> {
        self.ranked().into_iter().take(n).collect()
    }
}

/// `‖W_OV u_k‖ / ‖W_OV‖_F` without forming `W_OV`.
fn key_alignment(w_v: &Matrix, w_o: &Matrix, u_k: &[f32]) -> Result<Option<f64>> {
    let ou = w_o.mul_vec(u_k)?;
    let mapped = w_v.mul_vec(&ou)?;
    let num: f64 = mapped.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
    // ‖W_V W_O‖²_F = tr((W_VᵀW_V)(W_O W_Oᵀ))
    let g_v = w_v.t_matmul(w_v)?;
    let g_o = w_o.matmul_t(w_o)?;
    let dk = g_v.rows();
    let mut fro2 = 0.0;
    for i in 0..dk {
        for j in 0..dk {
            fro2 += f64::from(g_v.get(i, j)) * f64::from(g_o.get(j, i));
        }
    }
    if fro2 <= 0.0 {
        return Ok(None);
    }
    let u_norm = crate::tensor::norm(u_k);
    Ok(Some(num / (fro2.sqrt() * u_norm)))
}

/// Score every head in layers below `decision_head` against the key
/// direction `u_k`.
pub fn composition_scan(bundle: &ModelBundle, decision_head: ComponentId, u_k: &[f32]) -> Result<CompositionScan> {
    let ComponentId::Head { layer: decision_layer, head } = decision_head else {
        return Err(Error::InvalidInput(format!("{decision_head} is not an attention head")));
    };
    bundle.check_head(decision_layer, head)?;
    if u_k.len() != bundle.arch.d_model {
        return Err(Error::Shape(format!("u_k has length {}, model width is {}", u_k.len(), bundle.arch.d_model)));
    }
    if crate::tensor::norm(u_k) == 0.0 {
        return Err(Error::Degenerate("routing feature has a zero key direction".into()));
    }
    let heads: Vec<(usize, usize)> =
        (0..decision_layer).flat_map(|l| (0..bundle.arch.n_heads).map(move |h| (l, h))).collect();
    let scores = parallel::try_par_map(&heads, |&(l, h)| {
        let hw = bundle.head_weights(l, h)?;
        Ok(HeadScore { head: ComponentId::head(l, h), score: key_alignment(&hw.w_v, &hw.w_o, u_k)? })
    })?;
    Ok(CompositionScan { decision_head, scores })
}

/// [`composition_scan`] for a fitted feature.
pub fn feature_composition_scan(bundle: &ModelBundle, feature: &RoutingFeature) -> Result<CompositionScan> {
    composition_scan(bundle, feature.head, &feature.u_k)
}
