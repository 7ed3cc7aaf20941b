// SPDX-License-Identifier: MIT OR Apache-2.0

//! Representational analyses of a decision head: decision-subspace
//! geometry, projected OV copying, rank-1 QK routing features and
//! composition scores against shallower heads.

pub mod compose;
pub mod ov;
pub mod qk;
pub mod subspace;

pub use compose::{composition_scan, composition_score, feature_composition_scan, CompositionScan, HeadScore};
pub use ov::{ov_analysis, OvAnalysis};
pub use qk::{
    build_qk_dataset, factored_logit, fit_rank1, fit_rank1_qk, rank1_objective, routing_agreement, FactoredLogit,
    FitOptions, KeyFolder, QkDataset, QkSample, Rank1Fit, RoutingFeature,
};
pub use subspace::{classify_jump, fit_decision_subspace, DecisionSample, DecisionSubspace, JumpLabel};
