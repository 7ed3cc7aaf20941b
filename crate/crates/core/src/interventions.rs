// SPDX-License-Identifier: MIT OR Apache-2.0

//! Causal experiments built on [`engine`] overrides: restoration sweeps,
//! attention-pattern patching, directional steering and layer-window
//! denoise / noise patching.

use serde::{Deserialize, Serialize};

use crate::engine::{self, ComponentId, DeltaSite, Override, OverrideSet, Readout, Recording, RunTrace};
use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::parallel;
use crate::promptkit::{Condition, PromptPair};
use crate::tensor::{norm, Matrix};

/// Positions at which a component's clean contribution is patched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PatchPositions {
    /// Every position (clean and persuasive prompts must align).
    #[default]
    All,
    /// Only the answer slot; works for prompts of different lengths.
    Final,
}

impl std::str::FromStr for PatchPositions {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "final" => Ok(Self::Final),
            _ => Err(Error::Config(format!("unknown patch positions {s:?} (all, final)"))),
        }
    }
}

fn rows_at(m: &Matrix, positions: &[usize]) -> Matrix {
    Matrix::from_rows(&positions.iter().map(|&p| m.row(p).to_vec()).collect::<Vec<_>>())
        .expect("rows of one matrix share a width")
}

fn readout(trace: &RunTrace, pair: &PromptPair) -> Result<Readout> {
    engine::decision_readout(trace, &pair.option_token_ids)
}

fn check_labels(pair: &PromptPair, index: usize) -> Result<()> {
    if pair.correct_index > 3 || pair.target_index > 3 {
        return Err(Error::Data(format!("pair {index} ({}) has no correct/target label", pair.id)));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Restoration sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleDelta {
    pub example: String,
    pub dp_correct: f64,
    pub dp_target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentScore {
    pub component: ComponentId,
    /// Mean `Δp_correct` over examples.
    pub restoration: f64,
    pub mean_dp_target: f64,
    pub per_example: Vec<ExampleDelta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestorationReport {
    pub n_examples: usize,
    pub positions: PatchPositions,
    pub model_checksum: String,
    /// In the order the components were requested.
    pub components: Vec<ComponentScore>,
    /// `(pair index, reason)` for pairs left out.
    pub rejected: Vec<(usize, String)>,
}

impl RestorationReport {
    /// Components sorted by restoration score, highest first.
    pub fn ranked(&self) -> Vec<&ComponentScore> {
        let mut v: Vec<&ComponentScore> = self.components.iter().collect();
        v.sort_by(|a, b| b.restoration.total_cmp(&a.restoration));
        v
    }
}

/// Patch each component's clean-run contribution into the persuasive run
/// and record the change in correct / target probability.
pub fn restoration_sweep(
    bundle: &ModelBundle,
    pairs: &[PromptPair],
    components: &[ComponentId],
    positions: PatchPositions,
) -> Result<RestorationReport> {
    for c in components {
        c.validate(bundle)?;
    }
    let mut rejected = Vec::new();
    let mut per_component: Vec<Vec<ExampleDelta>> = vec![Vec::new(); components.len()];
    let layers: Vec<usize> = {
        let mut l: Vec<usize> = components.iter().map(ComponentId::layer).collect();
        l.sort_unstable();
        l.dedup();
        l
    };
    for (index, pair) in pairs.iter().enumerate() {
        check_labels(pair, index)?;
        if positions == PatchPositions::All && !pair.is_aligned() {
            let reason = format!(
                "clean and persuasive lengths differ ({} vs {})",
                pair.clean_ids.len(),
                pair.persuasive_ids.len()
            );
            log::warn!("pair {index} ({}) rejected: {reason}", pair.id);
            rejected.push((index, reason));
            continue;
        }
        let clean_rec =
            Recording { head_contrib: true, mlp_out: true, layers: Some(layers.clone()), ..Recording::none() };
        let clean = engine::run(bundle, &pair.clean_ids, &OverrideSet::new(), &clean_rec)?;
        let pers_rec = Recording { residual: true, ..Recording::none() };
        let pers = engine::run(bundle, &pair.persuasive_ids, &OverrideSet::new(), &pers_rec)?;
        let base = readout(&pers, pair)?;
        let deltas = parallel::try_par_map(components, |&c| {
            let contrib = clean.contribution(c)?;
            let (src, dst): (Vec<usize>, Vec<usize>) = match positions {
                PatchPositions::All => ((0..clean.seq_len()).collect(), (0..pers.seq_len()).collect()),
                PatchPositions::Final => (vec![clean.last()], vec![pers.last()]),
            };
            let ov =
                OverrideSet::new().with(Override::Component { id: c, positions: dst, values: rows_at(contrib, &src) });
            let layer = c.layer();
            let patched =
                engine::run_from(bundle, &pair.persuasive_ids, layer, pers.residual(layer)?, &ov, &Recording::none())?;
            let r = readout(&patched, pair)?;
            Ok(ExampleDelta {
                example: pair.id.clone(),
                dp_correct: r.p(pair.correct_index) - base.p(pair.correct_index),
                dp_target: r.p(pair.target_index) - base.p(pair.target_index),
            })
        })?;
        for (acc, d) in per_component.iter_mut().zip(deltas) {
            acc.push(d);
        }
    }
    let n = pairs.len() - rejected.len();
    let components = components
        .iter()
        .zip(per_component)
        .map(|(&component, per_example)| {
            let mean = |f: fn(&ExampleDelta) -> f64| {
                if per_example.is_empty() {
                    0.0
                } else {
                    per_example.iter().map(f).sum::<f64>() / per_example.len() as f64
                }
            };
            ComponentScore {
                component,
                restoration: mean(|d| d.dp_correct),
                mean_dp_target: mean(|d| d.dp_target),
                per_example,
            }
        })
        .collect();
    Ok(RestorationReport { n_examples: n, positions, model_checksum: bundle.checksum.clone(), components, rejected })
}

// ---------------------------------------------------------------------------
// Attention-pattern patching
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternPatchResult {
    pub example: String,
    /// Patched argmax is the correct option.
    pub repaired: bool,
    pub dp_target: f64,
    /// Change in probability of the correct (clean) answer.
    pub dp_clean: f64,
    pub patched_argmax: usize,
}

fn require_aligned(pair: &PromptPair) -> Result<()> {
    if !pair.is_aligned() {
        return Err(Error::Data(format!(
            "pair {}: clean and persuasive lengths differ ({} vs {})",
            pair.id,
            pair.clean_ids.len(),
            pair.persuasive_ids.len()
        )));
    }
    Ok(())
}

fn patched_result(pair: &PromptPair, base: &Readout, r: &Readout) -> PatternPatchResult {
    PatternPatchResult {
        example: pair.id.clone(),
        repaired: r.argmax == pair.correct_index,
        dp_target: r.p(pair.target_index) - base.p(pair.target_index),
        dp_clean: r.p(pair.correct_index) - base.p(pair.correct_index),
        patched_argmax: r.argmax,
    }
}

/// Replace the persuasive-run attention rows of one head by the clean-run
/// rows at every query position; value vectors stay live.
pub fn attention_pattern_patch(
    bundle: &ModelBundle,
    pair: &PromptPair,
    layer: usize,
    head: usize,
) -> Result<PatternPatchResult> {
    bundle.check_head(layer, head)?;
    check_labels(pair, pair.provenance.example_index)?;
    require_aligned(pair)?;
    let rec = Recording { attn: true, layers: Some(vec![layer]), ..Recording::none() };
    let clean = engine::run(bundle, &pair.clean_ids, &OverrideSet::new(), &rec)?;
    let pers = engine::run(
        bundle,
        &pair.persuasive_ids,
        &OverrideSet::new(),
        &Recording { residual: true, ..Recording::none() },
    )?;
    let base = readout(&pers, pair)?;
    if base.argmax != pair.target_index {
        return Err(Error::Data(format!("pair {} is not flipped to the target", pair.id)));
    }
    let rows = clean.attn(layer, head)?.clone();
    let ov = OverrideSet::new().with(Override::AttentionPattern {
        layer,
        head,
        positions: (0..pers.seq_len()).collect(),
        rows,
    });
    let patched =
        engine::run_from(bundle, &pair.persuasive_ids, layer, pers.residual(layer)?, &ov, &Recording::none())?;
    Ok(patched_result(pair, &base, &readout(&patched, pair)?))
}

/// Pattern-only versus full-output patching of one head over the flipped pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternPatchReport {
    pub head: ComponentId,
    pub n_flipped: usize,
    pub pattern_repair_rate: f64,
    pub output_repair_rate: f64,
    /// Mean change in the correct option's probability.
    pub pattern_mean_dp_clean: f64,
    pub output_mean_dp_clean: f64,
    /// Fraction of examples where both patches agree on repair.
    pub repair_agreement: f64,
    pub pattern: Vec<PatternPatchResult>,
    pub output: Vec<PatternPatchResult>,
}

pub fn pattern_patch_sweep(
    bundle: &ModelBundle,
    pairs: &[PromptPair],
    layer: usize,
    head: usize,
) -> Result<PatternPatchReport> {
    bundle.check_head(layer, head)?;
    let id = ComponentId::head(layer, head);
    let results = parallel::try_par_map(pairs, |pair| {
        check_labels(pair, pair.provenance.example_index)?;
        require_aligned(pair)?;
        let rec = Recording { attn: true, head_contrib: true, layers: Some(vec![layer]), ..Recording::none() };
        let clean = engine::run(bundle, &pair.clean_ids, &OverrideSet::new(), &rec)?;
        let pers = engine::run(
            bundle,
            &pair.persuasive_ids,
            &OverrideSet::new(),
            &Recording { residual: true, ..Recording::none() },
        )?;
        let base = readout(&pers, pair)?;
        if base.argmax != pair.target_index {
            return Ok(None);
        }
        let all: Vec<usize> = (0..pers.seq_len()).collect();
        let resume = pers.residual(layer)?;
        let pat = OverrideSet::new().with(Override::AttentionPattern {
            layer,
            head,
            positions: all.clone(),
            rows: clean.attn(layer, head)?.clone(),
        });
        let out = OverrideSet::new().with(Override::Component {
            id,
            positions: all,
            values: clean.head_contrib(layer, head)?.clone(),
        });
        let rp =
            readout(&engine::run_from(bundle, &pair.persuasive_ids, layer, resume, &pat, &Recording::none())?, pair)?;
        let ro =
            readout(&engine::run_from(bundle, &pair.persuasive_ids, layer, resume, &out, &Recording::none())?, pair)?;
        Ok(Some((patched_result(pair, &base, &rp), patched_result(pair, &base, &ro))))
    })?;
    let (pattern, output): (Vec<_>, Vec<_>) = results.into_iter().flatten().unzip();
    let n = pattern.len();
    let rate = |v: &[PatternPatchResult]| {
        if n == 0 {
            0.0
        } else {
            v.iter().filter(|r| r.repaired).count() as f64 / n as f64
        }
    };
    let mean_dp =
        |v: &[PatternPatchResult]| if n == 0 { 0.0 } else { v.iter().map(|r| r.dp_clean).sum::<f64>() / n as f64 };
    let agree = pattern.iter().zip(&output).filter(|(a, b)| a.repaired == b.repaired).count();
    Ok(PatternPatchReport {
        head: id,
        n_flipped: n,
        pattern_repair_rate: rate(&pattern),
        output_repair_rate: rate(&output),
        pattern_mean_dp_clean: mean_dp(&pattern),
        output_mean_dp_clean: mean_dp(&output),
        repair_agreement: if n == 0 { 0.0 } else { agree as f64 / n as f64 },
        pattern,
        output,
    })
}

// ---------------------------------------------------------------------------
// Steering
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringConfig {
    /// Unit direction added at the target option's tokens.
    pub direction: Vec<f32>,
    pub alphas: Vec<f64>,
    /// Layer whose input receives the delta (the decision layer).
    pub layer: usize,
    pub site: DeltaSite,
    /// Prompt variant to steer.
    pub condition: Condition,
}

impl SteeringConfig {
    pub fn validate(&self, bundle: &ModelBundle) -> Result<()> {
        if self.direction.len() != bundle.d_model() {
            return Err(Error::Shape(format!(
                "steering direction has {} entries, d_model is {}",
                self.direction.len(),
                bundle.d_model()
            )));
        }
        let n = norm(&self.direction);
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!("steering direction must be unit length, has norm {n}")));
        }
        if self.layer >= bundle.n_layers() {
            return Err(Error::InvalidInput(format!("steering layer {} out of range", self.layer)));
        }
        if self.alphas.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidInput("steering alphas must be finite".into()));
        }
        Ok(())
    }
}

/// Uniform grid of `n` points on `[lo, hi]`.
pub fn alpha_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

pub fn default_alphas() -> Vec<f64> {
    alpha_grid(-6.0, 6.0, 21)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteerPoint {
    pub alpha: f64,
    pub argmax: usize,
    pub selected_target: bool,
    pub raw: [f64; 4],
    pub logits: [f32; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteerCurve {
    pub example: String,
    pub target_option: usize,
    pub positions: Vec<usize>,
    pub points: Vec<SteerPoint>,
}

/// Add `α·direction` at every token of `target_option` for each α.
pub fn steer(
    bundle: &ModelBundle,
    pair: &PromptPair,
    config: &SteeringConfig,
    target_option: usize,
) -> Result<SteerCurve> {
    config.validate(bundle)?;
    if target_option > 3 {
        return Err(Error::InvalidInput(format!("target option {target_option} out of range")));
    }
    let ids = pair.ids(config.condition)?;
    let spans = pair.spans_for(config.condition);
    let span = spans.options[target_option];
    if span.contains(spans.answer_slot) {
        return Err(Error::InvalidInput(format!(
            "option span {}..{} overlaps the answer slot {}",
            span.start, span.end, spans.answer_slot
        )));
    }
    if span.is_empty() {
        return Err(Error::Data(format!("pair {}: option {target_option} has no tokens", pair.id)));
    }
    let positions: Vec<usize> = span.positions().collect();
    let resume_at = match config.site {
        DeltaSite::Stream | DeltaSite::AttnInput => config.layer,
    };
    let base = engine::run(bundle, ids, &OverrideSet::new(), &Recording { residual: true, ..Recording::none() })?;
    let resume = base.residual(resume_at)?;
    let points = config
        .alphas
        .iter()
        .map(|&alpha| {
            let row: Vec<f32> = config.direction.iter().map(|&x| (f64::from(x) * alpha) as f32).collect();
            let delta = Matrix::from_rows(&vec![row; positions.len()])?;
            let ov = OverrideSet::new().with(Override::ResidualDelta {
                layer: config.layer,
                positions: positions.clone(),
                delta,
                site: config.site,
            });
            let t = engine::run_from(bundle, ids, resume_at, resume, &ov, &Recording::none())?;
            let r = readout(&t, pair)?;
            Ok(SteerPoint {
                alpha,
                argmax: r.argmax,
                selected_target: r.argmax == target_option,
                raw: r.raw,
                logits: pair.option_token_ids.map(|i| t.logits[i as usize]),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SteerCurve { example: pair.id.clone(), target_option, positions, points })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteerReport {
    pub alphas: Vec<f64>,
    /// Fraction of examples choosing the steered option, per α.
    pub selection_rate: Vec<f64>,
    pub curves: Vec<SteerCurve>,
}

impl SteerReport {
    pub fn is_monotone(&self) -> bool {
        self.selection_rate.windows(2).all(|w| w[1] >= w[0])
    }
}

/// Steer every pair toward its persuasion target.
pub fn steer_sweep(bundle: &ModelBundle, pairs: &[PromptPair], config: &SteeringConfig) -> Result<SteerReport> {
    config.validate(bundle)?;
    let curves = parallel::try_par_map(pairs, |p| {
        check_labels(p, p.provenance.example_index)?;
        steer(bundle, p, config, p.target_index)
    })?;
    let n = curves.len().max(1) as f64;
    let selection_rate = (0..config.alphas.len())
        .map(|i| curves.iter().filter(|c| c.points[i].selected_target).count() as f64 / n)
        .collect();
    Ok(SteerReport { alphas: config.alphas.clone(), selection_rate, curves })
}

// ---------------------------------------------------------------------------
// Window patching
// ---------------------------------------------------------------------------

/// Contiguous layers `[start, start + len)`, 1-indexed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Window {
    pub start: usize,
    pub len: usize,
}

impl Window {
    pub fn layers(&self) -> std::ops::Range<usize> {
        self.start - 1..self.start - 1 + self.len
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.start < 1 || self.start > n_layers || self.start - 1 + self.len > n_layers {
            return Err(Error::InvalidInput(format!(
                "window [{}, {}) outside layers 1..={n_layers}",
                self.start,
                self.start + self.len
            )));
        }
        Ok(())
    }
}

impl std::fmt::Display for Window {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}, {})", self.start, self.start + self.len)
    }
}

/// Every contiguous window with `1 <= len <= max_len`.
pub fn all_windows(n_layers: usize, max_len: usize) -> Vec<Window> {
    let mut out = Vec::new();
    for len in 1..=max_len.min(n_layers) {
        for start in 1..=n_layers + 1 - len {
            out.push(Window { start, len });
        }
    }
    out
}

/// Parse `"1-2,3"` style window lists (`a-b` is the inclusive layer range).
pub fn parse_windows(s: &str, n_layers: usize) -> Result<Vec<Window>> {
    if s.trim() == "all" {
        return Ok(all_windows(n_layers, n_layers));
    }
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (a, b) = part.split_once('-').unwrap_or((part, part));
        let parse = |x: &str| {
            x.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad window bound {x:?} in {part:?}")))
        };
        let (a, b) = (parse(a)?, parse(b)?);
        if b < a {
            return Err(Error::Config(format!("window {part:?} ends before it starts")));
        }
        let w = Window { start: a, len: b - a + 1 };
        w.validate(n_layers).map_err(|e| Error::Config(e.to_string()))?;
        out.push(w);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowScore {
    pub window: Window,
    /// Robustness gain of the persuasive run with masked-run activations.
    pub denoise_robustness: f64,
    /// Robustness change of the masked run with persuasive activations.
    pub noise_robustness: f64,
    /// Persuasion-success change of the masked run with persuasive activations.
    pub noise_success: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowPatchReport {
    pub n_examples: usize,
    pub include_answer_slot: bool,
    /// Fraction correct of the unpatched persuasive / masked runs.
    pub persuasive_robustness: f64,
    pub corrupted_robustness: f64,
    pub corrupted_success: f64,
    pub windows: Vec<WindowScore>,
    /// Largest denoising gain (ties: shorter, then earlier).
    pub best_denoise: Option<Window>,
}

struct WindowBase {
    positions: Vec<usize>,
    pers: RunTrace,
    corr: RunTrace,
    pers_correct: bool,
    corr_correct: bool,
    corr_success: bool,
}

fn window_overrides(
    bundle: &ModelBundle,
    source: &RunTrace,
    layers: std::ops::Range<usize>,
    positions: &[usize],
) -> Result<OverrideSet> {
    let mut ov = OverrideSet::new();
    for l in layers {
        for h in 0..bundle.n_heads() {
            ov.push(Override::Component {
                id: ComponentId::head(l, h),
                positions: positions.to_vec(),
                values: rows_at(source.head_contrib(l, h)?, positions),
            });
        }
    }
    Ok(ov)
}

/// Denoise / noise patching of all attention heads in each window at the
/// option-field positions.
pub fn window_patch(
    bundle: &ModelBundle,
    pairs: &[PromptPair],
    windows: &[Window],
    include_answer_slot: bool,
) -> Result<WindowPatchReport> {
    for w in windows {
        w.validate(bundle.n_layers())?;
    }
    let rec = Recording { head_contrib: true, residual: true, ..Recording::none() };
    let bases = parallel::try_par_map(pairs, |pair| {
        check_labels(pair, pair.provenance.example_index)?;
        let corrupted = pair
            .corrupted_ids
            .as_ref()
            .ok_or_else(|| Error::Data(format!("pair {} has no keyword spans; window patching needs them", pair.id)))?;
        let mut positions = pair.spans.option_positions();
        if include_answer_slot {
            positions.push(pair.spans.answer_slot);
        }
        let pers = engine::run(bundle, &pair.persuasive_ids, &OverrideSet::new(), &rec)?;
        let corr = engine::run(bundle, corrupted, &OverrideSet::new(), &rec)?;
        let rp = readout(&pers, pair)?;
        let rc = readout(&corr, pair)?;
        Ok(WindowBase {
            positions,
            pers_correct: rp.argmax == pair.correct_index,
            corr_correct: rc.argmax == pair.correct_index,
            corr_success: rc.argmax == pair.target_index,
            pers,
            corr,
        })
    })?;
    let n = pairs.len();
    let frac = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    let items: Vec<(usize, usize)> = (0..windows.len()).flat_map(|w| (0..n).map(move |i| (w, i))).collect();
    // (denoised correct, noised correct, noised success) per work item
    let outcomes = parallel::try_par_map(&items, |&(w, i)| {
        let (pair, b, win) = (&pairs[i], &bases[i], windows[w]);
        if win.len == 0 {
            return Ok((b.pers_correct, b.corr_correct, b.corr_success));
        }
        let start = win.start - 1;
        let den = window_overrides(bundle, &b.corr, win.layers(), &b.positions)?;
        let t =
            engine::run_from(bundle, &pair.persuasive_ids, start, b.pers.residual(start)?, &den, &Recording::none())?;
        let rd = readout(&t, pair)?;
        let noi = window_overrides(bundle, &b.pers, win.layers(), &b.positions)?;
        let corrupted = pair.corrupted_ids.as_deref().expect("checked above");
        let t = engine::run_from(bundle, corrupted, start, b.corr.residual(start)?, &noi, &Recording::none())?;
        let rn = readout(&t, pair)?;
        Ok((rd.argmax == pair.correct_index, rn.argmax == pair.correct_index, rn.argmax == pair.target_index))
    })?;
    let pers_rob = frac(bases.iter().filter(|b| b.pers_correct).count());
    let corr_rob = frac(bases.iter().filter(|b| b.corr_correct).count());
    let corr_succ = frac(bases.iter().filter(|b| b.corr_success).count());
    let scores: Vec<WindowScore> = windows
        .iter()
        .enumerate()
        .map(|(w, &window)| {
            let o = &outcomes[w * n..(w + 1) * n];
            WindowScore {
                window,
                denoise_robustness: frac(o.iter().filter(|x| x.0).count()) - pers_rob,
                noise_robustness: frac(o.iter().filter(|x| x.1).count()) - corr_rob,
                noise_success: frac(o.iter().filter(|x| x.2).count()) - corr_succ,
            }
        })
        .collect();
    let best_denoise = scores
        .iter()
        .filter(|s| s.window.len > 0)
        .min_by(|a, b| {
            b.denoise_robustness
                .total_cmp(&a.denoise_robustness)
                .then(a.window.len.cmp(&b.window.len))
                .then(a.window.start.cmp(&b.window.start))
        })
        .map(|s| s.window);
    Ok(WindowPatchReport {
        n_examples: n,
        include_answer_slot,
        persuasive_robustness: pers_rob,
        corrupted_robustness: corr_rob,
        corrupted_success: corr_succ,
        windows: scores,
        best_denoise,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planted;
    use crate::promptkit::{build_corpus, TemplateKind};

    fn planted_pairs() -> (ModelBundle, Vec<PromptPair>) {
        let bundle = planted::planted_bundle().expand_vocab_with_pad().unwrap();
        let pairs = build_corpus(&planted::planted_corpus(), &bundle, Some(0), TemplateKind::Toy).unwrap();
        (bundle, pairs)
    }

    #[test]
    fn planted_restoration_localizes_decision_head() {
        let (bundle, pairs) = planted_pairs();
        let comps = ComponentId::all(&bundle);
        let rep = restoration_sweep(&bundle, &pairs, &comps, PatchPositions::All).unwrap();
        let ranked = rep.ranked();
        assert_eq!(ranked[0].component, ComponentId::head(1, 2));
        assert!(ranked[0].restoration >= 0.5, "{}", ranked[0].restoration);
        for c in &ranked[1..] {
            assert!(c.restoration.abs() <= 0.05, "{} {}", c.component, c.restoration);
        }
    }

    #[test]
    fn planted_window_is_writer_layer() {
        let (bundle, pairs) = planted_pairs();
        let rep = window_patch(&bundle, &pairs, &all_windows(2, 2), false).unwrap();
        assert_eq!(rep.best_denoise, Some(Window { start: 1, len: 1 }));
        let empty = window_patch(&bundle, &pairs, &[Window { start: 1, len: 0 }], false).unwrap();
        assert_eq!(empty.windows[0].denoise_robustness, 0.0);
    }

    #[test]
    fn planted_steering_is_monotone() {
        let (bundle, pairs) = planted_pairs();
        let config = SteeringConfig {
            direction: planted::planted_routing_direction(),
            alphas: alpha_grid(-4.0, 6.0, 11),
            layer: 1,
            site: DeltaSite::AttnInput,
            condition: Condition::Clean,
        };
        let rep = steer_sweep(&bundle, &pairs, &config).unwrap();
        assert!(rep.is_monotone(), "{:?}", rep.selection_rate);
        assert_eq!(*rep.selection_rate.last().unwrap(), 1.0);
        assert_eq!(rep.selection_rate[0], 0.0);
    }

    #[test]
    fn pattern_patch_tracks_output_patch() {
        let (bundle, pairs) = planted_pairs();
        let rep = pattern_patch_sweep(&bundle, &pairs, 1, 2).unwrap();
        assert_eq!(rep.n_flipped, 32);
        assert!((rep.pattern_repair_rate - rep.output_repair_rate).abs() <= 0.10);
    }

    #[test]
    fn windows_parse() {
        assert_eq!(parse_windows("1-2,2", 3).unwrap(), vec![Window { start: 1, len: 2 }, Window { start: 2, len: 1 }]);
        assert!(parse_windows("2-4", 3).is_err());
        assert_eq!(all_windows(3, 3).len(), 6);
    }
}
