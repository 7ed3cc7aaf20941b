//! One function per subcommand. Each returns the files it wrote and any
//! convergence warnings.

use std::path::PathBuf;

use serde::Serialize;

use crate::config::{ExperimentConfig, Format};
use crate::output::{read_artifact, Metadata, Tensor, Writer};
use routelens_core::circuits::{self, qk, subspace, FitOptions};
use routelens_core::engine::{self, circuit_matrices, ComponentId, DeltaSite, OverrideSet, Recording};
use routelens_core::interventions::{self, PatchPositions, SteeringConfig};
use routelens_core::model::ModelBundle;
use routelens_core::planted;
use routelens_core::promptkit::{
    build_corpus, build_geo_pair, filter_clean_correct, read_jsonl, Condition, FilterReport, GeoExample, PromptPair,
    QAExample, TemplateKind,
};
use routelens_core::{Error, Result};

#[derive(Debug, Default)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    /// Numerical-convergence problems (exit code 4 under `--strict`).
    pub convergence: Vec<String>,
}

struct Session {
    cfg: ExperimentConfig,
    bundle: ModelBundle,
    writer: Writer,
}

impl Session {
    fn open(cfg: &ExperimentConfig) -> Result<Self> {
        let mut bundle = ModelBundle::load(cfg.require_model()?)?;
        if bundle.pad_token_id.is_none() {
            bundle = bundle.expand_vocab_with_pad()?;
        }
        let meta = Metadata::new(cfg, Some(bundle.checksum.clone()));
        let writer = Writer::new(&cfg.out, meta, cfg.format == Format::Csv)?;
        Ok(Self { cfg: cfg.clone(), bundle, writer })
    }

    fn template(&self) -> Result<TemplateKind> {
        self.cfg.template.parse()
    }

    fn build_pairs(&self) -> Result<Vec<PromptPair>> {
        let corpus = self.cfg.require_corpus()?;
        match self.template()? {
            TemplateKind::Geo => {
                let examples: Vec<GeoExample> = read_jsonl(corpus)?;
                examples.iter().enumerate().map(|(i, e)| build_geo_pair(e, i, &self.bundle)).collect()
            }
            t => {
                let examples: Vec<QAExample> = read_jsonl(corpus)?;
                for (i, e) in examples.iter().enumerate() {
                    e.validate().map_err(|err| Error::Data(format!("corpus line {}: {err}", i + 1)))?;
                }
                build_corpus(&examples, &self.bundle, self.cfg.permute.then_some(self.cfg.seed), t)
            }
        }
    }

    /// Pairs the model answers correctly without persuasion.
    fn pairs(&self) -> Result<(Vec<PromptPair>, FilterReport)> {
        let pairs = self.build_pairs()?;
        let (kept, report) = filter_clean_correct(&self.bundle, &pairs)?;
        if kept.is_empty() {
            return Err(Error::Data("no examples after filtering".into()));
        }
        Ok((kept, report))
    }

    /// `--head`, else the top head of the localize artifact.
    fn head(&self) -> Result<ComponentId> {
        let id = if let Some(h) = &self.cfg.head {
            h.parse::<ComponentId>()?
        } else {
            let path = self.cfg.localize.clone().unwrap_or_else(|| self.cfg.out.join("localize.json"));
            if !path.exists() {
                return Err(Error::Config(format!("no --head given and no localize artifact at {}", path.display())));
            }
            let v = read_artifact(&path)?;
            let s = v["decision_head"]
                .as_str()
                .ok_or_else(|| Error::Data(format!("{} has no decision_head", path.display())))?;
            s.parse()?
        };
        if !matches!(id, ComponentId::Head { .. }) {
            return Err(Error::Config(format!("{id} is not an attention head")));
        }
        id.validate(&self.bundle)?;
        Ok(id)
    }

    /// Head and unit `u_k` from the QK artifact.
    fn feature(&self) -> Result<(ComponentId, Vec<f32>)> {
        let path = self.cfg.feature.clone().unwrap_or_else(|| self.cfg.out.join("qk.json"));
        if !path.exists() {
            return Err(Error::Config(format!(
                "no routing feature at {} (run `qk` first or pass --feature)",
                path.display()
            )));
        }
        let v = read_artifact(&path)?;
        let head: ComponentId =
            v["head"].as_str().ok_or_else(|| Error::Data(format!("{} has no head", path.display())))?.parse()?;
        let t: Tensor = serde_json::from_value(v["feature"]["u_k"].clone())?;
        let u_k = t.decode()?;
        head.validate(&self.bundle)?;
        Ok((head, u_k))
    }

    fn done(self, convergence: Vec<String>) -> Outcome {
        Outcome { files: self.writer.written, convergence }
    }
}

fn layer_head(id: ComponentId) -> (usize, usize) {
    match id {
        ComponentId::Head { layer, head } => (layer, head),
        ComponentId::Mlp { layer } => (layer, usize::MAX),
    }
}

// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct LocalizeRow {
    rank: usize,
    component: String,
    kind: &'static str,
    layer: usize,
    head: Option<usize>,
    restoration: f64,
    mean_dp_target: f64,
}

#[derive(Serialize)]
struct LocalizeDoc<'a> {
    filter: &'a FilterReport,
    decision_head: Option<String>,
    n_examples: usize,
    positions: PatchPositions,
    rejected: &'a [(usize, String)],
    ranked: &'a [LocalizeRow],
    pattern_patch: Option<interventions::PatternPatchReport>,
    per_example: Vec<&'a interventions::ComponentScore>,
}

pub fn localize(cfg: &ExperimentConfig) -> Result<Outcome> {
    let mut s = Session::open(cfg)?;
    let (pairs, filter) = s.pairs()?;
    let components = match &cfg.components {
        Some(list) => list.split(',').map(|c| c.parse::<ComponentId>()).collect::<Result<Vec<_>>>()?,
        None => ComponentId::all(&s.bundle),
    };
    let positions: PatchPositions = cfg.positions.parse()?;
    let report = interventions::restoration_sweep(&s.bundle, &pairs, &components, positions)?;
    let ranked: Vec<LocalizeRow> = report
        .ranked()
        .iter()
        .enumerate()
        .map(|(i, c)| LocalizeRow {
            rank: i + 1,
            component: c.component.to_string(),
            kind: if matches!(c.component, ComponentId::Head { .. }) { "head" } else { "mlp" },
            layer: c.component.layer(),
            head: match c.component {
                ComponentId::Head { head, .. } => Some(head),
                ComponentId::Mlp { .. } => None,
            },
            restoration: c.restoration,
            mean_dp_target: c.mean_dp_target,
        })
        .collect();
    let top =
        report.ranked().into_iter().find(|c| matches!(c.component, ComponentId::Head { .. })).map(|c| c.component);
    let pattern_patch = match top {
        Some(id) if pairs.iter().all(PromptPair::is_aligned) => {
            let (l, h) = layer_head(id);
            Some(interventions::pattern_patch_sweep(&s.bundle, &pairs, l, h)?)
        }
        _ => None,
    };
    s.writer.json(
        "localize.json",
        &LocalizeDoc {
            filter: &filter,
            decision_head: top.map(|c| c.to_string()),
            n_examples: report.n_examples,
            positions: report.positions,
            rejected: &report.rejected,
            ranked: &ranked,
            pattern_patch,
            per_example: report.components.iter().collect(),
        },
    )?;
    s.writer.table("localize.csv", &ranked)?;
    Ok(s.done(Vec::new()))
}

// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct GeometryRow {
    example_id: String,
    condition: Condition,
    x: f64,
    y: f64,
    z: f64,
    vertex: usize,
}

#[derive(Serialize)]
struct GeometryDoc<'a> {
    head: String,
    n_examples: usize,
    degenerate: bool,
    partial: bool,
    explained_variance_ratio: &'a [f64],
    top3: f64,
    centroids: [Option<[f64; 3]>; 4],
    counts: [usize; 4],
    mean: Tensor,
    basis: Tensor,
    jump_agreement: f64,
    n_jumped: usize,
    n_flipped: usize,
    rows: &'a [subspace::JumpRow],
}

pub fn geometry(cfg: &ExperimentConfig) -> Result<Outcome> {
    let mut s = Session::open(cfg)?;
    let head = s.head()?;
    let (pairs, _) = s.pairs()?;
    let (sub, samples) = circuits::fit_decision_subspace(&s.bundle, &pairs, head)?;
    if sub.degenerate {
        log::warn!("decision subspace of {head} is degenerate");
    }
    let rows = subspace::jump_table(&sub, &samples)?;
    let mut table = Vec::new();
    for r in &rows {
        for (condition, c, v) in [
            (Condition::Clean, r.clean_coords, r.label.clean_vertex),
            (Condition::Persuasive, r.pers_coords, r.label.pers_vertex),
        ] {
            table.push(GeometryRow { example_id: r.example.clone(), condition, x: c[0], y: c[1], z: c[2], vertex: v });
        }
    }
    s.writer.json(
        "geometry.json",
        &GeometryDoc {
            head: head.to_string(),
            n_examples: pairs.len(),
            degenerate: sub.degenerate,
            partial: sub.is_partial(),
            explained_variance_ratio: &sub.explained_variance_ratio,
            top3: sub.top3(),
            centroids: sub.centroids,
            counts: sub.counts,
            mean: Tensor::vector(&sub.mean),
            basis: Tensor::matrix(&sub.basis),
            jump_agreement: subspace::jump_agreement(&rows),
            n_jumped: rows.iter().filter(|r| r.label.jumped).count(),
            n_flipped: rows.iter().filter(|r| r.behavioral_flip).count(),
            rows: &rows,
        },
    )?;
    s.writer.table("geometry.csv", &table)?;
    Ok(s.done(Vec::new()))
}

// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct AlignmentRow {
    option: usize,
    tokens: usize,
    to_0: f64,
    to_1: f64,
    to_2: f64,
    to_3: f64,
}

#[derive(Serialize)]
struct OvDoc<'a> {
    head: String,
    singular_values: &'a [f64],
    v_opt: Tensor,
    alignment: [[f64; 4]; 4],
    diagonal: [f64; 4],
    max_off_diagonal: f64,
    tokens_per_option: [usize; 4],
    mass: f64,
    tokens: &'a [circuits::ov::TokenProjection],
}

pub fn ov(cfg: &ExperimentConfig) -> Result<Outcome> {
    let mut s = Session::open(cfg)?;
    let head = s.head()?;
    let (pairs, _) = s.pairs()?;
    let (sub, samples) = circuits::fit_decision_subspace(&s.bundle, &pairs, head)?;
    let a = circuits::ov_analysis(&s.bundle, &sub, &samples, &pairs, cfg.mass)?;
    s.writer.json(
        "ov.json",
        &OvDoc {
            head: head.to_string(),
            singular_values: &a.singular_values,
            v_opt: Tensor::matrix(&a.v_opt),
            alignment: a.alignment,
            diagonal: a.diagonal(),
            max_off_diagonal: a.max_off_diagonal(),
            tokens_per_option: a.tokens_per_option,
            mass: a.mass,
            tokens: &a.tokens,
        },
    )?;
    let rows: Vec<AlignmentRow> = (0..4)
        .map(|k| AlignmentRow {
            option: k,
            tokens: a.tokens_per_option[k],
            to_0: a.alignment[k][0],
            to_1: a.alignment[k][1],
            to_2: a.alignment[k][2],
            to_3: a.alignment[k][3],
        })
        .collect();
    s.writer.table("ov_alignment.csv", &rows)?;
    Ok(s.done(Vec::new()))
}

// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct FeatureDoc {
    u_q: Tensor,
    u_k: Tensor,
    coupling: f64,
    epsilon: f64,
    train_objective: f64,
    validation_mean: f64,
    validation_std: f64,
    fold_objectives: Vec<f64>,
    folds: usize,
    n_samples: usize,
    n_examples: usize,
    converged: bool,
    iterations: usize,
}

#[derive(Serialize)]
struct QkDoc {
    head: String,
    feature: FeatureDoc,
    routing_agreement: f64,
}

#[derive(Serialize)]
struct QkRow {
    example_id: String,
    condition: Condition,
    attended_option: usize,
    key_side_option: usize,
}

pub fn qk(cfg: &ExperimentConfig) -> Result<Outcome> {
    let mut s = Session::open(cfg)?;
    let head = s.head()?;
    let (pairs, _) = s.pairs()?;
    let (l, h) = layer_head(head);
    let ds = circuits::build_qk_dataset(&s.bundle, &pairs, head, &[Condition::Clean, Condition::Persuasive])?;
    let w_qk = circuit_matrices(&s.bundle, l, h)?.w_qk;
    let opts = FitOptions {
        folds: cfg.folds,
        epsilon: cfg.epsilon,
        restarts: cfg.restarts,
        max_iter: cfg.max_iter,
        tol: 1e-8,
        seed: cfg.seed,
    };
    let f = circuits::fit_rank1_qk(&ds, &w_qk, &opts)?;
    let mut warnings = Vec::new();
    if !f.converged {
        warnings.push(format!("rank-1 QK fit for {head} did not converge within {} iterations", cfg.max_iter));
    }
    let rows: Vec<QkRow> = ds
        .samples
        .iter()
        .map(|x| QkRow {
            example_id: x.example.clone(),
            condition: x.condition,
            attended_option: x.attended_option,
            key_side_option: qk::key_side_option(x, &f.u_k),
        })
        .collect();
    s.writer.json(
        "qk.json",
        &QkDoc {
            head: head.to_string(),
            routing_agreement: qk::routing_agreement(&ds, &f.u_k),
            feature: FeatureDoc {
                u_q: Tensor::vector(&f.u_q),
                u_k: Tensor::vector(&f.u_k),
                coupling: f.coupling,
                epsilon: f.epsilon,
                train_objective: f.train_objective,
                validation_mean: f.validation_mean,
                validation_std: f.validation_std,
                fold_objectives: f.fold_objectives.clone(),
                folds: f.folds,
                n_samples: f.n_samples,
                n_examples: f.n_examples,
                converged: f.converged,
                iterations: f.iterations,
            },
        },
    )?;
    s.writer.table("qk_routing.csv", &rows)?;
    Ok(s.done(warnings))
}

// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct Baseline {
    example: String,
    argmax: usize,
    raw: [f64; 4],
}

#[derive(Serialize)]
struct SteerDoc<'a> {
    head: String,
    layer: usize,
    condition: Condition,
    monotone: bool,
    alphas: &'a [f64],
    selection_rate: &'a [f64],
    baseline: Vec<Baseline>,
    curves: &'a [interventions::SteerCurve],
}

#[derive(Serialize)]
struct SteerRow {
    alpha: f64,
    selection_rate: f64,
}

pub fn steer(cfg: &ExperimentConfig) -> Result<Outcome> {
    let mut s = Session::open(cfg)?;
    let (head, u_k) = s.feature()?;
    let (pairs, _) = s.pairs()?;
    let condition = if cfg.steer_condition == "persuasive" { Condition::Persuasive } else { Condition::Clean };
    let direction = routelens_core::tensor::normalized(&u_k)?;
    let sc = SteeringConfig {
        direction,
        alphas: cfg.alphas.clone(),
        layer: cfg.steer_layer.unwrap_or(head.layer()),
        site: DeltaSite::AttnInput,
        condition,
    };
    let report = interventions::steer_sweep(&s.bundle, &pairs, &sc)?;
    let baseline = pairs
        .iter()
        .map(|p| {
            let t = engine::run(&s.bundle, p.ids(condition)?, &OverrideSet::new(), &Recording::none())?;
            let r = engine::decision_readout(&t, &p.option_token_ids)?;
            Ok(Baseline { example: p.id.clone(), argmax: r.argmax, raw: r.raw })
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<SteerRow> = report
        .alphas
        .iter()
        .zip(&report.selection_rate)
        .map(|(&alpha, &selection_rate)| SteerRow { alpha, selection_rate })
        .collect();
    s.writer.json(
        "steer.json",
        &SteerDoc {
            head: head.to_string(),
            layer: sc.layer,
            condition,
            monotone: report.is_monotone(),
            alphas: &report.alphas,
            selection_rate: &report.selection_rate,
            baseline,
            curves: &report.curves,
        },
    )?;
    s.writer.table("steer.csv", &rows)?;
    Ok(s.done(Vec::new()))
}

// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct WindowRow {
    start: usize,
    end: usize,
    len: usize,
    denoise_robustness: f64,
    noise_robustness: f64,
    noise_success: f64,
}

pub fn window(cfg: &ExperimentConfig) -> Result<Outcome> {
    let mut s = Session::open(cfg)?;
    let (pairs, _) = s.pairs()?;
    let windows = interventions::parse_windows(&cfg.windows, s.bundle.n_layers())?;
    let report = interventions::window_patch(&s.bundle, &pairs, &windows, cfg.include_answer_slot)?;
    let rows: Vec<WindowRow> = report
        .windows
        .iter()
        .map(|w| WindowRow {
            start: w.window.start,
            end: w.window.start + w.window.len,
            len: w.window.len,
            denoise_robustness: w.denoise_robustness,
            noise_robustness: w.noise_robustness,
            noise_success: w.noise_success,
        })
        .collect();
    s.writer.json("window.json", &report)?;
    s.writer.table("window.csv", &rows)?;
    Ok(s.done(Vec::new()))
}

// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct ComposeRow {
    layer: usize,
    head: usize,
    score: Option<f64>,
}

#[derive(Serialize)]
struct ComposeDoc<'a> {
    decision_head: String,
    /// `layers × heads`, null where a head's OV circuit is zero.
    grid: Vec<Vec<Option<f64>>>,
    ranked: Vec<(String, f64)>,
    scores: &'a [ComposeRow],
}

pub fn compose(cfg: &ExperimentConfig) -> Result<Outcome> {
    let mut s = Session::open(cfg)?;
    let (head, u_k) = s.feature()?;
    let scan = circuits::composition_scan(&s.bundle, head, &u_k)?;
    let rows: Vec<ComposeRow> = scan
        .scores
        .iter()
        .map(|x| {
            let (layer, head) = layer_head(x.head);
            ComposeRow { layer, head, score: x.score }
        })
        .collect();
    let n_heads = s.bundle.n_heads();
    let grid = rows.chunks(n_heads).map(|c| c.iter().map(|r| r.score).collect()).collect();
    s.writer.json(
        "compose.json",
        &ComposeDoc {
            decision_head: head.to_string(),
            grid,
            ranked: scan.ranked().into_iter().map(|(c, v)| (c.to_string(), v)).collect(),
            scores: &rows,
        },
    )?;
    s.writer.table("compose.csv", &rows)?;
    Ok(s.done(Vec::new()))
}

// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct PromptRow {
    id: String,
    clean_len: usize,
    persuasive_len: usize,
    corrupted_len: Option<usize>,
    aligned: bool,
    correct_index: usize,
    target_index: usize,
    permutation: String,
}

#[derive(Serialize)]
struct PromptsDoc<'a> {
    template: TemplateKind,
    n_pairs: usize,
    n_aligned: usize,
    pairs: &'a [PromptPair],
}

pub fn prompts(cfg: &ExperimentConfig) -> Result<Outcome> {
    let mut s = Session::open(cfg)?;
    let pairs = s.build_pairs()?;
    let rows: Vec<PromptRow> = pairs
        .iter()
        .map(|p| PromptRow {
            id: p.id.clone(),
            clean_len: p.clean_ids.len(),
            persuasive_len: p.persuasive_ids.len(),
            corrupted_len: p.corrupted_ids.as_ref().map(Vec::len),
            aligned: p.is_aligned(),
            correct_index: p.correct_index,
            target_index: p.target_index,
            permutation: p.provenance.permutation.map(|x| x.to_string()).join(""),
        })
        .collect();
    s.writer.json(
        "prompts.json",
        &PromptsDoc {
            template: s.template()?,
            n_pairs: pairs.len(),
            n_aligned: pairs.iter().filter(|p| p.is_aligned()).count(),
            pairs: &pairs,
        },
    )?;
    s.writer.table("prompts.csv", &rows)?;
    Ok(s.done(Vec::new()))
}

// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct PlantDoc {
    decision_head: String,
    writer_head: String,
    backup_writer_head: String,
    routing_direction: Tensor,
    query_direction: Tensor,
    n_examples: usize,
}

/// Write the planted toy checkpoint, its corpus and its ground truth.
pub fn plant(cfg: &ExperimentConfig) -> Result<Outcome> {
    planted::write_planted(&cfg.out)?;
    let bundle = ModelBundle::load(&cfg.out)?;
    let mut writer = Writer::new(&cfg.out, Metadata::new(cfg, Some(bundle.checksum.clone())), false)?;
    writer.json(
        "planted.json",
        &PlantDoc {
            decision_head: ComponentId::head(planted::DECISION_LAYER, planted::DECISION_HEAD).to_string(),
            writer_head: ComponentId::head(planted::WRITER_LAYER, planted::WRITER_HEAD).to_string(),
            backup_writer_head: ComponentId::head(planted::WRITER_LAYER, planted::BACKUP_WRITER_HEAD).to_string(),
            routing_direction: Tensor::vector(&planted::planted_routing_direction()),
            query_direction: Tensor::vector(&planted::planted_query_direction()),
            n_examples: planted::planted_corpus().len(),
        },
    )?;
    let mut files: Vec<PathBuf> =
        ["model.toml", "model.safetensors", "vocab.json", "corpus.jsonl"].iter().map(|f| cfg.out.join(f)).collect();
    files.extend(writer.written);
    Ok(Outcome { files, convergence: Vec::new() })
}
