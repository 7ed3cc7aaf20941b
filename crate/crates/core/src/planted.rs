// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic models: a hand-wired 2-layer model with a known routing
//! circuit, its 40-example corpus, and random tiny bundles for tests.
//!
//! Planted model (GPT-2 family, d=32, 4 heads of 8 dims, vocab 64):
//!
//! * Dims 30/31 carry a ±400 anchor with zero norm gain, so every
//!   LayerNorm acts as the identity on the feature dims 0..30.
//! * Layer 0, head 1 (the routing writer) lets each option token attend to
//!   a context token naming the same entity and writes `4·u_k` there.
//!   Head 3 is a redundant writer (`u_k` plus a junk direction).
//! * Layer 1, head 2 (the decision head) has `W_QK = 4·u_q u_kᵀ`: the
//!   answer slot attends to the option with the largest `u_k` coordinate.
//!   Its OV copies that option's slot vertex, one of 4 tetrahedron
//!   vertices, and the unembedding maps vertex `k` to the label `k+1`.
//! * True entities carry `2·u_k` in their embedding, so without a keyword
//!   the correct option wins (5 vs 3); a keyword naming the target lifts
//!   it to 11.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::model::arch::{ArchDescriptor, Family, NormKind, PositionalScheme, TokenizerConfig};
use crate::model::bundle::{hex_sha256, vocab_from_list, word_tokenizer_config};
use crate::model::{AttnWeights, Layer, Mlp, ModelBundle, Norm, Tokenizer};
use crate::promptkit::{write_jsonl, QAExample};
use crate::tensor::Matrix;

pub const D_MODEL: usize = 32;
pub const N_HEADS: usize = 4;
pub const D_HEAD: usize = 8;
pub const FEATURE_DIMS: usize = 30;
pub const DECISION_LAYER: usize = 1;
pub const DECISION_HEAD: usize = 2;
pub const WRITER_LAYER: usize = 0;
pub const WRITER_HEAD: usize = 1;
pub const BACKUP_WRITER_HEAD: usize = 3;
/// Positions of the four option tokens in the toy template.
pub const OPTION_POSITIONS: [usize; 4] = [14, 16, 18, 20];
pub const CONTEXT_POSITIONS: std::ops::Range<usize> = 6..12;
pub const SEQ_LEN: usize = 22;

const ANCHOR: f32 = 400.0;
const SEED: u64 = 0x5eed_0001;

pub const ENTITIES: [&str; 6] = ["tokyo", "paris", "lagos", "quito", "perth", "dakar"];
const TRUE_ENTITIES: usize = 2;
const FILLERS: [&str; 49] = [
    "the", "a", "of", "is", "was", "in", "on", "city", "capital", "which", "what", "where", "country", "largest",
    "known", "as", "for", "its", "main", "port", "river", "old", "new", "home", "center", "experts", "agree", "recent",
    "reports", "confirm", "clearly", "truly", "everyone", "says", "studies", "show", "official", "records", "list",
    "famous", "north", "south", "east", "west", "and", "today", "always", "named", "seat",
];

/// Named unit directions of the planted model (each zero-sum on dims 0..30).
#[derive(Debug, Clone)]
pub struct Directions {
    /// Option vertex basis.
    pub e: [Vec<f32>; 3],
    /// Key-side routing feature.
    pub u_k: Vec<f32>,
    /// Query-side feature carried by the answer cue.
    pub u_q: Vec<f32>,
    pub ctx: Vec<f32>,
    pub opt: Vec<f32>,
    pub sink: Vec<f32>,
    pub bias: Vec<f32>,
    pub entity: [Vec<f32>; 6],
    pub junk: [Vec<f32>; 2],
}

impl Directions {
    /// Seeded orthonormal set in the zero-sum subspace of the feature dims.
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut basis: Vec<Vec<f64>> = Vec::new();
        while basis.len() < 17 {
            let mut v: Vec<f64> = (0..FEATURE_DIMS).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mean = v.iter().sum::<f64>() / FEATURE_DIMS as f64;
            v.iter_mut().for_each(|x| *x -= mean);
            for _ in 0..2 {
                for b in &basis {
                    let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-3 {
                basis.push(v.into_iter().map(|x| x / n).collect());
            }
        }
        let mut it = basis.into_iter().map(|v| {
            let mut out: Vec<f32> = v.into_iter().map(|x| x as f32).collect();
            out.resize(D_MODEL, 0.0);
            out
        });
        let mut next = || it.next().expect("17 directions");
        Self {
            e: [next(), next(), next()],
            u_k: next(),
            u_q: next(),
            ctx: next(),
            opt: next(),
            sink: next(),
            bias: next(),
            entity: [next(), next(), next(), next(), next(), next()],
            junk: [next(), next()],
        }
    }

    /// Tetrahedron vertex for option slot `k` (unit norm, zero sum over k).
    pub fn vertex(&self, k: usize) -> Vec<f32> {
        const SIGNS: [[f32; 3]; 4] = [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]];
        let s = 1.0 / 3f32.sqrt();
        let mut v = vec![0.0; D_MODEL];
        for (i, e) in self.e.iter().enumerate() {
            axpy(&mut v, SIGNS[k][i] * s, e);
        }
        v
    }
}

fn axpy(y: &mut [f32], a: f32, x: &[f32]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += a * x);
}

/// Tokens of the planted vocab in id order.
pub fn vocab_tokens() -> Vec<&'static str> {
    let mut v = vec!["<bos>", "Q:", "C:", "O:", "A:", "1", "2", "3", "4"];
    v.extend(ENTITIES);
    v.extend(FILLERS);
    v
}

fn entity_id(k: usize) -> usize {
    9 + k
}

/// Low-rank head: `W_QK = Σ c·l rᵀ`, `W_OV = Σ v oᵀ`.
struct HeadSpec {
    qk: Vec<(f32, Vec<f32>, Vec<f32>)>,
    ov: Vec<(Vec<f32>, Vec<f32>)>,
}

impl HeadSpec {
    fn zero() -> Self {
        Self { qk: Vec::new(), ov: Vec::new() }
    }
}

fn assemble_attention(heads: &[HeadSpec]) -> AttnWeights {
    let hd = N_HEADS * D_HEAD;
    let (mut w_q, mut w_k, mut w_v, mut w_o) = (
        Matrix::zeros(D_MODEL, hd),
        Matrix::zeros(D_MODEL, hd),
        Matrix::zeros(D_MODEL, hd),
        Matrix::zeros(hd, D_MODEL),
    );
    let root = (D_HEAD as f32).powf(0.25);
    for (h, spec) in heads.iter().enumerate() {
        assert!(spec.qk.len() <= D_HEAD && spec.ov.len() <= D_HEAD);
        for (m, (c, l, r)) in spec.qk.iter().enumerate() {
            let s = c.sqrt() * root;
            for i in 0..D_MODEL {
                w_q.set(i, h * D_HEAD + m, l[i] * s);
                w_k.set(i, h * D_HEAD + m, r[i] * s);
            }
        }
        for (m, (v, o)) in spec.ov.iter().enumerate() {
            for i in 0..D_MODEL {
                w_v.set(i, h * D_HEAD + m, v[i]);
                w_o.set(h * D_HEAD + m, i, o[i]);
            }
        }
    }
    AttnWeights {
        w_q,
        b_q: Some(vec![0.0; hd]),
        w_k,
        b_k: Some(vec![0.0; hd]),
        w_v,
        b_v: Some(vec![0.0; hd]),
        w_o,
        b_o: Some(vec![0.0; D_MODEL]),
    }
}

fn identity_norm() -> Norm {
    let mut gain = vec![100.0; D_MODEL];
    gain[FEATURE_DIMS..].fill(0.0);
    Norm { gain, bias: Some(vec![0.0; D_MODEL]) }
}

fn zero_mlp(d_mlp: usize) -> Mlp {
    Mlp::Gelu {
        w_in: Matrix::zeros(D_MODEL, d_mlp),
        b_in: vec![0.0; d_mlp],
        w_out: Matrix::zeros(d_mlp, D_MODEL),
        b_out: vec![0.0; D_MODEL],
    }
}

fn scaled(v: &[f32], s: f32) -> Vec<f32> {
    v.iter().map(|x| x * s).collect()
}

fn sum(vs: &[(&[f32], f32)]) -> Vec<f32> {
    let mut out = vec![0.0; D_MODEL];
    for (v, s) in vs {
        axpy(&mut out, *s, v);
    }
    out
}

/// The planted model (no padding token; expand before building prompts).
pub fn planted_bundle() -> ModelBundle {
    let dir = Directions::new(SEED);
    let tokens = vocab_tokens();
    let vocab = tokens.len();
    let d_mlp = 4 * D_MODEL;
    let max_positions = 32;

    let mut embed = Matrix::zeros(vocab, D_MODEL);
    for t in 0..vocab {
        let row = embed.row_mut(t);
        axpy(row, 1.0, &dir.bias);
        row[FEATURE_DIMS] = ANCHOR;
        row[FEATURE_DIMS + 1] = -ANCHOR;
    }
    axpy(embed.row_mut(0), 1.0, &dir.sink);
    axpy(embed.row_mut(4), 1.0, &dir.u_q);
    for (k, e) in dir.entity.iter().enumerate() {
        let row = embed.row_mut(entity_id(k));
        axpy(row, 1.0, e);
        if k < TRUE_ENTITIES {
            axpy(row, 2.0, &dir.u_k);
        }
    }

    let mut positional = Matrix::zeros(max_positions, D_MODEL);
    for p in CONTEXT_POSITIONS {
        axpy(positional.row_mut(p), 1.0, &dir.ctx);
    }
    for (k, &p) in OPTION_POSITIONS.iter().enumerate() {
        let row = positional.row_mut(p);
        axpy(row, 1.0, &dir.opt);
        axpy(row, 3.0, &dir.u_k);
        axpy(row, 1.0, &dir.vertex(k));
    }

    let writer_qk = || {
        let mut qk: Vec<(f32, Vec<f32>, Vec<f32>)> = dir.entity.iter().map(|e| (18.0, e.clone(), e.clone())).collect();
        qk.push((16.0, dir.opt.clone(), dir.ctx.clone()));
        qk.push((26.0, dir.bias.clone(), dir.sink.clone()));
        qk
    };
    let layer0 = [
        HeadSpec::zero(),
        HeadSpec { qk: writer_qk(), ov: vec![(scaled(&dir.ctx, 2.0), scaled(&dir.u_k, 2.0))] },
        HeadSpec { qk: Vec::new(), ov: vec![(dir.bias.clone(), scaled(&dir.junk[1], 0.5))] },
        HeadSpec { qk: writer_qk(), ov: vec![(dir.ctx.clone(), sum(&[(&dir.u_k, 4.0), (&dir.junk[0], 4.0)]))] },
    ];
    let layer1 = [
        HeadSpec::zero(),
        HeadSpec {
            qk: vec![(10.0, dir.bias.clone(), dir.sink.clone())],
            ov: vec![(dir.bias.clone(), dir.junk[1].clone())],
        },
        HeadSpec {
            qk: vec![(4.0, dir.u_q.clone(), dir.u_k.clone())],
            ov: dir.e.iter().map(|e| (e.clone(), e.clone())).collect(),
        },
        HeadSpec::zero(),
    ];
    let layers = [layer0, layer1]
        .iter()
        .map(|heads| Layer {
            ln_attn: identity_norm(),
            attn: assemble_attention(heads),
            ln_mlp: identity_norm(),
            mlp: zero_mlp(d_mlp),
        })
        .collect();

    let mut unembed = Matrix::zeros(vocab, D_MODEL);
    for k in 0..4 {
        unembed.row_mut(5 + k).copy_from_slice(&scaled(&dir.vertex(k), 12.0));
    }

    let tokenizer_config = word_tokenizer_config(Some("<bos>"), None);
    let tokenizer = Tokenizer::word(vocab_from_list(&tokens), vec!["<bos>".into()]).expect("planted vocab is valid");
    let arch = ArchDescriptor {
        family: Family::Gpt2,
        n_layers: 2,
        n_heads: N_HEADS,
        n_kv_heads: N_HEADS,
        d_model: D_MODEL,
        d_head: D_HEAD,
        d_mlp,
        vocab_size: vocab,
        max_positions,
        positional: PositionalScheme::LearnedAbsolute,
        norm: NormKind::LayerNorm,
        norm_eps: 1e-5,
        rope_theta: 10_000.0,
    };
    finish(ModelBundle {
        arch,
        embed,
        positional: Some(positional),
        layers,
        ln_final: identity_norm(),
        unembed,
        unembed_bias: None,
        tokenizer,
        tokenizer_config: TokenizerConfig { special_tokens: vec!["<bos>".into()], ..tokenizer_config },
        pad_token_id: None,
        bos_token_id: Some(0),
        checksum: String::new(),
        source: None,
    })
}

fn finish(mut b: ModelBundle) -> ModelBundle {
    b.checksum = hex_sha256(&b.to_tensor_file().to_bytes());
    b
}

/// The planted key-side direction `u_k` (unit, residual coordinates).
pub fn planted_routing_direction() -> Vec<f32> {
    Directions::new(SEED).u_k
}

pub fn planted_query_direction() -> Vec<f32> {
    Directions::new(SEED).u_q
}

/// 40 fixtures: 32 with the target entity named in the persuasion text,
/// 8 with no keyword. Correct and target slots cycle over all four options.
pub fn planted_corpus() -> Vec<QAExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 0xc0);
    let question_words = &FILLERS[..16];
    let context_words = &FILLERS[16..];
    let false_entities: Vec<usize> = (TRUE_ENTITIES..ENTITIES.len()).collect();
    (0..40)
        .map(|n| {
            let correct_index = n % 4;
            let target_index = (correct_index + 1 + (n / 4) % 3) % 4;
            let true_entity = n % TRUE_ENTITIES;
            let mut falses = false_entities.clone();
            let drop = rng.random_range(0..falses.len());
            falses.remove(drop);
            // rotate so the target entity varies
            falses.rotate_left(n % 3);
            let mut options: [String; 4] = Default::default();
            options[correct_index] = ENTITIES[true_entity].into();
            options[target_index] = ENTITIES[falses[0]].into();
            let mut rest = falses[1..].iter();
            for (k, o) in options.iter_mut().enumerate() {
                if k != correct_index && k != target_index {
                    *o = ENTITIES[*rest.next().expect("two distractors")].into();
                }
            }
            let question: Vec<&str> =
                (0..3).map(|_| question_words[rng.random_range(0..question_words.len())]).collect();
            let mut context: Vec<String> =
                (0..6).map(|_| context_words[rng.random_range(0..context_words.len())].to_string()).collect();
            let has_keyword = n < 32;
            if has_keyword {
                let at = rng.random_range(0..6);
                context[at] = options[target_index].clone();
            }
            let persuasion_text = context.join(" ");
            let keyword_spans = if has_keyword {
                let target = &options[target_index];
                let mut spans = Vec::new();
                let mut char_pos = 0;
                for w in &context {
                    let len = w.chars().count();
                    if w == target {
                        spans.push([char_pos, char_pos + len]);
                    }
                    char_pos += len + 1;
                }
                spans
            } else {
                Vec::new()
            };
            QAExample {
                id: Some(format!("planted-{n:02}")),
                question: question.join(" "),
                options,
                correct_index,
                target_index,
                persuasion_text,
                keyword_spans: Some(keyword_spans),
            }
        })
        .collect()
}

/// Write `model.safetensors`, `model.toml`, `vocab.json` and `corpus.jsonl`.
pub fn write_planted(dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    planted_bundle().save(dir)?;
    write_jsonl(dir.join("corpus.jsonl"), &planted_corpus())
}

// ---------------------------------------------------------------------------
// Random bundles
// ---------------------------------------------------------------------------

/// Shape of a random test model.
#[derive(Debug, Clone, Copy)]
pub struct RandomSpec {
    pub family: Family,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub vocab: usize,
    pub max_positions: usize,
    /// Standard deviation of weight entries.
    pub scale: f32,
}

impl RandomSpec {
    pub fn gpt2(n_layers: usize, n_heads: usize, d_head: usize, vocab: usize) -> Self {
        Self {
            family: Family::Gpt2,
            n_layers,
            n_heads,
            n_kv_heads: n_heads,
            d_head,
            d_model: n_heads * d_head,
            d_mlp: 4 * n_heads * d_head,
            vocab,
            max_positions: 64,
            scale: 0.3,
        }
    }

    pub fn llama(n_layers: usize, n_heads: usize, n_kv_heads: usize, d_head: usize, vocab: usize) -> Self {
        Self { family: Family::Llama, n_kv_heads, ..Self::gpt2(n_layers, n_heads, d_head, vocab) }
    }
}

/// Random bundle with a word tokenizer over tokens `t0..t{vocab-1}`.
pub fn random_bundle(spec: &RandomSpec, seed: u64) -> ModelBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = spec.d_model;
    let s = spec.scale;
    let mut mat = |r: usize, c: usize, scale: f32| {
        Matrix::from_fn(r, c, |_, _| {
            let z: f32 = StandardNormal.sample(&mut rng);
            z * scale
        })
    };
    let gpt2 = spec.family == Family::Gpt2;
    let qd = spec.n_heads * spec.d_head;
    let kvd = spec.n_kv_heads * spec.d_head;
    let w_scale = s / (d as f32).sqrt() * 2.0;
    let embed = mat(spec.vocab, d, 1.0);
    let positional = gpt2.then(|| mat(spec.max_positions, d, 0.3));
    let mut layers = Vec::new();
    for _ in 0..spec.n_layers {
        let bias = |m: &mut dyn FnMut(usize, usize, f32) -> Matrix, n: usize| gpt2.then(|| m(1, n, 0.1).into_data());
        let mut m = |r: usize, c: usize, sc: f32| mat(r, c, sc);
        let ln = |m: &mut dyn FnMut(usize, usize, f32) -> Matrix| Norm {
            gain: m(1, d, 0.1).into_data().into_iter().map(|x| 1.0 + x).collect(),
            bias: gpt2.then(|| m(1, d, 0.1).into_data()),
        };
        let ln_attn = ln(&mut m);
        let attn = AttnWeights {
            w_q: m(d, qd, w_scale),
            b_q: bias(&mut m, qd),
            w_k: m(d, kvd, w_scale),
            b_k: bias(&mut m, kvd),
            w_v: m(d, kvd, w_scale),
            b_v: bias(&mut m, kvd),
            w_o: m(qd, d, w_scale),
            b_o: bias(&mut m, d),
        };
        let ln_mlp = ln(&mut m);
        let mlp = if gpt2 {
            Mlp::Gelu {
                w_in: m(d, spec.d_mlp, w_scale),
                b_in: m(1, spec.d_mlp, 0.1).into_data(),
                w_out: m(spec.d_mlp, d, w_scale),
                b_out: m(1, d, 0.1).into_data(),
            }
        } else {
            Mlp::SwiGlu {
                w_gate: m(d, spec.d_mlp, w_scale),
                w_up: m(d, spec.d_mlp, w_scale),
                w_down: m(spec.d_mlp, d, w_scale),
            }
        };
        layers.push(Layer { ln_attn, attn, ln_mlp, mlp });
    }
    let ln_final = Norm { gain: vec![1.0; d], bias: gpt2.then(|| vec![0.0; d]) };
    let unembed = mat(spec.vocab, d, 1.0);
    let names: Vec<String> = (0..spec.vocab).map(|i| format!("t{i}")).collect();
    let vocab: HashMap<String, u32> = names.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
    let tokenizer = Tokenizer::word(vocab, Vec::new()).expect("random vocab is valid");
    let arch = ArchDescriptor {
        family: spec.family,
        n_layers: spec.n_layers,
        n_heads: spec.n_heads,
        n_kv_heads: spec.n_kv_heads,
        d_model: d,
        d_head: spec.d_head,
        d_mlp: spec.d_mlp,
        vocab_size: spec.vocab,
        max_positions: spec.max_positions,
        positional: if gpt2 { PositionalScheme::LearnedAbsolute } else { PositionalScheme::Rotary },
        norm: if gpt2 { NormKind::LayerNorm } else { NormKind::RmsNorm },
        norm_eps: 1e-5,
        rope_theta: 10_000.0,
    };
    finish(ModelBundle {
        arch,
        embed,
        positional,
        layers,
        ln_final,
        unembed,
        unembed_bias: None,
        tokenizer,
        tokenizer_config: word_tokenizer_config(None, None),
        pad_token_id: None,
        bos_token_id: None,
        checksum: String::new(),
        source: None,
    })
}

/// Random token sequence for a bundle.
pub fn random_tokens(bundle: &ModelBundle, len: usize, rng: &mut impl Rng) -> Vec<u32> {
    (0..len).map(|_| rng.random_range(0..bundle.arch.vocab_size as u32)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{self, OverrideSet, Recording};
    use crate::promptkit::{build_pair, TemplateKind};
    use crate::tensor::dot;

    #[test]
    fn directions_are_orthonormal_and_zero_sum() {
        let d = Directions::new(SEED);
        let mut all: Vec<Vec<f32>> = d.e.to_vec();
        all.extend([d.u_k, d.u_q, d.ctx, d.opt, d.sink, d.bias]);
        all.extend(d.entity.iter().cloned());
        all.extend(d.junk.iter().cloned());
        for (i, a) in all.iter().enumerate() {
            assert!(a.iter().map(|&x| f64::from(x)).sum::<f64>().abs() < 1e-5);
            for (j, b) in all.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot(a, b) - want).abs() < 1e-5, "{i} {j}");
            }
        }
    }

    #[test]
    fn corpus_covers_all_slots() {
        let c = planted_corpus();
        assert_eq!(c.len(), 40);
        for k in 0..4 {
            assert!(c.iter().any(|e| e.correct_index == k));
            assert!(c.iter().any(|e| e.target_index == k));
        }
        for e in &c {
            e.validate().unwrap();
        }
    }

    #[test]
    fn planted_behaviour() {
        let bundle = planted_bundle().expand_vocab_with_pad().unwrap();
        let corpus = planted_corpus();
        let mut flipped = 0;
        for (i, ex) in corpus.iter().enumerate() {
            let pair = build_pair(ex, i, &bundle, [0, 1, 2, 3], None, TemplateKind::Toy).unwrap();
            assert_eq!(pair.persuasive_ids.len(), SEQ_LEN);
            assert_eq!(pair.spans.options.map(|s| s.start), OPTION_POSITIONS);
            let none = OverrideSet::new();
            let clean = engine::run(&bundle, &pair.clean_ids, &none, &Recording::none()).unwrap();
            let pers = engine::run(&bundle, &pair.persuasive_ids, &none, &Recording::none()).unwrap();
            let rc = engine::decision_readout(&clean, &pair.option_token_ids).unwrap();
            let rp = engine::decision_readout(&pers, &pair.option_token_ids).unwrap();
            assert_eq!(rc.argmax, pair.correct_index, "{i}");
            assert!(rc.p(pair.correct_index) > 0.99);
            if i < 32 {
                assert_eq!(rp.argmax, pair.target_index, "{i}");
                flipped += 1;
            } else {
                assert_eq!(rp.argmax, pair.correct_index, "{i}");
            }
        }
        assert_eq!(flipped, 32);
    }
}
