//! Prompt construction: aligned lengths, span bookkeeping, padding.

use std::sync::OnceLock;

use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use routelens_core::engine::{self, decision_readout, generate_greedy, OverrideSet, Recording};
use routelens_core::model::ModelBundle;
use routelens_core::planted::{self, random_tokens};
use routelens_core::promptkit::{
    build_corpus, build_pair, insert_tokens, invert_permutation, permute_pair_spans, render_text, PromptPair,
    QAExample, Span, TemplateKind,
};

use super::{fixtures_dir, runner, SuiteResult, CASES};

const EXAMPLES: u32 = 1000;

fn fail(msg: String) -> TestCaseError {
    TestCaseError::fail(msg)
}

fn load(name: &str) -> ModelBundle {
    ModelBundle::load(fixtures_dir().join(name)).unwrap_or_else(|e| panic!("fixture {name}: {e}"))
}

/// The two byte-level fixtures, raw and with a padding token.
fn byte_level() -> &'static [(ModelBundle, ModelBundle); 2] {
    static CELL: OnceLock<[(ModelBundle, ModelBundle); 2]> = OnceLock::new();
    CELL.get_or_init(|| {
        ["hf_gpt2", "hf_llama"].map(|n| {
            let raw = load(n);
            let padded = raw.expand_vocab_with_pad().unwrap();
            (raw, padded)
        })
    })
}

fn word() -> impl Strategy<Value = String> {
    prop_oneof![
        6 => prop::sample::select(vec![
            "the", "capital", "of", "france", "is", "paris", "experts", "agree", "report", "verified", "42", "1999",
            "it's", "they're", "Which", "city", "summit", "?", ",", ".", "!!", "don't",
        ])
        .prop_map(String::from),
        2 => "[a-zA-Z0-9]{1,9}",
        1 => "[àéîõüßçñ東京日本🙂🚀—–…«»]{1,4}",
        1 => "[ \t\n]{1,3}[a-z]{1,5}",
    ]
}

fn phrase(max_words: usize) -> impl Strategy<Value = String> {
    prop::collection::vec(word(), 1..=max_words).prop_map(|w| w.join(" "))
}

/// Non-overlapping, non-empty char ranges inside `text`.
fn keyword_spans(text: &str, cuts: &[usize]) -> Vec<[usize; 2]> {
    let n = text.chars().count();
    if n == 0 {
        return Vec::new();
    }
    let mut points: Vec<usize> = cuts.iter().map(|c| c % (n + 1)).collect();
    points.sort_unstable();
    points.dedup();
    points.chunks_exact(2).filter(|w| w[0] < w[1]).map(|w| [w[0], w[1]]).collect()
}

#[derive(Debug, Clone)]
struct Case {
    example: QAExample,
    permutation: [usize; 4],
    fixture: usize,
}

fn case() -> impl Strategy<Value = Case> {
    (
        phrase(8),
        [phrase(4), phrase(4), phrase(4), phrase(4)],
        phrase(20),
        0usize..4,
        1usize..4,
        prop::option::of(prop::collection::vec(any::<usize>(), 0..8)),
        Just([0usize, 1, 2, 3]).prop_shuffle(),
        0usize..2,
    )
        .prop_map(|(question, options, persuasion_text, correct, offset, cuts, permutation, fixture)| {
            let keyword_spans = cuts.map(|c| keyword_spans(&persuasion_text, &c));
            Case {
                example: QAExample {
                    id: None,
                    question,
                    options,
                    correct_index: correct,
                    target_index: (correct + offset) % 4,
                    persuasion_text,
                    keyword_spans,
                },
                permutation,
                fixture,
            }
        })
}

impl Case {
    /// The small GPT-2 fixture vocabulary has no single-token " 1".." 4", so
    /// it runs the toy layout; the Llama fixture runs the chat QA layout.
    fn template(&self) -> TemplateKind {
        [TemplateKind::Toy, TemplateKind::Qa][self.fixture]
    }

    fn build(&self) -> Result<(&'static ModelBundle, PromptPair), TestCaseError> {
        let b = &byte_level()[self.fixture].1;
        let pair = build_pair(&self.example, 0, b, self.permutation, None, self.template())
            .map_err(|e| fail(e.to_string()))?;
        Ok((b, pair))
    }
}

fn decode(b: &ModelBundle, ids: &[u32], s: Span) -> String {
    b.tokenizer.decode(&ids[s.positions()]).unwrap()
}

/// Clean and corrupted prompts align token for token with the persuasive one
/// and differ only by padding inside the context.
pub fn length_matching() -> SuiteResult {
    runner(EXAMPLES)
        .run(&case(), |c| {
            let (b, p) = c.build()?;
            let pad = b.pad_token_id.unwrap();
            let n = p.persuasive_ids.len();
            prop_assert_eq!(p.clean_ids.len(), n);
            prop_assert!(p.is_aligned());
            let ctx = p.spans.context;
            for i in 0..n {
                if ctx.contains(i) {
                    prop_assert_eq!(p.clean_ids[i], pad);
                } else {
                    prop_assert_eq!(p.clean_ids[i], p.persuasive_ids[i]);
                }
            }
            prop_assert_eq!(p.corrupted_ids.is_some(), c.example.keyword_spans.is_some());
            if let Some(cor) = &p.corrupted_ids {
                prop_assert_eq!(cor.len(), n);
                for i in 0..n {
                    let masked = p.spans.keywords.iter().any(|s| s.contains(i));
                    prop_assert!(!masked || ctx.contains(i), "keyword token {} outside the context", i);
                    prop_assert_eq!(cor[i], if masked { pad } else { p.persuasive_ids[i] });
                }
            }
            for (a, b) in [(&p.clean_spans, &p.spans)] {
                prop_assert_eq!(a.question, b.question);
                prop_assert_eq!(a.context, b.context);
                prop_assert_eq!(a.options, b.options);
                prop_assert_eq!(a.answer_slot, b.answer_slot);
            }
            prop_assert_eq!(p.spans.answer_slot, n - 1);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Decoding each span reproduces the text placed in it.
pub fn span_round_trip() -> SuiteResult {
    runner(EXAMPLES)
        .run(&case(), |c| {
            let (b, p) = c.build()?;
            let ids = &p.persuasive_ids;
            let ex = &c.example;
            prop_assert_eq!(decode(b, ids, p.spans.question), format!(" {}", ex.question));
            prop_assert_eq!(decode(b, ids, p.spans.context), format!(" {}", ex.persuasion_text));
            for k in 0..4 {
                prop_assert_eq!(decode(b, ids, p.spans.options[k]), format!(" {}", ex.options[c.permutation[k]]));
            }
            let whole = render_text(ex, b, c.permutation, c.template()).map_err(|e| fail(e.to_string()))?;
            prop_assert_eq!(b.tokenizer.decode(ids).unwrap(), whole);
            if let Some(spans) = &ex.keyword_spans {
                let chars: Vec<char> = ex.persuasion_text.chars().collect();
                for [s, e] in spans {
                    let want: String = chars[*s..*e].iter().collect();
                    let hits: Vec<String> = p.spans.keywords.iter().map(|k| decode(b, ids, *k)).collect();
                    if p.provenance.keywords_snapped {
                        prop_assert!(hits.iter().any(|h| h.contains(&want)), "{want:?} not covered by {hits:?}");
                    } else {
                        prop_assert!(hits.contains(&want), "{want:?} not among {hits:?}");
                    }
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Permutations invert, span re-ordering undoes itself and inserted padding
/// keeps every span on its text.
pub fn permutation_involution() -> SuiteResult {
    runner(EXAMPLES)
        .run(&(case(), Just([0usize, 1, 2, 3]).prop_shuffle(), any::<usize>(), 1usize..4), |(c, q, at, n)| {
            let p = c.permutation;
            let inv = invert_permutation(&p);
            prop_assert_eq!(invert_permutation(&inv), p);
            for k in 0..4 {
                prop_assert_eq!(p[inv[k]], k);
                prop_assert_eq!(inv[p[k]], k);
            }
            let (b, pair) = c.build()?;
            let back = permute_pair_spans(&permute_pair_spans(&pair.spans, &q), &invert_permutation(&q));
            prop_assert_eq!(&back, &pair.spans);

            let ex = &c.example;
            let ids = &pair.persuasive_ids;
            prop_assert_eq!(pair.provenance.permutation, p);
            prop_assert_eq!(
                decode(b, ids, pair.spans.options[pair.correct_index]),
                format!(" {}", ex.options[ex.correct_index])
            );
            prop_assert_eq!(
                decode(b, ids, pair.spans.options[pair.target_index]),
                format!(" {}", ex.options[ex.target_index])
            );

            let mut moved_ids = ids.clone();
            let mut moved = pair.spans.clone();
            let at = at % (ids.len() + 1);
            insert_tokens(&mut moved_ids, &mut moved, at, b.pad_token_id.unwrap(), n);
            for (old, new) in
                pair.spans.options.iter().zip(&moved.options).chain([(&pair.spans.question, &moved.question)])
            {
                if old.end <= at || old.start >= at {
                    prop_assert_eq!(&ids[old.positions()], &moved_ids[new.positions()]);
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Adding the padding row leaves the model's choices untouched.
pub fn pad_expansion() -> SuiteResult {
    let planted_raw = load("planted");
    let planted_pad = planted_raw.expand_vocab_with_pad().map_err(|e| e.to_string())?;
    let [(g_raw, g_pad), (l_raw, l_pad)] = byte_level();
    let models = [(&planted_raw, &planted_pad), (g_raw, g_pad), (l_raw, l_pad)];

    // Option choice on the planted corpus prompts, which hold no padding.
    let pairs =
        build_corpus(&planted::planted_corpus(), &planted_pad, None, TemplateKind::Toy).map_err(|e| e.to_string())?;
    for p in &pairs {
        let run = |m: &ModelBundle| {
            let t = engine::run(m, &p.persuasive_ids, &OverrideSet::new(), &Recording::none()).unwrap();
            decision_readout(&t, &p.option_token_ids).unwrap().argmax
        };
        if run(&planted_raw) != run(&planted_pad) {
            return Err(format!("{}: option choice changed by padding row", p.id));
        }
    }

    runner(CASES)
        .run(&(0usize..3, 1usize..=24, any::<u64>()), |(which, len, seed)| {
            let (raw, padded) = models[which];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ids = random_tokens(raw, len.min(raw.arch.max_positions - 4), &mut rng);
            let a = engine::run(raw, &ids, &OverrideSet::new(), &Recording::none()).unwrap();
            let b = engine::run(padded, &ids, &OverrideSet::new(), &Recording::none()).unwrap();
            let n = raw.arch.vocab_size;
            prop_assert_eq!(b.logits.len(), n + 1);
            prop_assert_eq!(&a.logits[..], &b.logits[..n]);
            prop_assert_eq!(generate_greedy(raw, &ids, 3).unwrap(), generate_greedy(padded, &ids, 3).unwrap());
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Byte-level encode then decode is the identity on arbitrary UTF-8.
pub fn tokenizer_fuzz() -> SuiteResult {
    runner(EXAMPLES)
        .run(&(any::<String>(), "[ a-z\\n\\t🙂東é'’0-9]{0,40}", 0usize..2), |(wild, tame, which)| {
            let tok = &byte_level()[which].0.tokenizer;
            for s in [&wild, &tame] {
                let ids = tok.encode(s).map_err(|e| fail(e.to_string()))?;
                prop_assert_eq!(&tok.decode(&ids).unwrap(), s);
                let offsets = tok.encode_with_offsets(s).unwrap();
                prop_assert_eq!(offsets.iter().map(|(i, _)| *i).collect::<Vec<_>>(), ids);
                let mut end = 0;
                for (_, r) in &offsets {
                    prop_assert!(r.start <= r.end && r.end <= s.len() && r.start >= end.min(r.start));
                    end = r.end;
                }
                prop_assert_eq!(end, s.len());
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}
