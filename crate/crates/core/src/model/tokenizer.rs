// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tokenizers: byte-level BPE (GPT-2 and Llama-3 pretokenizers) and a
//! closed-vocabulary word tokenizer used by small synthetic models.

use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;

use fancy_regex::Regex;

use crate::error::{Error, Result};
use crate::model::arch::{PretokenizerKind, TokenizerConfig, TokenizerKindConfig};

const GPT2_PATTERN: &str = r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";
const LLAMA3_PATTERN: &str = r"(?i:'s|'t|'re|'ve|'m|'ll|'d)|[^\r\n\p{L}\p{N}]?\p{L}+|\p{N}{1,3}| ?[^\s\p{L}\p{N}]+[\r\n]*|\s*[\r\n]+|\s+(?!\S)|\s+";

#[derive(Debug, Clone)]
enum Kind {
    ByteBpe {
        regex: Regex,
        ranks: HashMap<(String, String), u32>,
        byte_to_char: [char; 256],
        char_to_byte: HashMap<char, u8>,
    },
    Word,
}

/// Maps text to token ids and back.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    kind: Kind,
    vocab: HashMap<String, u32>,
    tokens: Vec<Option<String>>,
    /// Specials sorted longest first so the longest literal wins.
    specials: Vec<String>,
    pretokenizer: Option<PretokenizerKind>,
}

/// GPT-2's reversible byte → printable-char table.
fn bytes_to_unicode() -> [char; 256] {
    let mut printable: Vec<u32> = (b'!' as u32..=b'~' as u32).collect();
    printable.extend(0xA1..=0xAC);
    printable.extend(0xAE..=0xFF);
    let mut table = ['\0'; 256];
    let mut extra = 0u32;
    for b in 0..256u32 {
        let c = if printable.contains(&b) {
            b
        } else {
            extra += 1;
            255 + extra
        };
        table[b as usize] = char::from_u32(c).expect("valid code point");
    }
    table
}

impl Tokenizer {
    /// Byte-level BPE from a vocab map and ordered merge list.
    pub fn byte_bpe(
        vocab: HashMap<String, u32>,
        merges: Vec<(String, String)>,
        specials: Vec<String>,
        pretokenizer: PretokenizerKind,
    ) -> Result<Self> {
        let pattern = match pretokenizer {
            PretokenizerKind::Gpt2 => GPT2_PATTERN,
            PretokenizerKind::Llama3 => LLAMA3_PATTERN,
        };
        let regex = Regex::new(pattern).map_err(|e| Error::Tokenizer(format!("pretokenizer regex: {e}")))?;
        let ranks = merges.into_iter().enumerate().map(|(i, p)| (p, i as u32)).collect();
        let byte_to_char = bytes_to_unicode();
        let char_to_byte = byte_to_char.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        Self::finish(Kind::ByteBpe { regex, ranks, byte_to_char, char_to_byte }, vocab, specials, Some(pretokenizer))
    }

    /// Whitespace-delimited closed vocabulary.
    pub fn word(vocab: HashMap<String, u32>, specials: Vec<String>) -> Result<Self> {
        Self::finish(Kind::Word, vocab, specials, None)
    }

    fn finish(
        kind: Kind,
        vocab: HashMap<String, u32>,
        mut specials: Vec<String>,
        pretokenizer: Option<PretokenizerKind>,
    ) -> Result<Self> {
        let n = vocab.values().map(|&i| i as usize + 1).max().unwrap_or(0);
        let mut tokens = vec![None; n];
        for (s, &i) in &vocab {
            if tokens[i as usize].is_some() {
                return Err(Error::Tokenizer(format!("id {i} assigned to two tokens")));
            }
            tokens[i as usize] = Some(s.clone());
        }
        for s in &specials {
            if !vocab.contains_key(s) {
                return Err(Error::Tokenizer(format!("special token {s:?} is not in the vocab")));
            }
        }
        specials.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
        specials.dedup();
        Ok(Self { kind, vocab, tokens, specials, pretokenizer })
    }

    /// Load vocab (JSON object) and merges (one `a b` pair per line).
    pub fn from_config(config: &TokenizerConfig, dir: &Path) -> Result<Self> {
        let vocab_path = dir.join(&config.vocab);
        let text = std::fs::read_to_string(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
        let vocab: HashMap<String, u32> =
            serde_json::from_str(&text).map_err(|e| Error::Tokenizer(format!("{}: {e}", vocab_path.display())))?;
        let mut specials = config.special_tokens.clone();
        specials.extend(config.bos_token.iter().cloned());
        specials.extend(config.pad_token.iter().cloned());
        match config.kind {
            TokenizerKindConfig::Word => Self::word(vocab, specials),
            TokenizerKindConfig::ByteBpe => {
                let merges_name = config
                    .merges
                    .as_deref()
                    .ok_or_else(|| Error::Config("byte-bpe tokenizer needs a merges file".into()))?;
                let merges_path = dir.join(merges_name);
                let text = std::fs::read_to_string(&merges_path).map_err(|e| Error::io(&merges_path, e))?;
                let merges = parse_merges(&text)?;
                Self::byte_bpe(vocab, merges, specials, config.pretokenizer.unwrap_or_default())
            }
        }
    }

    pub fn is_byte_level(&self) -> bool {
        matches!(self.kind, Kind::ByteBpe { .. })
    }

    pub fn pretokenizer(&self) -> Option<PretokenizerKind> {
        self.pretokenizer
    }

    /// One past the largest id.
    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token_to_id(&self, token: &str) -> Option<u32> {
        self.vocab.get(token).copied()
    }

    pub fn id_to_token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).and_then(|t| t.as_deref())
    }

    /// Register a new special token at the next free id.
    pub fn add_special(&mut self, token: &str) -> Result<u32> {
        let id = self.tokens.len() as u32;
        self.add_special_at(token, id)?;
        Ok(id)
    }

    /// Register a new special token at `id`, which must not precede the
    /// current largest id (gaps are left unassigned).
    pub fn add_special_at(&mut self, token: &str, id: u32) -> Result<u32> {
        if self.vocab.contains_key(token) {
            return Err(Error::Tokenizer(format!("token {token:?} already exists")));
        }
        if (id as usize) < self.tokens.len() {
            return Err(Error::Tokenizer(format!("id {id} is already in use")));
        }
        self.tokens.resize(id as usize, None);
        self.vocab.insert(token.to_string(), id);
        self.tokens.push(Some(token.to_string()));
        self.specials.push(token.to_string());
        self.specials.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
        Ok(id)
    }

    /// Vocab and merges as written to disk (merges empty for word tokenizers).
    pub fn vocab_map(&self) -> &HashMap<String, u32> {
        &self.vocab
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        Ok(self.encode_with_offsets(text)?.into_iter().map(|(id, _)| id).collect())
    }

    /// Encode, also returning each token's byte range in `text`.
    pub fn encode_with_offsets(&self, text: &str) -> Result<Vec<(u32, Range<usize>)>> {
        let mut out = Vec::new();
        let mut base = 0usize;
        let mut rest = text;
        while !rest.is_empty() {
            // Earliest special occurrence; longest literal on ties.
            let next = self
                .specials
                .iter()
                .filter_map(|s| rest.find(s.as_str()).map(|p| (p, s)))
                .min_by(|a, b| a.0.cmp(&b.0).then(b.1.len().cmp(&a.1.len())));
            match next {
                Some((pos, special)) => {
                    self.encode_ordinary(&rest[..pos], base, &mut out)?;
                    let start = base + pos;
                    out.push((self.vocab[special.as_str()], start..start + special.len()));
                    base = start + special.len();
                    rest = &rest[pos + special.len()..];
                }
                None => {
                    self.encode_ordinary(rest, base, &mut out)?;
                    break;
                }
            }
        }
        Ok(out)
    }

    fn encode_ordinary(&self, text: &str, base: usize, out: &mut Vec<(u32, Range<usize>)>) -> Result<()> {
        if text.is_empty() {
            return Ok(());
        }
        match &self.kind {
            Kind::Word => {
                let mut cursor = 0usize;
                for w in text.split_whitespace() {
                    let start = cursor + text[cursor..].find(w).unwrap_or(0);
                    cursor = start + w.len();
                    let id =
                        self.vocab.get(w).ok_or_else(|| Error::Tokenizer(format!("word {w:?} is not in the vocab")))?;
                    out.push((*id, base + start..base + cursor));
                }
                Ok(())
            }
            Kind::ByteBpe { regex, ranks, byte_to_char, .. } => {
                for m in regex.find_iter(text) {
                    let piece = m.map_err(|e| Error::Tokenizer(format!("pretokenizer: {e}")))?;
                    let symbols: Vec<String> =
                        piece.as_str().bytes().map(|b| byte_to_char[b as usize].to_string()).collect();
                    let mut pos = base + piece.start();
                    for sym in bpe(symbols, ranks) {
                        let id = self
                            .vocab
                            .get(&sym)
                            .ok_or_else(|| Error::Tokenizer(format!("symbol {sym:?} has no vocab entry")))?;
                        let len = sym.chars().count();
                        out.push((*id, pos..pos + len));
                        pos += len;
                    }
                }
                Ok(())
            }
        }
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        match &self.kind {
            Kind::Word => {
                let words = ids.iter().map(|&i| self.lookup(i)).collect::<Result<Vec<_>>>()?;
                Ok(words.join(" "))
            }
            Kind::ByteBpe { char_to_byte, .. } => {
                let mut bytes = Vec::new();
                for &i in ids {
                    let tok = self.lookup(i)?;
                    if self.specials.iter().any(|s| s == tok) {
                        bytes.extend_from_slice(tok.as_bytes());
                        continue;
                    }
                    for c in tok.chars() {
                        let b = char_to_byte
                            .get(&c)
                            .ok_or_else(|| Error::Tokenizer(format!("token {tok:?} is not byte-level")))?;
                        bytes.push(*b);
                    }
                }
                String::from_utf8(bytes).map_err(|e| Error::Tokenizer(format!("decoded bytes are not UTF-8: {e}")))
            }
        }
    }

    fn lookup(&self, id: u32) -> Result<&str> {
        self.id_to_token(id).ok_or_else(|| Error::Tokenizer(format!("id {id} is not in the vocab")))
    }
}

fn bpe(mut word: Vec<String>, ranks: &HashMap<(String, String), u32>) -> Vec<String> {
    while word.len() > 1 {
        let mut best: Option<(u32, usize)> = None;
        for i in 0..word.len() - 1 {
            if let Some(&r) = ranks.get(&(word[i].clone(), word[i + 1].clone())) {
                if best.is_none_or(|(br, _)| r < br) {
                    best = Some((r, i));
                }
            }
        }
        let Some((rank, _)) = best else { break };
        let mut merged = Vec::with_capacity(word.len());
        let mut i = 0;
        while i < word.len() {
            if i + 1 < word.len() && ranks.get(&(word[i].clone(), word[i + 1].clone())) == Some(&rank) {
                merged.push(format!("{}{}", word[i], word[i + 1]));
                i += 2;
            } else {
                merged.push(std::mem::take(&mut word[i]));
                i += 1;
            }
        }
        word = merged;
    }
    word
}

/// Parse `a b` lines; a leading `#version` line is skipped.
pub fn parse_merges(text: &str) -> Result<Vec<(String, String)>> {
    let mut merges = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() || (n == 0 && line.starts_with("#version")) {
            continue;
        }
        let mut parts = line.split(' ');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                merges.push((a.to_string(), b.to_string()));
            }
            _ => {
                return Err(Error::Tokenizer(format!("merges line {}: expected `a b`, got {line:?}", n + 1)));
            }
        }
    }
    Ok(merges)
}
