// SPDX-License-Identifier: MIT OR Apache-2.0

//! [`ModelBundle`]: validated weights, architecture and tokenizer.
//!
//! Naming maps (tensor names as stored in the container):
//!
//! GPT-2 family (an optional `transformer.` prefix is accepted), Conv1D
//! layout `[in, out]`:
//! `wte.weight [V,d]`, `wpe.weight [P,d]`, `h.{i}.ln_1.{weight,bias}`,
//! `h.{i}.attn.c_attn.{weight [d,3·H·dk], bias}` (or split
//! `h.{i}.attn.{q,k,v}.{weight [d,H·dk], bias}`),
//! `h.{i}.attn.c_proj.{weight [H·dk,d], bias}`, `h.{i}.ln_2.{weight,bias}`,
//! `h.{i}.mlp.c_fc.{weight [d,m], bias}`, `h.{i}.mlp.c_proj.{weight [m,d], bias}`,
//! `ln_f.{weight,bias}`, optional untied `lm_head.weight [V,d]`.
//!
//! Llama family, Linear layout `[out, in]`:
//! `model.embed_tokens.weight`, `model.layers.{i}.input_layernorm.weight`,
//! `model.layers.{i}.self_attn.{q,k,v,o}_proj.weight` (optional q/k/v bias),
//! `model.layers.{i}.post_attention_layernorm.weight`,
//! `model.layers.{i}.mlp.{gate,up,down}_proj.weight`, `model.norm.weight`,
//! optional `lm_head.weight`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::arch::{ArchDescriptor, ChatTemplate, Family, ModelConfig, TokenizerConfig, TokenizerKindConfig};
use crate::model::container::{Tensor, TensorFile};
use crate::model::tokenizer::Tokenizer;
use crate::tensor::Matrix;

/// Gain and optional bias of a LayerNorm / RMSNorm.
#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub gain: Vec<f32>,
    pub bias: Option<Vec<f32>>,
}

/// Attention weights in row form (`x · W`), heads packed along columns.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnWeights {
    /// `d × (H·dk)`
    pub w_q: Matrix,
    pub b_q: Option<Vec<f32>>,
    /// `d × (KV·dk)`
    pub w_k: Matrix,
    pub b_k: Option<Vec<f32>>,
    /// `d × (KV·dk)`
    pub w_v: Matrix,
    pub b_v: Option<Vec<f32>>,
    /// `(H·dk) × d`
    pub w_o: Matrix,
    pub b_o: Option<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Mlp {
    /// `gelu(x·W_in + b_in)·W_out + b_out` (tanh approximation).
    Gelu { w_in: Matrix, b_in: Vec<f32>, w_out: Matrix, b_out: Vec<f32> },
    /// `(silu(x·W_gate) ⊙ x·W_up)·W_down`.
    SwiGlu { w_gate: Matrix, w_up: Matrix, w_down: Matrix },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub ln_attn: Norm,
    pub attn: AttnWeights,
    pub ln_mlp: Norm,
    pub mlp: Mlp,
}

/// Everything a forward pass reads. Immutable once built.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub arch: ArchDescriptor,
    /// `V × d`
    pub embed: Matrix,
    /// `P × d` for learned absolute positions.
    pub positional: Option<Matrix>,
    pub layers: Vec<Layer>,
    pub ln_final: Norm,
    /// `V × d`, one row per output token.
    pub unembed: Matrix,
    pub unembed_bias: Option<Vec<f32>>,
    pub tokenizer: Tokenizer,
    pub tokenizer_config: TokenizerConfig,
    pub pad_token_id: Option<u32>,
    pub bos_token_id: Option<u32>,
    /// Hex SHA-256 of the checkpoint bytes.
    pub checksum: String,
    /// Directory the bundle was loaded from, if any.
    pub source: Option<PathBuf>,
}

/// Per-head slices of one attention layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
}

impl ModelBundle {
    /// Load from a directory holding `model.toml` (or from the toml path itself).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (dir, toml_path) = if path.is_dir() {
            (path.to_path_buf(), path.join("model.toml"))
        } else {
            (path.parent().map(Path::to_path_buf).unwrap_or_default(), path.to_path_buf())
        };
        let config = ModelConfig::read(&toml_path)?;
        let weights_path = dir.join(&config.weights);
        let mut bundle = load_checkpoint(&weights_path, &config, &dir)?;
        bundle.source = Some(dir);
        Ok(bundle)
    }

    pub fn n_layers(&self) -> usize {
        self.arch.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.arch.n_heads
    }

    pub fn d_model(&self) -> usize {
        self.arch.d_model
    }

    pub fn chat_template(&self) -> ChatTemplate {
        self.tokenizer_config.chat_template
    }

    /// Per-head `W_Q, W_K, W_V` (`d × dk`) and `W_O` (`dk × d`).
    pub fn head_weights(&self, layer: usize, head: usize) -> Result<HeadWeights> {
        self.check_head(layer, head)?;
        let dk = self.arch.d_head;
        let kv = self.arch.kv_head(head);
        let a = &self.layers[layer].attn;
        Ok(HeadWeights {
            w_q: a.w_q.slice_cols(head * dk, (head + 1) * dk),
            w_k: a.w_k.slice_cols(kv * dk, (kv + 1) * dk),
            w_v: a.w_v.slice_cols(kv * dk, (kv + 1) * dk),
            w_o: a.w_o.slice_rows(head * dk, (head + 1) * dk),
        })
    }

    pub fn check_head(&self, layer: usize, head: usize) -> Result<()> {
        if layer >= self.arch.n_layers || head >= self.arch.n_heads {
            return Err(Error::InvalidInput(format!(
                "head L{layer}H{head} out of range ({} layers, {} heads)",
                self.arch.n_layers, self.arch.n_heads
            )));
        }
        Ok(())
    }

    /// Add a padding token whose embedding and unembedding rows are the
    /// mean of the existing rows.
    pub fn expand_vocab_with_pad(&self) -> Result<ModelBundle> {
        if self.pad_token_id.is_some() {
            return Err(Error::InvalidInput("bundle already has a padding token".into()));
        }
        let mut out = self.clone();
        let new_id = self.arch.vocab_size as u32;
        let name = ["<pad>", "<|pad|>", "<|routelens_pad|>"]
            .into_iter()
            .find(|n| self.tokenizer.token_to_id(n).is_none())
            .ok_or_else(|| Error::Tokenizer("no free name for the padding token".into()))?;
        out.tokenizer.add_special_at(name, new_id)?;
        out.embed = append_mean_row(&self.embed);
        out.unembed = append_mean_row(&self.unembed);
        if let Some(b) = &self.unembed_bias {
            let mean = b.iter().map(|&x| f64::from(x)).sum::<f64>() / b.len() as f64;
            let mut nb = b.clone();
            nb.push(mean as f32);
            out.unembed_bias = Some(nb);
        }
        out.arch.vocab_size += 1;
        out.pad_token_id = Some(new_id);
        out.tokenizer_config.pad_token = Some(name.to_string());
        out.tokenizer_config.special_tokens.retain(|s| s != name);
        Ok(out)
    }

    /// Weights in the family's container naming map.
    pub fn to_tensor_file(&self) -> TensorFile {
        let mut f = TensorFile::default();
        let mut put = |name: String, shape: Vec<usize>, data: Vec<f32>| {
            f.insert(name, Tensor::new(shape, data).expect("consistent shapes"));
        };
        let mat = |m: &Matrix| (vec![m.rows(), m.cols()], m.data().to_vec());
        let (v, d) = self.embed.shape();
        match self.arch.family {
            Family::Gpt2 => {
                put("wte.weight".into(), vec![v, d], self.embed.data().to_vec());
                if let Some(p) = &self.positional {
                    let (s, x) = mat(p);
                    put("wpe.weight".into(), s, x);
                }
                for (i, l) in self.layers.iter().enumerate() {
                    let pre = format!("h.{i}");
                    put_norm(&mut put, &format!("{pre}.ln_1"), &l.ln_attn);
                    put_norm(&mut put, &format!("{pre}.ln_2"), &l.ln_mlp);
                    let a = &l.attn;
                    let fused = hcat(&[&a.w_q, &a.w_k, &a.w_v]);
                    let (s, x) = mat(&fused);
                    put(format!("{pre}.attn.c_attn.weight"), s, x);
                    let zq = vec![0.0; a.w_q.cols()];
                    let zk = vec![0.0; a.w_k.cols()];
                    let mut b = a.b_q.clone().unwrap_or(zq);
                    b.extend(a.b_k.clone().unwrap_or_else(|| zk.clone()));
                    b.extend(a.b_v.clone().unwrap_or(zk));
                    put(format!("{pre}.attn.c_attn.bias"), vec![b.len()], b);
                    let (s, x) = mat(&a.w_o);
                    put(format!("{pre}.attn.c_proj.weight"), s, x);
                    let bo = a.b_o.clone().unwrap_or_else(|| vec![0.0; d]);
                    put(format!("{pre}.attn.c_proj.bias"), vec![d], bo);
                    if let Mlp::Gelu { w_in, b_in, w_out, b_out } = &l.mlp {
                        let (s, x) = mat(w_in);
                        put(format!("{pre}.mlp.c_fc.weight"), s, x);
                        put(format!("{pre}.mlp.c_fc.bias"), vec![b_in.len()], b_in.clone());
                        let (s, x) = mat(w_out);
                        put(format!("{pre}.mlp.c_proj.weight"), s, x);
                        put(format!("{pre}.mlp.c_proj.bias"), vec![b_out.len()], b_out.clone());
                    }
                }
                put_norm(&mut put, "ln_f", &self.ln_final);
                if self.unembed != self.embed {
                    put("lm_head.weight".into(), vec![v, d], self.unembed.data().to_vec());
                }
            }
            Family::Llama => {
                let lin = |m: &Matrix| {
                    let t = m.transpose();
                    (vec![t.rows(), t.cols()], t.into_data())
                };
                put("model.embed_tokens.weight".into(), vec![v, d], self.embed.data().to_vec());
                for (i, l) in self.layers.iter().enumerate() {
                    let pre = format!("model.layers.{i}");
                    put(format!("{pre}.input_layernorm.weight"), vec![d], l.ln_attn.gain.clone());
                    put(format!("{pre}.post_attention_layernorm.weight"), vec![d], l.ln_mlp.gain.clone());
                    let a = &l.attn;
                    for (n, w, b) in [("q", &a.w_q, &a.b_q), ("k", &a.w_k, &a.b_k), ("v", &a.w_v, &a.b_v)] {
                        let (s, x) = lin(w);
                        put(format!("{pre}.self_attn.{n}_proj.weight"), s, x);
                        if let Some(b) = b {
                            put(format!("{pre}.self_attn.{n}_proj.bias"), vec![b.len()], b.clone());
                        }
                    }
                    let (s, x) = lin(&a.w_o);
                    put(format!("{pre}.self_attn.o_proj.weight"), s, x);
                    if let Mlp::SwiGlu { w_gate, w_up, w_down } = &l.mlp {
                        for (n, w) in [("gate", w_gate), ("up", w_up), ("down", w_down)] {
                            let (s, x) = lin(w);
                            put(format!("{pre}.mlp.{n}_proj.weight"), s, x);
                        }
                    }
                }
                put("model.norm.weight".into(), vec![d], self.ln_final.gain.clone());
                if self.unembed != self.embed {
                    put("lm_head.weight".into(), vec![v, d], self.unembed.data().to_vec());
                }
            }
        }
        f
    }

    /// Write `model.toml`, the checkpoint and the vocab to `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let file = self.to_tensor_file();
        file.write(dir.join("model.safetensors"))?;
        let vocab: BTreeMap<&String, &u32> = self.tokenizer.vocab_map().iter().collect();
        let vocab_path = dir.join(&self.tokenizer_config.vocab);
        let text = serde_json::to_string_pretty(&vocab)?;
        std::fs::write(&vocab_path, text + "\n").map_err(|e| Error::io(&vocab_path, e))?;
        let config = ModelConfig {
            arch: crate::model::arch::ArchConfig {
                family: self.arch.family,
                n_layers: self.arch.n_layers,
                n_heads: self.arch.n_heads,
                n_kv_heads: (self.arch.n_kv_heads != self.arch.n_heads).then_some(self.arch.n_kv_heads),
                d_model: self.arch.d_model,
                d_head: (self.arch.d_head * self.arch.n_heads != self.arch.d_model).then_some(self.arch.d_head),
                d_mlp: self.arch.d_mlp,
                vocab_size: self.arch.vocab_size,
                max_positions: self.arch.max_positions,
                norm_eps: Some(self.arch.norm_eps),
                rope_theta: (self.arch.family == Family::Llama).then_some(self.arch.rope_theta),
            },
            tokenizer: self.tokenizer_config.clone(),
            weights: "model.safetensors".into(),
        };
        let toml_path = dir.join("model.toml");
        std::fs::write(&toml_path, config.to_toml_string()).map_err(|e| Error::io(&toml_path, e))
    }
}

fn put_norm(put: &mut impl FnMut(String, Vec<usize>, Vec<f32>), name: &str, n: &Norm) {
    put(format!("{name}.weight"), vec![n.gain.len()], n.gain.clone());
    let b = n.bias.clone().unwrap_or_else(|| vec![0.0; n.gain.len()]);
    put(format!("{name}.bias"), vec![b.len()], b);
}

fn hcat(ms: &[&Matrix]) -> Matrix {
    let rows = ms[0].rows();
    let cols: usize = ms.iter().map(|m| m.cols()).sum();
    let mut out = Matrix::zeros(rows, cols);
    for i in 0..rows {
        let mut c = 0;
        for m in ms {
            out.row_mut(i)[c..c + m.cols()].copy_from_slice(m.row(i));
            c += m.cols();
        }
    }
    out
}

fn append_mean_row(m: &Matrix) -> Matrix {
    let (r, c) = m.shape();
    let mut mean = vec![0.0f64; c];
    for i in 0..r {
        for (acc, &x) in mean.iter_mut().zip(m.row(i)) {
            *acc += f64::from(x);
        }
    }
    let mut data = m.data().to_vec();
    data.extend(mean.iter().map(|s| (s / r as f64) as f32));
    Matrix::new(r + 1, c, data).expect("row appended")
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

/// Load and validate a checkpoint against the declared architecture.
/// Tokenizer files are resolved relative to `tokenizer_dir`.
pub fn load_checkpoint(path: &Path, config: &ModelConfig, tokenizer_dir: &Path) -> Result<ModelBundle> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let checksum = hex_sha256(&bytes);
    let file = TensorFile::from_bytes(&bytes, path)?;
    let tokenizer = Tokenizer::from_config(&config.tokenizer, tokenizer_dir)?;
    let arch = config.arch.descriptor()?;
    let mut bundle = from_tensor_file(&file, arch, tokenizer, config.tokenizer.clone())?;
    bundle.checksum = checksum;
    Ok(bundle)
}

pub fn hex_sha256(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Build a bundle from already-parsed tensors.
pub fn from_tensor_file(
    file: &TensorFile,
    arch: ArchDescriptor,
    tokenizer: Tokenizer,
    tokenizer_config: TokenizerConfig,
) -> Result<ModelBundle> {
    let mut r = Reader { file, used: BTreeSet::new(), prefix: String::new() };
    if arch.family == Family::Gpt2 && file.get("wte.weight").is_none() && file.get("transformer.wte.weight").is_some() {
        r.prefix = "transformer.".into();
    }
    let bundle = match arch.family {
        Family::Gpt2 => read_gpt2(&mut r, &arch)?,
        Family::Llama => read_llama(&mut r, &arch)?,
    };
    let unused: Vec<&String> = file
        .tensors
        .keys()
        .filter(|k| !r.used.contains(*k) && !k.ends_with(".attn.bias") && !k.ends_with(".attn.masked_bias"))
        .collect();
    if !unused.is_empty() {
        log::warn!("ignoring {} unmapped tensors, first: {}", unused.len(), unused[0]);
    }

    if tokenizer.vocab_size() > arch.vocab_size {
        return Err(Error::Tokenizer(format!(
            "tokenizer has {} ids but the model vocab is {}",
            tokenizer.vocab_size(),
            arch.vocab_size
        )));
    }
    let lookup = |name: &Option<String>| -> Result<Option<u32>> {
        match name {
            None => Ok(None),
            Some(n) => tokenizer
                .token_to_id(n)
                .map(Some)
                .ok_or_else(|| Error::Tokenizer(format!("configured token {n:?} is not in the vocab"))),
        }
    };
    let pad_token_id = lookup(&tokenizer_config.pad_token)?;
    let bos_token_id = lookup(&tokenizer_config.bos_token)?;
    let (embed, positional, layers, ln_final, unembed, unembed_bias) = bundle;
    Ok(ModelBundle {
        arch,
        embed,
        positional,
        layers,
        ln_final,
        unembed,
        unembed_bias,
        tokenizer,
        tokenizer_config,
        pad_token_id,
        bos_token_id,
        checksum: hex_sha256(&file.to_bytes()),
        source: None,
    })
}

type Parts = (Matrix, Option<Matrix>, Vec<Layer>, Norm, Matrix, Option<Vec<f32>>);

struct Reader<'a> {
    file: &'a TensorFile,
    used: BTreeSet<String>,
    prefix: String,
}

impl Reader<'_> {
    fn has(&self, name: &str) -> bool {
        self.file.get(&format!("{}{name}", self.prefix)).is_some()
    }

    fn tensor(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
        let full = format!("{}{name}", self.prefix);
        let t = self.file.get(&full).ok_or_else(|| Error::checkpoint(&full, "missing from checkpoint"))?;
        if t.shape != shape {
            return Err(Error::checkpoint(&full, format!("expected shape {shape:?}, found {:?}", t.shape)));
        }
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::checkpoint(&full, "contains non-finite values"));
        }
        self.used.insert(full);
        Ok(t.data.clone())
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
        Matrix::new(rows, cols, self.tensor(name, &[rows, cols])?)
    }

    /// `[out, in]` Linear weight returned in row form `in × out`.
    fn linear(&mut self, name: &str, input: usize, output: usize) -> Result<Matrix> {
        Ok(self.matrix(name, output, input)?.transpose())
    }

    fn vector(&mut self, name: &str, n: usize) -> Result<Vec<f32>> {
        self.tensor(name, &[n])
    }

    fn optional_vector(&mut self, name: &str, n: usize) -> Result<Option<Vec<f32>>> {
        if self.has(name) {
            self.vector(name, n).map(Some)
        } else {
            Ok(None)
        }
    }
}

fn read_gpt2(r: &mut Reader<'_>, a: &ArchDescriptor) -> Result<Parts> {
    let (v, d, m) = (a.vocab_size, a.d_model, a.d_mlp);
    let hq = a.n_heads * a.d_head;
    let hkv = a.n_kv_heads * a.d_head;
    let embed = r.matrix("wte.weight", v, d)?;
    let positional = Some(r.matrix("wpe.weight", a.max_positions, d)?);
    let mut layers = Vec::with_capacity(a.n_layers);
    for i in 0..a.n_layers {
        let p = format!("h.{i}");
        let ln_attn = Norm {
            gain: r.vector(&format!("{p}.ln_1.weight"), d)?,
            bias: r.optional_vector(&format!("{p}.ln_1.bias"), d)?,
        };
        let (w_q, b_q, w_k, b_k, w_v, b_v) = if r.has(&format!("{p}.attn.c_attn.weight")) {
            let fused = r.matrix(&format!("{p}.attn.c_attn.weight"), d, hq + 2 * hkv)?;
            let bias = r.optional_vector(&format!("{p}.attn.c_attn.bias"), hq + 2 * hkv)?;
            let split_b = |lo: usize, hi: usize| bias.as_ref().map(|b| b[lo..hi].to_vec());
            (
                fused.slice_cols(0, hq),
                split_b(0, hq),
                fused.slice_cols(hq, hq + hkv),
                split_b(hq, hq + hkv),
                fused.slice_cols(hq + hkv, hq + 2 * hkv),
                split_b(hq + hkv, hq + 2 * hkv),
            )
        } else {
            (
                r.matrix(&format!("{p}.attn.q.weight"), d, hq)?,
                r.optional_vector(&format!("{p}.attn.q.bias"), hq)?,
                r.matrix(&format!("{p}.attn.k.weight"), d, hkv)?,
                r.optional_vector(&format!("{p}.attn.k.bias"), hkv)?,
                r.matrix(&format!("{p}.attn.v.weight"), d, hkv)?,
                r.optional_vector(&format!("{p}.attn.v.bias"), hkv)?,
            )
        };
        let attn = AttnWeights {
            w_q,
            b_q,
            w_k,
            b_k,
            w_v,
            b_v,
            w_o: r.matrix(&format!("{p}.attn.c_proj.weight"), hq, d)?,
            b_o: r.optional_vector(&format!("{p}.attn.c_proj.bias"), d)?,
        };
        let ln_mlp = Norm {
            gain: r.vector(&format!("{p}.ln_2.weight"), d)?,
            bias: r.optional_vector(&format!("{p}.ln_2.bias"), d)?,
        };
        let mlp = Mlp::Gelu {
            w_in: r.matrix(&format!("{p}.mlp.c_fc.weight"), d, m)?,
            b_in: r.optional_vector(&format!("{p}.mlp.c_fc.bias"), m)?.unwrap_or_else(|| vec![0.0; m]),
            w_out: r.matrix(&format!("{p}.mlp.c_proj.weight"), m, d)?,
            b_out: r.optional_vector(&format!("{p}.mlp.c_proj.bias"), d)?.unwrap_or_else(|| vec![0.0; d]),
        };
        layers.push(Layer { ln_attn, attn, ln_mlp, mlp });
    }
    let ln_final = Norm { gain: r.vector("ln_f.weight", d)?, bias: r.optional_vector("ln_f.bias", d)? };
    let unembed = if r.file.get("lm_head.weight").is_some() {
        let saved = std::mem::take(&mut r.prefix);
        let u = r.matrix("lm_head.weight", v, d);
        r.prefix = saved;
        u?
    } else {
        embed.clone()
    };
    Ok((embed, positional, layers, ln_final, unembed, None))
}

fn read_llama(r: &mut Reader<'_>, a: &ArchDescriptor) -> Result<Parts> {
    let (v, d, m) = (a.vocab_size, a.d_model, a.d_mlp);
    let hq = a.n_heads * a.d_head;
    let hkv = a.n_kv_heads * a.d_head;
    let embed = r.matrix("model.embed_tokens.weight", v, d)?;
    let mut layers = Vec::with_capacity(a.n_layers);
    for i in 0..a.n_layers {
        let p = format!("model.layers.{i}");
        let attn = AttnWeights {
            w_q: r.linear(&format!("{p}.self_attn.q_proj.weight"), d, hq)?,
            b_q: r.optional_vector(&format!("{p}.self_attn.q_proj.bias"), hq)?,
            w_k: r.linear(&format!("{p}.self_attn.k_proj.weight"), d, hkv)?,
            b_k: r.optional_vector(&format!("{p}.self_attn.k_proj.bias"), hkv)?,
            w_v: r.linear(&format!("{p}.self_attn.v_proj.weight"), d, hkv)?,
            b_v: r.optional_vector(&format!("{p}.self_attn.v_proj.bias"), hkv)?,
            w_o: r.linear(&format!("{p}.self_attn.o_proj.weight"), hq, d)?,
            b_o: None,
        };
        layers.push(Layer {
            ln_attn: Norm { gain: r.vector(&format!("{p}.input_layernorm.weight"), d)?, bias: None },
            attn,
            ln_mlp: Norm { gain: r.vector(&format!("{p}.post_attention_layernorm.weight"), d)?, bias: None },
            mlp: Mlp::SwiGlu {
                w_gate: r.linear(&format!("{p}.mlp.gate_proj.weight"), d, m)?,
                w_up: r.linear(&format!("{p}.mlp.up_proj.weight"), d, m)?,
                w_down: r.linear(&format!("{p}.mlp.down_proj.weight"), m, d)?,
            },
        });
    }
    let ln_final = Norm { gain: r.vector("model.norm.weight", d)?, bias: None };
    let unembed = if r.has("lm_head.weight") { r.matrix("lm_head.weight", v, d)? } else { embed.clone() };
    Ok((embed, None, layers, ln_final, unembed, None))
}

/// Build a word-level tokenizer config for a vocab written next to the model.
pub fn word_tokenizer_config(bos: Option<&str>, pad: Option<&str>) -> TokenizerConfig {
    TokenizerConfig {
        kind: TokenizerKindConfig::Word,
        pretokenizer: None,
        vocab: "vocab.json".into(),
        merges: None,
        special_tokens: Vec::new(),
        bos_token: bos.map(str::to_string),
        pad_token: pad.map(str::to_string),
        chat_template: ChatTemplate::Plain,
    }
}

/// Vocab map from an ordered token list.
pub fn vocab_from_list(tokens: &[&str]) -> HashMap<String, u32> {
    tokens.iter().enumerate().map(|(i, t)| (t.to_string(), i as u32)).collect()
}
