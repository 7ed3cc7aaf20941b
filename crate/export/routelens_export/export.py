"""Checkpoint conversion."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import random
import re
import time
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
from safetensors.numpy import save_file
from safetensors.torch import load_file

FAMILIES = ("gpt2", "llama")

LLAMA3_MARKER = "<|start_header_id|>"


class ExportError(Exception):
    pass


@dataclasses.dataclass
class ExportManifest:
    source: str
    family: str
    rename_map: Dict[str, List[str]]
    dropped: List[str]
    dtype_conversions: Dict[str, str]
    checksums: Dict[str, str]
    created_unix: int = 0

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# Source loading


def _resolve(model: str) -> Path:
    p = Path(model)
    if p.exists():
        return p
    try:
        from huggingface_hub import snapshot_download
    except ImportError as e:  # pragma: no cover - optional dependency
        raise ExportError(f"{model} is not a local path and huggingface_hub is not installed") from e
    return Path(snapshot_download(model, allow_patterns=["*.json", "*.safetensors", "*.txt", "*.model"]))


def load_source(model: str) -> Tuple[Path, Dict[str, torch.Tensor], dict]:
    """Return the source directory, its state dict and ``config.json``."""
    root = _resolve(model)
    files = sorted(root.glob("*.safetensors"))
    state: Dict[str, torch.Tensor] = {}
    if files:
        for f in files:
            state.update(load_file(str(f)))
    elif (root / "pytorch_model.bin").exists():
        state = torch.load(root / "pytorch_model.bin", map_location="cpu", weights_only=True)
    else:
        raise ExportError(f"no safetensors or pytorch_model.bin under {root}")
    cfg_path = root / "config.json"
    if not cfg_path.exists():
        raise ExportError(f"{root} has no config.json")
    return root, state, json.loads(cfg_path.read_text())


# ---------------------------------------------------------------------------
# Renaming

_GPT2_IGNORED = re.compile(r"^h\.\d+\.attn\.(bias|masked_bias)$")
_GPT2_KEEP = re.compile(
    r"^(wte\.weight|wpe\.weight|ln_f\.(weight|bias)|lm_head\.weight|"
    r"h\.\d+\.(ln_1|ln_2)\.(weight|bias)|h\.\d+\.attn\.c_proj\.(weight|bias)|"
    r"h\.\d+\.mlp\.(c_fc|c_proj)\.(weight|bias))$"
)
_GPT2_FUSED = re.compile(r"^h\.(\d+)\.attn\.c_attn\.(weight|bias)$")

_LLAMA_IGNORED = re.compile(r"^model\.layers\.\d+\.self_attn\.rotary_emb\.inv_freq$")
_LLAMA_KEEP = re.compile(
    r"^(model\.embed_tokens\.weight|model\.norm\.weight|lm_head\.weight|"
    r"model\.layers\.\d+\.(input_layernorm|post_attention_layernorm)\.weight|"
    r"model\.layers\.\d+\.self_attn\.(q|k|v)_proj\.(weight|bias)|"
    r"model\.layers\.\d+\.self_attn\.o_proj\.weight|"
    r"model\.layers\.\d+\.mlp\.(gate|up|down)_proj\.weight)$"
)


def rename(state: Dict[str, torch.Tensor], family: str) -> Tuple[Dict[str, torch.Tensor], Dict[str, List[str]], List[str]]:
    """Map source names onto container names.

    Fused GPT-2 ``c_attn`` tensors are split into ``attn.{q,k,v}``. Unknown
    names abort the export with the full list.
    """
    if family not in FAMILIES:
        raise ExportError(f"unknown family {family!r}; expected one of {FAMILIES}")
    out: Dict[str, torch.Tensor] = {}
    renames: Dict[str, List[str]] = {}
    dropped: List[str] = []
    unknown: List[str] = []
    for src in sorted(state):
        t = state[src]
        if family == "gpt2":
            name = src[len("transformer."):] if src.startswith("transformer.") else src
            if _GPT2_IGNORED.match(name):
                dropped.append(src)
                continue
            m = _GPT2_FUSED.match(name)
            if m:
                layer, kind = m.groups()
                parts = torch.chunk(t, 3, dim=-1)
                names = [f"h.{layer}.attn.{p}.{kind}" for p in "qkv"]
                for n, part in zip(names, parts):
                    out[n] = part.contiguous()
                renames[src] = names
                continue
            if _GPT2_KEEP.match(name):
                out[name] = t
                renames[src] = [name]
                continue
        else:
            if _LLAMA_IGNORED.match(src):
                dropped.append(src)
                continue
            if _LLAMA_KEEP.match(src):
                out[src] = t
                renames[src] = [src]
                continue
        unknown.append(src)
    if unknown:
        raise ExportError(f"unmapped tensors for family {family}: {', '.join(unknown)}")
    if family == "gpt2" and out.get("lm_head.weight") is not None and torch.equal(out["lm_head.weight"], out["wte.weight"]):
        del out["lm_head.weight"]
        dropped.append("lm_head.weight (tied)")
    if family == "llama" and "lm_head.weight" in out and torch.equal(out["lm_head.weight"], out["model.embed_tokens.weight"]):
        del out["lm_head.weight"]
        dropped.append("lm_head.weight (tied)")
    return out, renames, dropped


# ---------------------------------------------------------------------------
# Config and tokenizer


def model_toml(config: dict, family: str, tokenizer: dict) -> str:
    if family == "gpt2":
        n_heads = config["n_head"]
        d = config["n_embd"]
        fields = {
            "family": "gpt2",
            "n_layers": config["n_layer"],
            "n_heads": n_heads,
            "d_model": d,
            "d_mlp": config.get("n_inner") or 4 * d,
            "vocab_size": config["vocab_size"],
            "max_positions": config["n_positions"],
            "norm_eps": config.get("layer_norm_epsilon", 1e-5),
        }
    else:
        n_heads = config["num_attention_heads"]
        d = config["hidden_size"]
        fields = {
            "family": "llama",
            "n_layers": config["num_hidden_layers"],
            "n_heads": n_heads,
            "n_kv_heads": config.get("num_key_value_heads", n_heads),
            "d_model": d,
            "d_mlp": config["intermediate_size"],
            "vocab_size": config["vocab_size"],
            "max_positions": config.get("max_position_embeddings", 2048),
            "norm_eps": config.get("rms_norm_eps", 1e-6),
            "rope_theta": config.get("rope_theta", 10000.0),
        }
        head_dim = config.get("head_dim")
        if head_dim and head_dim * n_heads != d:
            fields["d_head"] = head_dim
    lines = ['weights = "model.safetensors"', "", "[arch]"]
    lines += [f"{k} = {_toml_value(v)}" for k, v in fields.items()]
    lines += ["", "[tokenizer]"]
    lines += [f"{k} = {_toml_value(v)}" for k, v in tokenizer.items() if v is not None]
    return "\n".join(lines) + "\n"


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return json.dumps(v)


def _merges_lines(merges) -> List[str]:
    return [m if isinstance(m, str) else f"{m[0]} {m[1]}" for m in merges]


def export_tokenizer(root: Path, out: Path, family: str) -> dict:
    """Write ``vocab.json`` and ``merges.txt``; return the ``[tokenizer]`` table."""
    tj = root / "tokenizer.json"
    specials: List[str] = []
    pretokenizer = "gpt2"
    if tj.exists():
        data = json.loads(tj.read_text())
        model = data["model"]
        if model.get("type") != "BPE":
            raise ExportError(f"unsupported tokenizer model {model.get('type')!r}")
        vocab = model["vocab"]
        merges = _merges_lines(model["merges"])
        for t in data.get("added_tokens", []):
            vocab.setdefault(t["content"], t["id"])
            if t.get("special"):
                specials.append(t["content"])
        if "Split" in json.dumps(data.get("pre_tokenizer")):
            pretokenizer = "llama3"
    elif (root / "vocab.json").exists() and (root / "merges.txt").exists():
        vocab = json.loads((root / "vocab.json").read_text())
        merges = [l for l in (root / "merges.txt").read_text().splitlines() if l and not l.startswith("#version")]
        specials = [t for t in vocab if t.startswith("<|") and t.endswith("|>")]
    else:
        raise ExportError(f"no tokenizer.json or vocab.json + merges.txt under {root}")
    (out / "vocab.json").write_text(json.dumps(dict(sorted(vocab.items(), key=lambda kv: kv[1])), indent=1, ensure_ascii=False) + "\n")
    (out / "merges.txt").write_text("#version: 0.2\n" + "\n".join(merges) + "\n")
    bos = None
    tc = root / "tokenizer_config.json"
    if tc.exists():
        b = json.loads(tc.read_text()).get("bos_token")
        bos = b.get("content") if isinstance(b, dict) else b
    if bos is None and "<|endoftext|>" in vocab:
        bos = "<|endoftext|>"
    return {
        "kind": "byte-bpe",
        "pretokenizer": pretokenizer,
        "vocab": "vocab.json",
        "merges": "merges.txt",
        "special_tokens": sorted(set(specials), key=lambda s: vocab.get(s, 0)),
        "bos_token": bos,
        "chat_template": "llama3" if LLAMA3_MARKER in vocab else "plain",
    }


# ---------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def export(model_id_or_path: str, family: str, out_path: str, keep_dtype: bool = False) -> ExportManifest:
    """Convert a checkpoint; see the module docstring for the output layout."""
    root, state, config = load_source(model_id_or_path)
    tensors, renames, dropped = rename(state, family)
    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)
    arrays: Dict[str, np.ndarray] = {}
    conversions: Dict[str, str] = {}
    for name in sorted(tensors):
        t = tensors[name]
        if not keep_dtype and t.dtype != torch.float32:
            conversions[name] = f"{str(t.dtype).replace('torch.', '')}->float32"
            t = t.to(torch.float32)
        elif keep_dtype and t.dtype == torch.bfloat16:
            # numpy has no bfloat16; F16 keeps the file compact
            conversions[name] = "bfloat16->float16"
            t = t.to(torch.float16)
        arrays[name] = t.detach().cpu().contiguous().numpy()
    weights = out / "model.safetensors"
    save_file(arrays, str(weights))
    tok = export_tokenizer(root, out, family)
    (out / "model.toml").write_text(model_toml(config, family, tok))
    checksums = {f: _sha256(out / f) for f in ("model.safetensors", "model.toml", "vocab.json", "merges.txt")}
    manifest = ExportManifest(
        source=str(model_id_or_path),
        family=family,
        rename_map=renames,
        dropped=dropped,
        dtype_conversions=conversions,
        checksums=checksums,
        created_unix=int(time.time()),
    )
    (out / "export_manifest.json").write_text(manifest.to_json())
    return manifest


def spot_check(model_id_or_path: str, family: str, out_path: str, n: int = 10, seed: int = 0, atol: float = 0.0) -> List[str]:
    """Compare ``n`` random exported tensors with their sources; return failures."""
    _, state, _ = load_source(model_id_or_path)
    tensors, _, _ = rename(state, family)
    exported = load_file(str(Path(out_path) / "model.safetensors"))
    names = sorted(tensors)
    rng = random.Random(seed)
    failures = []
    for name in rng.sample(names, min(n, len(names))):
        if name not in exported:
            failures.append(f"{name}: missing from export")
            continue
        a = tensors[name].to(torch.float32)
        b = exported[name].to(torch.float32)
        if a.shape != b.shape:
            failures.append(f"{name}: shape {tuple(b.shape)} != {tuple(a.shape)}")
        elif not torch.allclose(a, b, atol=atol, rtol=0.0):
            failures.append(f"{name}: max abs diff {float((a - b).abs().max())}")
    return failures


def export_from_env() -> Optional[str]:
    """Model id for optional network tests (``ROUTELENS_EXPORT_MODEL``)."""
    return os.environ.get("ROUTELENS_EXPORT_MODEL")
