"""Regenerate the reference fixtures under crates/core/fixtures.

Trains two small byte-level BPE tokenizers, builds seeded tiny GPT-2 and
Llama models with transformers, exports them with routelens_export and
records reference logits, greedy continuations and tokenizer encodings.

    python export/make_fixtures.py [--out crates/core/fixtures]
"""

from __future__ import annotations

import argparse
import json
import random
import shutil
import sys
import tempfile
from pathlib import Path

import torch

sys.path.insert(0, str(Path(__file__).resolve().parent))

from tokenizers import Regex, Tokenizer, decoders, models, pre_tokenizers, trainers  # noqa: E402
from transformers import GPT2Config, GPT2LMHeadModel, LlamaConfig, LlamaForCausalLM  # noqa: E402

from routelens_export import export, spot_check  # noqa: E402

LLAMA3_PATTERN = (
    r"(?i:'s|'t|'re|'ve|'m|'ll|'d)|[^\r\n\p{L}\p{N}]?\p{L}+|\p{N}{1,3}| ?[^\s\p{L}\p{N}]+[\r\n]*|\s*[\r\n]+|\s+(?!\S)|\s+"
)

WORDS = (
    "the capital of france is paris and the capital of japan is tokyo . which city hosts the "
    "summit ? answer with one option : a b c d . sources claim that experts agree the "
    "report was verified by officials in 2023 , 1999 and 42 cases . it's they're we've "
    "I'm you'll he'd"
).split()

EXTRA = [
    "naïve café — résumé", "Grüße aus München", "東京は日本の首都です", "emoji 🙂🚀 test",
    "tabs\tand\nnewlines\r\n", "  leading and trailing  ", "numbers 1234567 and 3.14159",
    "ALL CAPS SHOUTING!!!", "mixed-Case_identifiers andSoOn", "quotes \"double\" 'single'",
]


def corpus(seed: int, n: int = 3000):
    rng = random.Random(seed)
    lines = []
    for _ in range(n):
        k = rng.randint(3, 14)
        words = [rng.choice(WORDS) for _ in range(k)]
        if rng.random() < 0.3:
            words[0] = words[0].capitalize()
        lines.append(" ".join(words))
    return lines + EXTRA * 20


def probe_strings(seed: int, n: int = 200):
    rng = random.Random(seed)
    alphabet = list("abcdefghijklmnopqrstuvwxyz ABCXYZ0123456789.,;:!?'\"-\n\t") + ["é", "ü", "東", "京", "🙂", "—", "ß", "\r\n", "  "]
    out = list(EXTRA)
    while len(out) < n:
        if rng.random() < 0.5:
            out.append(" ".join(rng.choice(WORDS) for _ in range(rng.randint(1, 10))))
        else:
            out.append("".join(rng.choice(alphabet) for _ in range(rng.randint(1, 40))))
    return out


def train_tokenizer(kind: str, specials, vocab_size: int = 400) -> Tokenizer:
    tok = Tokenizer(models.BPE())
    if kind == "gpt2":
        tok.pre_tokenizer = pre_tokenizers.ByteLevel(add_prefix_space=False)
    else:
        tok.pre_tokenizer = pre_tokenizers.Sequence(
            [
                pre_tokenizers.Split(Regex(LLAMA3_PATTERN), behavior="isolated", invert=False),
                pre_tokenizers.ByteLevel(add_prefix_space=False, use_regex=False),
            ]
        )
    tok.decoder = decoders.ByteLevel()
    trainer = trainers.BpeTrainer(
        vocab_size=vocab_size,
        initial_alphabet=pre_tokenizers.ByteLevel.alphabet(),
        special_tokens=specials,
        show_progress=False,
    )
    tok.train_from_iterator(corpus(7), trainer)
    return tok


def encodings(tok: Tokenizer, strings):
    return [{"text": s, "ids": tok.encode(s, add_special_tokens=False).ids} for s in strings]


def randomize_(model: torch.nn.Module, seed: int):
    """Non-trivial norms and biases so every parameter is exercised."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in sorted(model.named_parameters()):
            if p.dim() == 1 and ("ln" in name or "norm" in name) and name.endswith("weight"):
                p.copy_(1.0 + 0.2 * torch.randn(p.shape, generator=g))
            elif p.dim() == 1:
                p.copy_(0.1 * torch.randn(p.shape, generator=g))
            else:
                p.copy_(0.15 * torch.randn(p.shape, generator=g))


def reference(model, tok: Tokenizer, prompts, bos_id: int, n_new: int = 8):
    cases = []
    model.eval()
    for text in prompts:
        ids = [bos_id] + tok.encode(text, add_special_tokens=False).ids
        with torch.no_grad():
            logits = model(torch.tensor([ids])).logits[0]
            gen = model.generate(
                torch.tensor([ids]), max_new_tokens=n_new, do_sample=False, pad_token_id=bos_id,
                attention_mask=torch.ones(1, len(ids), dtype=torch.long),
            )[0, len(ids):]
        cases.append({"text": text, "ids": ids, "logits": logits.tolist(), "greedy": gen.tolist()})
    return cases


def build(kind: str, out: Path, tmp: Path):
    specials = ["<|endoftext|>"] if kind == "gpt2" else ["<|begin_of_text|>", "<|start_header_id|>", "<|end_header_id|>", "<|eot_id|>"]
    tok = train_tokenizer(kind, specials)
    vocab = tok.get_vocab_size()
    src = tmp / f"src_{kind}"
    src.mkdir()
    torch.manual_seed(11)
    if kind == "gpt2":
        cfg = GPT2Config(vocab_size=vocab, n_positions=64, n_embd=32, n_layer=2, n_head=4, bos_token_id=0, eos_token_id=0)
        model = GPT2LMHeadModel(cfg)
        family = "gpt2"
    else:
        cfg = LlamaConfig(
            vocab_size=vocab, hidden_size=32, intermediate_size=64, num_hidden_layers=2, num_attention_heads=4,
            num_key_value_heads=2, max_position_embeddings=64, rope_theta=10000.0, rms_norm_eps=1e-6,
            tie_word_embeddings=False, bos_token_id=0, eos_token_id=3,
        )
        model = LlamaForCausalLM(cfg)
        family = "llama"
    model.config._attn_implementation = "eager"
    randomize_(model, 5)
    model.save_pretrained(src, safe_serialization=True)
    tok.save(str(src / "tokenizer.json"))
    (src / "tokenizer_config.json").write_text(json.dumps({"bos_token": specials[0]}))
    dest = out / f"hf_{kind}"
    if dest.exists():
        shutil.rmtree(dest)
    export(str(src), family, str(dest))
    failures = spot_check(str(src), family, str(dest))
    if failures:
        raise SystemExit(f"spot check failed: {failures}")
    manifest = json.loads((dest / "export_manifest.json").read_text())
    manifest["source"] = f"generated:{kind}"
    manifest["created_unix"] = 0
    (dest / "export_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    prompts = ["the capital of france is", "Which city hosts the summit? Answer:", "naïve café 🙂", "1 2 3"]
    data = {
        "family": family,
        "cases": reference(model, tok, prompts, 0),
        "encodings": encodings(tok, probe_strings(3 if kind == "gpt2" else 4)),
    }
    (dest / "reference.json").write_text(json.dumps(data) + "\n")


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "crates" / "core" / "fixtures"))
    args = p.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as t:
        for kind in ("gpt2", "llama"):
            build(kind, out, Path(t))
    print(f"fixtures written to {out}")


if __name__ == "__main__":
    main()
