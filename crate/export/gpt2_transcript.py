"""Record a greedy transcript for GPT-2-small with transformers.

    python gpt2_transcript.py --model gpt2 --out exported/gpt2/transcript.json

The acceptance run replays it against the exported checkpoint when
ROUTELENS_GPT2_DIR points at that directory.
"""

import argparse
import json
from pathlib import Path

import torch
from transformers import AutoTokenizer, GPT2LMHeadModel

PROMPT = "The quick brown fox jumps over the lazy dog. In the morning, the"


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--model", default="gpt2")
    p.add_argument("--out", required=True)
    p.add_argument("--new-tokens", type=int, default=16)
    args = p.parse_args()
    tok = AutoTokenizer.from_pretrained(args.model)
    model = GPT2LMHeadModel.from_pretrained(args.model).eval()
    ids = tok.encode(PROMPT)[:16]
    if len(ids) != 16:
        raise SystemExit(f"prompt encodes to {len(ids)} tokens, expected 16")
    with torch.no_grad():
        out = model.generate(
            torch.tensor([ids]), max_new_tokens=args.new_tokens, do_sample=False,
            pad_token_id=tok.eos_token_id, attention_mask=torch.ones(1, 16, dtype=torch.long),
        )[0, 16:]
    data = {"prompt": tok.decode(ids), "prompt_ids": ids, "greedy": out.tolist()}
    Path(args.out).write_text(json.dumps(data, indent=2) + "\n")


if __name__ == "__main__":
    main()
