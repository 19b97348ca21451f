#!/usr/bin/env python3
"""Writes tests/data/tokenizer_fixture.json: reference encodings from the
`tokenizers` package for a fixed corpus, used as the oracle for the C++ BPE."""
import json
import random
import sys
from pathlib import Path

from tokenizers import Tokenizer

ROOT = Path(__file__).resolve().parent.parent
TOK_DIR = Path(sys.argv[1]) if len(sys.argv) > 1 else ROOT / "third_party" / "tokenizers"

HANDWRITTEN = [
    " foo", " bar", " vex", " nit", " orb", " dog", " cat", " bird", " fish",
    " positive", " negative", " very", " hot", " cold", " big", " small",
    "barks, fetches sticks: dog",
    "Q: purrs on laps\nA: cat\n\nQ: wags its tail\nA:",
    "input: melts ice\nlabel: hot",
    "tiny ant -> small",
    "I DON'T think we'll go, it's 12345 km   away.\n\n\n",
    "tabs\tand\u000bvertical\u0085next line nbsp",
    "café naïve 日本語 \U0001F600 emoji",
    "  leading spaces and trailing  ",
    "<|endoftext|>special in the middle<|endoftext|>",
    "numbers 1 22 333 4444 55555 3.14159 -7",
    "punctuation!!! ??? ... --- ;;;",
    "N/A",
    "",
]


def random_strings(rng, n):
    alphabet = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789 .,;:'!?-\n\téü中Ж"
    return ["".join(rng.choice(alphabet) for _ in range(rng.randint(1, 40))) for _ in range(n)]


def vocab_strings(tok, rng, n):
    size = tok.get_vocab_size()
    out = []
    for _ in range(n):
        ids = [rng.randrange(size) for _ in range(rng.randint(1, 6))]
        out.append(tok.decode(ids, skip_special_tokens=True))
    return out


def main():
    rng = random.Random(20240601)
    fixture = {}
    for name in ("gpt-neox-20b", "llama3"):
        tok = Tokenizer.from_file(str(TOK_DIR / f"{name}.json"))
        corpus = HANDWRITTEN + random_strings(rng, 150) + vocab_strings(tok, rng, 150)
        fixture[name] = [{"text": t, "ids": tok.encode(t, add_special_tokens=False).ids} for t in corpus]
    out = ROOT / "tests" / "data" / "tokenizer_fixture.json"
    out.write_text(json.dumps(fixture, ensure_ascii=False, indent=1) + "\n", encoding="utf-8")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
