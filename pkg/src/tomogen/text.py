"""Prompt tokenization and a jointly-trained token embedding encoder.

The tokenizer is deterministic over the closed phantom vocabulary:
lowercase, split on whitespace, punctuation marks become their own
tokens. Out-of-vocabulary words map to a reserved UNK id rather than
failing. Downstream modules contract only on the (token matrix,
validity mask) interface, so a pretrained encoder can be swapped in
behind :class:`TextEncoder` without touching them.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

PAD, UNK, NULL = "<pad>", "<unk>", "<null>"
_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    def __init__(self, token_to_id: dict[str, int]):
        for special in (PAD, UNK, NULL):
            if special not in token_to_id:
                raise ValueError(f"vocabulary is missing reserved token {special!r}")
        self.token_to_id = dict(token_to_id)

    def __len__(self) -> int:
        return len(self.token_to_id)

    @property
    def pad_id(self) -> int:
        return self.token_to_id[PAD]

    @property
    def unk_id(self) -> int:
        return self.token_to_id[UNK]

    @property
    def null_id(self) -> int:
        return self.token_to_id[NULL]

    def ids(self, tokens: list[str]) -> list[int]:
        unk = self.unk_id
        return [self.token_to_id.get(t, unk) for t in tokens]

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.token_to_id, indent=2, sort_keys=True))

    @staticmethod
    def load(path: Path) -> "Vocabulary":
        return Vocabulary(json.loads(Path(path).read_text()))


def default_vocabulary() -> Vocabulary:
    """Closed vocabulary covering every phrase the phantom generator can emit."""
    words = [PAD, UNK, NULL]
    words += [str(n) for n in range(1, 121)]
    words += [
        "years", "old", "male", "female", ":", ".",
        "no", "abnormality", "nodule", "effusion", "central", "mass",
    ]
    return Vocabulary({w: i for i, w in enumerate(words)})


@dataclass
class TextEmbedding:
    """Fixed-length prompt embedding: (L, d_text) tokens plus validity flags."""

    tokens: torch.Tensor
    validity: torch.Tensor

    def __post_init__(self):
        if self.tokens.shape[-2] != self.validity.shape[-1]:
            raise ValueError("tokens and validity disagree on sequence length")


class TextEncoder(nn.Module):
    """Embedding-table text encoder, trained jointly with its downstream stage."""

    def __init__(self, vocab: Vocabulary, d_text: int = 128):
        super().__init__()
        self.vocab = vocab
        self.d_text = d_text
        self.embedding = nn.Embedding(len(vocab), d_text)

    def token_ids(self, prompt: str, max_len: int) -> tuple[torch.Tensor, torch.Tensor]:
        if max_len < 1:
            raise ValueError(f"max_len must be >= 1, got {max_len}")
        toks = tokenize(prompt)
        if not toks:
            raise ValueError("prompt is empty")
        ids = self.vocab.ids(toks)[:max_len]
        validity = [True] * len(ids) + [False] * (max_len - len(ids))
        ids = ids + [self.vocab.pad_id] * (max_len - len(ids))
        return torch.tensor(ids, dtype=torch.long), torch.tensor(validity)

    def encode(self, prompt: str, max_len: int) -> TextEmbedding:
        ids, validity = self.token_ids(prompt, max_len)
        return TextEmbedding(tokens=self.embedding(ids), validity=validity)

    def encode_batch(self, prompts: list[str], max_len: int) -> TextEmbedding:
        pairs = [self.token_ids(p, max_len) for p in prompts]
        ids = torch.stack([p[0] for p in pairs])
        validity = torch.stack([p[1] for p in pairs])
        return TextEmbedding(tokens=self.embedding(ids), validity=validity)

    def null_conditioning(self, max_len: int, batch: int = 1) -> TextEmbedding:
        """Prompt-free conditioning (a single NULL token), used for guidance."""
        ids = torch.full((batch, max_len), self.vocab.pad_id, dtype=torch.long)
        ids[:, 0] = self.vocab.null_id
        validity = torch.zeros(batch, max_len, dtype=torch.bool)
        validity[:, 0] = True
        return TextEmbedding(tokens=self.embedding(ids), validity=validity)
