"""Closed-vocabulary tokenizer, prompt template and the per-identity token bank.

The prompt fed to the text encoder for identity ``y`` is::

    [SOS] a photo of a [X]_1 ... [X]_M person . [EOS] [PAD] ...

where the ``M`` rows ``[X]_m`` come from row ``y`` of a :class:`TokenBank`.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .errors import (
    ConfigError,
    ContextOverflowError,
    IdentityRangeError,
    UnknownTokenError,
)

PAD, SOS, EOS = "<pad>", "<sos>", "<eos>"
SLOT_WORD = "x"
DEFAULT_CTX_LEN = 77

_WORD_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


def split_words(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


class Vocabulary:
    """Word-level vocabulary; the id of a token is its position in ``tokens``.

    Args:
        tokens: every token, specials included.
        ctx_len: fixed length of tokenized sequences.
        max_size: optional upper bound on the number of tokens.
    """

    def __init__(self, tokens: Sequence[str], ctx_len: int = DEFAULT_CTX_LEN,
                 max_size: int | None = None):
        tokens = list(tokens)
        if len(set(tokens)) != len(tokens):
            raise ConfigError("vocabulary contains duplicate tokens")
        for special in (PAD, SOS, EOS):
            if special not in tokens:
                raise ConfigError(f"vocabulary lacks special token {special}")
        if max_size is not None and len(tokens) > max_size:
            raise ConfigError(f"vocabulary size {len(tokens)} exceeds {max_size}")
        if ctx_len < 2:
            raise ConfigError("ctx_len must be at least 2")
        self.tokens = tokens
        self.ctx_len = int(ctx_len)
        self._index = {t: i for i, t in enumerate(tokens)}
        self.pad_id = self._index[PAD]
        self.sos_id = self._index[SOS]
        self.eos_id = self._index[EOS]

    @classmethod
    def from_words(cls, words: Iterable[str], ctx_len: int = DEFAULT_CTX_LEN) -> "Vocabulary":
        seen = [PAD, SOS, EOS]
        for w in words:
            for piece in split_words(w):
                if piece not in seen:
                    seen.append(piece)
        return cls(seen, ctx_len=ctx_len)

    @classmethod
    def load(cls, path, ctx_len: int = DEFAULT_CTX_LEN) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln], ctx_len=ctx_len)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, word):
        return word in self._index

    def id_of(self, word: str) -> int:
        try:
            return self._index[word]
        except KeyError:
            raise UnknownTokenError(word) from None

    def tokenize(self, text: str) -> np.ndarray:
        """Map ``text`` to ``[SOS, ids..., EOS, PAD...]`` of length ``ctx_len``."""
        words = split_words(text)
        if len(words) > self.ctx_len - 2:
            raise ContextOverflowError(
                f"{len(words)} words do not fit a context of {self.ctx_len}")
        ids = np.full(self.ctx_len, self.pad_id, dtype=np.int64)
        ids[0] = self.sos_id
        ids[1:1 + len(words)] = [self.id_of(w) for w in words]
        ids[1 + len(words)] = self.eos_id
        return ids

    def eos_position(self, ids: np.ndarray) -> int:
        hits = np.flatnonzero(np.asarray(ids) == self.eos_id)
        if hits.size != 1:
            raise ConfigError("token sequence must hold exactly one EOS")
        return int(hits[0])


def tokenize(text: str, vocab: Vocabulary) -> np.ndarray:
    return vocab.tokenize(text)


@dataclass(frozen=True)
class PromptTemplate:
    """``prefix [X]*M suffix`` with ``M`` learnable slots."""

    prefix_text: str = "a photo of a"
    suffix_text: str = "person ."
    M: int = 4
    ctx_len: int = DEFAULT_CTX_LEN

    def __post_init__(self):
        if self.M < 0:
            raise ConfigError("M must be non-negative")
        used = len(split_words(self.prefix_text)) + self.M + len(split_words(self.suffix_text)) + 2
        if used > self.ctx_len:
            raise ConfigError(f"template needs {used} positions, context is {self.ctx_len}")

    @classmethod
    def for_kind(cls, kind: str, M: int = 4, ctx_len: int = DEFAULT_CTX_LEN,
                 prefix_text: str = "a photo of a") -> "PromptTemplate":
        if kind not in ("person", "vehicle"):
            raise ConfigError(f"unknown dataset kind {kind!r}")
        return cls(prefix_text=prefix_text, suffix_text=f"{kind} .", M=M, ctx_len=ctx_len)

    def placeholder_text(self) -> str:
        return " ".join([self.prefix_text] + [SLOT_WORD] * self.M + [self.suffix_text])

    @property
    def slot_start(self) -> int:
        return 1 + len(split_words(self.prefix_text))

    @property
    def slots(self) -> slice:
        return slice(self.slot_start, self.slot_start + self.M)

    @property
    def eos_position(self) -> int:
        return self.slot_start + self.M + len(split_words(self.suffix_text))


class TokenBank(nn.Module):
    """``N_ids x M x D_word`` learnable prompt tokens, one block of rows per identity."""

    def __init__(self, embeddings: torch.Tensor, trainable: bool = True):
        super().__init__()
        if embeddings.dim() != 3:
            raise ConfigError("token bank must be N x M x D")
        self.embeddings = nn.Parameter(embeddings.clone(), requires_grad=trainable)

    @property
    def n_ids(self) -> int:
        return self.embeddings.shape[0]

    @property
    def M(self) -> int:
        return self.embeddings.shape[1]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[2]

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        return self.embeddings[ids]


def init_token_bank(n_ids: int, M: int, d_word: int, seed: int, std: float = 0.02,
                    dtype=torch.float32) -> TokenBank:
    """Gaussian init with zero mean; reproducible for a fixed ``seed``."""
    if n_ids <= 0 or M <= 0 or d_word <= 0:
        raise ConfigError(f"token bank dims must be positive, got {(n_ids, M, d_word)}")
    if std < 0:
        raise ConfigError("std must be non-negative")
    gen = torch.Generator().manual_seed(int(seed))
    values = torch.randn(n_ids, M, d_word, generator=gen, dtype=torch.float64) * std
    return TokenBank(values.to(dtype))


def assemble_prompt(ids, bank: TokenBank | None, template: PromptTemplate,
                    word_table: nn.Embedding, vocab: Vocabulary):
    """Build prompt embeddings for one identity index or a batch of them.

    Returns ``(embeddings, eos_position)``. For a scalar ``ids`` the embeddings are
    ``ctx_len x D``; for a 1-d tensor they are ``B x ctx_len x D`` and the EOS
    position is a ``B`` tensor.
    """
    scalar = not torch.is_tensor(ids) or ids.dim() == 0
    idx = torch.as_tensor(ids, dtype=torch.long).reshape(-1)
    if template.M > 0:
        if bank is None or bank.M != template.M:
            raise ConfigError("token bank slot count does not match template M")
        if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) >= bank.n_ids):
            raise IdentityRangeError(f"identity index out of range [0, {bank.n_ids})")
    token_ids = torch.from_numpy(vocab.tokenize(template.placeholder_text()))
    fixed = word_table(token_ids)
    B = idx.numel()
    s = template.slots
    if template.M > 0:
        learned = bank(idx).to(fixed.dtype)
        out = torch.cat([fixed[:s.start].expand(B, -1, -1), learned,
                         fixed[s.stop:].expand(B, -1, -1)], dim=1)
    else:
        out = fixed.unsqueeze(0).expand(B, -1, -1)
    eos = torch.full((B,), template.eos_position, dtype=torch.long)
    if scalar:
        return out[0], int(eos[0])
    return out, eos
