"""Caption tokenization, vocabulary, frozen word embeddings, MLM masking.

Word embeddings are deterministic pseudo-random unit vectors keyed by the
token string and an embedding seed. The same derivation serves the
vocabulary table, the class prototypes of the detection head, and any class
name supplied at inference time, so words never seen during training still
resolve to a stable embedding.
"""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD, MASK, CLS = "[PAD]", "[MASK]", "[CLS]"
SPECIALS = (PAD, MASK, CLS)


def tokenize(text: str) -> list[str]:
    """Lowercase whitespace tokenization; captions are template-generated."""
    return text.lower().split()


@dataclass
class Vocabulary:
    tokens: list[str]
    index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.index:
            self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        for i, special in enumerate(SPECIALS):
            if self.tokens[i] != special:
                raise ValueError(f"special token {special} must sit at reserved id {i}")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def encode(self, tokens: list[str]) -> list[int]:
        try:
            return [self.index[t] for t in tokens]
        except KeyError as exc:
            raise KeyError(f"token {exc.args[0]!r} not in vocabulary") from None

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        tokens = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([t for t in tokens if t])


def build_vocab(corpus: list[str]) -> Vocabulary:
    """Specials first, then corpus tokens by descending frequency, ties lexicographic."""
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts: Counter[str] = Counter()
    for caption in corpus:
        counts.update(tokenize(caption))
    ordered = sorted(counts, key=lambda t: (-counts[t], t))
    return Vocabulary(list(SPECIALS) + ordered)


def derive_embedding(token: str, dim: int, seed: int) -> np.ndarray:
    """Unit vector keyed by (seed, token); identical across processes and runs."""
    digest = hashlib.sha256(f"emb:{seed}:{token}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    v = rng.standard_normal(dim)
    return (v / np.linalg.norm(v)).astype(np.float32)


def derive_phrase_embedding(name: str, dim: int, seed: int) -> np.ndarray:
    """Multi-word names embed as the renormalized mean of their word vectors."""
    words = tokenize(name)
    if not words:
        raise ValueError(f"cannot embed empty class name {name!r}")
    v = np.mean([derive_embedding(w, dim, seed) for w in words], axis=0)
    return (v / np.linalg.norm(v)).astype(np.float32)


@dataclass
class EmbeddingTable:
    """Frozen |V| x d_l matrix of derived word vectors."""

    vocab: Vocabulary
    dim: int
    seed: int
    matrix: np.ndarray = None

    def __post_init__(self):
        if self.matrix is None:
            self.matrix = np.stack([derive_embedding(t, self.dim, self.seed) for t in self.vocab.tokens])

    def rows_for_names(self, names: list[str]) -> np.ndarray:
        """Class prototypes for arbitrary (possibly out-of-vocabulary) names."""
        return np.stack([derive_phrase_embedding(n, self.dim, self.seed) for n in names])

    def checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.matrix).tobytes()).hexdigest()


@dataclass
class TokenSequence:
    ids: np.ndarray
    mask_positions: np.ndarray
    mask_targets: np.ndarray

    @property
    def length(self) -> int:
        return int(self.ids.shape[0])


def encode_caption(caption: str, vocab: Vocabulary, max_len: int) -> TokenSequence:
    tokens = tokenize(caption)[:max_len]
    ids = np.asarray(vocab.encode(tokens), dtype=np.int64)
    empty = np.zeros(0, dtype=np.int64)
    return TokenSequence(ids=ids, mask_positions=empty, mask_targets=empty)


def apply_mlm_mask(seq: TokenSequence, p: float, rng: np.random.Generator,
                   special_ids: tuple[int, ...] = (0, 1, 2)) -> TokenSequence:
    """Independently mask each non-special position with probability p.

    Masked ids are replaced by the [MASK] id; originals are kept as targets.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"mask probability must be in [0, 1], got {p}")
    ids = seq.ids.copy()
    eligible = ~np.isin(ids, special_ids)
    hit = eligible & (rng.random(ids.shape[0]) < p)
    positions = np.flatnonzero(hit)
    targets = ids[positions].copy()
    ids[positions] = 1  # [MASK]
    return TokenSequence(ids=ids, mask_positions=positions, mask_targets=targets)


def embed_tokens(seq: TokenSequence, table: EmbeddingTable) -> np.ndarray:
    """Rows of the frozen table for each token id; masked positions use [MASK]'s row."""
    if seq.ids.size and int(seq.ids.max()) >= len(table.vocab):
        raise KeyError(f"token id {int(seq.ids.max())} outside vocabulary of size {len(table.vocab)}")
    return table.matrix[seq.ids]


def min_pairwise_cosine_distance(matrix: np.ndarray) -> float:
    unit = matrix / np.linalg.norm(matrix, axis=1, keepdims=True)
    sims = unit @ unit.T
    np.fill_diagonal(sims, -1.0)
    return float(1.0 - sims.max())
