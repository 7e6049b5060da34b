"""Synthetic multilingual parallel corpora.

Each "language pair" is a bijective transform of a shared payload
vocabulary. Source sentences carry a leading tag naming the target
language and a trailing end marker; targets are the transformed payload
plus the end marker.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import EOS, PAD

SPLITS = ("train", "dev", "test")
TRANSFORMS = ("permutation", "reverse-permutation", "shift")
SPECIAL_TOKENS = ("<pad>", "<s>", "</s>")


@dataclass(frozen=True)
class LanguageSpec:
    """One synthetic language pair.

    ``param`` is the permutation seed (or ``"identity"``, or an explicit
    permutation sequence) for the permutation transforms, and the offset k
    for ``shift``.
    """

    name: str
    train_size: int
    dev_size: int
    test_size: int
    transform: str = "permutation"
    param: int | str | tuple[int, ...] = 0
    payload_len_range: tuple[int, int] = (3, 8)

    def size(self, split: str) -> int:
        return {"train": self.train_size, "dev": self.dev_size, "test": self.test_size}[split]


def transform_table(spec: LanguageSpec, payload_vocab_size: int) -> np.ndarray:
    """Payload index -> payload index map for the language's transform."""
    v = payload_vocab_size
    if spec.transform == "shift":
        k = int(spec.param)
        if abs(k) >= v:
            raise ValueError(f"{spec.name}: shift {k} outside payload vocabulary of size {v}")
        return (np.arange(v) + k) % v
    if spec.transform not in TRANSFORMS:
        raise ValueError(f"{spec.name}: unknown transform {spec.transform!r}")
    if spec.param == "identity":
        return np.arange(v)
    if isinstance(spec.param, (tuple, list, np.ndarray)):
        table = np.asarray(spec.param, dtype=np.int64)
        if table.shape != (v,) or not np.array_equal(np.sort(table), np.arange(v)):
            raise ValueError(f"{spec.name}: explicit permutation is not a bijection on {v} tokens")
        return table
    return np.random.default_rng(int(spec.param)).permutation(v)


def apply_transform(kind: str, table: np.ndarray, payload: Sequence[int]) -> tuple[int, ...]:
    seq = list(payload)[::-1] if kind == "reverse-permutation" else list(payload)
    return tuple(int(table[t]) for t in seq)


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "_index", {tok: i for i, tok in enumerate(self.tokens)})
        if len(self._index) != len(self.tokens):
            raise ValueError("duplicate surface forms in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self._index[token]

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self._index[t] for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    @classmethod
    def build(cls, language_names: Sequence[str], payload_vocab_size: int) -> "Vocab":
        tags = [f"<2{name}>" for name in language_names]
        payload = [f"w{i}" for i in range(payload_vocab_size)]
        return cls(SPECIAL_TOKENS + tuple(tags) + tuple(payload))


Pair = tuple[tuple[int, ...], tuple[int, ...]]


@dataclass
class MultilingualCorpus:
    languages: list[LanguageSpec]
    vocab: Vocab
    payload_vocab_size: int
    # pairs[split][language index] -> list of (source ids, target ids)
    pairs: dict[str, list[list[Pair]]] = field(default_factory=dict)

    @property
    def names(self) -> list[str]:
        return [spec.name for spec in self.languages]

    @property
    def payload_offset(self) -> int:
        return len(SPECIAL_TOKENS) + len(self.languages)

    def tag_id(self, lang: int) -> int:
        return len(SPECIAL_TOKENS) + lang

    def sizes(self, split: str = "train") -> list[int]:
        return [len(p) for p in self.pairs[split]]

    def max_source_len(self) -> int:
        return max((len(src) for split in self.pairs.values() for lang in split for src, _ in lang), default=0)

    def language_index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown language {name!r}") from None


def generate_corpus(specs: Sequence[LanguageSpec], payload_vocab_size: int, seed: int) -> MultilingualCorpus:
    """Draw distinct source payloads per language and split them train/dev/test
    by position in the generator stream."""
    if not specs:
        raise ValueError("at least one language is required")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ValueError("language names must be unique")
    vocab = Vocab.build(names, payload_vocab_size)
    corpus = MultilingualCorpus(list(specs), vocab, payload_vocab_size, {s: [] for s in SPLITS})
    offset = corpus.payload_offset
    for li, spec in enumerate(specs):
        lo, hi = spec.payload_len_range
        if lo < 1 or hi < lo:
            raise ValueError(f"{spec.name}: bad payload length range {spec.payload_len_range}")
        if min(spec.train_size, spec.dev_size, spec.test_size) < 1:
            raise ValueError(f"{spec.name}: split sizes must be >= 1")
        table = transform_table(spec, payload_vocab_size)
        total = spec.train_size + spec.dev_size + spec.test_size
        capacity = sum(payload_vocab_size ** n for n in range(lo, hi + 1))
        if capacity < total:
            raise ValueError(f"{spec.name}: only {capacity} distinct payloads for {total} sentences")
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(li,)))
        seen: set[tuple[int, ...]] = set()
        drawn: list[tuple[int, ...]] = []
        while len(drawn) < total:
            n = int(rng.integers(lo, hi + 1))
            payload = tuple(int(t) for t in rng.integers(0, payload_vocab_size, size=n))
            if payload in seen:
                continue
            seen.add(payload)
            drawn.append(payload)
        pairs = []
        for payload in drawn:
            target = apply_transform(spec.transform, table, payload)
            src = (corpus.tag_id(li),) + tuple(t + offset for t in payload) + (EOS,)
            tgt = tuple(t + offset for t in target) + (EOS,)
            pairs.append((src, tgt))
        bounds = np.cumsum([0, spec.train_size, spec.dev_size, spec.test_size])
        for split, a, b in zip(SPLITS, bounds[:-1], bounds[1:]):
            corpus.pairs[split].append(pairs[a:b])
    return corpus


def temperature_probs(sizes: Sequence[int], tau: float) -> np.ndarray:
    """Sampling distribution proportional to (n_l / sum n)^(1/tau)."""
    n = np.asarray(sizes, dtype=np.float64)
    if n.size == 0 or (n <= 0).any():
        raise ValueError("all language sizes must be positive")
    if not tau > 0:
        raise ValueError("tau must be positive")
    weights = (n / n.sum()) ** (1.0 / tau)
    return weights / weights.sum()


def sample_language(probs: Sequence[float], rng: np.random.Generator) -> int:
    cdf = np.cumsum(probs)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(cdf) - 1))


def pad_batch(seqs: Sequence[Sequence[int]]) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def make_batch(corpus: MultilingualCorpus, lang: int, split: str, indices: Sequence[int]):
    """Right-padded (source, target, target mask) matrices for the chosen pairs."""
    pool = corpus.pairs[split][lang]
    if len(indices) == 0:
        raise ValueError("empty batch")
    for i in indices:
        if not 0 <= i < len(pool):
            raise IndexError(f"index {i} out of range for {split} split of size {len(pool)}")
    chosen = [pool[i] for i in indices]
    src = pad_batch([s for s, _ in chosen])
    tgt = pad_batch([t for _, t in chosen])
    return src, tgt, (tgt != PAD).astype(np.int64)


# ---- export / import ------------------------------------------------------

def export_corpus(corpus: MultilingualCorpus, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "vocab.tsv", "w", encoding="utf-8") as fh:
        for i, tok in enumerate(corpus.vocab.tokens):
            fh.write(f"{i}\t{tok}\n")
    with open(out / "languages.tsv", "w", encoding="utf-8") as fh:
        fh.write(f"# payload_vocab_size\t{corpus.payload_vocab_size}\n")
        for spec in corpus.languages:
            param = ",".join(map(str, spec.param)) if isinstance(spec.param, tuple) else spec.param
            lo, hi = spec.payload_len_range
            fh.write(f"{spec.name}\t{spec.train_size}\t{spec.dev_size}\t{spec.test_size}\t"
                     f"{spec.transform}\t{param}\t{lo}\t{hi}\n")
    for li, name in enumerate(corpus.names):
        for split in SPLITS:
            with open(out / f"{name}.{split}.tsv", "w", encoding="utf-8") as fh:
                for src, tgt in corpus.pairs[split][li]:
                    fh.write(" ".join(corpus.vocab.decode(src)) + "\t" + " ".join(corpus.vocab.decode(tgt)) + "\n")


def _parse_param(text: str):
    if text == "identity":
        return text
    if "," in text:
        return tuple(int(x) for x in text.split(","))
    return int(text)


def load_corpus(data_dir: str | Path) -> MultilingualCorpus:
    root = Path(data_dir)
    tokens = []
    for expected, line in enumerate((root / "vocab.tsv").read_text(encoding="utf-8").splitlines()):
        idx, tok = line.split("\t")
        if int(idx) != expected:
            raise ValueError(f"vocab.tsv: ids must be dense and sorted (line {expected + 1})")
        tokens.append(tok)
    vocab = Vocab(tuple(tokens))
    specs = []
    payload_vocab_size = None
    for line in (root / "languages.tsv").read_text(encoding="utf-8").splitlines():
        if line.startswith("# payload_vocab_size"):
            payload_vocab_size = int(line.split("\t")[1])
            continue
        name, tr, dv, ts, kind, param, lo, hi = line.split("\t")
        specs.append(LanguageSpec(name, int(tr), int(dv), int(ts), kind, _parse_param(param), (int(lo), int(hi))))
    if payload_vocab_size is None:
        raise ValueError("languages.tsv: missing payload_vocab_size header")
    corpus = MultilingualCorpus(specs, vocab, payload_vocab_size, {s: [] for s in SPLITS})
    for spec in specs:
        for split in SPLITS:
            pairs = []
            for line in (root / f"{spec.name}.{split}.tsv").read_text(encoding="utf-8").splitlines():
                src, tgt = line.split("\t")
                pairs.append((tuple(vocab.encode(src.split())), tuple(vocab.encode(tgt.split()))))
            corpus.pairs[split].append(pairs)
    return corpus
