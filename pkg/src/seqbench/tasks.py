"""Synthetic sequence transduction tasks standing in for parallel corpora.

Three task families:
  copy        tgt == src (control task, no reordering burden)
  reorder     tgt is a token relabeling of src composed with a per-length
              permutation (window shuffles + a global rotation); gold
              alignments are stored so sources can be pre-reordered
  multimodal  each source admits m valid targets (relabeling after a
              left-rotation by the mode index), sampled uniformly per
              occurrence; sources repeat via a fixed per-seed pool

All generators are pure functions of (spec, seed). Corpus files are UTF-8
text, one pair per line: "src-ids TAB tgt-ids" with space-separated integer
token ids, plus an optional third column carrying the alignment.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
MASK_ID = 3
NUM_RESERVED = 4


@dataclass(frozen=True)
class Vocab:
    """Integer vocabulary with fixed reserved ids PAD=0 BOS=1 EOS=2 MASK=3."""

    size: int

    def __post_init__(self):
        if self.size < 8:
            raise ValueError(f"vocab size {self.size} < 8")

    pad: int = PAD_ID
    bos: int = BOS_ID
    eos: int = EOS_ID
    mask: int = MASK_ID

    @property
    def content_ids(self) -> np.ndarray:
        return np.arange(NUM_RESERVED, self.size)


@dataclass(frozen=True)
class TaskSpec:
    kind: str                      # copy | reorder | multimodal
    length_min: int = 8
    length_max: int = 32
    vocab_size: int = 64
    window: int = 4                # reorder: width of the local shuffle blocks
    rotate: bool = True            # reorder: compose a global rotation
    modes: int = 2                 # multimodal: valid targets per source
    source_pool: int = 2048        # multimodal: distinct sources in the pool
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("copy", "reorder", "multimodal"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if not 1 <= self.length_min <= self.length_max:
            raise ValueError("need 1 <= length_min <= length_max")
        if self.vocab_size < 8:
            raise ValueError("vocab_size < 8")
        if self.kind == "multimodal" and self.modes < 1:
            raise ValueError("multimodal needs modes >= 1")

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.vocab_size)


@dataclass
class SeqPair:
    src: list[int]
    tgt: list[int]
    alignment: list[int] | None = None   # target position of each source token


def _rng(spec: TaskSpec, *salt: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((spec.seed,) + salt))


def _relabel_map(spec: TaskSpec, salt: int = 0) -> np.ndarray:
    """Fixed random bijection over content ids; reserved ids map to themselves."""
    rng = _rng(spec, 101, salt)
    table = np.arange(spec.vocab_size)
    content = np.arange(NUM_RESERVED, spec.vocab_size)
    table[NUM_RESERVED:] = rng.permutation(content)
    return table


def _window_patterns(spec: TaskSpec, n_windows: int) -> list[np.ndarray]:
    """Per-window shuffle patterns, sampled once per corpus seed."""
    rng = _rng(spec, 202)
    w = max(1, spec.window)
    return [rng.permutation(w) for _ in range(n_windows)]


def _corpus_rotation(spec: TaskSpec) -> int:
    if not spec.rotate:
        return 0
    rng = _rng(spec, 203)
    return int(rng.integers(1, max(2, spec.length_min)))


def length_permutation(spec: TaskSpec, length: int) -> np.ndarray:
    """The reorder permutation applied to sentences of one length.

    pi[i] is the target position of source token i: a corpus-level shuffle
    pattern within consecutive windows of spec.window positions (the final
    partial window keeps its order), composed with a corpus-level rotation.
    Patterns are shared across lengths, so the mapping src -> tgt is a
    deterministic, learnable function; only the rotation wrap point moves
    with the length.
    """
    w = max(1, spec.window)
    patterns = _window_patterns(spec, (length + w - 1) // w)
    pi = np.arange(length)
    for widx, start in enumerate(range(0, length, w)):
        end = min(start + w, length)
        if end - start == w:
            pi[start:end] = start + patterns[widx]
    rot = _corpus_rotation(spec)
    return (pi + rot) % length


def _sample_tokens(rng: np.random.Generator, spec: TaskSpec, n: int) -> list[int]:
    lo, hi = NUM_RESERVED, spec.vocab_size
    return rng.integers(lo, hi, size=n).tolist()


def gen_copy(spec: TaskSpec, n: int, split_salt: int = 0) -> list[SeqPair]:
    """n pairs with tgt == src, uniform lengths and uniform content tokens."""
    if n < 1:
        raise ValueError("n >= 1 required")
    rng = _rng(spec, 1, split_salt)
    pairs = []
    for _ in range(n):
        length = int(rng.integers(spec.length_min, spec.length_max + 1))
        src = _sample_tokens(rng, spec, length)
        pairs.append(SeqPair(src=src, tgt=list(src)))
    return pairs


def gen_reorder(spec: TaskSpec, n: int, split_salt: int = 0) -> list[SeqPair]:
    """Relabel + permute pairs with gold alignments attached."""
    if n < 1:
        raise ValueError("n >= 1 required")
    rng = _rng(spec, 2, split_salt)
    relabel = _relabel_map(spec)
    perms = {length: length_permutation(spec, length)
             for length in range(spec.length_min, spec.length_max + 1)}
    pairs = []
    for _ in range(n):
        length = int(rng.integers(spec.length_min, spec.length_max + 1))
        src = _sample_tokens(rng, spec, length)
        pi = perms[length]
        tgt = [0] * length
        for i, tok in enumerate(src):
            tgt[pi[i]] = int(relabel[tok])
        pairs.append(SeqPair(src=src, tgt=tgt, alignment=pi.tolist()))
    return pairs


def reorder_source(pair: SeqPair) -> SeqPair:
    """Stably sort source tokens by their aligned target position.

    Tokens aligned to the same target position keep their original order.
    The returned alignment is monotone; the operation is idempotent.
    """
    if pair.alignment is None:
        raise ValueError("reorder_source needs an alignment")
    order = np.argsort(np.asarray(pair.alignment), kind="stable")
    src = [pair.src[i] for i in order]
    align = sorted(pair.alignment)
    return SeqPair(src=src, tgt=list(pair.tgt), alignment=align)


def multimodal_transform(spec: TaskSpec, mode: int, src: list[int]) -> list[int]:
    """Valid target number `mode` for a source: rotate left by mode, relabel."""
    relabel = _relabel_map(spec, salt=mode + 1)
    length = len(src)
    rotated = [src[(i + mode) % length] for i in range(length)]
    return [int(relabel[t]) for t in rotated]


def _multimodal_pool(spec: TaskSpec) -> list[list[int]]:
    rng = _rng(spec, 3)
    pool = []
    for _ in range(spec.source_pool):
        length = int(rng.integers(spec.length_min, spec.length_max + 1))
        pool.append(_sample_tokens(rng, spec, length))
    return pool


def gen_multimodal(spec: TaskSpec, n: int, split_salt: int = 0) -> list[SeqPair]:
    """n pairs whose sources come from a fixed pool; mode sampled per pair.

    split_salt decorrelates the example draws of train/dev/test splits while
    every split shares the same source pool and transforms.
    """
    if n < 1:
        raise ValueError("n >= 1 required")
    pool = _multimodal_pool(spec)
    rng = _rng(spec, 4, split_salt)
    pairs = []
    for _ in range(n):
        src = pool[int(rng.integers(0, len(pool)))]
        mode = int(rng.integers(0, spec.modes))
        pairs.append(SeqPair(src=list(src), tgt=multimodal_transform(spec, mode, src)))
    return pairs


def generate(spec: TaskSpec, n: int, split_salt: int = 0) -> list[SeqPair]:
    if spec.kind == "copy":
        return gen_copy(spec, n, split_salt)
    if spec.kind == "reorder":
        return gen_reorder(spec, n, split_salt)
    return gen_multimodal(spec, n, split_salt)


def reference_targets(spec: TaskSpec, src: list[int]) -> list[list[int]]:
    """All valid targets for a source under this task (1 unless multimodal)."""
    if spec.kind == "copy":
        return [list(src)]
    if spec.kind == "reorder":
        relabel = _relabel_map(spec)
        pi = length_permutation(spec, len(src))
        tgt = [0] * len(src)
        for i, tok in enumerate(src):
            tgt[pi[i]] = int(relabel[tok])
        return [tgt]
    return [multimodal_transform(spec, m, src) for m in range(spec.modes)]


@dataclass
class Dataset:
    train: list[SeqPair]
    dev: list[SeqPair]
    test: list[SeqPair]
    spec: TaskSpec = field(default=None)  # type: ignore[assignment]


def gen_dataset(spec: TaskSpec, n_train: int = 50_000, n_dev: int = 1000,
                n_test: int = 1000) -> Dataset:
    return Dataset(
        train=generate(spec, n_train, split_salt=0),
        dev=generate(spec, n_dev, split_salt=1),
        test=generate(spec, n_test, split_salt=2),
        spec=spec,
    )


# ---------------------------------------------------------------------------
# corpus text format
# ---------------------------------------------------------------------------

def _format_ids(ids: list[int]) -> str:
    return " ".join(str(t) for t in ids)


def _parse_ids(text: str, path, lineno: int, what: str,
               vocab_size: int | None) -> list[int]:
    if text == "":
        return []
    ids = []
    for piece in text.split(" "):
        try:
            tok = int(piece)
        except ValueError:
            raise ValueError(
                f"{path}:{lineno}: non-integer {what} token {piece!r}"
            ) from None
        if vocab_size is not None and not 0 <= tok < vocab_size:
            raise ValueError(
                f"{path}:{lineno}: {what} token {tok} outside vocab of {vocab_size}"
            )
        ids.append(tok)
    return ids


def write_corpus(path, pairs: list[SeqPair]) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for p in pairs:
            line = f"{_format_ids(p.src)}\t{_format_ids(p.tgt)}"
            if p.alignment is not None:
                line += f"\t{_format_ids(p.alignment)}"
            fh.write(line + "\n")


def read_corpus(path, vocab_size: int | None = None) -> list[SeqPair]:
    path = Path(path)
    pairs = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if line == "":
                continue
            cols = line.split("\t")
            if len(cols) not in (2, 3):
                raise ValueError(
                    f"{path}:{lineno}: expected 2 or 3 TAB columns, got {len(cols)}"
                )
            src = _parse_ids(cols[0], path, lineno, "source", vocab_size)
            tgt = _parse_ids(cols[1], path, lineno, "target", vocab_size)
            align = None
            if len(cols) == 3:
                align = _parse_ids(cols[2], path, lineno, "alignment", None)
                if len(align) != len(src):
                    raise ValueError(
                        f"{path}:{lineno}: alignment length {len(align)} != source length {len(src)}"
                    )
            pairs.append(SeqPair(src=src, tgt=tgt, alignment=align))
    return pairs
