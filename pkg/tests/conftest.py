"""Shared fixtures: tiny random models plus disk-cached trained models.

Trained fixtures are expensive (minutes each), so they are checkpointed
under .pytest_artifacts/ keyed by their exact recipe; delete the directory
to retrain from scratch.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import pytest

from seqbench import tasks as tk
from seqbench import train as tr
from seqbench.decode import DecodeConfig
from seqbench.model import Model, ModelConfig, load_checkpoint, save_checkpoint
from seqbench.pipeline import train_and_average

ARTIFACTS = Path(__file__).resolve().parent.parent / ".pytest_artifacts"


def cached_trained_model(name: str, model_cfg: ModelConfig,
                         train_cfg: tr.TrainConfig, train_pairs, dev_pairs,
                         objective: str) -> Model:
    ARTIFACTS.mkdir(exist_ok=True)
    path = ARTIFACTS / f"{name}.ckpt"
    if path.exists():
        cfg, params, _ = load_checkpoint(path)
        if cfg == model_cfg:
            return Model(config=cfg, params=params)
    model, result = train_and_average(model_cfg, train_cfg, train_pairs,
                                      dev_pairs, objective, log_every=0)
    save_checkpoint(path, model.config, model.params,
                    extra={"updates": result.updates,
                           "best_dev": result.checkpoints[0].dev_metric})
    return model


COPY_SPEC = tk.TaskSpec(kind="copy", length_min=4, length_max=10,
                        vocab_size=32, seed=21)


def copy_corpora():
    return (tk.gen_copy(COPY_SPEC, 8000),
            tk.gen_copy(COPY_SPEC, 400, split_salt=1))


@pytest.fixture(scope="session")
def ar_copy_model():
    """AR 2-2 d_model=64 trained 2k updates on the copy task (>=99% token acc)."""
    train_pairs, dev_pairs = copy_corpora()
    cfg = ModelConfig(E=2, D=2, d_model=64, d_ffn=256, heads=4,
                      vocab_size=32, max_len=16, dropout=0.1, dtype="float32")
    tc = tr.TrainConfig(lr_peak=3e-3, warmup_updates=100, max_updates=2000,
                        batch_tokens=3072, seed=5, dev_eval_cap=128,
                        early_stop_seq_acc=0.995)
    return cached_trained_model("ar_copy_2k_v1", cfg, tc,
                                train_pairs, dev_pairs, "ar")


@pytest.fixture(scope="session")
def cmlm_copy_model():
    train_pairs, dev_pairs = copy_corpora()
    cfg = ModelConfig(E=2, D=2, d_model=48, d_ffn=192, heads=4,
                      vocab_size=32, max_len=16, dropout=0.1, dtype="float32",
                      decoder_mode="bidirectional")
    tc = tr.TrainConfig(lr_peak=3e-3, warmup_updates=100, max_updates=1400,
                        batch_tokens=3072, seed=6, dev_eval_cap=128,
                        early_stop_seq_acc=0.98)
    return cached_trained_model("cmlm_copy_v1", cfg, tc,
                                train_pairs, dev_pairs, "cmlm")


@pytest.fixture(scope="session")
def disco_copy_model():
    train_pairs, dev_pairs = copy_corpora()
    cfg = ModelConfig(E=2, D=2, d_model=48, d_ffn=192, heads=4,
                      vocab_size=32, max_len=16, dropout=0.1, dtype="float32",
                      decoder_mode="bidirectional")
    tc = tr.TrainConfig(lr_peak=3e-3, warmup_updates=100, max_updates=1400,
                        batch_tokens=3072, seed=7, dev_eval_cap=128,
                        early_stop_seq_acc=0.98)
    return cached_trained_model("disco_copy_v1", cfg, tc,
                                train_pairs, dev_pairs, "disco")


def tiny_model(seed: int = 0, mode: str = "causal", d: int = 32,
               E: int = 2, D: int = 2, vocab: int = 20, max_len: int = 12,
               dtype: str = "float64", **kw) -> Model:
    fields = dict(E=E, D=D, d_model=d, d_ffn=2 * d, heads=4,
                  vocab_size=vocab, max_len=max_len, dropout=0.0,
                  decoder_mode=mode, dtype=dtype)
    fields.update(kw)
    return Model.create(ModelConfig(**fields), seed=seed)


def random_src(rng: np.random.Generator, vocab: int, lo: int = 2, hi: int = 8):
    n = int(rng.integers(lo, hi + 1))
    return rng.integers(4, vocab, size=n).tolist()


class TableStepper:
    """AR stepper over an explicit prefix -> distribution table (toy lattices)."""

    def __init__(self, table: dict, vocab_size: int, rows: int):
        self.table = table
        self.vocab_size = vocab_size
        self.prefixes = [() for _ in range(rows)]

    def step(self, prev):
        out = np.full((len(self.prefixes), self.vocab_size), -np.inf)
        nxt = []
        for i, prefix in enumerate(self.prefixes):
            p2 = prefix if prev[i] == tk.BOS_ID else prefix + (int(prev[i]),)
            nxt.append(p2)
            dist = self.table.get(p2)
            if dist:
                for tok, prob in dist.items():
                    if prob > 0:
                        out[i, tok] = math.log(prob)
        self.prefixes = nxt
        return out

    def reorder(self, idx):
        self.prefixes = [self.prefixes[i] for i in idx]


def random_lattice(rng: np.random.Generator, content: list[int], max_len: int) -> dict:
    """Dirichlet-random conditional distributions over content tokens + EOS."""
    table = {}

    def fill(prefix):
        probs = rng.dirichlet(np.ones(len(content) + 1))
        dist = {tk.EOS_ID: float(probs[0])}
        for i, c in enumerate(content):
            dist[c] = float(probs[i + 1])
        table[prefix] = dist
        if len(prefix) < max_len:
            for c in content:
                fill(prefix + (c,))

    fill(())
    return table


def brute_force_best(table: dict, content: list[int], max_len: int,
                     alpha: float) -> list[int]:
    """Exhaustive argmax under the length-penalty scoring rule."""
    import itertools
    best_key, best_seq = None, None
    for length in range(0, max_len + 1):
        for seq in itertools.product(content, repeat=length):
            lp, prefix, dead = 0.0, (), False
            for tok in seq:
                p = table[prefix][tok]
                if p <= 0:
                    dead = True
                    break
                lp += math.log(p)
                prefix = prefix + (tok,)
            if dead:
                continue
            eos_p = table[prefix][tk.EOS_ID]
            if eos_p <= 0:
                continue
            lp += math.log(eos_p)
            norm = lp / ((length + 1) ** alpha)
            key = (norm, -length, tuple(-t for t in seq))
            if best_key is None or key > best_key:
                best_key, best_seq = key, list(seq)
    return best_seq
