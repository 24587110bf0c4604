"""High-level experiment plumbing shared by the CLI, scripts and tests."""

from __future__ import annotations

import logging
from dataclasses import replace

import numpy as np

from . import bench as bn
from . import decode as dec
from . import model as mdl
from . import train as tr

logger = logging.getLogger(__name__)


def train_and_average(model_cfg: mdl.ModelConfig, train_cfg: tr.TrainConfig,
                      train_pairs, dev_pairs, objective: str,
                      dev_decode: dec.DecodeConfig | None = None,
                      dev_references=None, init_seed: int = 0,
                      log_every: int = 200) -> tuple[mdl.Model, tr.TrainResult]:
    """Train from fresh init, then average the best dev checkpoints."""
    model = mdl.Model.create(model_cfg, seed=init_seed)
    result = tr.train(model, train_pairs, train_cfg, dev_pairs,
                      objective=objective, dev_decode=dev_decode,
                      dev_references=dev_references, log_every=log_every)
    model.params = tr.average_checkpoints(result.checkpoints)
    return model, result


def speed_entry(name: str, base: mdl.ModelConfig, E: int, D: int,
                strategy: str, T: int = 10, length_beam: int = 5,
                beam_size: int = 5, max_len: int | None = None,
                seed: int = 0,
                params: dict | None = None) -> tuple[str, mdl.Model, dec.DecodeConfig]:
    """Build one (name, model, decode config) row for the speed suite."""
    mode = "causal" if strategy in ("greedy", "beam") else "bidirectional"
    cfg = replace(base, E=E, D=D, decoder_mode=mode)
    model = mdl.Model(config=cfg, params=params) if params is not None \
        else mdl.Model.create(cfg, seed=seed)
    dcfg = dec.DecodeConfig(
        strategy=strategy, beam_size=beam_size, length_penalty=1.0,
        iterations=T, length_beam=length_beam,
        max_len=max_len or cfg.max_len)
    return name, model, dcfg


def desk_speed_base(dtype: str = "float32") -> mdl.ModelConfig:
    """The desk-scale benchmark width: d_model 256, ffn ratio 4, 8 heads."""
    return mdl.ModelConfig(E=6, D=6, d_model=256, d_ffn=1024, heads=8,
                           vocab_size=68, max_len=64, dropout=0.0,
                           dtype=dtype)


def standard_speed_entries(base: mdl.ModelConfig | None = None, seed: int = 0):
    """The benchmark lineup: AR 6-6 baseline, AR 12-1, iterative NAR configs."""
    base = base or desk_speed_base()
    return [
        speed_entry("ar-6-6", base, 6, 6, "beam", seed=seed),
        speed_entry("ar-12-1", base, 12, 1, "beam", seed=seed),
        speed_entry("cmlm-6-6-t4", base, 6, 6, "mask_predict", T=4, seed=seed),
        speed_entry("cmlm-6-6-t10", base, 6, 6, "mask_predict", T=10, seed=seed),
        speed_entry("disco-6-6-t10", base, 6, 6, "easy_first", T=10, seed=seed),
    ]


def bench_corpus(n: int, length_min: int = 8, length_max: int = 32,
                 vocab_size: int = 68, seed: int = 0) -> list[list[int]]:
    """Synthetic source sentences for timing runs."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 404)))
    out = []
    for _ in range(n):
        length = int(rng.integers(length_min, length_max + 1))
        out.append(rng.integers(4, vocab_size, size=length).tolist())
    return out
