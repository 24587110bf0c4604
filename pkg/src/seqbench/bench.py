"""Speed measurement protocols and the operation-count model.

Two wall-clock protocols:
  S1    one sentence at a time, sequentially (instantaneous-translation
        setting); median of R repetitions, warmup excluded
  Smax  mini-batches as large as the configured memory budget allows,
        corpus sorted by length and packed; same clock and repetitions

Both time everything from ready weights to the last decoded sentence,
including decoding-time allocation. Speedups are reported relative to a
named baseline (conventionally the 6-6 AR model).

The analytic complexity model evaluates, in abstract per-layer-pass units,
total operations (AR: E*N^2 + D*N^2, iterative NAR: E*N^2 + D*T*N^2) and
idealized parallel time (E*N + D*N^2 vs E*N + D*T*N); empirical_ops checks
it against instrumented multiply-accumulate counters.
"""

from __future__ import annotations

import contextlib
import csv
import io
import json
import math
import os
import platform
import statistics
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import decode as dec
from . import model as mdl
from .counting import OpCounter
from .train import evaluate

try:
    import threadpoolctl
except ImportError:         # optional; used only to pin BLAS worker count
    threadpoolctl = None

CSV_COLUMNS = [
    "model", "E", "D", "strategy", "T", "length_beam", "batch",
    "s1_seconds", "smax_seconds", "speedup_s1", "speedup_smax",
    "seq_acc", "tok_acc",
]
REPORT_SCHEMA_VERSION = 1


def hardware_descriptor(workers: int | None = None) -> dict:
    desc = {
        "platform": platform.platform(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "cpu_count": os.cpu_count(),
        "workers": workers or os.cpu_count(),
    }
    if threadpoolctl is not None:
        info = threadpoolctl.threadpool_info()
        if info:
            desc["blas"] = f"{info[0].get('internal_api')}-{info[0].get('version')}"
            desc["blas_threads"] = info[0].get("num_threads")
    return desc


def limit_workers(n: int | None):
    """Pin BLAS worker threads inside the context (no-op without support)."""
    if n is None or threadpoolctl is None:
        return contextlib.nullcontext()
    return threadpoolctl.threadpool_limits(limits=n)


# ---------------------------------------------------------------------------
# analytic complexity model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ComplexityModel:
    family: str                # "AR" or "NAR"
    E: int
    D: int
    N: int
    T: int = 1

    def __post_init__(self):
        if self.family not in ("AR", "NAR"):
            raise ValueError(f"unknown family {self.family!r}")
        if min(self.E, self.D, self.N, self.T) < 1:
            raise ValueError("all complexity inputs must be >= 1")

    @property
    def total_ops(self) -> int:
        if self.family == "AR":
            return self.E * self.N ** 2 + self.D * self.N ** 2
        return self.E * self.N ** 2 + self.D * self.T * self.N ** 2

    @property
    def parallel_time(self) -> int:
        if self.family == "AR":
            return self.E * self.N + self.D * self.N ** 2
        return self.E * self.N + self.D * self.T * self.N


def analytic_ops(family: str, E: int, D: int, N: int, T: int = 1) -> tuple[int, int]:
    cm = ComplexityModel(family=family, E=E, D=D, N=N, T=T)
    return cm.total_ops, cm.parallel_time


def empirical_ops(model: mdl.Model, N: int, T: int = 1,
                  seed: int = 0) -> dict[str, int]:
    """Measured MAC counts of one full decode at source/target length N.

    AR models run N forced greedy steps; bidirectional models run T
    mask-predict iterations at length candidate N. Returns the bucket
    breakdown plus aggregate encoder/decoder totals.
    """
    rng = np.random.default_rng(seed)
    src = rng.integers(4, model.config.vocab_size, size=N).tolist()
    counter = OpCounter()
    if model.config.decoder_mode == "causal":
        cfg = dec.DecodeConfig(strategy="greedy", max_len=N)
        dec.greedy_ar_batch(model, [src], cfg, counter=counter, forced_lengths=[N])
    else:
        cfg = dec.DecodeConfig(strategy="mask_predict", iterations=T,
                               length_beam=1, max_len=N)
        dec.length_beam_decode_batch(model, [src], cfg, "mask_predict",
                                     counter=counter, forced_lengths=[N])
    out = dict(counter.buckets)
    out["encoder"] = counter.bucket_total("encoder")
    out["decoder"] = counter.bucket_total("decoder")
    out["total"] = counter.mac_count
    return out


def fit_polynomial(ns: list[int], counts: list[int], degree: int = 2) -> tuple[np.ndarray, float]:
    """Least-squares polynomial fit; returns (coefficients, R^2)."""
    coeffs = np.polyfit(np.asarray(ns, float), np.asarray(counts, float), degree)
    pred = np.polyval(coeffs, ns)
    y = np.asarray(counts, float)
    ss_res = float(((y - pred) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return coeffs, r2


def spearman_rho(xs, ys) -> float:
    """Spearman rank correlation with average ranks for ties."""
    def ranks(v):
        v = np.asarray(v, float)
        order = np.argsort(v, kind="stable")
        r = np.empty(len(v))
        r[order] = np.arange(1, len(v) + 1)
        for val in np.unique(v):
            sel = v == val
            if sel.sum() > 1:
                r[sel] = r[sel].mean()
        return r
    rx, ry = ranks(xs), ranks(ys)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = math.sqrt(float((rx ** 2).sum()) * float((ry ** 2).sum()))
    return 0.0 if denom == 0 else float((rx * ry).sum()) / denom


# ---------------------------------------------------------------------------
# memory budget probe
# ---------------------------------------------------------------------------

def estimate_decode_bytes(cfg: mdl.ModelConfig, dcfg: dec.DecodeConfig,
                          src_len: int, batch: int) -> int:
    """Deterministic estimate of peak decode working memory in bytes.

    Counts the dominant live buffers (encoder states, caches or
    per-iteration activations, attention scores, logits) with a 1.5x
    allowance for transients; intentionally machine-independent so equal
    budgets give equal batch limits everywhere.
    """
    item = 8 if cfg.dtype == "float64" else 4
    d, f, h, v = cfg.d_model, cfg.d_ffn, cfg.heads, cfg.vocab_size
    L = min(src_len + 1, cfg.max_len + 1)
    if cfg.decoder_mode == "causal":
        rows = batch * (dcfg.beam_size if dcfg.strategy == "beam" else 1)
        enc = batch * src_len * d * 3
        caches = rows * cfg.D * 2 * (L + src_len) * d
        step = rows * (6 * d + f + v + h * L)
        total = enc + caches + step
    else:
        rows = batch * dcfg.length_beam
        enc = batch * src_len * d * 3
        acts = rows * L * (8 * d + 2 * f + v)
        scores = rows * h * L * (2 * L + src_len)
        total = enc + acts + scores
    return int(1.5 * total * item)


def probe_batch_limit(cfg: mdl.ModelConfig, dcfg: dec.DecodeConfig,
                      src_len: int, memory_budget_bytes: int,
                      hard_cap: int = 4096) -> int:
    """Largest batch within the budget: double until failure, then back off."""
    if estimate_decode_bytes(cfg, dcfg, src_len, 1) > memory_budget_bytes:
        raise ValueError("a single sentence exceeds the memory budget")
    lo = 1
    hi = None
    cur = 2
    while cur <= hard_cap:
        if estimate_decode_bytes(cfg, dcfg, src_len, cur) > memory_budget_bytes:
            hi = cur
            break
        lo = cur
        cur *= 2
    if hi is None:
        return min(lo, hard_cap)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if estimate_decode_bytes(cfg, dcfg, src_len, mid) > memory_budget_bytes:
            hi = mid
        else:
            lo = mid
    return lo


# ---------------------------------------------------------------------------
# timed protocols
# ---------------------------------------------------------------------------

def _decode_corpus(model: mdl.Model, dcfg: dec.DecodeConfig,
                   srcs: list[list[int]], batch: int,
                   force_target_length: bool) -> list[dec.DecodeOutput]:
    outs = []
    for start in range(0, len(srcs), batch):
        chunk = srcs[start:start + batch]
        forced = [len(s) for s in chunk] if force_target_length else None
        outs.extend(dec.translate_batch(model, chunk, dcfg, forced_lengths=forced))
    return outs


def measure_s1(model: mdl.Model, dcfg: dec.DecodeConfig, srcs: list[list[int]],
               repetitions: int = 3, warmup: int = 2,
               force_target_length: bool = True) -> float:
    """Median wall-clock seconds to translate the corpus one sentence at a time."""
    if not srcs:
        raise ValueError("empty corpus")
    _decode_corpus(model, dcfg, srcs[:warmup], 1, force_target_length)
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        _decode_corpus(model, dcfg, srcs, 1, force_target_length)
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def measure_smax(model: mdl.Model, dcfg: dec.DecodeConfig, srcs: list[list[int]],
                 memory_budget_bytes: int = 512 << 20, repetitions: int = 3,
                 warmup: int = 1, force_target_length: bool = True,
                 batch_limit: int | None = None) -> tuple[float, int]:
    """Median wall-clock seconds at the largest batch the budget allows.

    The corpus is sorted by length and packed into batches of at most
    batch_limit sentences (probed from the budget when not given).
    """
    if not srcs:
        raise ValueError("empty corpus")
    max_src = max(len(s) for s in srcs)
    if batch_limit is None:
        batch_limit = probe_batch_limit(model.config, dcfg, max_src,
                                        memory_budget_bytes)
    ordered = sorted(srcs, key=len)
    _decode_corpus(model, dcfg, ordered[:min(warmup * batch_limit, len(srcs))],
                   batch_limit, force_target_length)
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        _decode_corpus(model, dcfg, ordered, batch_limit, force_target_length)
        times.append(time.perf_counter() - t0)
    return statistics.median(times), batch_limit


def batch_sweep(entries: list[tuple[str, mdl.Model, dec.DecodeConfig]],
                srcs: list[list[int]], batch_sizes: list,
                baseline: str, memory_budget_bytes: int = 512 << 20,
                repetitions: int = 3,
                force_target_length: bool = True) -> dict[str, list[dict]]:
    """Relative-speedup-vs-baseline curves over ascending batch sizes.

    batch_sizes may end with "max", resolved per model from the budget.
    The speedup at each point is baseline_time / model_time at the same
    (possibly per-model) batch label.
    """
    ordered = sorted(srcs, key=len)
    names = [e[0] for e in entries]
    if baseline not in names:
        raise ValueError(f"baseline {baseline!r} not among entries")
    raw: dict[str, list[tuple]] = {}
    for name, model, dcfg in entries:
        pts = []
        for size in batch_sizes:
            if size == "max":
                bl = probe_batch_limit(model.config, dcfg,
                                       max(len(s) for s in srcs),
                                       memory_budget_bytes)
            else:
                bl = int(size)
            _decode_corpus(model, dcfg, ordered[:min(2 * bl, len(ordered))],
                           bl, force_target_length)
            times = []
            for _ in range(repetitions):
                t0 = time.perf_counter()
                _decode_corpus(model, dcfg, ordered, bl, force_target_length)
                times.append(time.perf_counter() - t0)
            pts.append((str(size), bl, statistics.median(times)))
        raw[name] = pts
    base = {label: secs for label, _, secs in raw[baseline]}
    curves: dict[str, list[dict]] = {}
    for name, pts in raw.items():
        curves[name] = [
            {"batch": label, "batch_resolved": bl, "seconds": secs,
             "speedup": base[label] / secs}
            for label, bl, secs in pts
        ]
    return curves


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class SpeedReport:
    model: str
    E: int
    D: int
    strategy: str
    T: int
    length_beam: int
    batch: int                       # resolved Smax batch limit
    s1_seconds: float
    smax_seconds: float
    speedup_s1: float
    speedup_smax: float
    seq_acc: float = float("nan")
    tok_acc: float = float("nan")
    batch_curve: list[dict] = field(default_factory=list)
    corpus_size: int = 0
    hardware: dict = field(default_factory=dict)


def run_speed_suite(entries: list[tuple[str, mdl.Model, dec.DecodeConfig]],
                    srcs: list[list[int]], baseline: str,
                    memory_budget_bytes: int = 512 << 20,
                    repetitions: int = 3, workers: int | None = None,
                    quality: dict[str, tuple[float, float]] | None = None,
                    force_target_length: bool = True) -> list[SpeedReport]:
    """S1 + Smax for every entry, speedups relative to the baseline entry."""
    names = [e[0] for e in entries]
    if baseline not in names:
        raise ValueError(f"baseline {baseline!r} not among entries")
    hw = hardware_descriptor(workers)
    results = {}
    with limit_workers(workers):
        for name, model, dcfg in entries:
            s1 = measure_s1(model, dcfg, srcs, repetitions,
                            force_target_length=force_target_length)
            smax, bl = measure_smax(model, dcfg, srcs, memory_budget_bytes,
                                    repetitions,
                                    force_target_length=force_target_length)
            results[name] = (s1, smax, bl)
    base_s1, base_smax, _ = results[baseline]
    reports = []
    for name, model, dcfg in entries:
        s1, smax, bl = results[name]
        q = (quality or {}).get(name, (float("nan"), float("nan")))
        reports.append(SpeedReport(
            model=name, E=model.config.E, D=model.config.D,
            strategy=dcfg.strategy,
            T=dcfg.iterations if dcfg.strategy in ("mask_predict", "easy_first") else 0,
            length_beam=dcfg.length_beam if dcfg.strategy in ("mask_predict", "easy_first") else 0,
            batch=bl, s1_seconds=s1, smax_seconds=smax,
            speedup_s1=base_s1 / s1, speedup_smax=base_smax / smax,
            seq_acc=q[0], tok_acc=q[1],
            corpus_size=len(srcs), hardware=hw,
        ))
    return reports


def emit_report(reports: list[SpeedReport], out_dir,
                config_hash: str = "") -> tuple[Path, Path]:
    """Write report.csv (one row per model) and report.json (plus curves)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "report.csv"
    json_path = out_dir / "report.json"

    buf = io.StringIO()
    if config_hash:
        buf.write(f"# config_hash={config_hash}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in reports:
        writer.writerow([
            r.model, r.E, r.D, r.strategy, r.T, r.length_beam, r.batch,
            repr(r.s1_seconds), repr(r.smax_seconds),
            repr(r.speedup_s1), repr(r.speedup_smax),
            repr(r.seq_acc), repr(r.tok_acc),
        ])
    csv_path.write_text(buf.getvalue(), encoding="utf-8")

    bundle = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "config_hash": config_hash,
        "hardware": reports[0].hardware if reports else {},
        "reports": [asdict(r) for r in reports],
    }
    json_path.write_text(json.dumps(bundle, indent=2, sort_keys=True) + "\n",
                         encoding="utf-8")
    return csv_path, json_path


def parse_report_csv(path) -> list[dict]:
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.DictReader(lines))
    for row in rows:
        for col in ("E", "D", "T", "length_beam", "batch"):
            row[col] = int(row[col])
        for col in ("s1_seconds", "smax_seconds", "speedup_s1",
                    "speedup_smax", "seq_acc", "tok_acc"):
            row[col] = float(row[col])
    return rows


def measure_quality(model: mdl.Model, dcfg: dec.DecodeConfig, pairs,
                    references=None) -> tuple[float, float]:
    res = evaluate(model, pairs, dcfg, references)
    return res.seq_acc, res.tok_acc
