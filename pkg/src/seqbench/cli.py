"""Command-line entry point: gen-data, train, distill, translate, bench,
count-ops, report.

One YAML config file drives everything; flags win over config values. Every
run writes its artifacts under a fresh directory named by timestamp plus
config hash, refuses to reuse an existing one, and logs the resolved config
verbatim. Exit codes: 0 success, 2 config/schema violation (with the field
path), 1 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import bench as bn
from . import decode as dec
from . import model as mdl
from . import pipeline as pl
from . import tasks as tk
from . import train as tr

logger = logging.getLogger("seqbench")

CONFIG_VERSION = 1


class ConfigError(Exception):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class BenchModelSpec:
    name: str
    E: int
    D: int
    strategy: str = "beam"
    T: int = 10
    length_beam: int = 5
    beam_size: int = 5
    checkpoint: str | None = None


@dataclass(frozen=True)
class BenchConfig:
    models: tuple = ()
    baseline: str = "ar-6-6"
    batch_sizes: tuple = (1, 8, 50, "max")
    repetitions: int = 3
    memory_budget_mb: int = 512
    workers: int | None = None
    n_sentences: int = 1000
    force_target_length: bool = True
    sweep: bool = False


@dataclass(frozen=True)
class PathsConfig:
    out_dir: str = "runs"
    data_dir: str = "data"


@dataclass
class RunConfig:
    version: int
    seed: int = 0
    model: mdl.ModelConfig | None = None
    train: tr.TrainConfig | None = None
    decode: dec.DecodeConfig | None = None
    task: tk.TaskSpec | None = None
    bench: BenchConfig | None = None
    paths: PathsConfig = field(default_factory=PathsConfig)


_SECTION_TYPES = {
    "model": mdl.ModelConfig,
    "train": tr.TrainConfig,
    "decode": dec.DecodeConfig,
    "task": tk.TaskSpec,
    "bench": BenchConfig,
    "paths": PathsConfig,
}


def _build_dataclass(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected a mapping for {cls.__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{path}.{key}", "unknown key")
    kwargs = dict(data)
    if cls is BenchConfig and "models" in kwargs:
        specs = []
        for i, item in enumerate(kwargs["models"]):
            specs.append(_build_dataclass(BenchModelSpec, item,
                                          f"{path}.models[{i}]"))
        kwargs["models"] = tuple(specs)
    if cls is BenchConfig and "batch_sizes" in kwargs:
        kwargs["batch_sizes"] = tuple(kwargs["batch_sizes"])
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from None


def load_config(path, overrides: list[str] | None = None) -> RunConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(str(path), "config file not found") from None
    except yaml.YAMLError as exc:
        raise ConfigError(str(path), f"invalid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(str(path), "top level must be a mapping")
    for key, value in _parse_overrides(overrides or []):
        node = raw
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(key, "override path crosses a non-mapping")
        node[parts[-1]] = value

    if "version" not in raw:
        raise ConfigError("version", "missing required key")
    if raw["version"] != CONFIG_VERSION:
        raise ConfigError("version", f"expected {CONFIG_VERSION}, got {raw['version']}")
    known = {"version", "seed"} | set(_SECTION_TYPES)
    for key in raw:
        if key not in known:
            raise ConfigError(key, "unknown section")
    cfg = RunConfig(version=raw["version"], seed=int(raw.get("seed", 0)))
    for name, cls in _SECTION_TYPES.items():
        if name in raw:
            setattr(cfg, name, _build_dataclass(cls, raw[name], name))
    return cfg


def _parse_overrides(pairs: list[str]):
    for item in pairs:
        if "=" not in item:
            raise ConfigError(item, "override must look like section.key=value")
        key, _, value = item.partition("=")
        yield key.strip(), yaml.safe_load(value)


def config_hash(cfg: RunConfig) -> str:
    def encode(obj):
        if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
            return {f.name: encode(getattr(obj, f.name))
                    for f in dataclasses.fields(obj)}
        if isinstance(obj, (tuple, list)):
            return [encode(x) for x in obj]
        return obj
    blob = json.dumps(encode(cfg), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


def make_run_dir(cfg: RunConfig) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S", time.gmtime())
    h = config_hash(cfg)
    run_dir = Path(cfg.paths.out_dir) / f"{stamp}__{h}"
    if run_dir.exists():
        raise FileExistsError(f"run directory {run_dir} already exists; refusing to overwrite")
    run_dir.mkdir(parents=True)
    resolved = yaml.safe_dump(json.loads(json.dumps(
        {"config_hash": h, **_as_plain(cfg)})), sort_keys=True)
    (run_dir / "resolved_config.yaml").write_text(resolved, encoding="utf-8")
    logger.info("run directory %s", run_dir)
    logger.info("resolved config:\n%s", resolved)
    return run_dir


def _as_plain(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _as_plain(getattr(obj, f.name))
                for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_as_plain(x) for x in obj]
    return obj


def _require(cfg: RunConfig, *sections: str):
    for s in sections:
        if getattr(cfg, s) is None:
            raise ConfigError(s, "required section missing for this command")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, args) -> int:
    _require(cfg, "task")
    spec = dataclasses.replace(cfg.task, seed=cfg.seed if args.seed is not None else cfg.task.seed)
    data_dir = Path(cfg.paths.data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    ds = tk.gen_dataset(spec, n_train=args.n_train, n_dev=args.n_dev,
                        n_test=args.n_test)
    for split, pairs in (("train", ds.train), ("dev", ds.dev), ("test", ds.test)):
        path = data_dir / f"{split}.tsv"
        tk.write_corpus(path, pairs)
        logger.info("%s: %d pairs -> %s", split, len(pairs), path)
    meta = {"config_hash": config_hash(cfg), "task": _as_plain(spec),
            "sizes": {"train": len(ds.train), "dev": len(ds.dev), "test": len(ds.test)}}
    (data_dir / "task.json").write_text(json.dumps(meta, indent=2, sort_keys=True),
                                        encoding="utf-8")
    return 0


def _load_split(cfg: RunConfig, name: str, override: str | None = None) -> list[tk.SeqPair]:
    path = Path(override) if override else Path(cfg.paths.data_dir) / f"{name}.tsv"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run gen-data first")
    vocab = cfg.model.vocab_size if cfg.model else None
    return tk.read_corpus(path, vocab_size=vocab)


def cmd_train(cfg: RunConfig, args) -> int:
    _require(cfg, "model", "train")
    run_dir = make_run_dir(cfg)
    train_pairs = _load_split(cfg, "train", args.train_data)
    dev_pairs = _load_split(cfg, "dev")
    objective = args.objective or (
        "ar" if cfg.model.decoder_mode == "causal" else "cmlm")
    train_cfg = dataclasses.replace(cfg.train, seed=cfg.seed)
    model_cfg = dataclasses.replace(cfg.model, dropout=cfg.train.dropout)
    model, result = pl.train_and_average(
        model_cfg, train_cfg, train_pairs, dev_pairs, objective,
        init_seed=cfg.seed)
    final_path = run_dir / "final.ckpt"
    mdl.save_checkpoint(final_path, model.config, model.params,
                        extra={"config_hash": config_hash(cfg),
                               "updates": result.updates,
                               "objective": objective})
    for i, ck in enumerate(result.checkpoints):
        mdl.save_checkpoint(run_dir / f"best{i}.ckpt", ck.config, ck.params,
                            extra={"config_hash": config_hash(cfg),
                                   "update": ck.update,
                                   "dev_metric": ck.dev_metric})
    (run_dir / "metrics.json").write_text(
        json.dumps({"config_hash": config_hash(cfg), "history": result.history},
                   indent=2, sort_keys=True), encoding="utf-8")
    logger.info("final checkpoint: %s", final_path)
    return 0


def cmd_distill(cfg: RunConfig, args) -> int:
    _require(cfg, "model")
    run_dir = make_run_dir(cfg)
    tcfg, params, _ = mdl.load_checkpoint(args.teacher)
    teacher = mdl.Model(config=tcfg, params=params)
    pairs = _load_split(cfg, "train", args.train_data)
    decode_cfg = cfg.decode or dec.DecodeConfig(
        strategy="beam", beam_size=5, length_penalty=1.0, max_len=tcfg.max_len)
    distilled = tr.distill_generate(teacher, pairs, decode_cfg)
    out_path = run_dir / "distilled.tsv"
    tk.write_corpus(out_path, distilled)
    logger.info("wrote %d distilled pairs -> %s", len(distilled), out_path)
    return 0


def _read_token_lines(path) -> list[list[int]]:
    text = sys.stdin.read() if path == "-" else Path(path).read_text(encoding="utf-8")
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            out.append([int(t) for t in line.split()])
        except ValueError:
            raise ValueError(f"input line {lineno}: non-integer token") from None
    return out


def cmd_translate(cfg: RunConfig, args) -> int:
    tcfg, params, _ = mdl.load_checkpoint(args.checkpoint)
    model = mdl.Model(config=tcfg, params=params)
    decode_cfg = cfg.decode or dec.DecodeConfig(max_len=tcfg.max_len)
    updates = {}
    for name in ("strategy", "beam_size", "length_penalty", "iterations",
                 "length_beam", "max_len", "min_len"):
        val = getattr(args, name)
        if val is not None:
            updates[name] = val
    if updates:
        decode_cfg = dataclasses.replace(decode_cfg, **updates)
    srcs = _read_token_lines(args.input)
    outs = dec.translate_batch(model, srcs, decode_cfg)
    lines = [" ".join(str(t) for t in o.tokens) for o in outs]
    payload = "\n".join(lines) + ("\n" if lines else "")
    if args.output == "-":
        sys.stdout.write(payload)
    else:
        Path(args.output).write_text(payload, encoding="utf-8")
    return 0


def _bench_entries(cfg: RunConfig, seed: int):
    base = cfg.model or pl.desk_speed_base()
    specs = cfg.bench.models or (
        BenchModelSpec(name="ar-6-6", E=6, D=6, strategy="beam"),
        BenchModelSpec(name="ar-12-1", E=12, D=1, strategy="beam"),
        BenchModelSpec(name="cmlm-6-6-t4", E=6, D=6, strategy="mask_predict", T=4),
        BenchModelSpec(name="cmlm-6-6-t10", E=6, D=6, strategy="mask_predict", T=10),
        BenchModelSpec(name="disco-6-6-t10", E=6, D=6, strategy="easy_first", T=10),
    )
    entries = []
    for s in specs:
        params = None
        if s.checkpoint:
            ccfg, params, _ = mdl.load_checkpoint(s.checkpoint)
        entries.append(pl.speed_entry(
            s.name, base, s.E, s.D, s.strategy, T=s.T,
            length_beam=s.length_beam, beam_size=s.beam_size,
            seed=seed, params=params))
    return entries


def cmd_bench(cfg: RunConfig, args) -> int:
    _require(cfg, "bench")
    run_dir = make_run_dir(cfg)
    b = cfg.bench
    if args.corpus:
        srcs = [p.src for p in tk.read_corpus(args.corpus)]
    else:
        base = cfg.model or pl.desk_speed_base()
        lo, hi = (cfg.task.length_min, cfg.task.length_max) if cfg.task else (8, 32)
        hi = min(hi, base.max_len)
        srcs = pl.bench_corpus(b.n_sentences, min(lo, hi), hi,
                               vocab_size=base.vocab_size, seed=cfg.seed)
    entries = _bench_entries(cfg, cfg.seed)
    reports = bn.run_speed_suite(
        entries, srcs, baseline=b.baseline,
        memory_budget_bytes=b.memory_budget_mb << 20,
        repetitions=b.repetitions, workers=b.workers,
        force_target_length=b.force_target_length)
    if b.sweep:
        curves = bn.batch_sweep(entries, srcs, list(b.batch_sizes), b.baseline,
                                memory_budget_bytes=b.memory_budget_mb << 20,
                                repetitions=b.repetitions,
                                force_target_length=b.force_target_length)
        for r in reports:
            r.batch_curve = curves.get(r.model, [])
    csv_path, json_path = bn.emit_report(reports, run_dir,
                                         config_hash=config_hash(cfg))
    logger.info("wrote %s and %s", csv_path, json_path)
    return 0


def cmd_count_ops(cfg: RunConfig, args) -> int:
    _require(cfg, "model")
    run_dir = make_run_dir(cfg)
    lengths = [int(x) for x in args.lengths.split(",")]
    rows = []
    base = cfg.model
    family = "AR" if base.decoder_mode == "causal" else "NAR"
    model = mdl.Model.create(base, seed=cfg.seed)
    for n in lengths:
        counted = bn.empirical_ops(model, n, T=args.iterations)
        ops, ptime = bn.analytic_ops(family, base.E, base.D, n,
                                     args.iterations if family == "NAR" else 1)
        rows.append({"N": n, "analytic_ops": ops, "analytic_time": ptime,
                     **{f"mac_{k}": v for k, v in sorted(counted.items())}})
    out = run_dir / "ops.json"
    out.write_text(json.dumps({"config_hash": config_hash(cfg), "rows": rows},
                              indent=2, sort_keys=True), encoding="utf-8")
    for row in rows:
        logger.info("N=%d analytic_ops=%d measured_total=%d",
                    row["N"], row["analytic_ops"], row["mac_total"])
    logger.info("wrote %s", out)
    return 0


def cmd_report(cfg: RunConfig, args) -> int:
    run_dir = make_run_dir(cfg)
    reports = []
    for path in args.inputs:
        bundle = json.loads(Path(path).read_text(encoding="utf-8"))
        for rd in bundle["reports"]:
            reports.append(bn.SpeedReport(**rd))
    csv_path, json_path = bn.emit_report(reports, run_dir,
                                         config_hash=config_hash(cfg))
    logger.info("merged %d reports -> %s", len(reports), csv_path)
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="seqbench",
        description="Transformer seq2seq engine and decoding speed benchmark")
    p.add_argument("--config", "-c", required=True, help="YAML run config")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--override", "-o", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="config override (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate task corpora")
    g.add_argument("--n-train", type=int, default=50_000)
    g.add_argument("--n-dev", type=int, default=1000)
    g.add_argument("--n-test", type=int, default=1000)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--objective", choices=["ar", "cmlm", "disco"], default=None)
    t.add_argument("--train-data", default=None,
                   help="override the training corpus path (e.g. distilled data)")

    d = sub.add_parser("distill", help="teacher-decode a corpus")
    d.add_argument("--teacher", required=True, help="teacher checkpoint path")
    d.add_argument("--train-data", default=None)

    tl = sub.add_parser("translate", help="decode token-id lines")
    tl.add_argument("--checkpoint", required=True)
    tl.add_argument("--input", default="-")
    tl.add_argument("--output", default="-")
    tl.add_argument("--strategy",
                    choices=["greedy", "beam", "mask_predict", "easy_first"],
                    default=None)
    tl.add_argument("--beam-size", dest="beam_size", type=int, default=None)
    tl.add_argument("--length-penalty", dest="length_penalty", type=float,
                    default=None)
    tl.add_argument("--iterations", type=int, default=None)
    tl.add_argument("--length-beam", dest="length_beam", type=int, default=None)
    tl.add_argument("--max-len", dest="max_len", type=int, default=None)
    tl.add_argument("--min-len", dest="min_len", type=int, default=None)

    b = sub.add_parser("bench", help="run the speed suite")
    b.add_argument("--corpus", default=None, help="corpus file (else synthetic)")

    c = sub.add_parser("count-ops", help="analytic vs measured operation counts")
    c.add_argument("--lengths", default="8,16,32")
    c.add_argument("--iterations", type=int, default=1)

    r = sub.add_parser("report", help="merge bench JSON bundles")
    r.add_argument("inputs", nargs="+")
    return p


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "distill": cmd_distill,
    "translate": cmd_translate,
    "bench": cmd_bench,
    "count-ops": cmd_count_ops,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(asctime)s %(name)s %(message)s",
                        datefmt="%H:%M:%S", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.override)
        if args.seed is not None:
            cfg.seed = args.seed
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        return _COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:       # runtime failure -> exit 1 with diagnostic
        logger.exception("run failed: %s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
