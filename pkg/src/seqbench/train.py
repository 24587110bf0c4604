"""Training: label-smoothed losses, Adam with inverse-sqrt schedule,
checkpoint selection/averaging, and the sequence-level distillation step.

Three objectives share the model's forward code through the autodiff tape:
  loss_ar     teacher-forced causal cross-entropy
  loss_cmlm   cross-entropy on a uniformly sized random masked subset,
              plus the length-prediction loss
  loss_disco  cross-entropy at every position under independently sampled
              per-position observed subsets, plus the length loss

All randomness is drawn from generators derived from TrainConfig.seed, so
a run is bit-reproducible given (seed, config, data) on one worker.
"""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import decode as dec
from . import model as mdl
from .autodiff import Var, value_of
from .tasks import BOS_ID, EOS_ID, MASK_ID, PAD_ID, SeqPair

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr_peak: float = 5e-4
    warmup_updates: int = 4000         # paper-scale default; desk runs use ~400
    max_updates: int = 2000
    label_smoothing: float = 0.1
    dropout: float = 0.1               # applied when building the ModelConfig
    batch_tokens: int = 4096
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    length_loss_weight: float = 0.1
    seed: int = 0
    keep_checkpoints: int = 5
    dev_eval_cap: int = 256            # dev sentences decoded per epoch
    early_stop_seq_acc: float | None = None   # stop once dev seq acc reaches this

    def __post_init__(self):
        if self.warmup_updates < 1:
            raise ValueError("warmup_updates must be >= 1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must be in [0, 1)")


class TrainingDiverged(RuntimeError):
    pass


def lr_schedule(update: int, lr_peak: float, warmup: int) -> float:
    """Inverse square-root schedule: linear warmup, then sqrt decay."""
    return lr_peak * min(update / warmup, math.sqrt(warmup / update))


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    pairs: list[SeqPair]
    src: np.ndarray            # [B, Ls]
    tgt: np.ndarray            # [B, Lt] gold targets, PAD-filled
    tgt_lengths: np.ndarray    # [B]


def make_batch(pairs: list[SeqPair]) -> Batch:
    if any(len(p.tgt) == 0 for p in pairs):
        raise ValueError("empty target in batch")
    src, _ = dec.pad_batch([p.src for p in pairs])
    tgt, tlen = dec.pad_batch([p.tgt for p in pairs])
    return Batch(pairs=pairs, src=src, tgt=tgt, tgt_lengths=tlen)


def make_batches(pairs: list[SeqPair], batch_tokens: int,
                 rng: np.random.Generator, pool: int = 512) -> list[Batch]:
    """Shuffle, then length-sort within pools to limit padding waste."""
    idx = rng.permutation(len(pairs))
    ordered: list[int] = []
    for start in range(0, len(idx), pool):
        chunk = idx[start:start + pool]
        ordered.extend(sorted(chunk, key=lambda i: len(pairs[i].tgt)))
    batches = []
    cur: list[SeqPair] = []
    width = 0
    for i in ordered:
        p = pairs[i]
        w = max(len(p.src), len(p.tgt) + 1)
        new_width = max(width, w)
        if cur and new_width * (len(cur) + 1) > batch_tokens:
            batches.append(make_batch(cur))
            cur, width = [], 0
            new_width = w
        cur.append(p)
        width = new_width
    if cur:
        batches.append(make_batch(cur))
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


# ---------------------------------------------------------------------------
# loss graphs (shared by training and grad_check)
# ---------------------------------------------------------------------------

def _smoothed_ce(logits, labels: np.ndarray, weights: np.ndarray, smoothing: float):
    """(1-s) * NLL + s * mean NLL over the vocabulary, averaged by weights."""
    vocab = value_of(logits).shape[-1]
    ls = ad.log_softmax_lastdim(logits)
    nll = ad.mul(ad.take_along_last(ls, labels), -1.0)
    uniform = ad.mul(ad.sum_reduce(ls, axis=-1), -1.0 / vocab)
    per_tok = ad.add(ad.mul(nll, 1.0 - smoothing), ad.mul(uniform, smoothing))
    total = ad.sum_reduce(ad.mul(per_tok, weights))
    return ad.mul(total, 1.0 / float(weights.sum()))


def _plain_ce(logits, labels: np.ndarray):
    ls = ad.log_softmax_lastdim(logits)
    nll = ad.mul(ad.take_along_last(ls, labels), -1.0)
    return ad.mul(ad.sum_reduce(nll), 1.0 / labels.shape[0])


def ar_loss_graph(cfg: mdl.ModelConfig, params: dict, batch: Batch,
                  smoothing: float, dropout_rng=None):
    b, lt = batch.tgt.shape
    tgt_in = np.concatenate([np.full((b, 1), BOS_ID), batch.tgt], axis=1)
    tgt_in = np.where(tgt_in == PAD_ID, EOS_ID, tgt_in)     # pad slots are inert
    tgt_out = np.concatenate([batch.tgt, np.full((b, 1), PAD_ID)], axis=1)
    tgt_out[np.arange(b), batch.tgt_lengths] = EOS_ID
    weights = (tgt_out != PAD_ID).astype(cfg.np_dtype)
    logits = mdl.ar_logits(cfg, params, batch.src, tgt_in, dropout_rng=dropout_rng)
    return _smoothed_ce(logits, tgt_out, weights, smoothing)


def sample_cmlm_masks(rng: np.random.Generator, lengths: np.ndarray,
                      width: int, count_sampler=None) -> np.ndarray:
    """Per row: k masked positions, k ~ count_sampler (default Uniform{1..L})."""
    masks = np.zeros((len(lengths), width), dtype=bool)
    for i, ln in enumerate(lengths):
        ln = int(ln)
        k = int(count_sampler(rng, ln)) if count_sampler else int(rng.integers(1, ln + 1))
        if not 1 <= k <= ln:
            raise ValueError(f"mask count {k} outside 1..{ln}")
        masks[i, rng.choice(ln, size=k, replace=False)] = True
    return masks


def cmlm_loss_graph(cfg: mdl.ModelConfig, params: dict, batch: Batch,
                    masked: np.ndarray, smoothing: float,
                    length_loss_weight: float, dropout_rng=None):
    real = batch.tgt != PAD_ID
    tokens = np.where(masked, MASK_ID, batch.tgt)
    enc = mdl.encode(cfg, params, batch.src, dropout_rng=dropout_rng)
    logits = mdl.decode_full_nar(cfg, params, tokens, enc,
                                 dropout_rng=dropout_rng, tgt_mask=real)
    weights = masked.astype(cfg.np_dtype)
    tok_loss = _smoothed_ce(logits, batch.tgt, weights, smoothing)
    len_logits = mdl.length_logits(cfg, params, enc)
    len_loss = _plain_ce(len_logits, batch.tgt_lengths - 1)
    return ad.add(tok_loss, ad.mul(len_loss, length_loss_weight))


def sample_disco_subsets(rng: np.random.Generator, real: np.ndarray) -> np.ndarray:
    """allowed[b, i, j]: include each j != i with probability u_i ~ U[0,1]."""
    b, width = real.shape
    u = rng.random((b, width, 1))
    allowed = rng.random((b, width, width)) < u
    eye = np.eye(width, dtype=bool)[None]
    return allowed & ~eye & real[:, None, :] & real[:, :, None]


def disco_loss_graph(cfg: mdl.ModelConfig, params: dict, batch: Batch,
                     allowed: np.ndarray, smoothing: float,
                     length_loss_weight: float, dropout_rng=None):
    real = batch.tgt != PAD_ID
    enc = mdl.encode(cfg, params, batch.src, dropout_rng=dropout_rng)
    logits = mdl.disco_forward(cfg, params, batch.tgt, allowed, enc,
                               dropout_rng=dropout_rng, tgt_mask=real)
    weights = real.astype(cfg.np_dtype)
    tok_loss = _smoothed_ce(logits, batch.tgt, weights, smoothing)
    len_logits = mdl.length_logits(cfg, params, enc)
    len_loss = _plain_ce(len_logits, batch.tgt_lengths - 1)
    return ad.add(tok_loss, ad.mul(len_loss, length_loss_weight))


def _run_graph(params: dict, graph_fn) -> tuple[float, dict[str, np.ndarray]]:
    var_params = {k: Var(v) for k, v in params.items()}
    loss = graph_fn(var_params)
    loss.backward()
    grads = {
        k: (v.grad if v.grad is not None else np.zeros_like(v.value))
        for k, v in var_params.items()
    }
    return float(loss.value), grads


def loss_ar(model: mdl.Model, pairs: list[SeqPair], smoothing: float = 0.1,
            dropout_rng=None) -> tuple[float, dict[str, np.ndarray]]:
    batch = make_batch(pairs)
    return _run_graph(model.params, lambda p: ar_loss_graph(
        model.config, p, batch, smoothing, dropout_rng))


def loss_cmlm(model: mdl.Model, pairs: list[SeqPair],
              rng: np.random.Generator, smoothing: float = 0.1,
              length_loss_weight: float = 0.1, dropout_rng=None,
              count_sampler=None) -> tuple[float, dict[str, np.ndarray]]:
    batch = make_batch(pairs)
    masked = sample_cmlm_masks(rng, batch.tgt_lengths, batch.tgt.shape[1],
                               count_sampler)
    return _run_graph(model.params, lambda p: cmlm_loss_graph(
        model.config, p, batch, masked, smoothing, length_loss_weight, dropout_rng))


def loss_disco(model: mdl.Model, pairs: list[SeqPair],
               rng: np.random.Generator, smoothing: float = 0.1,
               length_loss_weight: float = 0.1,
               dropout_rng=None) -> tuple[float, dict[str, np.ndarray]]:
    batch = make_batch(pairs)
    allowed = sample_disco_subsets(rng, batch.tgt != PAD_ID)
    return _run_graph(model.params, lambda p: disco_loss_graph(
        model.config, p, batch, allowed, smoothing, length_loss_weight, dropout_rng))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class AdamState:
    def __init__(self, params: dict[str, np.ndarray]):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr: float, beta1: float, beta2: float, eps: float) -> None:
        self.t += 1
        bc1 = 1.0 - beta1 ** self.t
        bc2 = 1.0 - beta2 ** self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * (g * g)
            params[k] -= (lr / bc1) * m / (np.sqrt(v / bc2) + eps)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so the global L2 norm is at most max_norm."""
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum())
                          for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    seq_acc: float
    tok_acc: float
    n: int


def evaluate(model: mdl.Model, pairs: list[SeqPair], decode_cfg: dec.DecodeConfig,
             references: list[list[list[int]]] | None = None,
             batch_size: int = 64) -> EvalResult:
    """Sequence/token accuracy of decoded hypotheses.

    references[i] lists every acceptable target for pairs[i] (defaults to
    the gold target); a hypothesis is counted correct if it matches any of
    them, and token accuracy is scored against the best-matching reference.
    """
    if references is None:
        references = [[p.tgt] for p in pairs]
    seq_hits = 0
    tok_sum = 0.0
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        outs = dec.translate_batch(model, [p.src for p in chunk], decode_cfg)
        for off, out in enumerate(outs):
            refs = references[start + off]
            best = 0.0
            hit = False
            for ref in refs:
                if out.tokens == ref:
                    hit = True
                matches = sum(1 for a, b in zip(out.tokens, ref) if a == b)
                best = max(best, matches / max(len(out.tokens), len(ref), 1))
            seq_hits += int(hit)
            tok_sum += best
    n = len(pairs)
    return EvalResult(seq_acc=seq_hits / n, tok_acc=tok_sum / n, n=n)


def default_dev_decode(cfg: mdl.ModelConfig, max_len: int | None = None) -> dec.DecodeConfig:
    max_len = max_len or cfg.max_len
    if cfg.decoder_mode == "causal":
        return dec.DecodeConfig(strategy="greedy", max_len=max_len)
    return dec.DecodeConfig(strategy="mask_predict", iterations=4,
                            length_beam=1, max_len=max_len)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: mdl.ModelConfig
    update: int
    dev_metric: float


@dataclass
class TrainResult:
    checkpoints: list[Checkpoint]      # best first
    history: list[dict]
    updates: int


def train(model: mdl.Model, train_pairs: list[SeqPair], cfg: TrainConfig,
          dev_pairs: list[SeqPair], objective: str = "ar",
          dev_decode: dec.DecodeConfig | None = None,
          dev_references: list[list[list[int]]] | None = None,
          log_every: int = 200) -> TrainResult:
    """Optimize in place; returns the best dev checkpoints plus history."""
    if not train_pairs:
        raise ValueError("empty training set")
    if objective not in ("ar", "cmlm", "disco"):
        raise ValueError(f"unknown objective {objective!r}")
    if objective == "ar" and model.config.decoder_mode != "causal":
        raise ValueError("ar objective needs a causal decoder")
    if objective != "ar" and model.config.decoder_mode != "bidirectional":
        raise ValueError(f"{objective} objective needs a bidirectional decoder")

    rng_data = np.random.default_rng(np.random.SeedSequence((cfg.seed, 11)))
    rng_obj = np.random.default_rng(np.random.SeedSequence((cfg.seed, 12)))
    rng_drop = np.random.default_rng(np.random.SeedSequence((cfg.seed, 13)))
    dev_decode = dev_decode or default_dev_decode(model.config)
    dev_slice = dev_pairs[: cfg.dev_eval_cap]
    dev_refs = dev_references[: cfg.dev_eval_cap] if dev_references else None

    adam = AdamState(model.params)
    checkpoints: list[Checkpoint] = []
    history: list[dict] = []
    update = 0
    epoch = 0
    running = 0.0
    t_start = time.perf_counter()

    def graph(params, batch):
        drop = rng_drop if model.config.dropout > 0 else None
        if objective == "ar":
            return ar_loss_graph(model.config, params, batch,
                                 cfg.label_smoothing, drop)
        if objective == "cmlm":
            masked = sample_cmlm_masks(rng_obj, batch.tgt_lengths, batch.tgt.shape[1])
            return cmlm_loss_graph(model.config, params, batch, masked,
                                   cfg.label_smoothing, cfg.length_loss_weight, drop)
        allowed = sample_disco_subsets(rng_obj, batch.tgt != PAD_ID)
        return disco_loss_graph(model.config, params, batch, allowed,
                                cfg.label_smoothing, cfg.length_loss_weight, drop)

    def eval_and_checkpoint() -> float:
        res = evaluate(model, dev_slice, dev_decode, dev_refs)
        checkpoints.append(Checkpoint(
            params={k: v.copy() for k, v in model.params.items()},
            config=model.config, update=update, dev_metric=res.seq_acc))
        checkpoints.sort(key=lambda c: (-c.dev_metric, -c.update))
        del checkpoints[cfg.keep_checkpoints:]
        history.append({"update": update, "epoch": epoch,
                        "dev_seq_acc": res.seq_acc, "dev_tok_acc": res.tok_acc,
                        "train_loss": running,
                        "elapsed": time.perf_counter() - t_start})
        logger.info("update %d epoch %d loss %.4f dev_seq_acc %.4f",
                    update, epoch, running, res.seq_acc)
        return res.seq_acc

    stop = False
    while update < cfg.max_updates and not stop:
        epoch += 1
        for batch in make_batches(train_pairs, cfg.batch_tokens, rng_data):
            update += 1
            lr = lr_schedule(update, cfg.lr_peak, cfg.warmup_updates)
            loss_val, grads = _run_graph(model.params, lambda p: graph(p, batch))
            if not math.isfinite(loss_val):
                raise TrainingDiverged(
                    f"non-finite loss {loss_val} at update {update} "
                    f"(lr {lr:.2e}, batch of {len(batch.pairs)})")
            clip_gradients(grads, cfg.clip_norm)
            adam.step(model.params, grads, lr,
                      cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
            running = 0.9 * running + 0.1 * loss_val if update > 1 else loss_val
            if log_every and update % log_every == 0:
                logger.info("update %d loss %.4f lr %.2e", update, loss_val, lr)
            if update >= cfg.max_updates:
                break
        acc = eval_and_checkpoint()
        if cfg.early_stop_seq_acc is not None and acc >= cfg.early_stop_seq_acc:
            stop = True
    return TrainResult(checkpoints=checkpoints, history=history, updates=update)


def average_checkpoints(checkpoints: list[Checkpoint]) -> dict[str, np.ndarray]:
    """Elementwise mean of checkpoint params (anchored so identical inputs
    return bit-identical params)."""
    if not checkpoints:
        raise ValueError("no checkpoints to average")
    first = checkpoints[0]
    for c in checkpoints[1:]:
        if c.config != first.config:
            raise ValueError("checkpoint config mismatch")
        if set(c.params) != set(first.params):
            raise ValueError("checkpoint parameter names mismatch")
    n = len(checkpoints)
    out = {}
    for k, base in first.params.items():
        acc = np.zeros_like(base, dtype=np.float64)
        for c in checkpoints[1:]:
            acc += c.params[k].astype(np.float64) - base.astype(np.float64)
        out[k] = (base.astype(np.float64) + acc / n).astype(base.dtype)
    return out


# ---------------------------------------------------------------------------
# sequence-level distillation
# ---------------------------------------------------------------------------

def distill_generate(teacher: mdl.Model, pairs: list[SeqPair],
                     decode_cfg: dec.DecodeConfig | None = None,
                     batch_size: int = 48) -> list[SeqPair]:
    """Replace every target with the teacher's beam output (source unchanged).

    Outputs keep the input order, so the distilled corpus lines up with the
    source corpus one-to-one.
    """
    if teacher.config.decoder_mode != "causal":
        raise ValueError("distillation teacher must be an AR (causal) model")
    decode_cfg = decode_cfg or dec.DecodeConfig(
        strategy="beam", beam_size=5, length_penalty=1.0,
        max_len=teacher.config.max_len)
    out: list[SeqPair] = []
    empties = 0
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        hyps = dec.translate_batch(teacher, [p.src for p in chunk], decode_cfg)
        for p, h in zip(chunk, hyps):
            if not h.tokens:
                empties += 1
            out.append(SeqPair(src=list(p.src), tgt=list(h.tokens)))
    if empties:
        logger.warning("distill_generate: teacher emitted %d empty targets", empties)
    return out
