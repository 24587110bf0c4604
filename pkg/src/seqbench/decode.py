"""Inference strategies: greedy, beam search, mask-predict, easy-first.

AR strategies run on the cached incremental decoder; the batch variants
flatten (sentence, beam) pairs into one decode stream batch. NAR strategies
run over a batch of (sentence, length-candidate) rows. Everything is
deterministic given (weights, input, config): ties in beam candidates break
by token id, ties in confidence break by position (leftmost counts as more
confident), ties in candidate score break toward the shorter length.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import model as mdl
from .autodiff import value_of
from .counting import OpCounter
from .tasks import BOS_ID, EOS_ID, MASK_ID, PAD_ID, NUM_RESERVED


@dataclass(frozen=True)
class DecodeConfig:
    strategy: str = "beam"             # greedy | beam | mask_predict | easy_first
    beam_size: int = 5
    length_penalty: float = 1.0        # finished score = logprob_sum / length**alpha
    iterations: int = 10               # T, max refinement iterations (NAR)
    length_beam: int = 5
    max_len: int = 64
    min_len: int = 0                   # EOS banned before this many output tokens

    def __post_init__(self):
        if self.strategy not in ("greedy", "beam", "mask_predict", "easy_first"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.beam_size < 1 or self.iterations < 1 or self.length_beam < 1:
            raise ValueError("beam_size, iterations and length_beam must be >= 1")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")


@dataclass
class DecodeOutput:
    tokens: list[int]
    scores: list[float]                     # per-token log-probabilities
    steps_used: int | None = None           # AR decoder step calls
    iterations_used: int | None = None      # NAR refinement passes
    wall_clock_seconds: float = 0.0


@dataclass
class BeamHypothesis:
    tokens: list[int]
    log_prob: float
    finished: bool = False
    step_scores: list[float] = field(default_factory=list)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    s = x - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


_AR_BANNED = [PAD_ID, BOS_ID, MASK_ID]
_NAR_BANNED = list(range(NUM_RESERVED))


class _ModelStepper:
    """Cached AR stepping over a flat batch of decode streams."""

    def __init__(self, model: mdl.Model, enc: mdl.EncoderOut, rows: np.ndarray,
                 max_steps: int, counter: OpCounter | None = None):
        self.model = model
        self.counter = counter
        self.enc = mdl.EncoderOut(states=value_of(enc.states)[rows],
                                  src_mask=enc.src_mask[rows])
        self.state = model.init_incremental_state(self.enc, max_steps, counter)
        self.vocab_size = model.config.vocab_size

    def step(self, prev_tokens: np.ndarray) -> np.ndarray:
        logits, self.state = self.model.decode_step_ar(
            prev_tokens, self.state, self.enc, self.counter)
        return _log_softmax(logits)

    def reorder(self, idx: np.ndarray) -> None:
        self.state.reorder(idx)


# ---------------------------------------------------------------------------
# autoregressive strategies
# ---------------------------------------------------------------------------

def _resolve_bounds(cfg: DecodeConfig, n: int,
                    forced_lengths) -> tuple[np.ndarray, np.ndarray]:
    if forced_lengths is not None:
        forced = np.minimum(np.asarray(forced_lengths, dtype=int), cfg.max_len)
        return forced.copy(), forced.copy()
    return (np.full(n, cfg.min_len, dtype=int),
            np.full(n, cfg.max_len, dtype=int))


def greedy_ar_batch(model: mdl.Model, srcs: list[list[int]], cfg: DecodeConfig,
                    counter: OpCounter | None = None,
                    forced_lengths=None) -> list[DecodeOutput]:
    """Argmax decoding with the incremental cache, one stream per sentence."""
    t0 = time.perf_counter()
    n = len(srcs)
    min_len, max_len = _resolve_bounds(cfg, n, forced_lengths)
    src_ids, _ = pad_batch(srcs)
    enc = model.encode(src_ids, counter=counter)
    stepper = _ModelStepper(model, enc, np.arange(n), int(max_len.max()) + 1, counter)

    prev = np.full(n, BOS_ID, dtype=int)
    done = np.zeros(n, dtype=bool)
    tokens: list[list[int]] = [[] for _ in range(n)]
    scores: list[list[float]] = [[] for _ in range(n)]
    steps = np.zeros(n, dtype=int)
    t = 0
    while not done.all():
        lp = stepper.step(prev)
        lp[:, _AR_BANNED] = -np.inf
        lp[t < min_len, EOS_ID] = -np.inf
        force = (t >= max_len) & ~done
        pick = lp.argmax(axis=1)
        pick[force] = EOS_ID
        for i in range(n):
            if done[i]:
                continue
            steps[i] = t + 1
            if pick[i] == EOS_ID:
                done[i] = True
            else:
                tokens[i].append(int(pick[i]))
                scores[i].append(float(lp[i, pick[i]]))
        prev = np.where(done, EOS_ID, pick)
        t += 1
    per = (time.perf_counter() - t0) / n
    return [DecodeOutput(tokens=tokens[i], scores=scores[i],
                         steps_used=int(steps[i]), wall_clock_seconds=per)
            for i in range(n)]


def greedy_ar(model: mdl.Model, src: list[int], cfg: DecodeConfig,
              counter: OpCounter | None = None) -> DecodeOutput:
    return greedy_ar_batch(model, [src], cfg, counter)[0]


def beam_search_steps(stepper, n_sentences: int, cfg: DecodeConfig,
                      min_len: np.ndarray, max_len: np.ndarray) -> list[BeamHypothesis]:
    """Beam search over any stepper exposing step()/reorder()/vocab_size.

    The stepper must start with n_sentences * beam_size rows. Every EOS
    continuation is recorded as a finished hypothesis scored by
    sum_logprob / emitted_length**alpha (emitted length includes EOS), so a
    beam at least as wide as the full expansion enumerates exactly.
    """
    b, alpha = cfg.beam_size, cfg.length_penalty
    vocab = stepper.vocab_size
    n_active = n_sentences
    sent_of = np.arange(n_sentences)
    scores = np.full((n_sentences, b), -np.inf)
    scores[:, 0] = 0.0
    tokens = np.zeros((n_sentences, b, 0), dtype=int)
    stepsc = np.zeros((n_sentences, b, 0))
    prev = np.full(n_sentences * b, BOS_ID, dtype=int)
    finished: list[list[tuple[float, tuple, tuple]]] = [[] for _ in range(n_sentences)]

    t = 0
    while n_active > 0:
        lp = stepper.step(prev).reshape(n_active, b, vocab)
        lp[:, :, _AR_BANNED] = -np.inf
        cur_min = min_len[sent_of]
        cur_max = max_len[sent_of]
        lp[t < cur_min, :, EOS_ID] = -np.inf
        forced = t >= cur_max
        if forced.any():
            keep_eos = lp[forced][:, :, EOS_ID].copy()
            lp[forced] = -np.inf
            lp[forced, :, EOS_ID] = np.where(np.isfinite(keep_eos), keep_eos, -1e30)
        cand = scores[:, :, None] + lp

        new_scores = np.full((n_active, b), -np.inf)
        new_back = np.zeros((n_active, b), dtype=int)
        new_tok = np.zeros((n_active, b), dtype=int)
        tok_ids = np.tile(np.arange(vocab), b)
        beam_ids = np.repeat(np.arange(b), vocab)
        survivors = []
        for s in range(n_active):
            sid = sent_of[s]
            flat = cand[s].reshape(-1)
            order = np.lexsort((beam_ids, tok_ids, -flat))
            k = 0
            for rank, ci in enumerate(order[: 2 * b]):
                if not np.isfinite(flat[ci]):
                    break
                tok = tok_ids[ci]
                if tok == EOS_ID:
                    if rank < b:    # EOS finalizes only from the top-b candidates
                        norm = flat[ci] / ((t + 1) ** alpha)
                        bm = beam_ids[ci]
                        finished[sid].append((
                            float(norm),
                            tuple(tokens[s, bm].tolist()),
                            tuple(stepsc[s, bm].tolist()),
                        ))
                elif k < b:
                    new_scores[s, k] = flat[ci]
                    new_back[s, k] = beam_ids[ci]
                    new_tok[s, k] = tok
                    k += 1
            if k > 0 and len(finished[sid]) < b:
                survivors.append(s)
        if not survivors:
            break
        surv = np.array(survivors, dtype=int)
        rows = (surv[:, None] * b + new_back[surv]).reshape(-1)
        stepper.reorder(rows)
        prev_cum = np.take_along_axis(scores[surv], new_back[surv], axis=1)
        with np.errstate(invalid="ignore"):
            step_lp = new_scores[surv] - prev_cum
        step_lp = np.where(np.isfinite(step_lp), step_lp, 0.0)
        tokens = np.concatenate(
            [tokens[surv[:, None], new_back[surv]], new_tok[surv][:, :, None]], axis=2)
        stepsc = np.concatenate(
            [stepsc[surv[:, None], new_back[surv]], step_lp[:, :, None]], axis=2)
        scores = new_scores[surv]
        sent_of = sent_of[surv]
        n_active = len(surv)
        prev = new_tok[surv].reshape(-1)
        t += 1

    results = []
    for sid in range(n_sentences):
        if not finished[sid]:
            raise RuntimeError("beam search produced no finished hypothesis")
        best = sorted(finished[sid], key=lambda h: (-h[0], len(h[1]), h[1]))[0]
        results.append(BeamHypothesis(tokens=list(best[1]), log_prob=best[0],
                                      finished=True, step_scores=list(best[2])))
    return results


def beam_search_batch(model: mdl.Model, srcs: list[list[int]], cfg: DecodeConfig,
                      counter: OpCounter | None = None,
                      forced_lengths=None) -> list[DecodeOutput]:
    t0 = time.perf_counter()
    n = len(srcs)
    min_len, max_len = _resolve_bounds(cfg, n, forced_lengths)
    src_ids, _ = pad_batch(srcs)
    enc = model.encode(src_ids, counter=counter)
    rows = np.repeat(np.arange(n), cfg.beam_size)
    stepper = _ModelStepper(model, enc, rows, int(max_len.max()) + 1, counter)
    hyps = beam_search_steps(stepper, n, cfg, min_len, max_len)
    per = (time.perf_counter() - t0) / n
    return [DecodeOutput(tokens=h.tokens, scores=h.step_scores,
                         steps_used=len(h.tokens) + 1, wall_clock_seconds=per)
            for h in hyps]


def beam_search(model: mdl.Model, src: list[int], cfg: DecodeConfig,
                counter: OpCounter | None = None) -> DecodeOutput:
    return beam_search_batch(model, [src], cfg, counter)[0]


# ---------------------------------------------------------------------------
# iterative bidirectional strategies
# ---------------------------------------------------------------------------

def remask_count(length: int, T: int, t: int) -> int:
    """Positions re-masked after iteration t of T for a length-L candidate."""
    return math.ceil(length * (T - t) / T)


def _predict_masked(model, tokens, real, enc, counter):
    """One bidirectional pass; argmax token + log-prob at every real position."""
    logits = value_of(model.decode_full_nar(tokens, enc, counter=counter,
                                            tgt_mask=real))
    logits[:, :, _NAR_BANNED] = -np.inf
    lp = _log_softmax(logits)
    pick = lp.argmax(axis=2)
    conf = np.take_along_axis(lp, pick[:, :, None], axis=2)[:, :, 0]
    return pick, conf


def _mask_predict_fill(model, enc, lengths: np.ndarray, cfg: DecodeConfig,
                       counter: OpCounter | None, trace: list | None = None):
    """Confidence-scheduled iterative refinement for a batch of candidates.

    When trace is a list, the per-row count of masked positions after each
    iteration's remasking is appended to it (schedule instrumentation).
    """
    T = cfg.iterations
    m = len(lengths)
    lmax = int(lengths.max())
    pos = np.arange(lmax)[None, :]
    real = pos < lengths[:, None]
    tokens = np.where(real, MASK_ID, PAD_ID)
    conf = np.zeros((m, lmax))
    masked = real.copy()
    for t in range(1, T + 1):
        pick, c = _predict_masked(model, tokens, real, enc, counter)
        tokens = np.where(masked, pick, tokens)
        conf = np.where(masked, c, conf)
        if t == T:
            masked = np.zeros_like(masked)
            if trace is not None:
                trace.append(masked.sum(axis=1).tolist())
            break
        masked = np.zeros_like(masked)
        for i in range(m):
            n_t = remask_count(int(lengths[i]), T, t)
            if n_t <= 0:
                continue
            row_conf = conf[i, :lengths[i]]
            order = np.lexsort((-np.arange(lengths[i]), row_conf))
            worst = order[:n_t]
            masked[i, worst] = True
        if trace is not None:
            trace.append(masked.sum(axis=1).tolist())
        tokens = np.where(masked, MASK_ID, tokens)
    iters = np.full(m, T, dtype=int)
    return tokens, conf, real, iters


def _rank_by_confidence(conf_row: np.ndarray) -> np.ndarray:
    """rank[j]: 0 = most confident; ties favor the leftmost position."""
    order = np.lexsort((np.arange(len(conf_row)), -conf_row))
    rank = np.empty(len(conf_row), dtype=int)
    rank[order] = np.arange(len(conf_row))
    return rank


def _easy_first_fill(model, enc, lengths: np.ndarray, cfg: DecodeConfig,
                     counter: OpCounter | None):
    """Parallel easy-first refinement with per-position confidence ranking.

    Iteration 1 is the same all-MASK parallel pass mask-predict uses; later
    iterations re-predict every position conditioned on the tokens ranked
    strictly more confident in the previous iteration. A row freezes once
    an iteration leaves its tokens unchanged.
    """
    T = cfg.iterations
    m = len(lengths)
    lmax = int(lengths.max())
    pos = np.arange(lmax)[None, :]
    real = pos < lengths[:, None]
    first = np.where(real, MASK_ID, PAD_ID)
    tokens, conf = _predict_masked(model, first, real, enc, counter)
    tokens = np.where(real, tokens, PAD_ID)
    conf = np.where(real, conf, 0.0)
    iters = np.ones(m, dtype=int)
    done = np.zeros(m, dtype=bool)
    for t in range(2, T + 1):
        if done.all():
            break
        ranks = np.zeros((m, lmax), dtype=int)
        for i in range(m):
            ranks[i, :lengths[i]] = _rank_by_confidence(conf[i, :lengths[i]])
        allowed = ranks[:, None, :] < ranks[:, :, None]     # j strictly more confident than i
        logits = value_of(model.disco_forward(tokens, allowed, enc, counter=counter,
                                              tgt_mask=real))
        logits[:, :, _NAR_BANNED] = -np.inf
        lp = _log_softmax(logits)
        pick = np.where(real, lp.argmax(axis=2), PAD_ID)
        new_conf = np.take_along_axis(lp, np.maximum(pick, 0)[:, :, None], axis=2)[:, :, 0]
        for i in range(m):
            if done[i]:
                continue
            iters[i] = t
            if np.array_equal(pick[i], tokens[i]):
                done[i] = True
            else:
                tokens[i] = pick[i]
                conf[i] = np.where(real[i], new_conf[i], 0.0)
    return tokens, conf, real, iters


def _expand_encoder(enc: mdl.EncoderOut, rows: np.ndarray) -> mdl.EncoderOut:
    return mdl.EncoderOut(states=value_of(enc.states)[rows],
                          src_mask=enc.src_mask[rows])


def length_beam_decode_batch(model: mdl.Model, srcs: list[list[int]],
                             cfg: DecodeConfig, inner: str = "mask_predict",
                             counter: OpCounter | None = None,
                             forced_lengths=None) -> list[DecodeOutput]:
    """Decode each sentence over its top length candidates, keep the best.

    Candidates come from the length head (or are centered on forced
    lengths); the winner maximizes mean per-token log-prob, ties going to
    the shorter candidate.
    """
    t0 = time.perf_counter()
    n = len(srcs)
    k = cfg.length_beam
    src_ids, _ = pad_batch(srcs)
    enc = model.encode(src_ids, counter=counter)
    if forced_lengths is not None:
        center = np.minimum(np.asarray(forced_lengths, dtype=int), cfg.max_len)
        offs = np.arange(k) - (k - 1) // 2
        cand = np.clip(center[:, None] + offs[None, :], 1, cfg.max_len)
    else:
        probs = model.predict_length(enc, counter=counter)
        cand = mdl.top_lengths(probs, k, min(cfg.max_len, model.config.max_len))
    rows = np.repeat(np.arange(n), k)
    enc_rep = _expand_encoder(enc, rows)
    lengths = cand.reshape(-1)
    fill = _mask_predict_fill if inner == "mask_predict" else _easy_first_fill
    tokens, conf, real, iters = fill(model, enc_rep, lengths, cfg, counter)
    mean_lp = np.where(real, conf, 0.0).sum(axis=1) / lengths

    outs = []
    for i in range(n):
        block = slice(i * k, (i + 1) * k)
        sc = mean_lp[block]
        ln = lengths[block]
        order = np.lexsort((ln, -sc))
        j = i * k + int(order[0])
        L = int(lengths[j])
        outs.append(DecodeOutput(
            tokens=tokens[j, :L].tolist(),
            scores=conf[j, :L].tolist(),
            iterations_used=int(iters[j]),
        ))
    per = (time.perf_counter() - t0) / n
    for o in outs:
        o.wall_clock_seconds = per
    return outs


def mask_predict(model: mdl.Model, src: list[int], cfg: DecodeConfig,
                 counter: OpCounter | None = None,
                 target_length: int | None = None) -> DecodeOutput:
    """Iterative mask-predict at a single length candidate.

    The candidate is target_length when given, else the modal predicted
    length (equivalent to length_beam=1).
    """
    return _single_candidate(model, src, cfg, "mask_predict", counter, target_length)


def easy_first(model: mdl.Model, src: list[int], cfg: DecodeConfig,
               counter: OpCounter | None = None,
               target_length: int | None = None) -> DecodeOutput:
    """Parallel easy-first refinement at a single length candidate."""
    return _single_candidate(model, src, cfg, "easy_first", counter, target_length)


def _single_candidate(model, src, cfg, inner, counter, target_length):
    t0 = time.perf_counter()
    src_ids, _ = pad_batch([src])
    enc = model.encode(src_ids, counter=counter)
    if target_length is None:
        probs = model.predict_length(enc, counter=counter)
        target_length = int(mdl.top_lengths(probs, 1, cfg.max_len)[0, 0])
    if target_length > cfg.max_len or target_length > model.config.max_len:
        raise ValueError(f"target length {target_length} exceeds max_len")
    lengths = np.array([target_length])
    fill = _mask_predict_fill if inner == "mask_predict" else _easy_first_fill
    tokens, conf, real, iters = fill(model, enc, lengths, cfg, counter)
    out = DecodeOutput(
        tokens=tokens[0, :target_length].tolist(),
        scores=conf[0, :target_length].tolist(),
        iterations_used=int(iters[0]),
        wall_clock_seconds=time.perf_counter() - t0,
    )
    return out


def length_beam_decode(model: mdl.Model, src: list[int], cfg: DecodeConfig,
                       inner: str = "mask_predict",
                       counter: OpCounter | None = None) -> DecodeOutput:
    return length_beam_decode_batch(model, [src], cfg, inner, counter)[0]


# ---------------------------------------------------------------------------
# strategy dispatch
# ---------------------------------------------------------------------------

def translate_batch(model: mdl.Model, srcs: list[list[int]], cfg: DecodeConfig,
                    counter: OpCounter | None = None,
                    forced_lengths=None) -> list[DecodeOutput]:
    if cfg.strategy == "greedy":
        return greedy_ar_batch(model, srcs, cfg, counter, forced_lengths)
    if cfg.strategy == "beam":
        return beam_search_batch(model, srcs, cfg, counter, forced_lengths)
    inner = "mask_predict" if cfg.strategy == "mask_predict" else "easy_first"
    return length_beam_decode_batch(model, srcs, cfg, inner, counter, forced_lengths)


def translate(model: mdl.Model, src: list[int], cfg: DecodeConfig,
              counter: OpCounter | None = None) -> DecodeOutput:
    return translate_batch(model, [src], cfg, counter)[0]


def pad_batch(seqs: list[list[int]], pad: int = PAD_ID) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to a rectangle; returns (ids [B, L], lengths [B])."""
    n = len(seqs)
    lengths = np.array([len(s) for s in seqs], dtype=int)
    width = max(1, int(lengths.max()) if n else 1)
    ids = np.full((n, width), pad, dtype=int)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    return ids, lengths
