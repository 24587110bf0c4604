"""Spec examples that need trained models (fixtures are cached on disk)."""

import numpy as np
import pytest

from seqbench import tasks as tk
from seqbench.decode import DecodeConfig, easy_first, greedy_ar, mask_predict
from seqbench.model import top_lengths
from seqbench.tasks import TaskSpec, gen_copy
from seqbench.train import distill_generate, evaluate

from conftest import COPY_SPEC


def held_out_copy(n=100):
    return gen_copy(COPY_SPEC, n, split_salt=7)


class TestTrainedArCopy:
    def test_token_accuracy_at_least_99(self, ar_copy_model):
        dev = held_out_copy(200)
        res = evaluate(ar_copy_model, dev,
                       DecodeConfig(strategy="greedy", max_len=16))
        assert res.tok_acc >= 0.99

    def test_copies_exact_sources(self, ar_copy_model):
        cfg = DecodeConfig(strategy="greedy", max_len=16)
        hits = 0
        pairs = held_out_copy(30)
        for p in pairs:
            out = greedy_ar(ar_copy_model, p.src, cfg)
            hits += out.tokens == p.src
        assert hits >= 28

    def test_beam_matches_task_too(self, ar_copy_model):
        cfg = DecodeConfig(strategy="beam", beam_size=5, length_penalty=1.0,
                           max_len=16)
        res = evaluate(ar_copy_model, held_out_copy(100), cfg)
        assert res.seq_acc >= 0.9


class TestTrainedDistill:
    def test_near_perfect_teacher_reproduces_gold(self, ar_copy_model):
        pairs = held_out_copy(200)
        distilled = distill_generate(
            ar_copy_model, pairs,
            DecodeConfig(strategy="beam", beam_size=5, length_penalty=1.0,
                         max_len=16))
        assert len(distilled) == len(pairs)
        same = sum(d.tgt == p.tgt for d, p in zip(distilled, pairs))
        assert same >= 0.95 * len(pairs)


class TestTrainedCmlmCopy:
    def test_mask_predict_t4_copies(self, cmlm_copy_model):
        pairs = held_out_copy(100)
        hits = 0
        for p in pairs:
            out = mask_predict(cmlm_copy_model, p.src,
                               DecodeConfig(strategy="mask_predict",
                                            iterations=4, max_len=16),
                               target_length=len(p.src))
            hits += out.tokens == p.tgt
        assert hits >= 95

    def test_modal_length_matches_source(self, cmlm_copy_model):
        pairs = held_out_copy(100)
        hits = 0
        for p in pairs:
            enc = cmlm_copy_model.encode(np.array([p.src]))
            probs = cmlm_copy_model.predict_length(enc)
            modal = int(top_lengths(probs, 1, 16)[0, 0])
            hits += modal == len(p.src)
        assert hits >= 95

    def test_length_beam_full_decode(self, cmlm_copy_model):
        from seqbench.decode import length_beam_decode
        cfg = DecodeConfig(strategy="mask_predict", iterations=4,
                           length_beam=5, max_len=16)
        pairs = held_out_copy(50)
        hits = sum(length_beam_decode(cmlm_copy_model, p.src, cfg).tokens == p.tgt
                   for p in pairs)
        assert hits >= 45


class TestTrainedDisco:
    def test_easy_first_converges_before_budget(self, disco_copy_model):
        pairs = held_out_copy(50)
        iters = []
        for p in pairs:
            out = easy_first(disco_copy_model, p.src,
                             DecodeConfig(strategy="easy_first", iterations=10,
                                          max_len=16),
                             target_length=len(p.src))
            iters.append(out.iterations_used)
        assert np.mean(iters) < 10.0
        assert min(iters) >= 1

    def test_easy_first_quality(self, disco_copy_model):
        pairs = held_out_copy(100)
        hits = 0
        for p in pairs:
            out = easy_first(disco_copy_model, p.src,
                             DecodeConfig(strategy="easy_first", iterations=10,
                                          max_len=16),
                             target_length=len(p.src))
            hits += out.tokens == p.tgt
        assert hits >= 80
