from __future__ import annotations

import dataclasses
import math

import numpy as np
import pytest
import torch

from buding_asr import fusion_search
from buding_asr.common import ConfigError, ContractError
from buding_asr.config import DecodeConfig, DecoderConfig
from buding_asr.ctc_engine import CtcPrefixScore, collapse, ctc_posteriors
from buding_asr.external_lm import LstmLm
from buding_asr.fusion_search import (FinalHypothesis, FusionHypothesis, FusionWeights, _merge, batch_decode,
                                      decode_grid, fusion_score, longest_common_prefix, measure, run_stream,
                                      stream_decode)
from buding_asr.model import AsrModel, build_decoder
from buding_asr.prompt_gen import assemble_chunk
from buding_asr.speech_subnet import make_block_plan
from buding_asr.synth_corpus import Vocabulary, generate_corpus
from oracles import brute_ctc_log_prob, exhaustive_fused_best, random_log_grid

D = 8


# ---------------------------------------------------------------------------
# 打分公式
# ---------------------------------------------------------------------------

def _hyp(tokens=(1, 2), gb=0.2, gn=0.3, dec=-1.5, lm=-2.0, frame=4):
    ctc = CtcPrefixScore(math.log(gb), math.log(gn), frame, tokens[-1] if tokens else None)
    return FusionHypothesis(tokens=tuple(tokens), ctc=ctc, dec_logp=dec, lm_logp=lm)


def test_fusion_score_arithmetic():
    weights = FusionWeights(0.4, 0.6, 0.5, 0.1)
    expected = 0.4 * math.log(0.5) + 0.6 * -1.5 + 0.5 * -2.0 + 0.1 * 2
    assert fusion_score(_hyp(), 4, weights) == pytest.approx(expected)
    assert fusion_score(_hyp(), None, weights, lm_logp=0.0, length_penalty=0.0) == pytest.approx(
        0.4 * math.log(0.5) + 0.6 * -1.5)
    with pytest.raises(ContractError):
        fusion_score(_hyp(), 3, weights)


def test_zero_weight_ignores_infinite_component():
    hyp = _hyp(dec=float("-inf"))
    assert fusion_score(hyp, None, FusionWeights(1.0, 0.0)) == pytest.approx(math.log(0.5))


def test_weights_validation():
    with pytest.raises(ConfigError):
        FusionWeights(-0.1, 1.0)
    ctc_only = FusionWeights.from_config(DecodeConfig(mode="ctc", lambda_dec=0.7))
    assert ctc_only.lambda_dec == 0.0
    assert FusionWeights(0.4, 0.6).scaled(2.0) == FusionWeights(0.8, 1.2)


def test_merge_keeps_branch_with_more_prompts():
    existing = dataclasses.replace(_hyp(dec=-1.0), j_visible=(2, 3))
    newer = dataclasses.replace(_hyp(gb=0.1, gn=0.1, dec=-2.0), j_visible=(2, 5))
    merged = _merge(existing, newer)
    assert merged.dec_logp == -2.0 and merged.j_visible == (2, 5)
    assert merged.ctc.log_gb == pytest.approx(math.log(0.3))
    assert merged.ctc.log_gn == pytest.approx(math.log(0.4))

    tie = _merge(existing, dataclasses.replace(newer, j_visible=(2, 3)))
    assert tie.dec_logp == -1.0


def test_longest_common_prefix():
    beam = [_hyp((1, 2, 3)), _hyp((1, 2)), _hyp((1, 2, 4))]
    assert longest_common_prefix(beam) == (1, 2)
    assert longest_common_prefix([_hyp((1,)), _hyp((2,))]) == ()


# ---------------------------------------------------------------------------
# 搜索与穷举对照
# ---------------------------------------------------------------------------

@pytest.fixture
def small_vocab():
    return Vocabulary.synthetic(2)


@pytest.fixture
def small_decoder(small_vocab, float64):
    torch.manual_seed(0)
    dec = build_decoder(small_vocab, DecoderConfig(d_model=D, num_heads=2, d_ff=16, num_layers=1,
                                                   max_prompts=16, max_tokens=16))
    dec.eval()
    return dec


def _sequence_logp(decoder, prompts, y, vocab) -> float:
    inputs, targets = [vocab.sos] + list(y), list(y) + [vocab.eos]
    with torch.no_grad():
        logp = decoder.batch_forward(prompts, inputs)
    return float(logp[torch.arange(len(targets)), torch.as_tensor(targets)].sum())


def test_beam_matches_exhaustive_search(small_vocab, small_decoder):
    rng = np.random.default_rng(2024)
    C = small_vocab.num_ctc_classes
    for case in range(100):
        T = int(rng.integers(1, 6))
        lp = random_log_grid(rng, T, C, peaky=float(rng.uniform(0.5, 2.0)))
        chunk = assemble_chunk(1, torch.randn(2, D), torch.randn(D), [1, 2])
        prompts = chunk.vectors()
        if case % 4 == 0:
            weights = FusionWeights(1.0, 0.0)
        else:
            weights = FusionWeights(float(rng.uniform(0.2, 1.0)), float(rng.uniform(0.2, 1.0)))
        final = decode_grid(lp, small_vocab, weights, beam=C ** T, chunks=[chunk], decoder=small_decoder)
        best_y, best_score = exhaustive_fused_best(
            lp, lambda y: _sequence_logp(small_decoder, prompts, y, small_vocab),
            weights.lambda_ctc, weights.lambda_dec)
        assert tuple(final.tokens) == best_y
        assert final.score == pytest.approx(best_score, rel=1e-6, abs=1e-9)
        assert final.ctc_logp == pytest.approx(brute_ctc_log_prob(lp, final.tokens), rel=1e-6, abs=1e-9)
        if weights.lambda_dec > 0:
            assert final.dec_logp == pytest.approx(
                _sequence_logp(small_decoder, prompts, final.tokens, small_vocab), abs=1e-6)
            assert len(final.j_visible) == len(final.tokens)
            assert all(j == len(prompts) for j in final.j_visible)


def test_one_hot_grid_gives_greedy_path(small_vocab):
    rng = np.random.default_rng(8)
    C = small_vocab.num_ctc_classes
    for _ in range(20):
        T = int(rng.integers(1, 10))
        z = rng.integers(0, C, size=T)
        lp = np.full((T, C), -np.inf)
        lp[np.arange(T), z] = 0.0
        final = decode_grid(lp, small_vocab, FusionWeights(1.0, 0.0), beam=1)
        assert final.tokens == collapse(z)
        assert final.ctc_logp == 0.0


def test_scaling_weights_keeps_result(small_vocab, small_decoder, rng):
    chunk = assemble_chunk(1, torch.randn(1, D), torch.randn(D), [1])
    for _ in range(10):
        lp = random_log_grid(rng, 5, small_vocab.num_ctc_classes)
        weights = FusionWeights(0.3, 0.7)
        a = decode_grid(lp, small_vocab, weights, beam=4, chunks=[chunk], decoder=small_decoder)
        b = decode_grid(lp, small_vocab, weights.scaled(2.5), beam=4, chunks=[chunk], decoder=small_decoder)
        assert a.tokens == b.tokens
        assert b.score == pytest.approx(2.5 * a.score)


def test_external_lm_score_is_accumulated(small_vocab, float64, rng):
    torch.manual_seed(1)
    lm = LstmLm(len(small_vocab), small_vocab.sos, hidden=8, num_layers=1,
                masked_outputs=(small_vocab.blank, small_vocab.sos))
    lm.eval()
    lp = random_log_grid(rng, 4, small_vocab.num_ctc_classes)
    final = decode_grid(lp, small_vocab, FusionWeights(1.0, 0.0, 0.5), beam=27, lm=lm)
    inputs = [small_vocab.sos] + final.tokens
    targets = final.tokens + [small_vocab.eos]
    with torch.no_grad():
        logp, _ = lm(inputs)
    expected = float(logp[torch.arange(len(targets)), torch.as_tensor(targets)].sum())
    assert final.lm_logp == pytest.approx(expected, abs=1e-9)
    assert final.score == pytest.approx(final.ctc_logp + 0.5 * expected, abs=1e-9)


def test_beam_width_must_be_positive(small_vocab):
    with pytest.raises(ConfigError):
        decode_grid(np.zeros((2, 3)), small_vocab, FusionWeights(), beam=0)


# ---------------------------------------------------------------------------
# 流式驱动
# ---------------------------------------------------------------------------

@pytest.fixture
def one_block_model(cfg, corpus):
    torch.manual_seed(0)
    enc = dataclasses.replace(cfg.encoder, block_length=64)
    model = AsrModel(corpus.vocab, cfg.data.feature_dim, enc, cfg.decoder)
    model.eval()
    return model


def test_single_block_stream_equals_batch(cfg, one_block_model):
    corpus = generate_corpus(dataclasses.replace(cfg.data, num_train=1, num_dev=1, num_test=50), seed=21)
    dcfg = DecodeConfig(beam=4, lambda_ctc=0.4, lambda_dec=0.6)
    for utt in corpus.splits["test"]:
        streamed = stream_decode(utt.features, one_block_model, dcfg)
        batched = batch_decode(utt.features, one_block_model, dcfg)
        assert streamed.tokens == batched.tokens
        assert streamed.final.score == batched.final.score
        assert streamed.stats["num_prompts"] == batched.stats["num_prompts"]


def test_batch_sees_every_prompt_of_blockwise_encoding(corpus, model):
    dcfg = DecodeConfig(beam=3)
    for utt in corpus.splits["test"]:
        streamed = stream_decode(utt.features, model, dcfg)
        batched = batch_decode(utt.features, model, dcfg)
        # 同一分块编码：提示集合与流式完全相同，只是全部先于搜索可见
        assert batched.stats["num_prompts"] == streamed.stats["num_prompts"]
        assert batched.stats["ctc_prompts"] == streamed.stats["ctc_prompts"]
        assert batched.stats["sub_frames"] == streamed.stats["sub_frames"]
        assert batched.final.j_visible == [batched.stats["num_prompts"]] * len(batched.tokens)


def test_stream_timeline_and_prompt_visibility(cfg, corpus, model):
    dcfg = DecodeConfig(beam=4)
    for utt in corpus.splits["test"]:
        plan = make_block_plan(utt.num_frames, cfg.encoder.block_length, cfg.encoder.subsample)
        result = stream_decode(utt.features, model, dcfg, plan=plan)
        assert result.emitted_tokens() == result.tokens
        blocks = [e.block for e in result.timeline]
        times = [e.time for e in result.timeline]
        assert blocks == sorted(blocks) and times == sorted(times)
        for e in result.timeline:
            assert e.time >= plan.input_ends[e.block - 1] * dcfg.frame_period
        j = result.final.j_visible
        assert len(j) == len(result.tokens)
        assert all(a <= b for a, b in zip(j, j[1:]))
        assert all(v <= result.stats["num_prompts"] for v in j)
        assert result.audio_duration == pytest.approx(utt.num_frames * dcfg.frame_period)


def test_decoder_work_is_accounted(corpus, model):
    dcfg = DecodeConfig(beam=3)
    for utt in corpus.splits["dev"]:
        before = model.decoder.position_counter
        result = stream_decode(utt.features, model, dcfg)
        used = model.decoder.position_counter - before
        assert used == result.stats["num_prompts"] + 1 + result.stats["decoder_steps"]
        assert result.stats["decoder_positions"] == used


def test_ctc_mode_skips_decoder(cfg, corpus, model):
    dcfg = DecodeConfig(mode="ctc", beam=3, ctc_prefilter=None)
    for utt in corpus.splits["test"]:
        before = model.decoder.position_counter
        result = stream_decode(utt.features, model, dcfg)
        assert model.decoder.position_counter == before
        assert result.stats["decoder_steps"] == 0
        plan = make_block_plan(utt.num_frames, cfg.encoder.block_length, cfg.encoder.subsample)
        with torch.no_grad():
            h, _ = model.encoder.encode_utterance(utt.features, plan)
            grid = ctc_posteriors(h, model.ctc_head)
        offline = decode_grid(grid, corpus.vocab, FusionWeights(dcfg.lambda_ctc, 0.0), beam=3)
        assert result.tokens == offline.tokens


def test_measure_reports_percentiles(corpus, model):
    feats = [u.features for u in corpus.splits["test"]]
    report = measure(feats, model, DecodeConfig(beam=2), percentiles=(50, 90))
    summary = report.to_dict()
    assert summary["num_utterances"] == len(feats)
    for key in ("rtf_p50", "rtf_p90", "ep_p50", "ep_p90", "prompt_compression"):
        assert key in summary
    assert report.mean_sub_frames > 0
    assert report.compression == pytest.approx(report.mean_ctc_prompts / report.mean_sub_frames)
    with pytest.raises(ContractError):
        measure([], model, DecodeConfig())


class _Clock:
    def __init__(self):
        self.now = 0.0

    def __call__(self) -> float:
        return self.now


class _CostlyProcessor:
    """每块固定处理耗时（推进假时钟），每块发出一个 token"""

    def __init__(self, clock: _Clock, cost: float):
        self.clock = clock
        self.cost = cost

    def start(self):
        self.emitted = []

    def process_block(self, b, block_features):
        self.clock.now += self.cost
        self.emitted.append(b)
        return [b]

    def finalize(self):
        return [], FinalHypothesis(list(self.emitted), 0.0, 0.0, 0.0, 0.0, [])

    def stats(self):
        return {}


@pytest.mark.parametrize("cost,expected_ep", [(0.02, 0.02), (0.1, 0.18)])
def test_virtual_clock_latency(monkeypatch, cost, expected_ep):
    clock = _Clock()
    monkeypatch.setattr(fusion_search.time, "perf_counter", clock)
    plan = make_block_plan(40, block_length=2, subsample=4)
    result = run_stream(_CostlyProcessor(clock, cost), np.zeros((40, 6)), plan, frame_period=0.01)
    assert result.tokens == [1, 2, 3, 4, 5]
    assert result.ep_latency == pytest.approx(expected_ep)
    assert result.rtf == pytest.approx(5 * cost / 0.4)
    assert result.processing_time == pytest.approx(5 * cost)


class _EarlyProcessor(_CostlyProcessor):
    """全部 token 在第一块发出"""

    def process_block(self, b, block_features):
        self.clock.now += self.cost
        if b > 1:
            return []
        self.emitted = [1, 2]
        return [1, 2]


def test_latency_not_negative_when_tokens_precede_audio_end(monkeypatch):
    clock = _Clock()
    monkeypatch.setattr(fusion_search.time, "perf_counter", clock)
    plan = make_block_plan(40, block_length=2, subsample=4)
    result = run_stream(_EarlyProcessor(clock, 0.01), np.zeros((40, 6)), plan, frame_period=0.01)
    assert result.timeline[-1].time < plan.input_ends[-1] * 0.01
    assert result.tokens == [1, 2]
    assert result.ep_latency == 0.0


def test_doubling_block_cost_doubles_rtf(monkeypatch):
    clock = _Clock()
    monkeypatch.setattr(fusion_search.time, "perf_counter", clock)
    feats = [np.zeros((n, 6)) for n in (24, 40, 33)]

    def run(cost):
        return measure(feats, None, DecodeConfig(), processor_factory=lambda: _CostlyProcessor(clock, cost),
                       block_length=2, subsample=4)

    ratio = run(0.006).rtf_median / run(0.003).rtf_median
    assert ratio == pytest.approx(2.0, rel=0.1)
