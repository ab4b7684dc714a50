from __future__ import annotations

import numpy as np
import pytest
import torch

from buding_asr.common import ContractError, SequencingError
from buding_asr.config import DecoderConfig
from buding_asr.model import build_decoder
from buding_asr.prompt_gen import assemble_chunk
from buding_asr.synth_corpus import Vocabulary

D = 8


@pytest.fixture
def vocab():
    return Vocabulary.synthetic(4)


@pytest.fixture
def decoder(vocab, float64):
    torch.manual_seed(0)
    dec = build_decoder(vocab, DecoderConfig(d_model=D, num_heads=2, d_ff=16, num_layers=2,
                                             max_prompts=64, max_tokens=16))
    dec.eval()
    return dec


def _chunk(b: int, size: int, context: bool = True):
    n_ctc = size - 1 if context and size > 0 else size
    cxt = torch.randn(D) if context and size > 0 else None
    return assemble_chunk(b, torch.randn(n_ctc, D), cxt, list(range(1, n_ctc + 1)))


@torch.no_grad()
def test_incremental_matches_batch_forward(decoder, vocab):
    rng = np.random.default_rng(11)
    for _ in range(100):
        session = decoder.new_session()
        chunks, visible, inputs, rows = [], [], [vocab.sos], []
        num_blocks = int(rng.integers(1, 5))
        num_tokens = int(rng.integers(1, 7))
        events = ["block"] * num_blocks + ["token"] * num_tokens
        rng.shuffle(events)
        for event in events:
            if event == "block":
                chunk = _chunk(len(chunks) + 1, int(rng.integers(0, 4)), context=bool(rng.integers(0, 2)))
                session = decoder.ingest_prompts(session, chunk)
                chunks.append(chunk)
            else:
                dist, session = decoder.score_next(session, inputs[-1])
                rows.append(dist.logp)
                visible.append(session.n_prompts - 1)
                inputs.append(int(rng.integers(1, vocab.num_content + 1)))
        inputs = inputs[:len(rows)]
        prompts = torch.cat([c.vectors() for c in chunks]) if chunks else torch.zeros(0, D)
        mask = torch.zeros(len(rows), prompts.shape[0], dtype=torch.bool)
        for i, j in enumerate(visible):
            mask[i, :j] = True
        batch = decoder.batch_forward(prompts, inputs, mask)
        incremental = torch.stack(rows)
        finite = torch.isfinite(batch)
        assert torch.equal(finite, torch.isfinite(incremental))
        assert torch.max(torch.abs(batch[finite] - incremental[finite])) <= 1e-5


@torch.no_grad()
def test_ledger_and_position_counter(decoder, vocab):
    before = decoder.position_counter
    session = decoder.new_session()
    session = decoder.ingest_prompts(session, _chunk(1, 3))
    _, session = decoder.score_next(session, vocab.sos)
    session = decoder.ingest_prompts(session, _chunk(2, 2))
    _, session = decoder.score_next(session, 1)
    assert decoder.position_counter - before == 1 + 3 + 1 + 2 + 1
    tokens = [e for e in session.ledger if e.kind == "token"]
    assert [e.j_visible for e in tokens] == [3, 5]
    assert session.cache_length == session.n_prompts + session.num_tokens == 6 + 2


@torch.no_grad()
def test_shared_cache_runs_prompts_once(decoder, vocab):
    session = decoder.new_session()
    other = decoder.fork(session)
    chunk = _chunk(1, 3)
    before = decoder.position_counter
    session = decoder.ingest_prompts(session, chunk)
    other = decoder.ingest_prompts(other, chunk)
    assert decoder.position_counter - before == 3
    assert other.n_prompts == session.n_prompts == 4
    with pytest.raises(SequencingError):
        decoder.ingest_prompts(decoder.fork(decoder.new_session()), _chunk(2, 1))


@torch.no_grad()
def test_forks_are_independent(decoder, vocab):
    session = decoder.ingest_prompts(decoder.new_session(), _chunk(1, 2))
    _, session = decoder.score_next(session, vocab.sos)
    left, right = decoder.fork(session), decoder.fork(session)
    dist_left, left = decoder.score_next(left, 1)
    dist_right, right = decoder.score_next(right, 2)
    assert left.tokens == (vocab.sos, 1) and right.tokens == (vocab.sos, 2)
    assert session.tokens == (vocab.sos,)
    fresh = decoder.ingest_prompts(decoder.new_session(), session.prompt_cache.chunks[0])
    _, fresh = decoder.score_next(fresh, vocab.sos)
    dist_fresh, _ = decoder.score_next(fresh, 2)
    assert torch.allclose(dist_fresh.logp, dist_right.logp, atol=1e-9, equal_nan=False)
    assert not torch.allclose(dist_left.logp, dist_right.logp)


@torch.no_grad()
def test_output_distribution(decoder, vocab):
    dist, _ = decoder.score_next(decoder.new_session(), vocab.sos)
    assert dist[vocab.blank] == float("-inf") and dist[vocab.sos] == float("-inf")
    assert float(torch.logsumexp(dist.logp, dim=0)) == pytest.approx(0.0, abs=1e-9)
    assert vocab.blank not in dist.top(3) and vocab.sos not in dist.top(3)
    with pytest.raises(ContractError):
        decoder.score_next(decoder.new_session(), len(vocab))


@torch.no_grad()
def test_lm_logprobs_equals_hidden_prompts(decoder, vocab):
    inputs = [vocab.sos, 1, 3, 2]
    prompts = torch.randn(5, D)
    hidden = decoder.batch_forward(prompts, inputs, torch.zeros(len(inputs), 5, dtype=torch.bool))
    lm = decoder.lm_logprobs(inputs)
    finite = torch.isfinite(lm)
    assert torch.allclose(hidden[finite], lm[finite], atol=1e-9)


def test_capacity_limits(decoder, vocab):
    session = decoder.new_session()
    with pytest.raises(ContractError):
        decoder.ingest_prompts(session, assemble_chunk(1, torch.randn(70, D), None, list(range(1, 71))))


@torch.no_grad()
def test_batch_forward_rows_match_truncated_inputs(decoder, vocab):
    rng = np.random.default_rng(5)
    prompts = torch.randn(6, D)
    inputs = [vocab.sos, 2, 4, 1, 3]
    visible = sorted(int(j) for j in rng.integers(0, 7, size=len(inputs)))
    mask = torch.zeros(len(inputs), 6, dtype=torch.bool)
    for i, j in enumerate(visible):
        mask[i, :j] = True
    full = decoder.batch_forward(prompts, inputs, mask)
    for i in range(len(inputs)):
        m = visible[i]
        truncated = decoder.batch_forward(prompts[:m], inputs[:i + 1], mask[:i + 1, :m])
        finite = torch.isfinite(full[i])
        assert torch.equal(finite, torch.isfinite(truncated[i]))
        assert torch.allclose(full[i][finite], truncated[i][finite], atol=1e-9)


@torch.no_grad()
def test_all_visible_mask_equals_no_mask(decoder, vocab):
    prompts = torch.randn(4, D)
    inputs = [vocab.sos, 1, 2]
    unmasked = decoder.batch_forward(prompts, inputs)
    masked = decoder.batch_forward(prompts, inputs, torch.ones(len(inputs), 4, dtype=torch.bool))
    assert torch.equal(torch.isfinite(unmasked), torch.isfinite(masked))
    finite = torch.isfinite(unmasked)
    assert torch.allclose(unmasked[finite], masked[finite], atol=1e-12)


@torch.no_grad()
def test_prompt_cache_independent_of_earlier_tokens(decoder, vocab):
    chunk = _chunk(1, 4)
    quiet = decoder.ingest_prompts(decoder.new_session(), chunk)
    busy = decoder.new_session()
    for token in (vocab.sos, 3, 1):
        _, busy = decoder.score_next(busy, token)
    busy = decoder.ingest_prompts(busy, chunk)
    assert busy.n_prompts == quiet.n_prompts == 5
    for n in range(len(decoder.layers)):
        assert torch.allclose(quiet.prompt_cache.keys[n], busy.prompt_cache.keys[n], atol=1e-12)
        assert torch.allclose(quiet.prompt_cache.values[n], busy.prompt_cache.values[n], atol=1e-12)
