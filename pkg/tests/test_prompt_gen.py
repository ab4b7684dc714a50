from __future__ import annotations

import pytest
import torch

from buding_asr.common import ContractError, SequencingError
from buding_asr.prompt_gen import (PromptGenerator, PromptStream, assemble_chunk, make_context_prompt,
                                   make_ctc_prompts)
from buding_asr.speech_subnet import make_block_plan


@pytest.fixture
def generator():
    torch.manual_seed(0)
    return PromptGenerator(8, 4, variant="both")


def test_ctc_prompts_keep_non_blank_frames(generator):
    h = torch.randn(5, 8)
    prompts, kept = make_ctc_prompts(h, [0, 3, 0, 0, 2], generator.mlp_ctc, frame_offset=10)
    assert kept == [12, 15]
    assert torch.allclose(prompts, generator.mlp_ctc(h[[1, 4]]))


def test_all_blank_block_gives_no_ctc_prompts(generator):
    prompts, kept = make_ctc_prompts(torch.randn(3, 8), [0, 0, 0], generator.mlp_ctc)
    assert prompts.shape == (0, 4) and kept == []
    with pytest.raises(ContractError):
        make_ctc_prompts(torch.randn(3, 8), [0, 1], generator.mlp_ctc)


def test_context_prompt(generator):
    c = torch.randn(8)
    assert torch.allclose(make_context_prompt(c, generator.mlp_cxt), generator.mlp_cxt(c.unsqueeze(0))[0])
    with pytest.raises(ContractError):
        make_context_prompt(torch.randn(2, 8), generator.mlp_cxt)


def test_chunk_order():
    ctc = torch.arange(8.0).reshape(2, 4)
    cxt = torch.full((4,), -1.0)
    chunk = assemble_chunk(1, ctc, cxt, [1, 2])
    assert len(chunk) == 3
    assert torch.equal(chunk.vectors()[-1], cxt)
    assert chunk.layout() == [("ctc", 1), ("ctc", 2), ("context", 1)]

    flipped = assemble_chunk(1, ctc, cxt, [1, 2], context_first=True)
    assert torch.equal(flipped.vectors()[0], cxt)
    assert flipped.layout()[0] == ("context", 1)

    with pytest.raises(ContractError):
        assemble_chunk(1, ctc, cxt, [2, 1])
    with pytest.raises(ContractError):
        assemble_chunk(1, ctc, cxt, [1])


def test_prompt_stream_cumulative_counts():
    stream = PromptStream()
    stream.append(assemble_chunk(1, torch.zeros(2, 4), torch.zeros(4), [1, 2]))
    stream.append(assemble_chunk(2, torch.zeros(0, 4), torch.zeros(4), []))
    stream.append(assemble_chunk(3, torch.zeros(1, 4), None, [5]))
    assert stream.cumulative == [3, 4, 5]
    assert stream.num_prompts == 5
    assert stream.ctc_prompt_count() == 3
    assert stream.matrix(4).shape == (5, 4)
    assert [entry[2] for entry in stream.layout()] == [1, 1, 1, 2, 3]
    with pytest.raises(SequencingError):
        stream.append(assemble_chunk(5, torch.zeros(0, 4), None, []))


@pytest.mark.parametrize("variant,expect_ctc,expect_cxt", [("ctc", True, False), ("context", False, True),
                                                            ("both", True, True)])
def test_variants(variant, expect_ctc, expect_cxt):
    gen = PromptGenerator(8, 4, variant=variant)
    chunk = gen.chunk_for_block(1, torch.randn(3, 8), [0, 1, 2], torch.randn(8), frame_offset=0)
    assert (len(chunk.kept_frame_indices) == 2) == expect_ctc
    assert (chunk.context_prompt is not None) == expect_cxt


def test_unknown_variant():
    with pytest.raises(ContractError):
        PromptGenerator(8, 4, variant="none")


def test_whole_utterance_stream_matches_blockwise(generator):
    plan = make_block_plan(20, block_length=2, subsample=4)
    h = torch.randn(plan.num_sub_frames, 8)
    labels = [0, 1, 0, 0, 2]
    contexts = [torch.randn(8) for _ in range(plan.num_blocks)]
    stream = generator.build_prompt_stream(h, labels, contexts, plan)
    assert stream.cumulative == [2, 3, 5]
    assert [pos for kind, pos, _ in stream.layout() if kind == "ctc"] == [2, 5]
    manual = torch.cat([
        generator.chunk_for_block(b, h[s:e], labels[s:e], contexts[b - 1], s).vectors()
        for b, (s, e) in ((b, plan.sub_span(b)) for b in range(1, plan.num_blocks + 1))
    ])
    assert torch.allclose(stream.matrix(4), manual)
