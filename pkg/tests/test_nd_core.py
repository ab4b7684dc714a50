from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
import torch

from buding_asr import nd_core
from buding_asr.common import (ArtifactMissingError, ContractError, DataFormatError, InvalidMaskError,
                               ShapeError, TargetError)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as info:
        nd_core.matmul(torch.zeros(2, 3), torch.zeros(4, 5))
    assert "[2, 3]" in str(info.value) and "[4, 5]" in str(info.value)


def test_linear_matches_torch():
    layer = nd_core.Linear(4, 3)
    x = torch.randn(5, 4)
    assert torch.allclose(layer(x), torch.nn.functional.linear(x, layer.weight, layer.bias))


def test_masked_attention_zero_weight_on_hidden_keys():
    torch.manual_seed(0)
    q, k, v = torch.randn(3, 4), torch.randn(5, 4), torch.randn(5, 4)
    mask = torch.tensor([[1, 0, 0, 0, 0],
                         [1, 1, 0, 1, 0],
                         [1, 1, 1, 1, 1]], dtype=torch.bool)
    _, weights = nd_core.masked_attention(q, k, v, mask, heads=2, return_weights=True)
    assert torch.all(weights[:, ~mask] == 0)
    assert torch.allclose(weights.sum(dim=-1), torch.ones(2, 3))


def test_masked_attention_ignores_hidden_values():
    torch.manual_seed(1)
    q, k, v = torch.randn(2, 4), torch.randn(3, 4), torch.randn(3, 4)
    mask = torch.tensor([[1, 1, 0], [1, 0, 0]], dtype=torch.bool)
    out = nd_core.masked_attention(q, k, v, mask, heads=1)
    v2 = v.clone()
    v2[2] += 100.0
    k2 = k.clone()
    k2[2] -= 50.0
    assert torch.allclose(out, nd_core.masked_attention(q, k2, v2, mask, heads=1))


def test_masked_attention_dead_row():
    q = torch.randn(2, 4)
    mask = torch.tensor([[1, 0], [0, 0]], dtype=torch.bool)
    with pytest.raises(InvalidMaskError):
        nd_core.masked_attention(q, q, q, mask, heads=1)


def test_masked_attention_bad_mask_shape():
    q = torch.randn(2, 4)
    with pytest.raises(ShapeError):
        nd_core.masked_attention(q, q, q, torch.ones(2, 3, dtype=torch.bool), heads=1)
    with pytest.raises(ShapeError):
        nd_core.masked_attention(q, q, q, torch.ones(2, 2), heads=1)


def test_depthwise_conv_causal():
    torch.manual_seed(2)
    x = torch.randn(7, 3)
    w = torch.randn(3, 3)
    out = nd_core.depthwise_conv1d(x, w)
    x2 = x.clone()
    x2[4:] = torch.randn(3, 3)
    out2 = nd_core.depthwise_conv1d(x2, w)
    assert out.shape == (7, 3)
    assert torch.allclose(out[:4], out2[:4])
    assert not torch.allclose(out[4:], out2[4:])


def test_depthwise_conv_same_needs_odd_kernel():
    with pytest.raises(ContractError):
        nd_core.depthwise_conv1d(torch.randn(4, 2), torch.randn(2, 2), padding="same")
    assert nd_core.depthwise_conv1d(torch.randn(4, 2), torch.randn(2, 3), padding="same").shape == (4, 2)


def test_targets_out_of_range():
    with pytest.raises(TargetError):
        nd_core.softmax_cross_entropy(torch.randn(2, 3), [0, 3])
    with pytest.raises(TargetError):
        nd_core.embedding_lookup(torch.randn(3, 2), [1, -1])


def test_softmax_cross_entropy_value():
    logits = torch.tensor([[0.0, 0.0], [2.0, 0.0]])
    loss = nd_core.softmax_cross_entropy(logits, [1, 0])
    expected = np.log(2.0) + np.log(1.0 + np.exp(-2.0))
    assert float(loss) == pytest.approx(expected, rel=1e-6)


def test_backward_accumulates_shared_parameter():
    w = torch.nn.Parameter(torch.tensor([1.0, 2.0]))
    unused = torch.nn.Parameter(torch.ones(3))
    x, y = torch.tensor([3.0, 4.0]), torch.tensor([-1.0, 5.0])
    grads = nd_core.backward((w * x).sum() + (w * y).sum(), {"w": w, "unused": unused})
    assert torch.allclose(grads["w"], x + y)
    assert torch.equal(grads["unused"], torch.zeros(3))


def test_backward_requires_scalar():
    w = torch.nn.Parameter(torch.ones(2))
    with pytest.raises(ContractError):
        nd_core.backward(w * 2, {"w": w})


def test_set_precision(float64):
    assert torch.get_default_dtype() == torch.float64
    with pytest.raises(ContractError):
        nd_core.set_precision("float16")


def test_layers_pass_gradcheck(float64):
    torch.manual_seed(3)
    attn = nd_core.MultiHeadAttention(4, 2)
    conv = nd_core.DepthwiseConv(4, 3)
    ff = nd_core.FeedForward(4, 6)
    norm = nd_core.LayerNorm(4)
    x = torch.randn(5, 4, requires_grad=True)
    mask = torch.tril(torch.ones(5, 5, dtype=torch.bool))
    kw = dict(eps=1e-4, atol=1e-6, rtol=1e-3)
    assert torch.autograd.gradcheck(lambda t: attn(t, mask), (x,), **kw)
    assert torch.autograd.gradcheck(conv, (x,), **kw)
    assert torch.autograd.gradcheck(ff, (x,), **kw)
    assert torch.autograd.gradcheck(norm, (x,), **kw)


def test_checkpoint_roundtrip(tmp_path: Path):
    tensors = {"a": torch.randn(2, 3), "b.c": torch.arange(4.0)}
    nd_core.save_checkpoint(tensors, tmp_path, "model", meta={"kind": "test"})
    loaded, meta = nd_core.load_checkpoint(tmp_path, "model")
    assert meta == {"kind": "test"}
    assert set(loaded) == {"a", "b.c"}
    for name, t in tensors.items():
        assert torch.allclose(loaded[name], t)


def test_checkpoint_missing(tmp_path: Path):
    with pytest.raises(ArtifactMissingError):
        nd_core.load_checkpoint(tmp_path, "model")


def test_checkpoint_truncated_blob(tmp_path: Path):
    nd_core.save_checkpoint({"a": torch.randn(4, 4)}, tmp_path, "model")
    blob = tmp_path / "model.bin"
    blob.write_bytes(blob.read_bytes()[:30])
    with pytest.raises(DataFormatError) as info:
        nd_core.load_checkpoint(tmp_path, "model")
    assert info.value.byte_offset == 30


def test_checkpoint_corrupt_manifest(tmp_path: Path):
    nd_core.save_checkpoint({"a": torch.randn(2)}, tmp_path, "model")
    (tmp_path / "model.json").write_text('{"format": ', encoding="utf-8")
    with pytest.raises(DataFormatError):
        nd_core.load_checkpoint(tmp_path, "model")


def test_checkpoint_unknown_format(tmp_path: Path):
    nd_core.save_checkpoint({"a": torch.randn(2)}, tmp_path, "model")
    manifest = json.loads((tmp_path / "model.json").read_text(encoding="utf-8"))
    manifest["format"] = "other"
    (tmp_path / "model.json").write_text(json.dumps(manifest), encoding="utf-8")
    with pytest.raises(DataFormatError):
        nd_core.load_checkpoint(tmp_path, "model")
