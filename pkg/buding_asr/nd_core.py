"""
nd_core - 稠密张量运算层

张量与反向自动微分由 torch 提供（Tape 即 autograd 计算图），
本模块在其上补齐每个算子的显式形状检查、掩码注意力、梯度收集和检查点格式。
约定：所有序列张量为二维 [时间, 维度]，行优先；除最后一维的偏置加法外不做广播。
"""

import json
import math
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from .common import (ArtifactMissingError, ContractError, DataFormatError,
                     InvalidMaskError, ShapeError, TargetError, get_logger)

logger = get_logger(__name__)

CHECKPOINT_FORMAT = "buding-ndcore-v1"
_PRECISIONS = {"float32": torch.float32, "float64": torch.float64}


def set_precision(name: str) -> torch.dtype:
    """切换默认浮点精度：训练/推理 float32，梯度检查 float64"""
    if name not in _PRECISIONS:
        raise ContractError(f"未知精度 {name}，可选 {list(_PRECISIONS)}")
    dtype = _PRECISIONS[name]
    torch.set_default_dtype(dtype)
    return dtype


def _shape(t: torch.Tensor) -> list:
    return list(t.shape)


def _require_2d(name: str, t: torch.Tensor):
    if t.dim() != 2:
        raise ShapeError(f"{name} 需要二维张量，实际形状 {_shape(t)}")


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """矩阵乘法，内维不一致时报错并给出两个形状"""
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul 维度不匹配: {_shape(a)} × {_shape(b)}")
    return a @ b


def linear(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """x @ W^T + b，权重布局与 torch.nn.Linear 一致"""
    out = matmul(x, weight.t())
    if bias is not None:
        if bias.shape[-1] != out.shape[-1]:
            raise ShapeError(f"偏置维度不匹配: {_shape(out)} + {_shape(bias)}")
        out = out + bias
    return out


def masked_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, mask: torch.Tensor,
                     heads: int, return_weights: bool = False):
    """
    多头缩放点积注意力
    mask: [Tq, Tk] 布尔矩阵，True 表示可见；被屏蔽位置权重严格为 0
    """
    for name, t in (("q", q), ("k", k), ("v", v)):
        _require_2d(name, t)
    if k.shape != v.shape or q.shape[1] != k.shape[1]:
        raise ShapeError(f"注意力输入形状不一致: q{_shape(q)} k{_shape(k)} v{_shape(v)}")
    if mask.dtype != torch.bool or tuple(mask.shape) != (q.shape[0], k.shape[0]):
        raise ShapeError(f"掩码形状应为 [{q.shape[0]}, {k.shape[0]}] 的布尔矩阵，实际 {_shape(mask)} {mask.dtype}")
    d_model = q.shape[1]
    if heads < 1 or d_model % heads != 0:
        raise ShapeError(f"模型维度 {d_model} 不能被头数 {heads} 整除")
    dead_rows = (~mask.any(dim=1)).nonzero().flatten()
    if dead_rows.numel() > 0:
        raise InvalidMaskError(f"查询位置 {dead_rows.tolist()} 的所有键都被屏蔽")

    dh = d_model // heads
    qh = q.reshape(q.shape[0], heads, dh).transpose(0, 1)
    kh = k.reshape(k.shape[0], heads, dh).transpose(0, 1)
    vh = v.reshape(v.shape[0], heads, dh).transpose(0, 1)
    scores = torch.matmul(qh, kh.transpose(1, 2)) / math.sqrt(dh)
    scores = scores.masked_fill(~mask.unsqueeze(0), float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    out = torch.matmul(weights, vh).transpose(0, 1).reshape(q.shape[0], d_model)
    if return_weights:
        return out, weights
    return out


def layer_norm(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    if weight.shape[-1] != x.shape[-1] or bias.shape[-1] != x.shape[-1]:
        raise ShapeError(f"layer_norm 维度不匹配: x{_shape(x)} weight{_shape(weight)}")
    return F.layer_norm(x, (x.shape[-1],), weight, bias, eps)


def feed_forward(x: torch.Tensor, w1: torch.Tensor, b1: torch.Tensor,
                 w2: torch.Tensor, b2: torch.Tensor) -> torch.Tensor:
    """两层前馈：linear → GELU → linear"""
    return linear(F.gelu(linear(x, w1, b1)), w2, b2)


def depthwise_conv1d(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None,
                     padding: str = "causal") -> torch.Tensor:
    """
    逐通道一维卷积
    x: [T, D]，weight: [D, K]
    padding="causal" 左侧补 K-1 个零；padding="same" 两侧对称补零（K 为奇数）
    """
    _require_2d("x", x)
    _require_2d("weight", weight)
    if weight.shape[0] != x.shape[1]:
        raise ShapeError(f"卷积通道不匹配: x{_shape(x)} weight{_shape(weight)}")
    kernel = weight.shape[1]
    if padding == "causal":
        pad = (kernel - 1, 0)
    elif padding == "same":
        if kernel % 2 == 0:
            raise ContractError("same 填充需要奇数卷积核")
        pad = (kernel // 2, kernel // 2)
    else:
        raise ContractError(f"未知填充方式 {padding}")
    xt = F.pad(x.t().unsqueeze(0), pad)
    out = F.conv1d(xt, weight.unsqueeze(1), bias, groups=x.shape[1])
    return out.squeeze(0).t()


def embedding_lookup(table: torch.Tensor, indices) -> torch.Tensor:
    idx = torch.as_tensor(indices, dtype=torch.long)
    if idx.numel() > 0 and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise TargetError(f"索引越界: 范围 [0, {table.shape[0]})，实际 {idx.tolist()}")
    return F.embedding(idx, table)


def softmax_cross_entropy(logits: torch.Tensor, targets, reduction: str = "sum") -> torch.Tensor:
    """logits: [N, C]；targets 越界时抛出 TargetError"""
    _require_2d("logits", logits)
    tgt = torch.as_tensor(targets, dtype=torch.long)
    if tgt.dim() != 1 or tgt.shape[0] != logits.shape[0]:
        raise ShapeError(f"目标数量 {_shape(tgt)} 与 logits {_shape(logits)} 不一致")
    if tgt.numel() > 0 and (tgt.min() < 0 or tgt.max() >= logits.shape[1]):
        raise TargetError(f"目标越界: 类别数 {logits.shape[1]}，目标 {tgt.tolist()}")
    return F.cross_entropy(logits, tgt, reduction=reduction)


def backward(loss: torch.Tensor, params: Union[Mapping[str, torch.Tensor], torch.nn.Module]) -> Dict[str, torch.Tensor]:
    """
    对标量损失反向传播，返回 {参数名: 梯度}
    同一参数被多次使用时梯度自动累加；未参与计算的参数梯度为零张量
    """
    if loss.dim() != 0 and loss.numel() != 1:
        raise ContractError(f"backward 需要标量损失，实际形状 {_shape(loss)}")
    named = dict(params.named_parameters()) if isinstance(params, torch.nn.Module) else dict(params)
    loss.reshape(()).backward()
    grads = {}
    for name, p in named.items():
        grads[name] = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
    return grads


# ---------------------------------------------------------------------------
# 检查点：JSON 清单 + 小端 float32 原始二进制
# ---------------------------------------------------------------------------

def save_checkpoint(tensors: Mapping[str, torch.Tensor], directory, prefix: str = "model",
                    meta: Optional[dict] = None) -> Path:
    out_dir = Path(directory)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    blob_path = out_dir / f"{prefix}.bin"
    with open(blob_path, "wb") as f:
        for name, tensor in tensors.items():
            arr = tensor.detach().cpu().numpy().astype("<f4")
            f.write(arr.tobytes(order="C"))
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "numel": int(arr.size)})
            offset += arr.size * 4
    manifest = {"format": CHECKPOINT_FORMAT, "dtype": "float32-le", "total_bytes": offset,
                "params": entries, "meta": meta or {}}
    manifest_path = out_dir / f"{prefix}.json"
    manifest_path.write_text(json.dumps(manifest, ensure_ascii=False, indent=2), encoding="utf-8")
    logger.info(f"✅ 检查点已保存: {manifest_path} ({len(entries)} 个参数, {offset} 字节)")
    return manifest_path


def load_checkpoint(directory, prefix: str = "model") -> Tuple[Dict[str, torch.Tensor], dict]:
    in_dir = Path(directory)
    manifest_path = in_dir / f"{prefix}.json"
    blob_path = in_dir / f"{prefix}.bin"
    for p in (manifest_path, blob_path):
        if not p.exists():
            raise ArtifactMissingError(p, "请先运行对应的训练命令生成检查点")
    text = manifest_path.read_text(encoding="utf-8")
    try:
        manifest = json.loads(text)
    except json.JSONDecodeError as e:
        raise DataFormatError(f"检查点清单解析失败: {manifest_path}: {e.msg}",
                              byte_offset=len(text[:e.pos].encode("utf-8"))) from e
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise DataFormatError(f"未知的检查点格式: {manifest.get('format')}", byte_offset=0)

    blob = blob_path.read_bytes()
    if len(blob) != manifest.get("total_bytes"):
        raise DataFormatError(
            f"检查点数据大小 {len(blob)} 与清单声明的 {manifest.get('total_bytes')} 不一致",
            byte_offset=min(len(blob), int(manifest.get("total_bytes") or 0)))
    tensors = {}
    for entry in manifest["params"]:
        start = entry["offset"]
        end = start + entry["numel"] * 4
        if int(np.prod(entry["shape"], dtype=np.int64)) != entry["numel"] or end > len(blob):
            raise DataFormatError(f"参数 {entry['name']} 越界或形状不一致", byte_offset=start)
        arr = np.frombuffer(blob, dtype="<f4", count=entry["numel"], offset=start)
        tensors[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).copy()).to(torch.get_default_dtype())
    return tensors, manifest.get("meta", {})


def save_grid(grid: np.ndarray, directory, prefix: str = "posteriors", meta: Optional[dict] = None) -> Path:
    """调试用：把后验网格按检查点格式落盘"""
    return save_checkpoint({"grid": torch.as_tensor(np.asarray(grid))}, directory, prefix, meta)


# ---------------------------------------------------------------------------
# 参数容器：参数由 torch.nn 保存，前向统一走上面的带检查算子
# ---------------------------------------------------------------------------

class Linear(torch.nn.Linear):
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(torch.nn.LayerNorm):
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return layer_norm(x, self.weight, self.bias, self.eps)


class FeedForward(torch.nn.Module):
    def __init__(self, d_model: int, d_ff: int):
        super().__init__()
        self.w1 = Linear(d_model, d_ff)
        self.w2 = Linear(d_ff, d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return feed_forward(x, self.w1.weight, self.w1.bias, self.w2.weight, self.w2.bias)


class MultiHeadAttention(torch.nn.Module):
    """q/k/v/o 四个投影；键值投影可单独调用（KV 缓存）"""

    def __init__(self, d_model: int, heads: int):
        super().__init__()
        if d_model % heads != 0:
            raise ShapeError(f"模型维度 {d_model} 不能被头数 {heads} 整除")
        self.heads = heads
        self.q_proj = Linear(d_model, d_model)
        self.k_proj = Linear(d_model, d_model)
        self.v_proj = Linear(d_model, d_model)
        self.o_proj = Linear(d_model, d_model)

    def project_kv(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.k_proj(x), self.v_proj(x)

    def attend(self, x_q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        return self.o_proj(masked_attention(self.q_proj(x_q), k, v, mask, self.heads))

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        k, v = self.project_kv(x)
        return self.attend(x, k, v, mask)


class DepthwiseConv(torch.nn.Module):
    def __init__(self, channels: int, kernel: int, padding: str = "causal"):
        super().__init__()
        self.padding = padding
        self.weight = torch.nn.Parameter(torch.randn(channels, kernel) / math.sqrt(kernel))
        self.bias = torch.nn.Parameter(torch.zeros(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return depthwise_conv1d(x, self.weight, self.bias, self.padding)
