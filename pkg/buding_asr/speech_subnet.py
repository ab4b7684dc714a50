"""
分块语音子网络（上下文继承式 conformer 简化版）

第 n 层在第 b 块的输入为上一层块输出拼接上一块的上下文向量 c_{n-1,b-1}（末尾一个位置），
输出拆回块位置 O_{n,b} 与新上下文 c_{n,b}；最后一层的块输出即 H^{t∈b}。
块内自注意力只看本块位置与继承的上下文位置，因此对未来块严格因果。
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from . import nd_core
from .common import ContractError, SequencingError, ShapeError
from .config import EncoderConfig


@dataclass
class BlockPlan:
    """
    分块计划；边界均为 1 起始的帧号（块 b 覆盖 (T_{b-1}, T_b]），
    input_ends 为输入帧边界 T_b，sub_ends 为降采样后边界 τ_b
    """
    block_length: int
    subsample: int
    input_ends: List[int]
    sub_ends: List[int]

    @property
    def num_blocks(self) -> int:
        return len(self.input_ends)

    @property
    def num_frames(self) -> int:
        return self.input_ends[-1]

    @property
    def num_sub_frames(self) -> int:
        return self.sub_ends[-1]

    def input_span(self, b: int) -> Tuple[int, int]:
        """第 b 块（1 起始）的输入帧切片 [start, end)"""
        start = self.input_ends[b - 2] if b > 1 else 0
        return start, self.input_ends[b - 1]

    def sub_span(self, b: int) -> Tuple[int, int]:
        start = self.sub_ends[b - 2] if b > 1 else 0
        return start, self.sub_ends[b - 1]

    def validate(self, num_frames: Optional[int] = None):
        for ends in (self.input_ends, self.sub_ends):
            if not ends or any(b <= a for a, b in zip([0] + ends[:-1], ends)):
                raise ContractError(f"块边界必须严格递增: {ends}")
        if len(self.input_ends) != len(self.sub_ends):
            raise ContractError("输入边界与降采样边界的块数不一致")
        if any(s > t for s, t in zip(self.sub_ends, self.input_ends)):
            raise ContractError("降采样边界 τ_b 不能超过输入边界 T_b")
        if num_frames is not None and self.input_ends[-1] != num_frames:
            raise ContractError(f"分块计划覆盖 {self.input_ends[-1]} 帧，特征实际 {num_frames} 帧")


def make_block_plan(num_frames: int, block_length: int = 8, subsample: int = 4) -> BlockPlan:
    """无重叠、无前瞻；每块 block_length 个降采样帧，最后一块可以更短"""
    if num_frames < 1:
        raise ContractError("空特征序列无法分块")
    if block_length < 1:
        raise ContractError(f"块长必须 >= 1，当前 {block_length}")
    step = block_length * subsample
    input_ends = list(range(step, num_frames, step)) + [num_frames]
    sub_ends = [math.ceil(t / subsample) for t in input_ends]
    plan = BlockPlan(block_length, subsample, input_ends, sub_ends)
    plan.validate(num_frames)
    return plan


def single_block_plan(num_frames: int, subsample: int = 4) -> BlockPlan:
    """整句一块（批处理条件）"""
    return BlockPlan(math.ceil(num_frames / subsample), subsample, [num_frames],
                     [math.ceil(num_frames / subsample)])


@dataclass
class EncoderState:
    """contexts[n] = c_{n,b}，n = 0..N；block_index = 已处理的块数 b"""
    contexts: List[torch.Tensor]
    block_index: int = 0


class Subsampler(torch.nn.Module):
    """相邻 factor 帧堆叠后线性映射到模型维度，尾部不足时补零"""

    def __init__(self, feature_dim: int, d_model: int, factor: int = 4):
        super().__init__()
        self.factor = factor
        self.feature_dim = feature_dim
        self.proj = nd_core.Linear(feature_dim * factor, d_model)

    def forward(self, block: torch.Tensor) -> torch.Tensor:
        if block.dim() != 2 or block.shape[0] == 0:
            raise ContractError(f"降采样输入必须是非空 [帧, 维度] 张量，实际 {list(block.shape)}")
        if block.shape[1] != self.feature_dim:
            raise ShapeError(f"特征维度应为 {self.feature_dim}，实际 {block.shape[1]}")
        pad = (-block.shape[0]) % self.factor
        if pad:
            block = F.pad(block, (0, 0, 0, pad))
        stacked = block.reshape(block.shape[0] // self.factor, self.factor * self.feature_dim)
        return self.proj(stacked)


class EncoderLayer(torch.nn.Module):
    """pre-norm：自注意力 → 残差，因果逐通道卷积 → 残差，前馈 → 残差"""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.norm_attn = nd_core.LayerNorm(cfg.d_model)
        self.attn = nd_core.MultiHeadAttention(cfg.d_model, cfg.num_heads)
        self.norm_conv = nd_core.LayerNorm(cfg.d_model)
        self.conv = nd_core.DepthwiseConv(cfg.d_model, cfg.conv_kernel, padding="causal")
        self.norm_ff = nd_core.LayerNorm(cfg.d_model)
        self.ff = nd_core.FeedForward(cfg.d_model, cfg.d_ff)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mask = torch.ones(x.shape[0], x.shape[0], dtype=torch.bool)
        h = x + self.attn(self.norm_attn(x), mask)
        h = h + F.silu(self.conv(self.norm_conv(h)))
        return h + self.ff(self.norm_ff(h))


class SpeechSubnet(torch.nn.Module):

    def __init__(self, feature_dim: int, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.subsampler = Subsampler(feature_dim, cfg.d_model, cfg.subsample)
        self.layers = torch.nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.num_layers))
        # c_{n,0}，n = 0..N
        self.initial_contexts = torch.nn.Parameter(torch.randn(cfg.num_layers + 1, cfg.d_model) * 0.02)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def initial_state(self) -> EncoderState:
        return EncoderState(contexts=[c for c in self.initial_contexts], block_index=0)

    def subsample(self, block_features) -> torch.Tensor:
        return self.subsampler(_as_tensor(block_features))

    def stack_forward(self, positions: torch.Tensor, contexts: List[torch.Tensor]) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        """对给定位置逐层应用式 O_n ⊕ c_n = S_n(O_{n-1} ⊕ c_{n-1})"""
        out = positions
        new_contexts = []
        for n, layer in enumerate(self.layers):
            y = layer(torch.cat([out, contexts[n].unsqueeze(0)], dim=0))
            out, ctx = y[:-1], y[-1]
            new_contexts.append(ctx)
        return out, new_contexts

    def encode_block(self, state: EncoderState, block_features, block_index: Optional[int] = None
                     ) -> Tuple[torch.Tensor, EncoderState]:
        b = state.block_index + 1
        if block_index is not None and block_index != b:
            raise SequencingError(f"编码器状态处于第 {state.block_index} 块，不能直接处理第 {block_index} 块")
        if len(state.contexts) != self.num_layers + 1:
            raise ContractError(f"上下文向量数量应为 {self.num_layers + 1}，实际 {len(state.contexts)}")
        x = self.subsample(block_features)
        h, layer_contexts = self.stack_forward(x, state.contexts)
        new_state = EncoderState(contexts=[x.mean(dim=0)] + layer_contexts, block_index=b)
        return h, new_state

    def encode_utterance(self, features, plan: BlockPlan) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        """逐块调用 encode_block；返回拼接后的 H 与每块的 c_{N,b}"""
        feats = _as_tensor(features)
        plan.validate(int(feats.shape[0]))
        state = self.initial_state()
        outputs, contexts = [], []
        for b in range(1, plan.num_blocks + 1):
            start, end = plan.input_span(b)
            h, state = self.encode_block(state, feats[start:end], b)
            expected = plan.sub_span(b)
            if h.shape[0] != expected[1] - expected[0]:
                raise ContractError(f"第 {b} 块降采样长度 {h.shape[0]} 与计划 {expected} 不一致")
            outputs.append(h)
            contexts.append(state.contexts[-1])
        return torch.cat(outputs, dim=0), contexts


def _as_tensor(features) -> torch.Tensor:
    if isinstance(features, torch.Tensor):
        return features.to(torch.get_default_dtype())
    return torch.as_tensor(np.asarray(features), dtype=torch.get_default_dtype())
