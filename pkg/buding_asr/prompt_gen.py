"""
提示生成：过滤 blank 帧的 CTC 提示 + 块上下文提示，按块拼接成提示块 U^{j∈b}
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import torch

from . import nd_core
from .common import ContractError, SequencingError
from .speech_subnet import BlockPlan

PROMPT_VARIANTS = ("ctc", "context", "both")


def make_ctc_prompts(h_block: torch.Tensor, labels: Sequence[int], mlp_ctc: nd_core.Linear,
                     frame_offset: int = 0, blank: int = 0) -> Tuple[torch.Tensor, List[int]]:
    """
    保留贪心输出非 blank 的帧并按帧序映射到解码器嵌入空间
    返回 (提示矩阵, 1 起始的全局帧号)
    """
    if len(labels) != h_block.shape[0]:
        raise ContractError(f"贪心标签 {len(labels)} 个，与块帧数 {h_block.shape[0]} 不一致")
    keep = [t for t, z in enumerate(labels) if int(z) != blank]
    if not keep:
        return h_block.new_zeros(0, mlp_ctc.out_features), []
    prompts = mlp_ctc(h_block[torch.as_tensor(keep, dtype=torch.long)])
    return prompts, [frame_offset + t + 1 for t in keep]


def make_context_prompt(c_nb: torch.Tensor, mlp_cxt: nd_core.Linear) -> torch.Tensor:
    if c_nb.dim() != 1 or c_nb.shape[0] != mlp_cxt.in_features:
        raise ContractError(f"上下文向量维度应为 {mlp_cxt.in_features}，实际 {list(c_nb.shape)}")
    return mlp_cxt(c_nb.unsqueeze(0))[0]


@dataclass
class PromptChunk:
    block_index: int
    ctc_prompts: torch.Tensor
    context_prompt: Optional[torch.Tensor]
    kept_frame_indices: List[int]
    context_first: bool = False

    def __len__(self) -> int:
        return int(self.ctc_prompts.shape[0]) + (1 if self.context_prompt is not None else 0)

    def vectors(self) -> torch.Tensor:
        parts = [self.ctc_prompts]
        if self.context_prompt is not None:
            cxt = self.context_prompt.unsqueeze(0)
            parts = [cxt] + parts if self.context_first else parts + [cxt]
        return torch.cat(parts, dim=0)

    def layout(self) -> List[Tuple[str, int]]:
        """每个提示的 (类型, 帧号或块号)，ctc 提示记帧号，上下文提示记块号"""
        items = [("ctc", t) for t in self.kept_frame_indices]
        if self.context_prompt is not None:
            cxt = ("context", self.block_index)
            items = [cxt] + items if self.context_first else items + [cxt]
        return items


def assemble_chunk(b: int, ctc_prompts: torch.Tensor, context_prompt: Optional[torch.Tensor],
                   kept_frame_indices: Sequence[int] = (), context_first: bool = False) -> PromptChunk:
    """块内顺序：CTC 提示按帧序在前，上下文提示在后（context_first 可翻转）"""
    if ctc_prompts.shape[0] != len(kept_frame_indices):
        raise ContractError("CTC 提示数量与保留帧号数量不一致")
    if any(b2 <= a2 for a2, b2 in zip(kept_frame_indices, list(kept_frame_indices)[1:])):
        raise ContractError(f"保留帧号必须严格递增: {list(kept_frame_indices)}")
    return PromptChunk(b, ctc_prompts, context_prompt, list(kept_frame_indices), context_first)


@dataclass
class PromptStream:
    """累积的提示块；cumulative[b-1] = J_b"""
    chunks: List[PromptChunk] = field(default_factory=list)
    cumulative: List[int] = field(default_factory=list)

    def append(self, chunk: PromptChunk):
        if chunk.block_index != len(self.chunks) + 1:
            raise SequencingError(f"提示块应为第 {len(self.chunks) + 1} 块，收到第 {chunk.block_index} 块")
        self.chunks.append(chunk)
        self.cumulative.append((self.cumulative[-1] if self.cumulative else 0) + len(chunk))

    @property
    def num_prompts(self) -> int:
        return self.cumulative[-1] if self.cumulative else 0

    def matrix(self, d_model: int) -> torch.Tensor:
        if not self.chunks:
            return torch.zeros(0, d_model)
        return torch.cat([c.vectors() for c in self.chunks], dim=0)

    def layout(self) -> List[Tuple[str, int, int]]:
        """(类型, 帧号/块号, 所属块) 按提示顺序"""
        out = []
        for chunk in self.chunks:
            out += [(kind, pos, chunk.block_index) for kind, pos in chunk.layout()]
        return out

    def ctc_prompt_count(self) -> int:
        return sum(int(c.ctc_prompts.shape[0]) for c in self.chunks)


class PromptGenerator(torch.nn.Module):
    """MLP_ctc 与 MLP_cxt 两个线性映射（随机初始化）"""

    def __init__(self, d_encoder: int, d_decoder: int, variant: str = "both", context_first: bool = False):
        super().__init__()
        if variant not in PROMPT_VARIANTS:
            raise ContractError(f"未知提示类型 {variant}")
        self.variant = variant
        self.context_first = context_first
        self.mlp_ctc = nd_core.Linear(d_encoder, d_decoder)
        self.mlp_cxt = nd_core.Linear(d_encoder, d_decoder)

    @property
    def d_decoder(self) -> int:
        return self.mlp_ctc.out_features

    def chunk_for_block(self, b: int, h_block: torch.Tensor, labels: Sequence[int], c_nb: torch.Tensor,
                        frame_offset: int, blank: int = 0) -> PromptChunk:
        if self.variant in ("ctc", "both"):
            ctc, kept = make_ctc_prompts(h_block, labels, self.mlp_ctc, frame_offset, blank)
        else:
            ctc, kept = h_block.new_zeros(0, self.d_decoder), []
        cxt = make_context_prompt(c_nb, self.mlp_cxt) if self.variant in ("context", "both") else None
        return assemble_chunk(b, ctc, cxt, kept, self.context_first)

    def build_prompt_stream(self, h: torch.Tensor, labels: Sequence[int], contexts: Sequence[torch.Tensor],
                            plan: BlockPlan, blank: int = 0) -> PromptStream:
        """整句一次性构建（批处理/训练用），与逐块构建逐元素一致"""
        if len(labels) != h.shape[0] or len(contexts) != plan.num_blocks:
            raise ContractError("整句提示构建的输入长度与分块计划不一致")
        stream = PromptStream()
        for b in range(1, plan.num_blocks + 1):
            start, end = plan.sub_span(b)
            stream.append(self.chunk_for_block(b, h[start:end], labels[start:end], contexts[b - 1], start, blank))
        return stream
