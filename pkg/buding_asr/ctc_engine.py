"""
CTC 引擎：后验头、损失、贪心解码与折叠、Viterbi 强制对齐、前缀概率递推
所有概率累积都在对数域进行
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from . import nd_core
from .common import ContractError, InfeasibleAlignmentError, ShapeError

NEG_INF = float("-inf")


class CtcHead(torch.nn.Module):
    """线性映射到 |V|+1 个 logits（第 0 类为 blank）"""

    def __init__(self, d_model: int, num_classes: int):
        super().__init__()
        self.proj = nd_core.Linear(d_model, num_classes)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return torch.log_softmax(self.proj(h), dim=-1)


@dataclass
class CtcPosteriorGrid:
    """τ × (|V|+1) 的逐帧后验，保存对数概率（可对 H 求导）"""
    log_probs: torch.Tensor
    blank: int = 0
    _log_np: Optional[np.ndarray] = field(default=None, init=False, repr=False, compare=False)

    @property
    def num_frames(self) -> int:
        return int(self.log_probs.shape[0])

    @property
    def num_classes(self) -> int:
        return int(self.log_probs.shape[1])

    def log_numpy(self) -> np.ndarray:
        """float64 只读副本，首次调用时转换并缓存"""
        if self._log_np is None:
            arr = self.log_probs.detach().cpu().numpy().astype(np.float64)
            arr.setflags(write=False)
            self._log_np = arr
        return self._log_np

    def probs(self) -> np.ndarray:
        return np.exp(self.log_numpy())

    def slice(self, start: int, end: int) -> "CtcPosteriorGrid":
        return CtcPosteriorGrid(self.log_probs[start:end], self.blank)

    @classmethod
    def from_probs(cls, probs, blank: int = 0) -> "CtcPosteriorGrid":
        p = torch.as_tensor(np.asarray(probs), dtype=torch.get_default_dtype())
        return cls(torch.log(p), blank)


def ctc_posteriors(h: torch.Tensor, head: CtcHead, blank: int = 0) -> CtcPosteriorGrid:
    if h.dim() != 2 or h.shape[1] != head.proj.in_features:
        raise ShapeError(f"CTC 头需要 [帧, {head.proj.in_features}] 输入，实际 {list(h.shape)}")
    return CtcPosteriorGrid(head(h), blank)


def collapse(z: Sequence[int], blank: int = 0) -> List[int]:
    """映射 F：先合并相邻重复，再删除 blank"""
    out = []
    prev = None
    for tok in z:
        tok = int(tok)
        if tok != prev and tok != blank:
            out.append(tok)
        prev = tok
    return out


def min_frames(y: Sequence[int]) -> int:
    """转写所需的最少帧数：长度 + 相邻重复数（重复之间必须插入 blank）"""
    return len(y) + sum(1 for a, b in zip(y, y[1:]) if a == b)


def _check_feasible(grid: CtcPosteriorGrid, y: Sequence[int]):
    if any(int(t) == grid.blank or not 0 <= int(t) < grid.num_classes for t in y):
        raise ContractError(f"转写包含 blank 或越界 token: {list(y)}")
    need = min_frames(y)
    if grid.num_frames < need:
        raise InfeasibleAlignmentError(f"{grid.num_frames} 帧不足以对齐长度 {len(y)} 的转写（至少需要 {need} 帧）")


def ctc_loss(grid: CtcPosteriorGrid, y: Sequence[int]) -> torch.Tensor:
    """-log Σ_{F(Z)=Y} Π q(z_t)，前向算法由 torch 的 ctc_loss 实现"""
    _check_feasible(grid, y)
    if len(y) == 0:
        return -grid.log_probs[:, grid.blank].sum()
    targets = torch.as_tensor([list(y)], dtype=torch.long)
    return F.ctc_loss(grid.log_probs.unsqueeze(1), targets,
                      input_lengths=torch.as_tensor([grid.num_frames], dtype=torch.long),
                      target_lengths=torch.as_tensor([len(y)], dtype=torch.long),
                      blank=grid.blank, reduction="sum", zero_infinity=False)


def greedy_decode(grid: CtcPosteriorGrid) -> Tuple[List[int], List[int]]:
    """逐帧 argmax（并列时取最小下标），再折叠"""
    z = np.argmax(grid.log_numpy(), axis=1).tolist()
    return z, collapse(z, grid.blank)


@dataclass
class ForcedAlignment:
    """
    states: 每帧对齐的扩展状态（偶数为 blank，2i+1 为第 i 个 token）
    end_frames / emit_frames: 每个 token 最后 / 首个对齐帧，1 起始帧号
    """
    states: List[int]
    frame_tokens: List[int]
    end_frames: List[int]
    emit_frames: List[int]
    log_prob: float


def forced_align(grid: CtcPosteriorGrid, y: Sequence[int]) -> ForcedAlignment:
    """
    扩展状态图上的 Viterbi 最优路径
    并列时依次偏好 停留 > 来自 s-1 > 来自 s-2，末帧偏好以 blank 结束，即 token 尽早发射
    """
    _check_feasible(grid, y)
    lp = grid.log_numpy()
    T = lp.shape[0]
    ext = [grid.blank]
    for tok in y:
        ext += [int(tok), grid.blank]
    S = len(ext)
    delta = np.full((T, S), NEG_INF)
    back = np.zeros((T, S), dtype=np.int64)
    delta[0, 0] = lp[0, ext[0]]
    if S > 1:
        delta[0, 1] = lp[0, ext[1]]
    for t in range(1, T):
        for s in range(S):
            best, arg = delta[t - 1, s], s
            if s >= 1 and delta[t - 1, s - 1] > best:
                best, arg = delta[t - 1, s - 1], s - 1
            if s >= 2 and ext[s] != grid.blank and ext[s] != ext[s - 2] and delta[t - 1, s - 2] > best:
                best, arg = delta[t - 1, s - 2], s - 2
            delta[t, s] = best + lp[t, ext[s]]
            back[t, s] = arg
    if S == 1:
        last = 0
    else:
        last = S - 1 if delta[T - 1, S - 1] >= delta[T - 1, S - 2] else S - 2
    log_prob = float(delta[T - 1, last])
    if not np.isfinite(log_prob):
        raise InfeasibleAlignmentError("不存在概率非零的对齐路径")
    states = [0] * T
    states[T - 1] = last
    for t in range(T - 1, 0, -1):
        states[t - 1] = int(back[t, states[t]])
    end_frames, emit_frames = [], []
    for i in range(len(y)):
        frames = [t for t, s in enumerate(states) if s == 2 * i + 1]
        emit_frames.append(frames[0] + 1)
        end_frames.append(frames[-1] + 1)
    return ForcedAlignment(states=states, frame_tokens=[ext[s] for s in states],
                           end_frames=end_frames, emit_frames=emit_frames, log_prob=log_prob)


def path_log_prob(grid: CtcPosteriorGrid, z: Sequence[int]) -> float:
    lp = grid.log_numpy()
    return float(lp[np.arange(len(z)), np.asarray(z)].sum())


# ---------------------------------------------------------------------------
# 前缀概率 γ_b / γ_n
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CtcPrefixScore:
    """对数域的 γ_b(g, t)、γ_n(g, t)；frame 为已处理的最后一帧（0 起始，-1 表示尚未读入帧）"""
    log_gb: float
    log_gn: float
    frame: int = -1
    last_token: Optional[int] = None

    @property
    def log_prob(self) -> float:
        return float(np.logaddexp(self.log_gb, self.log_gn))

    @classmethod
    def empty(cls) -> "CtcPrefixScore":
        return cls(0.0, NEG_INF, -1, None)


def as_log_array(grid) -> np.ndarray:
    """CtcPosteriorGrid 或数组 → float64 对数概率数组"""
    if isinstance(grid, CtcPosteriorGrid):
        return grid.log_numpy()
    return np.asarray(grid, dtype=np.float64)


def _row(grid, t: int) -> np.ndarray:
    return as_log_array(grid)[t]


def prefix_score_stay(prev: CtcPrefixScore, t: int, grid, blank: int = 0) -> CtcPrefixScore:
    """前缀不变地读入第 t 帧：以 blank 或重复最后一个 token 继续"""
    if prev.frame != t - 1:
        raise ContractError(f"前缀分数停留在第 {prev.frame} 帧，不能直接读入第 {t} 帧")
    row = _row(grid, t)
    gb = float(np.logaddexp(prev.log_gb, prev.log_gn)) + row[blank]
    gn = prev.log_gn + row[prev.last_token] if prev.last_token is not None else NEG_INF
    return CtcPrefixScore(float(gb), float(gn), t, prev.last_token)


def prefix_score_step(prev: CtcPrefixScore, c: int, t: int, grid, own: Optional[CtcPrefixScore] = None,
                      blank: int = 0) -> CtcPrefixScore:
    """
    由前缀 g 在 t-1 帧的分数得到 g+c 在 t 帧的分数
    γ_n(g+c,t) = [γ_n(g+c,t-1) + Φ(t-1)]·q(c,t)，Φ = γ_b(g) + (last(g)≠c ? γ_n(g) : 0)
    γ_b(g+c,t) = [γ_b(g+c,t-1) + γ_n(g+c,t-1)]·q(φ,t)
    own 为 g+c 在 t-1 帧已有的分数（缺省为零概率）
    """
    if c == blank:
        raise ContractError("前缀扩展 token 不能是 blank")
    if prev.frame != t - 1:
        raise ContractError(f"前缀分数停留在第 {prev.frame} 帧，不能直接扩展到第 {t} 帧")
    row = _row(grid, t)
    phi = prev.log_gb if prev.last_token == c else float(np.logaddexp(prev.log_gb, prev.log_gn))
    own_gb = own.log_gb if own is not None else NEG_INF
    own_gn = own.log_gn if own is not None else NEG_INF
    gn = float(np.logaddexp(own_gn, phi)) + row[c]
    gb = float(np.logaddexp(own_gb, own_gn)) + row[blank]
    return CtcPrefixScore(float(gb), float(gn), t, int(c))


def merge_prefix_scores(a: CtcPrefixScore, b: CtcPrefixScore) -> CtcPrefixScore:
    """同一前缀的两条路径合并：γ_b、γ_n 分别 log-sum-exp"""
    if a.frame != b.frame or a.last_token != b.last_token:
        raise ContractError("只能合并同一帧、同一前缀的分数")
    return CtcPrefixScore(float(np.logaddexp(a.log_gb, b.log_gb)),
                          float(np.logaddexp(a.log_gn, b.log_gn)), a.frame, a.last_token)


def prefix_scores(y: Sequence[int], grid, blank: int = 0) -> List[List[CtcPrefixScore]]:
    """
    全表 table[l][t] = (γ_b, γ_n)(Y^l, t)，l = 0..|Y|，t = 0..T-1
    p_ctc(Y^l, t) = table[l][t].log_prob
    """
    lp = as_log_array(grid)
    T = lp.shape[0]
    empty = CtcPrefixScore.empty()
    table: List[List[CtcPrefixScore]] = []
    row_scores = []
    cur = empty
    for t in range(T):
        cur = prefix_score_stay(cur, t, lp, blank)
        row_scores.append(cur)
    table.append(row_scores)
    for l, c in enumerate(y, start=1):
        prev_row = table[l - 1]
        row_scores = []
        own = None
        for t in range(T):
            parent = prev_row[t - 1] if t > 0 else (empty if l == 1 else
                                                     CtcPrefixScore(NEG_INF, NEG_INF, -1, int(y[l - 2])))
            own = prefix_score_step(parent, int(c), t, lp, own, blank)
            row_scores.append(own)
        table.append(row_scores)
    return table
