"""
纯解码器 Transformer：分块接收提示并输出下一 token 分布

位置方案：提示与 token 各自编号（提示 0..J，0 号为 <sos> 提示 u_0；token 0..I，0 号输入为 <sos>），
再加两值的段嵌入。新提示块到达时已缓存的 token 位置编号不变，缓存无需重算。
掩码规则：提示只看更早的提示与自身；token 看摄入时已有的全部提示、更早的 token 与自身。
"""

import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import torch

from . import nd_core
from .common import ContractError, SequencingError, ShapeError
from .config import DecoderConfig


@dataclass(frozen=True)
class LedgerEntry:
    kind: str
    index: int
    j_visible: int


@dataclass
class NextTokenDistribution:
    """词表上的对数概率（blank 与 <sos> 恒为 -inf）"""
    logp: torch.Tensor

    def __getitem__(self, token: int) -> float:
        return float(self.logp[token])

    def top(self, k: int) -> List[int]:
        return torch.topk(self.logp, k).indices.tolist()


class DecoderLayer(torch.nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.norm_attn = nd_core.LayerNorm(cfg.d_model)
        self.attn = nd_core.MultiHeadAttention(cfg.d_model, cfg.num_heads)
        self.norm_ff = nd_core.LayerNorm(cfg.d_model)
        self.ff = nd_core.FeedForward(cfg.d_model, cfg.d_ff)


class PromptCache:
    """
    单条语音共享的提示缓存（只追加）
    提示不依赖 token，因此同一语音的所有假设可以共用，各会话只记录自己可见的提示数
    """

    def __init__(self, num_layers: int):
        self.keys: List[Optional[torch.Tensor]] = [None] * num_layers
        self.values: List[Optional[torch.Tensor]] = [None] * num_layers
        self.count = 0
        self.chunks: list = []

    def append(self, new_kv: List[Tuple[torch.Tensor, torch.Tensor]]):
        for n, (k, v) in enumerate(new_kv):
            self.keys[n] = k if self.keys[n] is None else torch.cat([self.keys[n], k], dim=0)
            self.values[n] = v if self.values[n] is None else torch.cat([self.values[n], v], dim=0)
        self.count += int(new_kv[0][0].shape[0]) if new_kv else 0


@dataclass(frozen=True)
class DecoderSession:
    """
    增量解码会话（不可变，每次操作返回新会话，分叉即浅拷贝）
    n_prompts 含 u_0；token_kv 为本会话独有的 token 位置缓存
    """
    prompt_cache: PromptCache
    n_prompts: int
    last_block: int = 0
    token_kv: Tuple[Tuple[torch.Tensor, torch.Tensor], ...] = ()
    ledger: Tuple[LedgerEntry, ...] = ()
    tokens: Tuple[int, ...] = ()

    @property
    def num_tokens(self) -> int:
        return len(self.tokens)

    @property
    def cache_length(self) -> int:
        return self.n_prompts + self.num_tokens


class PromptDecoder(torch.nn.Module):

    def __init__(self, vocab_size: int, cfg: DecoderConfig, masked_outputs: Sequence[int] = ()):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.token_embedding = torch.nn.Parameter(torch.randn(vocab_size, d) / math.sqrt(d))
        self.prompt_position = torch.nn.Parameter(torch.randn(cfg.max_prompts + 1, d) * 0.02)
        self.token_position = torch.nn.Parameter(torch.randn(cfg.max_tokens, d) * 0.02)
        self.segment = torch.nn.Parameter(torch.randn(2, d) * 0.02)
        self.sos_prompt = torch.nn.Parameter(torch.randn(d) * 0.02)
        self.layers = torch.nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.num_layers))
        self.final_norm = nd_core.LayerNorm(d)
        self.output_bias = torch.nn.Parameter(torch.zeros(vocab_size))
        out_mask = torch.zeros(vocab_size, dtype=torch.bool)
        out_mask[list(masked_outputs)] = True
        self.register_buffer("output_mask", out_mask, persistent=False)
        # 实际执行前向的位置数（含提示与 token）
        self.position_counter = 0

    @property
    def vocab_size(self) -> int:
        return int(self.token_embedding.shape[0])

    # ------------------------------------------------------------------
    # 嵌入与层计算
    # ------------------------------------------------------------------

    def _prompt_inputs(self, vectors: torch.Tensor, start: int) -> torch.Tensor:
        end = start + vectors.shape[0]
        if end > self.prompt_position.shape[0]:
            raise ContractError(f"提示数 {end} 超过上限 {self.prompt_position.shape[0]}")
        return vectors + self.prompt_position[start:end] + self.segment[0]

    def _token_inputs(self, tokens: Sequence[int], start: int) -> torch.Tensor:
        end = start + len(tokens)
        if end > self.token_position.shape[0]:
            raise ContractError(f"token 数 {end} 超过上限 {self.token_position.shape[0]}")
        emb = nd_core.embedding_lookup(self.token_embedding, list(tokens))
        return emb + self.token_position[start:end] + self.segment[1]

    def _run_layers(self, x: torch.Tensor, past: List[Tuple[torch.Tensor, torch.Tensor]],
                    mask: torch.Tensor) -> Tuple[torch.Tensor, List[Tuple[torch.Tensor, torch.Tensor]]]:
        """新位置 x 在可见的历史键值 past 之上逐层前向；mask 形状 [新位置, 历史+新位置]"""
        self.position_counter += int(x.shape[0])
        new_kv = []
        h = x
        for n, layer in enumerate(self.layers):
            normed = layer.norm_attn(h)
            k_new, v_new = layer.attn.project_kv(normed)
            if past:
                k = torch.cat([past[n][0], k_new], dim=0)
                v = torch.cat([past[n][1], v_new], dim=0)
            else:
                k, v = k_new, v_new
            h = h + layer.attn.attend(normed, k, v, mask)
            h = h + layer.ff(layer.norm_ff(h))
            new_kv.append((k_new, v_new))
        return h, new_kv

    def _logprobs(self, h: torch.Tensor) -> torch.Tensor:
        logits = nd_core.linear(self.final_norm(h), self.token_embedding, self.output_bias)
        logits = logits.masked_fill(self.output_mask, float("-inf"))
        return torch.log_softmax(logits, dim=-1)

    @staticmethod
    def _causal_mask(n_past: int, n_new: int) -> torch.Tensor:
        past = torch.ones(n_new, n_past, dtype=torch.bool)
        new = torch.tril(torch.ones(n_new, n_new, dtype=torch.bool))
        return torch.cat([past, new], dim=1)

    # ------------------------------------------------------------------
    # 增量会话
    # ------------------------------------------------------------------

    def new_session(self) -> DecoderSession:
        """新建会话：首个提示位置固定为 <sos> 提示 u_0"""
        cache = PromptCache(len(self.layers))
        _, kv = self._run_layers(self._prompt_inputs(self.sos_prompt.unsqueeze(0), 0), [],
                                 self._causal_mask(0, 1))
        cache.append(kv)
        return DecoderSession(prompt_cache=cache, n_prompts=1,
                              ledger=(LedgerEntry("prompt", 0, 0),))

    def ingest_prompts(self, session: DecoderSession, chunk) -> DecoderSession:
        b = chunk.block_index
        if b != session.last_block + 1:
            raise SequencingError(f"会话已摄入 {session.last_block} 块，收到第 {b} 块提示")
        cache = session.prompt_cache
        size = len(chunk)
        if len(cache.chunks) >= b:
            cached = cache.chunks[b - 1]
            if cached is not chunk and not (len(cached) == size and torch.equal(cached.vectors(), chunk.vectors())):
                raise SequencingError(f"共享提示缓存中第 {b} 块与本次提示不一致")
        else:
            if cache.count != session.n_prompts:
                raise SequencingError("会话可见提示数与共享缓存不同步")
            if size > 0:
                x = self._prompt_inputs(chunk.vectors(), cache.count)
                past = [(cache.keys[n], cache.values[n]) for n in range(len(self.layers))]
                _, kv = self._run_layers(x, past, self._causal_mask(cache.count, size))
                cache.append(kv)
            cache.chunks.append(chunk)
        start = session.n_prompts
        entries = tuple(LedgerEntry("prompt", start + k, start + k) for k in range(size))
        return replace(session, n_prompts=start + size, last_block=b, ledger=session.ledger + entries)

    def score_next(self, session: DecoderSession, y_prev: int) -> Tuple[NextTokenDistribution, DecoderSession]:
        """把 y_prev 作为下一个 token 输入，返回下一 token 分布；可见提示为当前已摄入的全部提示"""
        if not 0 <= int(y_prev) < self.vocab_size:
            raise ContractError(f"token {y_prev} 超出词表范围 [0, {self.vocab_size})")
        i = session.num_tokens
        cache = session.prompt_cache
        n_p = session.n_prompts
        past = []
        for n in range(len(self.layers)):
            k, v = cache.keys[n][:n_p], cache.values[n][:n_p]
            if session.token_kv:
                k = torch.cat([k, session.token_kv[n][0]], dim=0)
                v = torch.cat([v, session.token_kv[n][1]], dim=0)
            past.append((k, v))
        h, kv = self._run_layers(self._token_inputs([int(y_prev)], i), past, self._causal_mask(n_p + i, 1))
        if session.token_kv:
            token_kv = tuple((torch.cat([old[0], new[0]], dim=0), torch.cat([old[1], new[1]], dim=0))
                             for old, new in zip(session.token_kv, kv))
        else:
            token_kv = tuple(kv)
        dist = NextTokenDistribution(self._logprobs(h)[0])
        new_session = replace(session, token_kv=token_kv, tokens=session.tokens + (int(y_prev),),
                              ledger=session.ledger + (LedgerEntry("token", i, n_p - 1),))
        return dist, new_session

    @staticmethod
    def fork(session: DecoderSession) -> DecoderSession:
        """写时复制：提示缓存共享，token 扩展各自独立"""
        return replace(session)

    # ------------------------------------------------------------------
    # 并行（教师强制）前向
    # ------------------------------------------------------------------

    def batch_forward(self, prompts: torch.Tensor, token_inputs: Sequence[int],
                      target_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        """
        prompts: [J, d]（不含 u_0），token_inputs: 以 <sos> 开头的输入序列
        target_mask: [len(token_inputs), J] 布尔矩阵，第 i 行决定第 i 个目标能看到哪些提示；u_0 始终可见
        返回每个 token 位置的下一 token 对数概率 [len(token_inputs), V]
        """
        J = int(prompts.shape[0])
        n_tok = len(token_inputs)
        if target_mask is None:
            target_mask = torch.ones(n_tok, J, dtype=torch.bool)
        if target_mask.dtype != torch.bool or tuple(target_mask.shape) != (n_tok, J):
            raise ShapeError(f"目标掩码应为 [{n_tok}, {J}] 的布尔矩阵，实际 {list(target_mask.shape)}")
        p_vectors = torch.cat([self.sos_prompt.unsqueeze(0), prompts], dim=0)
        x = torch.cat([self._prompt_inputs(p_vectors, 0), self._token_inputs(token_inputs, 0)], dim=0)
        n_p = J + 1
        size = n_p + n_tok
        mask = torch.zeros(size, size, dtype=torch.bool)
        mask[:n_p, :n_p] = torch.tril(torch.ones(n_p, n_p, dtype=torch.bool))
        mask[n_p:, 0] = True
        mask[n_p:, 1:n_p] = target_mask
        mask[n_p:, n_p:] = torch.tril(torch.ones(n_tok, n_tok, dtype=torch.bool))
        h, _ = self._run_layers(x, [], mask)
        return self._logprobs(h[n_p:])

    def lm_logprobs(self, token_inputs: Sequence[int]) -> torch.Tensor:
        """不带声学提示（仅 u_0）的语言模型预测"""
        return self.batch_forward(self.sos_prompt.new_zeros(0, self.cfg.d_model), token_inputs)
