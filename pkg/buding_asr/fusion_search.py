"""
帧同步 / 标签同步一体化的融合束搜索与流式块驱动

调度：假设第一次被扩展出 token y_l 时，用当时已摄入的提示做一次解码器步进给 y_l 打分，之后不再重打分。
父假设的下一 token 分布按"可见提示数"缓存，新提示块到达后失效。
每个块结束后提交全部束假设的最长公共前缀，提交的 token 不会撤回。
"""

import time
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import torch

from .common import ConfigError, ContractError, get_logger
from .config import DecodeConfig
from .ctc_engine import (CtcPrefixScore, as_log_array, ctc_posteriors, merge_prefix_scores,
                         prefix_score_stay, prefix_score_step)
from .model import AsrModel
from .prompt_decoder import DecoderSession, PromptDecoder
from .prompt_gen import PromptChunk
from .speech_subnet import BlockPlan, make_block_plan, single_block_plan
from .synth_corpus import Vocabulary

logger = get_logger(__name__)


@dataclass(frozen=True)
class FusionWeights:
    lambda_ctc: float = 0.4
    lambda_dec: float = 0.6
    lambda_lm: float = 0.0
    length_penalty: float = 0.0

    def __post_init__(self):
        if min(self.lambda_ctc, self.lambda_dec, self.lambda_lm) < 0:
            raise ConfigError(f"融合权重不能为负: {self}")

    @classmethod
    def from_config(cls, cfg: DecodeConfig) -> "FusionWeights":
        lambda_dec = 0.0 if cfg.mode == "ctc" else cfg.lambda_dec
        return cls(cfg.lambda_ctc, lambda_dec, cfg.lambda_lm, cfg.length_penalty)

    def scaled(self, factor: float) -> "FusionWeights":
        return FusionWeights(self.lambda_ctc * factor, self.lambda_dec * factor,
                             self.lambda_lm * factor, self.length_penalty * factor)


@dataclass
class FusionHypothesis:
    """
    tokens: 标签前缀 Y^l；session: 已输入 <sos> 与 tokens[:-1] 的解码器会话
    dec_logp / lm_logp: 已打分 token 的对数概率和；j_visible[k] 为第 k 个 token 打分时可见的声学提示数
    memo: 下一 token 分布缓存，与同一前缀的后续帧副本共享
    """
    tokens: Tuple[int, ...]
    ctc: CtcPrefixScore
    dec_logp: float = 0.0
    lm_logp: float = 0.0
    session: Optional[DecoderSession] = None
    lm_state: Any = None
    j_visible: Tuple[int, ...] = ()
    scored: int = 0
    memo: Dict[str, Any] = field(default_factory=dict, repr=False, compare=False)

    @property
    def length(self) -> int:
        return len(self.tokens)


def _weighted(weight: float, value: float) -> float:
    # 0 × -inf 记为 0
    return 0.0 if weight == 0 else weight * value


def fusion_score(hyp: FusionHypothesis, t: Optional[int], weights: FusionWeights,
                 lm_logp: Optional[float] = None, length_penalty: Optional[float] = None) -> float:
    """λ_ctc·log p_ctc(Y^l,t) + λ_dec·log p_dec(Y^i) + λ_lm·lm + α·l"""
    if t is not None and hyp.ctc.frame != t:
        raise ContractError(f"假设的 CTC 分数停在第 {hyp.ctc.frame} 帧，不是第 {t} 帧")
    lm = hyp.lm_logp if lm_logp is None else lm_logp
    alpha = weights.length_penalty if length_penalty is None else length_penalty
    return (_weighted(weights.lambda_ctc, hyp.ctc.log_prob) + _weighted(weights.lambda_dec, hyp.dec_logp)
            + _weighted(weights.lambda_lm, lm) + alpha * hyp.length)


class TokenScorer:
    """解码器与外部 LM 的打分入口，记录解码器步数"""

    def __init__(self, vocab: Vocabulary, weights: FusionWeights, decoder: Optional[PromptDecoder] = None,
                 lm=None):
        self.vocab = vocab
        self.weights = weights
        self.decoder = decoder if (decoder is not None and weights.lambda_dec > 0) else None
        self.lm = lm if (lm is not None and weights.lambda_lm > 0) else None
        self.steps = 0

    def initial(self) -> FusionHypothesis:
        session = self.decoder.new_session() if self.decoder is not None else None
        lm_state = self.lm.initial_state() if self.lm is not None else None
        return FusionHypothesis(tokens=(), ctc=CtcPrefixScore.empty(), session=session, lm_state=lm_state)

    def ingest(self, hyp: FusionHypothesis, chunk: PromptChunk) -> FusionHypothesis:
        if self.decoder is None:
            return hyp
        return replace(hyp, session=self.decoder.ingest_prompts(hyp.session, chunk))

    def _feed_token(self, hyp: FusionHypothesis) -> int:
        return hyp.tokens[-1] if hyp.tokens else self.vocab.sos

    def next_dec(self, hyp: FusionHypothesis):
        """(对数概率向量, 输入末 token 后的会话, 可见声学提示数)"""
        memo = hyp.memo
        if memo.get("n_prompts") != hyp.session.n_prompts:
            dist, fed = self.decoder.score_next(hyp.session, self._feed_token(hyp))
            self.steps += 1
            memo.update(n_prompts=hyp.session.n_prompts, dec=dist.logp, fed=fed,
                        j=fed.ledger[-1].j_visible)
        return memo["dec"], memo["fed"], memo["j"]

    def next_lm(self, hyp: FusionHypothesis):
        if "lm" not in hyp.memo:
            hyp.memo["lm"] = self.lm.score(hyp.lm_state, self._feed_token(hyp))
        return hyp.memo["lm"]

    def extend(self, hyp: FusionHypothesis, c: int, ctc: CtcPrefixScore) -> FusionHypothesis:
        child = FusionHypothesis(tokens=hyp.tokens + (int(c),), ctc=ctc, dec_logp=hyp.dec_logp,
                                 lm_logp=hyp.lm_logp, j_visible=hyp.j_visible, scored=hyp.scored)
        if self.decoder is not None:
            logp, fed, j = self.next_dec(hyp)
            child.dec_logp += float(logp[c])
            child.session = fed
            child.j_visible = hyp.j_visible + (j,)
            child.scored = hyp.scored + 1
        if self.lm is not None:
            logp, state = self.next_lm(hyp)
            child.lm_logp += float(logp[c])
            child.lm_state = state
        return child

    def eos_scores(self, hyp: FusionHypothesis) -> Tuple[float, float]:
        dec = float(self.next_dec(hyp)[0][self.vocab.eos]) if self.decoder is not None else 0.0
        lm = float(self.next_lm(hyp)[0][self.vocab.eos]) if self.lm is not None else 0.0
        return dec, lm


def _merge(existing: FusionHypothesis, new: FusionHypothesis) -> FusionHypothesis:
    """CTC 质量 log-sum-exp 合并；解码器分支保留可见提示更多的一支，相同则保留已有的"""
    ctc = merge_prefix_scores(existing.ctc, new.ctc)
    keep = existing
    if new.j_visible and existing.j_visible and new.j_visible[-1] > existing.j_visible[-1]:
        keep = new
    return replace(keep, ctc=ctc)


def _candidate_tokens(row: np.ndarray, vocab: Vocabulary, prefilter: Optional[int]) -> List[int]:
    content = list(range(1, vocab.num_ctc_classes))
    if prefilter is None or prefilter >= len(content):
        return content
    order = sorted(content, key=lambda c: (-row[c], c))
    return sorted(order[:prefilter])


def _order_key(hyp: FusionHypothesis, weights: FusionWeights):
    return -fusion_score(hyp, None, weights), hyp.tokens


def beam_step(beam: Sequence[FusionHypothesis], t: int, grid, scorer: TokenScorer, width: int,
              weights: FusionWeights, prefilter: Optional[int] = None) -> List[FusionHypothesis]:
    """
    读入第 t 帧（0 起始）：每个假设停留或扩展一个非 blank token，
    重复前缀合并后按融合分数保留前 width 个
    """
    if width < 1:
        raise ConfigError(f"beam 宽度必须 >= 1，当前 {width}")
    if not beam:
        raise ContractError("beam 为空")
    blank = scorer.vocab.blank
    grid = as_log_array(grid)
    row = grid[t]
    candidates: Dict[Tuple[int, ...], FusionHypothesis] = {}
    for hyp in beam:
        stay = prefix_score_stay(hyp.ctc, t, grid, blank)
        if np.isfinite(stay.log_prob):
            candidates[hyp.tokens] = replace(hyp, ctc=stay)
    extensions = _candidate_tokens(row, scorer.vocab, prefilter)
    for hyp in beam:
        for c in extensions:
            ctc = prefix_score_step(hyp.ctc, c, t, grid, None, blank)
            if not np.isfinite(ctc.log_prob):
                continue
            key = hyp.tokens + (c,)
            child = scorer.extend(hyp, c, ctc)
            candidates[key] = _merge(candidates[key], child) if key in candidates else child
    ranked = sorted(candidates.values(), key=lambda h: _order_key(h, weights))
    return ranked[:width]


def longest_common_prefix(beam: Sequence[FusionHypothesis]) -> Tuple[int, ...]:
    first = beam[0].tokens
    n = len(first)
    for hyp in beam[1:]:
        n = min(n, len(hyp.tokens))
        for k in range(n):
            if hyp.tokens[k] != first[k]:
                n = k
                break
    return first[:n]


@dataclass
class FinalHypothesis:
    tokens: List[int]
    score: float
    ctc_logp: float
    dec_logp: float
    lm_logp: float
    j_visible: List[int]


class FusedBeamSearch:
    """单条语音的束搜索状态：摄入提示块、按帧推进、提交前缀、结束时加 <eos> 打分"""

    def __init__(self, vocab: Vocabulary, weights: FusionWeights, beam: int = 8,
                 prefilter: Optional[int] = 4, decoder: Optional[PromptDecoder] = None, lm=None):
        if beam < 1:
            raise ConfigError(f"beam 宽度必须 >= 1，当前 {beam}")
        self.weights = weights
        self.width = beam
        self.prefilter = prefilter
        self.scorer = TokenScorer(vocab, weights, decoder, lm)
        self.beam: List[FusionHypothesis] = [self.scorer.initial()]
        self.rows: List[np.ndarray] = []
        self.committed: Tuple[int, ...] = ()

    @property
    def frames(self) -> int:
        return len(self.rows)

    def ingest(self, chunk: PromptChunk):
        self.beam = [self.scorer.ingest(h, chunk) for h in self.beam]

    def advance(self, log_probs: np.ndarray):
        start = len(self.rows)
        self.rows.extend(np.asarray(log_probs, dtype=np.float64))
        grid = np.stack(self.rows)
        for t in range(start, len(self.rows)):
            self.beam = beam_step(self.beam, t, grid, self.scorer, self.width, self.weights, self.prefilter)
            if not self.beam:
                raise ContractError(f"第 {t} 帧后没有概率非零的假设")

    def commit(self) -> List[int]:
        """返回本次新提交的 token"""
        lcp = longest_common_prefix(self.beam)
        if lcp[:len(self.committed)] != self.committed:
            raise ContractError("提交前缀发生回退")
        new = list(lcp[len(self.committed):])
        self.committed = lcp
        return new

    def finalize(self) -> FinalHypothesis:
        best, best_key = None, None
        for hyp in self.beam:
            dec_eos, lm_eos = self.scorer.eos_scores(hyp)
            score = fusion_score(hyp, None, self.weights, lm_logp=hyp.lm_logp + lm_eos)
            score += _weighted(self.weights.lambda_dec, dec_eos)
            key = (-score, hyp.tokens)
            if best_key is None or key < best_key:
                best_key = key
                best = FinalHypothesis(list(hyp.tokens), score, hyp.ctc.log_prob, hyp.dec_logp + dec_eos,
                                       hyp.lm_logp + lm_eos, list(hyp.j_visible))
        if best.tokens[:len(self.committed)] != list(self.committed):
            raise ContractError("最终假设与已提交前缀不一致")
        return best


@torch.no_grad()
def decode_grid(grid, vocab: Vocabulary, weights: FusionWeights, beam: int, chunks: Sequence[PromptChunk] = (),
                decoder: Optional[PromptDecoder] = None, lm=None, prefilter: Optional[int] = None
                ) -> FinalHypothesis:
    """已知后验网格与全部提示块时的融合搜索（批处理条件）"""
    search = FusedBeamSearch(vocab, weights, beam, prefilter, decoder, lm)
    for chunk in chunks:
        search.ingest(chunk)
    lp = as_log_array(grid)
    search.advance(lp)
    search.commit()
    return search.finalize()


# ---------------------------------------------------------------------------
# 流式驱动与计时
# ---------------------------------------------------------------------------

@dataclass
class Emission:
    token: int
    block: int
    time: float


@dataclass
class StreamResult:
    tokens: List[int]
    timeline: List[Emission]
    rtf: float
    ep_latency: float
    processing_time: float
    audio_duration: float
    final: Optional[FinalHypothesis] = None
    stats: Dict[str, Any] = field(default_factory=dict)

    def emitted_tokens(self) -> List[int]:
        return [e.token for e in self.timeline]


class BlockProcessor(Protocol):
    def start(self) -> None:
        ...

    def process_block(self, b: int, block_features: np.ndarray) -> List[int]:
        """返回本块新提交的 token"""
        ...

    def finalize(self) -> Tuple[List[int], FinalHypothesis]:
        """返回 (结束时补充提交的 token, 最终假设)"""
        ...

    def stats(self) -> Dict[str, Any]:
        ...


def run_stream(processor: BlockProcessor, features, plan: BlockPlan, frame_period: float = 0.01) -> StreamResult:
    """
    虚拟到达时钟：第 b 块在 T_b × frame_period 时刻到齐，
    开始处理时间为 max(到达时间, 上一块处理完成时间)
    EP 延迟 = 最后一个 token 发出时间 - 最后一块到达时间；token 全部早于音频结束发出时记为 0
    """
    feats = np.asarray(features)
    plan.validate(int(feats.shape[0]))
    timeline: List[Emission] = []
    processing = 0.0
    finish = 0.0
    processor.start()
    for b in range(1, plan.num_blocks + 1):
        start_frame, end_frame = plan.input_span(b)
        begin = max(plan.input_ends[b - 1] * frame_period, finish)
        t0 = time.perf_counter()
        new_tokens = processor.process_block(b, feats[start_frame:end_frame])
        elapsed = time.perf_counter() - t0
        processing += elapsed
        finish = begin + elapsed
        timeline += [Emission(int(tok), b, finish) for tok in new_tokens]
    t0 = time.perf_counter()
    tail, final = processor.finalize()
    elapsed = time.perf_counter() - t0
    processing += elapsed
    finish += elapsed
    timeline += [Emission(int(tok), plan.num_blocks, finish) for tok in tail]

    last_arrival = plan.input_ends[-1] * frame_period
    last_emission = timeline[-1].time if timeline else finish
    audio = plan.num_frames * frame_period
    return StreamResult(tokens=list(final.tokens) if final is not None else [], timeline=timeline,
                        rtf=processing / audio, ep_latency=max(0.0, last_emission - last_arrival),
                        processing_time=processing, audio_duration=audio, final=final,
                        stats=processor.stats())


class FusedStreamProcessor:
    """逐块：编码 → CTC 后验 → 贪心过滤生成提示 → 摄入 → 帧同步搜索 → 提交最长公共前缀"""

    def __init__(self, model: AsrModel, cfg: DecodeConfig, lm=None):
        self.model = model
        self.cfg = cfg
        self.weights = FusionWeights.from_config(cfg)
        self.lm = lm
        self.use_decoder = self.weights.lambda_dec > 0

    def start(self):
        vocab = self.model.vocab
        decoder = self.model.decoder if self.use_decoder else None
        self.position_start = self.model.decoder.position_counter
        self.search = FusedBeamSearch(vocab, self.weights, self.cfg.beam, self.cfg.ctc_prefilter, decoder, self.lm)
        self.enc_state = self.model.encoder.initial_state()
        self.sub_offset = 0
        self.num_prompts = 0
        self.ctc_prompts = 0

    @torch.no_grad()
    def _prompt_chunk(self, b: int, block_features) -> Tuple[PromptChunk, np.ndarray]:
        vocab = self.model.vocab
        h, self.enc_state = self.model.encoder.encode_block(self.enc_state, block_features, b)
        grid = ctc_posteriors(h, self.model.ctc_head, vocab.blank)
        lp = grid.log_numpy()
        labels = np.argmax(lp, axis=1).tolist()
        chunk = self.model.prompt_gen.chunk_for_block(b, h, labels, self.enc_state.contexts[-1],
                                                      self.sub_offset, vocab.blank)
        self.sub_offset += int(h.shape[0])
        return chunk, lp

    @torch.no_grad()
    def process_block(self, b: int, block_features) -> List[int]:
        chunk, lp = self._prompt_chunk(b, block_features)
        self.num_prompts += len(chunk)
        self.ctc_prompts += len(chunk.kept_frame_indices)
        if self.use_decoder:
            self.search.ingest(chunk)
        self.search.advance(lp)
        return self.search.commit()

    @torch.no_grad()
    def finalize(self) -> Tuple[List[int], FinalHypothesis]:
        final = self.search.finalize()
        tail = final.tokens[len(self.search.committed):]
        return tail, final

    def stats(self) -> Dict[str, Any]:
        return {"num_prompts": self.num_prompts, "ctc_prompts": self.ctc_prompts,
                "sub_frames": self.sub_offset, "decoder_steps": self.search.scorer.steps,
                "decoder_positions": self.model.decoder.position_counter - self.position_start}


class BatchProcessor(FusedStreamProcessor):
    """批处理条件：整句按训练时的分块计划编码，全部提示摄入后再对整句后验做融合搜索"""

    @torch.no_grad()
    def process_block(self, b: int, block_features) -> List[int]:
        enc = self.model.enc_cfg
        plan = make_block_plan(len(block_features), enc.block_length, enc.subsample)
        rows = []
        for k in range(1, plan.num_blocks + 1):
            start, end = plan.input_span(k)
            chunk, lp = self._prompt_chunk(k, block_features[start:end])
            self.num_prompts += len(chunk)
            self.ctc_prompts += len(chunk.kept_frame_indices)
            if self.use_decoder:
                self.search.ingest(chunk)
            rows.append(lp)
        self.search.advance(np.concatenate(rows, axis=0))
        return self.search.commit()


def stream_decode(features, model: AsrModel, cfg: DecodeConfig, plan: Optional[BlockPlan] = None,
                  lm=None) -> StreamResult:
    feats = np.asarray(features)
    if plan is None:
        plan = make_block_plan(int(feats.shape[0]), model.enc_cfg.block_length, model.enc_cfg.subsample)
    model.eval()
    return run_stream(FusedStreamProcessor(model, cfg, lm), feats, plan, cfg.frame_period)


def batch_decode(features, model: AsrModel, cfg: DecodeConfig, lm=None) -> StreamResult:
    feats = np.asarray(features)
    model.eval()
    plan = single_block_plan(int(feats.shape[0]), model.enc_cfg.subsample)
    return run_stream(BatchProcessor(model, cfg, lm), feats, plan, cfg.frame_period)


def decode_utterance(features, model: AsrModel, cfg: DecodeConfig, lm=None) -> StreamResult:
    """按 cfg.mode 分发：stream / ctc 走流式驱动，batch 走整句"""
    if cfg.mode == "batch":
        return batch_decode(features, model, cfg, lm)
    return stream_decode(features, model, cfg, lm=lm)


# ---------------------------------------------------------------------------
# 基准测量
# ---------------------------------------------------------------------------

@dataclass
class BenchReport:
    rtf: List[float]
    ep_latency: List[float]
    percentiles: Dict[str, float]
    mean_ctc_prompts: float
    mean_sub_frames: float
    results: List[StreamResult] = field(default_factory=list, repr=False)

    @property
    def rtf_median(self) -> float:
        return float(np.median(self.rtf))

    @property
    def ep50(self) -> float:
        return float(np.median(self.ep_latency))

    @property
    def compression(self) -> float:
        """平均 CTC 提示数 / 平均降采样帧数"""
        return self.mean_ctc_prompts / max(self.mean_sub_frames, 1e-9)

    def to_dict(self) -> dict:
        return {"num_utterances": len(self.rtf), "rtf_median": self.rtf_median, "ep50": self.ep50,
                **self.percentiles, "mean_ctc_prompts": self.mean_ctc_prompts,
                "mean_sub_frames": self.mean_sub_frames, "prompt_compression": self.compression}


def measure(features_list: Sequence, model: Optional[AsrModel], cfg: DecodeConfig,
            percentiles: Sequence[int] = (50, 90), lm=None, processor_factory=None,
            block_length: Optional[int] = None, subsample: Optional[int] = None) -> BenchReport:
    """
    逐句解码并汇总 RTF / EP 延迟的中位数与分位数
    processor_factory() 可替换真实模型（如延迟可控的模拟处理器）
    """
    if not features_list:
        raise ContractError("measure 至少需要一条语音")
    if processor_factory is None:
        if cfg.mode == "batch":
            processor_factory = lambda: BatchProcessor(model, cfg, lm)
        else:
            processor_factory = lambda: FusedStreamProcessor(model, cfg, lm)
    block_length = block_length or model.enc_cfg.block_length
    subsample = subsample or model.enc_cfg.subsample
    results = []
    for feats in features_list:
        feats = np.asarray(feats)
        if cfg.mode == "batch":
            plan = single_block_plan(int(feats.shape[0]), subsample)
        else:
            plan = make_block_plan(int(feats.shape[0]), block_length, subsample)
        results.append(run_stream(processor_factory(), feats, plan, cfg.frame_period))
    rtf = [r.rtf for r in results]
    ep = [r.ep_latency for r in results]
    pct = {}
    for p in percentiles:
        pct[f"rtf_p{p}"] = float(np.percentile(rtf, p))
        pct[f"ep_p{p}"] = float(np.percentile(ep, p))
    ctc_prompts = [r.stats.get("ctc_prompts", 0) for r in results]
    sub_frames = [r.stats.get("sub_frames", 0) for r in results]
    return BenchReport(rtf=rtf, ep_latency=ep, percentiles=pct, mean_ctc_prompts=float(np.mean(ctc_prompts)),
                       mean_sub_frames=float(np.mean(sub_frames)), results=results)
