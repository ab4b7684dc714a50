"""
三阶段训练
1. pretrain_encoder : 分块语音子网络 + CTC 头，CTC 损失，Noam 调度
2. pretrain_lm      : 解码器只看 u_0 的纯文本语言模型
3. finetune         : 联合微调，按 full / forced_align / prefix 三种掩码方案决定每个目标能看到哪些提示

指标以 JSON lines 追加写入（step, loss, lr, skipped_samples），每个 epoch 另写一行汇总
"""

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .common import (InfeasibleAlignmentError, StepProgress, TrainingDivergedError, get_logger,
                     seed_everything)
from .config import AsrConfig, normalize_scheme
from .ctc_engine import ctc_loss, ctc_posteriors, forced_align, greedy_decode
from .evaluation import error_rate
from .external_lm import LstmLm
from .model import AsrModel
from .prompt_gen import PromptStream
from .speech_subnet import BlockPlan, make_block_plan
from .synth_corpus import Corpus, Utterance, Vocabulary

logger = get_logger(__name__)


@dataclass
class TrainReport:
    stage: str
    steps: int = 0
    skipped_samples: int = 0
    history: List[dict] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def final_loss(self) -> float:
        return self.history[-1]["loss"] if self.history else float("nan")

    @property
    def final_dev(self) -> Optional[float]:
        return self.history[-1].get("dev") if self.history else None


class MetricsLog:
    """训练指标 JSON lines 追加写入；path 为空时只记内存"""

    def __init__(self, path: Optional[str] = None, stage: str = ""):
        self.path = Path(path).expanduser() if path else None
        self.stage = stage
        self.records: List[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, **record):
        record = {"stage": self.stage, **record}
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(record, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# 学习率与掩码
# ---------------------------------------------------------------------------

def noam_lambda(warmup_steps: int) -> Callable[[int], float]:
    """LambdaLR 系数：min(s/warmup, sqrt(warmup/s))，s 从 1 开始，峰值为 1"""
    warmup = max(int(warmup_steps), 1)

    def factor(step: int) -> float:
        s = step + 1
        return min(s / warmup, math.sqrt(warmup / s))

    return factor


def full_mask(num_targets: int, num_prompts: int) -> torch.Tensor:
    return torch.ones(num_targets, num_prompts, dtype=torch.bool)


def forced_align_mask(layout: Sequence[Tuple[str, int, int]], end_frames: Sequence[int],
                      plan: BlockPlan) -> torch.Tensor:
    """
    layout: PromptStream.layout() 的 (类型, 帧号/块号, 所属块)
    end_frames: 每个 token 的强制对齐帧 τ(a_i)，1 起始
    第 i 行（目标 y_{i+1}）：帧号 <= τ(a_i) 的 CTC 提示可见，τ_{b-1} <= τ(a_i) 的块上下文提示可见
    最后一行是 <eos> 目标，看到全部提示
    """
    rows = len(end_frames) + 1
    mask = torch.zeros(rows, len(layout), dtype=torch.bool)
    for i, tau_a in enumerate(end_frames):
        for j, (kind, pos, _) in enumerate(layout):
            if kind == "ctc":
                mask[i, j] = pos <= tau_a
            else:
                prev_end = plan.sub_ends[pos - 2] if pos > 1 else 0
                mask[i, j] = prev_end <= tau_a
    mask[rows - 1, :] = True
    return mask


def sample_prefix_mask(num_blocks: int, cumulative: Sequence[int], rng: np.random.Generator,
                       num_targets: int) -> Tuple[torch.Tensor, int]:
    """β ~ U{1..B}，所有目标只看前 J_β 个提示，整句转写仍是训练目标"""
    beta = int(rng.integers(1, num_blocks + 1))
    total = cumulative[-1] if cumulative else 0
    mask = torch.zeros(num_targets, total, dtype=torch.bool)
    mask[:, :cumulative[beta - 1]] = True
    return mask, beta


# ---------------------------------------------------------------------------
# 通用训练循环
# ---------------------------------------------------------------------------

def _batches(n: int, batch_size: int, rng: np.random.Generator) -> List[List[int]]:
    order = rng.permutation(n).tolist()
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _check_finite(loss: torch.Tensor, stage: str, epoch: int, step: int, ids: Sequence, lr: float):
    if not torch.isfinite(loss):
        diagnostics = {"stage": stage, "epoch": epoch, "step": step, "lr": lr,
                       "loss": float(loss.detach()), "samples": list(ids)}
        logger.error(f"❌ 训练发散: {diagnostics}")
        raise TrainingDivergedError(f"{stage} 第 {step} 步损失非有限值", diagnostics)


def _train_loop(stage: str, module: torch.nn.Module, num_items: int,
                sample_loss: Callable[[int, np.random.Generator], Optional[torch.Tensor]],
                dev_metric: Optional[Callable[[], float]], cfg: AsrConfig, rng: np.random.Generator,
                lr: float, scheduler_factor: Optional[Callable[[int], float]],
                item_id: Callable[[int], str]) -> TrainReport:
    """sample_loss 返回单个样本的损失，返回 None 表示跳过该样本"""
    tcfg = cfg.train
    optimizer = torch.optim.Adam(module.parameters(), lr=lr, betas=(0.9, 0.98), eps=1e-9)
    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, scheduler_factor) if scheduler_factor else None
    metrics = MetricsLog(tcfg.metrics_log, stage)
    report = TrainReport(stage=stage)
    start = time.perf_counter()
    logger.info(f"🚀 开始 {stage}: {num_items} 个样本, {tcfg.epochs} 个 epoch, batch {tcfg.batch_size}")

    for epoch in range(1, tcfg.epochs + 1):
        module.train()
        epoch_loss, epoch_items = 0.0, 0
        batches = _batches(num_items, tcfg.batch_size, rng)
        with StepProgress(len(batches), desc=f"{stage} epoch {epoch}") as progress:
            for batch in batches:
                losses, skipped = [], 0
                for idx in batch:
                    loss = sample_loss(idx, rng)
                    if loss is None:
                        skipped += 1
                    else:
                        losses.append(loss)
                report.steps += 1
                report.skipped_samples += skipped
                current_lr = optimizer.param_groups[0]["lr"]
                if not losses:
                    metrics.write(step=report.steps, loss=None, lr=current_lr, skipped_samples=skipped)
                    progress.update(1)
                    continue
                loss = torch.stack(losses).sum() / len(losses)
                _check_finite(loss, stage, epoch, report.steps, [item_id(i) for i in batch], current_lr)
                optimizer.zero_grad()
                loss.backward()
                torch.nn.utils.clip_grad_norm_(module.parameters(), tcfg.grad_clip)
                optimizer.step()
                if scheduler is not None:
                    scheduler.step()
                value = float(loss.detach())
                epoch_loss += value * len(losses)
                epoch_items += len(losses)
                metrics.write(step=report.steps, loss=value, lr=current_lr, skipped_samples=skipped)
                progress.update(1, loss=f"{value:.3f}")

        module.eval()
        dev = dev_metric() if dev_metric is not None else None
        row = {"epoch": epoch, "loss": epoch_loss / max(epoch_items, 1), "dev": dev,
               "lr": optimizer.param_groups[0]["lr"], "skipped_samples": report.skipped_samples}
        report.history.append(row)
        metrics.write(**row)
        dev_text = f", dev {dev:.4f}" if dev is not None else ""
        logger.info(f"📊 {stage} epoch {epoch}: loss {row['loss']:.4f}{dev_text}, lr {row['lr']:.6f}")

    report.seconds = time.perf_counter() - start
    if report.skipped_samples:
        logger.warning(f"⚠️ {stage} 共跳过 {report.skipped_samples} 个样本（强制对齐不可行）")
    logger.info(f"✅ {stage} 完成，用时 {report.seconds:.1f}s")
    return report


def _limit(items: list, limit: Optional[int]) -> list:
    return items[:limit] if limit else items


def _plan_for(model: AsrModel, utt: Utterance) -> BlockPlan:
    return make_block_plan(utt.num_frames, model.enc_cfg.block_length, model.enc_cfg.subsample)


# ---------------------------------------------------------------------------
# 阶段 1：编码器 CTC 预训练
# ---------------------------------------------------------------------------

def greedy_dev_error(model: AsrModel, utterances: Sequence[Utterance]) -> float:
    """逐块编码 + CTC 贪心解码的 token 错误率"""
    refs, hyps = [], []
    with torch.no_grad():
        for utt in utterances:
            h, _ = model.encoder.encode_utterance(utt.features, _plan_for(model, utt))
            _, y = greedy_decode(ctc_posteriors(h, model.ctc_head, model.vocab.blank))
            refs.append(utt.transcript)
            hyps.append(y)
    return error_rate(refs, hyps).rate


def pretrain_encoder(corpus: Corpus, cfg: AsrConfig, model: Optional[AsrModel] = None
                     ) -> Tuple[AsrModel, TrainReport]:
    rng = seed_everything(cfg.train.seed)
    if model is None:
        model = AsrModel(corpus.vocab, int(corpus.templates.shape[1]), cfg.encoder, cfg.decoder,
                         cfg.train.prompt_variant, cfg.train.context_first)
    train = _limit(corpus.splits["train"], cfg.train.max_utterances)
    dev = _limit(corpus.splits["dev"], 100)
    params = torch.nn.ModuleList([model.encoder, model.ctc_head])

    def sample_loss(idx, _rng):
        utt = train[idx]
        h, _ = model.encoder.encode_utterance(utt.features, _plan_for(model, utt))
        return ctc_loss(ctc_posteriors(h, model.ctc_head, model.vocab.blank), utt.transcript)

    report = _train_loop("pretrain_encoder", params, len(train), sample_loss,
                         lambda: greedy_dev_error(model, dev), cfg, rng, cfg.train.peak_lr,
                         noam_lambda(cfg.train.warmup_steps), lambda i: train[i].utterance_id)
    return model, report


# ---------------------------------------------------------------------------
# 阶段 2：解码器 LM 预训练
# ---------------------------------------------------------------------------

def lm_targets(sentence: Sequence[int], vocab: Vocabulary) -> Tuple[List[int], List[int]]:
    """输入 <sos> y_1..y_I，目标 y_1..y_I <eos>"""
    return [vocab.sos] + list(sentence), list(sentence) + [vocab.eos]


def lm_cross_entropy(score_fn: Callable[[List[int]], torch.Tensor], sentences: Sequence[Sequence[int]],
                  vocab: Vocabulary) -> float:
    """score_fn(输入序列) -> [len, V] 对数概率；返回逐 token（含 <eos>）交叉熵（nats），exp 后即困惑度"""
    total, count = 0.0, 0
    with torch.no_grad():
        for sentence in sentences:
            inputs, targets = lm_targets(sentence, vocab)
            logp = score_fn(inputs)
            total -= float(logp[torch.arange(len(targets)), torch.as_tensor(targets)].sum())
            count += len(targets)
    return total / max(count, 1)


def pretrain_lm(vocab: Vocabulary, sentences: Sequence[Sequence[int]], dev_sentences: Sequence[Sequence[int]],
                cfg: AsrConfig, model: Optional[AsrModel] = None) -> Tuple[AsrModel, TrainReport]:
    """dev 指标为每 token 交叉熵（nats），exp 后即困惑度"""
    rng = seed_everything(cfg.train.seed)
    if model is None:
        model = AsrModel(vocab, cfg.data.feature_dim, cfg.encoder, cfg.decoder,
                         cfg.train.prompt_variant, cfg.train.context_first)
    decoder = model.decoder
    train = _limit(list(sentences), cfg.train.max_utterances)
    dev = _limit(list(dev_sentences), 200)

    def sample_loss(idx, _rng):
        inputs, targets = lm_targets(train[idx], vocab)
        logp = decoder.lm_logprobs(inputs)
        return -logp[torch.arange(len(targets)), torch.as_tensor(targets)].sum()

    report = _train_loop("pretrain_lm", decoder, len(train), sample_loss,
                         lambda: lm_cross_entropy(decoder.lm_logprobs, dev, vocab), cfg, rng,
                         cfg.train.peak_lr, noam_lambda(cfg.train.warmup_steps), lambda i: f"text-{i}")
    logger.info(f"📊 LM dev 困惑度 {math.exp(report.final_dev):.3f}")
    return model, report


def train_external_lm(vocab: Vocabulary, sentences: Sequence[Sequence[int]],
                      dev_sentences: Sequence[Sequence[int]], cfg: AsrConfig,
                      hidden: int = 128, num_layers: int = 2) -> Tuple[LstmLm, TrainReport]:
    """外部 LSTM LM，用于浅融合"""
    rng = seed_everything(cfg.train.seed)
    lm = LstmLm(len(vocab), vocab.sos, hidden, num_layers, masked_outputs=(vocab.blank, vocab.sos))
    train = _limit(list(sentences), cfg.train.max_utterances)
    dev = _limit(list(dev_sentences), 200)

    def sample_loss(idx, _rng):
        inputs, targets = lm_targets(train[idx], vocab)
        logp, _ = lm(inputs)
        return -logp[torch.arange(len(targets)), torch.as_tensor(targets)].sum()

    report = _train_loop("pretrain_external_lm", lm, len(train), sample_loss,
                         lambda: lm_cross_entropy(lambda x: lm(x)[0], dev, vocab), cfg, rng,
                         cfg.train.peak_lr, noam_lambda(cfg.train.warmup_steps), lambda i: f"text-{i}")
    return lm, report


# ---------------------------------------------------------------------------
# 阶段 3：联合微调
# ---------------------------------------------------------------------------

@dataclass
class FinetuneSample:
    """单句的前向中间量，供损失计算与测试检查"""
    stream: PromptStream
    grid_log_probs: torch.Tensor
    labels: List[int]
    mask: torch.Tensor
    logp: torch.Tensor
    targets: List[int]
    beta: Optional[int] = None


def finetune_forward(model: AsrModel, utt: Utterance, scheme: str, rng: np.random.Generator
                     ) -> Tuple[FinetuneSample, torch.Tensor]:
    """
    逐块编码 → CTC 贪心 → 构建提示 → 按方案生成可见性掩码 → 解码器并行前向
    返回 (中间量, CTC 辅助损失)；强制对齐不可行时抛 InfeasibleAlignmentError
    """
    vocab = model.vocab
    plan = _plan_for(model, utt)
    h, contexts = model.encoder.encode_utterance(utt.features, plan)
    grid = ctc_posteriors(h, model.ctc_head, vocab.blank)
    labels, _ = greedy_decode(grid)
    stream = model.prompt_gen.build_prompt_stream(h, labels, contexts, plan, vocab.blank)
    inputs, targets = lm_targets(utt.transcript, vocab)

    beta = None
    if scheme == "full":
        mask = full_mask(len(targets), stream.num_prompts)
    elif scheme == "forced_align":
        alignment = forced_align(grid, utt.transcript)
        mask = forced_align_mask(stream.layout(), alignment.end_frames, plan)
    else:
        mask, beta = sample_prefix_mask(plan.num_blocks, stream.cumulative, rng, len(targets))
    logp = model.decoder.batch_forward(stream.matrix(model.dec_cfg.d_model), inputs, mask)
    aux = ctc_loss(grid, utt.transcript)
    return FinetuneSample(stream, grid.log_probs, labels, mask, logp, targets, beta), aux


def token_loss(sample: FinetuneSample) -> torch.Tensor:
    return -sample.logp[torch.arange(len(sample.targets)), torch.as_tensor(sample.targets)].sum()


def finetune_model(model: AsrModel, corpus: Corpus, cfg: AsrConfig) -> TrainReport:
    """全部参数一起更新，恒定学习率、无 warmup"""
    scheme = normalize_scheme(cfg.train.scheme)
    rng = seed_everything(cfg.train.seed)
    train = _limit(corpus.splits["train"], cfg.train.max_utterances)
    dev = _limit(corpus.splits["dev"], 50)
    weight = cfg.train.ctc_weight

    def sample_loss(idx, sample_rng):
        utt = train[idx]
        try:
            sample, aux = finetune_forward(model, utt, scheme, sample_rng)
        except InfeasibleAlignmentError as e:
            logger.debug(f"跳过 {utt.utterance_id}: {e}")
            return None
        loss = token_loss(sample)
        return loss + weight * aux if weight > 0 else loss

    def dev_metric():
        total, count = 0.0, 0
        with torch.no_grad():
            for utt in dev:
                sample, _ = finetune_forward(model, utt, "full", rng)
                total += float(token_loss(sample))
                count += len(sample.targets)
        return total / max(count, 1)

    return _train_loop(f"finetune[{scheme}/{model.prompt_gen.variant}]", model, len(train), sample_loss,
                       dev_metric, cfg, rng, cfg.train.finetune_lr, None, lambda i: train[i].utterance_id)


def finetune(corpus: Corpus, encoder_dir, decoder_dir, cfg: AsrConfig) -> Tuple[AsrModel, TrainReport]:
    """读取两个预训练检查点，按 cfg.train 的方案与提示类型联合微调"""
    seed_everything(cfg.train.seed)
    model = AsrModel(corpus.vocab, int(corpus.templates.shape[1]), cfg.encoder, cfg.decoder,
                     cfg.train.prompt_variant, cfg.train.context_first)
    model.load_encoder(encoder_dir)
    model.load_decoder(decoder_dir)
    report = finetune_model(model, corpus, cfg)
    return model, report


def parameter_delta(before: Dict[str, torch.Tensor], module: torch.nn.Module) -> float:
    """与快照相比的最大绝对参数变化"""
    after = module.state_dict()
    return max(float((after[k] - v).abs().max()) for k, v in before.items())
