"""
实验编排：按清单跑 (训练方案 × 提示类型 × 解码模式) 网格，输出 WER / RTF / EP50 表
每个种子各自预训练一次编码器与解码器，检查点存在时直接复用
"""

import copy
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
import torch

from .common import get_logger, resolve_path, seed_everything
from .config import AsrConfig, ExperimentConfig
from .evaluation import error_rate
from .fusion_search import decode_utterance, measure
from .model import AsrModel
from .synth_corpus import Corpus, Utterance, generate_text_corpus, load_corpus
from .train_pipeline import finetune_model, pretrain_encoder, pretrain_lm

logger = get_logger(__name__)

REPORT_VERSION = 1


def decode_split(model: AsrModel, utterances: Sequence[Utterance], cfg: AsrConfig, lm=None
                 ) -> Tuple[List[List[int]], List[List[int]]]:
    refs, hyps = [], []
    for utt in utterances:
        result = decode_utterance(utt.features, model, cfg.decode, lm)
        refs.append(utt.transcript)
        hyps.append(result.tokens)
    return refs, hyps


def pretrained_checkpoints(corpus: Corpus, cfg: AsrConfig, seed_dir: Path, reuse: bool) -> Tuple[Path, Path]:
    """编码器与解码器预训练，返回两个检查点目录"""
    enc_dir, dec_dir = seed_dir / "encoder", seed_dir / "decoder"
    if not (reuse and (enc_dir / "encoder.json").exists()):
        model, _ = pretrain_encoder(corpus, cfg)
        model.save_encoder(enc_dir)
    if not (reuse and (dec_dir / "decoder.json").exists()):
        text = generate_text_corpus(cfg.data, cfg.seed, chain=corpus.chain)
        dev_text = [u.transcript for u in corpus.splits["dev"]]
        model, _ = pretrain_lm(corpus.vocab, text, dev_text, cfg)
        model.save_decoder(dec_dir)
    return enc_dir, dec_dir


def _pick_weights(model: AsrModel, dev: Sequence[Utterance], cfg: AsrConfig,
                  sweep: Sequence[Sequence[float]]) -> Tuple[float, float]:
    """按 dev 流式错误率挑选融合权重，并列时取先出现的"""
    best, best_rate = (cfg.decode.lambda_ctc, cfg.decode.lambda_dec), None
    for lambda_ctc, lambda_dec in sweep:
        trial = copy.deepcopy(cfg)
        trial.decode.mode = "stream"
        trial.decode.lambda_ctc, trial.decode.lambda_dec = float(lambda_ctc), float(lambda_dec)
        rate = error_rate(*decode_split(model, dev, trial)).rate
        logger.info(f"📊 权重 λ_ctc={lambda_ctc} λ_dec={lambda_dec}: dev WER {100 * rate:.2f}%")
        if best_rate is None or rate < best_rate:
            best, best_rate = (float(lambda_ctc), float(lambda_dec)), rate
    return best


def run_experiment(exp: ExperimentConfig) -> dict:
    corpus_dir = resolve_path(exp.corpus, hint="请先运行 gen-data 生成语料")
    corpus = load_corpus(corpus_dir)
    work = Path(exp.work_dir).expanduser()
    dev = corpus.splits["dev"][:exp.max_dev_utterances]
    test = corpus.splits["test"][:exp.max_test_utterances]

    runs: Dict[Tuple[str, str, str], List[dict]] = {}
    sweep_log = []
    for seed in exp.seeds:
        cfg = copy.deepcopy(exp.asr)
        cfg.seed = cfg.train.seed = int(seed)
        seed_dir = work / f"seed{seed}"
        enc_dir, dec_dir = pretrained_checkpoints(corpus, cfg, seed_dir, exp.reuse_checkpoints)
        for scheme in exp.schemes:
            for variant in exp.variants:
                cell_cfg = copy.deepcopy(cfg)
                cell_cfg.train.scheme, cell_cfg.train.prompt_variant = scheme, variant
                model_dir = seed_dir / f"{scheme}_{variant}"
                if exp.reuse_checkpoints and (model_dir / "model.json").exists():
                    model = AsrModel.load(model_dir)
                else:
                    seed_everything(seed)
                    model = AsrModel(corpus.vocab, int(corpus.templates.shape[1]), cell_cfg.encoder,
                                     cell_cfg.decoder, variant, cell_cfg.train.context_first)
                    model.load_encoder(enc_dir)
                    model.load_decoder(dec_dir)
                    finetune_model(model, corpus, cell_cfg)
                    model.save(model_dir)
                model.eval()
                if exp.sweep:
                    lambdas = _pick_weights(model, dev, cell_cfg, exp.sweep)
                    cell_cfg.decode.lambda_ctc, cell_cfg.decode.lambda_dec = lambdas
                    sweep_log.append({"seed": int(seed), "scheme": scheme, "variant": variant,
                                      "lambda_ctc": lambdas[0], "lambda_dec": lambdas[1]})
                for mode in exp.modes:
                    cell_cfg.decode.mode = mode
                    with torch.no_grad():
                        bench = measure([u.features for u in test], model, cell_cfg.decode,
                                        cell_cfg.bench.percentiles)
                    refs = [u.transcript for u in test]
                    hyps = [r.tokens for r in bench.results]
                    report = error_rate(refs, hyps)
                    runs.setdefault((scheme, variant, mode), []).append({
                        "seed": int(seed), **report.to_dict(), "rtf_p50": bench.rtf_median, "ep_p50": bench.ep50,
                        "lambda_ctc": cell_cfg.decode.lambda_ctc,
                        "lambda_dec": 0.0 if mode == "ctc" else cell_cfg.decode.lambda_dec})
                    logger.info(f"📊 seed {seed} [{scheme}/{variant}/{mode}] WER {100 * report.rate:.2f}% "
                                f"RTF {bench.rtf_median:.3f} EP50 {bench.ep50:.3f}s")

    cells = []
    for (scheme, variant, mode), per_seed in runs.items():
        cells.append({
            "scheme": scheme, "variant": variant, "mode": mode,
            "wer": float(np.mean([r["rate"] for r in per_seed])),
            "rtf_p50": float(np.median([r["rtf_p50"] for r in per_seed])),
            "ep_p50": float(np.median([r["ep_p50"] for r in per_seed])),
            "substitutions": int(sum(r["substitutions"] for r in per_seed)),
            "deletions": int(sum(r["deletions"] for r in per_seed)),
            "insertions": int(sum(r["insertions"] for r in per_seed)),
            "ref_length": int(sum(r["ref_length"] for r in per_seed)),
            "num_utterances": len(test) * len(per_seed),
            "seeds": per_seed,
        })
    return {"version": REPORT_VERSION, "corpus": str(corpus_dir), "seeds": [int(s) for s in exp.seeds],
            "cells": cells, "sweep": sweep_log}
