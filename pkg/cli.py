#!/usr/bin/env python3
"""
Buding-StreamASR 命令行入口

  python cli.py gen-data --out output/corpus
  python cli.py pretrain-encoder --corpus output/corpus --out output/encoder
  python cli.py pretrain-lm --corpus output/corpus --out output/decoder [--external]
  python cli.py finetune --corpus output/corpus --encoder output/encoder --decoder output/decoder \
                         --scheme prefix --prompts both --out output/model
  python cli.py decode --mode stream --model output/model --corpus output/corpus --out output/decoded.jsonl
  python cli.py eval --decoded output/decoded.jsonl
  python cli.py bench --model output/model --corpus output/corpus
  python cli.py run-experiment --manifest experiment.yaml --out output/report

退出码：0 成功，2 配置错误，3 数据/文件错误
"""

import argparse
import json
import sys
from pathlib import Path

import torch

from buding_asr.common import (ArtifactMissingError, ConfigError, DataFormatError, get_logger,
                               resolve_path, set_log_level)
from buding_asr.config import DECODE_MODES, PROMPT_VARIANTS, load_config, load_experiment, normalize_scheme
from buding_asr.evaluation import error_rate, render_table, write_report
from buding_asr.experiment import run_experiment
from buding_asr.fusion_search import decode_utterance, measure
from buding_asr.model import load_external_lm, load_model_dir, save_external_lm
from buding_asr.synth_corpus import generate_corpus, generate_text_corpus, load_corpus, save_corpus
from buding_asr.train_pipeline import finetune, pretrain_encoder, pretrain_lm, train_external_lm

logger = get_logger("cli")


def get_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="基于提示的流式语音识别（合成语料桌面规模复现）",
                                     formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument("--seed", type=int, default=None, help="随机种子（覆盖配置文件）")
    parser.add_argument("--threads", type=int, default=None, help="torch 线程数")
    parser.add_argument("--config", type=str, default=None, help="YAML/JSON 配置文件")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        help="配置覆盖项，例如 --set decode.beam=4，可重复")
    parser.add_argument("-v", "--verbose", action="store_true", help="输出 DEBUG 日志")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="生成合成配对语料")
    p.add_argument("--out", required=True)

    p = sub.add_parser("pretrain-encoder", help="编码器 CTC 预训练")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics-log", default=None)

    p = sub.add_parser("pretrain-lm", help="解码器 LM 预训练（--external 训练外部 LSTM LM）")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--external", action="store_true")
    p.add_argument("--metrics-log", default=None)

    p = sub.add_parser("finetune", help="联合微调")
    p.add_argument("--corpus", required=True)
    p.add_argument("--encoder", required=True, help="pretrain-encoder 输出目录")
    p.add_argument("--decoder", required=True, help="pretrain-lm 输出目录")
    p.add_argument("--out", required=True)
    p.add_argument("--scheme", default=None, help="full | forced-align | prefix")
    p.add_argument("--prompts", default=None, choices=PROMPT_VARIANTS)
    p.add_argument("--ctc-weight", type=float, default=None)
    p.add_argument("--metrics-log", default=None)

    p = sub.add_parser("decode", help="解码语料并输出 JSON lines")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", default=None, choices=DECODE_MODES)
    p.add_argument("--beam", type=int, default=None)
    p.add_argument("--lambda-ctc", type=float, default=None)
    p.add_argument("--lambda-dec", type=float, default=None)
    p.add_argument("--lambda-lm", type=float, default=None)
    p.add_argument("--lm", default=None, help="外部 LM 目录（含 lm.json）")
    p.add_argument("--split", default="test", choices=("train", "dev", "test"))
    p.add_argument("--limit", type=int, default=None)

    p = sub.add_parser("eval", help="统计 decode 输出的 token 错误率")
    p.add_argument("--decoded", required=True)
    p.add_argument("--out", default=None)

    p = sub.add_parser("bench", help="RTF / EP 延迟 / 提示压缩率")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--mode", default=None, choices=DECODE_MODES)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--out", default=None)

    p = sub.add_parser("run-experiment", help="按实验清单跑完整网格")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    return parser


def _overrides(args) -> list:
    items = list(args.overrides)
    if args.seed is not None:
        items += [f"seed={args.seed}", f"train.seed={args.seed}"]
    if args.threads is not None:
        items.append(f"threads={args.threads}")
    for flag, key in (("metrics_log", "train.metrics_log"), ("prompts", "train.prompt_variant"),
                      ("ctc_weight", "train.ctc_weight"), ("mode", "decode.mode"), ("beam", "decode.beam"),
                      ("lambda_ctc", "decode.lambda_ctc"), ("lambda_dec", "decode.lambda_dec"),
                      ("lambda_lm", "decode.lambda_lm")):
        value = getattr(args, flag, None)
        if value is not None:
            items.append(f"{key}={value}")
    if getattr(args, "scheme", None):
        items.append(f"train.scheme={normalize_scheme(args.scheme)}")
    return items


def _experiment_overrides(args) -> list:
    """全局参数映射到实验清单：--seed 替换种子列表，其余落在 asr 段"""
    items = list(args.overrides)
    if args.seed is not None:
        items += [f"seeds=[{args.seed}]", f"asr.seed={args.seed}", f"asr.train.seed={args.seed}"]
    if args.threads is not None:
        items.append(f"asr.threads={args.threads}")
    return items


def cmd_gen_data(args, cfg):
    corpus = generate_corpus(cfg.data, cfg.seed, subsample=cfg.encoder.subsample)
    save_corpus(corpus, args.out)


def cmd_pretrain_encoder(args, cfg):
    corpus = load_corpus(args.corpus)
    model, report = pretrain_encoder(corpus, cfg)
    model.save_encoder(args.out)
    logger.info(f"✅ 编码器 dev 贪心错误率 {100 * report.final_dev:.2f}%")


def cmd_pretrain_lm(args, cfg):
    corpus = load_corpus(args.corpus)
    text = generate_text_corpus(cfg.data, cfg.seed, chain=corpus.chain)
    dev_text = [u.transcript for u in corpus.splits["dev"]]
    if args.external:
        lm, _ = train_external_lm(corpus.vocab, text, dev_text, cfg)
        save_external_lm(lm, corpus.vocab, args.out, lm.lstm.hidden_size, lm.lstm.num_layers)
    else:
        model, _ = pretrain_lm(corpus.vocab, text, dev_text, cfg)
        model.save_decoder(args.out)


def cmd_finetune(args, cfg):
    corpus = load_corpus(args.corpus)
    encoder_dir = resolve_path(args.encoder, hint="请先运行 pretrain-encoder")
    decoder_dir = resolve_path(args.decoder, hint="请先运行 pretrain-lm")
    model, report = finetune(corpus, encoder_dir, decoder_dir, cfg)
    model.save(args.out)
    if report.skipped_samples:
        logger.warning(f"⚠️ 跳过 {report.skipped_samples} 个强制对齐不可行的样本")


def _emission_records(result, vocab):
    return [{"token": vocab.token(e.token), "block": e.block, "time": round(e.time, 6)} for e in result.timeline]


def cmd_decode(args, cfg):
    model, lm = load_model_dir(resolve_path(args.model, hint="请先运行 finetune"))
    if args.lm:
        lm, _ = load_external_lm(resolve_path(args.lm, hint="请先运行 pretrain-lm --external"))
    if lm is not None and cfg.decode.lambda_lm == 0:
        cfg.decode.lambda_lm = 0.4
    corpus = load_corpus(args.corpus)
    utterances = corpus.splits[args.split][:args.limit] if args.limit else corpus.splits[args.split]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    vocab = model.vocab
    refs, hyps = [], []
    with torch.no_grad(), open(out, "w", encoding="utf-8") as f:
        for utt in utterances:
            result = decode_utterance(utt.features, model, cfg.decode, lm)
            refs.append(utt.transcript)
            hyps.append(result.tokens)
            record = {"utterance_id": utt.utterance_id, "hypothesis": vocab.decode(result.tokens),
                      "reference": vocab.decode(utt.transcript), "emissions": _emission_records(result, vocab),
                      "rtf": result.rtf, "ep_latency": result.ep_latency}
            f.write(json.dumps(record, ensure_ascii=False) + "\n")
    report = error_rate(refs, hyps)
    logger.info(f"✅ 解码完成 {len(utterances)} 句 [{cfg.decode.mode}]，WER {100 * report.rate:.2f}% -> {out}")


def _read_decoded(path: Path):
    refs, hyps = [], []
    with open(path, "rb") as f:
        offset = 0
        for raw in f:
            start, offset = offset, offset + len(raw)
            if not raw.strip():
                continue
            try:
                record = json.loads(raw.decode("utf-8"))
                refs.append(list(record["reference"]))
                hyps.append(list(record["hypothesis"]))
            except (json.JSONDecodeError, KeyError, UnicodeDecodeError, TypeError) as e:
                raise DataFormatError(f"decode 输出解析失败: {e}", byte_offset=start) from e
    return refs, hyps


def cmd_eval(args, cfg):
    refs, hyps = _read_decoded(resolve_path(args.decoded, hint="请先运行 decode"))
    report = error_rate(refs, hyps)
    summary = {"num_utterances": len(refs), **report.to_dict()}
    print(json.dumps(summary, ensure_ascii=False))
    if args.out:
        Path(args.out).write_text(json.dumps(summary, ensure_ascii=False, indent=2), encoding="utf-8")


def cmd_bench(args, cfg):
    model, lm = load_model_dir(resolve_path(args.model, hint="请先运行 finetune"))
    corpus = load_corpus(args.corpus)
    limit = args.limit or cfg.bench.num_utterances
    utterances = corpus.splits["test"][:limit]
    with torch.no_grad():
        bench = measure([u.features for u in utterances], model, cfg.decode, cfg.bench.percentiles, lm)
    summary = {"mode": cfg.decode.mode, **bench.to_dict()}
    logger.info(f"📊 RTF 中位数 {bench.rtf_median:.3f}，EP50 {bench.ep50:.3f}s，"
                f"CTC 提示 {bench.mean_ctc_prompts:.1f} / τ_B {bench.mean_sub_frames:.1f}")
    print(json.dumps(summary, ensure_ascii=False))
    if args.out:
        Path(args.out).write_text(json.dumps(summary, ensure_ascii=False, indent=2), encoding="utf-8")


def cmd_run_experiment(args, exp):
    report = run_experiment(exp)
    write_report(report, args.out)
    print(render_table(report["cells"]))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain-encoder": cmd_pretrain_encoder,
    "pretrain-lm": cmd_pretrain_lm,
    "finetune": cmd_finetune,
    "decode": cmd_decode,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "run-experiment": cmd_run_experiment,
}


def main(argv=None) -> int:
    args = get_parser().parse_args(argv)
    set_log_level(args.verbose)
    try:
        if args.command == "run-experiment":
            # 实验清单自带 asr 配置段，--config 合并进该段，--set 覆盖作用在清单上
            cfg = load_experiment(args.manifest, _experiment_overrides(args), args.config)
            torch.set_num_threads(max(int(cfg.asr.threads), 1))
        else:
            cfg = load_config(args.config, _overrides(args))
            torch.set_num_threads(max(int(cfg.threads), 1))
        COMMANDS[args.command](args, cfg)
    except ConfigError as e:
        logger.error(f"❌ 配置错误: {e}")
        return 2
    except (DataFormatError, ArtifactMissingError) as e:
        logger.error(f"❌ 数据错误: {e}")
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
