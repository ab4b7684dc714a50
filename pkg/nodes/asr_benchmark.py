import json
import traceback

import torch

from buding_asr.common import get_logger, resolve_output, resolve_path
from buding_asr.config import DECODE_MODES, DecodeConfig
from buding_asr.evaluation import error_rate, render_table
from buding_asr.fusion_search import measure
from buding_asr.model import load_model_dir
from buding_asr.synth_corpus import load_corpus

logger = get_logger(__name__)


class buding_AsrBenchmark:
    """
    ⏱️ 识别基准测试
    测试集上统计 token 错误率、RTF / EP 延迟中位数与分位数、CTC 提示压缩率
    """

    @classmethod
    def INPUT_TYPES(cls):
        return {
            "required": {
                "model_dir": ("STRING", {"default": "streamasr/model"}),
                "corpus_dir": ("STRING", {"default": "streamasr/corpus"}),
                "mode": (list(DECODE_MODES), {"default": "stream"}),
                "num_utterances": ("INT", {"default": 100, "min": 1, "max": 100000}),
                "beam": ("INT", {"default": 8, "min": 1, "max": 64}),
            },
            "optional": {
                "report_path": ("STRING", {"default": "", "tooltip": "留空则不写文件"}),
            }
        }

    RETURN_TYPES = ("FLOAT", "FLOAT", "FLOAT", "STRING")
    RETURN_NAMES = ("WER", "RTF中位数", "EP50", "基准报告")
    FUNCTION = "benchmark"
    CATEGORY = "buding_Tools/StreamASR"

    def benchmark(self, model_dir, corpus_dir, mode, num_utterances, beam, report_path=""):
        try:
            model, lm = load_model_dir(resolve_path(resolve_output(model_dir), hint="请先运行联合微调"))
            corpus = load_corpus(resolve_path(resolve_output(corpus_dir), hint="请先运行合成语料生成器"))
            test = corpus.splits["test"][:num_utterances]
            cfg = DecodeConfig(mode=mode, beam=beam, lambda_lm=0.4 if lm is not None else 0.0)
            with torch.no_grad():
                bench = measure([u.features for u in test], model, cfg, lm=lm)
            report = error_rate([u.transcript for u in test], [r.tokens for r in bench.results])
            cell = {"scheme": "-", "variant": model.prompt_gen.variant, "mode": mode, "wer": report.rate,
                    "rtf_p50": bench.rtf_median, "ep_p50": bench.ep50}
            summary = {**report.to_dict(), **bench.to_dict()}
            text = (render_table([cell]) + "\n\n"
                    f"📊 CTC 提示 {bench.mean_ctc_prompts:.1f} / τ_B {bench.mean_sub_frames:.1f} "
                    f"(压缩率 {bench.compression:.2f})\n"
                    + json.dumps(summary, ensure_ascii=False, indent=2))
            if report_path:
                out = resolve_output(report_path)
                out.parent.mkdir(parents=True, exist_ok=True)
                out.write_text(json.dumps(summary, ensure_ascii=False, indent=2), encoding="utf-8")
            return (float(report.rate), bench.rtf_median, bench.ep50, text)
        except Exception as e:
            logger.error(f"❌ 基准测试失败: {e}\n{traceback.format_exc()}")
            return (0.0, 0.0, 0.0, f"❌ 基准测试失败: {e}")


NODE_CLASS_MAPPINGS = {
    "buding_AsrBenchmark": buding_AsrBenchmark,
}

NODE_DISPLAY_NAME_MAPPINGS = {
    "buding_AsrBenchmark": "⏱️ Buding 识别基准测试",
}
