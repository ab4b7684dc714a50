import traceback

import torch

from buding_asr.common import get_logger, resolve_output, resolve_path
from buding_asr.config import DECODE_MODES, DecodeConfig
from buding_asr.evaluation import error_rate
from buding_asr.fusion_search import decode_utterance
from buding_asr.model import load_model_dir
from buding_asr.synth_corpus import load_corpus

logger = get_logger(__name__)


class buding_StreamAsrDecoder:
    """
    🎙️ 流式识别解码器
    按块输入特征，逐块提交 token；输出识别结果、逐 token 发出时间线与 RTF / EP 延迟
    """

    @classmethod
    def INPUT_TYPES(cls):
        return {
            "required": {
                "model_dir": ("STRING", {"default": "streamasr/model"}),
                "corpus_dir": ("STRING", {"default": "streamasr/corpus"}),
                "split": (["test", "dev", "train"], {"default": "test"}),
                "utterance_index": ("INT", {"default": 0, "min": 0, "max": 1000000}),
                "mode": (list(DECODE_MODES), {"default": "stream"}),
                "beam": ("INT", {"default": 8, "min": 1, "max": 64}),
                "lambda_ctc": ("FLOAT", {"default": 0.4, "min": 0.0, "max": 1.0, "step": 0.05}),
                "lambda_dec": ("FLOAT", {"default": 0.6, "min": 0.0, "max": 1.0, "step": 0.05}),
            }
        }

    RETURN_TYPES = ("STRING", "STRING", "FLOAT", "FLOAT", "STRING")
    RETURN_NAMES = ("识别结果", "发出时间线", "RTF", "EP延迟", "状态信息")
    FUNCTION = "decode"
    CATEGORY = "buding_Tools/StreamASR"

    def decode(self, model_dir, corpus_dir, split, utterance_index, mode, beam, lambda_ctc, lambda_dec):
        try:
            model, lm = load_model_dir(resolve_path(resolve_output(model_dir), hint="请先运行联合微调"))
            corpus = load_corpus(resolve_path(resolve_output(corpus_dir), hint="请先运行合成语料生成器"))
            utterances = corpus.splits[split]
            if not utterances:
                return ("", "", 0.0, 0.0, f"⚠️ {split} 子集为空")
            utt = utterances[min(utterance_index, len(utterances) - 1)]
            cfg = DecodeConfig(mode=mode, beam=beam, lambda_ctc=lambda_ctc, lambda_dec=lambda_dec,
                               lambda_lm=0.4 if lm is not None else 0.0)
            with torch.no_grad():
                result = decode_utterance(utt.features, model, cfg, lm)
            vocab = model.vocab
            hypothesis = " ".join(vocab.decode(result.tokens))
            timeline = "\n".join(f"[块 {e.block:>2}] {e.time:7.3f}s  {vocab.token(e.token)}" for e in result.timeline)
            report = error_rate([utt.transcript], [result.tokens])
            status = (f"✅ {utt.utterance_id} [{mode}] 错误率 {100 * report.rate:.1f}%\n"
                      f"参考: {' '.join(vocab.decode(utt.transcript))}")
            return (hypothesis, timeline, float(result.rtf), float(result.ep_latency), status)
        except Exception as e:
            logger.error(f"❌ 解码失败: {e}\n{traceback.format_exc()}")
            return ("", "", 0.0, 0.0, f"❌ 解码失败: {e}")


NODE_CLASS_MAPPINGS = {
    "buding_StreamAsrDecoder": buding_StreamAsrDecoder,
}

NODE_DISPLAY_NAME_MAPPINGS = {
    "buding_StreamAsrDecoder": "🎙️ Buding 流式识别解码器",
}
