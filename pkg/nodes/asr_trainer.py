import traceback

from buding_asr.common import get_logger, resolve_output, resolve_path
from buding_asr.config import PROMPT_VARIANTS, SCHEMES, load_config
from buding_asr.synth_corpus import generate_text_corpus, load_corpus
from buding_asr.train_pipeline import finetune, pretrain_encoder, pretrain_lm

logger = get_logger(__name__)


def _config(seed, epochs, batch_size, extra=()):
    return load_config(None, [f"seed={seed}", f"train.seed={seed}", f"train.epochs={epochs}",
                              f"train.batch_size={batch_size}", *extra])


def _history_text(report) -> str:
    lines = [f"epoch {row['epoch']:>3}: loss {row['loss']:.4f}"
             + (f", dev {row['dev']:.4f}" if row.get("dev") is not None else "") for row in report.history]
    return "\n".join(lines)


class buding_AsrPretrainEncoder:
    """🎯 编码器 CTC 预训练（分块语音子网络 + CTC 头）"""

    @classmethod
    def INPUT_TYPES(cls):
        return {
            "required": {
                "corpus_dir": ("STRING", {"default": "streamasr/corpus"}),
                "output_dir": ("STRING", {"default": "streamasr/encoder"}),
                "seed": ("INT", {"default": 0, "min": 0, "max": 0xffffffff}),
                "epochs": ("INT", {"default": 20, "min": 1, "max": 1000}),
                "batch_size": ("INT", {"default": 16, "min": 1, "max": 1024}),
            }
        }

    RETURN_TYPES = ("STRING", "STRING")
    RETURN_NAMES = ("编码器目录", "训练日志")
    FUNCTION = "train"
    CATEGORY = "buding_Tools/StreamASR"

    def train(self, corpus_dir, output_dir, seed, epochs, batch_size):
        try:
            cfg = _config(seed, epochs, batch_size)
            corpus = load_corpus(resolve_path(resolve_output(corpus_dir), hint="请先运行合成语料生成器"))
            model, report = pretrain_encoder(corpus, cfg)
            out = resolve_output(output_dir)
            model.save_encoder(out)
            return (str(out), f"✅ 编码器预训练完成，dev 贪心错误率 {100 * report.final_dev:.2f}%\n"
                              + _history_text(report))
        except Exception as e:
            logger.error(f"❌ 编码器预训练失败: {e}\n{traceback.format_exc()}")
            return ("", f"❌ 编码器预训练失败: {e}")


class buding_AsrPretrainLM:
    """📚 解码器语言模型预训练（纯文本，只有 <sos> 提示）"""

    @classmethod
    def INPUT_TYPES(cls):
        return {
            "required": {
                "corpus_dir": ("STRING", {"default": "streamasr/corpus"}),
                "output_dir": ("STRING", {"default": "streamasr/decoder"}),
                "seed": ("INT", {"default": 0, "min": 0, "max": 0xffffffff}),
                "epochs": ("INT", {"default": 10, "min": 1, "max": 1000}),
                "batch_size": ("INT", {"default": 32, "min": 1, "max": 1024}),
            }
        }

    RETURN_TYPES = ("STRING", "STRING")
    RETURN_NAMES = ("解码器目录", "训练日志")
    FUNCTION = "train"
    CATEGORY = "buding_Tools/StreamASR"

    def train(self, corpus_dir, output_dir, seed, epochs, batch_size):
        try:
            cfg = _config(seed, epochs, batch_size)
            corpus = load_corpus(resolve_path(resolve_output(corpus_dir), hint="请先运行合成语料生成器"))
            text = generate_text_corpus(cfg.data, seed, chain=corpus.chain)
            dev = [u.transcript for u in corpus.splits["dev"]]
            model, report = pretrain_lm(corpus.vocab, text, dev, cfg)
            out = resolve_output(output_dir)
            model.save_decoder(out)
            return (str(out), f"✅ LM 预训练完成，dev 交叉熵 {report.final_dev:.4f} nats\n" + _history_text(report))
        except Exception as e:
            logger.error(f"❌ LM 预训练失败: {e}\n{traceback.format_exc()}")
            return ("", f"❌ LM 预训练失败: {e}")


class buding_AsrFinetune:
    """🔗 联合微调：选择提示掩码方案与提示类型"""

    @classmethod
    def INPUT_TYPES(cls):
        return {
            "required": {
                "corpus_dir": ("STRING", {"default": "streamasr/corpus"}),
                "encoder_dir": ("STRING", {"default": "streamasr/encoder"}),
                "decoder_dir": ("STRING", {"default": "streamasr/decoder"}),
                "output_dir": ("STRING", {"default": "streamasr/model"}),
                "scheme": (list(SCHEMES), {"default": "prefix", "tooltip": "full / forced_align / prefix"}),
                "prompts": (list(PROMPT_VARIANTS), {"default": "both"}),
                "seed": ("INT", {"default": 0, "min": 0, "max": 0xffffffff}),
                "epochs": ("INT", {"default": 10, "min": 1, "max": 1000}),
                "batch_size": ("INT", {"default": 16, "min": 1, "max": 1024}),
                "ctc_weight": ("FLOAT", {"default": 0.3, "min": 0.0, "max": 1.0, "step": 0.05}),
            }
        }

    RETURN_TYPES = ("STRING", "STRING")
    RETURN_NAMES = ("模型目录", "训练日志")
    FUNCTION = "train"
    CATEGORY = "buding_Tools/StreamASR"

    def train(self, corpus_dir, encoder_dir, decoder_dir, output_dir, scheme, prompts, seed, epochs,
              batch_size, ctc_weight):
        try:
            cfg = _config(seed, epochs, batch_size, [f"train.scheme={scheme}", f"train.prompt_variant={prompts}",
                                                     f"train.ctc_weight={ctc_weight}"])
            corpus = load_corpus(resolve_path(resolve_output(corpus_dir), hint="请先运行合成语料生成器"))
            model, report = finetune(corpus, resolve_path(resolve_output(encoder_dir), hint="请先预训练编码器"),
                                     resolve_path(resolve_output(decoder_dir), hint="请先预训练 LM"), cfg)
            out = resolve_output(output_dir)
            model.save(out)
            status = f"✅ 微调完成 [{scheme}/{prompts}]"
            if report.skipped_samples:
                status += f"，⚠️ 跳过 {report.skipped_samples} 个强制对齐不可行的样本"
            return (str(out), status + "\n" + _history_text(report))
        except Exception as e:
            logger.error(f"❌ 微调失败: {e}\n{traceback.format_exc()}")
            return ("", f"❌ 微调失败: {e}")


NODE_CLASS_MAPPINGS = {
    "buding_AsrPretrainEncoder": buding_AsrPretrainEncoder,
    "buding_AsrPretrainLM": buding_AsrPretrainLM,
    "buding_AsrFinetune": buding_AsrFinetune,
}

NODE_DISPLAY_NAME_MAPPINGS = {
    "buding_AsrPretrainEncoder": "🎯 Buding 编码器 CTC 预训练",
    "buding_AsrPretrainLM": "📚 Buding 解码器 LM 预训练",
    "buding_AsrFinetune": "🔗 Buding 提示联合微调",
}
