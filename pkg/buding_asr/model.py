"""
模型组合与检查点读写
encoder.json/.bin  : 语音子网络 + CTC 头（CTC 预训练产物）
decoder.json/.bin  : 解码器（LM 预训练产物）
model.json/.bin    : 联合微调后的完整模型
lm.json/.bin       : 可选的外部 LSTM LM
"""

from dataclasses import asdict
from pathlib import Path
from typing import Optional, Tuple

import torch

from . import nd_core
from .common import ConfigError, get_logger
from .config import DecoderConfig, EncoderConfig
from .ctc_engine import CtcHead
from .external_lm import LstmLm
from .prompt_decoder import PromptDecoder
from .prompt_gen import PromptGenerator
from .speech_subnet import SpeechSubnet
from .synth_corpus import Vocabulary

logger = get_logger(__name__)


def _prefixed(module: torch.nn.Module, prefix: str) -> dict:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def _strip(tensors: dict, prefix: str) -> dict:
    head = prefix + "."
    return {k[len(head):]: v for k, v in tensors.items() if k.startswith(head)}


def _load_into(module: torch.nn.Module, tensors: dict, what: str):
    try:
        module.load_state_dict(tensors, strict=True)
    except RuntimeError as e:
        raise ConfigError(f"{what} 检查点与当前配置维度不兼容: {e}") from e


def build_decoder(vocab: Vocabulary, cfg: DecoderConfig) -> PromptDecoder:
    return PromptDecoder(len(vocab), cfg, masked_outputs=(vocab.blank, vocab.sos))


class AsrModel(torch.nn.Module):
    """语音子网络 + CTC 头 + 提示生成 + 解码器"""

    def __init__(self, vocab: Vocabulary, feature_dim: int, enc_cfg: EncoderConfig, dec_cfg: DecoderConfig,
                 variant: str = "both", context_first: bool = False):
        super().__init__()
        self.vocab = vocab
        self.feature_dim = feature_dim
        self.enc_cfg = enc_cfg
        self.dec_cfg = dec_cfg
        self.encoder = SpeechSubnet(feature_dim, enc_cfg)
        self.ctc_head = CtcHead(enc_cfg.d_model, vocab.num_ctc_classes)
        self.prompt_gen = PromptGenerator(enc_cfg.d_model, dec_cfg.d_model, variant, context_first)
        self.decoder = build_decoder(vocab, dec_cfg)

    def meta(self, kind: str = "model") -> dict:
        return {"kind": kind, "feature_dim": self.feature_dim, "encoder": asdict(self.enc_cfg),
                "decoder": asdict(self.dec_cfg), "vocab": self.vocab.to_json(),
                "variant": self.prompt_gen.variant, "context_first": self.prompt_gen.context_first}

    # ---------------- 整体 ----------------

    def save(self, directory) -> Path:
        return nd_core.save_checkpoint(self.state_dict(), directory, "model", self.meta())

    @classmethod
    def load(cls, directory) -> "AsrModel":
        tensors, meta = nd_core.load_checkpoint(directory, "model")
        model = cls(Vocabulary.from_json(meta["vocab"]), meta["feature_dim"],
                     EncoderConfig(**meta["encoder"]), DecoderConfig(**meta["decoder"]),
                     meta.get("variant", "both"), meta.get("context_first", False))
        _load_into(model, tensors, "联合模型")
        return model

    # ---------------- 分阶段 ----------------

    def save_encoder(self, directory) -> Path:
        tensors = {**_prefixed(self.encoder, "encoder"), **_prefixed(self.ctc_head, "ctc_head")}
        return nd_core.save_checkpoint(tensors, directory, "encoder", self.meta("encoder"))

    def load_encoder(self, directory):
        tensors, meta = nd_core.load_checkpoint(directory, "encoder")
        if meta.get("encoder") != asdict(self.enc_cfg) or meta.get("feature_dim") != self.feature_dim:
            raise ConfigError(f"编码器检查点配置 {meta.get('encoder')} 与当前配置 {asdict(self.enc_cfg)} 不一致")
        _load_into(self.encoder, _strip(tensors, "encoder"), "编码器")
        _load_into(self.ctc_head, _strip(tensors, "ctc_head"), "CTC 头")

    def save_decoder(self, directory) -> Path:
        return nd_core.save_checkpoint(_prefixed(self.decoder, "decoder"), directory, "decoder", self.meta("decoder"))

    def load_decoder(self, directory):
        tensors, meta = nd_core.load_checkpoint(directory, "decoder")
        if meta.get("decoder") != asdict(self.dec_cfg):
            raise ConfigError(f"解码器检查点配置 {meta.get('decoder')} 与当前配置 {asdict(self.dec_cfg)} 不一致")
        _load_into(self.decoder, _strip(tensors, "decoder"), "解码器")


def save_external_lm(lm: LstmLm, vocab: Vocabulary, directory, hidden: int, num_layers: int) -> Path:
    meta = {"kind": "lstm_lm", "vocab": vocab.to_json(), "hidden": hidden, "num_layers": num_layers}
    return nd_core.save_checkpoint(lm.state_dict(), directory, "lm", meta)


def load_external_lm(directory) -> Tuple[LstmLm, Vocabulary]:
    tensors, meta = nd_core.load_checkpoint(directory, "lm")
    vocab = Vocabulary.from_json(meta["vocab"])
    lm = LstmLm(len(vocab), vocab.sos, meta["hidden"], meta["num_layers"], masked_outputs=(vocab.blank, vocab.sos))
    _load_into(lm, tensors, "外部 LM")
    return lm, vocab


def load_model_dir(directory) -> Tuple[AsrModel, Optional[LstmLm]]:
    """decode/bench 使用：读取联合模型，若目录下有 lm.json 一并读取"""
    model = AsrModel.load(directory)
    lm = None
    if (Path(directory) / "lm.json").exists():
        lm, _ = load_external_lm(directory)
    model.eval()
    return model, lm
