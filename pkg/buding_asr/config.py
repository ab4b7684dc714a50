"""
结构化配置：dataclass 默认值 + OmegaConf 合并 YAML/JSON 文件与命令行覆盖
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

from omegaconf import OmegaConf
from omegaconf.errors import OmegaConfBaseException

from .common import ConfigError

SCHEMES = ("full", "forced_align", "prefix")
PROMPT_VARIANTS = ("ctc", "context", "both")
DECODE_MODES = ("stream", "batch", "ctc")


@dataclass
class GenerationConfig:
    """合成语料参数（默认值即 desk-scale 规模）"""
    num_tokens: int = 16
    feature_dim: int = 16
    duration_min: int = 4
    duration_max: int = 10
    noise_std: float = 0.3
    transcript_min: int = 5
    transcript_max: int = 15
    num_train: int = 2000
    num_dev: int = 200
    num_test: int = 200
    # 马尔可夫链：转移 logits 的尺度与温度，温度 0 表示确定性后继
    chain_sharpness: float = 2.0
    chain_temperature: float = 1.0
    num_text_sentences: int = 10000


@dataclass
class EncoderConfig:
    d_model: int = 64
    num_heads: int = 4
    d_ff: int = 256
    num_layers: int = 2
    conv_kernel: int = 3
    subsample: int = 4
    block_length: int = 8


@dataclass
class DecoderConfig:
    d_model: int = 64
    num_heads: int = 4
    d_ff: int = 256
    num_layers: int = 2
    max_prompts: int = 512
    max_tokens: int = 128


@dataclass
class TrainConfig:
    stage: str = "finetune"
    epochs: int = 20
    batch_size: int = 16
    # Noam 调度：lr = peak * min(step/warmup, sqrt(warmup/step))
    peak_lr: float = 0.0025
    warmup_steps: int = 400
    finetune_lr: float = 0.0005
    scheme: str = "prefix"
    prompt_variant: str = "both"
    ctc_weight: float = 0.3
    grad_clip: float = 5.0
    context_first: bool = False
    seed: int = 0
    metrics_log: Optional[str] = None
    max_utterances: Optional[int] = None


@dataclass
class DecodeConfig:
    mode: str = "stream"
    beam: int = 8
    lambda_ctc: float = 0.4
    lambda_dec: float = 0.6
    lambda_lm: float = 0.0
    length_penalty: float = 0.0
    # 每帧仅保留后验最高的若干扩展 token，None 表示不做预筛
    ctc_prefilter: Optional[int] = 4
    frame_period: float = 0.01


@dataclass
class BenchConfig:
    num_utterances: int = 100
    percentiles: List[int] = field(default_factory=lambda: [50, 90])


@dataclass
class AsrConfig:
    data: GenerationConfig = field(default_factory=GenerationConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    seed: int = 0
    threads: int = 1


def normalize_scheme(name: str) -> str:
    scheme = str(name).strip().lower().replace("-", "_")
    if scheme not in SCHEMES:
        raise ConfigError(f"未知的训练掩码方案: {name}，可选 {SCHEMES}")
    return scheme


def validate_config(cfg: AsrConfig) -> AsrConfig:
    cfg.train.scheme = normalize_scheme(cfg.train.scheme)
    if cfg.train.prompt_variant not in PROMPT_VARIANTS:
        raise ConfigError(f"未知的提示类型: {cfg.train.prompt_variant}，可选 {PROMPT_VARIANTS}")
    if cfg.decode.mode not in DECODE_MODES:
        raise ConfigError(f"未知的解码模式: {cfg.decode.mode}，可选 {DECODE_MODES}")
    if cfg.train.ctc_weight < 0:
        raise ConfigError("ctc_weight 不能为负")
    if min(cfg.decode.lambda_ctc, cfg.decode.lambda_dec, cfg.decode.lambda_lm) < 0:
        raise ConfigError("融合权重不能为负")
    if cfg.decode.beam < 1:
        raise ConfigError(f"beam 宽度必须 >= 1，当前 {cfg.decode.beam}")
    if cfg.data.duration_max < cfg.data.duration_min:
        raise ConfigError(
            f"duration_max ({cfg.data.duration_max}) < duration_min ({cfg.data.duration_min})"
        )
    return cfg


def load_config(path: Optional[str] = None, overrides: Sequence[str] = ()) -> AsrConfig:
    """读取配置文件（YAML/JSON 均可）并应用 a.b=c 形式的覆盖项"""
    try:
        merged = OmegaConf.structured(AsrConfig)
        if path:
            file_path = Path(path).expanduser()
            if not file_path.exists():
                raise ConfigError(f"配置文件不存在: {file_path}")
            merged = OmegaConf.merge(merged, OmegaConf.load(str(file_path)))
        if overrides:
            merged = OmegaConf.merge(merged, OmegaConf.from_dotlist(list(overrides)))
        cfg = OmegaConf.to_object(merged)
    except OmegaConfBaseException as e:
        raise ConfigError(f"配置解析失败: {e}") from e
    return validate_config(cfg)


def to_dict(section) -> dict:
    return OmegaConf.to_container(OmegaConf.structured(section), resolve=True)


@dataclass
class ExperimentConfig:
    """run-experiment 的实验清单：训练方案 × 提示类型 × 解码模式 网格"""
    corpus: str = "output/corpus"
    work_dir: str = "output/experiment"
    schemes: List[str] = field(default_factory=lambda: ["full", "prefix"])
    variants: List[str] = field(default_factory=lambda: ["both"])
    modes: List[str] = field(default_factory=lambda: ["stream", "batch"])
    seeds: List[int] = field(default_factory=lambda: [0])
    # 可选的 (λ_ctc, λ_dec) 候选，按 dev 上的流式错误率挑选
    sweep: List[List[float]] = field(default_factory=list)
    max_dev_utterances: int = 50
    max_test_utterances: int = 200
    reuse_checkpoints: bool = True
    asr: AsrConfig = field(default_factory=AsrConfig)


def load_experiment(path: str, overrides: Sequence[str] = (), asr_config: Optional[str] = None) -> ExperimentConfig:
    """实验清单 → asr_config 文件（合并进 asr 段）→ 覆盖项，后者优先"""
    try:
        merged = OmegaConf.structured(ExperimentConfig)
        file_path = Path(path).expanduser()
        if not file_path.exists():
            raise ConfigError(f"实验清单不存在: {file_path}")
        merged = OmegaConf.merge(merged, OmegaConf.load(str(file_path)))
        if asr_config:
            asr_path = Path(asr_config).expanduser()
            if not asr_path.exists():
                raise ConfigError(f"配置文件不存在: {asr_path}")
            merged = OmegaConf.merge(merged, {"asr": OmegaConf.load(str(asr_path))})
        if overrides:
            merged = OmegaConf.merge(merged, OmegaConf.from_dotlist(list(overrides)))
        exp = OmegaConf.to_object(merged)
    except OmegaConfBaseException as e:
        raise ConfigError(f"实验清单解析失败: {e}") from e
    exp.schemes = [normalize_scheme(s) for s in exp.schemes]
    for variant in exp.variants:
        if variant not in PROMPT_VARIANTS:
            raise ConfigError(f"未知的提示类型: {variant}")
    for mode in exp.modes:
        if mode not in DECODE_MODES:
            raise ConfigError(f"未知的解码模式: {mode}")
    if any(len(pair) != 2 for pair in exp.sweep):
        raise ConfigError("sweep 的每一项必须是 [λ_ctc, λ_dec]")
    validate_config(exp.asr)
    return exp
