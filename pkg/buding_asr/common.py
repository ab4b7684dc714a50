"""
通用工具：日志、异常体系、进度条适配、随机种子
所有 buding_asr 模块与 nodes/ 节点共用
"""

import logging
import os
import random
import sys
from typing import Optional

import numpy as np
import torch

try:
    from tqdm import tqdm
    TQDM_AVAILABLE = True
except ImportError:
    TQDM_AVAILABLE = False

# ComfyUI 进度条（不在 ComfyUI 环境时退化为空实现）
try:
    from comfy.utils import ProgressBar
    COMFYUI_PROGRESSBAR = True
except ImportError:
    class ProgressBar:
        def __init__(self, total, *args, **kwargs):
            self.total = total

        def update(self, value=1, *args, **kwargs):
            pass
    COMFYUI_PROGRESSBAR = False


LOG_PREFIX = "[Buding-StreamASR]"
_LOGGER_ROOT = "buding_asr"


def get_logger(name: str) -> logging.Logger:
    """返回 buding_asr 命名空间下的 logger，首次调用时挂载统一格式的 handler"""
    root = logging.getLogger(_LOGGER_ROOT)
    if not root.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter(f"{LOG_PREFIX} %(levelname)s %(name)s: %(message)s"))
        root.addHandler(handler)
        root.setLevel(os.environ.get("BUDING_ASR_LOG_LEVEL", "INFO"))
        root.propagate = False
    short = name.split(".")[-1]
    return root.getChild(short)


def set_log_level(verbose: bool):
    logging.getLogger(_LOGGER_ROOT).setLevel(logging.DEBUG if verbose else logging.INFO)
    get_logger("common")


# ---------------------------------------------------------------------------
# 异常体系
# ---------------------------------------------------------------------------

class BudingAsrError(Exception):
    """所有流式识别错误的基类"""


class ShapeError(BudingAsrError):
    """张量维度不匹配"""


class ContractError(BudingAsrError):
    """调用前置条件不满足"""


class InvalidMaskError(ContractError):
    """注意力掩码存在整行全部被屏蔽的查询位置"""


class TargetError(ContractError):
    """交叉熵目标越界"""


class SequencingError(ContractError):
    """块/提示顺序错误"""


class InfeasibleAlignmentError(BudingAsrError):
    """CTC 对齐不可行（帧数不足）"""


class ConfigError(BudingAsrError):
    """配置错误，CLI 退出码 2"""


class DataFormatError(BudingAsrError):
    """数据/检查点文件格式错误，CLI 退出码 3"""

    def __init__(self, message: str, byte_offset: Optional[int] = None):
        if byte_offset is not None:
            message = f"{message} (byte offset {byte_offset})"
        super().__init__(message)
        self.byte_offset = byte_offset


class ArtifactMissingError(BudingAsrError):
    """找不到引用的语料/检查点，CLI 退出码 3"""

    def __init__(self, path, hint: str = ""):
        message = f"找不到文件或目录: {path}"
        if hint:
            message += f"（{hint}）"
        super().__init__(message)
        self.path = str(path)


class TrainingDivergedError(BudingAsrError):
    """训练损失非有限值"""

    def __init__(self, message: str, diagnostics: Optional[dict] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


# ---------------------------------------------------------------------------
# 进度条 / 随机种子
# ---------------------------------------------------------------------------

class StepProgress:
    """同时驱动 tqdm 与 ComfyUI ProgressBar 的进度条"""

    def __init__(self, total: int, desc: str = "", enabled: bool = True):
        self.total = total
        self.pbar = ProgressBar(total) if COMFYUI_PROGRESSBAR else None
        self.bar = tqdm(total=total, desc=desc, leave=False) if (TQDM_AVAILABLE and enabled) else None

    def update(self, value: int = 1, **postfix):
        if self.pbar is not None:
            self.pbar.update(value)
        if self.bar is not None:
            self.bar.update(value)
            if postfix:
                self.bar.set_postfix(**postfix)

    def close(self):
        if self.bar is not None:
            self.bar.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def seed_everything(seed: int) -> np.random.Generator:
    """固定 python/numpy/torch 随机种子，返回独立的 numpy Generator"""
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def resolve_path(path, must_exist: bool = True, hint: str = ""):
    """展开 ~ 并检查路径是否存在"""
    from pathlib import Path

    resolved = Path(str(path)).expanduser()
    if must_exist and not resolved.exists():
        raise ArtifactMissingError(resolved, hint)
    return resolved


def output_root():
    """ComfyUI 输出目录；脱离 ComfyUI 运行时使用当前目录下的 output/"""
    from pathlib import Path

    try:
        import folder_paths
        return Path(folder_paths.get_output_directory())
    except ImportError:
        return Path("output")


def resolve_output(path) -> "Path":
    """相对路径挂到输出目录下，绝对路径原样返回"""
    from pathlib import Path

    p = Path(str(path)).expanduser()
    return p if p.is_absolute() else output_root() / p
