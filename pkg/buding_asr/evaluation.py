"""
错误率统计与实验报告
合成语料里"词"就是 token，WER 在这里等同于 token 错误率
"""

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import jsonschema

from .common import ContractError, DataFormatError, get_logger

logger = get_logger(__name__)

SCHEMA_PATH = Path(__file__).resolve().parent.parent / "schemas" / "experiment_report.schema.json"


@dataclass
class ErrorRateReport:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_length: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def rate(self) -> float:
        # 空参考按长度 1 计
        return self.errors / max(self.ref_length, 1)

    def __add__(self, other: "ErrorRateReport") -> "ErrorRateReport":
        return ErrorRateReport(self.substitutions + other.substitutions, self.deletions + other.deletions,
                               self.insertions + other.insertions, self.ref_length + other.ref_length)

    def to_dict(self) -> dict:
        return {**asdict(self), "errors": self.errors, "rate": self.rate}


def edit_counts(ref: Sequence, hyp: Sequence) -> Tuple[int, int, int]:
    """
    单位代价 Levenshtein 对齐，返回 (S, D, I)
    回溯时同代价优先替换/匹配，其次插入，最后删除
    """
    n, m = len(ref), len(hyp)
    dist = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        dist[i][0] = i
    for j in range(1, m + 1):
        dist[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            diag = dist[i - 1][j - 1] + (0 if ref[i - 1] == hyp[j - 1] else 1)
            dist[i][j] = min(diag, dist[i][j - 1] + 1, dist[i - 1][j] + 1)
    s = d = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i][j] == dist[i - 1][j - 1] + (0 if ref[i - 1] == hyp[j - 1] else 1):
            s += int(ref[i - 1] != hyp[j - 1])
            i, j = i - 1, j - 1
        elif j > 0 and dist[i][j] == dist[i][j - 1] + 1:
            ins += 1
            j -= 1
        else:
            d += 1
            i -= 1
    return s, d, ins


def error_rate(refs: Sequence[Sequence], hyps: Sequence[Sequence]) -> ErrorRateReport:
    """语料级错误率：先累加各句的 S/D/I 与参考长度再相除"""
    if len(refs) != len(hyps):
        raise ContractError(f"参考 {len(refs)} 条，假设 {len(hyps)} 条，数量不一致")
    total = ErrorRateReport()
    for ref, hyp in zip(refs, hyps):
        s, d, i = edit_counts(list(ref), list(hyp))
        total = total + ErrorRateReport(s, d, i, len(ref))
    return total


# ---------------------------------------------------------------------------
# 报告
# ---------------------------------------------------------------------------

TABLE_COLUMNS = [("scheme", "训练方案"), ("variant", "提示"), ("mode", "解码"),
                 ("wer", "WER(%)"), ("rtf_p50", "RTF"), ("ep_p50", "EP50(s)")]


def _fmt(key: str, value) -> str:
    if value is None:
        return "-"
    if key == "wer":
        return f"{100.0 * value:.1f}"
    if isinstance(value, float):
        return f"{value:.3f}"
    return str(value)


def render_table(cells: List[dict]) -> str:
    """人读表格：每个 (方案, 提示, 解码) 组合一行"""
    header = [title for _, title in TABLE_COLUMNS]
    rows = [[_fmt(key, cell.get(key)) for key, _ in TABLE_COLUMNS] for cell in cells]
    widths = [max(len(h), *(len(r[k]) for r in rows)) if rows else len(h) for k, h in enumerate(header)]
    lines = [" | ".join(h.ljust(w) for h, w in zip(header, widths)),
             "-+-".join("-" * w for w in widths)]
    lines += [" | ".join(v.ljust(w) for v, w in zip(row, widths)) for row in rows]
    return "\n".join(lines)


def load_schema(path: Optional[Path] = None) -> dict:
    schema_path = Path(path) if path else SCHEMA_PATH
    return json.loads(schema_path.read_text(encoding="utf-8"))


def validate_report(report: dict, schema_path: Optional[Path] = None):
    try:
        jsonschema.validate(report, load_schema(schema_path))
    except jsonschema.ValidationError as e:
        raise DataFormatError(f"实验报告不符合 schema: {e.message}（位置 {list(e.absolute_path)}）") from e


def write_report(report: dict, out_dir) -> Path:
    """写出 report.json、cells.jsonl 与 report.txt 三份结果"""
    validate_report(report)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, ensure_ascii=False, indent=2), encoding="utf-8")
    with open(out / "cells.jsonl", "w", encoding="utf-8") as f:
        for cell in report["cells"]:
            f.write(json.dumps(cell, ensure_ascii=False) + "\n")
    (out / "report.txt").write_text(render_table(report["cells"]) + "\n", encoding="utf-8")
    logger.info(f"📊 实验报告已写出: {out}")
    return out / "report.json"
