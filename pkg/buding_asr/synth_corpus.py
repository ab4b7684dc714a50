"""
合成语料：模板向量 + 时长 + 高斯噪声 拼成的伪语音特征，以及马尔可夫链生成的纯文本语料
目录布局：manifest.jsonl / features.bin / vocab.json
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .common import ConfigError, DataFormatError, get_logger, resolve_path
from .config import GenerationConfig, to_dict

logger = get_logger(__name__)

BLANK = "<blank>"
SOS = "<sos>"
EOS = "<eos>"
SPLITS = ("train", "dev", "test")


class Vocabulary:
    """
    词表布局：0 = blank，1..V = 内容 token，V+1 = <sos>，V+2 = <eos>
    CTC 输出类别即 0..V，与词表下标一致
    """

    def __init__(self, content_tokens: List[str]):
        if len(set(content_tokens)) != len(content_tokens):
            raise ConfigError("内容 token 存在重复")
        if {BLANK, SOS, EOS} & set(content_tokens):
            raise ConfigError("内容 token 不能与保留符号重名")
        self.tokens = [BLANK] + list(content_tokens) + [SOS, EOS]
        self._index = {tok: i for i, tok in enumerate(self.tokens)}
        self.blank = 0
        self.sos = len(content_tokens) + 1
        self.eos = len(content_tokens) + 2

    @classmethod
    def synthetic(cls, num_tokens: int) -> "Vocabulary":
        return cls([f"w{i:02d}" for i in range(num_tokens)])

    @property
    def num_content(self) -> int:
        return len(self.tokens) - 3

    @property
    def num_ctc_classes(self) -> int:
        return self.num_content + 1

    def __len__(self):
        return len(self.tokens)

    def content_ids(self) -> range:
        return range(1, self.num_content + 1)

    def is_content(self, idx: int) -> bool:
        return 1 <= idx <= self.num_content

    def index(self, token: str) -> int:
        return self._index[token]

    def token(self, idx: int) -> str:
        return self.tokens[idx]

    def decode(self, ids) -> List[str]:
        return [self.tokens[i] for i in ids]

    def to_json(self) -> dict:
        return {"tokens": self.tokens, "blank": self.blank, "sos": self.sos, "eos": self.eos}

    @classmethod
    def from_json(cls, data: dict) -> "Vocabulary":
        tokens = data["tokens"]
        vocab = cls(tokens[1:-2])
        if vocab.tokens != tokens or vocab.sos != data["sos"] or vocab.eos != data["eos"]:
            raise DataFormatError("vocab.json 保留符号位置与约定不一致")
        return vocab


@dataclass
class MarkovChain:
    """内容 token 上的一阶马尔可夫链，下标为内容序号 0..V-1（词表下标减 1）"""
    initial: np.ndarray
    transition: np.ndarray

    def to_json(self) -> dict:
        return {"initial": self.initial.tolist(), "transition": self.transition.tolist()}

    @classmethod
    def from_json(cls, data: dict) -> "MarkovChain":
        return cls(np.asarray(data["initial"], dtype=np.float64),
                   np.asarray(data["transition"], dtype=np.float64))


@dataclass
class Utterance:
    utterance_id: str
    features: np.ndarray
    transcript: List[int]
    durations: List[int] = field(default_factory=list)

    @property
    def num_frames(self) -> int:
        return int(self.features.shape[0])

    def frame_tokens(self) -> np.ndarray:
        """每帧的生成 token（由时长展开）"""
        return np.repeat(np.asarray(self.transcript, dtype=np.int64), self.durations)


@dataclass
class Corpus:
    vocab: Vocabulary
    templates: np.ndarray
    chain: MarkovChain
    splits: Dict[str, List[Utterance]]
    config: GenerationConfig
    seed: int

    def __eq__(self, other):
        if not isinstance(other, Corpus):
            return NotImplemented
        if self.vocab.tokens != other.vocab.tokens or not np.array_equal(self.templates, other.templates):
            return False
        for name in SPLITS:
            mine, theirs = self.splits.get(name, []), other.splits.get(name, [])
            if len(mine) != len(theirs):
                return False
            for a, b in zip(mine, theirs):
                if (a.utterance_id != b.utterance_id or a.transcript != b.transcript
                        or a.durations != b.durations
                        or a.features.tobytes() != b.features.tobytes()):
                    return False
        return True


def _softmax_rows(logits: np.ndarray, temperature: float) -> np.ndarray:
    if temperature <= 0:
        out = np.zeros_like(logits)
        out[np.arange(logits.shape[0]), np.argmax(logits, axis=1)] = 1.0
        return out
    z = logits / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def build_markov_chain(config: GenerationConfig, seed: int) -> MarkovChain:
    """随机转移矩阵，禁止自环（相邻重复 token 不出现）"""
    rng = np.random.default_rng([seed, 1])
    v = config.num_tokens
    logits = rng.normal(size=(v, v)) * config.chain_sharpness
    np.fill_diagonal(logits, -np.inf)
    init_logits = rng.normal(size=(1, v)) * config.chain_sharpness
    return MarkovChain(initial=_softmax_rows(init_logits, config.chain_temperature)[0],
                       transition=_softmax_rows(logits, config.chain_temperature))


def _validate_generation(config: GenerationConfig):
    if config.num_tokens < 4:
        raise ConfigError(f"词表大小至少为 4，当前 {config.num_tokens}")
    if config.duration_min < 1 or (config.duration_min < 2 and config.duration_max > 1):
        # 单帧时长只允许作为固定时长的退化配置
        raise ConfigError(f"时长下限至少为 2 帧，当前 {config.duration_min}")
    if config.duration_max < config.duration_min:
        raise ConfigError(f"duration_max ({config.duration_max}) < duration_min ({config.duration_min})")
    if config.transcript_min < 1 or config.transcript_max < config.transcript_min:
        raise ConfigError(f"转写长度范围非法: [{config.transcript_min}, {config.transcript_max}]")
    if config.noise_std < 0:
        raise ConfigError("噪声标准差不能为负")


def _sample_sentence(chain: MarkovChain, length: int, rng: np.random.Generator) -> List[int]:
    v = chain.initial.shape[0]
    state = int(rng.choice(v, p=chain.initial))
    sentence = [state]
    for _ in range(length - 1):
        state = int(rng.choice(v, p=chain.transition[state]))
        sentence.append(state)
    # 内容序号 → 词表下标
    return [s + 1 for s in sentence]


def _ctc_frames_needed(transcript: List[int]) -> int:
    repeats = sum(1 for a, b in zip(transcript, transcript[1:]) if a == b)
    return len(transcript) + repeats


def generate_corpus(config: GenerationConfig, seed: int, subsample: int = 4) -> Corpus:
    """按种子确定性地生成 train/dev/test 三个子集"""
    _validate_generation(config)
    vocab = Vocabulary.synthetic(config.num_tokens)
    rng = np.random.default_rng(seed)
    templates = rng.standard_normal((config.num_tokens, config.feature_dim)).astype(np.float32)
    chain = build_markov_chain(config, seed)

    splits: Dict[str, List[Utterance]] = {}
    sizes = {"train": config.num_train, "dev": config.num_dev, "test": config.num_test}
    for name in SPLITS:
        utterances = []
        for n in range(sizes[name]):
            length = int(rng.integers(config.transcript_min, config.transcript_max + 1))
            transcript = _sample_sentence(chain, length, rng)
            need = _ctc_frames_needed(transcript)
            for _ in range(100):
                durations = rng.integers(config.duration_min, config.duration_max + 1, size=length)
                if -(-int(durations.sum()) // subsample) >= need:
                    break
            else:
                raise ConfigError("时长范围过短，无法满足降采样后的 CTC 可行性")
            frames = np.repeat(templates[np.asarray(transcript) - 1], durations, axis=0)
            if config.noise_std > 0:
                frames = frames + rng.normal(scale=config.noise_std, size=frames.shape)
            utterances.append(Utterance(utterance_id=f"{name}-{n:05d}",
                                        features=frames.astype(np.float32),
                                        transcript=transcript,
                                        durations=[int(d) for d in durations]))
        splits[name] = utterances
    logger.info(f"✅ 合成语料生成完成: " + ", ".join(f"{k}={len(v)}" for k, v in splits.items()))
    return Corpus(vocab=vocab, templates=templates, chain=chain, splits=splits, config=config, seed=seed)


def generate_text_corpus(config: GenerationConfig, seed: int, chain: Optional[MarkovChain] = None,
                         num_sentences: Optional[int] = None) -> List[List[int]]:
    """纯文本语料（解码器 LM 预训练用），与配对语料共享同一条马尔可夫链"""
    _validate_generation(config)
    chain = chain if chain is not None else build_markov_chain(config, seed)
    rng = np.random.default_rng([seed, 2])
    total = num_sentences if num_sentences is not None else config.num_text_sentences
    sentences = []
    for _ in range(total):
        length = int(rng.integers(config.transcript_min, config.transcript_max + 1))
        sentences.append(_sample_sentence(chain, length, rng))
    return sentences


def _entropy(p: np.ndarray) -> float:
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def chain_entropy(chain: MarkovChain, length_min: int, length_max: int) -> float:
    """
    文本源的逐 token 熵（nats），包含 <eos> 预测
    句长在 [length_min, length_max] 上均匀，已输出 k 个 token 时结束的风险为 P(L=k)/P(L>=k)
    """
    lengths = np.arange(length_min, length_max + 1)
    p_len = np.full(len(lengths), 1.0 / len(lengths))
    row_entropy = np.array([_entropy(row) for row in chain.transition])
    total = _entropy(chain.initial)
    marginal = chain.initial.copy()
    for k in range(1, length_max + 1):
        reach = float(p_len[lengths >= k].sum())
        stop = float(p_len[lengths == k].sum()) / reach if reach > 0 else 0.0
        hb = _entropy(np.array([stop, 1.0 - stop]))
        total += reach * (hb + (1.0 - stop) * float(marginal @ row_entropy))
        marginal = marginal @ chain.transition
    return total / (float(lengths.mean()) + 1.0)


def nearest_template_accuracy(corpus: Corpus, split: str = "train", limit: int = 100) -> float:
    """逐帧最近模板分类与生成 token 的一致率"""
    hits = total = 0
    for utt in corpus.splits[split][:limit]:
        dist = ((utt.features[:, None, :] - corpus.templates[None, :, :]) ** 2).sum(axis=-1)
        predicted = np.argmin(dist, axis=1) + 1
        hits += int((predicted == utt.frame_tokens()).sum())
        total += utt.num_frames
    return hits / max(total, 1)


# ---------------------------------------------------------------------------
# 持久化
# ---------------------------------------------------------------------------

def save_corpus(corpus: Corpus, path) -> Path:
    out_dir = Path(path).expanduser()
    out_dir.mkdir(parents=True, exist_ok=True)
    offset = 0
    with open(out_dir / "features.bin", "wb") as blob, \
            open(out_dir / "manifest.jsonl", "w", encoding="utf-8") as manifest:
        for name in SPLITS:
            for utt in corpus.splits.get(name, []):
                data = np.ascontiguousarray(utt.features, dtype="<f4").tobytes()
                blob.write(data)
                record = {"utterance_id": utt.utterance_id, "split": name,
                          "num_frames": utt.num_frames, "dim": int(utt.features.shape[1]),
                          "offset": offset, "transcript": utt.transcript, "durations": utt.durations}
                manifest.write(json.dumps(record, ensure_ascii=False) + "\n")
                offset += len(data)
    vocab_json = {**corpus.vocab.to_json(), "feature_dim": int(corpus.templates.shape[1]),
                  "templates": corpus.templates.tolist(), "chain": corpus.chain.to_json(),
                  "config": to_dict(corpus.config), "seed": corpus.seed}
    (out_dir / "vocab.json").write_text(json.dumps(vocab_json, ensure_ascii=False), encoding="utf-8")
    logger.info(f"✅ 语料已保存: {out_dir} ({offset} 字节特征)")
    return out_dir


def _non_negative_int(rec: dict, key: str) -> int:
    value = rec[key]
    if isinstance(value, bool) or not isinstance(value, int) or value < 0:
        raise ValueError(f"{key} 必须是非负整数，实际 {value!r}")
    return value


def load_corpus(path) -> Corpus:
    in_dir = resolve_path(path, hint="请先运行 gen-data")
    for name in ("manifest.jsonl", "features.bin", "vocab.json"):
        resolve_path(in_dir / name, hint="语料目录不完整")

    vocab_text = (in_dir / "vocab.json").read_text(encoding="utf-8")
    try:
        meta = json.loads(vocab_text)
    except json.JSONDecodeError as e:
        raise DataFormatError(f"vocab.json 解析失败: {e.msg}", byte_offset=len(vocab_text[:e.pos].encode("utf-8"))) from e
    try:
        vocab = Vocabulary.from_json(meta)
        templates = np.asarray(meta["templates"], dtype=np.float32)
        chain = MarkovChain.from_json(meta["chain"])
        config = GenerationConfig(**meta.get("config", {}))
    except (KeyError, TypeError, ValueError) as e:
        raise DataFormatError(f"vocab.json 字段缺失或非法: {e}", byte_offset=0) from e

    blob = (in_dir / "features.bin").read_bytes()
    splits: Dict[str, List[Utterance]] = {name: [] for name in SPLITS}
    expected_bytes = 0
    line_offset = 0
    with open(in_dir / "manifest.jsonl", "rb") as f:
        for raw in f:
            start = line_offset
            line_offset += len(raw)
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw.decode("utf-8"))
                uid, split = str(rec["utterance_id"]), rec["split"]
                frames, dim, offset = (_non_negative_int(rec, key) for key in ("num_frames", "dim", "offset"))
                transcript = [int(x) for x in rec["transcript"]]
                durations = [int(x) for x in rec.get("durations", [])]
            except json.JSONDecodeError as e:
                raise DataFormatError(f"manifest.jsonl 行解析失败: {e.msg}", byte_offset=start + e.pos) from e
            except (KeyError, TypeError, ValueError, UnicodeDecodeError) as e:
                raise DataFormatError(f"manifest.jsonl 字段缺失或非法: {e}", byte_offset=start) from e
            if split not in splits:
                raise DataFormatError(f"未知的子集名称 {split}", byte_offset=start)
            nbytes = frames * dim * 4
            if offset + nbytes > len(blob):
                raise DataFormatError(
                    f"features.bin 被截断: {uid} 需要 [{offset}, {offset + nbytes})，文件仅 {len(blob)} 字节",
                    byte_offset=len(blob))
            if any(not vocab.is_content(t) for t in transcript):
                raise DataFormatError(f"{uid} 的转写包含非内容 token", byte_offset=start)
            feats = np.frombuffer(blob, dtype="<f4", count=frames * dim, offset=offset).reshape(frames, dim)
            splits[split].append(Utterance(uid, feats.astype(np.float32), transcript, durations))
            expected_bytes += nbytes
    if expected_bytes != len(blob):
        raise DataFormatError(
            f"manifest 声明 {expected_bytes} 字节特征，features.bin 实际 {len(blob)} 字节",
            byte_offset=min(expected_bytes, len(blob)))
    return Corpus(vocab=vocab, templates=templates, chain=chain, splits=splits,
                  config=config, seed=int(meta.get("seed", 0)))
