"""
外部语言模型浅融合钩子
搜索只依赖 initial_state / score 两个方法；自带一个两层 LSTM 实现，不附带预训练权重
"""

from typing import Any, Protocol, Sequence, Tuple

import torch

from . import nd_core


class ExternalLm(Protocol):
    def initial_state(self) -> Any:
        ...

    def score(self, state: Any, token: int) -> Tuple[torch.Tensor, Any]:
        """输入 token，返回下一 token 的对数概率向量与新状态"""
        ...


class LstmLm(torch.nn.Module):

    def __init__(self, vocab_size: int, sos: int, hidden: int = 128, num_layers: int = 2,
                 masked_outputs: Sequence[int] = ()):
        super().__init__()
        self.sos = sos
        self.embedding = torch.nn.Embedding(vocab_size, hidden)
        self.lstm = torch.nn.LSTM(hidden, hidden, num_layers=num_layers)
        self.output = nd_core.Linear(hidden, vocab_size)
        out_mask = torch.zeros(vocab_size, dtype=torch.bool)
        out_mask[list(masked_outputs)] = True
        self.register_buffer("output_mask", out_mask, persistent=False)

    def forward(self, token_inputs: Sequence[int], state=None):
        """token_inputs 以 <sos> 开头；返回 [len, V] 对数概率与 LSTM 状态"""
        emb = nd_core.embedding_lookup(self.embedding.weight, list(token_inputs)).unsqueeze(1)
        out, state = self.lstm(emb, state)
        logits = self.output(out[:, 0]).masked_fill(self.output_mask, float("-inf"))
        return torch.log_softmax(logits, dim=-1), state

    def initial_state(self):
        return None

    @torch.no_grad()
    def score(self, state, token: int):
        logp, new_state = self.forward([int(token)], state)
        return logp[0], new_state
