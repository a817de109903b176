"""A scoring unit: backbone weights plus one head, optionally adapted.

``kind`` selects the head:

* ``"reward"`` -- linear regression head (``head.*``)
* ``"moe"``    -- sparse MoE block then regression head (``moe.*``, ``head.*``)
* ``"router"`` -- n-way classification head (``router.*``)

When an adapter is attached the backbone is frozen and the head tensors
live on the adapter.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import EncoderConfig, TokenSequence, encode_batch, pad_batch, reward_head, tokenize
from .lora import AdapterWeights
from .moe import MoEConfig, moe_head_batch

KINDS = ("reward", "moe", "router")


def init_router_head(hidden: int, n_domains: int, seed: int) -> dict[str, Tensor]:
    w = ad.truncated_normal(ad.make_rng(seed, "init", "router.weight"), (hidden, n_domains))
    return {
        "router.weight": Tensor(w, requires_grad=True, name="router.weight"),
        "router.bias": Tensor(np.zeros(n_domains, dtype=ad.DTYPE), requires_grad=True, name="router.bias"),
    }


def init_reward_head(hidden: int, seed: int) -> dict[str, Tensor]:
    w = ad.truncated_normal(ad.make_rng(seed, "init", "head.weight"), (hidden,))
    return {
        "head.weight": Tensor(w, requires_grad=True, name="head.weight"),
        "head.bias": Tensor(np.zeros(1, dtype=ad.DTYPE), requires_grad=True, name="head.bias"),
    }


@dataclass
class Model:
    config: EncoderConfig
    weights: dict[str, Tensor]
    kind: str = "reward"
    moe: MoEConfig | None = None
    adapter: AdapterWeights | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if (self.kind == "moe") != (self.moe is not None):
            raise ValueError("an MoE config is required exactly when kind == 'moe'")

    # -- parameters ----------------------------------------------------
    def view(self) -> dict[str, Tensor]:
        """Backbone weights overlaid with adapter-owned head tensors."""
        if self.adapter is None or not self.adapter.head:
            return self.weights
        return {**self.weights, **self.adapter.head}

    def trainable(self) -> dict[str, Tensor]:
        if self.adapter is None:
            return dict(self.weights)
        out = {}
        for site, (a, b) in self.adapter.pairs.items():
            out[f"adapter.{site}.A"] = a
            out[f"adapter.{site}.B"] = b
        out.update(self.adapter.head)
        return out

    def num_params(self) -> int:
        n = sum(t.size for t in self.weights.values())
        if self.adapter is not None:
            n += self.adapter.num_params()
        return n

    # -- forward -------------------------------------------------------
    def forward(
        self,
        ids: np.ndarray,
        mask: np.ndarray,
        train: bool = False,
        rng: np.random.Generator | None = None,
        counter: Counter | None = None,
    ) -> tuple[Tensor, Tensor | None]:
        """Rewards ``(B,)`` or router logits ``(B, n)``, plus the MoE aux loss."""
        w = self.view()
        pooled = encode_batch(ids, mask, w, self.config, train, rng, self.adapter)
        if self.kind == "router":
            return ad.linear(pooled, w["router.weight"], w["router.bias"]), None
        if self.kind == "moe":
            out = moe_head_batch(pooled, w, self.moe, train, rng, counter)
            return out.rewards, out.aux_loss
        return reward_head(pooled, w), None

    def __call__(self, seqs: Sequence[TokenSequence]) -> np.ndarray:
        ids, mask = pad_batch(seqs)
        with ad.no_grad():
            out, _ = self.forward(ids, mask)
        return out.data


def score_pairs(model: Model, vocab, prompts: Sequence[str], responses: Sequence[str], batch_size: int = 64) -> np.ndarray:
    """Eval-mode rewards for aligned prompt/response lists."""
    seqs = [tokenize(p, r, vocab, model.config.max_sequence_length) for p, r in zip(prompts, responses)]
    out = np.empty(len(seqs), dtype=ad.DTYPE)
    for lo in range(0, len(seqs), batch_size):
        out[lo : lo + batch_size] = model(seqs[lo : lo + batch_size])
    return out
