"""Sparse mixture-of-experts reward head with noisy top-k gating.

The head sits between the pooled encoder output and the regression layer::

    h = LN_in(x)
    H = h Wg + eps * softplus(h Wnoise)        (eps ~ N(0, 1), training only)
    w = softmax(keep_top_k(H))                 (non-top-k entries -> -inf)
    y = sum_{i in top-k} w_i * expert_i(h)
    reward = head(LN_out(y))

Only selected experts are evaluated. Tensors are named ``moe.gate.Wg``,
``moe.gate.Wnoise``, ``moe.expert.{i}.{w1,b1,w2,b2}``,
``moe.norm_in.{gain,bias}`` and ``moe.norm_out.{gain,bias}``.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import reward_head


@dataclass(frozen=True)
class MoEConfig:
    num_experts: int = 5
    top_k: int = 2
    expert_dim: int = 128
    noisy: bool = True
    load_balance: float = 0.0
    noise_at_eval: bool = False

    def __post_init__(self):
        if self.num_experts < 1 or self.expert_dim < 1:
            raise ValueError("num_experts and expert_dim must be positive")
        if not 1 <= self.top_k <= self.num_experts:
            raise ValueError(f"top_k must be in [1, num_experts]; got k={self.top_k}, n_e={self.num_experts}")
        if self.load_balance < 0:
            raise ValueError("load_balance coefficient must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GateWeights:
    wg: Tensor
    wnoise: Tensor

    def __post_init__(self):
        if self.wg.shape != self.wnoise.shape:
            raise ad.ShapeError("GateWeights", self.wg.shape, self.wnoise.shape)
        if not (np.isfinite(self.wg.data).all() and np.isfinite(self.wnoise.data).all()):
            raise ValueError("gate weights must be finite")

    @classmethod
    def from_weights(cls, weights: Mapping[str, Tensor]) -> GateWeights:
        return cls(weights["moe.gate.Wg"], weights["moe.gate.Wnoise"])


@dataclass
class GateDecision:
    indices: np.ndarray
    weights: np.ndarray
    logits: np.ndarray


def moe_shapes(hidden: int, cfg: MoEConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {
        "moe.gate.Wg": (hidden, cfg.num_experts),
        "moe.gate.Wnoise": (hidden, cfg.num_experts),
        "moe.norm_in.gain": (hidden,),
        "moe.norm_in.bias": (hidden,),
        "moe.norm_out.gain": (hidden,),
        "moe.norm_out.bias": (hidden,),
    }
    for i in range(cfg.num_experts):
        shapes[f"moe.expert.{i}.w1"] = (hidden, cfg.expert_dim)
        shapes[f"moe.expert.{i}.b1"] = (cfg.expert_dim,)
        shapes[f"moe.expert.{i}.w2"] = (cfg.expert_dim, hidden)
        shapes[f"moe.expert.{i}.b2"] = (hidden,)
    return shapes


def count_moe_params(hidden: int, cfg: MoEConfig) -> int:
    return sum(int(np.prod(s)) for s in moe_shapes(hidden, cfg).values())


def init_moe_weights(hidden: int, cfg: MoEConfig, seed: int) -> dict[str, Tensor]:
    out = {}
    for name, shape in moe_shapes(hidden, cfg).items():
        if name.endswith(".gain"):
            data = np.ones(shape, dtype=ad.DTYPE)
        elif name.endswith((".bias", ".b1", ".b2")):
            data = np.zeros(shape, dtype=ad.DTYPE)
        else:
            data = ad.truncated_normal(ad.make_rng(seed, "init", name), shape)
        out[name] = Tensor(data, requires_grad=True, name=name)
    return out


def _top_k(logits: np.ndarray, k: int) -> np.ndarray:
    # Stable sort on the negated logits: exact ties go to the lower index.
    return np.argsort(-logits, axis=-1, kind="stable")[..., :k]


def gate_batch(
    x: Tensor,
    gw: GateWeights,
    cfg: MoEConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Noisy top-k gate over a batch.

    Returns:
        ``(weights, topk, logits)``: dense ``(B, n_e)`` gate weights that are
        zero outside the top-k, the ``(B, k)`` selected indices, and the
        (possibly noisy) logits as an array.
    """
    x = ad.as_tensor(x)
    if x.shape[-1] != gw.wg.shape[0]:
        raise ad.ShapeError("gate", x.shape, gw.wg.shape)
    clean = x @ gw.wg
    use_noise = cfg.noisy and (train or cfg.noise_at_eval)
    if use_noise:
        if rng is None:
            raise ValueError("noisy gating needs an rng")
        eps = rng.standard_normal(clean.shape).astype(ad.DTYPE)
        logits = clean + ad.softplus(x @ gw.wnoise) * eps
    else:
        logits = clean
    topk = _top_k(logits.data, cfg.top_k)
    keep = np.zeros(logits.shape, dtype=bool)
    np.put_along_axis(keep, topk, True, axis=-1)
    weights = ad.softmax(ad.masked_fill(logits, ~keep, -np.inf), axis=-1)
    return weights, topk, logits.data


def gate(x, gw: GateWeights, cfg: MoEConfig, train: bool = False, rng=None) -> GateDecision:
    """Gate decision for one pooled vector."""
    x = ad.as_tensor(x)
    if x.ndim != 1:
        raise ad.ShapeError("gate", x.shape, gw.wg.shape)
    with ad.no_grad():
        w, topk, logits = gate_batch(x.reshape(1, -1), gw, cfg, train, rng)
    idx = topk[0]
    return GateDecision(indices=idx.copy(), weights=w.data[0, idx].copy(), logits=logits[0].copy())


def expert_forward(x, w1, b1, w2, b2) -> Tensor:
    """Two-layer FFN ``hidden -> expert_dim -> hidden`` with GELU; no residual."""
    x, w1, w2 = ad.as_tensor(x), ad.as_tensor(w1), ad.as_tensor(w2)
    if x.shape[-1] != w1.shape[0] or w1.shape[1] != w2.shape[0]:
        raise ad.ShapeError("expert_forward", x.shape, w1.shape, w2.shape)
    return ad.linear(ad.gelu(ad.linear(x, w1, b1)), w2, b2)


def _expert(weights: Mapping[str, Tensor], i: int, x: Tensor) -> Tensor:
    p = f"moe.expert.{i}"
    return expert_forward(x, weights[f"{p}.w1"], weights[f"{p}.b1"], weights[f"{p}.w2"], weights[f"{p}.b2"])


def load_balance_loss(gate_weights, n_e: int | None = None) -> Tensor:
    """Squared coefficient of variation of per-expert importance.

    ``gate_weights`` is a ``(B, n_e)`` tensor/array of gate weights (zeros
    outside the top-k) or a sequence of :class:`GateDecision`. Importance is
    the per-expert sum over the batch; the variance is the population one.
    """
    if isinstance(gate_weights, Sequence) and gate_weights and isinstance(gate_weights[0], GateDecision):
        if n_e is None:
            raise ValueError("n_e is required with GateDecision input")
        dense = np.zeros((len(gate_weights), n_e), dtype=ad.DTYPE)
        for row, d in zip(dense, gate_weights):
            row[d.indices] = d.weights
        gate_weights = dense
    g = ad.as_tensor(gate_weights)
    if g.ndim != 2 or g.shape[0] == 0:
        raise ValueError("load_balance_loss needs a non-empty (B, n_e) batch")
    importance = g.sum(axis=0)
    mu = importance.mean()
    centred = importance - mu
    var = (centred * centred).mean()
    return var / (mu * mu + 1e-10)


class MoEOutput(NamedTuple):
    rewards: Tensor
    aux_loss: Tensor
    gate_weights: Tensor
    topk: np.ndarray


def moe_head_batch(
    pooled: Tensor,
    weights: Mapping[str, Tensor],
    cfg: MoEConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
    counter: Counter | None = None,
    dense: bool = False,
) -> MoEOutput:
    """Rewards for a ``(B, hidden)`` batch through the sparse MoE head.

    Each expert runs only on the rows that selected it. ``counter`` (if
    given) is incremented by expert index once per evaluated row.
    ``dense=True`` evaluates every expert on every row with the same gate
    weights; it is the reference path used to check the sparse one.
    """
    pooled = ad.as_tensor(pooled)
    b = pooled.shape[0]
    h = ad.layer_norm(pooled, weights["moe.norm_in.gain"], weights["moe.norm_in.bias"])
    gw, topk, _ = gate_batch(h, GateWeights.from_weights(weights), cfg, train, rng)
    y = None
    for e in range(cfg.num_experts):
        if dense:
            term = gw[:, e : e + 1] * _expert(weights, e, h)
        else:
            rows = np.flatnonzero((topk == e).any(axis=1))
            if rows.size == 0:
                continue
            out = _expert(weights, e, h[rows]) * gw[rows, e : e + 1]
            term = ad.scatter_rows(out, rows, b)
        if counter is not None:
            counter[e] += b if dense else rows.size
        y = term if y is None else y + term
    y = ad.layer_norm(y, weights["moe.norm_out.gain"], weights["moe.norm_out.bias"])
    rewards = reward_head(y, weights)
    aux = load_balance_loss(gw) * cfg.load_balance if cfg.load_balance > 0 else Tensor(0.0)
    return MoEOutput(rewards, aux, gw, topk)


def moe_head(
    x,
    weights: Mapping[str, Tensor],
    cfg: MoEConfig,
    train: bool = False,
    rng=None,
    counter: Counter | None = None,
) -> tuple[Tensor, Tensor]:
    """``(reward, aux_loss)`` for a single pooled vector."""
    x = ad.as_tensor(x)
    out = moe_head_batch(x.reshape(1, -1), weights, cfg, train, rng, counter)
    return out.rewards.reshape(()), out.aux_loss
