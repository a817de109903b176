"""Pairwise preference training for reward models.

Loss is the Bradley-Terry negative log-likelihood of the reward gap,
``-log σ(r_chosen - r_rejected)``, averaged over a mini-batch and optimised
with AdamW.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import OptimizerState, Tensor
from .data import RewardExample
from .encoder import EncoderConfig, Vocab, init_weights, pad_batch, tokenize
from .lora import AdapterSpec, attach_adapter
from .model import Model, init_reward_head
from .moe import MoEConfig, init_moe_weights

log = logging.getLogger(__name__)

METHODS = ("baseline", "base-lora", "more", "per-domain", "per-domain-lora", "router", "router-lora")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 3
    seed: int = 0
    method: str = "baseline"
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.method not in METHODS:
            raise ValueError(f"unknown training method {self.method!r}")

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "desk": dict(lr=1e-3, batch_size=16, epochs=3),
    "paper": dict(lr=5.0e-6, batch_size=32, epochs=3),
}


def preset(name: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    return TrainConfig(**{**PRESETS[name], **overrides})


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def pairwise_loss(r_chosen, r_rejected):
    """``-log σ(r_chosen - r_rejected)``, overflow-free.

    Python/numpy scalars are evaluated in float64 and return a float;
    Tensors return the mean loss as a differentiable Tensor.

    Raises:
        ValueError: on non-finite inputs.
    """
    if isinstance(r_chosen, Tensor) or isinstance(r_rejected, Tensor):
        rc, rr = ad.as_tensor(r_chosen), ad.as_tensor(r_rejected)
        if not (np.isfinite(rc.data).all() and np.isfinite(rr.data).all()):
            raise ValueError("pairwise_loss: non-finite reward")
        return ad.softplus(rr - rc).mean()
    rc, rr = float(r_chosen), float(r_rejected)
    if not (math.isfinite(rc) and math.isfinite(rr)):
        raise ValueError("pairwise_loss: non-finite reward")
    z = rr - rc
    return max(z, 0.0) + math.log1p(math.exp(-abs(z)))


def pairwise_loss_grad(delta: float) -> float:
    """d/dΔ of ``-log σ(Δ)``, i.e. ``σ(Δ) - 1``."""
    if delta >= 0:
        return 1.0 / (1.0 + math.exp(-delta)) - 1.0
    e = math.exp(delta)
    return e / (1.0 + e) - 1.0


# ---------------------------------------------------------------------------
# generic loop
# ---------------------------------------------------------------------------


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    steps: int = 0
    total_seconds: float = 0.0
    component: str = ""

    @property
    def epoch_time(self) -> float:
        """Mean wall-clock seconds per epoch."""
        return float(np.mean(self.epoch_seconds)) if self.epoch_seconds else 0.0

    def log_lines(self) -> list[str]:
        return [
            f"component={self.component} epoch={i + 1} mean_loss={loss:.6f} seconds={sec:.4f}"
            for i, (loss, sec) in enumerate(zip(self.epoch_losses, self.epoch_seconds))
        ]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: Model
    report: TrainReport


def fit(
    model: Model,
    n_items: int,
    batch_loss: Callable[[np.ndarray, np.random.Generator], Tensor],
    cfg: TrainConfig,
    component: str,
    sink: Callable[[str], None] | None = None,
) -> TrainReport:
    """Mini-batch AdamW over ``n_items`` with deterministic per-seed shuffling.

    ``batch_loss(indices, rng)`` builds the scalar loss for one batch.
    """
    params = model.trainable()
    for p in params.values():
        p.requires_grad = True
    if model.adapter is not None:
        for t in model.weights.values():
            t.requires_grad = False
    state = OptimizerState(cfg.lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps)
    shuffle_rng = ad.make_rng(cfg.seed, "shuffle", component)
    noise_rng = ad.make_rng(cfg.seed, "train-noise", component)
    report = TrainReport(component=component)
    t_start = time.perf_counter()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(n_items)
        losses = []
        for lo in range(0, n_items, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            loss = batch_loss(idx, noise_rng)
            loss.backward()
            for p in params.values():
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
            ad.adamw_step(params, state)
            for p in params.values():
                p.zero_grad()
            losses.append(float(loss.data) * len(idx))
            report.steps += 1
        report.epoch_losses.append(sum(losses) / n_items)
        report.epoch_seconds.append(time.perf_counter() - t0)
        if sink is not None:
            sink(report.log_lines()[-1])
        log.debug(report.log_lines()[-1])
    report.total_seconds = time.perf_counter() - t_start
    for p in params.values():
        p.requires_grad = False
    return report


# ---------------------------------------------------------------------------
# reward models
# ---------------------------------------------------------------------------


def build_reward_model(
    config: EncoderConfig,
    seed: int,
    arch: str = "plain",
    moe_cfg: MoEConfig | None = None,
    adapter_spec: AdapterSpec | None = None,
    backbone: Mapping[str, Tensor] | None = None,
    adapter_id: str = "reward",
) -> Model:
    """Fresh (untrained) reward model of the requested shape."""
    if arch not in ("plain", "moe"):
        raise ValueError(f"unknown architecture {arch!r}")
    if arch == "moe" and adapter_spec is not None:
        raise ValueError("adapters on the MoE head are not supported")
    if adapter_spec is not None:
        base = dict(backbone) if backbone is not None else init_weights(config, seed, head=False)
        head = init_reward_head(config.hidden_dim, ad.make_rng(seed, "head", adapter_id).integers(2**31))
        adapter = attach_adapter(base, adapter_spec, seed, adapter_id, head)
        return Model(config, base, "reward", adapter=adapter)
    weights = init_weights(config, seed, head=True)
    if arch == "moe":
        moe_cfg = moe_cfg or MoEConfig()
        weights.update(init_moe_weights(config.hidden_dim, moe_cfg, seed))
        return Model(config, weights, "moe", moe=moe_cfg)
    return Model(config, weights, "reward")


def tokenize_pairs(examples: Sequence[RewardExample], vocab: Vocab, max_len: int):
    chosen = [tokenize(ex.prompt, ex.chosen, vocab, max_len) for ex in examples]
    rejected = [tokenize(ex.prompt, ex.rejected, vocab, max_len) for ex in examples]
    return chosen, rejected


def train_reward_model(
    examples: Sequence[RewardExample],
    cfg: TrainConfig,
    vocab: Vocab,
    config: EncoderConfig,
    arch: str = "plain",
    moe_cfg: MoEConfig | None = None,
    adapter_spec: AdapterSpec | None = None,
    backbone: Mapping[str, Tensor] | None = None,
    adapter_id: str = "reward",
    component: str | None = None,
    sink: Callable[[str], None] | None = None,
) -> TrainResult:
    """Train one reward model on preference pairs.

    With ``adapter_spec`` only the adapter and its head train; ``backbone``
    is used as given (and never modified) or freshly initialised from the
    seed. Chosen and rejected sequences share one forward pass per batch,
    each with its own dropout draws.

    Raises:
        ValueError: on an empty dataset, or a per-domain method given
            examples from more than one domain.
    """
    if not examples:
        raise ValueError("cannot train on an empty dataset")
    t0 = time.perf_counter()
    if cfg.method.startswith("per-domain"):
        seen = {ex.domain for ex in examples}
        if len(seen) > 1:
            raise ValueError(f"per-domain run given a domain mixture: {sorted(seen)}")
    model = build_reward_model(config, cfg.seed, arch, moe_cfg, adapter_spec, backbone, adapter_id)
    chosen, rejected = tokenize_pairs(examples, vocab, config.max_sequence_length)

    def batch_loss(idx, rng):
        seqs = [chosen[i] for i in idx] + [rejected[i] for i in idx]
        ids, mask = pad_batch(seqs)
        rewards, aux = model.forward(ids, mask, train=True, rng=rng)
        n = len(idx)
        loss = pairwise_loss(rewards[:n], rewards[n:])
        return loss + aux if aux is not None else loss

    name = component or cfg.method
    report = fit(model, len(examples), batch_loss, cfg, name, sink)
    report.total_seconds = time.perf_counter() - t0
    model.meta.update(method=cfg.method, seed=cfg.seed, component=name)
    return TrainResult(model, report)


def train_all_domains(
    data: Mapping[str, Sequence[RewardExample]],
    cfg: TrainConfig,
    vocab: Vocab,
    config: EncoderConfig,
    adapter_spec: AdapterSpec | None = None,
    backbone: Mapping[str, Tensor] | None = None,
    jobs: int = 1,
    sink: Callable[[str], None] | None = None,
    seed_offset: Mapping[str, int] | None = None,
) -> dict[str, TrainResult]:
    """One independent reward model (or adapter) per domain.

    Domain ``i`` (in ``data`` order, or ``seed_offset[domain]`` when given)
    trains with seed ``cfg.seed + i``. Runs are independent and may execute
    on ``jobs`` worker threads.

    Raises:
        ValueError: if no domains are given or any partition is empty.
    """
    if not data:
        raise ValueError("train_all_domains needs at least one domain")
    empty = [d for d, rows in data.items() if not rows]
    if empty:
        raise ValueError(f"empty domain partition(s): {empty}")
    method = "per-domain-lora" if adapter_spec is not None else "per-domain"

    def run(item):
        i, (domain, rows) = item
        offset = seed_offset[domain] if seed_offset is not None else i
        sub = replace(cfg, seed=cfg.seed + offset, method=method)
        return domain, train_reward_model(
            rows, sub, vocab, config, adapter_spec=adapter_spec, backbone=backbone,
            adapter_id=f"reward:{domain}", component=domain, sink=sink,
        )

    items = list(enumerate(data.items()))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, items))
    else:
        results = [run(it) for it in items]
    return dict(results)
