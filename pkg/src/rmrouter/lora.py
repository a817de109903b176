"""Low-rank adapters: attachment, application, counting, merging and hot-swap.

An adapter stores, per targeted linear site, ``A`` with shape ``(r, in_dim)``
and ``B`` with shape ``(out_dim, r)``. The adapted projection is::

    y = x W + b + (alpha / r) * drop(x) A^T B^T

Adapters never modify the backbone; they are added at scoring time, so
switching adapters only rebinds which ``(A, B)`` set the host applies.
Each adapter also owns its own head tensors (``head.*`` for reward
adapters, ``router.*`` for the router adapter).
"""

from __future__ import annotations

import contextlib
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import EncoderConfig, linear_layers

DEFAULT_TARGETS = ("query", "key", "value", "dense")


class UnknownTargetError(KeyError):
    pass


class UnknownAdapterError(KeyError):
    pass


class AdapterBusyError(RuntimeError):
    """A swap was attempted while a scoring call held the host."""


@dataclass(frozen=True)
class AdapterSpec:
    rank: int = 12
    alpha: float = 768.0
    dropout: float = 0.1
    targets: tuple[str, ...] = DEFAULT_TARGETS

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("adapter rank must be >= 1")
        if self.alpha <= 0:
            raise ValueError("adapter alpha must be > 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("adapter dropout must be in [0, 1)")
        object.__setattr__(self, "targets", tuple(self.targets))

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def to_dict(self) -> dict:
        d = asdict(self)
        d["targets"] = list(self.targets)
        return d


def resolve_targets(targets: Sequence[str], sites: Mapping[str, tuple[int, int]]) -> list[str]:
    """Map target names onto linear sites.

    A target matches a site when it equals the full site name or its last
    dotted component (``"query"`` matches every ``layer.{i}.attn.query``).

    Raises:
        UnknownTargetError: if a target matches nothing; the message lists
            the valid site names.
    """
    resolved: list[str] = []
    for target in targets:
        hits = [s for s in sites if s == target or s.rsplit(".", 1)[-1] == target]
        if not hits:
            raise UnknownTargetError(f"unknown adapter target {target!r}; valid names: {sorted(sites)}")
        resolved.extend(h for h in hits if h not in resolved)
    return resolved


def linear_sites(weights: Mapping[str, Tensor]) -> dict[str, tuple[int, int]]:
    """Linear layers present in a backbone weight dict, ``name -> (in, out)``."""
    sites = {}
    for name, t in weights.items():
        if name.startswith("layer.") and name.endswith(".weight") and t.ndim == 2:
            site = name[: -len(".weight")]
            if f"{site}.bias" in weights:
                sites[site] = tuple(t.shape)
    return sites


@dataclass
class AdapterWeights:
    adapter_id: str
    spec: AdapterSpec
    pairs: dict[str, tuple[Tensor, Tensor]]
    head: dict[str, Tensor] = field(default_factory=dict)

    def delta(self, site: str, x: Tensor, train: bool, rng) -> Tensor:
        a, b = self.pairs[site]
        xd = ad.dropout(x, self.spec.dropout, train, rng)
        return ((xd @ a.T) @ b.T) * self.spec.scaling

    def tensors(self) -> dict[str, Tensor]:
        """Serialisable view: ``adapter.{site}.A`` / ``adapter.{site}.B`` plus head tensors."""
        out = {}
        for site, (a, b) in self.pairs.items():
            out[f"adapter.{site}.A"] = a
            out[f"adapter.{site}.B"] = b
        out.update(self.head)
        return out

    def num_params(self, include_head: bool = True) -> int:
        n = sum(a.size + b.size for a, b in self.pairs.values())
        if include_head:
            n += sum(t.size for t in self.head.values())
        return n

    def metadata(self) -> dict:
        return {"adapter_id": self.adapter_id, "spec": self.spec.to_dict()}

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, np.ndarray], metadata: Mapping) -> AdapterWeights:
        spec_d = dict(metadata["spec"])
        spec = AdapterSpec(**{**spec_d, "targets": tuple(spec_d["targets"])})
        pairs: dict[str, list] = {}
        head = {}
        for name, arr in tensors.items():
            if name.startswith("adapter."):
                site, which = name[len("adapter.") :].rsplit(".", 1)
                pairs.setdefault(site, [None, None])["AB".index(which)] = Tensor(arr, name=name)
            else:
                head[name] = Tensor(arr, name=name)
        return cls(metadata["adapter_id"], spec, {s: (p[0], p[1]) for s, p in pairs.items()}, head)


def attach_adapter(
    weights: Mapping[str, Tensor],
    spec: AdapterSpec,
    seed: int,
    adapter_id: str = "adapter",
    head: Mapping[str, Tensor] | None = None,
) -> AdapterWeights:
    """Create a fresh adapter for the linear sites named by ``spec.targets``.

    ``A`` is truncated-normal (σ=0.02), ``B`` is zero, so a fresh adapter
    leaves the model's output unchanged. The backbone is not touched.
    """
    sites = linear_sites(weights)
    pairs = {}
    for site in resolve_targets(spec.targets, sites):
        din, dout = sites[site]
        a = ad.truncated_normal(ad.make_rng(seed, "lora", adapter_id, site), (spec.rank, din))
        pairs[site] = (
            Tensor(a, requires_grad=True, name=f"adapter.{site}.A"),
            Tensor(np.zeros((dout, spec.rank), dtype=ad.DTYPE), requires_grad=True, name=f"adapter.{site}.B"),
        )
    return AdapterWeights(adapter_id, spec, pairs, dict(head or {}))


def apply_lora_linear(x, weight, bias, a, b, spec: AdapterSpec, train: bool = False, rng=None) -> Tensor:
    """``x W + bias + (alpha/r) B(A drop(x))`` with ``W`` stored ``(in, out)``.

    Raises:
        ShapeError: if the adapter pair does not fit the base layer.
    """
    x, weight, a, b = ad.as_tensor(x), ad.as_tensor(weight), ad.as_tensor(a), ad.as_tensor(b)
    din, dout = weight.shape
    if a.shape != (spec.rank, din) or b.shape != (dout, spec.rank):
        raise ad.ShapeError("apply_lora_linear", weight.shape, a.shape, b.shape)
    if x.shape[-1] != din:
        raise ad.ShapeError("apply_lora_linear", x.shape, weight.shape)
    base = ad.linear(x, weight, bias)
    xd = ad.dropout(x, spec.dropout, train, rng)
    return base + ((xd @ a.T) @ b.T) * spec.scaling


def count_adapter_params(spec: AdapterSpec, config: EncoderConfig) -> int:
    """``sum(r * (in_dim + out_dim))`` over the resolved target sites (no heads)."""
    sites = linear_layers(config)
    return sum(spec.rank * (sites[s][0] + sites[s][1]) for s in resolve_targets(spec.targets, sites))


def merge_adapter(weights: Mapping[str, Tensor], adapter: AdapterWeights) -> dict[str, Tensor]:
    """Materialise ``W' = W + (alpha/r)(BA)^T`` into a new weight dict.

    The adapter's head tensors are copied in as well, so the result is a
    standalone model equivalent to ``backbone + adapter``.
    """
    merged = {k: Tensor(v.data.copy(), name=k) for k, v in weights.items()}
    for site, (a, b) in adapter.pairs.items():
        w = merged[f"{site}.weight"]
        delta = (b.data.astype(np.float64) @ a.data.astype(np.float64)).T * adapter.spec.scaling
        w.data = (w.data.astype(np.float64) + delta).astype(ad.DTYPE)
    for k, v in adapter.head.items():
        merged[k] = Tensor(v.data.copy(), name=k)
    return merged


class AdapterHost:
    """One frozen backbone hosting a registry of adapters with a single active binding.

    Scoring and swapping are mutually exclusive: scoring calls are serialised
    through an internal lock, and a swap issued while a scoring call is in
    flight raises :class:`AdapterBusyError` instead of waiting.
    """

    def __init__(self, backbone: Mapping[str, Tensor], config: EncoderConfig, adapters: Mapping[str, AdapterWeights]):
        self.backbone = dict(backbone)
        self.config = config
        self.registry = dict(adapters)
        self.active_id: str | None = None
        self.swap_count = 0
        self.swap_seconds = 0.0
        self._lock = threading.Lock()

    @property
    def active(self) -> AdapterWeights | None:
        return None if self.active_id is None else self.registry[self.active_id]

    def register(self, adapter: AdapterWeights) -> None:
        with self._guard():
            self.registry[adapter.adapter_id] = adapter

    def swap_active_adapter(self, adapter_id: str) -> bool:
        """Bind ``adapter_id`` as the active adapter.

        Returns:
            True if the binding changed, False for the no-op fast path.

        Raises:
            UnknownAdapterError: if ``adapter_id`` is not registered.
            AdapterBusyError: if a scoring call is in flight.
        """
        if adapter_id not in self.registry:
            raise UnknownAdapterError(f"unknown adapter {adapter_id!r}; registered: {sorted(self.registry)}")
        if adapter_id == self.active_id:
            return False
        t0 = time.perf_counter()
        with self._guard():
            self.active_id = adapter_id
            self.swap_count += 1
        self.swap_seconds += time.perf_counter() - t0
        return True

    @contextlib.contextmanager
    def _guard(self):
        if not self._lock.acquire(blocking=False):
            raise AdapterBusyError("adapter swap attempted during an in-flight scoring call")
        try:
            yield
        finally:
            self._lock.release()

    @contextlib.contextmanager
    def scoring(self, adapter_id: str | None = None):
        """Hold the host for one scoring call; yields the adapter to apply.

        ``adapter_id`` overrides the active binding for this call only (used
        for the router pass, which does not disturb the reward binding).
        """
        with self._lock:
            yield self.registry[adapter_id] if adapter_id is not None else self.active

    def head_view(self, adapter: AdapterWeights | None) -> dict[str, Tensor]:
        if adapter is None or not adapter.head:
            return self.backbone
        return {**self.backbone, **adapter.head}
