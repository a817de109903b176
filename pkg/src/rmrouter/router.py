"""External domain router, multi-model dispatch and adapter-switching dispatch.

Three assembly shapes share one scoring surface (``score``, ``score_batch``):

* :class:`SingleAssembly` -- one reward model, no router (baseline,
  base-lora, more).
* :class:`RodosAssembly` -- a router model plus one full reward model per
  domain, all resident.
* :class:`ArlissAssembly` -- one frozen backbone hosting a router adapter
  and one reward adapter per domain; the reward adapter is hot-swapped
  according to the routing decision.

Routing is argmax over the router's softmax; exact ties go to the lowest
domain index. There is no out-of-domain rejection.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import RewardExample
from .encoder import EncoderConfig, Vocab, init_weights, pad_batch, tokenize
from .lora import AdapterHost, AdapterSpec, AdapterWeights, attach_adapter, count_adapter_params
from .model import Model, init_router_head
from .moe import MoEConfig, count_moe_params
from .training import TrainConfig, TrainResult, fit

ROUTER_ID = "router"


def reward_adapter_id(domain: str) -> str:
    return f"reward:{domain}"


class RegistryError(LookupError):
    """The router picked a domain with no registered model or adapter."""


@dataclass
class RouterDecision:
    domain: str
    probs: np.ndarray

    @property
    def index(self) -> int:
        return int(np.argmax(self.probs))


def _decide(logits: np.ndarray, domains: Sequence[str]) -> list[RouterDecision]:
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    # argmax returns the first maximum, i.e. the lowest domain index on ties.
    return [RouterDecision(domains[int(np.argmax(row))], row) for row in p]


def router_input(prompt: str, response: str = "", include_response: bool = False) -> tuple[str, str]:
    return prompt, (response if include_response else "")


# ---------------------------------------------------------------------------
# router training
# ---------------------------------------------------------------------------


def build_router(
    config: EncoderConfig,
    n_domains: int,
    seed: int,
    adapter_spec: AdapterSpec | None = None,
    backbone: Mapping[str, Tensor] | None = None,
) -> Model:
    head = init_router_head(config.hidden_dim, n_domains, ad.make_rng(seed, "head", ROUTER_ID).integers(2**31))
    if adapter_spec is None:
        weights = init_weights(config, seed, head=False)
        weights.update(head)
        return Model(config, weights, "router")
    base = dict(backbone) if backbone is not None else init_weights(config, seed, head=False)
    return Model(config, base, "router", adapter=attach_adapter(base, adapter_spec, seed, ROUTER_ID, head))


def train_router(
    examples: Sequence[RewardExample],
    domains: Sequence[str],
    cfg: TrainConfig,
    vocab: Vocab,
    config: EncoderConfig,
    adapter_spec: AdapterSpec | None = None,
    backbone: Mapping[str, Tensor] | None = None,
    include_response: bool = False,
    sink: Callable[[str], None] | None = None,
) -> TrainResult:
    """Train an n-way domain classifier on prompts with cross-entropy.

    Raises:
        ValueError: if fewer than two domains are present.
    """
    present = {ex.domain for ex in examples}
    if len(present) < 2:
        raise ValueError(f"router training needs at least two domains, got {sorted(present)}")
    unknown = present - set(domains)
    if unknown:
        raise ValueError(f"examples carry unknown domains {sorted(unknown)}")
    t0 = time.perf_counter()
    index = {d: i for i, d in enumerate(domains)}
    seqs = [
        tokenize(*router_input(ex.prompt, ex.chosen, include_response), vocab, config.max_sequence_length)
        for ex in examples
    ]
    labels = np.array([index[ex.domain] for ex in examples])
    method = "router-lora" if adapter_spec is not None else "router"
    cfg = replace(cfg, method=method)
    model = build_router(config, len(domains), cfg.seed, adapter_spec, backbone)

    def batch_loss(idx, rng):
        ids, mask = pad_batch([seqs[i] for i in idx])
        logits, _ = model.forward(ids, mask, train=True, rng=rng)
        return ad.cross_entropy(logits, labels[idx])

    report = fit(model, len(examples), batch_loss, cfg, ROUTER_ID, sink)
    report.total_seconds = time.perf_counter() - t0
    model.meta.update(method=method, seed=cfg.seed, component=ROUTER_ID, domains=list(domains), include_response=include_response)
    return TrainResult(model, report)


def route(prompt: str, router: Model, vocab: Vocab, domains: Sequence[str], response: str = "", include_response: bool = False) -> RouterDecision:
    """Deterministic domain decision for one prompt."""
    seq = tokenize(*router_input(prompt, response, include_response), vocab, router.config.max_sequence_length)
    return _decide(router([seq]), domains)[0]


def route_batch(prompts: Sequence[str], router: Model, vocab: Vocab, domains: Sequence[str], batch_size: int = 64) -> list[RouterDecision]:
    out: list[RouterDecision] = []
    for lo in range(0, len(prompts), batch_size):
        seqs = [tokenize(p, "", vocab, router.config.max_sequence_length) for p in prompts[lo : lo + batch_size]]
        out += _decide(router(seqs), domains)
    return out


# ---------------------------------------------------------------------------
# assemblies
# ---------------------------------------------------------------------------


def _scores(model: Model, vocab: Vocab, prompts, responses, batch_size: int = 64) -> np.ndarray:
    seqs = [tokenize(p, r, vocab, model.config.max_sequence_length) for p, r in zip(prompts, responses)]
    out = np.empty(len(seqs), dtype=np.float32)
    for lo in range(0, len(seqs), batch_size):
        out[lo : lo + batch_size] = model(seqs[lo : lo + batch_size])
    return out


class SingleAssembly:
    """A lone reward model (baseline, base-lora or more)."""

    swap_count = 0

    def __init__(self, method: str, model: Model, vocab: Vocab, domains: Sequence[str]):
        self.method = method
        self.model = model
        self.vocab = vocab
        self.domains = list(domains)

    def score(self, prompt: str, response: str) -> float:
        seq = tokenize(prompt, response, self.vocab, self.model.config.max_sequence_length)
        return float(self.model([seq])[0])

    def score_batch(self, prompts: Sequence[str], responses: Sequence[str]) -> np.ndarray:
        return _scores(self.model, self.vocab, prompts, responses)


class RodosAssembly:
    """Router model plus one resident full reward model per domain."""

    method = "rodos"
    swap_count = 0

    def __init__(self, router: Model, models: Mapping[str, Model], vocab: Vocab, domains: Sequence[str]):
        self.router = router
        self.models = dict(models)
        self.vocab = vocab
        self.domains = list(domains)

    def route(self, prompt: str) -> RouterDecision:
        return route(prompt, self.router, self.vocab, self.domains)

    def route_many(self, prompts: Sequence[str]) -> list[RouterDecision]:
        return route_batch(prompts, self.router, self.vocab, self.domains)

    def model_for(self, domain: str) -> Model:
        try:
            return self.models[domain]
        except KeyError:
            raise RegistryError(f"router selected domain {domain!r} with no registered reward model") from None

    def score(self, prompt: str, response: str) -> float:
        return rodos_score(prompt, response, self)[0]

    def score_batch(self, prompts, responses, force_domain: str | None = None) -> np.ndarray:
        if force_domain is not None:
            return _scores(self.model_for(force_domain), self.vocab, prompts, responses)
        decisions = self.route_many(prompts)
        out = np.empty(len(prompts), dtype=np.float32)
        for d in self.domains:
            idx = [i for i, dec in enumerate(decisions) if dec.domain == d]
            if idx:
                out[idx] = _scores(self.model_for(d), self.vocab, [prompts[i] for i in idx], [responses[i] for i in idx])
        return out


class ArlissAssembly:
    """Shared frozen backbone with a router adapter and per-domain reward adapters.

    Scoring honours the host's serialised-access contract. ``score_batch``
    is the domain-grouped path: it routes everything first, then swaps
    once per domain group.
    """

    method = "arliss"

    def __init__(self, host: AdapterHost, vocab: Vocab, domains: Sequence[str]):
        self.host = host
        self.vocab = vocab
        self.domains = list(domains)

    @property
    def config(self) -> EncoderConfig:
        return self.host.config

    @property
    def swap_count(self) -> int:
        return self.host.swap_count

    def _run(self, adapter: AdapterWeights, kind: str, seqs) -> np.ndarray:
        model = Model(self.config, self.host.backbone, kind, adapter=adapter)
        return model(seqs)

    def route(self, prompt: str) -> RouterDecision:
        seq = tokenize(prompt, "", self.vocab, self.config.max_sequence_length)
        with self.host.scoring(ROUTER_ID) as adapter:
            logits = self._run(adapter, "router", [seq])
        return _decide(logits, self.domains)[0]

    def route_many(self, prompts: Sequence[str], batch_size: int = 64) -> list[RouterDecision]:
        out: list[RouterDecision] = []
        for lo in range(0, len(prompts), batch_size):
            seqs = [tokenize(p, "", self.vocab, self.config.max_sequence_length) for p in prompts[lo : lo + batch_size]]
            with self.host.scoring(ROUTER_ID) as adapter:
                out += _decide(self._run(adapter, "router", seqs), self.domains)
        return out

    def activate(self, domain: str) -> float:
        """Bind ``domain``'s reward adapter; returns the swap wall-clock seconds."""
        aid = reward_adapter_id(domain)
        if aid not in self.host.registry:
            raise RegistryError(f"router selected domain {domain!r} with no registered reward adapter")
        t0 = time.perf_counter()
        self.host.swap_active_adapter(aid)
        return time.perf_counter() - t0

    def score_active(self, seqs) -> np.ndarray:
        with self.host.scoring() as adapter:
            return self._run(adapter, "reward", seqs)

    def score(self, prompt: str, response: str) -> float:
        return arliss_score(prompt, response, self)[0]

    def score_batch(self, prompts, responses, force_domain: str | None = None) -> np.ndarray:
        if force_domain is not None:
            decisions = [force_domain] * len(prompts)
        else:
            decisions = [dec.domain for dec in self.route_many(prompts)]
        out = np.empty(len(prompts), dtype=np.float32)
        for d in self.domains:
            idx = [i for i, dom in enumerate(decisions) if dom == d]
            if not idx:
                continue
            self.activate(d)
            seqs = [tokenize(prompts[i], responses[i], self.vocab, self.config.max_sequence_length) for i in idx]
            for lo in range(0, len(seqs), 64):
                out[idx[lo : lo + 64]] = self.score_active(seqs[lo : lo + 64])
        return out


def rodos_score(prompt: str, response: str, assembly: RodosAssembly, force_domain: str | None = None) -> tuple[float, RouterDecision]:
    """Route the prompt, then score with that domain's model only.

    ``force_domain`` bypasses the router (decision probabilities are then a
    one-hot vector).
    """
    if force_domain is not None:
        probs = np.array([d == force_domain for d in assembly.domains], dtype=np.float64)
        decision = RouterDecision(force_domain, probs)
    else:
        decision = assembly.route(prompt)
    model = assembly.model_for(decision.domain)
    seq = tokenize(prompt, response, assembly.vocab, model.config.max_sequence_length)
    return float(model([seq])[0]), decision


def arliss_score(prompt: str, response: str, assembly: ArlissAssembly, force_domain: str | None = None) -> tuple[float, RouterDecision, float]:
    """Router-adapter pass, swap to the chosen reward adapter, score.

    Returns ``(reward, decision, swap_seconds)``. Swapping to the adapter
    that is already active is a no-op.
    """
    if force_domain is not None:
        probs = np.array([d == force_domain for d in assembly.domains], dtype=np.float64)
        decision = RouterDecision(force_domain, probs)
    else:
        decision = assembly.route(prompt)
    swap_s = assembly.activate(decision.domain)
    seq = tokenize(prompt, response, assembly.vocab, assembly.config.max_sequence_length)
    return float(assembly.score_active([seq])[0]), decision, swap_s


def rodos_from_arliss(assembly: ArlissAssembly) -> RodosAssembly:
    """RODOS assembly whose models are the ARLISS adapters merged into the backbone.

    By construction its per-domain models reproduce the ARLISS reward
    adapters, which is what the functional-equivalence check relies on.
    """
    from .lora import merge_adapter

    host = assembly.host
    models = {
        d: Model(host.config, merge_adapter(host.backbone, host.registry[reward_adapter_id(d)]), "reward")
        for d in assembly.domains
    }
    router = Model(host.config, merge_adapter(host.backbone, host.registry[ROUTER_ID]), "router")
    return RodosAssembly(router, models, assembly.vocab, assembly.domains)


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------


@dataclass
class ParameterReport:
    method: str
    components: dict[str, int]
    reference_total: int

    @property
    def total(self) -> int:
        return sum(self.components.values())

    @property
    def percent(self) -> float:
        return 100.0 * self.total / self.reference_total

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "components": self.components,
            "total": self.total,
            "reference_total": self.reference_total,
            "percent": self.percent,
        }


def accounting(
    method: str,
    backbone: int,
    n_domains: int,
    adapter: int = 0,
    head: int = 0,
    router_head: int = 0,
    moe: int = 0,
    domains: Sequence[str] | None = None,
) -> dict[str, int]:
    """Per-component parameter counts for one method from unit sizes."""
    names = list(domains) if domains is not None else [str(i) for i in range(n_domains)]
    if method == "baseline":
        return {"backbone": backbone, "head": head}
    if method == "base-lora":
        return {"backbone": backbone, "adapter": adapter, "head": head}
    if method == "more":
        return {"backbone": backbone, "moe": moe, "head": head}
    if method == "rodos":
        out = {f"model:{d}": backbone + head for d in names}
        out["router"] = backbone + router_head
        return out
    if method == "arliss":
        out = {"backbone": backbone}
        out.update({f"adapter:{d}": adapter + head for d in names})
        out["router_adapter"] = adapter + router_head
        return out
    raise ValueError(f"unknown method {method!r}")


def toy_report(method: str, backbone: int, adapter: int, n_domains: int, reference: int | None = None) -> ParameterReport:
    """Accounting from bare unit sizes, heads ignored (the reference defaults to one backbone)."""
    comps = accounting(method, backbone, n_domains, adapter=adapter)
    return ParameterReport(method, comps, reference if reference is not None else backbone)


def parameter_report(
    method: str,
    config: EncoderConfig,
    adapter_spec: AdapterSpec | None,
    n_domains: int,
    reference_config: EncoderConfig,
    moe_cfg: MoEConfig | None = None,
) -> ParameterReport:
    """Exact tensor counts for one method, as a share of a baseline model.

    The reference total is a full baseline reward model (backbone + head)
    built with ``reference_config``.
    """
    from .encoder import count_backbone_params

    h = config.hidden_dim
    bb = count_backbone_params(config)
    adapter = count_adapter_params(adapter_spec, config) if adapter_spec is not None else 0
    moe = count_moe_params(h, moe_cfg or MoEConfig()) if method == "more" else 0
    comps = accounting(method, bb, n_domains, adapter=adapter, head=h + 1, router_head=h * n_domains + n_domains, moe=moe)
    reference = count_backbone_params(reference_config) + reference_config.hidden_dim + 1
    return ParameterReport(method, comps, reference)
