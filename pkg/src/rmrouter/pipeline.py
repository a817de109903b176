"""Build, persist and extend the five method assemblies.

Training plans per method:

=========  ==========================================================
baseline   one full model on pooled data, reference (large) backbone
base-lora  one adapter + head on a frozen backbone, pooled data
more       one full model with the sparse MoE head, pooled data
rodos      one full model per domain + a full router model
arliss     one frozen backbone, one adapter per domain + router adapter
=========  ==========================================================

An assembly directory holds one checkpoint per component, ``vocab.json``
and an ``assembly.json`` manifest naming everything needed to rebuild it.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

from .autodiff import Tensor
from .checkpoint import config_hash, count_parameters, file_digest, load_checkpoint, save_checkpoint
from .data import RewardExample, split_by_domain
from .encoder import DESK_BASE, DESK_LARGE, EncoderConfig, Vocab, init_weights
from .lora import AdapterHost, AdapterSpec, AdapterWeights
from .model import Model
from .moe import MoEConfig
from .router import ROUTER_ID, ArlissAssembly, RodosAssembly, SingleAssembly, reward_adapter_id, train_router
from .training import TrainConfig, preset, train_all_domains, train_reward_model

METHODS = ("baseline", "base-lora", "more", "rodos", "arliss")
ROUTER_SEED_OFFSET = 7919
MANIFEST = "assembly.json"


class IntegrityError(ValueError):
    """An assembly component is missing or does not match its recorded hash."""


@dataclass
class MethodSettings:
    encoder: EncoderConfig = DESK_BASE
    reference: EncoderConfig = DESK_LARGE
    moe: MoEConfig = field(default_factory=MoEConfig)
    adapter: AdapterSpec = field(default_factory=AdapterSpec)
    train: TrainConfig = field(default_factory=lambda: preset("desk"))
    jobs: int = 1
    include_response: bool = False

    def to_dict(self) -> dict:
        return {
            "encoder": self.encoder.to_dict(),
            "reference": self.reference.to_dict(),
            "moe": self.moe.to_dict(),
            "adapter": self.adapter.to_dict(),
            "train": self.train.to_dict(),
            "include_response": self.include_response,
        }


@dataclass
class TrainingTimes:
    """Wall-clock accounting for one method's training plan."""

    epoch_seconds: dict[str, float] = field(default_factory=dict)
    run_seconds: dict[str, float] = field(default_factory=dict)
    wall_seconds: float = 0.0

    @property
    def epoch_total(self) -> float:
        return sum(self.epoch_seconds.values())

    @property
    def run_total(self) -> float:
        return sum(self.run_seconds.values())

    def to_dict(self) -> dict:
        return {
            "epoch_seconds": self.epoch_seconds,
            "epoch_total": self.epoch_total,
            "run_seconds": self.run_seconds,
            "run_total": self.run_total,
            "wall_seconds": self.wall_seconds,
        }


def _record(times: TrainingTimes, name: str, report) -> None:
    times.epoch_seconds[name] = report.epoch_time
    times.run_seconds[name] = report.total_seconds


def train_method(
    method: str,
    train: Sequence[RewardExample],
    domains: Sequence[str],
    vocab: Vocab,
    settings: MethodSettings,
    seed: int,
    sink: Callable[[str], None] | None = None,
):
    """Train every component of ``method`` for one seed.

    Returns:
        ``(assembly, TrainingTimes)``.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    cfg = replace(settings.train, seed=seed)
    enc = settings.encoder
    times = TrainingTimes()
    t0 = time.perf_counter()
    if method in ("baseline", "base-lora", "more"):
        kwargs: dict = {}
        config = enc
        if method == "baseline":
            config = settings.reference
        elif method == "base-lora":
            kwargs = dict(adapter_spec=settings.adapter, backbone=init_weights(enc, seed, head=False))
        else:
            kwargs = dict(arch="moe", moe_cfg=settings.moe)
        res = train_reward_model(train, replace(cfg, method=method), vocab, config, component=method, sink=sink, **kwargs)
        _record(times, method, res.report)
        assembly = SingleAssembly(method, res.model, vocab, domains)
    else:
        by_domain = split_by_domain(train, domains)
        spec = settings.adapter if method == "arliss" else None
        backbone = init_weights(enc, seed, head=False) if method == "arliss" else None
        for t in (backbone or {}).values():
            t.requires_grad = False
        registry = train_all_domains(by_domain, cfg, vocab, enc, spec, backbone, settings.jobs, sink)
        for d in domains:
            _record(times, d, registry[d].report)
        router = train_router(
            train, domains, replace(cfg, seed=seed + ROUTER_SEED_OFFSET), vocab, enc, spec, backbone,
            settings.include_response, sink,
        )
        _record(times, ROUTER_ID, router.report)
        if method == "rodos":
            assembly = RodosAssembly(router.model, {d: registry[d].model for d in domains}, vocab, domains)
        else:
            adapters = {reward_adapter_id(d): registry[d].model.adapter for d in domains}
            adapters[ROUTER_ID] = router.model.adapter
            assembly = ArlissAssembly(AdapterHost(backbone, enc, adapters), vocab, domains)
    times.wall_seconds = time.perf_counter() - t0
    return assembly, times


def add_domain(
    assembly,
    domain: str,
    new_examples: Sequence[RewardExample],
    router_examples: Sequence[RewardExample],
    settings: MethodSettings,
    seed: int,
    sink: Callable[[str], None] | None = None,
):
    """Extend a rodos/arliss assembly with one new domain.

    Trains only the new domain's model (or adapter) and a fresh router over
    all domains. Existing per-domain components are reused untouched.
    """
    if domain in assembly.domains:
        raise ValueError(f"domain {domain!r} already present")
    domains = assembly.domains + [domain]
    cfg = replace(settings.train, seed=seed)
    offset = {domain: len(assembly.domains)}
    if isinstance(assembly, RodosAssembly):
        new = train_all_domains({domain: new_examples}, cfg, assembly.vocab, settings.encoder, sink=sink, seed_offset=offset)
        router = train_router(
            router_examples, domains, replace(cfg, seed=seed + ROUTER_SEED_OFFSET), assembly.vocab,
            settings.encoder, include_response=settings.include_response, sink=sink,
        )
        models = {**assembly.models, domain: new[domain].model}
        return RodosAssembly(router.model, models, assembly.vocab, domains)
    if isinstance(assembly, ArlissAssembly):
        host = assembly.host
        new = train_all_domains(
            {domain: new_examples}, cfg, assembly.vocab, host.config, settings.adapter, host.backbone, sink=sink, seed_offset=offset
        )
        router = train_router(
            router_examples, domains, replace(cfg, seed=seed + ROUTER_SEED_OFFSET), assembly.vocab, host.config,
            settings.adapter, host.backbone, settings.include_response, sink,
        )
        registry = {k: v for k, v in host.registry.items() if k != ROUTER_ID}
        registry[reward_adapter_id(domain)] = new[domain].model.adapter
        registry[ROUTER_ID] = router.model.adapter
        return ArlissAssembly(AdapterHost(host.backbone, host.config, registry), assembly.vocab, domains)
    raise TypeError(f"add_domain needs a rodos or arliss assembly, got {type(assembly).__name__}")


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def _tensors(model: Model) -> dict[str, Tensor]:
    return dict(model.weights)


def assembly_components(assembly) -> dict[str, tuple[dict[str, Tensor], dict]]:
    """``component -> (tensors, metadata)`` for every checkpoint of an assembly."""
    out: dict[str, tuple[dict[str, Tensor], dict]] = {}
    if isinstance(assembly, SingleAssembly):
        m = assembly.model
        if m.adapter is not None:
            out["backbone"] = (_tensors(m), {"kind": "backbone"})
            out["adapter"] = (m.adapter.tensors(), {"kind": "adapter", **m.adapter.metadata()})
        else:
            out["model"] = (_tensors(m), {"kind": m.kind})
    elif isinstance(assembly, RodosAssembly):
        out[ROUTER_ID] = (_tensors(assembly.router), {"kind": "router"})
        for d in assembly.domains:
            out[f"model.{d}"] = (_tensors(assembly.models[d]), {"kind": "reward", "domain": d})
    elif isinstance(assembly, ArlissAssembly):
        out["backbone"] = (dict(assembly.host.backbone), {"kind": "backbone"})
        for aid, adapter in assembly.host.registry.items():
            name = "adapter.router" if aid == ROUTER_ID else f"adapter.{aid.split(':', 1)[1]}"
            out[name] = (adapter.tensors(), {"kind": "adapter", **adapter.metadata()})
    else:
        raise TypeError(f"not an assembly: {type(assembly).__name__}")
    return out


def save_assembly(assembly, out_dir: str | Path, settings: MethodSettings, seed: int, extra: dict | None = None) -> Path:
    """Write all component checkpoints, the vocabulary and the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    assembly.vocab.save(out_dir / "vocab.json")
    chash = config_hash(settings.to_dict())
    files, hashes = {}, {}
    for name, (tensors, meta) in assembly_components(assembly).items():
        path = out_dir / f"{name}.ckpt"
        save_checkpoint(path, tensors, {**meta, "method": assembly.method, "seed": seed, "config_hash": chash})
        files[name] = path.name
        hashes[name] = file_digest(path)
    manifest = {
        "method": assembly.method,
        "domains": assembly.domains,
        "seed": seed,
        "vocab": "vocab.json",
        "components": files,
        "sha256": hashes,
        "settings": settings.to_dict(),
        "config_hash": chash,
        **(extra or {}),
    }
    path = out_dir / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def settings_from_dict(d: dict) -> MethodSettings:
    spec = dict(d["adapter"])
    spec["targets"] = tuple(spec["targets"])
    return MethodSettings(
        encoder=EncoderConfig(**d["encoder"]),
        reference=EncoderConfig(**d["reference"]),
        moe=MoEConfig(**d["moe"]),
        adapter=AdapterSpec(**spec),
        train=TrainConfig(**d["train"]),
        include_response=d.get("include_response", False),
    )


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    if not path.exists():
        raise IntegrityError(f"assembly manifest not found: {path}")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    manifest["_dir"] = str(path.parent)
    return manifest


def _load_component(manifest: dict, name: str) -> tuple[dict, dict]:
    path = Path(manifest["_dir"]) / manifest["components"][name]
    if not path.exists():
        raise IntegrityError(f"missing checkpoint {path}")
    if file_digest(path) != manifest["sha256"][name]:
        raise IntegrityError(f"checkpoint {path} does not match its recorded hash")
    return load_checkpoint(path)


def _model(arrays: dict, config: EncoderConfig, kind: str, moe: MoEConfig | None = None) -> Model:
    return Model(config, {k: Tensor(v, name=k) for k, v in arrays.items()}, kind, moe=moe)


def load_assembly(path: str | Path):
    """Rebuild an assembly from its manifest, verifying every checkpoint."""
    manifest = read_manifest(path)
    settings = settings_from_dict(manifest["settings"])
    vocab = Vocab.load(Path(manifest["_dir"]) / manifest["vocab"])
    method, domains = manifest["method"], manifest["domains"]
    comps = {name: _load_component(manifest, name) for name in manifest["components"]}
    enc = settings.encoder
    if method == "baseline":
        return SingleAssembly(method, _model(comps["model"][0], settings.reference, "reward"), vocab, domains)
    if method == "more":
        return SingleAssembly(method, _model(comps["model"][0], enc, "moe", settings.moe), vocab, domains)
    if method == "base-lora":
        model = _model(comps["backbone"][0], enc, "reward")
        model.adapter = AdapterWeights.from_tensors(*comps["adapter"])
        return SingleAssembly(method, model, vocab, domains)
    if method == "rodos":
        models = {d: _model(comps[f"model.{d}"][0], enc, "reward") for d in domains}
        return RodosAssembly(_model(comps[ROUTER_ID][0], enc, "router"), models, vocab, domains)
    if method == "arliss":
        backbone = {k: Tensor(v, name=k) for k, v in comps["backbone"][0].items()}
        registry = {}
        for name, (arrays, meta) in comps.items():
            if name.startswith("adapter."):
                adapter = AdapterWeights.from_tensors(arrays, meta)
                registry[adapter.adapter_id] = adapter
        return ArlissAssembly(AdapterHost(backbone, enc, registry), vocab, domains)
    raise IntegrityError(f"unknown method {method!r} in manifest")


def count_assembly_parameters(path: str | Path) -> int:
    """Brute-force scalar count over every checkpoint an assembly manifest lists."""
    manifest = read_manifest(path)
    return sum(count_parameters(Path(manifest["_dir"]) / f) for f in manifest["components"].values())
