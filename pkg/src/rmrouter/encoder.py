"""Tiny transformer encoder used as the reward-model / router backbone.

Tensor naming scheme (weights stored ``(in_dim, out_dim)``)::

    embed.token                 (vocab_size, hidden)
    embed.position              (max_sequence_length, hidden)
    embed.norm.{gain,bias}
    layer.{i}.attn.{query,key,value,dense}.{weight,bias}
    layer.{i}.attn.norm.{gain,bias}
    layer.{i}.ffn.{intermediate,output}.{weight,bias}
    layer.{i}.ffn.norm.{gain,bias}
    head.weight (hidden,), head.bias (1,)          # reward regression head

Adapters key on the linear sites ``layer.{i}.attn.query`` etc.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PAD, UNK, SEP = 0, 1, 2
RESERVED = ("[PAD]", "[UNK]", "[SEP]")
MASK_VALUE = -1e9


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int = 512
    max_sequence_length: int = 64
    hidden_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    ffn_dim: int = 128
    dropout: float = 0.1

    def __post_init__(self):
        for name in ("vocab_size", "max_sequence_length", "hidden_dim", "num_layers", "num_heads", "ffn_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"EncoderConfig.{name} must be positive")
        if self.hidden_dim % self.num_heads:
            raise ValueError(
                f"hidden_dim ({self.hidden_dim}) must be divisible by num_heads ({self.num_heads})"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)


# Desk-scale stand-ins for the base- and large-sized backbones.
DESK_BASE = EncoderConfig()
DESK_LARGE = EncoderConfig(hidden_dim=96, num_layers=3, num_heads=4, ffn_dim=192)


# ---------------------------------------------------------------------------
# vocabulary and tokenisation
# ---------------------------------------------------------------------------


class Vocab:
    """Whitespace-token vocabulary with reserved PAD/UNK/SEP ids."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:3]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.tokens, ensure_ascii=False) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> Vocab:
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))


def build_vocab(corpus: Iterable[str], max_size: int) -> Vocab:
    """Frequency-ranked whitespace vocabulary, ties broken lexicographically.

    Raises:
        ValueError: if ``corpus`` is empty.
    """
    counts: Counter[str] = Counter()
    n_docs = 0
    for doc in corpus:
        n_docs += 1
        counts.update(doc.split())
    if n_docs == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    for tok in RESERVED:
        counts.pop(tok, None)
    ranked = sorted(counts, key=lambda t: (-counts[t], t))
    room = max(0, max_size - len(RESERVED))
    return Vocab(list(RESERVED) + ranked[:room])


@dataclass
class TokenSequence:
    ids: list[int]
    mask: list[bool]
    spans: list[tuple[str, int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)


_WORD = re.compile(r"\S+")


def tokenize(prompt: str, response: str, vocab: Vocab, max_len: int) -> TokenSequence:
    """``prompt tokens + [SEP] + response tokens``, right-truncated to ``max_len``.

    ``spans`` records ``(segment, start, end)`` character offsets into the
    original prompt or response for each kept token.
    """
    ids: list[int] = []
    spans: list[tuple[str, int, int]] = []
    for m in _WORD.finditer(prompt):
        ids.append(vocab.id(m.group()))
        spans.append(("prompt", m.start(), m.end()))
    ids.append(SEP)
    spans.append(("sep", 0, 0))
    for m in _WORD.finditer(response):
        ids.append(vocab.id(m.group()))
        spans.append(("response", m.start(), m.end()))
    ids, spans = ids[:max_len], spans[:max_len]
    return TokenSequence(ids=ids, mask=[True] * len(ids), spans=spans)


def pad_batch(seqs: Sequence[TokenSequence]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to the longest sequence; returns ``(ids, mask)`` arrays."""
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s.ids
        mask[i, : len(s)] = s.mask
    return ids, mask


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------


def linear_layers(config: EncoderConfig) -> dict[str, tuple[int, int]]:
    """Every linear site in the backbone as ``name -> (in_dim, out_dim)``."""
    h, f = config.hidden_dim, config.ffn_dim
    sites = {}
    for i in range(config.num_layers):
        for proj in ("query", "key", "value", "dense"):
            sites[f"layer.{i}.attn.{proj}"] = (h, h)
        sites[f"layer.{i}.ffn.intermediate"] = (h, f)
        sites[f"layer.{i}.ffn.output"] = (f, h)
    return sites


def weight_shapes(config: EncoderConfig, head: bool = True) -> dict[str, tuple[int, ...]]:
    h = config.hidden_dim
    shapes: dict[str, tuple[int, ...]] = {
        "embed.token": (config.vocab_size, h),
        "embed.position": (config.max_sequence_length, h),
        "embed.norm.gain": (h,),
        "embed.norm.bias": (h,),
    }
    for i in range(config.num_layers):
        shapes[f"layer.{i}.attn.norm.gain"] = (h,)
        shapes[f"layer.{i}.attn.norm.bias"] = (h,)
        shapes[f"layer.{i}.ffn.norm.gain"] = (h,)
        shapes[f"layer.{i}.ffn.norm.bias"] = (h,)
    for name, (din, dout) in linear_layers(config).items():
        shapes[f"{name}.weight"] = (din, dout)
        shapes[f"{name}.bias"] = (dout,)
    if head:
        shapes["head.weight"] = (h,)
        shapes["head.bias"] = (1,)
    return shapes


def count_backbone_params(config: EncoderConfig) -> int:
    return sum(int(np.prod(s)) for s in weight_shapes(config, head=False).values())


def init_weights(config: EncoderConfig, seed: int, head: bool = True) -> dict[str, Tensor]:
    """Truncated-normal (σ=0.02) matrices, zero biases, unit layer-norm gains."""
    out = {}
    for name, shape in weight_shapes(config, head=head).items():
        if name.endswith(".gain"):
            data = np.ones(shape, dtype=ad.DTYPE)
        elif name.endswith(".bias"):
            data = np.zeros(shape, dtype=ad.DTYPE)
        else:
            data = ad.truncated_normal(ad.make_rng(seed, "init", name), shape)
        out[name] = Tensor(data, requires_grad=True, name=name)
    return out


def check_weights(weights: Mapping[str, Tensor], config: EncoderConfig, head: bool = False) -> None:
    expected = weight_shapes(config, head=head)
    for name, shape in expected.items():
        if name not in weights:
            raise KeyError(f"missing tensor {name!r}")
        if weights[name].shape != shape:
            raise ad.ShapeError(f"weights[{name!r}]", weights[name].shape, shape)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def _project(x: Tensor, weights, name: str, adapter, train: bool, rng) -> Tensor:
    y = ad.linear(x, weights[f"{name}.weight"], weights[f"{name}.bias"])
    if adapter is not None and name in adapter.pairs:
        y = y + adapter.delta(name, x, train, rng)
    return y


def encoder_states(
    ids: np.ndarray,
    mask: np.ndarray,
    weights: Mapping[str, Tensor],
    config: EncoderConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
    adapter=None,
    capture: list | None = None,
) -> Tensor:
    """Full ``(B, T, hidden)`` output of the encoder stack.

    ``adapter`` is anything exposing ``pairs`` and ``delta(site, x, train, rng)``
    (see :class:`rmrouter.lora.AdapterWeights`); its low-rank update is added
    to matching linear sites. When ``capture`` is a list, each layer's
    attention probabilities are appended to it.
    """
    ids = np.asarray(ids)
    mask = np.asarray(mask, dtype=bool)
    b, t = ids.shape
    if t > config.max_sequence_length:
        raise ValueError(f"sequence length {t} exceeds max_sequence_length {config.max_sequence_length}")
    h, nh, dh = config.hidden_dim, config.num_heads, config.head_dim
    p = config.dropout

    def heads(z):
        return z.reshape(b, t, nh, dh).transpose(0, 2, 1, 3)

    x = ad.embedding(weights["embed.token"], ids) + weights["embed.position"][:t]
    x = ad.layer_norm(x, weights["embed.norm.gain"], weights["embed.norm.bias"])
    x = ad.dropout(x, p, train, rng)
    key_pad = ~mask[:, None, None, :]
    scale = 1.0 / np.sqrt(dh)
    for i in range(config.num_layers):
        pre = f"layer.{i}"
        q = heads(_project(x, weights, f"{pre}.attn.query", adapter, train, rng))
        k = heads(_project(x, weights, f"{pre}.attn.key", adapter, train, rng))
        v = heads(_project(x, weights, f"{pre}.attn.value", adapter, train, rng))
        scores = ad.masked_fill((q @ k.transpose(0, 1, 3, 2)) * scale, key_pad, MASK_VALUE)
        attn = ad.softmax(scores, axis=-1)
        if capture is not None:
            capture.append(attn.data)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(b, t, h)
        out = _project(ctx, weights, f"{pre}.attn.dense", adapter, train, rng)
        x = ad.layer_norm(
            x + ad.dropout(out, p, train, rng), weights[f"{pre}.attn.norm.gain"], weights[f"{pre}.attn.norm.bias"]
        )
        ff = ad.gelu(_project(x, weights, f"{pre}.ffn.intermediate", adapter, train, rng))
        ff = _project(ff, weights, f"{pre}.ffn.output", adapter, train, rng)
        x = ad.layer_norm(
            x + ad.dropout(ff, p, train, rng), weights[f"{pre}.ffn.norm.gain"], weights[f"{pre}.ffn.norm.bias"]
        )
    return x


def encode_batch(ids, mask, weights, config, train=False, rng=None, adapter=None) -> Tensor:
    """Pooled first-position hidden state, ``(B, hidden)``."""
    return encoder_states(ids, mask, weights, config, train, rng, adapter)[:, 0, :]


def attention_probs(ids, mask, weights, config: EncoderConfig) -> list[np.ndarray]:
    """Per-layer ``(B, heads, T, T)`` attention matrices in eval mode."""
    maps: list[np.ndarray] = []
    with ad.no_grad():
        encoder_states(ids, mask, weights, config, capture=maps)
    return maps


def encode(
    tokens: TokenSequence,
    weights: Mapping[str, Tensor],
    config: EncoderConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
    adapter=None,
) -> Tensor:
    """Pooled ``(hidden,)`` representation of a single sequence."""
    ids, mask = pad_batch([tokens])
    return encode_batch(ids, mask, weights, config, train, rng, adapter)[0]


def reward_head(pooled, weights: Mapping[str, Tensor]) -> Tensor:
    """Affine map from pooled vector(s) to reward(s); no activation."""
    pooled = ad.as_tensor(pooled)
    w, bias = weights["head.weight"], weights["head.bias"]
    if pooled.shape[-1] != w.shape[0]:
        raise ad.ShapeError("reward_head", pooled.shape, w.shape)
    r = pooled @ w + bias
    return r.reshape(()) if pooled.ndim == 1 else r
