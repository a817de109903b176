import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rmrouter import autodiff as ad
from rmrouter.autodiff import Tensor
from rmrouter.checkpoint import state_digest
from rmrouter.encoder import DESK_BASE, encode_batch, init_weights, linear_layers, reward_head
from rmrouter.lora import (
    AdapterBusyError,
    AdapterHost,
    AdapterSpec,
    AdapterWeights,
    UnknownAdapterError,
    UnknownTargetError,
    apply_lora_linear,
    attach_adapter,
    count_adapter_params,
    merge_adapter,
    resolve_targets,
)
from rmrouter.model import init_reward_head


def randomise_b(adapter, seed, scale=0.05):
    rng = np.random.default_rng(seed)
    for a, b in adapter.pairs.values():
        b.data = (rng.standard_normal(b.shape) * scale).astype(np.float32)


def test_spec_defaults():
    spec = AdapterSpec()
    assert (spec.rank, spec.alpha, spec.dropout) == (12, 768.0, 0.1)
    assert spec.scaling == 64.0


@pytest.mark.parametrize("bad", [dict(rank=0), dict(alpha=0), dict(dropout=1.0)])
def test_spec_validation(bad):
    with pytest.raises(ValueError):
        AdapterSpec(**bad)


def test_resolve_suffix_and_full_names(tiny_config):
    sites = linear_layers(tiny_config)
    assert resolve_targets(["query"], sites) == ["layer.0.attn.query", "layer.1.attn.query"]
    assert resolve_targets(["layer.1.ffn.output"], sites) == ["layer.1.ffn.output"]


def test_unknown_target_lists_valid_names(tiny_config):
    with pytest.raises(UnknownTargetError, match="layer.0.attn.query"):
        resolve_targets(["bogus"], linear_layers(tiny_config))


def test_param_count_formula():
    spec = AdapterSpec()
    h = DESK_BASE.hidden_dim
    # four h×h sites per layer, each r*(h+h)
    assert count_adapter_params(spec, DESK_BASE) == DESK_BASE.num_layers * 4 * spec.rank * 2 * h
    adapter = attach_adapter(init_weights(DESK_BASE, 0, head=False), spec, 0)
    assert adapter.num_params(include_head=False) == count_adapter_params(spec, DESK_BASE)


def test_apply_lora_linear_formula():
    rng = np.random.default_rng(0)
    spec = AdapterSpec(rank=2, alpha=4.0, dropout=0.0)
    x, w, b = rng.standard_normal((3, 5)), rng.standard_normal((5, 4)), rng.standard_normal(4)
    a, bb = rng.standard_normal((2, 5)), rng.standard_normal((4, 2))
    out = apply_lora_linear(Tensor(x), Tensor(w), Tensor(b), Tensor(a), Tensor(bb), spec).data
    ref = x @ w + b + 2.0 * (x @ a.T @ bb.T)
    np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-5)


def test_apply_lora_linear_shape_error():
    spec = AdapterSpec(rank=2, alpha=4.0)
    with pytest.raises(ad.ShapeError):
        apply_lora_linear(Tensor(np.ones((1, 5))), Tensor(np.ones((5, 4))), None, Tensor(np.ones((3, 5))), Tensor(np.ones((4, 2))), spec)


def test_zero_b_is_identity(tiny_config):
    w = init_weights(tiny_config, 1)
    adapter = attach_adapter(w, AdapterSpec(rank=4, alpha=8.0), seed=2)
    ids = np.random.default_rng(0).integers(3, 40, (4, 9))
    mask = np.ones_like(ids, dtype=bool)
    base = encode_batch(ids, mask, w, tiny_config).data
    adapted = encode_batch(ids, mask, w, tiny_config, adapter=adapter).data
    np.testing.assert_array_equal(base, adapted)


@given(st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_merge_matches_adapted_forward(seed):
    from tests.conftest import TINY

    w = init_weights(TINY, seed)
    adapter = attach_adapter(w, AdapterSpec(rank=3, alpha=6.0, dropout=0.0), seed, head={"head.weight": w["head.weight"], "head.bias": w["head.bias"]})
    randomise_b(adapter, seed)
    merged = merge_adapter(w, adapter)
    ids = np.random.default_rng(seed).integers(3, 40, (5, 8))
    mask = np.ones_like(ids, dtype=bool)
    a = reward_head(encode_batch(ids, mask, w, TINY, adapter=adapter), w).data
    b = reward_head(encode_batch(ids, mask, merged, TINY), merged).data
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_merge_does_not_touch_backbone(tiny_config):
    w = init_weights(tiny_config, 0)
    before = state_digest(w)
    adapter = attach_adapter(w, AdapterSpec(rank=2, alpha=2.0), 0)
    randomise_b(adapter, 0)
    merge_adapter(w, adapter)
    assert state_digest(w) == before


def test_lora_path_gradients(tiny_config):
    w = init_weights(tiny_config, 3)
    for t in w.values():
        t.requires_grad = False
    adapter = attach_adapter(w, AdapterSpec(rank=2, alpha=4.0, dropout=0.0), 3)
    randomise_b(adapter, 3, scale=0.5)
    for a, b in adapter.pairs.values():
        a.data = (a.data * 20).astype(np.float32)
    ids = np.array([[4, 9, 2, 11, 5], [7, 2, 3, 8, 6]])
    mask = np.ones_like(ids, dtype=bool)
    site = "layer.0.attn.value"
    leaves = {"A": adapter.pairs[site][0], "B": adapter.pairs[site][1]}

    def fn():
        r = reward_head(encode_batch(ids, mask, w, tiny_config, adapter=adapter), w)
        return (r * Tensor(np.array([1.0, -2.0], np.float32))).sum()

    errs = ad.check_gradients(fn, leaves)
    assert max(errs.values()) <= 2e-2, errs


def test_serialisation_roundtrip(tiny_config):
    w = init_weights(tiny_config, 0, head=False)
    adapter = attach_adapter(w, AdapterSpec(rank=2, alpha=2.0), 0, "reward:x", init_reward_head(8, 0))
    arrays = {k: t.data for k, t in adapter.tensors().items()}
    back = AdapterWeights.from_tensors(arrays, adapter.metadata())
    assert back.adapter_id == "reward:x" and back.spec == adapter.spec
    assert set(back.pairs) == set(adapter.pairs) and set(back.head) == set(adapter.head)


class TestHost:
    @pytest.fixture
    def host(self, tiny_config):
        w = init_weights(tiny_config, 0, head=False)
        spec = AdapterSpec(rank=2, alpha=2.0)
        adapters = {f"a{i}": attach_adapter(w, spec, i, f"a{i}") for i in range(3)}
        return AdapterHost(w, tiny_config, adapters)

    def test_swap_counts_real_rebinds_only(self, host):
        assert host.swap_active_adapter("a0") is True
        assert host.swap_active_adapter("a0") is False
        assert host.swap_active_adapter("a1") is True
        assert host.swap_count == 2 and host.active_id == "a1"

    def test_unknown_adapter(self, host):
        with pytest.raises(UnknownAdapterError, match="a0"):
            host.swap_active_adapter("nope")

    def test_swap_during_scoring_is_rejected(self, host):
        host.swap_active_adapter("a0")
        entered, release = threading.Event(), threading.Event()

        def score():
            with host.scoring():
                entered.set()
                release.wait(5)

        t = threading.Thread(target=score)
        t.start()
        entered.wait(5)
        with pytest.raises(AdapterBusyError):
            host.swap_active_adapter("a1")
        release.set()
        t.join()
        assert host.active_id == "a0"
        assert host.swap_active_adapter("a1") is True

    def test_override_does_not_rebind(self, host):
        host.swap_active_adapter("a0")
        with host.scoring("a2") as adapter:
            assert adapter.adapter_id == "a2"
        assert host.active_id == "a0" and host.swap_count == 1

    def test_swaps_never_change_backbone(self, host):
        before = state_digest(host.backbone)
        for i in np.random.default_rng(0).integers(0, 3, 50):
            host.swap_active_adapter(f"a{i}")
        assert state_digest(host.backbone) == before
