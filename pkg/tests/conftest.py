from __future__ import annotations

import pytest

from rmrouter.data import synth_generate
from rmrouter.encoder import EncoderConfig, build_vocab

TINY = EncoderConfig(vocab_size=40, max_sequence_length=12, hidden_dim=8, num_layers=2, num_heads=2, ffn_dim=16, dropout=0.0)

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        previous = _CRITERIA.get(n, (title, "PASS"))[1]
        status = "PASS" if rep.outcome == "passed" and previous == "PASS" else "FAIL"
        _CRITERIA[n] = (title, status)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, status = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2} {status}: {title}")


@pytest.fixture(scope="session")
def tiny_config():
    return TINY


@pytest.fixture(scope="session")
def small_data():
    """Three disjoint-vocabulary domains, 40 train / 10 test pairs each."""
    return synth_generate(3, 40, seed=11, per_domain_test=10)


@pytest.fixture(scope="session")
def small_vocab(small_data):
    train, test = small_data
    return build_vocab([f"{e.prompt} {e.chosen} {e.rejected}" for e in train + test], 512)


@pytest.fixture(scope="session")
def small_settings():
    from rmrouter.lora import AdapterSpec
    from rmrouter.pipeline import MethodSettings
    from rmrouter.training import preset

    enc = EncoderConfig(vocab_size=512, max_sequence_length=32, hidden_dim=32, num_layers=1, num_heads=2, ffn_dim=64)
    ref = EncoderConfig(vocab_size=512, max_sequence_length=32, hidden_dim=32, num_layers=2, num_heads=2, ffn_dim=64)
    return MethodSettings(encoder=enc, reference=ref, adapter=AdapterSpec(rank=4, alpha=16.0), train=preset("desk", epochs=4, lr=1e-2))


@pytest.fixture(scope="session")
def trained(small_data, small_vocab, small_settings):
    """One trained assembly per method on the small dataset (seed 0)."""
    from rmrouter.pipeline import METHODS, train_method

    train, _ = small_data
    domains = ["d0", "d1", "d2"]
    return {m: train_method(m, train, domains, small_vocab, small_settings, 0) for m in METHODS}
