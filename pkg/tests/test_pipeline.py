import json

import numpy as np
import pytest

from rmrouter.checkpoint import file_digest
from rmrouter.pipeline import (
    MANIFEST,
    METHODS,
    IntegrityError,
    add_domain,
    count_assembly_parameters,
    load_assembly,
    read_manifest,
    save_assembly,
    settings_from_dict,
    train_method,
)
from rmrouter.router import ROUTER_ID, parameter_report


def _scores(assembly, examples):
    return assembly.score_batch([e.prompt for e in examples], [e.chosen for e in examples])


@pytest.mark.parametrize("method", METHODS)
def test_save_load_roundtrip(method, trained, small_data, small_settings, tmp_path):
    assembly, _ = trained[method]
    _, test = small_data
    save_assembly(assembly, tmp_path, small_settings, seed=0)
    loaded = load_assembly(tmp_path)
    assert loaded.method == method and loaded.domains == assembly.domains
    np.testing.assert_array_equal(_scores(loaded, test), _scores(assembly, test))


@pytest.mark.parametrize("method", METHODS)
def test_brute_force_count_matches_formula(method, trained, small_settings, tmp_path):
    assembly, _ = trained[method]
    save_assembly(assembly, tmp_path, small_settings, seed=0)
    s = small_settings
    enc = s.reference if method == "baseline" else s.encoder
    spec = s.adapter if method in ("base-lora", "arliss") else None
    report = parameter_report(method, enc, spec, len(assembly.domains), s.reference, s.moe)
    assert count_assembly_parameters(tmp_path) == report.total


def test_component_layout(trained, small_settings, tmp_path):
    save_assembly(trained["rodos"][0], tmp_path / "r", small_settings, seed=0)
    save_assembly(trained["arliss"][0], tmp_path / "a", small_settings, seed=0)
    assert sorted(read_manifest(tmp_path / "r")["components"]) == ["model.d0", "model.d1", "model.d2", ROUTER_ID]
    assert sorted(read_manifest(tmp_path / "a")["components"]) == [
        "adapter.d0", "adapter.d1", "adapter.d2", "adapter.router", "backbone",
    ]


def test_tampered_checkpoint_rejected(trained, small_settings, tmp_path):
    save_assembly(trained["rodos"][0], tmp_path, small_settings, seed=0)
    path = tmp_path / "model.d1.ckpt"
    raw = bytearray(path.read_bytes())
    raw[-2] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(IntegrityError, match="hash"):
        load_assembly(tmp_path)


def test_missing_pieces(trained, small_settings, tmp_path):
    with pytest.raises(IntegrityError, match="not found"):
        read_manifest(tmp_path)
    save_assembly(trained["more"][0], tmp_path, small_settings, seed=0)
    (tmp_path / "model.ckpt").unlink()
    with pytest.raises(IntegrityError, match="missing"):
        load_assembly(tmp_path)


def test_manifest_records_settings(trained, small_settings, tmp_path):
    save_assembly(trained["arliss"][0], tmp_path, small_settings, seed=5, extra={"note": "x"})
    manifest = json.loads((tmp_path / MANIFEST).read_text())
    assert manifest["seed"] == 5 and manifest["note"] == "x"
    assert settings_from_dict(manifest["settings"]).to_dict() == small_settings.to_dict()


def test_timing_components(trained):
    _, times = trained["rodos"]
    assert set(times.run_seconds) == {"d0", "d1", "d2", ROUTER_ID}
    _, times = trained["baseline"]
    assert set(times.run_seconds) == {"baseline"}
    assert times.wall_seconds >= times.run_total


def test_unknown_method(small_data, small_vocab, small_settings):
    with pytest.raises(ValueError, match="unknown method"):
        train_method("nope", small_data[0], ["d0"], small_vocab, small_settings, 0)


@pytest.mark.parametrize("method", ["rodos", "arliss"])
def test_add_domain_leaves_existing_components(method, small_vocab, small_settings, tmp_path):
    from rmrouter.data import synth_generate

    train, test = synth_generate(3, 40, seed=11, per_domain_test=10)
    old = [e for e in train if e.domain != "d2"]
    base, _ = train_method(method, old, ["d0", "d1"], small_vocab, small_settings, 0)
    save_assembly(base, tmp_path / "before", small_settings, seed=0)
    before = read_manifest(tmp_path / "before")["sha256"]
    old_test = [e for e in test if e.domain != "d2"]
    forced_before = {d: base.score_batch([e.prompt for e in old_test], [e.chosen for e in old_test], force_domain=d) for d in base.domains}

    grown = add_domain(base, "d2", [e for e in train if e.domain == "d2"], train, small_settings, 0)
    save_assembly(grown, tmp_path / "after", small_settings, seed=0)
    after = read_manifest(tmp_path / "after")["sha256"]
    assert grown.domains == ["d0", "d1", "d2"]
    for name, digest in before.items():
        if "router" not in name:
            assert after[name] == digest, name
    for d, scores in forced_before.items():
        again = grown.score_batch([e.prompt for e in old_test], [e.chosen for e in old_test], force_domain=d)
        np.testing.assert_array_equal(again, scores)
    with pytest.raises(ValueError, match="already"):
        add_domain(grown, "d2", train, train, small_settings, 0)


def test_add_domain_rejects_single_model(trained, small_settings, small_data):
    with pytest.raises(TypeError):
        add_domain(trained["more"][0], "d9", small_data[0], small_data[0], small_settings, 0)


def test_file_digest_changes(tmp_path):
    p = tmp_path / "f"
    p.write_bytes(b"a")
    d = file_digest(p)
    p.write_bytes(b"b")
    assert file_digest(p) != d
