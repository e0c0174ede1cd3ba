import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oarkit import runtime
from oarkit.codec import encode_stream
from oarkit.model import ModelConfig, OARModel
from oarkit.runtime import (
    FUSION_LATENCY_MS, ConfigError, CostModel, correctness_vector, evaluate_dataset, read_trace, run_stream,
    simulate_cost, write_trace,
)
from oarkit.synth import DatasetSpec, synthesize_dataset
from strategies import random_packets

TINY = dict(gate_widths=(4, 8, 8), main_widths=(4, 8, 8, 8), gating_hidden=8)
COMPONENTS = ["decode", "fusion", "gating"] + [f"{k}.{m}" for k in ("gate", "main") for m in ("image", "motion", "residual")]


def tiny_model(exit_bias=None, gate_bias=None, seed=0):
    model = OARModel(ModelConfig(num_classes=4, **TINY), seed=seed)
    with torch.no_grad():
        if exit_bias is not None:
            model.params["gate_exit.proj.weight"].zero_()
            model.params["gate_exit.proj.bias"].fill_(exit_bias)
        if gate_bias is not None:
            for m, b in gate_bias.items():
                model.params[f"gate.{m}.head.weight"].zero_()
                model.params[f"gate.{m}.head.bias"].fill_(b)
    return model


def stream(n=10, seed=0, class_id=1):
    return encode_stream(random_packets(np.random.default_rng(seed), n), gop=12, class_id=class_id)


def test_empty_trace_and_fusion_default():
    assert simulate_cost([], CostModel.default()) == (0.0, 0.0)
    assert simulate_cost(["fusion"], CostModel.default()) == (0.69, 0.69)
    assert FUSION_LATENCY_MS == 0.69


def test_unknown_component_and_negative_cost():
    with pytest.raises(ConfigError):
        simulate_cost(["warp_drive"], CostModel.default())
    with pytest.raises(ConfigError):
        CostModel({"decode": (-1.0, 0.0)})


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sampled_from(COMPONENTS), max_size=60), st.floats(0.1, 10))
def test_cost_is_linear(trace, factor):
    cm = CostModel({c: (float(i + 1), 0.5 * (i + 1)) for i, c in enumerate(COMPONENTS)})
    lat, en = simulate_cost(trace, cm)
    lat2, en2 = simulate_cost(trace, cm.scaled(factor))
    assert math.isclose(lat2, factor * lat, rel_tol=1e-12, abs_tol=1e-12)
    assert math.isclose(en2, factor * en, rel_tol=1e-12, abs_tol=1e-12)
    double = simulate_cost(trace + trace, cm)
    assert math.isclose(double[0], 2 * lat, rel_tol=1e-12, abs_tol=1e-12)


def test_cost_profile_round_trip(tmp_path):
    cm = CostModel.default()
    cm.save(tmp_path / "c.json")
    assert CostModel.from_file(tmp_path / "c.json").entries == cm.entries
    (tmp_path / "p.json").write_text(json.dumps({"decode": {"latency": 3, "energy": 2}}))
    assert CostModel.from_file(tmp_path / "p.json").entries["decode"] == (3.0, 2.0)


def test_exit_on_first_frame_stops_all_work():
    rec = run_stream(tiny_model(exit_bias=0.0), stream(10))
    assert rec.exit_frame == 1 and rec.frames_decoded == 1 and rec.confidence == 0.5
    assert {e["frame"] for e in rec.trace} == {0}
    assert all(v <= 1 for v in rec.activations.values())


def test_gate_firing_at_frame_seven(monkeypatch):
    real = runtime.gate_exit

    def fire_at_seven(state, head, threshold=0.5):
        _, conf = real(state, head, threshold)
        return int(state.t == 7), conf

    monkeypatch.setattr(runtime, "gate_exit", fire_at_seven)
    rec = run_stream(tiny_model(gate_bias={"image": 5.0, "motion": 5.0, "residual": 5.0}), stream(12))
    assert rec.exit_frame == 7 and rec.frames_decoded == 7
    decodes = [e for e in rec.trace if e["component"] == "decode"]
    assert len(decodes) == 7 and max(e["frame"] for e in rec.trace) == 6


def test_never_exiting_runs_to_the_end():
    rec = run_stream(tiny_model(exit_bias=-50.0), stream(9))
    assert rec.exit_frame == 9 and rec.frames_decoded == 9 and len(rec.frame_predictions) == 9


def test_all_inactive_frames_skip_fusion():
    model = tiny_model(exit_bias=0.0, gate_bias={"image": -50.0, "motion": -50.0, "residual": -50.0})
    rec = run_stream(model, stream(5))
    names = {e["component"] for e in rec.trace}
    assert "fusion" not in names and "gating" not in names
    assert rec.exit_frame == 5 and sum(rec.activations.values()) == 0


def test_latency_matches_replay_and_trace_file(tmp_path):
    cm = CostModel({c: (0.1 * (i + 1), 1.0 / (i + 1)) for i, c in enumerate(COMPONENTS)})
    rec = run_stream(tiny_model(exit_bias=-50.0), stream(6), cm)
    write_trace(tmp_path / "t.jsonl", rec.trace)
    replay = read_trace(tmp_path / "t.jsonl")
    brute = sum(cm.entries[e["component"]][0] for e in replay)
    assert abs(rec.latency - brute) < 1e-9
    assert abs(rec.energy - sum(cm.entries[e["component"]][1] for e in replay)) < 1e-9


def test_online_is_cheaper_than_offline_when_exiting_early():
    s = stream(10)
    online = run_stream(tiny_model(exit_bias=0.0), s)
    offline = run_stream(tiny_model(exit_bias=0.0), s, policy="offline")
    assert online.exit_frame < 10 and offline.exit_frame == 10
    assert online.latency < offline.latency
    assert all(v == 10 for v in offline.activations.values())
    with pytest.raises(ConfigError):
        run_stream(tiny_model(), s, policy="lazy")


def test_run_stream_is_bit_reproducible():
    s = stream(8, seed=3)
    a = run_stream(tiny_model(seed=4), s)
    b = run_stream(tiny_model(seed=4), s)
    assert a.to_dict(with_trace=True) == b.to_dict(with_trace=True)


def test_branch_order_does_not_change_the_record():
    s = stream(8, seed=5)
    model = tiny_model(seed=2)
    ref = run_stream(model, s)
    model.branches = dict(reversed(list(model.branches.items())))
    other = run_stream(model, s)
    strip = lambda r: {k: v for k, v in r.to_dict().items()}
    assert strip(ref) == strip(other)


def test_class_mismatch_is_a_config_error():
    with pytest.raises(ConfigError):
        run_stream(tiny_model(), stream(3, class_id=9))


def test_correctness_vector_rule():
    rec = runtime.ExitRecord(3, 2, 0.9, 3, {}, 0.0, 0.0, 6, frame_predictions=[None, 1, 2])
    assert correctness_vector(rec, 2).tolist() == [0, 0, 1, 1, 1, 1]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    synthesize_dataset(DatasetSpec(num_classes=4, clips_per_class=50, frames_per_clip=12, seed=5), root)
    return root


def test_evaluate_dataset_recount_and_constant_guess(dataset):
    report = evaluate_dataset(tiny_model(exit_bias=0.0), dataset)
    assert report.num_clips == 200 and report.mean_exit_frame == 1.0
    # an untrained model predicts one class everywhere
    assert abs(report.top1 - 0.25) <= 0.05
    for m, ratio in report.activation_ratio.items():
        recount = np.mean([c["activations"][m] / c["exit_frame"] for c in report.clips])
        assert ratio == pytest.approx(recount) and 0 <= ratio <= 1


def test_evaluate_dataset_records_bad_clips(dataset, tmp_path):
    import shutil
    root = tmp_path / "copy"
    shutil.copytree(dataset, root)
    manifest = json.loads((root / "manifest.json").read_text())
    victim = root / manifest["clips"][0]["path"]
    victim.write_bytes(victim.read_bytes()[:200])
    paths = [e["path"] for e in manifest["clips"][:4]]
    report = evaluate_dataset(tiny_model(exit_bias=0.0), root, paths=paths)
    assert report.num_clips == 3 and len(report.errors) == 1
    assert report.per_class_csv().splitlines()[0].startswith("class,clips")


def test_parallel_eval_matches_serial(dataset):
    model = tiny_model(exit_bias=0.0)
    paths = [e["path"] for e in json.loads((dataset / "manifest.json").read_text())["clips"][::25]]
    a = evaluate_dataset(model, dataset, paths=paths)
    b = evaluate_dataset(model, dataset, paths=paths, jobs=3)
    assert a.to_json() == b.to_json()
