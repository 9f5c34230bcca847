import json
from dataclasses import replace

import numpy as np
import pytest

from himoe.dataset import DatasetManifest, build_dataset
from himoe.embodiments import ExpertPolicy, rollout_eval
from himoe.evaluate import (HEATMAP_HEADER, ModelPolicy, RoutingStats, action_mse, evaluate,
                            evaluate_checkpoint, export_routing_heatmap, format_report, make_report,
                            parse_heatmap, parse_report, routing_stats)
from himoe.model import HiMoE
from himoe.train import Trainer

from test_train import MAN, small_cfg


@pytest.fixture(scope="module")
def trained():
    tr = Trainer(small_cfg(steps=150, decay_end_step=150, lr_init=3e-3, lr_floor=3e-4))
    init = HiMoE(tr.cfg.model, tr.cfg.context, seed=tr.cfg.seed)
    tr.run()
    return tr, init


def test_expert_wrapper_succeeds_everywhere():
    rows = {e: {"val_flow_loss": 0.0, "action_mse": 0.0,
                "success": rollout_eval(ExpertPolicy(), e, n_trials=10, seed=3)}
            for e in ["joint_a", "joint_b", "eef_a", "eef_b", "eef_c", "dual_joint"]}
    rep = make_report(rows, 10, 3)
    assert rep["mean_success"] == 1.0
    assert all(r["success"] == 1.0 for r in rep["embodiments"].values())


def test_report_round_trip_and_schema(trained):
    tr, _ = trained
    rep = evaluate(tr.model, tr.data.stats, tr.manifest, n_trials=2, seed=0, max_records=32)
    assert set(rep["embodiments"]) == set(MAN.embodiments)
    for row in rep["embodiments"].values():
        assert 0.0 <= row["success"] <= 1.0 and row["val_flow_loss"] > 0
    text = format_report(rep)
    assert parse_report(text) == rep
    assert format_report(parse_report(text)) == text
    bad = json.loads(text)
    del bad["embodiments"]["joint_a"]["success"]
    with pytest.raises(ValueError):
        parse_report(json.dumps(bad))


def test_trained_beats_untrained_action_mse(trained):
    tr, init = trained
    val = build_dataset(MAN.validation(), tr.data.stats)
    idx = np.arange(min(64, len(val)))
    assert action_mse(init, val, idx) > action_mse(tr.model, val, idx)


def test_checkpoint_mismatch_rejected(trained):
    tr, _ = trained
    ck = tr.checkpoint()
    with pytest.raises(ValueError):
        evaluate_checkpoint(ck, DatasetManifest(embodiments=["eef_b"], n_episodes=4, horizon=2), n_trials=0)
    with pytest.raises(ValueError):
        evaluate(tr.model, tr.data.stats, DatasetManifest(n_episodes=4, horizon=3), n_trials=0)


def test_model_policy_requires_stats(trained):
    tr, _ = trained
    with pytest.raises(ValueError):
        rollout_eval(ModelPolicy(tr.model, tr.data.stats), "eef_b", n_trials=1, seed=0)


def test_heatmap_schema_and_sums(trained, tmp_path):
    tr, _ = trained
    p = tmp_path / "h.csv"
    stats = export_routing_heatmap(tr.checkpoint(), path=p)
    rows = parse_heatmap(p.read_text())
    assert p.read_text().splitlines()[0] == ",".join(HEATMAP_HEADER)
    groups = {r[3] for r in rows}
    assert groups == {"emb:joint_a", "emb:eef_a", "space:Joint", "space:EEF"}
    kinds = {r[1] for r in rows}
    assert kinds == {"ASMoE", "HBMoE"}
    assert 0.0 <= stats.js_divergence("space:Joint", "space:EEF") <= 1.0


def test_heatmap_k_equals_n_is_uniform():
    cfg = small_cfg()
    cfg.model = replace(cfg.model, top_k=4)
    m = HiMoE(cfg.model, cfg.context, seed=0)
    stats = routing_stats(m, build_dataset(MAN))
    for l in stats.counts:
        for g in stats.counts[l]:
            assert (stats.frequencies(l, g) == 0.25).all()


def test_single_embodiment_single_group():
    man = DatasetManifest(embodiments=["eef_a"], n_episodes=4, horizon=2)
    cfg = small_cfg(manifest=man)
    m = HiMoE(cfg.model, cfg.context, seed=0)
    stats = routing_stats(m, build_dataset(man))
    for l in stats.counts:
        assert set(stats.counts[l]) == {"emb:eef_a", "space:EEF"}
    rows = parse_heatmap(stats.to_csv())
    assert len({(r[0], r[3]) for r in rows if r[3].startswith("emb:")}) == len(stats.counts)


def test_parse_heatmap_rejects_bad_input():
    with pytest.raises(ValueError):
        parse_heatmap("a,b,c,d,e\n")
    with pytest.raises(ValueError):
        parse_heatmap(",".join(HEATMAP_HEADER) + "\n0,ASMoE,0,g,0.5\n0,ASMoE,1,g,0.4\n")


def test_js_and_max_frequency():
    counts = {0: {"a": np.array([4, 0]), "b": np.array([0, 4]), "emb:x": np.array([3, 1])},
              1: {"a": np.array([1, 1]), "b": np.array([1, 1]), "emb:x": np.array([1, 1])}}
    rs = RoutingStats({0: "ASMoE", 1: "HBMoE"}, counts, 2)
    assert rs.js_divergence("a", "b") == pytest.approx(1.0)
    assert rs.js_divergence("a", "b", kinds=("HBMoE",)) == pytest.approx(0.0)
    assert rs.max_frequency(("HBMoE",)) == 0.5
    assert rs.max_frequency(("ASMoE",)) == 0.75
    with pytest.raises(ValueError):
        rs.js_divergence("a", "b", kinds=("MoE",))
