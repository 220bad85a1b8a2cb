import hashlib
import json

import numpy as np
import pytest
import yaml

from tsclab import __version__
from tsclab.cli import _seeds, main
from tsclab.harness import experiments as ex
from tsclab.harness.config import ConfigError, ExperimentConfig, config_from_dict, load_config
from tsclab.harness.env import TrafficEnv
from tsclab.harness.metrics import avg_travel_time, intersection_travel_times, travel_time_std
from tsclab.napo.trainer import TrainConfig
from tsclab.nn.checkpoint import CheckpointError, load_checkpoint
from tsclab.sim import SimState, advance_decision_interval, build_grid, synthetic_flow
from tsclab.sim.cityflow import write_flow, write_roadnet
from tsclab.sim.engine import TripRecord
from tsclab.sim.flow import FlowEntry


def trip(t0, t1):
    return TripRecord("v", t0, t1, 600.0, t1 < 3600)


def test_average_travel_time_examples():
    assert avg_travel_time([trip(0, 100), trip(50, 250)]) == 150.0
    assert avg_travel_time([trip(600, 3600)]) == 3000.0
    same = [trip(t, t + 80) for t in range(0, 500, 50)]
    assert avg_travel_time(same) == 80.0 and travel_time_std(same) == 0.0
    with pytest.raises(ValueError):
        avg_travel_time([])


def test_stuck_vehicle_capped_at_horizon():
    net = build_grid(1, 1)
    it = net.intersections[0]
    route = (it.in_links[0], it.out_links[1])
    from tsclab.sim.flow import ScheduledVehicle
    from tsclab.sim.idm import IdmParams
    sim = SimState(net, [ScheduledVehicle("v", 600.0, route, IdmParams())])
    while sim.clock < 1200:
        advance_decision_interval(sim, [1])  # crossing approach never gets green
    (rec,) = sim.trip_records(1200.0)
    assert rec.t_start == 600.0 and rec.t_end == 1200.0 and not rec.arrived


def test_intersection_dwell_stats():
    rows = intersection_travel_times([(0, 10.0), (0, 30.0), (2, 5.0)], 3)
    assert rows[0]["mean"] == 20.0 and rows[0]["std"] == 10.0 and rows[0]["count"] == 2
    assert rows[1]["count"] == 0 and np.isnan(rows[1]["mean"])


def tiny(**kw):
    base = dict(network={"grid": [1, 1]}, flow={"synthetic": 500.0}, seeds=[0, 1],
                horizon=300.0, train=TrainConfig(hidden=16, heads=2, epochs=2, batch_size=24,
                                                 episodes=2))
    base.update(kw)
    return ExperimentConfig(**base)


def test_eval_empty_flow():
    res = ex.run_eval(tiny(flow={"synthetic": 0.0}, controller="fixed"))
    assert res["empty"] and res["n_vehicles"] == 0
    assert res["summary"]["travel_time"]["n"] == 0


def test_eval_is_reproducible_and_self_describing():
    cfg = tiny(controller="maxpressure")
    a, b = ex.run_eval(cfg), ex.run_eval(cfg)
    assert json.dumps(a, sort_keys=True, default=str) == json.dumps(b, sort_keys=True, default=str)
    assert a["version"] == __version__ and a["seeds"] == [0, 1]
    assert a["config"]["controller"] == "maxpressure"
    assert len(a["intersections"]) == 1


def test_eval_seed_streams_are_isolated():
    cfg = tiny(controller="random")
    one = ex.run_eval(cfg, seeds=[1])["episodes"][0]
    two = ex.run_eval(cfg, seeds=[0, 1])["episodes"][1]
    assert one == two


def test_vehicle_ledger():
    res = ex.run_eval(tiny(controller="fixed", flow={"synthetic": 1500.0}), seeds=[0])
    ep = res["episodes"][0]
    env = ex.make_env(tiny())
    sched = ex.demand(tiny(flow={"synthetic": 1500.0}), env.net, 0, ex.EVAL_DEMAND)
    assert ep["n_vehicles"] + ep["deferred"] == len(sched)


def test_max_pressure_beats_fixed_time_when_congested():
    cfg = ExperimentConfig(flow={"synthetic": 400.0}, seeds=[0, 1])
    mp = ex.run_eval(cfg, controller="maxpressure")["summary"]["travel_time"]["mean"]
    ft = ex.run_eval(cfg, controller="fixed")["summary"]["travel_time"]["mean"]
    assert mp < ft


def test_napo_eval_needs_checkpoint(tmp_path):
    with pytest.raises(CheckpointError):
        ex.run_eval(tiny(), tmp_path / "missing.npz", "napo")


def _digest(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def test_training_resume_is_bit_identical(tmp_path):
    cfg = tiny(train=TrainConfig(hidden=16, heads=2, epochs=2, batch_size=24, episodes=4,
                                 checkpoint_every=2))
    full = ex.run_train(cfg, tmp_path / "full")
    ex.run_train(cfg, tmp_path / "part", resume=tmp_path / "full" / "checkpoint_ep00002.npz")
    assert (tmp_path / "full" / "curves.jsonl").read_text() == \
        (tmp_path / "part" / "curves.jsonl").read_text()
    a, _ = load_checkpoint(tmp_path / "full" / "final.npz")
    b, _ = load_checkpoint(tmp_path / "part" / "final.npz")
    assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
    rows = ex.read_curves(tmp_path / "full" / "curves.jsonl")
    assert len(rows) == 4 == full.episode
    for key in ("mean_queue", "mean_speed", "travel_time", "queue_std", "entropy"):
        assert all(key in r for r in rows)


def test_eval_does_not_touch_checkpoint(tmp_path):
    cfg = tiny(train=TrainConfig(hidden=16, heads=2, epochs=1, batch_size=24, episodes=1))
    ex.run_train(cfg, tmp_path)
    ck = tmp_path / "final.npz"
    before = _digest(ck)
    ex.run_eval(cfg, ck, "napo", seeds=[5, 6])
    assert _digest(ck) == before


def test_eval_summary_ignores_checkpoint_location(tmp_path):
    cfg = tiny(train=TrainConfig(hidden=16, heads=2, epochs=1, batch_size=24, episodes=1))
    ex.run_train(cfg, tmp_path / "a")
    (tmp_path / "b").mkdir()
    (tmp_path / "b" / "final.npz").write_bytes((tmp_path / "a" / "final.npz").read_bytes())
    a = ex.run_eval(cfg, tmp_path / "a" / "final.npz", "napo", seeds=[0])
    b = ex.run_eval(cfg, tmp_path / "b" / "final.npz", "napo", seeds=[0])
    assert a == b
    assert a["checkpoint"] == {"file": "final.npz", "sha256": _digest(tmp_path / "a" / "final.npz")}


def test_noise_sweep(tmp_path):
    cfg = tiny(train=TrainConfig(hidden=16, heads=2, epochs=1, batch_size=24, episodes=1))
    ex.run_train(cfg, tmp_path)
    res = ex.run_noise_sweep(cfg, tmp_path / "final.npz", [10.0], seeds=[0])
    assert [r["sigma"] for r in res["rows"]] == [0.0, 10.0]
    assert res["rows"][0]["degradation_pct"] == 0.0
    with pytest.raises(ValueError):
        ex.run_noise_sweep(tiny(state="VC"), tmp_path / "final.npz")
    with pytest.raises(ValueError):
        TrafficEnv(build_grid(1, 1), ex.StateConfig(kind="EP"), noise_sigma=5.0)


def test_config_validation(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig(decision_interval=7.0)
    with pytest.raises(ConfigError):
        config_from_dict({"controler": "fixed"})
    with pytest.raises(ConfigError):
        config_from_dict({"train": {"lr": 1.0}})
    with pytest.raises(ConfigError):
        ExperimentConfig(network={"grid": [2, 2], "roadnet": "x"})
    path = tmp_path / "exp.yaml"
    path.write_text(yaml.safe_dump({"controller": "fixed", "seeds": [3, 4],
                                    "train": {"episodes": 7}}))
    cfg = load_config(path)
    assert cfg.controller == "fixed" and cfg.seeds == [3, 4] and cfg.train.episodes == 7


def test_worker_env_var(monkeypatch):
    monkeypatch.setenv("TSCLAB_WORKERS", "many")
    with pytest.raises(ValueError):
        ex.workers()
    monkeypatch.setenv("TSCLAB_WORKERS", "0")
    assert ex.workers() == 1


def test_parallel_eval_matches_serial(monkeypatch):
    cfg = tiny(controller="maxpressure")
    serial = ex.run_eval(cfg)
    monkeypatch.setenv("TSCLAB_WORKERS", "2")
    assert ex.run_eval(cfg)["episodes"] == serial["episodes"]


def test_seed_list_parsing():
    assert _seeds("0-2,5") == [0, 1, 2, 5]
    assert _seeds("7") == [7]


def test_cli_baseline_and_eval(tmp_path, capsys):
    cfg = tmp_path / "exp.yaml"
    cfg.write_text(yaml.safe_dump({"network": {"grid": [1, 1]}, "horizon": 200.0,
                                   "flow": {"synthetic": 300.0}}))
    out = tmp_path / "out"
    assert main(["baseline", "-c", str(cfg), "-s", "0,1", "-o", str(out),
                 "--controllers", "fixed,maxpressure"]) == 0
    assert (out / "baselines.txt").exists() and (out / "baseline_fixed.json").exists()
    assert "maxpressure" in capsys.readouterr().out
    assert main(["eval", "-c", str(cfg), "-o", str(out), "--checkpoint",
                 str(tmp_path / "none.npz")]) == 2


def test_cli_train_then_noise_sweep(tmp_path):
    cfg = tmp_path / "exp.yaml"
    cfg.write_text(yaml.safe_dump({"network": {"grid": [1, 1]}, "horizon": 100.0,
                                   "train": {"hidden": 8, "heads": 2, "epochs": 1,
                                             "episodes": 1}}))
    assert main(["train", "-c", str(cfg), "-o", str(tmp_path / "run")]) == 0
    assert main(["noise-sweep", "-c", str(cfg), "-s", "0", "-o", str(tmp_path / "ns"),
                 "--checkpoint", str(tmp_path / "run" / "final.npz"), "--sigmas", "30"]) == 0
    rows = json.loads((tmp_path / "ns" / "noise_sweep.json").read_text())["rows"]
    assert [r["sigma"] for r in rows] == [0.0, 30.0]


def test_cli_ingest_check(tmp_path, capsys):
    net = build_grid(2, 2)
    (tmp_path / "roadnet.json").write_text(json.dumps(write_roadnet(net)))
    route = (net.links[net.intersections[0].in_links[0]].id,
             net.links[net.intersections[0].out_links[1]].id)
    (tmp_path / "flow.json").write_text(json.dumps(write_flow([FlowEntry(route, 0, 99, 10)])))
    assert main(["ingest-check", "--roadnet", str(tmp_path / "roadnet.json"),
                 "--flow", str(tmp_path / "flow.json")]) == 0
    out = capsys.readouterr().out
    assert "4 intersections" in out and "10 vehicles" in out


def test_flow_file_demand_is_fixed(tmp_path):
    net = build_grid(1, 1)
    route = (net.links[net.intersections[0].in_links[2]].id,
             net.links[net.intersections[0].out_links[3]].id)
    (tmp_path / "roadnet.json").write_text(json.dumps(write_roadnet(net)))
    (tmp_path / "flow.json").write_text(json.dumps(write_flow([FlowEntry(route, 0, 50, 5)])))
    cfg = tiny(network={"roadnet": str(tmp_path / "roadnet.json")},
               flow={"flow": str(tmp_path / "flow.json")}, controller="fixed")
    res = ex.run_eval(cfg)
    assert [e["n_vehicles"] for e in res["episodes"]] == [11, 11]


def test_final_queue_window():
    assert ex.final_queue([[5.0] * 90 + [1.0] * 10, [3.0] * 100]) == 2.0
    assert ex.final_queue([2.0, 4.0]) == 3.0
