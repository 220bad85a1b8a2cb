"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 7-10 train policies on a 2x2 grid and take hours on one CPU; they
share the trained runs through module-scoped fixtures.
"""

import hashlib
import os
import time
from pathlib import Path

import numpy as np
import pytest

from oracles import (brute_force_advanced_mp, brute_force_max_pressure, central_difference,
                     gae_direct_sum, max_relative_error, random_measurement)
from test_nn import OPS, grad_check
from tsclab.controllers import advanced_mp_decide, max_pressure_decide
from tsclab.encoding import QDSE_FIELDS, compute_qdse
from tsclab.harness import experiments as ex
from tsclab.harness.config import ExperimentConfig
from tsclab.harness.env import TrafficEnv
from tsclab.napo import losses as L
from tsclab.napo.networks import Actor, Critic
from tsclab.napo.trainer import TrainConfig
from tsclab.nn import autodiff as ad
from tsclab.nn.checkpoint import load_checkpoint
from tsclab.sim import SimState, advance_decision_interval, build_grid, synthetic_flow
from tsclab.sim.cityflow import ingest_flow, ingest_roadnet
from tsclab.sim.engine import LaneMeasurement

# Desk-scale training setup shared by criteria 7-10.
DEMAND = 400.0  # veh/h per boundary entry link
LEARN_EPISODES = 300
ABLATION_EPISODES = 100
ABLATION_SEEDS = (0, 1, 2)
DETERMINISM_EPISODES = 50
EVAL_SEEDS = list(range(10))


def report(capsys, criterion, ok, detail):
    with capsys.disabled():
        print(f"\n[criterion {criterion:>2}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


def desk_config(**kw):
    return ExperimentConfig(network={"grid": [2, 2]}, flow={"synthetic": DEMAND},
                            seeds=EVAL_SEEDS, **kw)


# -- 1 --------------------------------------------------------------------------------------


def test_c01_queue_ledger_identity(capsys):
    t0 = time.perf_counter()
    net = build_grid(2, 2)
    sim = SimState(net, synthetic_flow(net, 500.0, 5000.0, np.random.default_rng(11)))
    rng = np.random.default_rng(12)
    q_prev = sim.queue_lengths()
    violations = checks = 0
    for _ in range(1000):
        advance_decision_interval(sim, rng.integers(0, 8, size=net.num_intersections))
        q_now = sim.queue_lengths()
        for lane in range(net.num_lanes):
            checks += 1
            if q_now[lane] != q_prev[lane] + sim.queue_joined[lane] - sim.queue_left[lane]:
                violations += 1
        q_prev = q_now
    elapsed = time.perf_counter() - t0
    report(capsys, 1, violations == 0 and elapsed < 60,
           f"{violations} violations in {checks} lane-interval checks, {elapsed:.1f} s")

# -- 2 --------------------------------------------------------------------------------------


def test_c02_qdse_scripted_lane(capsys):
    # three vehicles stopped at the stop line; the foremost mover 15 m behind the
    # queue tail with two more inside the follow window; three further upstream
    stopped = [300.0, 292.5, 285.0]
    movers = [265.0, 250.0, 230.0, 170.0, 120.0, 60.0]
    xs = stopped + movers
    lane = LaneMeasurement(0, 300.0, tuple(xs), tuple([0.0] * 3 + [8.0] * 6),
                           tuple(x - 5.0 for x in xs), entered=1, departed=0)
    q = compute_qdse([lane])
    got = dict(zip(QDSE_FIELDS, q.values[:, 0]))
    tup = tuple(float(got[k]) for k in ("Q", "N_in", "N_out", "N_fr", "N_r", "D_fr"))
    report(capsys, 2, tup == (3, 1, 0, 3, 6, 15), f"(Q, N_in, N_out, N_fr, N_r, D_fr) = {tup}")

# -- 3 --------------------------------------------------------------------------------------


def _end_to_end_errors():
    rng = np.random.default_rng(0)
    token_dim, T, B = 10, 3, 2
    actor = Actor(token_dim, 8, 2, np.random.default_rng(1))
    critic = Critic(token_dim, 8, 2, np.random.default_rng(2))
    tokens = rng.normal(size=(T, B, 5, token_dim))
    mask = np.ones((T, B, 4))
    mask[:, 1, 1] = 0
    acts = rng.integers(0, 8, (T, B))
    nacts = rng.integers(0, 8, (T, B, 4))
    old = rng.dirichlet(np.ones(8), size=(T, B))
    adv = rng.normal(size=(T, B))
    targets = rng.normal(size=(T, B))
    q_next = rng.uniform(0, 1, size=(T, B, 24))
    h0 = rng.normal(size=(B, 8)) * 0.1

    def actor_loss():
        out = actor.forward_sequence(tokens, mask, h0)
        return (L.ppo_policy_loss(out.log_policy, old, acts, adv, 0.2)
                + 0.01 * L.entropy_loss(out.policy, out.log_policy)
                + 0.005 * L.prediction_loss(out.prediction, q_next))

    def critic_loss():
        out = critic.forward_sequence(tokens, mask, nacts, h0)
        return 0.5 * L.value_loss(out.value, targets) + 0.005 * L.prediction_loss(out.prediction,
                                                                                  q_next)

    errors = {}
    for name, net, fn in (("actor", actor, actor_loss), ("critic", critic, critic_loss)):
        net.zero_grad()
        fn().backward()
        worst = 0.0
        for pname, p in net.named_parameters():
            analytic = np.zeros(p.shape) if p.grad is None else p.grad.copy()

            def value():
                with ad.no_grad():
                    return fn().item()

            numeric = central_difference(value, p.data, 1e-5)
            worst = max(worst, max_relative_error(analytic, numeric))
        errors[name] = worst
    return errors


def test_c03_gradient_suite(capsys):
    t0 = time.perf_counter()
    per_op = {name: grad_check(fn, *arrays) for name, (fn, arrays) in OPS.items()}
    worst_op = max(per_op, key=per_op.get)
    e2e = _end_to_end_errors()
    elapsed = time.perf_counter() - t0
    ok = per_op[worst_op] < 1e-6 and max(e2e.values()) < 1e-4 and elapsed < 300
    report(capsys, 3, ok,
           f"{len(per_op)} ops, worst {worst_op} rel err {per_op[worst_op]:.2e}; end-to-end actor "
           f"{e2e['actor']:.2e}, critic {e2e['critic']:.2e}; {elapsed:.1f} s")

# -- 4 --------------------------------------------------------------------------------------


def test_c04_gae_oracle(capsys):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(500):
        T = int(rng.integers(1, 60))
        r, v = rng.normal(size=T) * rng.uniform(0.1, 10), rng.normal(size=T + 1)
        gamma, lam = rng.uniform(0, 1), rng.uniform(0, 1)
        worst = max(worst, float(np.max(np.abs(L.compute_gae(r, v, gamma, lam)
                                               - gae_direct_sum(r, v, gamma, lam)))))
    report(capsys, 4, worst <= 1e-12, f"500 instances, max abs deviation {worst:.2e}")

# -- 5 --------------------------------------------------------------------------------------


def test_c05_pressure_oracles(capsys):
    net = build_grid(2, 2)
    rng = np.random.default_rng(5)
    agree_mp = agree_amp = 0
    for k in range(1000):
        m = random_measurement(net, k % 4, rng, max_vehicles=int(rng.integers(0, 15)))
        rng_m = float(rng.uniform(0, 300))
        agree_mp += max_pressure_decide([m], net).phases[0] == brute_force_max_pressure(m, net)
        agree_amp += (advanced_mp_decide([m], net, rng_m).phases[0]
                      == brute_force_advanced_mp(m, net, rng_m))
    report(capsys, 5, agree_mp == agree_amp == 1000,
           f"MaxPressure {agree_mp}/1000, Advanced-MP {agree_amp}/1000 agree with exhaustive scoring")

# -- 6 --------------------------------------------------------------------------------------


def test_c06_mask_soundness(capsys):
    net = build_grid(3, 3)
    env = TrafficEnv(net)
    sched = synthetic_flow(net, 600.0, 600.0, np.random.default_rng(6))
    env.reset(sched)
    for _ in range(30):
        env.step(np.random.default_rng(7).integers(0, 8, 9))
    tokens, mask = env.observe()
    rng = np.random.default_rng(8)
    agents = [0, 2, 6, 8, 1, 3, 5, 7]  # corners then edges
    actor = Actor(env.token_dim, 32, 4, np.random.default_rng(9))
    critic = Critic(env.token_dim, 32, 4, np.random.default_rng(10))
    actions = env.neighbor_actions(rng.integers(0, 8, 9))
    h = rng.normal(size=(9, 32)) * 0.1

    def run(tok, acts):
        outs, grads = [], []
        for net_, fwd in ((actor, lambda: actor(tok[agents], mask[agents], h[agents])),
                          (critic, lambda: critic(tok[agents], mask[agents], acts[agents],
                                                  h[agents]))):
            net_.zero_grad()
            out = fwd()
            main = out.policy if hasattr(out, "policy") else out.value
            (ad.tsum(main * main) + ad.tsum(out.prediction * out.prediction)).backward()
            outs += [main.data.copy(), out.prediction.data.copy(), out.hidden.data.copy()]
            grads += [np.zeros(p.shape) if p.grad is None else p.grad.copy()
                      for p in net_.parameters()]
        return outs, grads

    base_out, base_grad = run(tokens, actions)
    bad = 0
    for trial in range(20):
        tok = tokens.copy()
        acts = actions.copy()
        absent = mask == 0
        for i in agents:
            for d in np.nonzero(absent[i])[0]:
                tok[i, 1 + d] = rng.normal(size=tok.shape[-1]) * 10 ** rng.uniform(-3, 3)
                acts[i, d] = rng.integers(0, 8)
        outs, grads = run(tok, acts)
        bad += sum(not np.array_equal(a, b) for a, b in zip(outs, base_out))
        bad += sum(not np.array_equal(a, b) for a, b in zip(grads, base_grad))
    n_absent = int((mask[agents] == 0).sum())
    report(capsys, 6, bad == 0 and n_absent == 12,
           f"{n_absent} absent neighbour slots over 4 corner + 4 edge agents, 20 perturbations: "
           f"{bad} differing outputs/gradients")

# -- 7 --------------------------------------------------------------------------------------


def _digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _train_and_eval(cfg, out):
    ex.run_train(cfg, out)
    summary = ex.run_eval(cfg, out / "final.npz", "napo")
    ex.write_json(out / "eval.json", summary)
    return out / "curves.jsonl", out / "final.npz", out / "eval.json"


@pytest.mark.slow
def test_c07_determinism(capsys, tmp_path):
    t0 = time.perf_counter()
    cfg = desk_config(train=TrainConfig(episodes=DETERMINISM_EPISODES, seed=7))
    a = _train_and_eval(cfg, tmp_path / "a")
    b = _train_and_eval(cfg, tmp_path / "b")
    same = [_digest(x) == _digest(y) for x, y in zip(a, b)]
    elapsed = time.perf_counter() - t0
    report(capsys, 7, all(same) and elapsed < 1800,
           f"curves/checkpoint/eval identical = {same} after {DETERMINISM_EPISODES} training + "
           f"10 eval episodes, run twice in {elapsed / 60:.1f} min")

# -- 8, 9, 10 ----------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def learned(tmp_path_factory):
    """QDSE policy, seed 0, trained for LEARN_EPISODES episodes."""
    out = tmp_path_factory.mktemp("learn")
    cfg = desk_config(train=TrainConfig(episodes=LEARN_EPISODES, seed=0))
    t0 = time.perf_counter()
    trainer = ex.run_train(cfg, out)
    return {"cfg": cfg, "checkpoint": out / "final.npz", "curves": trainer.history,
            "minutes": (time.perf_counter() - t0) / 60}


@pytest.mark.slow
def test_c08_learning_signal(capsys, learned):
    cfg, ck = learned["cfg"], learned["checkpoint"]
    tt = {k: ex.run_eval(cfg, ck if k == "napo" else None, k)["summary"]["travel_time"]["mean"]
          for k in ("napo", "random", "fixed")}
    gain = (tt["random"] - tt["napo"]) / tt["random"] * 100
    ok = gain >= 20.0 and tt["napo"] <= tt["fixed"]
    report(capsys, 8, ok,
           f"after {LEARN_EPISODES} episodes ({learned['minutes']:.0f} min): NAPO "
           f"{tt['napo']:.1f} s, random {tt['random']:.1f} s ({gain:.1f}% lower), FixedTime "
           f"{tt['fixed']:.1f} s, over {len(EVAL_SEEDS)} eval seeds")


@pytest.mark.slow
def test_c09_state_ablation(capsys, learned, tmp_path):
    curves = {"QDSE": [], "VC": []}
    for seed in ABLATION_SEEDS:
        for state in ("QDSE", "VC"):
            if state == "QDSE" and seed == 0:
                # the first ABLATION_EPISODES rows of the longer run are the same run
                curve = learned["curves"][:ABLATION_EPISODES]
            else:
                cfg = desk_config(state=state, train=TrainConfig(episodes=ABLATION_EPISODES,
                                                                 seed=seed))
                curve = ex.run_train(cfg, tmp_path / f"{state}_{seed}").history
            curves[state].append([r["mean_queue"] for r in curve])
    # level reached at the matched episode count, smoothed over the last episodes
    reached = {k: [ex.final_queue(c) for c in v] for k, v in curves.items()}
    q, v = float(np.mean(reached["QDSE"])), float(np.mean(reached["VC"]))
    whole = {k: float(np.mean(c)) for k, c in curves.items()}
    report(capsys, 9, q <= v,
           f"mean queue over episodes {ABLATION_EPISODES - ex.FINAL_WINDOW + 1}-"
           f"{ABLATION_EPISODES}, {len(ABLATION_SEEDS)} seeds: QDSE {q:.3f} vs VC {v:.3f} "
           f"(per seed QDSE {np.round(reached['QDSE'], 3).tolist()}, "
           f"VC {np.round(reached['VC'], 3).tolist()}); whole-run mean QDSE "
           f"{whole['QDSE']:.3f} vs VC {whole['VC']:.3f}")


@pytest.mark.slow
def test_c10_noise_robustness(capsys, learned):
    t0 = time.perf_counter()
    res = ex.run_noise_sweep(learned["cfg"], learned["checkpoint"], [30.0])
    row = {r["sigma"]: r for r in res["rows"]}
    deg = row[30.0]["degradation_pct"]
    elapsed = time.perf_counter() - t0
    report(capsys, 10, deg < 10.0 and elapsed < 1800,
           f"travel time {row[0.0]['travel_time']:.1f} s clean vs {row[30.0]['travel_time']:.1f} s "
           f"at sigma=30 m: degradation {deg:.2f}% ({elapsed / 60:.1f} min)")

# -- 11 --------------------------------------------------------------------------------------

DATASETS = {
    "Jinan": ("Jinan/3_4/roadnet_3_4.json", 12, {
        "anon_3_4_jinan_real.json": 6295,
        "anon_3_4_jinan_real_2000.json": 4365,
        "anon_3_4_jinan_real_2500.json": 5494}),
    "Hangzhou": ("Hangzhou/4_4/roadnet_4_4.json", 16, {
        "anon_4_4_hangzhou_real.json": 2983,
        "anon_4_4_hangzhou_real_5816.json": 6984}),
    "NewYork": ("NewYork/28_7/roadnet_28_7.json", 196, {
        "anon_28_7_newyork_real_double.json": 10676,
        "anon_28_7_newyork_real_triple.json": 15862}),
}


def test_c11_dataset_ingestion(capsys):
    root = os.environ.get("TSCLAB_DATA")
    needed = []
    if root:
        for rel, _, flows in DATASETS.values():
            needed.append(Path(root) / rel)
            needed += [(Path(root) / rel).parent / f for f in flows]
    missing = [p for p in needed if not p.exists()]
    if not root or missing:
        with capsys.disabled():
            why = "TSCLAB_DATA not set" if not root else f"{len(missing)} files missing"
            print(f"\n[criterion 11] SKIP: public city datasets not available ({why})")
        pytest.skip("public Jinan/Hangzhou/New York files not present")
    results = []
    ok = True
    for city, (rel, n_int, flows) in DATASETS.items():
        net = ingest_roadnet(Path(root) / rel)
        ok &= net.num_intersections == n_int
        results.append(f"{city} {net.num_intersections}/{n_int}")
        for fname, expected in flows.items():
            got = sum(len(e.departures()) for e in ingest_flow((Path(root) / rel).parent / fname))
            ok &= got == expected
            results.append(f"{fname} {got}/{expected}")
    report(capsys, 11, ok, "; ".join(results))
