import dataclasses

import numpy as np
import pytest

from fusedrive.config import SimConfig
from fusedrive.controller import ControlOutput
from fusedrive.sim.evaluate import (ExpertPolicy, RandomPolicy, ZeroPolicy, driving_score, evaluate,
                                    report_from_logs, run_route)

P = SimConfig().penalties


def test_driving_score_examples():
    # 80% completion with one pedestrian collision and one red light: 80 * 0.5 * 0.7 = 28
    assert driving_score(80.0, [P["collision_pedestrian"], P["red_light"]]) == pytest.approx(28.0)
    assert driving_score(70.0, [P["stop_sign"]]) == pytest.approx(56.0)
    assert driving_score(100.0, [P["collision_vehicle"], P["collision_vehicle"]]) == pytest.approx(36.0)
    assert driving_score(55.0, []) == 55.0


def test_report_from_logs():
    rep = report_from_logs([
        {"name": "a", "rc": 100.0, "infractions": []},
        {"name": "b", "rc": 70.0, "infractions": [{"kind": "stop_sign", "penalty": 0.8}]},
    ])
    assert rep.mean_rc == 85.0
    assert rep.mean_ds == pytest.approx(78.0)
    assert rep.infraction_counts() == {"stop_sign": 1}
    d = rep.to_dict()
    assert d["routes"][1]["ds"] == pytest.approx(56.0)


@pytest.mark.parametrize("rc", [-1.0, 100.5, float("nan")])
def test_report_rejects_bad_completion(rc):
    with pytest.raises(ValueError):
        report_from_logs([{"rc": rc}])


def test_run_route_is_deterministic(short_route):
    a = run_route(RandomPolicy(3), short_route, seed=7)
    b = run_route(RandomPolicy(3), short_route, seed=7)
    assert a.to_dict() == b.to_dict()


def test_evaluate_seeds_routes_independently(short_route):
    cfg = dataclasses.replace(SimConfig(), timeout_slack=5.0)
    rep = evaluate(RandomPolicy(1), [short_route, short_route], cfg, seed=0)
    assert rep.routes[0].to_dict() != rep.routes[1].to_dict()
    again = evaluate(RandomPolicy(1), [short_route, short_route], cfg, seed=0)
    assert rep.to_dict() == again.to_dict()


def test_expert_scores_full_marks(short_route):
    r = run_route(ExpertPolicy(), short_route)
    assert (r.rc, r.ds, r.reason) == (100.0, 100.0, "finished")


def test_zero_policy_is_blocked(short_route):
    cfg = dataclasses.replace(SimConfig(), blocked_time=2.0)
    r = run_route(ZeroPolicy(), short_route, cfg)
    assert r.reason == "agent_blocked" and r.rc == 0.0 and r.ds == 0.0


class Raising:
    def __init__(self, after):
        self.n = 0
        self.after = after

    def __call__(self, obs):
        self.n += 1
        if self.n > self.after:
            raise RuntimeError("boom")
        return ControlOutput(0.5, 0.0, 0.0)


def test_raising_policy_is_scored_not_propagated(short_route):
    r = run_route(Raising(40), short_route)
    assert r.reason == "policy_error"
    assert "boom" in r.error
    assert 0.0 < r.rc < 100.0


def test_nan_control_is_a_policy_error(short_route):
    r = run_route(lambda obs: ControlOutput(float("nan"), 0.0, 0.0), short_route)
    assert r.reason == "policy_error" and "SimError" in r.error


def test_report_lines():
    rep = report_from_logs([{"name": "x", "rc": 50.0, "infractions": []}])
    lines = rep.lines()
    assert lines[0].split()[:3] == ["route", "RC", "DS"]
    assert lines[-1].split()[0] == "mean"
    assert np.isclose(float(lines[-1].split()[1]), 50.0)
