import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fusedrive.config import SimConfig
from fusedrive.sim import build_shipped_routes, shipped_routes
from fusedrive.sim.expert import expert_policy, observe, target_point
from fusedrive.sim.render import MAIN_WINDOW, STOP_SIGN_VALUE, render_view, render_views
from fusedrive.sim.routes import (ActorScript, Route, StopSign, TrafficLight, generate_route, load_routes,
                                  save_routes)
from fusedrive.sim.world import Ego, SimError, World, step


def straight(length=100.0, **kw):
    n = int(length) + 1
    return Route("straight", np.stack([np.arange(n, dtype=float), np.zeros(n)], 1), np.zeros(n, int), **kw)


def drive(world, control, seconds):
    for _ in range(int(round(seconds / world.cfg.dt))):
        step(world, control)
    return world


# ---------------------------------------------------------------------------
# routes


def test_route_json_round_trip(tmp_path):
    routes = [generate_route(s) for s in (3, 11)]
    save_routes(routes, tmp_path / "r.json")
    back = load_routes(tmp_path / "r.json")
    for a, b in zip(routes, back):
        assert a.to_dict() == b.to_dict()
        np.testing.assert_array_equal(a.points, b.points)


def test_route_rejects_unknown_keys():
    d = straight().to_dict()
    d["speed_limit"] = 5
    with pytest.raises(ValueError, match="unknown"):
        Route.from_dict(d)


def test_route_rejects_degenerate_segment():
    with pytest.raises(ValueError):
        Route("bad", [[0, 0], [0, 0]], [0, 0])


def test_shipped_routes_match_their_seeds():
    built = build_shipped_routes()
    for name in ("train", "heldout"):
        shipped = shipped_routes(name)
        assert [r.to_dict() for r in shipped] == [json_round(r) for r in built[name]]
    assert len(built["train"]) == 50 and len(built["heldout"]) == 5
    assert all(r.hazard_free for r in built["heldout"])


def json_round(route):
    import json
    return json.loads(json.dumps(route.to_dict()))


def test_generation_is_deterministic():
    assert generate_route(5).to_dict() == generate_route(5).to_dict()
    assert generate_route(5).to_dict() != generate_route(6).to_dict()


def test_projection_sign_convention():
    r = straight()
    s, lat, d = r.project([10.0, 2.0])
    assert (s, lat, d) == pytest.approx((10.0, 2.0, 2.0))
    assert r.project([10.0, -1.0])[1] == pytest.approx(-1.0)


@pytest.mark.parametrize("t,state", [(0.0, "green"), (7.9, "green"), (8.0, "yellow"), (9.9, "yellow"),
                                     (10.0, "red"), (17.9, "red"), (18.0, "green")])
def test_light_cycle(t, state):
    assert TrafficLight(s=10.0).state(t) == state


# ---------------------------------------------------------------------------
# physics


def test_zero_control_stays_put():
    w = drive(World.create(straight()), (0, 0, 0), 2.0)
    assert (w.ego.x, w.ego.y, w.ego.speed) == (0.0, 0.0, 0.0)


def test_constant_speed_yaw_rate_closed_form():
    cfg = dataclasses.replace(SimConfig(), drag=0.0)
    w = World.create(straight(200.0), cfg)
    w.ego.speed = 5.0
    steer = 0.2
    n = 20
    for _ in range(n):
        step(w, (0, steer, 0))
    rate = 5.0 / cfg.wheelbase * math.tan(steer * cfg.max_steer_angle)
    assert w.ego.yaw == pytest.approx(rate * n * cfg.dt, rel=1e-12)
    assert w.ego.speed == 5.0


def test_drag_equilibrium_speed():
    cfg = SimConfig()
    w = World.create(straight(2000.0), dataclasses.replace(cfg, timeout_slack=1e4))
    drive(w, (0.1, 0, 0), 60.0)
    assert w.ego.speed == pytest.approx(math.sqrt(cfg.max_accel * 0.1 / cfg.drag), rel=1e-3)


def test_brake_never_reverses():
    w = World.create(straight())
    w.ego.speed = 1.0
    drive(w, (0, 0, 1), 1.0)
    assert w.ego.speed == 0.0


def test_controls_are_clamped():
    a = drive(World.create(straight()), (5.0, 3.0, -1.0), 1.0)
    b = drive(World.create(straight()), (1.0, 1.0, 0.0), 1.0)
    assert (a.ego.x, a.ego.y, a.ego.yaw) == (b.ego.x, b.ego.y, b.ego.yaw)


def test_non_finite_control_raises():
    with pytest.raises(SimError):
        step(World.create(straight()), (float("nan"), 0, 0))


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 10), st.floats(-math.pi, math.pi), st.floats(-50, 50), st.floats(-50, 50))
def test_frame_transforms_invert(speed, yaw, x, y):
    e = Ego(x, y, yaw, speed)
    p = np.array([[1.0, 2.0], [-3.0, 0.5]])
    np.testing.assert_allclose(e.to_world(e.to_local(p)), p, atol=1e-9)


# ---------------------------------------------------------------------------
# rules and termination


def test_finish_gives_full_completion():
    w = World.create(straight(40.0))
    w.ego.speed = 6.0
    drive(w, (0.05, 0, 0), 10.0)
    assert w.done and w.reason == "finished"
    assert w.route_completion == 100.0
    assert w.infractions == []


def test_zero_policy_gets_blocked():
    cfg = dataclasses.replace(SimConfig(), blocked_time=3.0)
    w = drive(World.create(straight(), cfg), (0, 0, 0), 5.0)
    assert w.reason == "agent_blocked"
    assert [(i.kind, i.penalty) for i in w.infractions] == [("agent_blocked", 1.0)]


def test_timeout():
    cfg = dataclasses.replace(SimConfig(), timeout_slack=1.0, blocked_time=1e4)
    w = World.create(straight(), cfg)
    drive(w, (0, 0, 0), 60.0)
    assert w.reason == "timeout"
    assert w.clock == pytest.approx(w.time_limit, abs=cfg.dt)
    assert w.infractions == []


def test_route_deviation():
    w = World.create(straight(300.0))
    w.ego.speed = 6.0
    w.ego.yaw = math.pi / 2
    drive(w, (0.2, 0, 0), 10.0)
    assert w.reason == "route_deviation"


def test_red_light_violation_logged():
    w = World.create(straight(lights=[TrafficLight(s=10.0, offset=10.0)]))  # red from t=0 to 8
    w.ego.speed = 6.0
    drive(w, (0.05, 0, 0), 3.0)
    assert [i.kind for i in w.infractions] == ["red_light"]
    assert w.infractions[0].penalty == SimConfig().penalties["red_light"]


def test_green_light_no_violation():
    w = World.create(straight(lights=[TrafficLight(s=10.0)]))
    w.ego.speed = 6.0
    drive(w, (0.05, 0, 0), 3.0)
    assert w.infractions == []


def test_stop_sign_needs_halt():
    run = World.create(straight(stop_signs=[StopSign(s=10.0)]))
    run.ego.speed = 6.0
    drive(run, (0.05, 0, 0), 3.0)
    assert [i.kind for i in run.infractions] == ["stop_sign"]

    halt = World.create(straight(stop_signs=[StopSign(s=10.0)]))
    halt.ego.x = 8.0
    halt.progress = 8.0
    drive(halt, (0, 0, 0), 1.2)
    drive(halt, (0.3, 0, 0), 3.0)
    assert halt.stop_passed == [True]
    assert halt.infractions == []


def test_collision_logged_once_per_actor():
    ped = ActorScript("pedestrian", [[6.0, 0.0]], radius=0.4)
    w = World.create(straight(actors=[ped]))
    w.ego.speed = 4.0
    drive(w, (0.3, 0, 0), 4.0)
    assert [i.kind for i in w.infractions] == ["collision_pedestrian"]
    assert w.actors[0].frozen


def test_actor_waits_for_trigger_and_pauses():
    a = ActorScript("vehicle", [[0.0, 5.0], [100.0, 5.0]], speed=2.0, trigger_s=10.0, pauses=[[4.0, 1.0]])
    w = World.create(straight(actors=[a]))
    drive(w, (0, 0, 0), 1.0)
    assert w.actors[0].s == 0.0
    w.progress = 10.0
    w.actors[0].advance(1.0, 10.0)   # reaches the pause point at 2.0 m/s * 1 s < 4 m
    w.actors[0].advance(1.5, 10.0)   # clipped to the pause point, then waits
    assert w.actors[0].s == 4.0
    w.actors[0].advance(1.0, 10.0)
    assert w.actors[0].s == 4.0
    w.actors[0].advance(0.5, 10.0)
    assert w.actors[0].s == 5.0


# ---------------------------------------------------------------------------
# rasters


def test_empty_world_raster():
    main, side = render_views(World.create(straight()))
    for img in (main, side):
        assert img.shape == (3, 64, 64)
        assert img.min() >= 0 and img.max() <= 1
        assert img[1].max() == 0 and img[2].max() == 0
    # straight road along x: the centre columns are drivable, the far left/right columns are not
    assert main[0, :, 32].min() == 1.0
    assert main[0, :, 0].max() == 0.0


def test_red_light_line_cells():
    w = World.create(straight(lights=[TrafficLight(s=10.0, offset=10.0)]))
    img = render_view(w, MAIN_WINDOW)[2]
    rows = np.nonzero(img.max(axis=1) > 0)[0]
    # ego at x=0: the line at x=10 sits on the border of rows 39 and 40 (0.5 m cells from x=30)
    assert set(rows) == {39, 40}
    # centre 0.25 m from the line, half thickness 0.3: coverage 0.5 + 0.05 / 0.5
    np.testing.assert_allclose(img[39, 32], 0.6)
    np.testing.assert_array_equal(img[39], img[40])


def test_stop_sign_value():
    # 10.25 is a row centre, so that row is fully covered
    w = World.create(straight(stop_signs=[StopSign(s=10.25)]))
    assert render_view(w, MAIN_WINDOW)[2].max() == pytest.approx(STOP_SIGN_VALUE)


def test_actor_appears_left_of_centre():
    w = World.create(straight(actors=[ActorScript("static", [[15.0, 4.0]], radius=1.0)]))
    img = render_view(w, MAIN_WINDOW)[1]
    r, c = np.unravel_index(np.argmax(img), img.shape)
    assert c < 32 and r < 32


@settings(max_examples=10, deadline=None)
@given(st.floats(-100, 100), st.floats(-100, 100), st.floats(-math.pi, math.pi))
def test_raster_invariant_under_rigid_motion(tx, ty, angle):
    base = straight(60.0, actors=[ActorScript("static", [[12.0, 3.0]], radius=1.0)],
                    lights=[TrafficLight(s=20.0, offset=10.0)])
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    moved_pts = base.points @ rot.T + [tx, ty]
    moved = Route("m", moved_pts, base.commands, lights=base.lights,
                  actors=[ActorScript("static", (np.array([[12.0, 3.0]]) @ rot.T + [tx, ty]).tolist(), radius=1.0)])
    w0 = World.create(base)
    w1 = World.create(moved)
    np.testing.assert_allclose(render_view(w0, MAIN_WINDOW), render_view(w1, MAIN_WINDOW), atol=1e-6)


# ---------------------------------------------------------------------------
# expert


def test_expert_stops_for_red_light():
    w = World.create(straight(lights=[TrafficLight(s=5.0, offset=10.0)]))
    w.ego.speed = 3.0
    lab = expert_policy(w)
    assert lab.target_speed == 0.0 and lab.hazard == "light"
    assert lab.control[2] > 0 and lab.control[0] == 0


def test_expert_waypoints_on_straight_road_are_colinear():
    w = World.create(straight())
    w.ego.speed = 6.0
    wps = expert_policy(w, n_waypoints=4).waypoints
    assert wps.shape == (4, 2)
    np.testing.assert_allclose(wps[:, 1], 0.0, atol=1e-9)
    assert np.all(np.diff(wps[:, 0]) > 0)


def test_expert_latent_bounded():
    w = World.create(generate_route(4))
    lab = expert_policy(w)
    assert lab.latent.shape == (8,)
    assert np.all(np.abs(lab.latent) <= 1)


def test_expert_drives_a_hazard_route_clean():
    from fusedrive.sim.evaluate import ExpertPolicy, run_route
    r = run_route(ExpertPolicy(), generate_route(21))
    assert r.reason == "finished" and r.ds == 100.0


def test_target_point_ahead_on_route():
    w = World.create(straight())
    p, cmd = target_point(w)
    np.testing.assert_allclose(p, [SimConfig().target_lookahead, 0.0])
    assert cmd == 0


def test_lazy_observation_matches_eager():
    w = World.create(generate_route(2))
    lazy, eager = observe(w, lazy=True), observe(w)
    np.testing.assert_array_equal(lazy.main, eager.main)
    np.testing.assert_array_equal(lazy.side, eager.side)
    assert lazy.speed == eager.speed and lazy.command == eager.command
