import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voltvar.env import (
    STEPS_PER_DAY,
    DayProfile,
    VoltVarEnv,
    generate_synthetic_profiles,
    list_profiles,
    read_profile,
    read_profiles,
    scale_action,
    write_profile,
)
from voltvar.grid import Branch, Bus, DeviceSpec, NetworkCase, bundled_case
from voltvar.powerflow import Injection, solve, total_loss, violation_metric


@pytest.fixture(scope="module")
def case33():
    return bundled_case("case33bw")


def flat_day(case, level=1.0, gen=0.0):
    n_iber = sum(d.kind == "IBER" for d in case.devices)
    return DayProfile(np.full((STEPS_PER_DAY, case.n_bus), level), np.full((STEPS_PER_DAY, n_iber), gen))


def test_scale_action_examples():
    b = np.array([[-2.0, 2.0], [0.0, 1.0]])
    assert np.allclose(scale_action(np.array([0.0, 0.0]), b), [0.0, 0.5])
    assert np.allclose(scale_action(np.array([1.0, 1.0]), b), [2.0, 1.0])
    assert np.allclose(scale_action(np.array([-1.0, -1.0]), b), [-2.0, 0.0])
    # out-of-range actions are clamped first
    assert np.allclose(scale_action(np.array([3.0, -7.0]), b), [2.0, 0.0])


def test_reset_observation_layout(case33):
    env = VoltVarEnv(case33)
    state = env.reset(flat_day(case33))
    assert state.obs.shape == (99,) and state.t == 0
    n = case33.n_bus
    p, q, v = state.obs[:n], state.obs[n:2 * n], state.obs[2 * n:]
    sol = solve(case33, Injection.from_loads(case33))
    assert np.allclose(v, sol.vm)
    # load buses report net injection; the slack reports what the substation supplies
    assert p[1] == pytest.approx(-case33.buses[1].nominal_load_p / case33.base_mva)
    assert p[0] == pytest.approx(sol.slack_power.real / case33.base_mva)
    assert q[0] == pytest.approx(sol.slack_power.imag / case33.base_mva)


def test_zero_load_reset(case33):
    env = VoltVarEnv(case33)
    state = env.reset(flat_day(case33, level=0.0))
    n = case33.n_bus
    assert np.allclose(state.obs[2 * n:], 1.0)
    assert np.allclose(state.obs[:2 * n], 0.0)


def test_profile_validation(case33):
    with pytest.raises(ValueError):
        DayProfile(np.ones((95, 33)), np.zeros((95, 3)))
    with pytest.raises(ValueError):
        DayProfile(np.ones((96, 33)), -np.ones((96, 3)))
    env = VoltVarEnv(case33)
    with pytest.raises(ValueError):
        env.reset(DayProfile(np.ones((96, 32)), np.zeros((96, 3))))
    with pytest.raises(ValueError):
        env.reset(flat_day(case33, gen=1.6))


def test_episode_runs_96_steps(case33):
    env = VoltVarEnv(case33)
    env.reset(flat_day(case33, 0.7, 0.5))
    dones = []
    for _ in range(STEPS_PER_DAY):
        out = env.step(np.zeros(4))
        dones.append(out.done)
        assert out.reward <= 0 and out.cost >= 0
    assert dones == [False] * 95 + [True]
    assert out.next_state.t == 96
    with pytest.raises(RuntimeError):
        env.step(np.zeros(4))


def test_step_matches_direct_solve(case33):
    env = VoltVarEnv(case33)
    day = generate_synthetic_profiles(3, 1, case33)[0]
    env.reset(day)
    a = np.array([0.3, -0.2, 0.9, -1.0])
    out = env.step(a)
    inj = env.injection(day, 0, scale_action(a, env.bounds))
    sol = solve(case33, inj)
    assert out.reward == -total_loss(sol)
    assert out.cost == violation_metric(sol)
    assert np.allclose(out.next_state.obs[2 * 33:], sol.vm)


def test_step_deterministic(case33):
    day = generate_synthetic_profiles(4, 1, case33)[0]
    outs = []
    for _ in range(2):
        env = VoltVarEnv(case33)
        env.reset(day)
        outs.append([env.step(np.full(4, 0.1 * k % 1)).reward for k in range(10)])
    assert outs[0] == outs[1]


def test_batch_evaluation_matches_step(case33):
    env = VoltVarEnv(case33)
    day = generate_synthetic_profiles(5, 1, case33)[0]
    qs = np.array([[0.0, 0.0, 0.0, 0.0], [1.0, -1.0, 2.0, 0.5]])
    loss, viol, div = env.evaluate_batch(day, 7, qs)
    for k, q in enumerate(qs):
        sol = solve(case33, env.injection(day, 7, q))
        assert loss[k] == pytest.approx(total_loss(sol), rel=1e-12)
        assert viol[k] == pytest.approx(violation_metric(sol), abs=1e-15)
    assert not div.any()


def test_cost_examples():
    # one bus pushed to 0.94 p.u. gives cost 0.01
    case = NetworkCase(10.0, (Bus(1), Bus(2, 1.0, 0.0)), (Branch(1, 2, 0.0, 0.3),), (DeviceSpec.svc(2, -5, 5),), 1)
    env = VoltVarEnv(case)
    day = DayProfile(np.ones((96, 2)), np.zeros((96, 0)))
    env.reset(day)
    lo, hi = env.bounds[0]
    # bisect the SVC setting that lands bus 2 exactly on 0.94
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        v = solve(case, env.injection(day, 0, np.array([mid]))).vm[1]
        lo, hi = (mid, hi) if v < 0.94 else (lo, mid)
    assert v == pytest.approx(0.94, abs=1e-12)
    a = 2 * (mid - env.bounds[0, 0]) / (env.bounds[0, 1] - env.bounds[0, 0]) - 1
    out = env.step(np.array([a]))
    assert out.cost == pytest.approx(0.01, abs=1e-9)
    # a lossless feeder pays no reward penalty
    assert out.reward == 0.0


def test_divergence_ends_episode():
    case = NetworkCase(10.0, (Bus(1), Bus(2, 500.0, 200.0)), (Branch(1, 2, 0.05, 0.05),), (DeviceSpec.svc(2, -1, 1),), 1)
    env = VoltVarEnv(case)
    day = DayProfile(np.ones((96, 2)) * 1e-3, np.zeros((96, 0)))
    day.loads[1] = 1.0
    env.reset(day)
    first = env.step(np.zeros(1))
    assert not first.done
    out = env.step(np.zeros(1))
    assert out.diverged and out.done
    assert out.reward == -10.0 and out.cost == 1.0


def test_synthetic_profiles(case33):
    a = generate_synthetic_profiles(7, 3, case33)
    b = generate_synthetic_profiles(7, 3, case33)
    for x, y in zip(a, b):
        assert np.array_equal(x.loads, y.loads) and np.array_equal(x.gen, y.gen)
    days = generate_synthetic_profiles(8, 200, case33)
    assert len(days) == 200
    loads = np.stack([d.loads for d in days])
    gen = np.stack([d.gen for d in days])
    assert loads.shape == (200, 96, 33)
    assert loads.min() >= 0.4 and loads.max() <= 1.3
    assert gen.min() >= 0 and gen.max() <= 1.5
    # night is lighter than the evening peak, and there is no sun at midnight
    mean = loads.mean(axis=(0, 2))
    assert mean[12] < mean[76]
    assert gen[:, 0].max() == 0.0


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_profile_csv_round_trip(tmp_path_factory, seed):
    case = bundled_case("case33bw")
    day = generate_synthetic_profiles(seed, 1, case)[0]
    d = tmp_path_factory.mktemp("prof")
    write_profile(day, case, d, "d001")
    back = read_profile(d, "d001", case)
    assert np.array_equal(back.loads, day.loads)
    assert np.array_equal(back.gen, day.gen)


def test_profile_csv_header(tmp_path, case33):
    day = flat_day(case33)
    write_profile(day, case33, tmp_path, "x")
    head = (tmp_path / "loads_x.csv").read_text().splitlines()[0]
    assert head == "step," + ",".join(f"bus_{i}" for i in range(1, 34))
    assert (tmp_path / "gen_x.csv").read_text().splitlines()[0] == "step,der_1,der_2,der_3"
    assert list_profiles(tmp_path) == ["x"]
    assert len(read_profiles(tmp_path, case33)) == 1
    lines = (tmp_path / "loads_x.csv").read_text().splitlines()
    (tmp_path / "loads_x.csv").write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(ValueError, match="96"):
        read_profile(tmp_path, "x", case33)


def test_env_requires_devices():
    case = bundled_case("case33bw", with_devices=False)
    with pytest.raises(ValueError):
        VoltVarEnv(case)
