"""Shared fixtures-by-function for the test modules."""
from __future__ import annotations

import time

import numpy as np

from voltvar.alsac import Batch, CriticEnsemble, critic_targets, soft_update, update_critics

from oracles import policy_evaluation

# 3 states, 2 actions (encoded as -1 / +1); transition probabilities in tenths so
# that a dataset with ten rows per (s, a) reproduces them exactly
TOY_P = np.array([
    [[0.7, 0.3, 0.0], [0.1, 0.2, 0.7]],
    [[0.0, 0.5, 0.5], [0.6, 0.4, 0.0]],
    [[0.3, 0.3, 0.4], [0.0, 0.0, 1.0]],
])
TOY_R = np.array([[1.0, 0.0], [-0.5, 0.8], [0.2, -1.0]])
TOY_PI = np.array([1, 0, 1])  # deterministic action index per state
TOY_GAMMA = 0.9


class FixedPolicy:
    """Deterministic table policy on one-hot states, shaped like the library actor."""

    def __init__(self, actions):
        self.actions = np.asarray(actions)

    def sample(self, s, xi):
        idx = np.argmax(s, axis=1)
        a = np.where(self.actions[idx] == 1, 1.0, -1.0)[:, None]
        return a, np.zeros(len(s)), None


def toy_dataset():
    rows = []
    for s in range(3):
        for a in range(2):
            for s2 in range(3):
                rows += [(s, a, s2)] * int(round(10 * TOY_P[s, a, s2]))
    s = np.array([r[0] for r in rows])
    a = np.array([r[1] for r in rows])
    s2 = np.array([r[2] for r in rows])
    eye = np.eye(3)
    return Batch(eye[s], np.where(a == 1, 1.0, -1.0)[:, None], TOY_R[s, a], np.zeros(len(s)), eye[s2],
                 np.zeros(len(s))), s, a


def toy_oracle():
    pi = np.eye(2)[TOY_PI]
    return policy_evaluation(TOY_P, TOY_R, pi, TOY_GAMMA)


def run_bellman_toy(seed=0, max_seconds=60.0, tol=1e-2):
    """Fit twin critics by repeated target regression; returns (sup error, seconds, iterations)."""
    batch, s_idx, a_idx = toy_dataset()
    q_star = toy_oracle()
    rng = np.random.default_rng(seed)
    critics = CriticEnsemble(4, (32, 32), rng, 3e-3, use_cost=False, dtype="float64")
    policy = FixedPolicy(TOY_PI)
    xi = np.zeros((len(batch), 1))
    eye = np.eye(3)
    grid = np.array([np.concatenate([eye[s], [a]]) for s in range(3) for a in (-1.0, 1.0)])
    start = time.perf_counter()
    it = 0
    err = np.inf
    while time.perf_counter() - start < max_seconds:
        y, _ = critic_targets(batch, critics, policy, 0.0, TOY_GAMMA, xi)
        update_critics(critics, batch, y, None)
        for t, o in zip(critics.q_target, critics.q):
            soft_update(t, o, 0.9)
        it += 1
        if it % 200 == 0:
            q = np.minimum(critics.q[0](grid)[:, 0], critics.q[1](grid)[:, 0]).reshape(3, 2)
            err = float(np.max(np.abs(q - q_star)))
            if err < tol / 4:
                break
    return err, time.perf_counter() - start, it
