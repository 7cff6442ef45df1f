"""Shared fixtures: the standard end-to-end fixture runs and the acceptance ledger."""
from __future__ import annotations

import dataclasses

import pytest

from fedcorr import gmm as gmm_mod
from fedcorr import protocol
from fedcorr.config import ExperimentConfig

SEEDS = (0, 1, 2, 3, 4)
_ACCEPTANCE: list[str] = []


def standard_fixture(**overrides) -> ExperimentConfig:
    """Blobs M=5, d=20, N=20 x 200 samples, IID, MLP-64, T1=5, T2=T3=50, fraction 0.1."""
    base = ExperimentConfig(
        dataset="blobs", n_classes=5, dim=20, cluster_std=1.0, class_center_scale=10.0,
        n_clients=20, samples_per_client=200, partition="iid", model="mlp", hidden=64,
        t1=5, t2=50, t3=50, fraction=0.1,
    )
    return dataclasses.replace(base, **overrides).validate()


class FixtureRuns:
    """Lazily computed, memoised fixture runs shared across the session."""

    def __init__(self):
        self._cache = {}
        self.gmm_histories: list[list[float]] = []

    def fedcorr(self, seed, **overrides):
        key = ("fedcorr", seed, tuple(sorted(overrides.items())))
        if key not in self._cache:
            cfg = standard_fixture(seed=seed, **overrides)
            original = gmm_mod.fit_gmm2

            def recording(*args, **kwargs):
                fit = original(*args, **kwargs)
                self.gmm_histories.append(list(fit.ll_history))
                return fit

            gmm_mod.fit_gmm2 = recording
            try:
                self._cache[key] = protocol.run_fedcorr(cfg)
            finally:
                gmm_mod.fit_gmm2 = original
        return self._cache[key]

    def fedavg(self, seed, rounds, **overrides):
        key = ("fedavg", seed, rounds, tuple(sorted(overrides.items())))
        if key not in self._cache:
            cfg = standard_fixture(seed=seed, mode="fedavg", fedavg_rounds=rounds, **overrides)
            self._cache[key] = protocol.run_fedavg(cfg)
        return self._cache[key]


@pytest.fixture(scope="session")
def fixture_runs():
    return FixtureRuns()


@pytest.fixture(scope="session")
def acceptance():
    """Record one PASS/FAIL line per criterion; printed in the terminal summary."""

    def record(number: int, name: str, ok: bool, detail: str) -> bool:
        _ACCEPTANCE.append(f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {name} | {detail}")
        print(_ACCEPTANCE[-1])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
        terminalreporter.write_line(line)
