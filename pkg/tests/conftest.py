import numpy as np
import pytest

from cle_ekf.crn import CRN, Complement, Reaction, SpeciesValue, build_crn
from cle_ekf.harness import gene_expression_model


@pytest.fixture
def birth_death() -> CRN:
    """Production at rate 10, degradation at 0.1 x; fixed point x = 100."""
    return build_crn(["x"], [
        (Reaction(10.0, ()), {"x": 1}),
        (Reaction(0.1, (SpeciesValue(0),)), {"x": -1}),
    ])


@pytest.fixture
def gene() -> CRN:
    return gene_expression_model()


def random_crn(rng: np.random.Generator, n: int = 3, m: int = 5) -> CRN:
    """Random network mixing species-value and complement factors."""
    pairs = []
    names = [f"s{i}" for i in range(n)]
    for _ in range(m):
        factors = []
        for _ in range(rng.integers(0, 3)):
            i = int(rng.integers(n))
            if rng.random() < 0.4:
                factors.append(Complement(float(rng.uniform(20, 40)), i))
            else:
                factors.append(SpeciesValue(i))
        change = {}
        while not any(change.values()):
            change = {s: int(v) for s, v in zip(names, rng.integers(-2, 3, size=n))}
        pairs.append((Reaction(float(rng.uniform(0.01, 2.0)), tuple(factors)), change))
    return build_crn(names, pairs)


@pytest.fixture
def rng():
    return np.random.default_rng(20261016)


# -- acceptance reporting ------------------------------------------------------

_acceptance_lines: list[str] = []


@pytest.fixture
def criterion():
    """``criterion(label, ok, detail)`` records a pass/fail line, then asserts."""

    def check(label: str, ok: bool, detail: str = ""):
        _acceptance_lines.append(f"{'PASS' if ok else 'FAIL'}  {label}  {detail}".rstrip())
        assert ok, f"{label}: {detail}"

    return check


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)
