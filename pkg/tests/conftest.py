import random
from fractions import Fraction

import pytest

from artifact.jetcore import multi_indices


def random_poly(rng, n, deg, terms=4, lo=-5, hi=5):
    """dict exponent -> Fraction with a few random terms."""
    idx = multi_indices(n, deg)
    out = {}
    for _ in range(terms):
        e = rng.choice(idx)
        out[e] = out.get(e, 0) + Fraction(rng.randint(lo, hi), rng.randint(1, 4))
    return out


def random_point(rng, n):
    return tuple(Fraction(rng.randint(-6, 6), rng.randint(1, 3)) for _ in range(n))


@pytest.fixture
def rng():
    return random.Random(1234)


from hypothesis import settings

settings.register_profile("repro", derandomize=True, deadline=None)
settings.load_profile("repro")

ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
