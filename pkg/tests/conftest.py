import pytest

from vesseltrack.flowgraph import GraphParams
from vesseltrack.sampling import ConeParams
from vesseltrack.synth import PhantomSpec, generate
from vesseltrack.tracker import TrackerConfig
from vesseltrack.vesselness import DEParams

FAST_DE = DEParams(population=15, generations=25, max_probes=300)


def fast_config(phantom, **kw):
    base = dict(
        initial_seed=tuple(phantom.seed),
        initial_direction=tuple(phantom.seed_direction),
        cone=ConeParams(alpha=0.8, s=1.5, L=8),
        graph=GraphParams(d_max=6.0, d_radius=4.0),
        de=FAST_DE,
        beta_dup=0.5,
    )
    base.update(kw)
    return TrackerConfig(**base)


@pytest.fixture(scope="session")
def straight_tube():
    return generate(PhantomSpec(kind="straight_tube", dims=(48, 48, 64), radius=3.0, length=50.0,
                                noise_sigma=10.0))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import REPORT
    except ImportError:
        return
    if not REPORT:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed, detail in sorted(REPORT):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number}. {name}: {detail}")
