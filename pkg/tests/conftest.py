import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from diffsketch.backends import ToyBackend, edge_sketch  # noqa: E402
from diffsketch.cdst import fit_condition_distribution  # noqa: E402
from diffsketch.feature_store import TripletDatum  # noqa: E402

TOY_LR = 3e-3  # toy runs are short; see the acceptance notes in the README


@pytest.fixture(scope="session")
def backend():
    return ToyBackend()


@pytest.fixture(scope="session")
def small_backend():
    return ToyBackend(image_size=32)


def make_triplet(backend, seed=3, gen_seed=7):
    dist = fit_condition_distribution(backend.sample_conditions(200, 1))
    C = dist.draw(np.random.default_rng(seed))
    img, traj, pyr = backend.generate(C, gen_seed)
    return TripletDatum(traj, pyr, img, edge_sketch(img), condition=C, seed=gen_seed), dist, C


@pytest.fixture(scope="session")
def toy_triplet(backend):
    return make_triplet(backend)


@pytest.fixture(scope="session")
def small_triplet(small_backend):
    return make_triplet(small_backend)


@pytest.fixture(scope="session")
def trained_run(backend, toy_triplet):
    """The 200-iteration toy run shared by the training acceptance checks."""
    from diffsketch.trainer import TrainConfig, Trainer

    triplet, dist, C = toy_triplet
    cfg = TrainConfig(iterations=200, learning_rate=TOY_LR, cdst_S=200, seed=0)
    trainer = Trainer(backend, triplet, C, dist, [0, 4, 8], cfg)
    l1_init = trainer.l1_on_triplet()
    trainer.run(log_every=0)
    return trainer, l1_init


# -- acceptance report ---------------------------------------------------------------

_ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        _ACCEPTANCE[n] = ("PASS" if rep.passed else "FAIL", f"{title} ({detail})" if detail else title)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        status, title = _ACCEPTANCE[n]
        terminalreporter.write_line(f"[{status}] criterion {n:2d}: {title}")
