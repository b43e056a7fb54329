import numpy as np
import pytest

from sepadv import audio_io, harness, models

_LINES = pytest.StashKey[list]()

SOURCE_NAMES = ("vocals", "other")
TRIO_EPOCHS = 400


def pytest_configure(config):
    config.stash[_LINES] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture
def record_criterion(request):
    """Log one PASS/FAIL line per acceptance criterion and return the verdict."""
    lines = request.config.stash[_LINES]

    def record(number, name, ok, detail=""):
        line = f"criterion {number} {'PASS' if ok else 'FAIL'} {name}: {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def recipe(kinds=SOURCE_NAMES, **kw):
    kw.setdefault("duration_s", 1.0)
    return audio_io.default_recipe(kinds, **kw)


def clip_sets(seeds, kinds=SOURCE_NAMES, **kw):
    rec = recipe(kinds, **kw)
    return [audio_io.synth_source_set(rec, s) for s in seeds]


@pytest.fixture(scope="session")
def trio():
    """mask_freq source, mask_freq gray twin and conv_time black model.

    Each model is trained on its own four clips, so the three are
    independently trained.
    """
    sets = {
        "source": clip_sets(range(0, 4)),
        "gray": clip_sets(range(50, 54)),
        "black": clip_sets(range(80, 84)),
    }
    return harness.build_toy_trio(sets, epochs=TRIO_EPOCHS)


@pytest.fixture(scope="session")
def three_source_model():
    names = ("vocals", "bass", "other")
    data = clip_sets(range(20, 24), kinds=names)
    m0 = models.init_model("mask_freq", 3, 4, source_names=names, sample_rate=8000)
    model, _ = models.fit_toy(m0, data, TRIO_EPOCHS, models.DEFAULT_LR["mask_freq"], 4)
    return model


@pytest.fixture(scope="session")
def small_model():
    """Briefly trained two-source mask model for fast unit tests."""
    data = clip_sets(range(200, 202), duration_s=0.25)
    m0 = models.init_model("mask_freq", 2, 7, source_names=SOURCE_NAMES, sample_rate=8000)
    model, _ = models.fit_toy(m0, data, 30, models.DEFAULT_LR["mask_freq"], 7)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
