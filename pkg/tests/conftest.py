import numpy as np
import pytest

from glomseg.datamodel import PatchSample
from glomseg.synth import generate_phantom, random_phantom_spec
from glomseg.taxonomy import TAXONOMY


def phantom_samples(seeds, canvas=64, codes=None):
    """In-memory PatchSamples, one per (phantom, class)."""
    codes = codes or TAXONOMY.codes
    out = []
    for s in seeds:
        ph = generate_phantom(random_phantom_spec(s, canvas))
        for c in codes:
            out.append(PatchSample(ph.image, ph.masks[c], TAXONOMY.index_of(c), f"P{s}", "rodent"))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# acceptance criterion verdicts, printed once at the end of the session
VERDICTS: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        ok, title, detail = VERDICTS[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
