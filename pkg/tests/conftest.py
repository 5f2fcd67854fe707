"""Shared fixtures: small synthetic slides reused across test modules."""

from __future__ import annotations

import pytest

from restain.synth import SynthSpec, generate


@pytest.fixture(scope="session")
def small_synth():
    """2x2 grid, no shift, no noise; the cheapest full-featured slide pair."""
    return generate(SynthSpec(grid=(2, 2), seed=11))


@pytest.fixture(scope="session")
def shifted_synth():
    """2x2 grid with a global CK displacement of (16, -8)."""
    return generate(SynthSpec(grid=(2, 2), seed=11, global_shift=(16, -8)))

