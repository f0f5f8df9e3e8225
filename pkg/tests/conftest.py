import numpy as np
import pytest

from picktrace import synth
from picktrace.ingest import CartSession, NOPICK, PICK


def make_session(session_id="5-1-24_1", n=100, rng=None, labeled=False, rate=10.0):
    """Small random session with 6-decimal-quantized floats."""
    rng = rng or np.random.default_rng(0)
    tow0 = 200_000_000
    cols = {
        name: np.round(rng.uniform(-50, 50, n), 6)
        for name in ("easting", "northing", "ax", "ay", "az")
    }
    activity = (
        rng.integers(0, 2, n).astype(np.int8)
        if labeled
        else np.full(n, -1, dtype=np.int8)
    )
    return CartSession(
        session_id=session_id,
        gps_tow=tow0 + np.arange(n, dtype=np.int64) * 100,
        raw_mass=np.round(rng.uniform(0, 6, n), 6),
        activity=activity,
        nominal_rate=rate,
        **cols,
    )


@pytest.fixture(scope="session")
def tiny_day():
    """One small cart-day without breaks; fast enough for training tests."""
    cfg = synth.SynthConfig(
        n_carts=1, day_length_s=900.0, breaks=(), prepost_s=(30.0, 60.0), seed=3
    )
    return synth.generate_day(cfg)


@pytest.fixture(scope="session")
def break_day():
    """A 3-cart day with two scheduled breaks, for break-detection tests."""
    cfg = synth.SynthConfig(
        n_carts=3,
        day_length_s=3600.0,
        breaks=((900.0, 700.0), (2300.0, 640.0)),
        seed=11,
    )
    return synth.generate_day(cfg)


@pytest.fixture(scope="session")
def small_season():
    """Three short single-cart days for cross-validation style tests."""
    cfg = synth.SynthConfig(
        n_carts=1, day_length_s=1200.0, breaks=(), prepost_s=(30.0, 60.0)
    )
    return synth.generate_season(cfg, n_days=3, seed=5)
