"""Property-based checks of model invariants."""
import math

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from quanta_burst.align import PatchFlow
from quanta_burst.core_model import FrameSequence, SensorSpec, SumImage, expected_sum, mle_flux
from quanta_burst.io import read_qbs, write_qbs
from quanta_burst.merge import MergeConfig, _Tiling, warp_frame, wiener_merge
from quanta_burst.reconstruct import anscombe, inverse_anscombe

pde = st.floats(0.05, 1.0)
tau = st.floats(1e-6, 1e-3)


@given(n=st.integers(2, 10_000), frac=st.floats(0.0, 0.999), eta=pde, t=tau)
def test_mle_inverts_expected_sum(n, frac, eta, t):
    spec = SensorSpec(kind="spad", frame_exposure_s=t, pde=eta)
    s = min(int(frac * n), n - 1)
    phi = mle_flux(SumImage(np.array([s]), n), spec)[0]
    assert phi >= 0
    assert math.isclose(expected_sum(phi, spec, n), s, rel_tol=1e-7, abs_tol=1e-7)


@given(x=arrays(np.float64, st.integers(1, 50), elements=st.floats(0, 1e6)))
def test_anscombe_round_trip(x):
    assert np.allclose(inverse_anscombe(anscombe(x)), x, rtol=1e-9, atol=1e-6)


@given(h=st.integers(1, 40), w=st.integers(1, 40), tile=st.sampled_from([4, 8, 16]))
def test_tiles_partition_unity(h, w, tile):
    t = _Tiling((h, w), tile)
    assert np.allclose(t.assemble(t.tiles(np.ones((h, w)))), 1.0)


@given(u=st.floats(-3, 3), v=st.floats(-3, 3), seed=st.integers(0, 1000))
def test_warp_conserves_interior_mass(u, v, seed):
    frame = np.zeros((16, 16))
    frame[4:12, 4:12] = np.random.default_rng(seed).integers(0, 2, (8, 8))
    out = warp_frame(frame, PatchFlow(np.full((1, 1, 2), [u, v]), 16))
    assert math.isclose(out.sum(), frame.sum(), abs_tol=1e-9)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), c=st.sampled_from([1.0, 8.0, math.inf]))
def test_wiener_accepts_identical_blocks(seed, c):
    counts = np.random.default_rng(seed).binomial(50, 0.3, (20, 20)).astype(float)
    ref = SumImage(counts, 50)
    out = wiener_merge(ref, [ref] * 3, MergeConfig(noise_scale=c))
    assert np.allclose(out.counts, 4 * counts)


@settings(max_examples=25, deadline=None)
@given(frames=arrays(np.uint8, st.tuples(st.integers(1, 4), st.integers(1, 9), st.integers(1, 9)),
                     elements=st.integers(0, 1)))
def test_qbs_round_trip(tmp_path_factory, frames):
    path = tmp_path_factory.mktemp("q") / "f.qbs"
    seq = FrameSequence(SensorSpec(kind="spad", frame_exposure_s=1e-5), frames)
    write_qbs(path, seq)
    assert np.array_equal(read_qbs(path)[0].frames, frames)
