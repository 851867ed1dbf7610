import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from speedrecon.errors import ValidationError
from speedrecon.grid import GridSpec, SparseSpeedField, normalize
from speedrecon.patches import PatchLayout, decompose, output_origins, stitch


def _field(n_t, n_x, rng, density=0.1):
    spec = GridSpec.from_shape(n_t, n_x)
    mask = rng.random((n_t, n_x)) < density
    v = np.where(mask, rng.uniform(3, 130, size=(n_t, n_x)), np.nan)
    return SparseSpeedField.from_dense(spec, v)


def _identity_outputs(patches, layout):
    m_t, m_x = layout.margin
    return [(p.origin, p.speeds[m_t:m_t + layout.l_t, m_x:m_x + layout.l_x]) for p in patches]


@pytest.mark.parametrize("shape,count", [((32, 32), 1), ((64, 64), 4), ((70, 64), 6)])
def test_patch_counts(shape, count, rng):
    assert len(decompose(_field(*shape, rng))) == count


def test_layout_validation():
    with pytest.raises(ValidationError):
        PatchLayout(16, 64, 32, 32)
    with pytest.raises(ValidationError):
        PatchLayout(63, 64, 32, 32)
    assert PatchLayout().margin == (16, 16)


def test_patch_content_and_padding(rng):
    f = _field(70, 40, rng, density=0.3)
    layout = PatchLayout()
    speeds = np.zeros(f.spec.shape, dtype=np.float32)
    speeds[f.i, f.j] = normalize(f.v)
    for p in decompose(f, layout):
        assert p.speeds.shape == (64, 64) and p.occupancy.shape == (64, 64)
        assert np.all(p.speeds[p.occupancy == 0] == 0)
        a, b = p.origin
        for r in range(64):
            for c in range(0, 64, 7):
                gi, gj = a - 16 + r, b - 16 + c
                inside = 0 <= gi < 70 and 0 <= gj < 40
                assert p.speeds[r, c] == (speeds[gi, gj] if inside else 0.0)
                if not inside:
                    assert p.occupancy[r, c] == 0


def test_measured_cells_have_context(rng):
    f = _field(80, 50, rng, density=0.2)
    layout = PatchLayout()
    patches = decompose(f, layout)
    for i, j in zip(f.i, f.j):
        owners = [p for p in patches
                  if p.origin[0] <= i < p.origin[0] + 32 and p.origin[1] <= j < p.origin[1] + 32]
        assert len(owners) == 1
        p = owners[0]
        assert p.occupancy[i - p.origin[0] + 16, j - p.origin[1] + 16] == 1


def test_round_trip_is_dense_completion(rng):
    f = _field(50, 70, rng)
    layout = PatchLayout()
    out = stitch(_identity_outputs(decompose(f, layout), layout), f.spec, layout)
    dense = f.dense()
    occ = np.isfinite(dense)
    np.testing.assert_allclose(out.v[occ], np.clip(dense[occ], 3, 130), rtol=1e-5)
    assert np.all(out.v[~occ] == 65.0)


def test_single_patch_center(rng):
    f = _field(20, 20, rng, density=0.5)
    layout = PatchLayout()
    (p,) = decompose(f, layout)
    block = np.random.default_rng(0).uniform(-0.5, 0.5, size=(32, 32))
    out = stitch([(p.origin, block)], f.spec, layout)
    np.testing.assert_allclose(out.v, block[:20, :20] * 100 + 65)


def test_hard_edge_between_tiles():
    spec = GridSpec.from_shape(32, 64)
    out = stitch([((0, 0), np.full((32, 32), -0.3)), ((0, 32), np.full((32, 32), 0.4))], spec)
    assert np.all(out.v[:, :32] == pytest.approx(35.0))
    assert np.all(out.v[:, 32:] == pytest.approx(105.0))


def test_stitch_errors():
    spec = GridSpec.from_shape(40, 40)
    blocks = [(o, np.zeros((32, 32))) for o in output_origins(spec, PatchLayout())]
    with pytest.raises(ValidationError):
        stitch(blocks[:-1], spec)
    with pytest.raises(ValidationError):
        stitch(blocks + blocks[:1], spec)
    with pytest.raises(ValidationError):
        stitch(blocks[:-1] + [((5, 5), np.zeros((32, 32)))], spec)
    with pytest.raises(ValidationError):
        stitch(blocks[:-1] + [(blocks[-1][0], np.zeros((16, 32)))], spec)


def test_stitch_clamps():
    spec = GridSpec.from_shape(10, 10)
    out = stitch([((0, 0), np.full((32, 32), 5.0))], spec)
    assert np.all(out.v == 130.0)
    out = stitch([((0, 0), np.full((32, 32), -5.0))], spec)
    assert np.all(out.v == 3.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 130), st.integers(1, 130), st.sampled_from([(64, 32), (48, 32), (16, 8), (9, 5)]))
def test_tiling_covers_domain_once(n_t, n_x, sizes):
    k, l = sizes
    layout = PatchLayout(k, k, l, l)
    spec = GridSpec.from_shape(n_t, n_x)
    hits = np.zeros((n_t, n_x), dtype=int)
    for a, b in output_origins(spec, layout):
        hits[a:a + l, b:b + l] += 1
    assert np.all(hits == 1)


def test_shift_equivariance(rng):
    layout = PatchLayout()
    spec = GridSpec.from_shape(96, 96)
    dense = np.where(rng.random((96, 96)) < 0.2, rng.uniform(3, 130, (96, 96)), np.nan)
    big = SparseSpeedField.from_dense(spec, dense)
    shifted = np.full((96, 96), np.nan)
    shifted[32:, 32:] = dense[:64, :64]
    f2 = SparseSpeedField.from_dense(spec, shifted)
    p1 = {p.origin: p for p in decompose(big, layout)}
    p2 = {p.origin: p for p in decompose(f2, layout)}
    # interior tiles whose input windows stay inside the copied block
    for a, b in [(32, 32)]:
        np.testing.assert_array_equal(p1[(a, b)].speeds[:48, :48],
                                      p2[(a + 32, b + 32)].speeds[:48, :48])


def test_empty_domain_rejected():
    with pytest.raises(ValidationError):
        GridSpec(duration=0)
