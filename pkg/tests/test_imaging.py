import json
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sparsefocus.errors import (
    ContractError,
    MissingFileError,
    SampleFormatError,
    SizeMismatchError,
    UnsupportedVersionError,
)
from sparsefocus.imaging import (
    PhantomSample,
    binarize,
    derive_body_mask,
    dice_coefficient,
    partition_regions,
    read_meta,
    read_sample,
    write_sample,
    z_score_normalize,
)
from sparsefocus.phantom import generate_phantom


def flood_body_oracle(ct):
    """Brute force: BFS components over ct > -400, keep the largest, then
    mark every pixel unreachable from the border through non-body pixels."""
    h, w = ct.shape
    fg = [[ct[i, j] > -400 for j in range(w)] for i in range(h)]
    seen = [[False] * w for _ in range(h)]
    best = []
    for i in range(h):
        for j in range(w):
            if fg[i][j] and not seen[i][j]:
                comp, q = [], deque([(i, j)])
                seen[i][j] = True
                while q:
                    a, b = q.popleft()
                    comp.append((a, b))
                    for da, db in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                        na, nb = a + da, b + db
                        if 0 <= na < h and 0 <= nb < w and fg[na][nb] and not seen[na][nb]:
                            seen[na][nb] = True
                            q.append((na, nb))
                if len(comp) > len(best):
                    best = comp
    body = np.zeros((h, w), bool)
    for a, b in best:
        body[a, b] = True
    outside = np.zeros((h, w), bool)
    q = deque((i, j) for i in range(h) for j in range(w)
              if (i in (0, h - 1) or j in (0, w - 1)) and not body[i, j])
    for p in q:
        outside[p] = True
    while q:
        a, b = q.popleft()
        for da, db in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            na, nb = a + da, b + db
            if 0 <= na < h and 0 <= nb < w and not body[na, nb] and not outside[na, nb]:
                outside[na, nb] = True
                q.append((na, nb))
    return ~outside


def disk(n, r, value, background=-1000.0):
    yy, xx = np.mgrid[:n, :n]
    c = (n - 1) / 2
    img = np.full((n, n), background)
    img[(yy - c) ** 2 + (xx - c) ** 2 <= r * r] = value
    return img


# --- partition


def test_partition_boundaries():
    ct = np.array([[-1000.0, -400.0, -399.0, -300.0, -250.0, 0.0, 249.9, 250.0, 900.0, 3000.0]])
    p = partition_regions(ct, np.ones_like(ct, bool))
    assert p.air.tolist()[0] == [True, True] + [False] * 8
    assert p.other.tolist()[0] == [False, False, True, True] + [False] * 6
    assert p.tissue.tolist()[0] == [False] * 4 + [True, True, True] + [False] * 3
    assert p.bone.tolist()[0] == [False] * 7 + [True] * 3


def test_partition_mismatch():
    with pytest.raises(ContractError):
        partition_regions(np.zeros((3, 3)), np.ones((3, 4), bool))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (6, 7), elements=st.floats(-1000, 3000)), arrays(np.bool_, (6, 7)))
def test_partition_exhaustive(ct, body):
    p = partition_regions(ct, body)
    stack = np.stack([p.air, p.tissue, p.bone, p.other]).astype(int)
    assert np.array_equal(stack.sum(0), body.astype(int))
    assert np.array_equal(p.background, ~body)


# --- body mask


def test_body_mask_all_air_empty():
    assert not derive_body_mask(np.full((8, 8), -1000.0)).any()


def test_body_mask_solid_disk():
    ct = disk(16, 5, 50.0)
    assert np.array_equal(derive_body_mask(ct), ct > -400)


def test_body_mask_fills_pocket():
    ct = disk(8, 3.2, 50.0)
    ct[3, 4] = -1000.0
    body = derive_body_mask(ct)
    assert body[3, 4]
    assert np.array_equal(body, flood_body_oracle(ct))


def test_body_mask_keeps_largest_component():
    ct = np.full((8, 8), -1000.0)
    ct[1:3, 1:3] = 0.0
    ct[4:8, 4:8] = 0.0
    body = derive_body_mask(ct)
    assert body[5, 5] and not body[1, 1]


@settings(max_examples=150, deadline=None)
@given(arrays(np.bool_, (8, 8)))
def test_body_mask_matches_flood_fill_oracle(fg):
    ct = np.where(fg, 40.0, -1000.0)
    # skip grids whose two largest components tie; the tie rule is arbitrary
    from scipy import ndimage

    labels, n = ndimage.label(fg)
    sizes = sorted(np.bincount(labels.ravel())[1:].tolist(), reverse=True)
    if n > 1 and sizes[0] == sizes[1]:
        return
    assert np.array_equal(derive_body_mask(ct), flood_body_oracle(ct))


def test_body_mask_recovers_phantom_body():
    for seed in range(5):
        s = generate_phantom(seed=seed)
        assert dice_coefficient(derive_body_mask(s.ct), s.body) >= 0.99


# --- z-score


def test_zscore_examples():
    assert np.array_equal(z_score_normalize(np.full((3, 3), 7.0)), np.zeros((3, 3)))
    np.testing.assert_allclose(z_score_normalize(np.array([[0.0, 2.0]])), [[-1.0, 1.0]])


def test_zscore_idempotent_and_affine_invariant():
    rng = np.random.default_rng(0)
    x = rng.normal(3, 5, (12, 9))
    z = z_score_normalize(x)
    assert abs(z.mean()) < 1e-5 and abs(z.std() - 1) < 1e-5
    np.testing.assert_allclose(z_score_normalize(z), z, atol=1e-6)
    np.testing.assert_allclose(z_score_normalize(4.5 * x - 17), z, atol=1e-6)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (5, 5), elements=st.floats(-100, 100)),
       st.floats(0.1, 100), st.floats(-100, 100))
def test_zscore_affine_property(x, a, b):
    if x.std() < 1e-3:
        return
    np.testing.assert_allclose(z_score_normalize(a * x + b), z_score_normalize(x), atol=1e-6)


# --- binarize and dice


def test_binarize_examples():
    assert binarize(np.array([0.7, 0.5, 0.2]), 0.5).tolist() == [True, True, False]
    for bad in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ContractError):
            binarize(np.zeros(2), bad)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (4, 4), elements=st.floats(0, 1)),
       st.floats(0.01, 0.98), st.floats(0.0, 0.5))
def test_binarize_monotone(p, t, dt):
    t2 = min(t + dt, 0.99)
    assert not np.any(binarize(p, t2) & ~binarize(p, t))


def test_dice_coefficient():
    a = np.array([1, 1, 0, 0], bool)
    b = np.array([1, 0, 0, 0], bool)
    assert dice_coefficient(a, b) == pytest.approx(2 / 3)
    assert dice_coefficient(np.zeros(3, bool), np.zeros(3, bool)) == 1.0


# --- sample format


def make_sample():
    rng = np.random.default_rng(1)
    return PhantomSample(
        mr=rng.normal(size=(6, 5)).astype(np.float32),
        ct=rng.uniform(-1000, 3000, (6, 5)).astype(np.float32),
        body=rng.random((6, 5)) < 0.5,
        seed=42,
        id="case",
    )


def test_sample_roundtrip_bit_exact(tmp_path):
    s = make_sample()
    d = write_sample(s, tmp_path / "case")
    r = read_sample(d)
    for name in ("mr", "ct"):
        assert getattr(r, name).tobytes() == getattr(s, name).astype("<f4").tobytes()
    assert np.array_equal(r.body, s.body)
    assert r.seed == 42
    meta = read_meta(d)
    assert meta["version"] == 1 and meta["hu_range"] == [-1000, 3000]
    assert (meta["height"], meta["width"]) == (6, 5)
    # rewriting what was read yields identical bytes
    d2 = write_sample(r, tmp_path / "again")
    for f in ("mr.f32", "ct.f32", "body.u8", "meta.json"):
        assert (d / f).read_bytes() == (d2 / f).read_bytes()


def test_truncated_plane(tmp_path):
    d = write_sample(make_sample(), tmp_path / "case")
    raw = (d / "ct.f32").read_bytes()
    (d / "ct.f32").write_bytes(raw[:-4])
    with pytest.raises(SizeMismatchError):
        read_sample(d)


def test_bad_version(tmp_path):
    d = write_sample(make_sample(), tmp_path / "case")
    meta = json.loads((d / "meta.json").read_text())
    meta["version"] = 2
    (d / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(UnsupportedVersionError):
        read_sample(d)


def test_missing_file(tmp_path):
    d = write_sample(make_sample(), tmp_path / "case")
    (d / "body.u8").unlink()
    with pytest.raises(MissingFileError):
        read_sample(d)
    with pytest.raises(MissingFileError):
        read_sample(tmp_path / "nowhere")


def test_error_types_are_distinct():
    kinds = {MissingFileError, SizeMismatchError, UnsupportedVersionError}
    assert len(kinds) == 3
    assert all(issubclass(k, SampleFormatError) for k in kinds)


def test_unknown_meta_keys_ignored(tmp_path):
    d = write_sample(make_sample(), tmp_path / "case")
    meta = json.loads((d / "meta.json").read_text())
    meta["whatever"] = {"x": 1}
    (d / "meta.json").write_text(json.dumps(meta))
    assert read_sample(d).seed == 42


def test_non_binary_body_rejected(tmp_path):
    d = write_sample(make_sample(), tmp_path / "case")
    raw = bytearray((d / "body.u8").read_bytes())
    raw[0] = 7
    (d / "body.u8").write_bytes(bytes(raw))
    with pytest.raises(SampleFormatError):
        read_sample(d)
