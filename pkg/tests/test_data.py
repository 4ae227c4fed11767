import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tripod import data, images, metrics


def test_counts():
    assert data.BLOB.n_configs == 1024
    assert data.TWO_BLOB.n_configs == 2304
    with pytest.raises(ValueError):
        data.get_process("nope")


def test_known_bitmap():
    img = data.render_blob([0, 0, 0, 3])
    expected = np.zeros((16, 16))
    expected[3:6, 3:6] = 1.0
    np.testing.assert_array_equal(img, expected)
    assert data.render_blob([7, 7, 3, 0])[15, 15] == 0.25


blob_sources = st.tuples(st.integers(0, 7), st.integers(0, 7), st.integers(0, 3), st.integers(0, 3))


@settings(max_examples=100, deadline=None)
@given(blob_sources)
def test_transpose_swaps_positions(s):
    x, y, size, level = s
    np.testing.assert_array_equal(data.render_blob([x, y, size, level]).T, data.render_blob([y, x, size, level]))


@settings(max_examples=100, deadline=None)
@given(blob_sources)
def test_square_fits_frame_with_expected_area(s):
    img = data.render_blob(s)
    side = 2 * (1 + s[2]) + 1
    assert np.count_nonzero(img) == side * side
    assert set(np.unique(img)) == {0.0, (1 + s[3]) / 4.0}


@pytest.mark.parametrize("name", sorted(data.PROCESSES))
def test_enumeration_is_injective_and_in_range(name):
    ds = data.Dataset.build(name)
    assert len(ds) == ds.process.n_configs
    assert len({img.tobytes() for img in ds.images}) == len(ds)
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
    assert ds.flat.shape == (len(ds), 256)


@pytest.mark.parametrize("name", sorted(data.PROCESSES))
def test_sampled_sources_are_independent_and_uniform(name):
    proc = data.get_process(name)
    s = data.sample_sources(proc, np.random.default_rng(0), 100_000)
    for j, card in enumerate(proc.cardinalities):
        freq = np.bincount(s[:, j], minlength=card) / len(s)
        np.testing.assert_allclose(freq, 1.0 / card, atol=0.01)
    for a, b in itertools.combinations(range(proc.n_s), 2):
        assert metrics.plugin_mi(s[:, a], s[:, b]) < 0.01


def test_sampling_is_deterministic():
    a = data.sample_pair(data.BLOB, np.random.default_rng(9))
    b = data.sample_pair(data.BLOB, np.random.default_rng(9))
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_dump_writes_images_and_labels(tmp_path):
    out = data.dump(data.BLOB, tmp_path / "blob")
    lines = (out / "labels.csv").read_text().splitlines()
    assert lines[0] == "file,x,y,size,intensity"
    assert len(lines) == 1025
    name, *vals = lines[5].split(",")
    img = images.read_pnm(out / name)
    np.testing.assert_allclose(img, data.render_blob([int(v) for v in vals]), atol=1 / 255)
