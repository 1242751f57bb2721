import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wavefuse.series import (
    MultivariateSeries,
    Segment,
    assemble_segments,
    boundaries_to_segments,
    flatten_segments,
    patch_indices,
    window_series,
)

from oracles import oracle_window_offsets


def make_series(T=32, C=2, fs=50.0):
    rng = np.random.default_rng(0)
    return MultivariateSeries(
        values=rng.normal(size=(T, C)), fs=fs,
        feature_names=tuple(f"ch{i}" for i in range(C)), patient_id="r0",
    )


class TestSeriesInvariants:
    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError, match="finite"):
            MultivariateSeries(np.array([[1.0], [np.nan]]), 10.0, ("a",))

    def test_rejects_bad_fs(self):
        with pytest.raises(ValueError, match="fs"):
            MultivariateSeries(np.ones((3, 1)), 0.0, ("a",))

    def test_rejects_name_mismatch(self):
        with pytest.raises(ValueError, match="feature_names"):
            MultivariateSeries(np.ones((3, 2)), 10.0, ("a",))

    def test_values_immutable(self):
        s = make_series()
        with pytest.raises(ValueError):
            s.values[0, 0] = 99.0


class TestPatchIndices:
    def test_basic(self):
        g = patch_indices(32, 16, 8)
        assert list(g.indices) == [0, 1, 2]
        assert g.n_patches == 3

    def test_single_exact_fit(self):
        g = patch_indices(16, 16, 8)
        assert list(g.indices) == [0]
        assert g.n_patches == 1

    def test_window_shorter_than_patch(self):
        with pytest.raises(ValueError, match="shorter than patch"):
            patch_indices(10, 16, 8)

    def test_nonpositive_params(self):
        with pytest.raises(ValueError):
            patch_indices(10, 0, 1)
        with pytest.raises(ValueError):
            patch_indices(10, 4, 0)

    @given(
        T=st.integers(1, 500),
        l=st.integers(1, 64),
        s=st.integers(1, 32),
    )
    def test_every_patch_inside_and_grid_maximal(self, T, l, s):
        if T < l:
            with pytest.raises(ValueError):
                patch_indices(T, l, s)
            return
        g = patch_indices(T, l, s)
        for i in g.indices:
            assert i * s + l <= T
        # one more patch would overflow
        assert g.n_patches * s + l > T


class TestSegments:
    def test_grouping(self):
        segs = assemble_segments([0, 0, 1, 1, 0])
        assert segs == [Segment(0, 2, 0), Segment(2, 4, 1), Segment(4, 5, 0)]

    def test_single_run(self):
        assert assemble_segments([3, 3, 3]) == [Segment(0, 3, 3)]

    def test_alternating(self):
        segs = assemble_segments([0, 1, 0, 1])
        assert len(segs) == 4
        assert all(s.length == 1 for s in segs)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            assemble_segments([])

    @given(st.lists(st.integers(0, 3), min_size=1, max_size=200))
    def test_round_trip(self, labels):
        segs = assemble_segments(labels)
        assert flatten_segments(segs).tolist() == labels
        # partition with no equal-label neighbors
        assert segs[0].start == 0 and segs[-1].end == len(labels)
        for a, b in zip(segs, segs[1:]):
            assert a.end == b.start and a.label != b.label


class TestWindows:
    def test_tail_dropped(self):
        s = make_series(T=10)
        ws = window_series(s, length=4, step=4)
        assert [w.offset for w in ws] == [0, 4]

    def test_full_length_window(self):
        s = make_series(T=4)
        ws = window_series(s, length=4, step=1)
        assert [w.offset for w in ws] == [0]

    def test_step_alignment_offsets(self):
        s = make_series(T=9)
        ws = window_series(s, length=4, step=2)
        assert [w.offset for w in ws] == oracle_window_offsets(9, 4, 2) == [0, 2, 4]

    def test_too_long_rejected(self):
        with pytest.raises(ValueError, match="exceeds"):
            window_series(make_series(T=4), length=5, step=1)

    def test_label_slices_aligned(self):
        s = make_series(T=10)
        labels = np.arange(10)
        ws = window_series(s, length=4, step=3, labels=labels)
        for w in ws:
            assert w.labels.tolist() == list(range(w.offset, w.offset + 4))

    @given(
        T=st.integers(2, 200), length=st.integers(1, 50), step=st.integers(1, 20)
    )
    def test_prefix_coverage_no_gaps(self, T, length, step):
        if length > T:
            return
        s = make_series(T=T)
        ws = window_series(s, length, step)
        assert [w.offset for w in ws] == oracle_window_offsets(T, length, step)
        if step <= length:
            covered = np.zeros(T, dtype=bool)
            for w in ws:
                covered[w.offset : w.offset + length] = True
            # a contiguous prefix is covered
            end = ws[-1].offset + length
            assert covered[:end].all()


class TestBoundariesToSegments:
    def test_interior_points(self):
        segs = boundaries_to_segments([3, 7], 10)
        assert [(s.start, s.end) for s in segs] == [(0, 3), (3, 7), (7, 10)]

    def test_edge_points_no_empty_segments(self):
        segs = boundaries_to_segments([0, 5, 10], 10)
        assert [(s.start, s.end) for s in segs] == [(0, 5), (5, 10)]

    def test_partitions(self):
        segs = boundaries_to_segments([2, 4, 9], 12)
        assert segs[0].start == 0 and segs[-1].end == 12
        for a, b in zip(segs, segs[1:]):
            assert a.end == b.start
