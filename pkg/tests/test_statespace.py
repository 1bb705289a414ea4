"""State spaces, rate-matrix validation, constructors, serialization."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from jdl import statespace as ss
from jdl.errors import (
    ColumnSumNonzero,
    NegativeOffDiagonal,
    NotSquare,
    POutOfRange,
    TooLarge,
)


def _unit_two_state():
    return ss.validate_rate_matrix(np.array([[-1.0, 1.0], [1.0, -1.0]]))


# === 1. Validation ========================================================


class TestValidation:
    def test_rejects_non_square(self):
        with pytest.raises(NotSquare):
            ss.validate_rate_matrix(np.zeros((2, 3)))
        with pytest.raises(NotSquare):
            ss.validate_rate_matrix(np.zeros(4))
        with pytest.raises(NotSquare):
            ss.validate_rate_matrix(np.zeros((1, 1)))

    def test_rejects_negative_off_diagonal(self):
        q = np.array([[-1.0, 1.0], [1.0, -1.0]])
        q[0, 1] = -0.5
        q[1, 1] = 0.5
        with pytest.raises(NegativeOffDiagonal, match=r"\(0, 1\)"):
            ss.validate_rate_matrix(q)

    def test_rejects_bad_column_sum(self):
        q = np.array([[-1.0, 1.0], [1.0 + 1e-6, -1.0]])
        with pytest.raises(ColumnSumNonzero, match="column 0"):
            ss.validate_rate_matrix(q)

    def test_column_sum_tolerance_is_tight(self):
        q = np.array([[-1.0, 1.0], [1.0 + 0.5e-12, -1.0]])
        ss.validate_rate_matrix(q)  # inside 1e-12: fine

    def test_records_bounds_and_symmetry(self):
        q = _unit_two_state()
        assert q.max_rate == 1.0
        assert q.max_exit_rate == 1.0
        assert q.min_exit_rate == 1.0
        assert q.symmetric
        assert q.time_homogeneous
        _, qa = ss.asymmetric_hypercube_rate_matrix(1, 0.3)
        assert not qa.symmetric
        assert qa.max_rate == 0.7
        assert qa.max_exit_rate == 0.7
        assert qa.min_exit_rate == pytest.approx(0.3)

    def test_entries_are_immutable(self):
        q = _unit_two_state()
        with pytest.raises(ValueError):
            q.entries[0, 0] = 5.0

    def test_off_diagonal_zeroes_diagonal_only(self):
        q = _unit_two_state()
        off = ss.off_diagonal(q)
        assert off[0, 0] == off[1, 1] == 0.0
        assert off[0, 1] == off[1, 0] == 1.0


# === 2. State spaces =======================================================


class TestStateSpace:
    def test_minimum_size(self):
        with pytest.raises(ValueError):
            ss.StateSpace(size=1)

    def test_embedding_must_cover_lattice(self):
        ss.StateSpace(size=4, embedding=np.array([[0, 0], [0, 1], [1, 0], [1, 1]]))
        with pytest.raises(ValueError):  # duplicate row
            ss.StateSpace(size=4, embedding=np.array([[0, 0], [0, 1], [1, 0], [1, 0]]))
        with pytest.raises(ValueError):  # 3 points can't fill a square lattice
            ss.StateSpace(size=3, embedding=np.array([[0], [1], [3]]))

    def test_row_major_indexing(self):
        space, _ = ss.hypercube_rate_matrix(2)
        assert space.embedding.tolist() == [[0, 0], [0, 1], [1, 0], [1, 1]]
        assert space.side == 2 and space.dim == 2
        back = space.index_of(space.embedding)
        assert back.tolist() == [0, 1, 2, 3]

    def test_labels_length_checked(self):
        with pytest.raises(ValueError):
            ss.StateSpace(size=2, labels=("a",))


# === 3. Constructors =======================================================


class TestHypercube:
    def test_d3_bounds(self):
        space, q = ss.hypercube_rate_matrix(3)
        assert space.size == 8
        assert q.max_rate == 1.0
        assert q.max_exit_rate == 3.0
        assert q.min_exit_rate == 3.0
        assert q.symmetric

    def test_d2_matrix_is_the_four_cycle(self):
        # hand-built: neighbours differ in exactly one bit
        _, q = ss.hypercube_rate_matrix(2)
        expect = np.array(
            [
                [-2.0, 1.0, 1.0, 0.0],
                [1.0, -2.0, 0.0, 1.0],
                [1.0, 0.0, -2.0, 1.0],
                [0.0, 1.0, 1.0, -2.0],
            ]
        )
        assert np.array_equal(q.entries, expect)

    def test_size_cap(self):
        with pytest.raises(TooLarge):
            ss.hypercube_rate_matrix(21)
        with pytest.raises(TooLarge):
            ss.hypercube_rate_matrix(5, size_cap=16)
        with pytest.raises(ValueError):
            ss.hypercube_rate_matrix(0)


class TestAsymmetricHypercube:
    def test_d1_frozen_matrix(self):
        _, q = ss.asymmetric_hypercube_rate_matrix(1, 0.3)
        expect = np.array([[-0.3, 0.7], [0.3, -0.7]])
        assert np.allclose(q.entries, expect, atol=0.0)

    def test_p_range(self):
        for bad in (0.0, 1.0, -0.1, 1.5):
            with pytest.raises(POutOfRange):
                ss.asymmetric_hypercube_rate_matrix(2, bad)

    @pytest.mark.parametrize("d,p", [(1, 0.3), (2, 0.3), (3, 0.7), (2, 0.11)])
    def test_stationary_law_is_product_bernoulli(self, d, p):
        space, q = ss.asymmetric_hypercube_rate_matrix(d, p)
        pi = np.array(
            [np.prod([p if bit else 1.0 - p for bit in row]) for row in space.embedding]
        )
        assert pi.sum() == pytest.approx(1.0)
        assert np.abs(q.entries @ pi).max() < 1e-14


class TestGrid:
    def test_s3_d1_frozen_matrix(self):
        _, q = ss.grid_rate_matrix(3, 1)
        expect = np.array([[-1.0, 1.0, 0.0], [1.0, -2.0, 1.0], [0.0, 1.0, -1.0]])
        assert np.array_equal(q.entries, expect)
        assert q.max_rate == 1.0
        assert q.max_exit_rate == 2.0
        assert q.min_exit_rate == 1.0

    def test_side_two_is_the_hypercube(self):
        _, qg = ss.grid_rate_matrix(2, 3)
        _, qh = ss.hypercube_rate_matrix(3)
        assert np.array_equal(qg.entries, qh.entries)

    def test_interior_exit_rate_is_2d(self):
        _, q = ss.grid_rate_matrix(3, 2)
        assert q.max_exit_rate == 4.0  # interior of a 3x3 grid
        assert q.min_exit_rate == 2.0  # corners

    def test_degenerate_args(self):
        with pytest.raises(ValueError):
            ss.grid_rate_matrix(1, 2)
        with pytest.raises(TooLarge):
            ss.grid_rate_matrix(3, 2, size_cap=8)


# === 4. Graph view and serialization ======================================


class TestGraphAndSerialization:
    def test_graph_of_two_state(self):
        assert ss.graph_of(_unit_two_state()) == [(0, 1, 1.0), (1, 0, 1.0)]

    def test_graph_of_directed_weights(self):
        _, q = ss.asymmetric_hypercube_rate_matrix(1, 0.3)
        assert ss.graph_of(q) == [(0, 1, 0.3), (1, 0, 0.7)]

    def test_json_roundtrip_exact(self):
        space, q = ss.asymmetric_hypercube_rate_matrix(2, 0.3)
        space2, q2 = ss.rate_matrix_from_json(ss.rate_matrix_to_json(q, space))
        assert np.array_equal(q.entries, q2.entries)
        assert np.array_equal(space.embedding, space2.embedding)
        assert q2.max_rate == q.max_rate

    def test_csv_roundtrip_exact(self):
        _, q = ss.grid_rate_matrix(3, 2)
        text = ss.edges_to_csv(q)
        assert text.startswith("src,dst,rate\n")
        q2 = ss.edges_from_csv(text)
        assert np.array_equal(q.entries, q2.entries)
        # a second serialization is byte-identical
        assert ss.edges_to_csv(q2) == text

    def test_csv_header_enforced(self):
        with pytest.raises(ValueError, match="header"):
            ss.edges_from_csv("a,b,c\n0,1,1.0\n")


# === 5. Properties =========================================================


@st.composite
def random_generator(draw):
    n = draw(st.integers(min_value=2, max_value=7))
    off = draw(
        hnp.arrays(
            np.float64,
            (n, n),
            elements=st.floats(min_value=0.0, max_value=10.0, allow_nan=False),
        )
    )
    off = np.asarray(off)
    np.fill_diagonal(off, 0.0)
    q = off.copy()
    np.fill_diagonal(q, -off.sum(axis=0))
    return q


class TestProperties:
    @given(random_generator())
    @settings(max_examples=60, deadline=None)
    def test_validated_bounds_match_entries(self, qarr):
        q = ss.validate_rate_matrix(qarr)
        off = ss.off_diagonal(q)
        assert q.max_rate == off.max()
        assert q.max_exit_rate == pytest.approx((-np.diag(qarr)).max())
        assert q.min_exit_rate == pytest.approx((-np.diag(qarr)).min())
        assert np.abs(q.entries.sum(axis=0)).max() <= 1e-12

    @given(random_generator())
    @settings(max_examples=60, deadline=None)
    def test_symmetry_flag(self, qarr):
        q = ss.validate_rate_matrix(qarr)
        assert q.symmetric == (np.abs(qarr - qarr.T).max() <= 1e-12)

    @given(random_generator())
    @settings(max_examples=30, deadline=None)
    def test_edge_csv_roundtrip(self, qarr):
        q = ss.validate_rate_matrix(qarr)
        q2 = ss.edges_from_csv(ss.edges_to_csv(q), size=q.size)
        assert np.array_equal(ss.off_diagonal(q), ss.off_diagonal(q2))
