import io

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hypoforge.errors import InputError, TransportError
from hypoforge.kg import HashingEmbedder
from hypoforge.stats import cosine_similarity, temporal_similarity_eval
from hypoforge.stats.similarity import read_text_pairs

GOLD = [
    "GPR153 drives neointima formation after arterial injury",
    "Metformin lowers hepatic glucose output through AMPK",
    "Loss of TET2 in clonal haematopoiesis promotes atherosclerosis",
    "SGLT2 inhibition reduces heart failure admissions",
]


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=8), st.floats(0.1, 5))
def test_cosine_is_scale_invariant(v, c):
    v = np.array(v)
    if np.linalg.norm(v) < 1e-3:
        return
    assert cosine_similarity(v, c * v) == pytest.approx(1.0)
    assert cosine_similarity(v, -v) == pytest.approx(-1.0)


def test_cosine_errors():
    with pytest.raises(InputError):
        cosine_similarity([0, 0], [1, 0])
    with pytest.raises(InputError):
        cosine_similarity([1, 0], [1, 0, 0])


def test_identical_texts_give_median_one():
    ev = temporal_similarity_eval(GOLD, GOLD)
    assert ev.matched_median == pytest.approx(1.0)
    assert len(ev.null) == 6 and ev.null_median < ev.matched_median


def test_background_labels_filter_the_null():
    ev = temporal_similarity_eval(GOLD, GOLD, backgrounds=["a", "a", "b", "b"])
    assert len(ev.null) == 4


def test_explicit_pairing_and_csv():
    ev = temporal_similarity_eval(GOLD[:2], GOLD, pairing=[(0, 1), (1, 0)])
    assert ev.matched.shape == (2,) and ev.matched_median < 1.0
    buf = io.StringIO()
    ev.write_csv(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "pair_type,similarity" and len(lines) == 1 + 2 + 6


def test_errors():
    with pytest.raises(InputError):
        temporal_similarity_eval([], GOLD)
    with pytest.raises(InputError):
        temporal_similarity_eval(GOLD[:2], GOLD)

    class Broken:
        def embed(self, texts):
            raise RuntimeError("offline")

    with pytest.raises(TransportError, match="offline"):
        temporal_similarity_eval(GOLD, GOLD, embedder=Broken())


def test_read_text_pairs():
    g, t, b = read_text_pairs(io.StringIO("generated,gold,background\nx,y,b1\n"))
    assert (g, t, b) == (["x"], ["y"], ["b1"])
    assert read_text_pairs(io.StringIO("generated,gold\nx,y\n"))[2] is None
    with pytest.raises(InputError, match="row 2"):
        read_text_pairs(io.StringIO("generated,gold\n,y\n"))


def test_hashing_embedder_is_usable_directly():
    X = HashingEmbedder(32).embed(GOLD)
    assert X.shape == (4, 32)
