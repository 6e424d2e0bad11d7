import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from latentprint.errors import AlignmentError, ClosedSetError, ConfigError, DegenerateInputError
from latentprint.matching import (
    EmbeddingRecord,
    GalleryIndex,
    ScoreMatrix,
    cmc,
    cmc_from_scores,
    compare_systems,
    cosine_similarity,
    identify,
    read_cmc_csv,
    read_embeddings,
    read_score_matrix,
    write_cmc_csv,
    write_embeddings,
    write_score_matrix,
)
from oracles import brute_force_ranking


# -- cosine ---------------------------------------------------------------------

def test_cosine_cases():
    a = np.array([1.0, 2.0, -3.0])
    assert cosine_similarity(a, a) == pytest.approx(1.0, abs=1e-12)
    assert cosine_similarity([1, 0, 0], [0, 5, 0]) == 0.0
    assert cosine_similarity(a, 3 * a) == pytest.approx(1.0, abs=1e-12)
    assert cosine_similarity(a, -a) == pytest.approx(-1.0, abs=1e-12)


def test_cosine_rejects_zero_and_mismatch():
    with pytest.raises(DegenerateInputError):
        cosine_similarity([0, 0], [1, 0])
    with pytest.raises(ValueError):
        cosine_similarity([1, 0], [1, 0, 0])


@given(arrays(np.float64, 8, elements=st.floats(-1e3, 1e3)), arrays(np.float64, 8, elements=st.floats(-1e3, 1e3)))
def test_cosine_bounded(a, b):
    if np.linalg.norm(a) == 0 or np.linalg.norm(b) == 0:
        return
    assert -1.0 <= cosine_similarity(a, b) <= 1.0


# -- gallery / identify -----------------------------------------------------------

def _gallery(vectors, identities):
    return GalleryIndex([f"g{i}" for i in range(len(vectors))], identities, vectors)


def test_gallery_vectors_unit_norm_and_immutable():
    g = _gallery(np.random.default_rng(0).normal(size=(5, 16)) * 7, list("aabbc"))
    assert np.allclose(np.linalg.norm(g.vectors, axis=1), 1.0, atol=1e-5)
    assert g.identities == ["a", "b", "c"]
    with pytest.raises(ValueError):
        g.vectors[0, 0] = 1.0


def test_gallery_validation():
    with pytest.raises(ConfigError, match="empty"):
        GalleryIndex([], [], np.zeros((0, 4)))
    with pytest.raises(ConfigError, match="duplicate"):
        GalleryIndex(["x", "x"], ["a", "b"], np.eye(2))
    with pytest.raises(DegenerateInputError):
        GalleryIndex(["x", "y"], ["a", "b"], np.array([[1.0, 0.0], [0.0, 0.0]]))


def test_probe_equal_to_gallery_vector_ranks_first():
    vecs = np.eye(3, 8)
    ranked = identify(vecs[1], _gallery(vecs, ["A", "B", "C"]), "p")
    assert ranked.candidates[0] == ("B", pytest.approx(1.0))
    assert ranked.position_of("B") == 1


def test_tie_goes_to_earlier_identity():
    vecs = np.array([[1.0, 0.0], [0.0, 1.0]])
    ranked = identify(np.array([1.0, 1.0]), _gallery(vecs, ["first", "second"]))
    assert [c[0] for c in ranked.candidates] == ["first", "second"]
    assert ranked.candidates[0][1] == ranked.candidates[1][1]


def test_max_over_templates():
    vecs = np.array([[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]])
    ranked = identify(np.array([0.0, 1.0]), _gallery(vecs, ["a", "a", "b"]))
    assert ranked.candidates == [("a", pytest.approx(1.0)), ("b", pytest.approx(0.8))]


def test_identify_matches_brute_force_on_random_instances():
    rng = np.random.default_rng(0)
    for trial in range(200):
        n_ids = int(rng.integers(1, 33))
        per = rng.integers(1, 5, size=n_ids)
        dim = int(rng.integers(2, 12))
        identities = [f"id{k}" for k in range(n_ids) for _ in range(per[k])]
        order = rng.permutation(len(identities))
        identities = [identities[i] for i in order]
        if trial % 4 == 0:
            # small integer coordinates make exact ties common
            vecs = rng.integers(-2, 3, size=(len(identities), dim)).astype(float)
            vecs[np.linalg.norm(vecs, axis=1) == 0, 0] = 1.0
            probe = rng.integers(-2, 3, size=dim).astype(float)
            probe[0] = probe[0] or 1.0
        else:
            vecs = rng.normal(size=(len(identities), dim))
            probe = rng.normal(size=dim)
        ranked = identify(probe, _gallery(vecs, identities))
        oracle = brute_force_ranking(probe, vecs, identities)
        assert [c[0] for c in ranked.candidates] == [o[0] for o in oracle], trial
        assert np.allclose([c[1] for c in ranked.candidates], [o[1] for o in oracle], atol=1e-12)


def test_ranked_candidates_invariants():
    rng = np.random.default_rng(1)
    g = _gallery(rng.normal(size=(12, 6)), [f"i{k % 5}" for k in range(12)])
    for _ in range(20):
        ranked = identify(rng.normal(size=6), g)
        scores = [c[1] for c in ranked.candidates]
        assert all(a >= b for a, b in zip(scores, scores[1:]))
        assert sorted(c[0] for c in ranked.candidates) == sorted(g.identities)
        assert all(-1.0 <= s <= 1.0 for s in scores)


def test_identify_scale_invariant_and_deterministic():
    rng = np.random.default_rng(2)
    g = _gallery(rng.normal(size=(10, 6)), [f"i{k % 4}" for k in range(10)])
    p = rng.normal(size=6)
    a, b = identify(p, g), identify(17.0 * p, g)
    assert [c[0] for c in a.candidates] == [c[0] for c in b.candidates]
    assert np.allclose([c[1] for c in a.candidates], [c[1] for c in b.candidates], atol=1e-12)
    assert identify(p, g).candidates == a.candidates


# -- CMC ------------------------------------------------------------------------

# probe -> (true identity, scores against A, B, C, D)
HAND_CASE = [
    ("A", [0.9, 0.1, 0.2, 0.3]),  # A first -> position 1
    ("B", [0.8, 0.5, 0.6, 0.1]),  # A, C ahead -> position 3
    ("C", [0.2, 0.4, 0.3, 0.1]),  # B ahead -> position 2
    ("D", [0.5, 0.5, 0.5, 0.5]),  # four-way tie, D enrolled last -> position 4
]


def test_cmc_hand_case_from_scores():
    curve = cmc_from_scores([s for _, s in HAND_CASE], [t for t, _ in HAND_CASE], list("ABCD"), max_rank=4)
    assert curve.accuracy_at_rank == {1: 0.25, 2: 0.5, 3: 0.75, 4: 1.0}
    assert curve.hits == {1: 1, 2: 2, 3: 3, 4: 4}


def test_cmc_hand_case_through_gallery():
    # orthonormal templates make cosine scores proportional to the probe coordinates
    gallery = _gallery(np.eye(4), list("ABCD"))
    probes = [(np.array(s), t) for t, s in HAND_CASE]
    assert cmc(probes, gallery, max_rank=4).accuracy_at_rank == {1: 0.25, 2: 0.5, 3: 0.75, 4: 1.0}


def test_self_match_is_perfect():
    rng = np.random.default_rng(4)
    vecs = rng.normal(size=(15, 32))
    ids = [f"i{k}" for k in range(15)]
    curve = cmc(list(zip(vecs, ids)), _gallery(vecs, ids), max_rank=10)
    assert all(v == 1.0 for v in curve.accuracy_at_rank.values())
    assert curve.percent(1) == "100.00"


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 12), st.integers(1, 20))
def test_cmc_monotone_and_saturates(seed, n_ids, n_probes):
    rng = np.random.default_rng(seed)
    ids = [f"i{k}" for k in range(n_ids)]
    g = _gallery(rng.normal(size=(n_ids, 5)), ids)
    probes = [(rng.normal(size=5), ids[rng.integers(n_ids)]) for _ in range(n_probes)]
    curve = cmc(probes, g, max_rank=n_ids)
    vals = [curve[r] for r in curve.ranks]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    assert vals[-1] == 1.0


def test_closed_set_violation_lists_probes():
    g = _gallery(np.eye(2), ["a", "b"])
    probes = [(np.array([1.0, 0.0]), "a", "p1"), (np.array([0.0, 1.0]), "zz", "p2")]
    with pytest.raises(ClosedSetError) as exc:
        cmc(probes, g, max_rank=1)
    assert exc.value.offenders == ["p2"]
    assert "p2" in str(exc.value)


def test_cmc_rank_and_probe_validation():
    g = _gallery(np.eye(2), ["a", "b"])
    with pytest.raises(ConfigError):
        cmc([(np.array([1.0, 0.0]), "a")], g, max_rank=3)
    with pytest.raises(ConfigError):
        cmc([], g)


# -- compare_systems --------------------------------------------------------------

def _matrix(scores, probes=("p1", "p2", "p3", "p4"), ids="ABCD"):
    return ScoreMatrix(list(probes), list(ids), np.asarray(scores, dtype=float))


TRUTH = {"p1": "A", "p2": "B", "p3": "C", "p4": "D"}


def test_single_system_table_equals_its_cmc():
    curves, table = compare_systems({"ours": _matrix([s for _, s in HAND_CASE])}, TRUTH, max_rank=4)
    assert table[0] == ["rank", "ours"]
    assert [row[1] for row in table[1:]] == [curves["ours"].percent(r) for r in range(1, 5)]
    assert [row[1] for row in table[1:]] == ["25.00", "50.00", "75.00", "100.00"]


def test_dominating_system_is_never_worse():
    rng = np.random.default_rng(5)
    weak = rng.normal(size=(4, 4))
    strong = weak.copy()
    for i, ident in enumerate("ABCD"):
        strong[i, "ABCD".index(ident)] += 0.5  # raise only the true scores
    _, table = compare_systems({"A": _matrix(strong), "B": _matrix(weak)}, TRUTH, max_rank=4)
    for row in table[1:]:
        assert float(row[1]) >= float(row[2])


def test_column_order_does_not_matter():
    base = np.random.default_rng(7).normal(size=(4, 4))  # continuous scores: no ties
    perm = [2, 0, 3, 1]
    shuffled = _matrix(base[:, perm], ids=[list("ABCD")[i] for i in perm])
    ca, _ = compare_systems({"x": _matrix(base)}, TRUTH, max_rank=4)
    cb, _ = compare_systems({"x": shuffled}, TRUTH, max_rank=4)
    assert ca["x"].accuracy_at_rank == cb["x"].accuracy_at_rank


def test_probe_set_mismatch_is_alignment_error():
    a = _matrix(np.zeros((4, 4)))
    b = _matrix(np.zeros((3, 4)), probes=("p1", "p2", "p3"))
    with pytest.raises(AlignmentError, match="p4"):
        compare_systems({"a": a, "b": b}, TRUTH)


def test_four_systems_by_ten_ranks_table():
    rng = np.random.default_rng(6)
    ids = [f"i{k}" for k in range(12)]
    probes = [f"p{k}" for k in range(12)]
    truth = dict(zip(probes, ids))
    systems = {name: ScoreMatrix(probes, ids, rng.normal(size=(12, 12))) for name in ("ours", "b1", "b2", "b3")}
    _, table = compare_systems(systems, truth, max_rank=10)
    assert len(table) == 11 and all(len(row) == 5 for row in table)


# -- files -----------------------------------------------------------------------

def test_embedding_file_roundtrip(tmp_path):
    recs = [EmbeddingRecord("s1", "a/1", np.array([0.1, -2.5, 3.0])), EmbeddingRecord("s2", "b/1", np.ones(3))]
    write_embeddings(tmp_path / "e.jsonl", recs)
    back = read_embeddings(tmp_path / "e.jsonl")
    assert [(r.id, r.identity) for r in back] == [("s1", "a/1"), ("s2", "b/1")]
    assert np.allclose(back[0].vector, recs[0].vector)


def test_bad_embedding_line_reports_line(tmp_path):
    (tmp_path / "e.jsonl").write_text('{"id": "x", "identity": "a", "vector": [1]}\n{"id": "y"}\n')
    with pytest.raises(ValueError, match=":2:"):
        read_embeddings(tmp_path / "e.jsonl")


def test_cmc_csv_roundtrip(tmp_path):
    curve = cmc_from_scores([s for _, s in HAND_CASE], [t for t, _ in HAND_CASE], list("ABCD"), max_rank=4)
    write_cmc_csv(tmp_path / "cmc.csv", curve)
    text = (tmp_path / "cmc.csv").read_text()
    assert text.splitlines()[:2] == ["rank,accuracy_percent", "1,25.00"]
    assert read_cmc_csv(tmp_path / "cmc.csv") == {1: 25.0, 2: 50.0, 3: 75.0, 4: 100.0}


def test_score_matrix_roundtrip_and_errors(tmp_path):
    m = _matrix([s for _, s in HAND_CASE])
    write_score_matrix(tmp_path / "s.csv", m)
    back = read_score_matrix(tmp_path / "s.csv")
    assert back.probe_ids == m.probe_ids and back.identities == m.identities
    assert np.array_equal(back.scores, m.scores)
    (tmp_path / "bad.csv").write_text("probe,A,B\np1,0.1\n")
    with pytest.raises(ValueError, match=":2:"):
        read_score_matrix(tmp_path / "bad.csv")
