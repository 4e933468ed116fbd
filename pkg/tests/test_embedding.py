import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from usermeta.data import normalize_meta
from usermeta.embedding import (
    EmbeddingRecord, collect_embeddings, pca, project, read_embeddings, row_perplexity, silhouette, tsne,
    tsne_affinities, write_embeddings,
)
from usermeta.learners import HyperParams
from usermeta.model import ModelConfig
from usermeta.sim import EnvConfig, gen_meta_dataset
from usermeta.training import train

HYPER = HyperParams(embed_size=4, hidden=8, batch_size=10, n_users=2, iterations=3)


@pytest.fixture(scope="module")
def meta():
    g = gen_meta_dataset(3, 2, EnvConfig(episode_length=40), seed=0)
    return normalize_meta(g.meta, g.stats)


def test_collect_counts_and_determinism(meta):
    L = train("proposed", meta, HYPER, cfg=ModelConfig(hidden=8, embed_size=4))
    before = L.snapshot()
    recs = collect_embeddings(L, meta, 4, 20, seed=1)
    assert len(recs) == 3 * 4 and {r.user_id for r in recs} == {0, 1, 2}
    again = collect_embeddings(L, meta, 4, 20, seed=1)
    assert all(a.phi.tobytes() == b.phi.tobytes() for a, b in zip(recs, again))
    one = collect_embeddings(L, {0: meta[0]}, 1, 20, seed=1)
    assert len(one) == 1 and one[0].phi.shape == (4,)
    for k, v in L.snapshot().items():
        assert v.tobytes() == before[k].tobytes()


def test_collect_rejects_models_without_embeddings(meta):
    L = train("maml", meta, HYPER, cfg=ModelConfig(hidden=8, embed_size=4))
    with pytest.raises(TypeError):
        collect_embeddings(L, meta, 1, 10, seed=0)


def test_embeddings_csv_roundtrip(tmp_path):
    recs = [EmbeddingRecord(3, 0, np.array([0.1, 1 / 3])), EmbeddingRecord(4, 1, np.array([-2.0, 1e-17]))]
    write_embeddings(tmp_path / "e.csv", recs)
    back = read_embeddings(tmp_path / "e.csv")
    assert [(r.user_id, r.batch) for r in back] == [(3, 0), (4, 1)]
    assert all(a.phi.tobytes() == b.phi.tobytes() for a, b in zip(recs, back))


# -- pca ---------------------------------------------------------------------------------

def test_pca_exact_on_plane():
    rng = np.random.default_rng(0)
    basis = np.linalg.qr(rng.normal(size=(6, 2)))[0]
    x = rng.normal(size=(30, 2)) @ basis.T + rng.normal(size=6)
    y = pca(x)
    _, _, vt = np.linalg.svd(x - x.mean(0), full_matrices=False)
    recon = y @ (vt[:2] * np.sign(vt[:2][np.arange(2), np.argmax(np.abs(vt[:2]), axis=1)])[:, None])
    assert np.max(np.abs(recon + x.mean(0) - x)) < 1e-8


def test_pca_variance_order_and_translation():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(40, 5)) * np.array([3.0, 1.0, 0.5, 0.2, 0.1])
    y = pca(x)
    assert y[:, 0].var() >= y[:, 1].var()
    y2 = pca(x + 17.0)
    np.testing.assert_allclose(np.abs(y2), np.abs(y), atol=1e-9)
    with pytest.raises(ValueError):
        pca(x[:1])


# -- t-SNE ---------------------------------------------------------------------------------

def test_affinity_rows_and_perplexity():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(60, 5))
    P, betas = tsne_affinities(x, perplexity=10.0)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-8)
    assert np.all(np.diag(P) == 0)
    # entropy recomputed directly from the returned rows
    H = np.array([-np.sum(p[p > 0] * np.log(p[p > 0])) for p in P])
    assert np.max(np.abs(np.exp(H) - 10.0)) < 1e-3
    np.testing.assert_allclose(row_perplexity(P), np.exp(H))
    # each row is a Gaussian kernel in squared distance with the reported precision
    d2 = np.sum((x[0] - x) ** 2, axis=1)
    k = np.exp(-betas[0] * d2)
    k[0] = 0.0
    np.testing.assert_allclose(P[0], k / k.sum(), rtol=1e-10, atol=1e-15)


def test_tsne_separates_clusters_and_is_seeded():
    rng = np.random.default_rng(3)
    x = np.vstack([rng.normal(0, 0.1, (15, 4)), rng.normal(5, 0.1, (15, 4))])
    labels = np.repeat([0, 1], 15)
    y = tsne(x, perplexity=5, seed=0)
    assert silhouette(y, labels) > 0.8
    assert tsne(x, perplexity=5, seed=0).tobytes() == y.tobytes()


def test_tsne_degenerate_inputs():
    with pytest.raises(ValueError):
        tsne(np.ones((5, 3)))
    with pytest.raises(ValueError):
        tsne(np.eye(2))


def test_project_attaches_points():
    recs = [EmbeddingRecord(i % 2, i, np.array([i % 2 * 3.0, float(i)])) for i in range(6)]
    pts = project(recs, "pca")
    assert pts.shape == (6, 2) and all(r.point is not None for r in recs)
    with pytest.raises(ValueError):
        project(recs, "umap")


# -- silhouette ----------------------------------------------------------------------------

def test_silhouette_well_separated():
    rng = np.random.default_rng(4)
    x = np.vstack([rng.normal(0, 0.01, (10, 2)), rng.normal(10, 0.01, (10, 2))])
    assert silhouette(x, [0] * 10 + [1] * 10) > 0.9


def test_silhouette_identical_points():
    assert silhouette(np.zeros((6, 2)), [0, 0, 0, 1, 1, 1]) == 0.0


def test_silhouette_hand_computation():
    x = np.array([[0.0], [1.0], [2.0], [10.0], [11.0], [13.0]])
    labels = [0, 0, 0, 1, 1, 1]
    total = 0.0
    for i in range(6):
        own = [abs(x[i, 0] - x[j, 0]) for j in range(6) if labels[j] == labels[i] and j != i]
        other = [abs(x[i, 0] - x[j, 0]) for j in range(6) if labels[j] != labels[i]]
        a, b = sum(own) / len(own), sum(other) / len(other)
        total += (b - a) / max(a, b)
    assert abs(silhouette(x, labels) - total / 6) < 1e-12


def test_silhouette_singletons_and_errors():
    x = np.array([[0.0, 0.0], [0.1, 0.0], [5.0, 5.0]])
    # the singleton contributes 0
    a = 0.1
    b0, b1 = np.hypot(5, 5), np.hypot(4.9, 5)
    expected = ((b0 - a) / b0 + (b1 - a) / b1) / 3
    assert abs(silhouette(x, [0, 0, 1]) - expected) < 1e-12
    with pytest.raises(ValueError):
        silhouette(x, [0, 0, 0])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10.0), st.floats(0, 2 * np.pi))
def test_silhouette_matches_sklearn_and_is_similarity_invariant(seed, scale, angle):
    from sklearn.metrics import silhouette_score

    rng = np.random.default_rng(seed)
    x = rng.normal(size=(24, 2))
    labels = rng.integers(0, 3, 24)
    labels[:3] = [0, 1, 2]
    s = silhouette(x, labels)
    assert abs(s - silhouette_score(x, labels)) < 1e-10
    rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    assert abs(silhouette(scale * x @ rot.T, labels) - s) < 1e-10
