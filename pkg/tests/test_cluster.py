"""Clustering tests with brute-force oracles for Lloyd's algorithm and assignment."""

import itertools

import numpy as np
import pytest

from metadapt import synthdata as sd
from metadapt.cluster import (
    ClusterError,
    KMeans,
    NotFittedError,
    StyleFeatureExtractor,
    assign,
    cluster_report,
    raw_style_features,
)


# -- style features -----------------------------------------------------------


def test_constant_image_raw_features():
    img = np.full((3, 32, 32), 0.5)
    f = raw_style_features(img)
    assert np.allclose(f[:3], 0.5)
    assert np.all(f[3:] == 0.0)  # stds, gradient, skew all exactly zero
    assert np.all(np.isfinite(f))


def test_identical_images_identical_codes():
    imgs = np.stack([sd.gen_scene(3, 0, 1).image] * 2)
    ext = StyleFeatureExtractor().fit(np.stack([sd.gen_scene(3, i, 1).image for i in range(10)]))
    codes = ext.transform(imgs)
    assert np.array_equal(codes[0], codes[1])


def test_transform_before_fit_raises():
    with pytest.raises(NotFittedError):
        StyleFeatureExtractor().transform(np.zeros((1, 3, 32, 32)))


def test_styles_separate_in_code_space():
    # gamma-shifted copies vs blue-cast copies of the same scenes must split
    # by > 2 corpus standard deviations in at least one coordinate
    scenes = [sd.gen_scene(17, i, 1) for i in range(40)]
    gamma, blue, noise = sd.default_compound_specs()
    g_imgs = np.stack([sd.apply_style(s, gamma, seed=i).image for i, s in enumerate(scenes)])
    b_imgs = np.stack([sd.apply_style(s, blue, seed=i).image for i, s in enumerate(scenes)])
    n_imgs = np.stack([sd.apply_style(s, noise, seed=i).image for i, s in enumerate(scenes)])
    # standardization is fitted on the full compound corpus, as in deployment
    ext = StyleFeatureExtractor().fit(np.concatenate([g_imgs, b_imgs, n_imgs]))
    cg = ext.transform(g_imgs)
    cb = ext.transform(b_imgs)
    # codes are already in corpus-std units
    gap = np.abs(cg.mean(axis=0) - cb.mean(axis=0))
    assert gap.max() > 2.0


def test_extractor_state_roundtrip():
    corpus = np.stack([sd.gen_scene(19, i, 1).image for i in range(12)])
    ext = StyleFeatureExtractor().fit(corpus)
    clone = StyleFeatureExtractor()
    clone.load_state_arrays(ext.state_arrays())
    probe = np.stack([sd.gen_scene(19, 99, 1).image])
    assert np.array_equal(ext.transform(probe), clone.transform(probe))


# -- kmeans ---------------------------------------------------------------------


def _best_two_partition_inertia(points):
    """Exhaustive optimum over all 2-partitions (points <= 12)."""
    best = np.inf
    n = len(points)
    for mask_bits in range(1, 2 ** (n - 1)):  # fix point 0 in part A to kill symmetry
        mask = np.array([(mask_bits >> i) & 1 for i in range(n)], dtype=bool)
        mask = np.concatenate([[False], mask[: n - 1]])
        a, b = points[~mask], points[mask]
        if len(a) == 0 or len(b) == 0:
            continue
        cost = ((a - a.mean(axis=0)) ** 2).sum() + ((b - b.mean(axis=0)) ** 2).sum()
        best = min(best, cost)
    return best


def test_kmeans_single_cluster_is_mean():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(20, 3))
    km = KMeans(1, seed=0).fit(x)
    assert np.allclose(km.centroids_[0], x.mean(axis=0), atol=1e-12)


def test_kmeans_two_blobs_match_exhaustive_partition():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        a = rng.normal(0.0, 0.1, size=(6, 2))
        b = rng.normal(0.0, 0.1, size=(6, 2)) + 10.0
        x = np.concatenate([a, b])
        km = KMeans(2, seed=seed).fit(x)
        assert abs(km.inertia_ - _best_two_partition_inertia(x)) < 1e-9
        labels = km.labels_
        assert len(set(labels[:6])) == 1 and len(set(labels[6:])) == 1
        assert labels[0] != labels[6]


def test_kmeans_duplicates_weight_the_mean():
    x = np.array([[0.0], [0.0], [0.0], [3.0]])
    km = KMeans(1, seed=0).fit(x)
    assert np.allclose(km.centroids_[0], 0.75)


def test_kmeans_rejects_too_few_points():
    with pytest.raises(ClusterError, match="at least"):
        KMeans(5, seed=0).fit(np.zeros((3, 2)))


def test_kmeans_fit_assign_stability():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(60, 4))
    km = KMeans(3, seed=1).fit(x)
    assert np.array_equal(km.predict(x), km.labels_)


def test_kmeans_no_duplicate_centroids_on_spread_data():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(50, 2)) * 3
    km = KMeans(4, seed=2).fit(x)
    for i, j in itertools.combinations(range(4), 2):
        assert not np.allclose(km.centroids_[i], km.centroids_[j])


def test_kmeans_empty_cluster_repair():
    # two far duplicated points and K=3 forces an empty cluster at some point
    x = np.array([[0.0, 0.0]] * 5 + [[10.0, 10.0]] * 5 + [[20.0, 0.0]])
    km = KMeans(3, seed=0).fit(x)
    assert len(np.unique(km.predict(x))) == 3


def test_assign_matches_brute_force_scan():
    rng = np.random.default_rng(6)
    centroids = rng.normal(size=(5, 8))
    for _ in range(200):
        c = rng.normal(size=8)
        d = [float(np.sum((c - mu) ** 2)) for mu in centroids]
        best = min(range(5), key=lambda k: (d[k], k))
        assert assign(c, centroids) == best


def test_assign_tie_breaks_low_index():
    centroids = np.array([[1.0, 0.0], [-1.0, 0.0], [0.5, 0.5]])
    assert assign(np.array([0.0, 0.0]), centroids[:2]) == 0
    assert assign(centroids[2], centroids) == 2


def test_kmeans_get_set_params():
    km = KMeans(4, seed=7)
    assert km.get_params()["n_clusters"] == 4
    km.set_params(seed=9)
    assert km.seed == 9
    with pytest.raises(ClusterError):
        km.set_params(bogus=1)


# -- purity ------------------------------------------------------------------------


def test_cluster_report_purity():
    assignments = [0, 0, 0, 1, 1, 2]
    provenance = ["a", "a", "b", "b", "b", "c"]
    rep = cluster_report(assignments, provenance)
    assert rep["purity"] == pytest.approx(5 / 6)
    assert rep["counts"][0] == {"a": 2, "b": 1}


def test_default_benchmark_purity():
    # the acceptance suite repeats this over three seeds; one seed here
    bundle = sd.make_dataset(4, 120, 4, seed=101)
    ext = StyleFeatureExtractor().fit(bundle.target.images)
    codes = ext.transform(bundle.target.images)
    km = KMeans(4, seed=101).fit(codes)
    rep = cluster_report(km.labels_, bundle.eval_only["target"].provenance)
    assert rep["purity"] >= 0.9
