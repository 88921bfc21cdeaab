"""Style-code extraction and K-means clustering of the unlabeled target domain.

The style encoder is deliberately simple: eight fixed image moments
(per-channel means and standard deviations, mean luminance-gradient
magnitude, and a luminance skewness proxy), standardized by statistics
fitted once on the target corpus and frozen afterwards.  Appearance shifts
between sub-domains move these moments far apart, which is all the
downstream clustering and fusion machinery needs.

Both classes follow the fit/transform/predict estimator convention so they
compose with standard pipeline tooling.
"""

from __future__ import annotations

import numpy as np

STYLE_DIM = 8


class ClusterError(ValueError):
    pass


class NotFittedError(RuntimeError):
    pass


def raw_style_features(image: np.ndarray) -> np.ndarray:
    """Unstandardized 8-vector of appearance moments for one (3, H, W) image."""
    img = np.asarray(image, dtype=np.float64)
    means = img.mean(axis=(1, 2))
    stds = img.std(axis=(1, 2))
    lum = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    gy, gx = np.gradient(lum)
    grad_mag = float(np.sqrt(gx**2 + gy**2).mean())
    mu, sigma = lum.mean(), lum.std()
    skew = float(((lum - mu) ** 3).mean() / sigma**3) if sigma > 1e-8 else 0.0
    return np.concatenate([means, stds, [grad_mag, skew]])


class StyleFeatureExtractor:
    """Maps images to standardized style codes.

    ``fit`` computes per-feature mean/std over a corpus (the compound target
    set); ``transform`` standardizes with those frozen statistics, including
    for open-domain images seen later.
    """

    def __init__(self):
        self.feature_mean_ = None
        self.feature_std_ = None

    def get_params(self, deep: bool = True) -> dict:
        return {}

    def set_params(self, **params) -> "StyleFeatureExtractor":
        return self

    def fit(self, images: np.ndarray) -> "StyleFeatureExtractor":
        raw = np.stack([raw_style_features(im) for im in images])
        self.feature_mean_ = raw.mean(axis=0)
        std = raw.std(axis=0)
        # features constant over the corpus standardize to exactly zero
        self.feature_std_ = np.where(std > 1e-9, std, 1.0)
        return self

    def transform(self, images: np.ndarray) -> np.ndarray:
        if self.feature_mean_ is None:
            raise NotFittedError("StyleFeatureExtractor.transform before fit")
        raw = np.stack([raw_style_features(im) for im in images])
        codes = (raw - self.feature_mean_) / self.feature_std_
        if not np.all(np.isfinite(codes)):
            raise ClusterError("non-finite style code")
        return codes

    def fit_transform(self, images: np.ndarray) -> np.ndarray:
        return self.fit(images).transform(images)

    def state_arrays(self) -> dict:
        if self.feature_mean_ is None:
            raise NotFittedError("extractor has no fitted statistics to export")
        return {"feature_mean": self.feature_mean_, "feature_std": self.feature_std_}

    def load_state_arrays(self, arrays: dict) -> None:
        self.feature_mean_ = np.asarray(arrays["feature_mean"], dtype=np.float64)
        self.feature_std_ = np.asarray(arrays["feature_std"], dtype=np.float64)


def assign(code: np.ndarray, centroids: np.ndarray) -> int:
    """Index of the nearest centroid in Euclidean distance; ties go to the
    lowest index."""
    d2 = np.sum((centroids - code) ** 2, axis=1)
    return int(np.argmin(d2))


class KMeans:
    """Lloyd's algorithm with k-means++ seeding.

    Inertia is asserted non-increasing at every iteration.  An empty cluster
    is repaired by reseeding its centroid to the point currently farthest
    from its own assigned centroid.
    """

    def __init__(self, n_clusters: int, seed: int = 0, max_iter: int = 300, tol: float = 1e-6):
        self.n_clusters = n_clusters
        self.seed = seed
        self.max_iter = max_iter
        self.tol = tol
        self.centroids_ = None
        self.inertia_ = None
        self.n_iter_ = None
        self.labels_ = None

    def get_params(self, deep: bool = True) -> dict:
        return {
            "n_clusters": self.n_clusters,
            "seed": self.seed,
            "max_iter": self.max_iter,
            "tol": self.tol,
        }

    def set_params(self, **params) -> "KMeans":
        for k, v in params.items():
            if not hasattr(self, k):
                raise ClusterError(f"unknown parameter {k!r}")
            setattr(self, k, v)
        return self

    def _plus_plus_init(self, x: np.ndarray, rng) -> np.ndarray:
        n = len(x)
        centroids = [x[rng.integers(n)]]
        for _ in range(1, self.n_clusters):
            d2 = np.min(
                np.sum((x[:, None, :] - np.stack(centroids)[None]) ** 2, axis=2), axis=1
            )
            total = d2.sum()
            if total <= 0:
                idx = rng.integers(n)
            else:
                idx = rng.choice(n, p=d2 / total)
            centroids.append(x[idx])
        return np.stack(centroids)

    def fit(self, x: np.ndarray) -> "KMeans":
        x = np.asarray(x, dtype=np.float64)
        if len(x) < self.n_clusters:
            raise ClusterError(
                f"need at least {self.n_clusters} codes, got {len(x)}"
            )
        rng = np.random.default_rng(self.seed)
        centroids = self._plus_plus_init(x, rng)

        prev_inertia = np.inf
        labels = None
        for it in range(1, self.max_iter + 1):
            d2 = np.sum((x[:, None, :] - centroids[None]) ** 2, axis=2)
            labels = np.argmin(d2, axis=1)
            inertia = float(d2[np.arange(len(x)), labels].sum())
            assert inertia <= prev_inertia + 1e-9 * max(1.0, abs(prev_inertia)), (
                f"inertia increased: {prev_inertia} -> {inertia}"
            )
            prev_inertia = inertia

            new_centroids = centroids.copy()
            empties = []
            for k in range(self.n_clusters):
                members = x[labels == k]
                if len(members) == 0:
                    empties.append(k)
                else:
                    new_centroids[k] = members.mean(axis=0)
            if empties:
                own_d2 = np.sum((x - new_centroids[labels]) ** 2, axis=1)
                order = np.argsort(-own_d2)
                for j, k in enumerate(empties):
                    new_centroids[k] = x[order[j]]

            shift = float(np.max(np.sqrt(np.sum((new_centroids - centroids) ** 2, axis=1))))
            centroids = new_centroids
            if shift < self.tol:
                break

        d2 = np.sum((x[:, None, :] - centroids[None]) ** 2, axis=2)
        self.labels_ = np.argmin(d2, axis=1)
        self.inertia_ = float(d2[np.arange(len(x)), self.labels_].sum())
        self.centroids_ = centroids
        self.n_iter_ = it
        return self

    def predict(self, x: np.ndarray) -> np.ndarray:
        if self.centroids_ is None:
            raise NotFittedError("KMeans.predict before fit")
        x = np.asarray(x, dtype=np.float64)
        d2 = np.sum((x[:, None, :] - self.centroids_[None]) ** 2, axis=2)
        return np.argmin(d2, axis=1)


def cluster_report(assignments, provenance) -> dict:
    """Purity and per-cluster domain counts against sealed provenance."""
    assignments = np.asarray(assignments)
    if len(assignments) != len(provenance):
        raise ClusterError("assignments and provenance length mismatch")
    counts: dict[int, dict[str, int]] = {}
    for a, p in zip(assignments, provenance):
        counts.setdefault(int(a), {}).setdefault(p, 0)
        counts[int(a)][p] += 1
    majority = sum(max(c.values()) for c in counts.values())
    return {
        "purity": majority / len(assignments),
        "counts": counts,
        "total": int(len(assignments)),
    }
