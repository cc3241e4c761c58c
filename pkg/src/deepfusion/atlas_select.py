"""Atlas ranking and sampling by normalized mutual information or deep feature distance."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import feature_net as fn
from .tensor_core import ShapeError

DEFAULT_BINS = 64
RANK_STRATEGIES = ("top_df", "top_nmi")
SAMPLE_STRATEGIES = ("random_nmi", "top_df", "top_nmi")


@dataclass
class SimilarityRanking:
    entries: list[tuple[int, float]]
    ascending: bool
    strategy: str

    @property
    def indices(self) -> list[int]:
        return [i for i, _ in self.entries]


def _pixels(x) -> np.ndarray:
    return x.pixels if isinstance(x, fn.Image) else np.asarray(x)


def _bin(x: np.ndarray, bins: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi <= lo:
        return np.zeros(x.shape, dtype=np.int64), True
    idx = np.floor((x - lo) / (hi - lo) * bins).astype(np.int64)
    return np.minimum(idx, bins - 1), False


def _entropy(counts: np.ndarray) -> float:
    # sorted so the sum, and hence nmi(a, b) == nmi(b, a), is order-independent
    p = np.sort(counts[counts > 0]) / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(a, b, bins: int = DEFAULT_BINS) -> float:
    """(H(A) + H(B)) / H(A, B) from a joint histogram of min-max scaled intensities."""
    a, b = _pixels(a), _pixels(b)
    if a.shape != b.shape:
        raise ShapeError(f"images differ in shape: {a.shape} vs {b.shape}")
    if bins < 2:
        raise ValueError("need at least 2 bins")
    ia, const_a = _bin(a, bins)
    ib, const_b = _bin(b, bins)
    if const_a or const_b:
        return 2.0 if (const_a and const_b) else 1.0
    joint = np.bincount((ia * bins + ib).ravel(), minlength=bins * bins).reshape(bins, bins)
    h_a = _entropy(joint.sum(axis=1))
    h_b = _entropy(joint.sum(axis=0))
    h_ab = _entropy(joint.ravel())
    return (h_a + h_b) / h_ab


def deep_distance(f_target, f_atlas) -> float:
    """Squared Frobenius distance between two whole-image feature maps."""
    ft = f_target.tensor if isinstance(f_target, fn.FeatureMap) else np.asarray(f_target)
    fa = f_atlas.tensor if isinstance(f_atlas, fn.FeatureMap) else np.asarray(f_atlas)
    if ft.shape != fa.shape:
        raise ShapeError(f"feature maps differ in shape: {ft.shape} vs {fa.shape}")
    diff = ft.astype(np.float64) - fa.astype(np.float64)
    return float((diff * diff).sum())


def _atlas_image(a):
    return a.image if hasattr(a, "image") else a


def scores(target, atlases, strategy: str, params=None, bins: int = DEFAULT_BINS) -> np.ndarray:
    if strategy in ("top_nmi", "random_nmi"):
        return np.array([nmi(target, _atlas_image(a), bins) for a in atlases])
    if strategy == "top_df":
        if params is None:
            raise ValueError("top_df needs feature net parameters")
        f_target = fn.extract(params, target)
        return np.array([deep_distance(f_target, fn.extract(params, _atlas_image(a))) for a in atlases])
    raise ValueError(f"unknown strategy {strategy!r}")


def rank(target, atlases, params=None, strategy: str = "top_df", k: int | None = None,
         bins: int = DEFAULT_BINS) -> SimilarityRanking:
    """Order atlases by similarity to ``target`` and keep the first ``k``.

    ``top_df`` sorts deep distances ascending, ``top_nmi`` sorts NMI
    descending; ties go to the lower atlas index.
    """
    if not atlases:
        raise ShapeError("atlas set is empty")
    if strategy not in RANK_STRATEGIES:
        raise ValueError(f"unknown ranking strategy {strategy!r}; expected one of {RANK_STRATEGIES}")
    k = len(atlases) if k is None else k
    if not 1 <= k <= len(atlases):
        raise ValueError(f"k={k} outside 1..{len(atlases)}")
    s = scores(target, atlases, strategy, params, bins)
    ascending = strategy == "top_df"
    order = sorted(range(len(s)), key=lambda i: (s[i] if ascending else -s[i], i))
    return SimilarityRanking([(i, float(s[i])) for i in order[:k]], ascending, strategy)


def sample_training_atlases(target, atlases, k0: int, seed=None, strategy: str = "random_nmi",
                            params=None, bins: int = DEFAULT_BINS) -> list[int]:
    """Pick ``k0`` distinct atlas indices for one training batch.

    ``random_nmi`` draws without replacement, each draw with probability
    proportional to NMI against the target among the atlases still left.
    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    n = len(atlases)
    if not 1 <= k0 <= n:
        raise ValueError(f"cannot sample K_0={k0} atlases from {n}")
    if strategy in ("top_df", "top_nmi"):
        return rank(target, atlases, params, strategy, k0, bins).indices
    if strategy != "random_nmi":
        raise ValueError(f"unknown sampling strategy {strategy!r}; expected one of {SAMPLE_STRATEGIES}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    w = scores(target, atlases, "random_nmi", bins=bins)
    remaining = list(range(n))
    chosen = []
    for _ in range(k0):
        p = w[remaining] / w[remaining].sum()
        j = int(rng.choice(len(remaining), p=p))
        chosen.append(remaining.pop(j))
    return chosen
