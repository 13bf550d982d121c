"""Text-guided similarity, prototype discovery, alignment losses, baselines.

All operations are pure float64 functions of their inputs. Argmax ties break
toward the lowest index everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def softplus(x) -> np.ndarray:
    """log(1 + exp(x)), stable for large |x|."""
    return np.logaddexp(0.0, x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Overflow-safe logistic function (array in, array out)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _as_feature_matrix(value) -> np.ndarray:
    arr = np.asarray(getattr(value, "features", value), dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("region features must form a 2-D matrix")
    return arr


def _unit_rows(matrix: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError(f"{what}: zero feature row")
    return matrix / norms


@dataclass
class SimilarityMatrix:
    """n x (m*n) text-guided similarities, support blocks in supplied order."""

    values: np.ndarray
    n: int
    m: int

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.n, self.m * self.n):
            raise ValueError(
                f"similarity matrix shape {self.values.shape} does not match "
                f"n={self.n}, m={self.m}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("similarity matrix contains non-finite entries")


@dataclass
class DiscoveryHead:
    """Two-layer MLP scoring each similarity row: w1 (h x m*n), b1 (h),
    w2 (h), scalar bias b2 held as a 1-element array."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    sorted_rows: bool = False

    def __post_init__(self) -> None:
        self.w1 = np.asarray(self.w1, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64)
        self.w2 = np.asarray(self.w2, dtype=np.float64)
        self.b2 = np.asarray(self.b2, dtype=np.float64).reshape(1)
        h = self.w1.shape[0]
        if self.w1.ndim != 2 or self.b1.shape != (h,) or self.w2.shape != (h,):
            raise ValueError("inconsistent head parameter shapes")
        for arr in (self.w1, self.b1, self.w2, self.b2):
            if not np.all(np.isfinite(arr)):
                raise ValueError("head parameters must be finite")

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def in_dim(self) -> int:
        return self.w1.shape[1]

    @classmethod
    def initialize(
        cls,
        m: int,
        n: int,
        hidden: int = 128,
        rng: np.random.Generator | None = None,
        sorted_rows: bool = False,
    ) -> "DiscoveryHead":
        """He initialization: N(0, sqrt(2/fan_in)) weights, zero biases."""
        if rng is None:
            rng = np.random.default_rng(0)
        in_dim = m * n
        w1 = rng.standard_normal((hidden, in_dim)) * np.sqrt(2.0 / in_dim)
        w2 = rng.standard_normal(hidden) * np.sqrt(2.0 / hidden)
        return cls(w1, np.zeros(hidden), w2, np.zeros(1), sorted_rows)


@dataclass
class OpenVocabClassifier:
    """Frozen open-vocabulary classifier: unit-normalized text embedding rows."""

    weights: np.ndarray
    concept_ids: list[int]
    row_of: dict[int, int] = field(init=False)

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2 or self.weights.shape[0] != len(self.concept_ids):
            raise ValueError("classifier weights must have one row per concept id")
        norms = np.linalg.norm(self.weights, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("classifier rows must be unit-normalized within 1e-6")
        self.row_of = {cid: i for i, cid in enumerate(self.concept_ids)}
        if len(self.row_of) != len(self.concept_ids):
            raise ValueError("duplicate concept ids in classifier")

    @classmethod
    def from_table(cls, table, concept_ids: list[int]) -> "OpenVocabClassifier":
        rows = np.stack([table.vector(cid) for cid in concept_ids])
        rows = rows / np.linalg.norm(rows, axis=1, keepdims=True)
        return cls(rows, list(concept_ids))


@dataclass
class Prototype:
    """Softmax-pooled region combination: f_p = sum_i p_i f_i."""

    f_p: np.ndarray
    p: np.ndarray
    image_id: str | None = None
    concept_id: int | None = None


def text_guide_weights(w_c: np.ndarray) -> np.ndarray:
    """Guidance profile sqrt(d) * |w_c| / ||w_c||; its L2 norm is sqrt(d)."""
    w_c = np.asarray(w_c, dtype=np.float64)
    norm = np.linalg.norm(w_c)
    if norm == 0.0:
        raise ValueError("text embedding is the zero vector")
    return np.sqrt(w_c.size) * np.abs(w_c) / norm


def text_guided_similarity(f_i: np.ndarray, f_j: np.ndarray, w_bar: np.ndarray) -> float:
    """Weighted inner product of the Hadamard product of unit-normalized features."""
    f_i = np.asarray(f_i, dtype=np.float64)
    f_j = np.asarray(f_j, dtype=np.float64)
    ni, nj = np.linalg.norm(f_i), np.linalg.norm(f_j)
    if ni == 0.0 or nj == 0.0:
        raise ValueError("region feature is the zero vector")
    if f_i.shape != f_j.shape or f_i.shape != np.shape(w_bar):
        raise ValueError("dimension mismatch")
    return float(np.dot(w_bar, (f_i / ni) * (f_j / nj)))


def build_similarity_matrix(query, supports, w_bar: np.ndarray) -> SimilarityMatrix:
    """Pairwise text-guided similarities between query and support proposals.

    Args:
        query: RegionFeatureSet or (n, d) array of query region features.
        supports: list of m RegionFeatureSets or (n, d) arrays.
        w_bar: guidance profile from text_guide_weights.

    Returns:
        SimilarityMatrix with values[i, k*n + j] = s(query_i, support_k_j).
    """
    q = _as_feature_matrix(query)
    mats = [_as_feature_matrix(s) for s in supports]
    if not mats:
        raise ValueError("at least one support image is required")
    n = q.shape[0]
    for s in mats:
        if s.shape != q.shape:
            raise ValueError(f"support shape {s.shape} does not match query {q.shape}")
    qw = _unit_rows(q, "query") * np.asarray(w_bar, dtype=np.float64)
    blocks = [qw @ _unit_rows(s, "support").T for s in mats]
    return SimilarityMatrix(np.concatenate(blocks, axis=1), n=n, m=len(mats))


def head_forward(values: np.ndarray, head: DiscoveryHead):
    """Run the MLP + softmax over similarity rows.

    Returns (net, z1, hidden, logits, p, perms) where net is the matrix
    actually fed to the MLP (block-sorted when head.sorted_rows) and perms
    holds the per-block sort indices (None when unsorted).
    """
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[0]
    if values.ndim != 2 or values.shape[1] != head.in_dim:
        raise ValueError(
            f"similarity rows of width {values.shape[1]} do not match head input "
            f"width {head.in_dim}"
        )
    perms = None
    if head.sorted_rows:
        if head.in_dim % n != 0:
            raise ValueError("row width is not a multiple of the proposal count")
        perms = []
        cols = []
        for k in range(head.in_dim // n):
            block = values[:, k * n : (k + 1) * n]
            idx = np.argsort(-block, axis=1)
            cols.append(np.take_along_axis(block, idx, axis=1))
            perms.append(idx)
        net = np.concatenate(cols, axis=1)
    else:
        net = values
    z1 = net @ head.w1.T + head.b1
    hidden = np.maximum(z1, 0.0)
    logits = hidden @ head.w2 + head.b2[0]
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite prototype logits")
    shifted = logits - logits.max()
    exp = np.exp(shifted)
    p = exp / exp.sum()
    return net, z1, hidden, logits, p, perms


def discover_prototype(
    s_matrix: SimilarityMatrix,
    head: DiscoveryHead,
    query_features,
    image_id: str | None = None,
    concept_id: int | None = None,
) -> Prototype:
    """Prototype via p = softmax(MLP(S rows)), f_p = sum_i p_i f_i.

    The weighted sum uses the raw (unnormalized) query region features.
    """
    features = _as_feature_matrix(query_features)
    if features.shape[0] != s_matrix.n:
        raise ValueError("query features do not match similarity matrix rows")
    _, _, _, _, p, _ = head_forward(s_matrix.values, head)
    return Prototype(f_p=p @ features, p=p, image_id=image_id, concept_id=concept_id)


def region_word_loss(f_p: np.ndarray, classifier: OpenVocabClassifier, concept_id: int) -> float:
    """BCE over vocabulary logits s = W f_p: -log sig(s_c) - sum_{k!=c} log(1 - sig(s_k)),
    evaluated through softplus for stability."""
    row = classifier.row_of.get(concept_id)
    if row is None:
        raise ValueError(f"concept {concept_id} not in classifier")
    s = classifier.weights @ np.asarray(f_p, dtype=np.float64)
    return float(softplus(-s[row]) + softplus(s).sum() - softplus(s[row]))


def image_text_loss(
    image_features: np.ndarray, caption_features: np.ndarray, temperature: float = 10.0
) -> float:
    """In-batch contrastive BCE over cosine logits scaled by a fixed temperature.

    Row a treats caption a as the positive and every other caption in the
    batch as a negative; the result is averaged over rows.
    """
    v = np.atleast_2d(np.asarray(image_features, dtype=np.float64))
    t = np.atleast_2d(np.asarray(caption_features, dtype=np.float64))
    if v.shape != t.shape:
        raise ValueError("image and caption batches must have matching shapes")
    logits = temperature * (_unit_rows(v, "image batch") @ _unit_rows(t, "caption batch").T)
    diag = np.diag(logits)
    b = v.shape[0]
    return float((softplus(-diag).sum() + softplus(logits).sum() - softplus(diag).sum()) / b)


def heuristic_discovery(s_matrix: SimilarityMatrix) -> int:
    """Training-free baseline: per query region take the max similarity within
    each support image, average those maxima over supports, return the argmax."""
    per_support = s_matrix.values.reshape(s_matrix.n, s_matrix.m, s_matrix.n)
    scores = per_support.max(axis=2).mean(axis=1)
    return int(np.argmax(scores))


def baseline_region_word(query_features, w_c: np.ndarray) -> int:
    """Argmax of cosine(f_i, w_c) over query regions."""
    features = _as_feature_matrix(query_features)
    w_c = np.asarray(w_c, dtype=np.float64)
    norm = np.linalg.norm(w_c)
    if norm == 0.0:
        raise ValueError("text embedding is the zero vector")
    scores = _unit_rows(features, "query") @ (w_c / norm)
    return int(np.argmax(scores))


def baseline_max_size(areas: np.ndarray) -> int:
    """Argmax of region areas."""
    areas = np.asarray(areas, dtype=np.float64)
    if areas.ndim != 1 or areas.size == 0:
        raise ValueError("areas must be a non-empty vector")
    return int(np.argmax(areas))
