"""Object features and detection-tracklet matching.

A detection or tracklet is described by an appearance embedding and an
encoded 3D position; both halves are L2-normalized and concatenated into
a unit-norm fused feature. Similarity blends the two channels with a
weight alpha. Hard one-to-one matching is used at inference; a
Sinkhorn-normalized soft assignment with a dustbin row/column serves as
the differentiable surrogate for the association loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np
from scipy.optimize import linear_sum_assignment

KIND_APPEARANCE = "appearance"
KIND_THREE_D = "three_d"
KIND_FUSED = "fused"


class ShapeMismatch(Exception):
    """Operand dimensions are inconsistent."""


class ZeroVector(Exception):
    """A vector that must be normalized has (near-)zero norm."""


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    kind: str

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise ShapeMismatch(f"feature must be a vector, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("feature entries must be finite")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if self.kind not in (KIND_APPEARANCE, KIND_THREE_D, KIND_FUSED):
            raise ValueError(f"unknown feature kind {self.kind!r}")

    @property
    def dim(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class EncoderWeights:
    """Affine map from a 3D position to a D-dimensional feature."""

    weight: np.ndarray  # (D, 3)
    bias: np.ndarray  # (D,)
    provenance: str = "loaded"

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2 or w.shape[1] != 3:
            raise ShapeMismatch(f"encoder weight must be (D, 3), got {w.shape}")
        if b.shape != (w.shape[0],):
            raise ShapeMismatch(f"encoder bias shape {b.shape} does not match weight {w.shape}")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def dim(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def identity(cls, dim: int) -> "EncoderWeights":
        if dim < 3:
            raise ShapeMismatch(f"identity encoder needs dim >= 3, got {dim}")
        w = np.zeros((dim, 3))
        w[:3, :3] = np.eye(3)
        return cls(w, np.zeros(dim), provenance="identity-test")


@dataclass(frozen=True)
class GNNConfig:
    """Cross-frame aggregation depth and per-layer affine maps (None = identity)."""

    num_layers: int = 1
    mlps: tuple[tuple[np.ndarray, np.ndarray] | None, ...] | None = None

    def __post_init__(self):
        if self.num_layers < 0:
            raise ValueError(f"num_layers must be >= 0, got {self.num_layers}")
        if self.mlps is not None and len(self.mlps) != self.num_layers:
            raise ValueError(
                f"{len(self.mlps)} MLP layers given for {self.num_layers} GNN layers"
            )

    def layer(self, i: int):
        return None if self.mlps is None else self.mlps[i]


@dataclass(frozen=True)
class SimilarityConfig:
    alpha: float = 0.4
    appearance_threshold: float = 0.6
    three_d_mode: str = "learned-cosine"  # or "geometric-kernel"
    kernel_tau: float = 5.0

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.kernel_tau <= 0:
            raise ValueError(f"kernel_tau must be positive, got {self.kernel_tau}")
        if self.three_d_mode not in ("learned-cosine", "geometric-kernel"):
            raise ValueError(f"unknown three_d_mode {self.three_d_mode!r}")


def encode_3d(position: np.ndarray, weights: EncoderWeights) -> FeatureVector:
    """Affine 3D feature f = W o + b."""
    o = np.asarray(position, dtype=np.float64)
    if o.shape != (3,):
        raise ShapeMismatch(f"position must be a 3-vector, got shape {o.shape}")
    return FeatureVector(weights.weight @ o + weights.bias, KIND_THREE_D)


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n < 1e-12:
        raise ZeroVector("cannot normalize a zero vector")
    return v / n


def fuse(app: FeatureVector, three_d: FeatureVector) -> FeatureVector:
    """Normalize both halves, concatenate appearance-first, renormalize."""
    if app.dim != three_d.dim:
        raise ShapeMismatch(f"appearance dim {app.dim} != 3D dim {three_d.dim}")
    cat = np.concatenate([_unit(app.values), _unit(three_d.values)])
    return FeatureVector(cat / np.linalg.norm(cat), KIND_FUSED)


def _cosine_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Pairwise cosine; zero vectors get similarity 0."""
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    An = A / np.where(na < 1e-12, 1.0, na)[:, None]
    Bn = B / np.where(nb < 1e-12, 1.0, nb)[:, None]
    S = An @ Bn.T
    S[na < 1e-12, :] = 0.0
    S[:, nb < 1e-12] = 0.0
    return S


def gnn_aggregate(
    current: list[FeatureVector],
    previous: list[FeatureVector],
    cfg: GNNConfig = GNNConfig(),
) -> list[FeatureVector]:
    """Cross-frame message passing on fused features.

    Per layer, each current feature receives a cosine-weighted sum of the
    previous frame's features, rescaled to the receiver's norm, then an
    optional affine map. With zero layers (or an empty previous frame and
    identity maps) the input comes back unchanged. Previous-frame features
    are held fixed across layers.
    """
    if not current:
        return []
    dim = current[0].dim
    for f in list(current) + list(previous):
        if f.dim != dim:
            raise ShapeMismatch(f"feature dim {f.dim} != {dim}")
    cur = np.array([f.values for f in current])
    prev = np.array([f.values for f in previous]).reshape(len(previous), dim)
    for layer in range(cfg.num_layers):
        if len(previous):
            W = _cosine_matrix(cur, prev)
            msg = W @ prev
            mnorm = np.linalg.norm(msg, axis=1)
            fnorm = np.linalg.norm(cur, axis=1)
            scale = np.where(mnorm < 1e-12, 0.0, fnorm / np.where(mnorm < 1e-12, 1.0, mnorm))
            cur = cur + scale[:, None] * msg
        mlp = cfg.layer(layer)
        if mlp is not None:
            Wm, bm = mlp
            if Wm.shape != (dim, dim) or bm.shape != (dim,):
                raise ShapeMismatch(f"MLP layer shapes {Wm.shape}, {bm.shape} do not match dim {dim}")
            cur = cur @ Wm.T + bm
    return [FeatureVector(row, KIND_FUSED) for row in cur]


def appearance_similarity(
    det_features: list[FeatureVector], track_features: list[FeatureVector]
) -> np.ndarray:
    """Cosine similarity of the appearance halves of fused features."""
    if not det_features or not track_features:
        return np.zeros((len(det_features), len(track_features)))
    half = det_features[0].dim // 2
    D = np.array([f.values[:half] for f in det_features])
    T = np.array([f.values[:half] for f in track_features])
    return _cosine_matrix(D, T)


def three_d_similarity(
    det_features: list[FeatureVector],
    det_positions: list[np.ndarray | None],
    track_features: list[FeatureVector],
    track_positions: list[np.ndarray | None],
    cfg: SimilarityConfig,
) -> np.ndarray:
    """Cosine of the encoded-3D halves, or a distance kernel on positions.

    Pairs with a missing position in geometric-kernel mode score 0.
    """
    n, m = len(det_features), len(track_features)
    if n == 0 or m == 0:
        return np.zeros((n, m))
    if cfg.three_d_mode == "learned-cosine":
        half = det_features[0].dim // 2
        D = np.array([f.values[half:] for f in det_features])
        T = np.array([f.values[half:] for f in track_features])
        return _cosine_matrix(D, T)
    S = np.zeros((n, m))
    for i, dp in enumerate(det_positions):
        if dp is None:
            continue
        for j, tp in enumerate(track_positions):
            if tp is None:
                continue
            S[i, j] = np.exp(-np.linalg.norm(np.asarray(dp) - np.asarray(tp)) / cfg.kernel_tau)
    return S


def similarity_matrix(
    det_features: list[FeatureVector],
    det_positions: list[np.ndarray | None],
    track_features: list[FeatureVector],
    track_positions: list[np.ndarray | None],
    cfg: SimilarityConfig,
) -> np.ndarray:
    """S = (1 - alpha) * appearance + alpha * 3D, rows are detections."""
    s_app = appearance_similarity(det_features, track_features)
    s_3d = three_d_similarity(det_features, det_positions, track_features, track_positions, cfg)
    return (1.0 - cfg.alpha) * s_app + cfg.alpha * s_3d


@dataclass(frozen=True)
class AssignmentResult:
    matches: tuple[tuple[int, int], ...]
    unmatched_rows: tuple[int, ...]
    unmatched_cols: tuple[int, ...]


def _canonicalize_ties(S: np.ndarray, rows: np.ndarray, cols: np.ndarray):
    """Resolve exactly-tied 2x2 swaps toward lexicographic (row, col) order."""
    order = np.argsort(rows)
    rows, cols = rows[order], cols[order]
    changed = True
    while changed:
        changed = False
        for a in range(len(rows)):
            for b in range(a + 1, len(rows)):
                i1, j1, i2, j2 = rows[a], cols[a], rows[b], cols[b]
                if j1 > j2 and S[i1, j1] + S[i2, j2] == S[i1, j2] + S[i2, j1]:
                    cols[a], cols[b] = j2, j1
                    changed = True
    return rows, cols


def solve_assignment(S: np.ndarray, gate: float = -np.inf) -> AssignmentResult:
    """Maximum-total-similarity one-to-one matching with post-gating.

    Matched pairs whose similarity falls below the gate are un-matched
    afterward. Exact ties between optima are broken toward lexicographic
    (row, column) order.
    """
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2:
        raise ShapeMismatch(f"similarity matrix must be 2D, got shape {S.shape}")
    n, m = S.shape
    if n == 0 or m == 0:
        return AssignmentResult((), tuple(range(n)), tuple(range(m)))
    if not np.all(np.isfinite(S)):
        raise ValueError("similarity matrix must be finite")
    rows, cols = linear_sum_assignment(-S)
    rows, cols = _canonicalize_ties(S, rows, cols)
    matches = [(int(i), int(j)) for i, j in zip(rows, cols) if S[i, j] >= gate]
    matched_rows = {i for i, _ in matches}
    matched_cols = {j for _, j in matches}
    return AssignmentResult(
        tuple(sorted(matches)),
        tuple(i for i in range(n) if i not in matched_rows),
        tuple(j for j in range(m) if j not in matched_cols),
    )


def brute_force_assignment(S: np.ndarray) -> float:
    """Best total similarity by enumerating injections (oracle-sized inputs)."""
    S = np.asarray(S, dtype=np.float64)
    n, m = S.shape
    if n == 0 or m == 0:
        return 0.0
    best = -np.inf
    if n <= m:
        for perm in permutations(range(m), n):
            best = max(best, float(S[np.arange(n), perm].sum()))
    else:
        for perm in permutations(range(n), m):
            best = max(best, float(S[perm, np.arange(m)].sum()))
    return best


def sinkhorn_soft_assignment(
    S: np.ndarray,
    temperature: float,
    iterations: int,
    dustbin_score: float = 0.0,
) -> np.ndarray:
    """Doubly-stochastic soft matching with a dustbin row and column.

    Returns an (n+1) x (m+1) matrix: exp(S / temperature) padded with the
    dustbin score, row-normalized once, then alternately column- and
    row-normalized for the given number of iterations. Real rows and real
    columns (each including its dustbin entry) converge to unit sums.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if iterations < 0:
        raise ValueError(f"iterations must be >= 0, got {iterations}")
    S = np.asarray(S, dtype=np.float64)
    n, m = S.shape
    aug = np.full((n + 1, m + 1), float(dustbin_score))
    aug[:n, :m] = S
    aug -= aug.max()
    K = np.exp(aug / temperature)
    K[n, m] = 0.0

    def row_norm(M):
        M[:n] /= M[:n].sum(axis=1, keepdims=True)

    def col_norm(M):
        M[:, :m] /= M[:, :m].sum(axis=0, keepdims=True)

    row_norm(K)
    for _ in range(iterations):
        col_norm(K)
        row_norm(K)
    return K
