"""Core numeric types: embedding sets, rotations, and seed plumbing.

Everything downstream works on two immutable containers: `EmbeddingSet`
(N labeled D-dimensional vectors from one encoder's output space) and
`Rotation` (a D x D orthogonal matrix, the alignment under study). All
arithmetic is float64; loaded float32 data is promoted. Instances are
frozen and their arrays are marked read-only, so they are safe to share
across threads.
"""

from __future__ import annotations

import hashlib
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

# A matrix counts as a rotation when ||W^T W - I||_F and ||det(W)| - 1|
# stay below this; producers re-project through the polar factor first.
ROTATION_TOL = 1e-6

_MAX_SEED = 2**64


def derive_seed(seed: int, label: str) -> int:
    """Fan a master seed out to a per-stage seed.

    BLAKE2b over the little-endian master seed and the UTF-8 stage label,
    truncated to 64 bits. Used everywhere a pipeline stage needs its own
    RNG stream, so a single seed reproduces a whole experiment grid.
    """
    if not 0 <= int(seed) < _MAX_SEED:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    h = hashlib.blake2b(digest_size=8)
    h.update(int(seed).to_bytes(8, "little"))
    h.update(b"/")
    h.update(label.encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


def thread_cap() -> int:
    """Worker cap for the opt-in parallel modes (EMBALIGN_THREADS, default 1)."""
    raw = os.environ.get("EMBALIGN_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"EMBALIGN_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"EMBALIGN_THREADS must be >= 1, got {n}")
    return n


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    """Ordered collection of (user_id, optional class label, vector) records.

    vectors: (N, D) float64, all finite, D >= 2.
    user_ids: length-N tuple of non-empty strings.
    class_labels: optional (N,) int64 array of non-negative labels.
    """

    vectors: np.ndarray
    user_ids: tuple[str, ...]
    class_labels: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"vectors must be 2-D (N, D), got shape {v.shape}")
        n, d = v.shape
        if n < 1:
            raise ValueError("an embedding set needs at least one record")
        if d < 2:
            raise ValueError(f"embedding dimension must be >= 2, got {d}")
        if not np.isfinite(v).all():
            raise ValueError("embedding vectors must be finite (no NaN/Inf)")
        ids = tuple(str(u) for u in self.user_ids)
        if len(ids) != n:
            raise ValueError(f"{len(ids)} user ids for {n} vectors")
        if any(not u for u in ids):
            raise ValueError("user ids must be non-empty")
        labels = self.class_labels
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64)
            if labels.shape != (n,):
                raise ValueError(f"class_labels must have shape ({n},), got {labels.shape}")
            if (labels < 0).any():
                raise ValueError("class labels must be non-negative")
            labels = _freeze(labels)
        object.__setattr__(self, "vectors", _freeze(v))
        object.__setattr__(self, "user_ids", ids)
        object.__setattr__(self, "class_labels", labels)

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def has_labels(self) -> bool:
        return self.class_labels is not None

    def label_set(self) -> set[int]:
        if self.class_labels is None:
            return set()
        return set(int(c) for c in np.unique(self.class_labels))

    def with_vectors(self, vectors: np.ndarray) -> "EmbeddingSet":
        """Same records with replaced vectors (labels and order preserved)."""
        return EmbeddingSet(vectors, self.user_ids, self.class_labels)

    def subset(self, indices) -> "EmbeddingSet":
        idx = np.asarray(indices)
        labels = None if self.class_labels is None else self.class_labels[idx]
        return EmbeddingSet(
            self.vectors[idx], tuple(self.user_ids[i] for i in idx), labels
        )

    def subset_users(self, users) -> "EmbeddingSet":
        keep = set(users)
        idx = [i for i, u in enumerate(self.user_ids) if u in keep]
        if not idx:
            raise ValueError("no records match the requested users")
        return self.subset(idx)


def class_centroids(es: EmbeddingSet) -> dict[int, np.ndarray]:
    """Mean vector per class label. Requires labels on every record."""
    if es.class_labels is None:
        raise ValueError("embedding set carries no class labels")
    out: dict[int, np.ndarray] = {}
    for c in np.unique(es.class_labels):
        out[int(c)] = es.vectors[es.class_labels == c].mean(axis=0)
    return out


@dataclass(frozen=True, eq=False)
class Rotation:
    """D x D orthogonal matrix. |det| must be 1 up to ROTATION_TOL.

    Reflections (det = -1) are admitted; callers that need a proper
    rotation check `det` themselves.
    """

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"rotation matrix must be square, got shape {m.shape}")
        if not np.isfinite(m).all():
            raise ValueError("rotation matrix must be finite")
        err = orthogonality_error(m)
        if err > ROTATION_TOL:
            raise ValueError(
                f"matrix is not orthogonal: ||W^T W - I||_F = {err:.3e} > {ROTATION_TOL}"
            )
        det = float(np.linalg.det(m))
        if abs(abs(det) - 1.0) > ROTATION_TOL:
            raise ValueError(f"|det(W)| = {abs(det):.12f} deviates from 1")
        object.__setattr__(self, "matrix", _freeze(m))

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.matrix))

    @property
    def orthogonality_error(self) -> float:
        return orthogonality_error(self.matrix)

    def transpose(self) -> "Rotation":
        """The inverse rotation (transpose equals inverse for orthogonal W)."""
        return Rotation(self.matrix.T)

    @classmethod
    def identity(cls, dim: int) -> "Rotation":
        return cls(np.eye(dim))


def orthogonality_error(m: np.ndarray) -> float:
    d = m.shape[0]
    return float(np.linalg.norm(m.T @ m - np.eye(d)))


def project_to_orthogonal(m: np.ndarray) -> np.ndarray:
    """Nearest orthogonal matrix in Frobenius norm (polar factor U V^T)."""
    u, _, vt = np.linalg.svd(m)
    return u @ vt


def as_rotation(m: np.ndarray) -> Rotation:
    """Wrap a near-orthogonal matrix, re-projecting first if it drifted."""
    m = np.asarray(m, dtype=np.float64)
    if orthogonality_error(m) > ROTATION_TOL:
        m = project_to_orthogonal(m)
    return Rotation(m)


def random_rotation(dim: int, seed: int) -> Rotation:
    """Haar-uniform rotation with det = +1.

    QR of a Gaussian matrix with the R-diagonal sign fix gives a Haar
    draw on the orthogonal group; a reflection is folded away by
    flipping one column, which lands the draw on det = +1.
    """
    if dim < 2:
        raise ValueError(f"rotation dimension must be >= 2, got {dim}")
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((dim, dim))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q = q.copy()
        q[:, 0] = -q[:, 0]
    return Rotation(q)


def apply_alignment(es: EmbeddingSet, rotation: Rotation) -> EmbeddingSet:
    """Project every record through the rotation: row vector e -> e W.

    Labels and record order are preserved.
    """
    if es.dim != rotation.dim:
        raise ValueError(
            f"dimension mismatch: embeddings are {es.dim}-dimensional, "
            f"rotation is {rotation.dim}x{rotation.dim}"
        )
    return es.with_vectors(es.vectors @ rotation.matrix)


def warn_underdetermined(n_points: int, dim: int, context: str) -> bool:
    """Flag fits with fewer constraints than rotational degrees of freedom."""
    if n_points < dim:
        warnings.warn(
            f"{context}: {n_points} points cannot constrain a {dim}-dimensional "
            "rotation (underdetermined fit)",
            stacklevel=3,
        )
        return True
    return False
