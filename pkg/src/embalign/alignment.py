"""Rotation-fitting algorithms.

All fitters share one convention: the returned rotation maps the FIRST
argument's space onto the SECOND's, i.e. it minimizes some distance
between ``X W`` and ``Y``. Four families are provided:

* `orthogonal_procrustes` -- closed-form supervised fit on row-paired
  sets, W = U V^T from the SVD of X^T Y.
* `cluster_center_procrustes` -- the same fit on class-centroid pairs,
  for sets that share only a class vocabulary.
* `finetune_rotation` -- gradient refinement of an initial rotation
  under a determinant penalty, an orthogonality penalty, and the negated
  symmetric mixture score.
* `wasserstein_procrustes` -- unsupervised stochastic fit matching
  growing random batches by optimal transport, with an SVD projection
  back to the orthogonal matrices after every step.

`oracle_procrustes` is the evaluation upper bound: the supervised fit on
a ground-truth record pairing no real attacker has.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gmm as gmm_mod
from . import transport
from .core import (
    EmbeddingSet,
    Rotation,
    as_rotation,
    class_centroids,
    derive_seed,
    orthogonality_error,
    project_to_orthogonal,
    warn_underdetermined,
)

logger = logging.getLogger(__name__)

# Canonical pipeline order, weakest expected attack first.
CANONICAL_METHODS = (
    "identity",
    "procrustes-cluster",
    "procrustes-cluster+finetune",
    "wasserstein",
    "oracle",
)

_MAX_BACKOFFS = 10
# Matching strategy inside Wasserstein batches: exact assignment up to
# this size, entropic transport with argmax rounding above it.
EXACT_BATCH_LIMIT = 512


@dataclass(frozen=True)
class WassersteinConfig:
    """Batch schedule and optimizer knobs for the unsupervised fit.

    The batch size is multiplied by `batch_growth_factor` at every stage;
    the final stage's batch must still fit inside the smaller input set.
    `ot_mode` picks the batch matcher: "exact" uses exact assignment up
    to EXACT_BATCH_LIMIT and entropic transport above, "sinkhorn" always
    uses entropic transport.
    """

    initial_batch: int = 128
    batch_growth_factor: float = 2.0
    epochs_per_stage: int = 50
    stages: int = 5
    learning_rate: float = 5e-3
    seed: int = 0
    ot_mode: str = "exact"

    def __post_init__(self):
        if self.initial_batch < 1:
            raise ValueError(f"initial_batch must be >= 1, got {self.initial_batch}")
        if self.batch_growth_factor <= 1.0:
            raise ValueError(
                f"batch_growth_factor must be > 1, got {self.batch_growth_factor}"
            )
        if self.epochs_per_stage < 1 or self.stages < 1:
            raise ValueError("epochs_per_stage and stages must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.ot_mode not in ("exact", "sinkhorn"):
            raise ValueError(f"ot_mode must be 'exact' or 'sinkhorn', got {self.ot_mode!r}")

    def batch_sizes(self) -> list[int]:
        return [
            int(round(self.initial_batch * self.batch_growth_factor**s))
            for s in range(self.stages)
        ]

    def validate_against(self, n_min: int) -> None:
        final = self.initial_batch * self.batch_growth_factor ** (self.stages - 1)
        if final > n_min:
            raise ValueError(
                f"batch schedule peaks at {final:.0f} but the smaller set has "
                f"only {n_min} records"
            )

    @classmethod
    def fitted_to(cls, n_min: int, seed: int = 0, **overrides) -> "WassersteinConfig":
        """Defaults shrunk so the schedule fits sets of `n_min` records."""
        initial = overrides.pop("initial_batch", min(128, max(8, n_min // 4)))
        growth = overrides.pop("batch_growth_factor", 2.0)
        stages = overrides.pop("stages", None)
        if stages is None:
            stages = 1
            while stages < 5 and initial * growth**stages <= n_min:
                stages += 1
        cfg = cls(
            initial_batch=initial,
            batch_growth_factor=growth,
            stages=stages,
            seed=seed,
            **overrides,
        )
        cfg.validate_against(n_min)
        return cfg


@dataclass(frozen=True)
class FinetuneConfig:
    """Gradient-refinement knobs. `gmm_components` of None picks the
    labeled/unlabeled default (10 or 8, clamped to the data)."""

    iterations: int = 150
    learning_rate: float = 2e-3
    gmm_components: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.gmm_components is not None and self.gmm_components < 1:
            raise ValueError(f"gmm_components must be >= 1, got {self.gmm_components}")


@dataclass(frozen=True, eq=False)
class AlignmentResult:
    """A fitted rotation plus the report metadata every method shares."""

    method: str
    rotation: Rotation
    det: float
    orthogonality_error: float
    underdetermined: bool = False
    oracle: bool = False
    config: dict = field(default_factory=dict)
    loss_trace: tuple[float, ...] = ()
    cost_trace: tuple[float, ...] = ()

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "dim": self.rotation.dim,
            "matrix": [[float(v) for v in row] for row in self.rotation.matrix],
            "det": self.det,
            "orthogonality_error": self.orthogonality_error,
            "underdetermined": self.underdetermined,
            "oracle": self.oracle,
            "config": self.config,
            "loss_trace": [float(v) for v in self.loss_trace],
            "cost_trace": [float(v) for v in self.cost_trace],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def from_dict(cls, doc: dict) -> "AlignmentResult":
        matrix = np.asarray(doc["matrix"], dtype=np.float64)
        if matrix.shape != (doc["dim"], doc["dim"]):
            raise ValueError("alignment document matrix does not match its dim")
        return cls(
            method=doc["method"],
            rotation=Rotation(matrix),
            det=float(doc["det"]),
            orthogonality_error=float(doc["orthogonality_error"]),
            underdetermined=bool(doc.get("underdetermined", False)),
            oracle=bool(doc.get("oracle", False)),
            config=doc.get("config", {}),
            loss_trace=tuple(doc.get("loss_trace", ())),
            cost_trace=tuple(doc.get("cost_trace", ())),
        )

    @classmethod
    def load(cls, path) -> "AlignmentResult":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _result(method, matrix, *, underdetermined=False, oracle=False, config=None,
            loss_trace=(), cost_trace=()) -> AlignmentResult:
    rotation = as_rotation(matrix)
    return AlignmentResult(
        method=method,
        rotation=rotation,
        det=rotation.det,
        orthogonality_error=rotation.orthogonality_error,
        underdetermined=underdetermined,
        oracle=oracle,
        config=dict(config or {}),
        loss_trace=tuple(loss_trace),
        cost_trace=tuple(cost_trace),
    )


def identity_alignment(dim: int) -> AlignmentResult:
    return _result("identity", np.eye(dim))


def _procrustes_matrix(x: np.ndarray, y: np.ndarray, proper_rotation: bool) -> np.ndarray:
    u, _, vt = np.linalg.svd(x.T @ y)
    w = u @ vt
    if proper_rotation and np.linalg.det(w) < 0:
        u = u.copy()
        u[:, -1] = -u[:, -1]
        w = u @ vt
    return w


def orthogonal_procrustes(
    x: EmbeddingSet, y: EmbeddingSet, proper_rotation: bool = False
) -> AlignmentResult:
    """Closed-form minimizer of ||X W - Y||_F over orthogonal W.

    Rows of the two sets must correspond one-to-one. The unconstrained
    orthogonal solution may be a reflection; `proper_rotation` flips the
    weakest singular direction to force det = +1.
    """
    if x.n != y.n or x.dim != y.dim:
        raise ValueError(
            f"paired sets must share shape: got {x.n}x{x.dim} vs {y.n}x{y.dim}"
        )
    under = warn_underdetermined(x.n, x.dim, "orthogonal_procrustes")
    w = _procrustes_matrix(x.vectors, y.vectors, proper_rotation)
    return _result(
        "procrustes",
        w,
        underdetermined=under,
        config={"proper_rotation": proper_rotation},
    )


def cluster_center_procrustes(
    x: EmbeddingSet,
    y: EmbeddingSet,
    correspondence: dict[int, int] | None = None,
    proper_rotation: bool = False,
) -> AlignmentResult:
    """Procrustes on per-class centroid pairs.

    `correspondence` maps x-classes to y-classes and must be a bijection
    covering both label sets; None means the identity map over shared
    labels. With fewer classes than dimensions the fit is flagged
    underdetermined: K centroids cannot pin down a D-dimensional
    rotation when K < D.
    """
    if x.dim != y.dim:
        raise ValueError(f"dimension mismatch: {x.dim} vs {y.dim}")
    if not x.has_labels or not y.has_labels:
        missing = [name for name, es in (("first", x), ("second", y)) if not es.has_labels]
        raise ValueError(f"cluster matching needs class labels; missing on: {', '.join(missing)}")
    x_classes = x.label_set()
    y_classes = y.label_set()
    if correspondence is None:
        correspondence = {c: c for c in sorted(x_classes)}
    src = sorted(correspondence)
    dst = [correspondence[c] for c in src]
    absent_x = sorted(set(src) - x_classes) + sorted(x_classes - set(src))
    absent_y = sorted(set(dst) - y_classes) + sorted(y_classes - set(dst))
    if len(set(dst)) != len(dst):
        raise ValueError("class correspondence must be a bijection")
    if absent_x or absent_y:
        raise ValueError(
            "class correspondence does not cover both sets "
            f"(first side mismatch: {absent_x}, second side mismatch: {absent_y})"
        )
    if len(src) < 2:
        raise ValueError("cluster matching needs at least 2 classes")

    cx = class_centroids(x)
    cy = class_centroids(y)
    mx = np.stack([cx[c] for c in src])
    my = np.stack([cy[correspondence[c]] for c in src])
    under = warn_underdetermined(len(src), x.dim, "cluster_center_procrustes")
    w = _procrustes_matrix(mx, my, proper_rotation)
    return _result(
        "procrustes-cluster",
        w,
        underdetermined=under,
        config={"classes": len(src), "proper_rotation": proper_rotation},
    )


def oracle_procrustes(
    e_paired_target: EmbeddingSet, e_attack: EmbeddingSet
) -> AlignmentResult:
    """Upper-bound fit from the ground-truth record pairing.

    Fits the rotation carrying the attack-side truth onto the paired
    stolen templates (attack space -> target space), which is exactly
    the hidden map the synthetic world applies. Tagged oracle=true in
    every report.
    """
    if e_paired_target.n != e_attack.n or e_paired_target.dim != e_attack.dim:
        raise ValueError(
            "oracle pairing needs sets of identical shape: got "
            f"{e_attack.n}x{e_attack.dim} vs {e_paired_target.n}x{e_paired_target.dim}"
        )
    under = warn_underdetermined(e_attack.n, e_attack.dim, "oracle_procrustes")
    w = _procrustes_matrix(e_attack.vectors, e_paired_target.vectors, False)
    return _result("oracle", w, underdetermined=under, oracle=True)


# --- fine-tuning -----------------------------------------------------------


def det_loss_and_grad(w: np.ndarray) -> tuple[float, np.ndarray]:
    """|log det W| and its (sub)gradient sign(log det W) W^-T.

    Raises when det(W) <= 0: the log is undefined there, which signals a
    skipped projection step upstream.
    """
    det = float(np.linalg.det(w))
    if det <= 0:
        raise ValueError(f"det(W) = {det:.3e} <= 0; rotation iterate left the det > 0 region")
    logdet = math.log(det)
    sign = float(np.sign(logdet))
    grad = sign * np.linalg.inv(w).T
    return abs(logdet), grad


def orthogonality_loss_and_grad(
    w: np.ndarray, u: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean squared residual ||u_col - W^T W u_col||^2 over batch columns.

    `u` holds the batch as columns (D x N). Zero with zero gradient at
    any exactly orthogonal W.
    """
    n = u.shape[1]
    a = u - w.T @ (w @ u)
    loss = float(np.sum(a * a)) / n
    grad = -2.0 * (w @ (u @ a.T + a @ u.T)) / n
    return loss, grad


def finetune_rotation(
    w0: Rotation,
    e_src: EmbeddingSet,
    e_dst: EmbeddingSet,
    cfg: FinetuneConfig,
    score_mode: str = "max",
) -> AlignmentResult:
    """Refine a rotation by descending the three-part alignment loss.

    total(W) = |log det W| + mean ||u - W^T W u||^2 - symmetric score,

    where u runs over the source embeddings and the symmetric score is
    the better of score(src W under dst mixture) and score(dst W^T under
    src mixture), each mixture fitted once up front and frozen. Plain
    gradient descent with halving backoff (a step that cannot decrease
    the loss after 10 halvings is skipped), so the trace never increases.
    The final iterate is projected back onto the orthogonal matrices.
    """
    if e_src.dim != e_dst.dim or w0.dim != e_src.dim:
        raise ValueError(
            f"dimension mismatch: rotation {w0.dim}, source {e_src.dim}, "
            f"destination {e_dst.dim}"
        )
    k = cfg.gmm_components
    if k is None:
        k = min(
            gmm_mod.resolve_component_count(e_src),
            gmm_mod.resolve_component_count(e_dst),
        )
    n_min = min(e_src.n, e_dst.n)
    if k > n_min // 10:
        raise ValueError(
            f"gmm_components = {k} exceeds min(N)/10 = {n_min // 10}; "
            "mixtures would be unfittable"
        )
    gmm_src = gmm_mod.fit_gmm(e_src, k, derive_seed(cfg.seed, "finetune:gmm-src"))
    gmm_dst = gmm_mod.fit_gmm(e_dst, k, derive_seed(cfg.seed, "finetune:gmm-dst"))

    x_src = e_src.vectors
    x_dst = e_dst.vectors
    u_cols = x_src.T  # batch as columns for the orthogonality penalty

    def loss_and_grad(w: np.ndarray, need_grad: bool = True):
        det_l, det_g = det_loss_and_grad(w)
        orth_l, orth_g = orthogonality_loss_and_grad(w, u_cols)
        fwd, fwd_g = gmm_mod.matrix_score_and_grad(
            x_src, w, gmm_dst, need_grad=need_grad
        )
        bwd, bwd_g = gmm_mod.matrix_score_and_grad(
            x_dst, w, gmm_src, transposed=True, need_grad=need_grad
        )
        use_fwd = fwd >= bwd if score_mode == "max" else fwd <= bwd
        score = fwd if use_fwd else bwd
        total = det_l + orth_l - score
        if not need_grad:
            return total, None
        score_g = fwd_g if use_fwd else bwd_g
        return total, det_g + orth_g - score_g

    w = np.array(w0.matrix)
    loss, grad = loss_and_grad(w)
    trace = [loss]
    for _ in range(cfg.iterations):
        lr = cfg.learning_rate
        accepted = False
        for _ in range(_MAX_BACKOFFS + 1):
            candidate = w - lr * grad
            try:
                new_loss, new_grad = loss_and_grad(candidate)
            except ValueError:
                # Step left the det > 0 region; halve and retry.
                lr *= 0.5
                continue
            if new_loss <= loss:
                w, loss, grad = candidate, new_loss, new_grad
                accepted = True
                break
            lr *= 0.5
        trace.append(loss)
        if not accepted:
            # No descent direction at the smallest step; converged.
            break

    return _result(
        "finetune",
        project_to_orthogonal(w),
        config={
            "iterations": cfg.iterations,
            "learning_rate": cfg.learning_rate,
            "gmm_components": k,
            "seed": cfg.seed,
            "score_mode": score_mode,
        },
        loss_trace=trace,
    )


# --- Wasserstein Procrustes -------------------------------------------------


def _match_batch(xb: np.ndarray, yb: np.ndarray, ot_mode: str) -> np.ndarray:
    """Matched target rows for a batch: yb reordered by the OT plan."""
    cost = transport.squared_distances(xb, yb)
    if ot_mode == "exact" and xb.shape[0] <= EXACT_BATCH_LIMIT:
        perm = transport.exact_assignment(cost)
        return yb[perm]
    coupling = transport.sinkhorn(cost, tol=1e-3, max_iters=500)
    return yb[np.argmax(coupling.entries, axis=1)]


def _full_cost(x: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    """Mean per-record transport cost over the full sets under w."""
    cost = transport.squared_distances(x @ w, y)
    n, m = cost.shape
    if n == m and n <= transport.MAX_ASSIGNMENT_SIZE:
        perm = transport.exact_assignment(cost)
        return transport.assignment_cost(cost, perm) / n
    return transport.sinkhorn(cost, tol=1e-4, max_iters=500).cost


def wasserstein_procrustes(
    x: EmbeddingSet,
    y: EmbeddingSet,
    cfg: WassersteinConfig,
    init: Rotation | None = None,
) -> AlignmentResult:
    """Unsupervised rotation fit by stochastic transport matching.

    Per stage and epoch: draw same-size batches from each set, match
    them by optimal transport on squared-Euclidean costs (after the
    current rotation is applied to the x batch), take one gradient step
    on the mean matched residual ||X_b W - P Y_b||^2 / b, and project W
    back onto the orthogonal matrices by SVD. Batches grow by the
    configured factor each stage. No ordering, pairing, or label
    assumptions are made about the inputs.

    The returned trace holds the full-set transport cost at the start
    and after every stage.
    """
    if x.dim != y.dim:
        raise ValueError(f"dimension mismatch: {x.dim} vs {y.dim}")
    cfg.validate_against(min(x.n, y.n))
    if init is not None and init.dim != x.dim:
        raise ValueError(f"init rotation is {init.dim}-dimensional, data is {x.dim}")

    rng = np.random.default_rng(derive_seed(cfg.seed, "wasserstein:batches"))
    xv, yv = x.vectors, y.vectors
    w = np.array(init.matrix) if init is not None else np.eye(x.dim)

    cost_trace = [_full_cost(xv, yv, w)]
    for batch in cfg.batch_sizes():
        for _ in range(cfg.epochs_per_stage):
            ix = rng.choice(x.n, size=batch, replace=False)
            iy = rng.choice(y.n, size=batch, replace=False)
            xb = xv[ix]
            matched = _match_batch(xb @ w, yv[iy], cfg.ot_mode)
            grad = 2.0 * xb.T @ (xb @ w - matched) / batch
            w = project_to_orthogonal(w - cfg.learning_rate * grad)
        cost_trace.append(_full_cost(xv, yv, w))

    return _result(
        "wasserstein",
        w,
        config={
            "initial_batch": cfg.initial_batch,
            "batch_growth_factor": cfg.batch_growth_factor,
            "epochs_per_stage": cfg.epochs_per_stage,
            "stages": cfg.stages,
            "learning_rate": cfg.learning_rate,
            "seed": cfg.seed,
            "ot_mode": cfg.ot_mode,
            "init": "custom" if init is not None else "identity",
        },
        cost_trace=cost_trace,
    )
