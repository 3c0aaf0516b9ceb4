"""Verification and spoofing metrics: cosine trials, EER, FAR thresholds,
spoofing FAR, and classification accuracy."""

from __future__ import annotations

import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .alignment import AlignmentResult
from .core import EmbeddingSet, Rotation, apply_alignment, class_centroids, thread_cap

POOLINGS = ("per-record", "mean-per-user")
DEFAULT_SFAR_LEVELS = ("eer", 1.0, 0.1)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of two non-zero vectors, in [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _normalize_rows(v: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(v, axis=1)
    if (norms == 0).any():
        raise ValueError(f"{what} contains zero vectors; cosine undefined")
    return v / norms[:, None]


def paired_cosines(a: EmbeddingSet, b: EmbeddingSet) -> np.ndarray:
    """Row-wise cosine between two sets paired by position."""
    if a.n != b.n or a.dim != b.dim:
        raise ValueError(
            f"paired cosine needs identically shaped sets, got {a.n}x{a.dim} "
            f"vs {b.n}x{b.dim}"
        )
    an = _normalize_rows(a.vectors, "first set")
    bn = _normalize_rows(b.vectors, "second set")
    return np.clip(np.einsum("ij,ij->i", an, bn), -1.0, 1.0)


@dataclass(frozen=True, eq=False)
class TrialScores:
    """Genuine (same user) and impostor (cross user) cosine scores."""

    genuine: np.ndarray
    impostor: np.ndarray

    def __post_init__(self):
        for name in ("genuine", "impostor"):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if a.ndim != 1:
                raise ValueError(f"{name} scores must be 1-D")
            if not np.isfinite(a).all():
                raise ValueError(f"{name} scores must be finite")
            a.flags.writeable = False
            object.__setattr__(self, name, a)


def _score_matrix(probe: np.ndarray, enroll: np.ndarray) -> np.ndarray:
    """All probe-vs-enroll cosines. The opt-in parallel mode splits probe
    rows across threads (capped by EMBALIGN_THREADS) and reassembles in
    order, so results match the serial path exactly."""
    workers = thread_cap()
    if workers == 1 or probe.shape[0] < 4 * workers:
        return probe @ enroll.T
    chunks = np.array_split(np.arange(probe.shape[0]), workers)
    out = np.empty((probe.shape[0], enroll.shape[0]))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(lambda c: probe[c] @ enroll.T, c) for c in chunks]
        for c, fut in zip(chunks, futures):
            out[c] = fut.result()
    return out


def build_trials(
    e_enroll: EmbeddingSet,
    e_probe: EmbeddingSet,
    pooling: str = "per-record",
) -> TrialScores:
    """Genuine/impostor cosine trials between a probe and an enrollment set.

    With the same object on both sides, each unordered record pair is
    scored once and self-pairs are excluded. Distinct sets score every
    probe-enrollment pair. mean-per-user pooling averages enrollment
    vectors per user before scoring.
    """
    if pooling not in POOLINGS:
        raise ValueError(f"pooling must be one of {POOLINGS}, got {pooling!r}")
    if e_enroll.dim != e_probe.dim:
        raise ValueError(f"dimension mismatch: {e_enroll.dim} vs {e_probe.dim}")
    overlap = set(e_enroll.user_ids) & set(e_probe.user_ids)
    if len(overlap) < 2:
        raise ValueError(
            f"trial construction needs >= 2 overlapping users, found {len(overlap)}"
        )

    probe_users = np.asarray(e_probe.user_ids, dtype=object)
    if pooling == "mean-per-user":
        users = sorted(set(e_enroll.user_ids))
        means = np.stack(
            [
                e_enroll.vectors[np.asarray(e_enroll.user_ids, dtype=object) == u].mean(axis=0)
                for u in users
            ]
        )
        scores = _score_matrix(
            _normalize_rows(e_probe.vectors, "probe set"),
            _normalize_rows(means, "pooled enrollment"),
        )
        same = probe_users[:, None] == np.asarray(users, dtype=object)[None, :]
        genuine = scores[same]
        impostor = scores[~same]
    else:
        enroll_users = np.asarray(e_enroll.user_ids, dtype=object)
        scores = _score_matrix(
            _normalize_rows(e_probe.vectors, "probe set"),
            _normalize_rows(e_enroll.vectors, "enrollment set"),
        )
        same = probe_users[:, None] == enroll_users[None, :]
        if e_probe is e_enroll:
            upper = np.triu(np.ones_like(same, dtype=bool), k=1)
            genuine = scores[same & upper]
            impostor = scores[~same & upper]
        else:
            genuine = scores[same]
            impostor = scores[~same]

    if genuine.size == 0:
        raise ValueError(
            "no genuine trials: every overlapping user needs >= 2 records "
            "(or distinct probe/enrollment records)"
        )
    return TrialScores(np.clip(genuine, -1, 1), np.clip(impostor, -1, 1))


def compute_eer(trials: TrialScores) -> tuple[float, float]:
    """Equal error rate and its threshold.

    Sweeps the sorted union of all scores; at each candidate threshold t,
    FAR = #(impostor >= t) / n_imp and FRR = #(genuine < t) / n_gen. The
    reported point minimizes |FAR - FRR| (ties broken toward the lower
    threshold) and the EER is the midpoint (FAR + FRR) / 2 there.
    """
    gen = trials.genuine
    imp = trials.impostor
    if gen.size == 0 or imp.size == 0:
        raise ValueError("EER needs non-empty genuine and impostor score lists")
    thresholds = np.unique(np.concatenate([gen, imp]))
    gen_sorted = np.sort(gen)
    imp_sorted = np.sort(imp)
    far = (imp.size - np.searchsorted(imp_sorted, thresholds, side="left")) / imp.size
    frr = np.searchsorted(gen_sorted, thresholds, side="left") / gen.size
    idx = int(np.argmin(np.abs(far - frr)))
    return float((far[idx] + frr[idx]) / 2.0), float(thresholds[idx])


def far_threshold(impostor: np.ndarray, x: float) -> float:
    """Smallest threshold with an impostor acceptance rate of at most x%.

    Accepting at the returned threshold admits the floor(x * n / 100)
    highest impostor scores. When that count is zero the empirical
    distribution cannot resolve the rate (needs >= 100/x scores); the
    threshold lands just above the maximum and a `quantile_unresolvable`
    warning is emitted.
    """
    impostor = np.asarray(impostor, dtype=np.float64)
    if impostor.size == 0:
        raise ValueError("impostor score list is empty")
    if not 0 < x <= 100:
        raise ValueError(f"FAR level must be in (0, 100] percent, got {x}")
    n = impostor.size
    admit = int(np.floor(x * n / 100.0))
    if admit >= n:
        return float(impostor.min())
    desc = np.sort(impostor)[::-1]
    if admit == 0:
        warnings.warn(
            f"quantile_unresolvable: a {x}% FAR threshold needs >= {int(np.ceil(100 / x))} "
            f"impostor scores, got {n}",
            stacklevel=2,
        )
        return float(np.nextafter(desc[0], np.inf))
    return float(np.nextafter(desc[admit], np.inf))


def far_resolvable(n_impostor: int, x: float) -> bool:
    return int(np.floor(x * n_impostor / 100.0)) >= 1


def compute_sfar(
    e_target_enroll: EmbeddingSet, e_spoof: EmbeddingSet, tau: float
) -> float:
    """Fraction of spoofed templates accepted at threshold tau.

    Spoof rows are paired to enrollment rows by position; a pair counts
    when its cosine reaches tau.
    """
    cosines = paired_cosines(e_spoof, e_target_enroll)
    return float(np.mean(cosines >= tau))


def classification_accuracy(
    e: EmbeddingSet, e_spoof: EmbeddingSet, centroids: dict[int, np.ndarray]
) -> float:
    """Fraction of records whose spoof lands in the same class as the
    original under a nearest-centroid-by-cosine classifier."""
    if not e.has_labels:
        raise ValueError("classification accuracy needs class labels")
    if e.n != e_spoof.n or e.dim != e_spoof.dim:
        raise ValueError("spoof set must pair with the original set row by row")
    missing = sorted(e.label_set() - set(centroids))
    if missing:
        raise ValueError(f"centroid map is missing classes: {missing}")
    classes = sorted(centroids)
    c = _normalize_rows(np.stack([centroids[k] for k in classes]), "centroids")
    orig = np.argmax(_normalize_rows(e.vectors, "original set") @ c.T, axis=1)
    spoof = np.argmax(_normalize_rows(e_spoof.vectors, "spoof set") @ c.T, axis=1)
    return float(np.mean(orig == spoof))


def _sfar_key(level) -> str:
    if isinstance(level, str):
        return level.lower()
    return format(float(level), "g")


@dataclass(frozen=True, eq=False)
class AttackReport:
    """Per-alignment evaluation results.

    `eer`/`eer_threshold` describe the attacked system's own operating
    point (its genuine/impostor trials); `spoof_eer` is the EER of
    spoof-vs-enrollment trials and tracks alignment quality. sFAR values
    may be None when the requested FAR level was unresolvable on the
    available impostor scores.
    """

    method: str
    eer: float
    eer_threshold: float
    sfar: dict[str, float | None]
    accuracy: float | None = None
    spoof_eer: float | None = None
    underdetermined: bool = False
    oracle: bool = False
    det: float | None = None
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "accuracy": self.accuracy,
            "eer": self.eer,
            "eer_threshold": self.eer_threshold,
            "spoof_eer": self.spoof_eer,
            "sfar": dict(self.sfar),
            "underdetermined": self.underdetermined,
            "oracle": self.oracle,
            "det": self.det,
            "config": self.config,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def from_dict(cls, doc: dict) -> "AttackReport":
        return cls(
            method=doc["method"],
            eer=doc["eer"],
            eer_threshold=doc["eer_threshold"],
            sfar=dict(doc["sfar"]),
            accuracy=doc.get("accuracy"),
            spoof_eer=doc.get("spoof_eer"),
            underdetermined=doc.get("underdetermined", False),
            oracle=doc.get("oracle", False),
            det=doc.get("det"),
            config=doc.get("config", {}),
        )

    @classmethod
    def load(cls, path) -> "AttackReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def evaluate_attack(
    e_target: EmbeddingSet,
    alignment: Rotation | AlignmentResult,
    e_attack_paired_truth: EmbeddingSet | None = None,
    sfar_levels=DEFAULT_SFAR_LEVELS,
    pooling: str = "per-record",
    method: str | None = None,
    config_echo: dict | None = None,
) -> AttackReport:
    """Full spoofing evaluation of one alignment.

    The attacked system's operating thresholds come from its own trials
    over the stolen enrollment set: the EER threshold plus a FAR
    threshold per requested percentage level. The spoof of each template
    is its paired attack-space truth projected by the alignment; sFAR at
    each threshold is the accepted fraction. Accuracy (when labels
    exist) checks nearest-centroid class agreement between spoofs and
    originals. Without paired truth only the system-side numbers are
    reported.
    """
    if isinstance(alignment, AlignmentResult):
        result = alignment
        rotation = alignment.rotation
    else:
        result = None
        rotation = alignment
    if e_target.dim != rotation.dim:
        raise ValueError(
            f"dimension mismatch: embeddings are {e_target.dim}-dimensional, "
            f"rotation is {rotation.dim}x{rotation.dim}"
        )

    trials = build_trials(e_target, e_target, pooling=pooling)
    eer, eer_thr = compute_eer(trials)

    taus: dict[str, float | None] = {}
    for level in sfar_levels:
        key = _sfar_key(level)
        if key == "eer":
            taus[key] = eer_thr
        else:
            x = float(level)
            if far_resolvable(trials.impostor.size, x):
                taus[key] = far_threshold(trials.impostor, x)
            else:
                warnings.warn(
                    f"quantile_unresolvable: sFAR at {x}% downgraded to null "
                    f"({trials.impostor.size} impostor scores, need >= "
                    f"{int(np.ceil(100 / x))})",
                    stacklevel=2,
                )
                taus[key] = None

    sfar: dict[str, float | None] = {k: None for k in taus}
    accuracy = None
    spoof_eer = None
    if e_attack_paired_truth is not None:
        if e_attack_paired_truth.n != e_target.n:
            raise ValueError(
                f"paired truth has {e_attack_paired_truth.n} records for "
                f"{e_target.n} templates"
            )
        spoof = apply_alignment(e_attack_paired_truth, rotation)
        for key, tau in taus.items():
            if tau is not None:
                sfar[key] = compute_sfar(e_target, spoof, tau)
        if e_target.has_labels:
            accuracy = classification_accuracy(e_target, spoof, class_centroids(e_target))
        try:
            spoof_eer = compute_eer(build_trials(e_target, spoof, pooling=pooling))[0]
        except ValueError:
            spoof_eer = None

    return AttackReport(
        method=method or (result.method if result else "unnamed"),
        eer=eer,
        eer_threshold=eer_thr,
        sfar=sfar,
        accuracy=accuracy,
        spoof_eer=spoof_eer,
        underdetermined=result.underdetermined if result else False,
        oracle=result.oracle if result else False,
        det=result.det if result else rotation.det,
        config=dict(config_echo or {}),
    )


def report_table(reports: list[AttackReport]) -> str:
    """Text table in the attack-summary column layout."""
    header = f"{'Alignment':<30}{'Accuracy':>10}{'EER':>9}{'sFAR_EER':>10}{'sFAR_1%':>9}"

    def pct(v) -> str:
        return "-" if v is None else f"{100 * v:.2f}%"

    lines = [header, "-" * len(header)]
    for r in reports:
        eer_col = r.spoof_eer if r.spoof_eer is not None else r.eer
        lines.append(
            f"{r.method:<30}{pct(r.accuracy):>10}{pct(eer_col):>9}"
            f"{pct(r.sfar.get('eer')):>10}{pct(r.sfar.get('1')):>9}"
        )
    return "\n".join(lines)
