"""Synthetic two-encoder worlds.

Stands in for the inaccessible pair of encoders: one latent sample per
record is emitted twice, once raw (the attack space) and once through a
hidden rotation plus configurable distortion (the target space). The
hidden rotation and the record pairing are retained so oracles and
evaluations can score any fitted alignment against ground truth.

Latents are hierarchical: class centers, user centers around their
class, records around their user (unit within-user spread; the scale
knobs are ratios of that spread). The `nonlinearity` knob adds a fixed
random low-rank quadratic residual field to the target space, frozen
per seed and normalized to the cloud's own spread, modeling encoder
disagreement beyond any rotation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .alignment import AlignmentResult, _result
from .core import EmbeddingSet, Rotation, derive_seed, random_rotation
from .io import save_embeddings



@dataclass(frozen=True)
class WorldConfig:
    seed: int = 0
    users: int = 256
    records_per_user: int = 10
    dim: int = 32
    classes: int | None = 10
    class_scale: float = 4.0
    user_scale: float = 1.0
    noise_scale: float = 0.3
    nonlinearity: float = 0.0

    def __post_init__(self):
        if self.users < 2:
            raise ValueError(f"users must be >= 2, got {self.users}")
        if self.records_per_user < 2:
            raise ValueError(
                f"records_per_user must be >= 2, got {self.records_per_user}"
            )
        if self.dim < 2:
            raise ValueError(f"dim must be >= 2, got {self.dim}")
        if self.classes is not None and not 1 <= self.classes <= self.users:
            raise ValueError(
                f"classes must be in [1, users], got {self.classes} for {self.users} users"
            )
        for name in ("class_scale", "user_scale", "noise_scale"):
            v = float(getattr(self, name))
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be a finite non-negative real, got {v}")
        if not 0.0 <= self.nonlinearity <= 1.0:
            raise ValueError(f"nonlinearity must be in [0, 1], got {self.nonlinearity}")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "users": self.users,
            "records_per_user": self.records_per_user,
            "dim": self.dim,
            "classes": self.classes,
            "class_scale": self.class_scale,
            "user_scale": self.user_scale,
            "noise_scale": self.noise_scale,
            "nonlinearity": self.nonlinearity,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "WorldConfig":
        return cls(**doc)


@dataclass(frozen=True, eq=False)
class WorldOutput:
    e_attack: EmbeddingSet
    e_target: EmbeddingSet
    hidden_rotation: Rotation
    pairing: np.ndarray  # pairing[i] = target record index of attack record i
    config: WorldConfig = field(default=None)

    def hidden_alignment(self) -> AlignmentResult:
        """The generating rotation wrapped for serialization."""
        return _result("hidden-truth", self.hidden_rotation.matrix)


def _kmeans_anchors(points: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Deterministic coarse k-means centroids (anchors for the residual)."""
    from .gmm import _kmeanspp_centers

    rng = np.random.default_rng(seed)
    centers = _kmeanspp_centers(points, k, rng)
    for _ in range(20):
        sq = (
            np.sum(points**2, axis=1)[:, None]
            + np.sum(centers**2, axis=1)[None, :]
            - 2.0 * points @ centers.T
        )
        labels = np.argmin(sq, axis=1)
        new = np.stack(
            [
                points[labels == j].mean(axis=0) if (labels == j).any() else centers[j]
                for j in range(k)
            ]
        )
        if np.allclose(new, centers):
            break
        centers = new
    return centers


def _residual_field(
    clean_target: np.ndarray,
    user_centers_target: np.ndarray,
    record_user: np.ndarray,
    seed: int,
) -> np.ndarray:
    """Region-level random residual over the cloud.

    Anchor regions come from a coarse k-means over the user centers; each
    region carries a random offset, and every user picks up the
    kernel-weighted blend of offsets evaluated at its own center, shared
    by all of the user's records. The attacked system's own trials barely
    move (both sides of any same-user or nearby-user comparison carry the
    same offset) while the regions themselves scatter in a way no single
    rotation can follow: with more regions than the rotation group has
    freedom to track, most of the distortion is unabsorbable by any
    alignment in scope. The field is centered (a mean offset is a
    translation, invisible to cosine trials and outside any rotation) and
    scaled to the cloud's RMS deviation from its mean, so `nonlinearity`
    reads as a dimensionless distortion-to-spread ratio.
    """
    rng = np.random.default_rng(seed)
    d = clean_target.shape[1]
    n_users = user_centers_target.shape[0]
    cloud = clean_target - clean_target.mean(axis=0)
    cloud_rms = np.sqrt(np.mean(np.sum(cloud * cloud, axis=1)))
    if cloud_rms == 0:
        return np.zeros_like(clean_target)

    k = max(2, min(n_users // 2, 4 * d))
    anchors = _kmeans_anchors(user_centers_target, k, derive_seed(seed, "anchors"))
    sq = (
        np.sum(user_centers_target**2, axis=1)[:, None]
        + np.sum(anchors**2, axis=1)[None, :]
        - 2.0 * user_centers_target @ anchors.T
    )
    bandwidth = float(np.mean(sq.min(axis=1)))
    if bandwidth == 0:
        bandwidth = 1.0
    logits = -sq / bandwidth
    logits -= logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=1, keepdims=True)

    offsets = rng.standard_normal((k, d))
    per_user = weights @ offsets
    psi = per_user[record_user]
    psi = psi - psi.mean(axis=0)
    psi_rms = np.sqrt(np.mean(np.sum(psi * psi, axis=1)))
    if psi_rms == 0:
        return psi
    return psi * (cloud_rms / psi_rms)


def generate_world(cfg: WorldConfig) -> WorldOutput:
    """Deterministic paired two-space sample for one configuration."""
    d = cfg.dim
    n = cfg.users * cfg.records_per_user
    q = random_rotation(d, derive_seed(cfg.seed, "world:rotation"))

    if cfg.classes is not None:
        centers_rng = np.random.default_rng(derive_seed(cfg.seed, "world:classes"))
        class_centers = cfg.class_scale * centers_rng.standard_normal((cfg.classes, d))
        user_class = np.arange(cfg.users) % cfg.classes
    else:
        class_centers = np.zeros((1, d))
        user_class = np.zeros(cfg.users, dtype=int)

    users_rng = np.random.default_rng(derive_seed(cfg.seed, "world:users"))
    user_centers = class_centers[user_class] + cfg.user_scale * users_rng.standard_normal(
        (cfg.users, d)
    )

    records_rng = np.random.default_rng(derive_seed(cfg.seed, "world:records"))
    record_user = np.repeat(np.arange(cfg.users), cfg.records_per_user)
    latents = user_centers[record_user] + records_rng.standard_normal((n, d))

    target = latents @ q.matrix
    if cfg.nonlinearity > 0:
        target = target + cfg.nonlinearity * _residual_field(
            target,
            user_centers @ q.matrix,
            record_user,
            derive_seed(cfg.seed, "world:residual"),
        )
    if cfg.noise_scale > 0:
        noise_rng = np.random.default_rng(derive_seed(cfg.seed, "world:noise"))
        target = target + cfg.noise_scale * noise_rng.standard_normal((n, d))

    user_ids = tuple(f"u{u:04d}" for u in record_user)
    labels = user_class[record_user] if cfg.classes is not None else None
    e_attack = EmbeddingSet(latents, user_ids, labels)
    e_target = EmbeddingSet(target, user_ids, labels)
    return WorldOutput(
        e_attack=e_attack,
        e_target=e_target,
        hidden_rotation=q,
        pairing=np.arange(n),
        config=cfg,
    )


def split_disjoint(es: EmbeddingSet, fractions, seed: int) -> list[tuple[str, ...]]:
    """User-disjoint partition of a set's users.

    Part sizes follow the fractions by largest remainder, so quartering
    376 users yields 94 per part. Deterministic under the seed; every
    part must receive at least one user.
    """
    fractions = [float(f) for f in fractions]
    if any(f <= 0 for f in fractions):
        raise ValueError("fractions must be positive")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    users = sorted(set(es.user_ids))
    n = len(users)
    if n < len(fractions):
        raise ValueError(f"{n} users cannot fill {len(fractions)} parts")

    exact = [f * n for f in fractions]
    sizes = [int(np.floor(e)) for e in exact]
    remainder = n - sum(sizes)
    by_fraction = sorted(range(len(fractions)), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in by_fraction[:remainder]:
        sizes[i] += 1
    if min(sizes) < 1:
        raise ValueError("every part needs at least one user; adjust fractions")

    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    shuffled = [users[i] for i in order]
    parts: list[tuple[str, ...]] = []
    start = 0
    for size in sizes:
        parts.append(tuple(shuffled[start : start + size]))
        start += size
    return parts


def save_world(world: WorldOutput, out_dir, fmt: str = "csv") -> dict:
    """Write both spaces, the hidden rotation, the pairing, and a manifest.

    Returns the manifest document (also written to world.json).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    attack_file = f"e_attack.{fmt}"
    target_file = f"e_target.{fmt}"
    save_embeddings(world.e_attack, out / attack_file, fmt)
    save_embeddings(world.e_target, out / target_file, fmt)
    world.hidden_alignment().save(out / "hidden_rotation.json")
    pairing_doc = {
        "n": int(world.pairing.size),
        "attack_to_target": [int(i) for i in world.pairing],
    }
    (out / "pairing.json").write_text(json.dumps(pairing_doc, indent=2) + "\n")
    manifest = {
        "config": world.config.to_dict() if world.config else None,
        "format": fmt,
        "files": {
            "e_attack": attack_file,
            "e_target": target_file,
            "hidden_rotation": "hidden_rotation.json",
            "pairing": "pairing.json",
        },
    }
    (out / "world.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def load_pairing(path) -> np.ndarray:
    doc = json.loads(Path(path).read_text())
    pairing = np.asarray(doc["attack_to_target"], dtype=np.int64)
    if pairing.size != doc["n"]:
        raise ValueError(f"{path}: pairing length disagrees with declared n")
    if sorted(pairing.tolist()) != list(range(pairing.size)):
        raise ValueError(f"{path}: pairing must be a bijection over record indices")
    return pairing
