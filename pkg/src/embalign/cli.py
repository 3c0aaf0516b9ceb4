"""Command-line pipeline: generate worlds, fit alignments, evaluate attacks.

Exit codes: 0 success, 1 environment/IO failure, 2 usage or validation
error. Every command is deterministic for a fixed ``--seed``: the
world generator consumes the seed directly and each alignment stage
draws its own stream via ``derive_seed(seed, "align:<method>")``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import alignment as align_mod
from . import gmm as gmm_mod
from . import metrics as metrics_mod
from .alignment import (
    CANONICAL_METHODS,
    AlignmentResult,
    FinetuneConfig,
    WassersteinConfig,
)
from .core import EmbeddingSet, derive_seed
from .io import FORMATS, load_embeddings
from .synth import WorldConfig, generate_world, load_pairing, save_world

USAGE_ERROR = 2
IO_ERROR = 1


def _add_world_flags(p: argparse.ArgumentParser, require_defaults: bool) -> None:
    d = WorldConfig()
    get = (lambda v: v) if require_defaults else (lambda v: None)
    p.add_argument("--users", type=int, default=get(d.users))
    p.add_argument("--records-per-user", type=int, default=get(d.records_per_user))
    p.add_argument("--dim", type=int, default=get(d.dim))
    p.add_argument("--classes", type=int, default=get(d.classes))
    p.add_argument("--no-classes", action="store_true", help="generate without class labels")
    p.add_argument("--class-scale", type=float, default=get(d.class_scale))
    p.add_argument("--user-scale", type=float, default=get(d.user_scale))
    p.add_argument("--noise-scale", type=float, default=get(d.noise_scale))
    p.add_argument("--nonlinearity", type=float, default=get(d.nonlinearity))


def _world_config_from(args, spec_world: dict | None, seed: int) -> WorldConfig:
    base = dict(spec_world or {})
    flag_map = {
        "users": args.users,
        "records_per_user": args.records_per_user,
        "dim": args.dim,
        "classes": args.classes,
        "class_scale": args.class_scale,
        "user_scale": args.user_scale,
        "noise_scale": args.noise_scale,
        "nonlinearity": args.nonlinearity,
    }
    for key, value in flag_map.items():
        if value is not None:
            base[key] = value
    if getattr(args, "no_classes", False):
        base["classes"] = None
    base["seed"] = seed
    defaults = WorldConfig().to_dict()
    defaults.update(base)
    return WorldConfig.from_dict(defaults)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="embalign",
        description="Align independently produced embedding spaces and "
        "evaluate how well the aligned embeddings spoof a verification system.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a paired two-encoder world")
    _add_world_flags(p_synth, require_defaults=True)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--out-dir", default=".")
    p_synth.add_argument("--format", choices=FORMATS, default="csv")

    p_align = sub.add_parser("align", help="fit one alignment (attack space -> target space)")
    p_align.add_argument("--method", required=True, choices=CANONICAL_METHODS)
    p_align.add_argument("--attack", required=True, help="attack-space embedding file")
    p_align.add_argument("--target", required=True, help="target-space embedding file")
    p_align.add_argument("--pairing", help="pairing JSON (required for oracle)")
    p_align.add_argument("--seed", type=int, default=0)
    p_align.add_argument("--out", default="rotation.json")
    p_align.add_argument("--proper-rotation", action="store_true",
                         help="force det(W) = +1 on Procrustes solutions")
    p_align.add_argument("--symmetric-min", action="store_true",
                         help="combine the two fine-tune score directions with min instead of max")
    p_align.add_argument("--ws-initial-batch", type=int)
    p_align.add_argument("--ws-growth", type=float)
    p_align.add_argument("--ws-epochs", type=int)
    p_align.add_argument("--ws-stages", type=int)
    p_align.add_argument("--ws-lr", type=float)
    p_align.add_argument("--ot-mode", choices=("exact", "sinkhorn"))
    p_align.add_argument("--ft-iterations", type=int)
    p_align.add_argument("--ft-lr", type=float)
    p_align.add_argument("--ft-components", type=int)

    p_eval = sub.add_parser("eval", help="evaluate a fitted rotation as an attack")
    p_eval.add_argument("--target", required=True, help="stolen target-space enrollment file")
    p_eval.add_argument("--attack-truth", help="paired attack-space truth file")
    p_eval.add_argument("--rotation", required=True, help="alignment JSON")
    p_eval.add_argument("--pairing", help="pairing JSON aligning truth rows to target rows")
    p_eval.add_argument("--out", default="report.json")
    p_eval.add_argument("--sfar-levels", default="eer,1,0.1")
    p_eval.add_argument("--pooling", choices=metrics_mod.POOLINGS, default="per-record")
    p_eval.add_argument("--table", action="store_true")

    p_exp = sub.add_parser("experiment", help="run a method grid on one world")
    p_exp.add_argument("--spec", help="experiment spec JSON")
    p_exp.add_argument("--methods", help="comma list, e.g. identity,wasserstein,oracle")
    _add_world_flags(p_exp, require_defaults=False)
    p_exp.add_argument("--seed", type=int, default=None)
    p_exp.add_argument("--out-dir", default=None)
    p_exp.add_argument("--format", choices=FORMATS, default=None)
    p_exp.add_argument("--sfar-levels", default=None)

    p_gmm = sub.add_parser("gmm-fit", help="fit a diagonal Gaussian mixture to a set")
    p_gmm.add_argument("--input", required=True)
    p_gmm.add_argument("--components", type=int, default=None)
    p_gmm.add_argument("--seed", type=int, default=0)
    p_gmm.add_argument("--max-iters", type=int, default=200)
    p_gmm.add_argument("--out", default="gmm.json")

    return parser


def _parse_sfar_levels(raw: str):
    levels = []
    for part in raw.split(","):
        part = part.strip()
        if not part:
            continue
        levels.append("eer" if part.lower() == "eer" else float(part))
    if not levels:
        raise ValueError("at least one sFAR level is required")
    return tuple(levels)


def _reorder_by_pairing(attack: EmbeddingSet, pairing_path) -> EmbeddingSet:
    pairing = load_pairing(pairing_path)
    if pairing.size != attack.n:
        raise ValueError(
            f"pairing covers {pairing.size} records, attack set has {attack.n}"
        )
    return attack.subset(np.argsort(pairing))


def _run_alignment(method: str, e_attack: EmbeddingSet, e_target: EmbeddingSet,
                   seed: int, *, pairing_path=None, proper_rotation=False,
                   score_mode="max", ws_kwargs=None, ft_kwargs=None) -> AlignmentResult:
    if method == "identity":
        return align_mod.identity_alignment(e_target.dim)
    if method == "procrustes-cluster":
        return align_mod.cluster_center_procrustes(
            e_attack, e_target, proper_rotation=proper_rotation
        )
    if method == "procrustes-cluster+finetune":
        start = align_mod.cluster_center_procrustes(
            e_attack, e_target, proper_rotation=proper_rotation
        )
        cfg = FinetuneConfig(seed=derive_seed(seed, "align:finetune"), **(ft_kwargs or {}))
        result = align_mod.finetune_rotation(
            start.rotation, e_attack, e_target, cfg, score_mode=score_mode
        )
        return AlignmentResult(
            method="procrustes-cluster+finetune",
            rotation=result.rotation,
            det=result.det,
            orthogonality_error=result.orthogonality_error,
            underdetermined=start.underdetermined,
            config=result.config,
            loss_trace=result.loss_trace,
        )
    if method == "wasserstein":
        cfg = WassersteinConfig.fitted_to(
            min(e_attack.n, e_target.n),
            seed=derive_seed(seed, "align:wasserstein"),
            **(ws_kwargs or {}),
        )
        return align_mod.wasserstein_procrustes(e_attack, e_target, cfg)
    if method == "oracle":
        if pairing_path is None:
            raise ValueError("the oracle method needs a --pairing file")
        paired_attack = _reorder_by_pairing(e_attack, pairing_path)
        return align_mod.oracle_procrustes(e_target, paired_attack)
    raise ValueError(f"unknown method {method!r}")


def cmd_synth(args) -> int:
    cfg = _world_config_from(args, None, args.seed)
    world = generate_world(cfg)
    save_world(world, args.out_dir, args.format)
    print(f"world written to {args.out_dir} ({world.e_attack.n} records/side, dim {cfg.dim})")
    return 0


def cmd_align(args) -> int:
    e_attack = load_embeddings(args.attack)
    e_target = load_embeddings(args.target)
    ws_kwargs = {
        k: v
        for k, v in {
            "initial_batch": args.ws_initial_batch,
            "batch_growth_factor": args.ws_growth,
            "epochs_per_stage": args.ws_epochs,
            "stages": args.ws_stages,
            "learning_rate": args.ws_lr,
            "ot_mode": args.ot_mode,
        }.items()
        if v is not None
    }
    ft_kwargs = {
        k: v
        for k, v in {
            "iterations": args.ft_iterations,
            "learning_rate": args.ft_lr,
            "gmm_components": args.ft_components,
        }.items()
        if v is not None
    }
    result = _run_alignment(
        args.method,
        e_attack,
        e_target,
        args.seed,
        pairing_path=args.pairing,
        proper_rotation=args.proper_rotation,
        score_mode="min" if args.symmetric_min else "max",
        ws_kwargs=ws_kwargs,
        ft_kwargs=ft_kwargs,
    )
    result.save(args.out)
    if result.cost_trace:
        fit = f"final_cost={result.cost_trace[-1]:.6g}"
    elif result.loss_trace:
        fit = f"final_loss={result.loss_trace[-1]:.6g}"
    else:
        fit = "closed_form"
    print(
        f"method={result.method} {fit} "
        f"orthogonality_error={result.orthogonality_error:.3e} det={result.det:+.6f}"
    )
    return 0


def cmd_eval(args) -> int:
    e_target = load_embeddings(args.target)
    result = AlignmentResult.load(args.rotation)
    truth = None
    if args.attack_truth:
        truth = load_embeddings(args.attack_truth)
        if args.pairing:
            truth = _reorder_by_pairing(truth, args.pairing)
    report = metrics_mod.evaluate_attack(
        e_target,
        result,
        truth,
        sfar_levels=_parse_sfar_levels(args.sfar_levels),
        pooling=args.pooling,
        config_echo={"sfar_levels": args.sfar_levels, "pooling": args.pooling},
    )
    report.save(args.out)
    if args.table:
        print(metrics_mod.report_table([report]))
    else:
        sfar_eer = report.sfar.get("eer")
        shown = "null" if sfar_eer is None else f"{sfar_eer:.4f}"
        print(f"method={report.method} eer={report.eer:.4f} sfar_eer={shown}")
    return 0


def _ordering_check(reports) -> dict:
    by_method = {r.method: r.sfar.get("eer") for r in reports}
    chain = [m for m in CANONICAL_METHODS if by_method.get(m) is not None]
    comparisons = []
    satisfied = True
    for lo, hi in zip(chain, chain[1:]):
        ok = by_method[lo] <= by_method[hi]
        satisfied = satisfied and ok
        comparisons.append({"weaker": lo, "stronger": hi, "ok": ok})
    return {
        "chain": chain,
        "sfar_eer": {m: by_method[m] for m in chain},
        "comparisons": comparisons,
        "satisfied": satisfied,
    }


def cmd_experiment(args) -> int:
    spec = {}
    if args.spec:
        spec = json.loads(Path(args.spec).read_text())

    seed = args.seed if args.seed is not None else spec.get("seed", 0)
    out_dir = Path(args.out_dir if args.out_dir is not None else spec.get("out_dir", "."))
    fmt = args.format if args.format is not None else spec.get("format", "csv")
    raw_levels = (
        args.sfar_levels if args.sfar_levels is not None else spec.get("sfar_levels", "eer,1,0.1")
    )
    if isinstance(raw_levels, (list, tuple)):
        raw_levels = ",".join(str(v) for v in raw_levels)
    sfar_levels = _parse_sfar_levels(raw_levels)

    if args.methods is not None:
        methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    else:
        methods = list(spec.get("methods", CANONICAL_METHODS))
    if not methods:
        raise ValueError("the experiment needs a non-empty method list")
    unknown = [m for m in methods if m not in CANONICAL_METHODS]
    if unknown:
        raise ValueError(f"unknown methods: {unknown}; valid: {list(CANONICAL_METHODS)}")

    inputs = spec.get("inputs")
    if inputs:
        e_attack = load_embeddings(inputs["attack"])
        e_target = load_embeddings(inputs["target"])
        pairing_path = inputs.get("pairing")
        world_echo = {"inputs": sorted(inputs)}
    else:
        cfg = _world_config_from(args, spec.get("world"), seed)
        world = generate_world(cfg)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_world(world, out_dir, fmt)
        e_attack, e_target = world.e_attack, world.e_target
        pairing_path = out_dir / "pairing.json"
        world_echo = {"world": cfg.to_dict()}

    out_dir.mkdir(parents=True, exist_ok=True)
    effective = {
        "seed": seed,
        "methods": methods,
        "sfar_levels": list(raw_levels.split(",")),
        "format": fmt,
        **world_echo,
    }

    reports = []
    for method in methods:
        try:
            result = _run_alignment(
                method,
                e_attack,
                e_target,
                seed,
                pairing_path=pairing_path,
                ws_kwargs=spec.get("wasserstein", {}),
                ft_kwargs=spec.get("finetune", {}),
            )
            truth = (
                _reorder_by_pairing(e_attack, pairing_path) if pairing_path else e_attack
            )
            report = metrics_mod.evaluate_attack(
                e_target,
                result,
                truth,
                sfar_levels=sfar_levels,
                method=method,
                config_echo={"seed": seed, "method": method, **result.config},
            )
        except Exception as exc:
            partial = {
                "config": effective,
                "reports": [r.to_dict() for r in reports],
                "failed_stage": method,
                "error": str(exc),
            }
            (out_dir / "experiment.json").write_text(json.dumps(partial, indent=2) + "\n")
            raise ValueError(f"stage {method!r} failed: {exc}") from exc
        result.save(out_dir / f"rotation_{method}.json")
        report.save(out_dir / f"report_{method}.json")
        reports.append(report)

    ordering = _ordering_check(reports)
    combined = {
        "config": effective,
        "reports": [r.to_dict() for r in reports],
        "ordering": ordering,
    }
    (out_dir / "experiment.json").write_text(json.dumps(combined, indent=2) + "\n")
    print(metrics_mod.report_table(reports))
    print(f"ordering check ({' <= '.join(ordering['chain'])}): "
          f"{'satisfied' if ordering['satisfied'] else 'VIOLATED'}")
    return 0


def cmd_gmm_fit(args) -> int:
    es = load_embeddings(args.input)
    k = gmm_mod.resolve_component_count(es, args.components)
    model = gmm_mod.fit_gmm(es, k, args.seed, max_iters=args.max_iters)
    Path(args.out).write_text(json.dumps(gmm_mod.gmm_to_dict(model), indent=2) + "\n")
    print(f"fitted K={k} mixture on {es.n} records (dim {es.dim}) -> {args.out}")
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "align": cmd_align,
    "eval": cmd_eval,
    "experiment": cmd_experiment,
    "gmm-fit": cmd_gmm_fit,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return IO_ERROR


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
