"""Command-line entry point.

Subcommands: synth (planted data), split (openness split), train, eval,
oracle (non-learned solver), gradcheck (finite-difference audit), diag
(theory diagnostics). Every run is a pure function of its config file,
flags, and input files; outputs are written atomically.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import CHECKPOINT_SCHEMA_VERSION, __version__
from ._io import atomic_write_text, canonical_json, float_repr

logger = logging.getLogger("openviewer")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class ConfigError(ValueError):
    """Bad config file contents."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def version_info() -> str:
    return f"openviewer {__version__} (checkpoint-schema {CHECKPOINT_SCHEMA_VERSION})"


def _dataclass_from_dict(cls, data: dict, where: str):
    """Build a dataclass from a dict, rejecting unknown keys, recursing
    into nested dataclass fields."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config keys in '{where}': {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        ftype = fields[name].type
        nested = _NESTED_CONFIGS.get((cls.__name__, name))
        if nested is not None and isinstance(value, dict):
            kwargs[name] = _dataclass_from_dict(nested, value, f"{where}.{name}")
        elif name == "dims" and isinstance(value, list):
            kwargs[name] = tuple(value)
        elif name == "ratios" and isinstance(value, list):
            kwargs[name] = tuple(value)
        elif name == "fpr_targets" and isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return data


def _section(config: dict, name: str) -> dict:
    section = config.get(name, {})
    if not isinstance(section, dict):
        raise ConfigError(f"config section '{name}' must be an object")
    return section


def _write_matrix_csv(path, mat) -> None:
    lines = [",".join(float_repr(x) for x in row) for row in np.atleast_2d(mat)]
    atomic_write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def _cmd_synth(args, config):
    from .synthgen import SynthSpec, generate

    spec_data = _load_config_file(args.spec) if args.spec else _section(config, "synth")
    spec = _dataclass_from_dict(SynthSpec, spec_data, "synth")
    if args.seed is not None:
        spec.seed = args.seed
    dataset, planted = generate(spec)

    out = Path(args.out)
    view_files = []
    for v, mat in enumerate(dataset.views):
        name = f"view_{v}.csv"
        _write_matrix_csv(out / name, mat)
        view_files.append(name)
    atomic_write_text(out / "labels.csv", "\n".join(str(c) for c in dataset.labels) + "\n")
    manifest = {"views": view_files, "labels": "labels.csv", "name": f"synth-{spec.seed}"}
    atomic_write_text(out / "manifest.json", canonical_json(manifest))

    _write_matrix_csv(out / "planted_z.csv", planted.z)
    truth = {"z": "planted_z.csv", "d": [], "e": [], "noise_columns": []}
    for v in range(dataset.n_views):
        d_name, e_name = f"planted_d_{v}.csv", f"planted_e_{v}.csv"
        _write_matrix_csv(out / d_name, planted.d[v])
        _write_matrix_csv(out / e_name, planted.e[v])
        truth["d"].append(d_name)
        truth["e"].append(e_name)
        truth["noise_columns"].append([int(c) for c in planted.noise_columns[v]])
    atomic_write_text(out / "planted.json", canonical_json(truth))
    logger.info("wrote synthetic dataset (%d samples, %d views) to %s",
                dataset.n_samples, dataset.n_views, out)
    return EXIT_OK


def _cmd_split(args, config):
    from .dataset import load, openness_split

    section = _section(config, "split")
    openness = args.openness if args.openness is not None else section.get("openness", 0.1)
    ratios = tuple(section.get("ratios", (0.1, 0.1, 0.8)))
    if args.ratios:
        parts = [float(x) for x in args.ratios.split(",")]
        if len(parts) != 3:
            raise ConfigError("--ratios needs three comma-separated numbers")
        ratios = tuple(parts)
    seed = args.seed if args.seed is not None else section.get("seed", 0)
    dataset = load(args.manifest)
    split = openness_split(dataset, openness, ratios, seed)
    out = Path(args.out)
    path = out / "split.json" if out.suffix == "" else out
    atomic_write_text(path, split.to_json())
    logger.info(
        "split: %d known / %d unknown classes, openness %.4f (requested %.4f)",
        len(split.known_classes), len(split.unknown_classes),
        split.openness_achieved, split.openness_requested,
    )
    return EXIT_OK


def _train_config(config: dict, seed):
    from .trainer import TrainConfig

    cfg = _dataclass_from_dict(TrainConfig, _section(config, "train"), "train")
    if seed is not None:
        cfg.seed = seed
    return cfg


def _cmd_train(args, config):
    from .dataset import OpennessSplit, load
    from .trainer import save_checkpoint, train

    cfg = _train_config(config, args.seed)
    dataset = load(args.manifest)
    split = OpennessSplit.from_json(Path(args.split).read_text())
    params, centers, log = train(dataset, split, cfg)
    out = Path(args.out)
    save_checkpoint(params, centers, cfg, out / "checkpoint.json")
    log.checkpoint_path = str(out / "checkpoint.json")
    atomic_write_text(out / "train_log.csv", log.to_csv())
    weights = params.fusion_weights_snapshot
    atomic_write_text(
        out / "fusion_weights.json",
        canonical_json({"weights": [float(w) for w in weights]}),
    )
    logger.info("trained %d epochs; checkpoint at %s", cfg.epochs, out / "checkpoint.json")
    return EXIT_OK


def _cmd_eval(args, config):
    from .dataset import OpennessSplit, load
    from .evaluation import EvalConfig, ccr_at_fpr, oscr_curve, score_test_set
    from .trainer import load_checkpoint

    eval_cfg = _dataclass_from_dict(EvalConfig, _section(config, "eval"), "eval")
    params, centers, train_cfg = load_checkpoint(args.checkpoint)
    dataset = load(args.manifest)
    split = OpennessSplit.from_json(Path(args.split).read_text())
    preds = score_test_set(
        params, centers, dataset, split,
        config=eval_cfg, normalize=train_cfg.get("normalize", True),
    )
    curve = oscr_curve(preds)
    out = Path(args.out)

    lines = ["threshold,ccr,fpr"]
    lines += [
        f"{float_repr(t)},{float_repr(c)},{float_repr(f)}" for t, c, f in curve.points
    ]
    atomic_write_text(out / "oscr_curve.csv", "\n".join(lines) + "\n")

    summary = {
        f"ccr_at_fpr_{t:g}": ccr_at_fpr(curve, t) for t in eval_cfg.fpr_targets
    }
    known_mask = [not p.is_unknown_truth for p in preds]
    summary["known_accuracy"] = float(
        np.mean([p.predicted == p.true_label for p in preds if not p.is_unknown_truth])
    ) if any(known_mask) else 0.0
    summary["n_test"] = len(preds)
    atomic_write_text(out / "summary.json", canonical_json(summary))

    from .dataset import zscore_normalize
    from .dataset import Batch
    from .unfold_net import forward

    work = dataset
    if train_cfg.get("normalize", True):
        work, _ = zscore_normalize(dataset, split.train_idx)
    rows = np.asarray(split.test_idx, dtype=np.intp)
    batch = Batch(
        views=[v[rows] for v in work.views],
        labels=work.labels[rows],
        is_pseudo=np.zeros(rows.size, dtype=bool),
    )
    fused = forward(batch, params, inference=True).z_fused.value
    _write_matrix_csv(out / "fused.csv", fused)
    _write_matrix_csv(out / "similarity.csv", fused @ fused.T)
    logger.info("eval summary: %s", summary)
    return EXIT_OK


def _cmd_oracle(args, config):
    from .admm_oracle import AdmmConfig, solve
    from .dataset import load

    cfg = _dataclass_from_dict(AdmmConfig, _section(config, "oracle"), "oracle")
    if args.seed is not None:
        cfg.seed = args.seed
    dataset = load(args.manifest)
    state = solve(dataset.views, cfg, code_dim=dataset.class_count)
    out = Path(args.out)
    trace_lines = ["iteration,objective"]
    trace_lines += [f"{i},{float_repr(v)}" for i, v in enumerate(state.objective_trace)]
    atomic_write_text(out / "objective_trace.csv", "\n".join(trace_lines) + "\n")
    for v in range(state.n_views):
        _write_matrix_csv(out / f"z_{v}.csv", state.z[v])
        _write_matrix_csv(out / f"d_{v}.csv", state.d[v])
        _write_matrix_csv(out / f"e_{v}.csv", state.e[v])
    logger.info(
        "oracle: %d iterations, objective %.6g -> %.6g",
        len(state.objective_trace) - 1, state.objective_trace[0], state.objective_trace[-1],
    )
    return EXIT_OK


def build_gradcheck_scenario(seed: int):
    """The canonical audit batch: 10 known samples over 5 classes in 2
    views, plus mixed pseudo rows, through a 2-layer network."""
    from .admm_oracle import AdmmConfig
    from .dataset import Batch
    from .pseudo_gen import MixConfig, generate_pseudo
    from .unfold_net import init_params

    rng = np.random.default_rng([seed, 900])
    c, dims = 5, (12, 10)
    labels = np.arange(10) % c
    views = [rng.normal(size=(10, d)) for d in dims]
    batch = Batch(views=views, labels=labels, is_pseudo=np.zeros(10, dtype=bool))
    combined = generate_pseudo(
        batch, MixConfig(omega=2.0, pseudo_ratio=0.5, unknown_label=c),
        np.random.default_rng([seed, 901]),
    )
    params = init_params(
        dims, c, AdmmConfig(alpha=0.05, beta=0.1, gamma=0.5),
        seed=[seed, 902], num_layers=2, expected_rows=15,
    )
    return combined, params


def run_gradcheck(seed: int = 7, eps: float = 1e-5):
    """Max relative error of the analytic gradient of the full training
    loss over every parameter, against central finite differences."""
    from . import tensor_core as tc
    from .losses import LossConfig, total_loss
    from .unfold_net import forward, params_from_dict, params_to_dict

    combined, params = build_gradcheck_scenario(seed)
    loss_cfg = LossConfig(xi=1.0, lambda1=0.3, lambda2=0.2)
    rng = np.random.default_rng([seed, 903])
    centers = rng.normal(size=(5, 5)) * 0.3
    names = sorted(
        [f"d_init/{v}" for v in range(2)]
        + [
            f"{kind}/{l}/{v}"
            for kind in ("r", "u", "m", "theta", "rho")
            for l in range(2)
            for v in range(2)
        ]
    )
    base = params_to_dict(params)

    # analytic gradients come from the bound parameter nodes; the
    # finite-difference twin perturbs raw entries through the whole pipeline
    from .losses import total_loss as _tl

    res = forward(combined, params, labels_for_fusion=combined.labels)
    node, _ = _tl(res.z_fused, combined.labels, combined.is_pseudo, centers, loss_cfg)
    tc.backward(node)

    worst = 0.0
    per_param = {}
    grad_norms = {}
    for name in names:
        grad = res.param_nodes[name].grad
        grad_norms[name] = float(np.linalg.norm(grad))
        kind, *idx = name.split("/")
        if kind == "d_init":
            anchor = params.d_init[int(idx[0])]
        elif kind in ("theta", "rho"):
            anchor = np.array([[getattr(params, kind)[int(idx[0])][int(idx[1])]]])
        else:
            anchor = getattr(params, kind)[int(idx[0])][int(idx[1])]
        flat = anchor.reshape(-1)
        err_max = 0.0
        for j in range(flat.size):
            vals = {}
            for sign in (1.0, -1.0):
                trial = params_from_dict(base)
                tgt = (
                    trial.d_init[int(idx[0])]
                    if kind == "d_init"
                    else getattr(trial, kind)[int(idx[0])]
                )
                if kind in ("theta", "rho"):
                    tgt[int(idx[1])] = flat[j] + sign * eps
                elif kind == "d_init":
                    tgt.reshape(-1)[j] = flat[j] + sign * eps
                else:
                    tgt[int(idx[1])].reshape(-1)[j] = flat[j] + sign * eps
                out = forward(combined, trial, labels_for_fusion=combined.labels)
                val = _tl(
                    out.z_fused, combined.labels, combined.is_pseudo, centers, loss_cfg
                )[0].item()
                vals[sign] = val
            central = (vals[1.0] - vals[-1.0]) / (2 * eps)
            err = abs(grad.reshape(-1)[j] - central) / max(1.0, abs(central))
            err_max = max(err_max, err)
        per_param[name] = err_max
        worst = max(worst, err_max)
    return worst, per_param, grad_norms


def _cmd_gradcheck(args, config):
    seed = args.seed if args.seed is not None else 7
    start = time.perf_counter()
    worst, per_param, _ = run_gradcheck(seed)
    elapsed = time.perf_counter() - start
    print(f"gradcheck seed {seed}: max relative error {worst:.3e} ({elapsed:.1f}s)")
    if not args.quiet:
        for name in sorted(per_param, key=per_param.get, reverse=True)[:5]:
            print(f"  {name}: {per_param[name]:.3e}")
    return EXIT_OK if worst < 1e-4 else EXIT_RUNTIME


def _cmd_diag(args, config):
    from .evaluation import contraction_diagnostic, scaling_benchmark
    from .losses import LossConfig, batch_stats, gradient_bound, measured_gradient_norm, total_loss
    from .unfold_net import forward, init_params
    from . import tensor_core as tc

    seed = args.seed if args.seed is not None else 0
    report = {"version": version_info()}

    params = init_params([16, 12], 6, seed=[seed, 100], num_layers=1)
    contraction = contraction_diagnostic(params, view=0, trials=args.trials, seed=seed)
    report["contraction"] = dataclasses.asdict(contraction)

    scenario, gparams = build_gradcheck_scenario(seed)
    res = forward(scenario, gparams, labels_for_fusion=scenario.labels)
    cfg = LossConfig(xi=1.0, lambda1=0.3, lambda2=0.2)
    centers = np.zeros((5, 5))
    node, _ = total_loss(res.z_fused, scenario.labels, scenario.is_pseudo, centers, cfg)
    tc.backward(node)
    stats = batch_stats(res.z_fused.value, scenario.labels, scenario.is_pseudo, centers)
    bound = gradient_bound(res.z_fused.value, cfg, stats)
    measured = measured_gradient_norm(res.z_fused.grad)
    report["gradient_bound"] = {
        "bound": bound,
        "measured": measured,
        "holds": bool(measured <= bound),
    }

    bench = scaling_benchmark(seed=seed)
    report["scaling"] = {
        "rows": [{"n": r.n, "seconds": r.seconds} for r in bench["rows"]],
        "ratios": bench["ratios"],
    }

    ok = contraction.passed and measured <= bound
    text = canonical_json(report)
    if args.out:
        atomic_write_text(Path(args.out) / "diag.json", text)
    print(text, end="")
    return EXIT_OK if ok else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# argument wiring


def _build_parser() -> _Parser:
    parser = _Parser(prog="openviewer", description=__doc__)
    parser.add_argument("--version", action="version", version=version_info())
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--quiet", action="store_true")
        if out_required:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("synth", help="generate a planted multi-view dataset")
    p.add_argument("--spec", default=None, help="JSON file with the data spec")
    common(p)

    p = sub.add_parser("split", help="compute an openness-based class split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--openness", type=float, default=None)
    p.add_argument("--ratios", default=None, help="train,val,test")
    common(p)

    p = sub.add_parser("train", help="train the unfolded network")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", required=True)
    common(p)

    p = sub.add_parser("eval", help="open-set evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", required=True)
    common(p)

    p = sub.add_parser("oracle", help="run the non-learned solver on a manifest")
    p.add_argument("--manifest", required=True)
    common(p)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    common(p, out_required=False)

    p = sub.add_parser("diag", help="contraction, bound, and scaling diagnostics")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--out", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--quiet", action="store_true")

    return parser


_COMMANDS = {
    "synth": _cmd_synth,
    "split": _cmd_split,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "oracle": _cmd_oracle,
    "gradcheck": _cmd_gradcheck,
    "diag": _cmd_diag,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.WARNING if getattr(args, "quiet", False) else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    os.environ.setdefault("OPENVIEWER_THREADS", "1")
    try:
        config = _load_config_file(getattr(args, "config", None))
        return _COMMANDS[args.command](args, config)
    except ConfigError as exc:
        logger.error("%s", exc)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        logger.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME



_NESTED_CONFIGS = {}


def _register_nested():
    from .admm_oracle import AdmmConfig
    from .losses import LossConfig
    from .pseudo_gen import MixConfig

    _NESTED_CONFIGS[("TrainConfig", "mix")] = MixConfig
    _NESTED_CONFIGS[("TrainConfig", "loss")] = LossConfig
    _NESTED_CONFIGS[("TrainConfig", "admm")] = AdmmConfig


_register_nested()


if __name__ == "__main__":
    sys.exit(main())
