"""Open-set evaluation and theory diagnostics.

Scoring runs the trained network in inference mode over the test split;
the OSCR curve sweeps a confidence threshold and reports, per threshold,
the correct-classification rate on known-class samples against the
false-positive rate on unknown-class samples. Diagnostics cover the
contraction property of the code-update map and the wall-clock scaling of
a forward/backward pass.
"""

from __future__ import annotations

import gc
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .dataset import Batch, MultiViewDataset, OpennessSplit, zscore_normalize
from .losses import CenterState
from .unfold_net import UnfoldParams, forward, predict, rf_forward
from .admm_oracle import power_iteration_norm


class MetricError(ValueError):
    """Metric inputs are degenerate (missing known or unknown samples)."""


@dataclass
class EvalConfig:
    score: str = "softmax"  # or "norm": squashed fused-code row norm
    fpr_targets: tuple[float, ...] = (0.005, 0.01, 0.05, 0.1, 0.5)

    def validate(self) -> None:
        if self.score not in ("softmax", "norm"):
            raise MetricError(f"score must be 'softmax' or 'norm', got {self.score!r}")


@dataclass
class ScoredPrediction:
    index: int
    predicted: int
    confidence: float
    true_label: int
    is_unknown_truth: bool


@dataclass
class OscrCurve:
    points: list[tuple[float, float, float]] = field(default_factory=list)  # (thr, ccr, fpr)


def score_test_set(
    params: UnfoldParams,
    centers: CenterState,
    dataset: MultiViewDataset,
    split: OpennessSplit,
    config: EvalConfig | None = None,
    normalize: bool = True,
    indices=None,
) -> list[ScoredPrediction]:
    """Inference-mode forward over the test rows, one score per sample.

    Predicted classes are reported as original dataset class ids; the
    confidence is the max softmax probability (or a squashed code norm).
    """
    cfg = config or EvalConfig()
    cfg.validate()
    if dataset.view_dims != params.view_dims:
        raise MetricError(
            f"checkpoint dims {params.view_dims} do not match dataset {dataset.view_dims}"
        )
    known = sorted(split.known_classes)
    if len(known) != params.num_classes:
        raise MetricError(
            f"checkpoint has {params.num_classes} classes, split has {len(known)}"
        )
    work = dataset
    if normalize:
        work, _ = zscore_normalize(dataset, split.train_idx)
    rows = np.asarray(split.test_idx if indices is None else indices, dtype=np.intp)
    batch = Batch(
        views=[v[rows] for v in work.views],
        labels=work.labels[rows],
        is_pseudo=np.zeros(rows.size, dtype=bool),
    )
    res = forward(batch, params, inference=True)
    classes, confidence = predict(res.z_fused.value)
    if cfg.score == "norm":
        norms = np.linalg.norm(res.z_fused.value, axis=1)
        confidence = norms / (1.0 + norms)
    unknown = set(split.unknown_classes)
    return [
        ScoredPrediction(
            index=int(i),
            predicted=int(known[c]),
            confidence=float(s),
            true_label=int(t),
            is_unknown_truth=bool(int(t) in unknown),
        )
        for i, c, s, t in zip(rows, classes, confidence, batch.labels)
    ]


def oscr_curve(preds: list[ScoredPrediction]) -> OscrCurve:
    """Threshold sweep over the distinct confidences, high to low."""
    known = [p for p in preds if not p.is_unknown_truth]
    unknown = [p for p in preds if p.is_unknown_truth]
    if not known or not unknown:
        raise MetricError("OSCR needs at least one known-truth and one unknown-truth sample")
    conf = np.array([p.confidence for p in preds])
    kn_conf = np.array([p.confidence for p in known])
    kn_correct = np.array([p.predicted == p.true_label for p in known])
    un_conf = np.array([p.confidence for p in unknown])
    points = []
    for thr in np.unique(conf)[::-1]:
        ccr = float(np.mean(kn_correct & (kn_conf >= thr)))
        fpr = float(np.mean(un_conf >= thr))
        points.append((float(thr), ccr, fpr))
    return OscrCurve(points=points)


def ccr_at_fpr(curve: OscrCurve, target_fpr: float) -> float:
    """Largest CCR among curve points with FPR <= target; 0 if none qualify."""
    if not 0.0 < target_fpr <= 1.0:
        raise MetricError(f"target FPR must lie in (0, 1], got {target_fpr}")
    eligible = [ccr for _, ccr, fpr in curve.points if fpr <= target_fpr]
    return max(eligible) if eligible else 0.0


def summary(curve: OscrCurve, targets=(0.005, 0.01, 0.05, 0.1, 0.5)) -> dict[str, float]:
    return {f"ccr_at_fpr_{t:g}": ccr_at_fpr(curve, t) for t in targets}


# ---------------------------------------------------------------------------
# theory diagnostics


@dataclass
class ContractionReport:
    spectral_norm_r: float
    contractive: bool
    max_ratio: float
    trials: int
    passed: bool


def contraction_diagnostic(
    params: UnfoldParams, view: int = 0, trials: int = 1000, seed: int = 0
) -> ContractionReport:
    """Empirically check that the code-update map shrinks pairs by ||R||_2.

    The shrinkage activation is nonexpansive, so the map contracts whenever
    ||R||_2 < 1; with ||R||_2 >= 1 the report flags "not contractive" but
    still records the observed ratio.
    """
    if trials < 1:
        raise MetricError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    r = params.r[0][view]
    norm_r = float(np.sqrt(power_iteration_norm(r.T @ r)))
    c = params.num_classes
    n = 16
    x = tc.constant(rng.normal(size=(n, params.view_dims[view])))
    d = tc.constant(params.d_init[view])
    u = tc.constant(params.u[0][view])
    theta = tc.constant([[params.theta[0][view]]])
    r_node = tc.constant(r)

    max_ratio = 0.0
    for _ in range(trials):
        za = rng.normal(size=(n, c)) * rng.uniform(0.1, 5.0)
        zb = rng.normal(size=(n, c)) * rng.uniform(0.1, 5.0)
        fa = rf_forward(tc.constant(za), x, None, d, r_node, u, theta).value
        fb = rf_forward(tc.constant(zb), x, None, d, r_node, u, theta).value
        denom = np.linalg.norm(za - zb)
        if denom == 0.0:
            continue
        max_ratio = max(max_ratio, float(np.linalg.norm(fa - fb) / denom))
    contractive = norm_r < 1.0
    passed = (not contractive) or (max_ratio <= norm_r + 1e-9)
    return ContractionReport(
        spectral_norm_r=norm_r,
        contractive=contractive,
        max_ratio=max_ratio,
        trials=trials,
        passed=passed,
    )


@dataclass
class ScalingRow:
    n: int
    seconds: float


def _forward_backward_seconds(params: UnfoldParams, n: int, seed: int, repeats: int = 5) -> float:
    rng = np.random.default_rng(seed)
    views = [rng.normal(size=(n, d)) for d in params.view_dims]
    labels = rng.integers(0, params.num_classes, size=n)
    batch = Batch(views=views, labels=labels, is_pseudo=np.zeros(n, dtype=bool))
    times = []
    gc_was_enabled = gc.isenabled()
    gc.collect()
    gc.disable()
    try:
        for _ in range(repeats + 1):
            t0 = time.perf_counter()
            res = forward(batch, params, labels_for_fusion=labels)
            tc.backward(tc.frobenius_sq(res.z_fused))
            times.append(time.perf_counter() - t0)
    finally:
        if gc_was_enabled:
            gc.enable()
    # min over repeats after a warmup run: the least load-sensitive estimate
    return float(min(times[1:]))


def scaling_benchmark(
    n_grid=(512, 1024, 2048),
    num_classes: int = 6,
    view_dims=(16, 12),
    num_layers: int = 1,
    seed: int = 0,
    repeats: int = 5,
) -> dict:
    """Wall time of forward+backward per batch size, plus doubling ratios."""
    from .unfold_net import init_params

    params = init_params(list(view_dims), num_classes, seed=seed, num_layers=num_layers)
    rows = [ScalingRow(n=n, seconds=_forward_backward_seconds(params, n, seed, repeats))
            for n in n_grid]
    ratios = {
        f"{a.n}->{b.n}": b.seconds / a.seconds for a, b in zip(rows, rows[1:])
    }
    return {"rows": rows, "ratios": ratios}
