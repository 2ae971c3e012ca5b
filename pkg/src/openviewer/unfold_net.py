"""Layer-unrolled multi-view sparse-coding network.

Each layer applies, per view: a redundancy-filtering shrinkage update of
the code Z (RF), a dictionary refresh (CD), and a group-sparse noise
update (DN); the per-view codes are then fused with weights derived from
inter-class centroid separation (CW fusion). With the analytic parameter
choices R = I - D D^T / L, U = I / L, M = (Z^T Z + beta I)^{-1},
theta = alpha / L, rho = gamma / L a layer reproduces one iteration of the
non-learned alternating solver; during training all of R, U, M, theta,
rho, and the initial dictionaries are free parameters.

Ablation modes: "no_cd_dn" freezes the dictionaries and drops the noise
path entirely; "no_dn" keeps the dictionary refresh but clamps the noise
estimate to zero.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .admm_oracle import AdmmConfig, AdmmState, power_iteration_norm

logger = logging.getLogger(__name__)

ABLATIONS = ("full", "no_cd_dn", "no_dn")

# stand-in for the unknown Z^T Z when building M at initialization
INIT_RIDGE = 1e-8

MIN_CENTROID_DISTANCE = 1e-8


class FusionError(ValueError):
    """Fusion weights cannot be computed from the given labels."""


class StateError(RuntimeError):
    """The network is missing state required for the requested mode."""


@dataclass
class UnfoldParams:
    """Learnable per-view, per-layer parameter set plus frozen fusion weights."""

    view_dims: list[int]
    num_classes: int
    num_layers: int
    r: list[list[np.ndarray]]
    u: list[list[np.ndarray]]
    m: list[list[np.ndarray]]
    theta: list[list[float]]
    rho: list[list[float]]
    d_init: list[np.ndarray]
    fusion_weights_snapshot: np.ndarray | None = None
    group_axis: str = "columns"
    ablation: str = "full"

    @property
    def n_views(self) -> int:
        return len(self.view_dims)

    def clamp_thresholds(self) -> None:
        for l in range(self.num_layers):
            for v in range(self.n_views):
                self.theta[l][v] = max(0.0, self.theta[l][v])
                self.rho[l][v] = max(0.0, self.rho[l][v])


@dataclass
class LayerState:
    z: list[np.ndarray]
    d: list[np.ndarray]
    e: list[np.ndarray]
    z_fused: np.ndarray
    weights: np.ndarray


@dataclass
class ForwardResult:
    z_fused: tc.DiffNode
    param_nodes: dict[str, tc.DiffNode]
    trace: list[LayerState] = field(default_factory=list)
    weights: np.ndarray | None = None


def init_params(
    view_dims,
    num_classes: int,
    admm_config: AdmmConfig | None = None,
    seed: int = 0,
    num_layers: int = 1,
    warm_start: AdmmState | None = None,
    group_axis: str = "columns",
    ablation: str = "full",
    expected_rows: int | None = None,
) -> UnfoldParams:
    """Closed-form initialization from (possibly warm-started) dictionaries.

    The dictionary refresh matrix M approximates (Z^T Z + beta I)^{-1} with
    Z unknown, so its ridge stand-in for Z^T Z matters: pass the expected
    batch row count via `expected_rows` to keep multi-layer forwards
    well-scaled (Z^T Z grows linearly with the row count); without the hint
    a tiny ridge is used, which is only safe for single-layer networks.
    """
    if ablation not in ABLATIONS:
        raise ValueError(f"ablation must be one of {ABLATIONS}, got {ablation!r}")
    cfg = admm_config or AdmmConfig()
    view_dims = [int(d) for d in view_dims]
    c = int(num_classes)
    ridge = INIT_RIDGE if expected_rows is None else float(expected_rows)
    rng = np.random.default_rng(seed)

    d_init = []
    for v, dim in enumerate(view_dims):
        if warm_start is not None:
            d_init.append(warm_start.d[v].copy())
        else:
            dv = rng.normal(size=(c, dim))
            dv /= np.linalg.norm(dv, axis=1, keepdims=True)
            d_init.append(dv)

    r, u, m, theta, rho = [], [], [], [], []
    eye = np.eye(c)
    for _ in range(num_layers):
        r_l, u_l, m_l, th_l, rh_l = [], [], [], [], []
        for dv in d_init:
            l_p = power_iteration_norm(dv @ dv.T)
            r_l.append(eye - (dv @ dv.T) / l_p)
            u_l.append(eye / l_p)
            m_l.append(eye / (cfg.beta + ridge))
            th_l.append(cfg.alpha / l_p)
            rh_l.append(cfg.gamma / l_p)
        r.append(r_l)
        u.append(u_l)
        m.append(m_l)
        theta.append(th_l)
        rho.append(rh_l)

    return UnfoldParams(
        view_dims=view_dims,
        num_classes=c,
        num_layers=num_layers,
        r=r,
        u=u,
        m=m,
        theta=theta,
        rho=rho,
        d_init=d_init,
        group_axis=group_axis,
        ablation=ablation,
    )


# ---------------------------------------------------------------------------
# the four modules


def rf_forward(z_prev, x, e_prev, d_prev, r, u, theta) -> tc.DiffNode:
    """Code update: S_theta(Z R + (X - E) D^T U). `e_prev=None` means zero."""
    resid = x if e_prev is None else tc.sub(x, e_prev)
    pre = tc.add(tc.matmul(z_prev, r), tc.matmul(tc.matmul(resid, tc.transpose(d_prev)), u))
    return tc.soft_threshold(pre, theta)


def cd_forward(z, x, e_prev, m) -> tc.DiffNode:
    """Dictionary refresh: M Z^T (X - E)."""
    resid = x if e_prev is None else tc.sub(x, e_prev)
    return tc.matmul(m, tc.matmul(tc.transpose(z), resid))


def dn_forward(x, z, d, rho, axis: str = "columns") -> tc.DiffNode:
    """Noise update: group shrinkage of the reconstruction residual."""
    return tc.group_soft_threshold(tc.sub(x, tc.matmul(z, d)), rho, axis=axis)


def fusion_weights(z_views: list[tc.DiffNode], labels) -> tc.DiffNode:
    """Separation-derived view weights, differentiable end to end.

    Per view: class centroids of the code rows, the minimum pairwise
    centroid distance d_v (clamped at 1e-8), then
    w = softmax(-(1/d_v) / sum_u (1/d_u)).
    """
    labels = np.asarray(labels, dtype=np.int64)
    groups = np.unique(labels)
    if groups.size < 2:
        raise FusionError(f"need >= 2 distinct labels for fusion weights, got {groups.size}")
    averaging = np.zeros((groups.size, labels.size))
    for gi, g in enumerate(groups):
        rows = labels == g
        averaging[gi, rows] = 1.0 / rows.sum()
    avg_node = tc.constant(averaging)

    min_dists = []
    for z in z_views:
        centroids = tc.matmul(avg_node, z)
        best = None
        for i in range(groups.size):
            for j in range(i + 1, groups.size):
                diff = tc.sub(tc.take_rows(centroids, [i]), tc.take_rows(centroids, [j]))
                dsq = tc.frobenius_sq(diff)
                if best is None or dsq.value[0, 0] < best.value[0, 0]:
                    best = dsq
        min_dists.append(tc.sqrt(tc.clamp_min(best, MIN_CENTROID_DISTANCE**2)))

    dvec = tc.hstack(min_dists)
    inv = tc.reciprocal(dvec)
    dbar = tc.mul_scalar_node(inv, tc.reciprocal(tc.sum(inv)))
    return tc.row_softmax(tc.scale(dbar, -1.0))


# ---------------------------------------------------------------------------
# full forward pass


def _bind_params(params: UnfoldParams) -> dict[str, tc.DiffNode]:
    nodes: dict[str, tc.DiffNode] = {}
    for v in range(params.n_views):
        nodes[f"d_init/{v}"] = tc.leaf(params.d_init[v])
    for l in range(params.num_layers):
        for v in range(params.n_views):
            nodes[f"r/{l}/{v}"] = tc.leaf(params.r[l][v])
            nodes[f"u/{l}/{v}"] = tc.leaf(params.u[l][v])
            nodes[f"theta/{l}/{v}"] = tc.leaf([[params.theta[l][v]]])
            if params.ablation != "no_cd_dn":
                nodes[f"m/{l}/{v}"] = tc.leaf(params.m[l][v])
            if params.ablation == "full":
                nodes[f"rho/{l}/{v}"] = tc.leaf([[params.rho[l][v]]])
    return nodes


def forward(
    batch,
    params: UnfoldParams,
    labels_for_fusion=None,
    inference: bool = False,
    num_layers: int | None = None,
) -> ForwardResult:
    """Run the unrolled layers and fuse the per-view codes.

    Weight source: the snapshot in inference mode (required), label-derived
    weights when labels are supplied (falling back to uniform if fusion is
    infeasible), uniform otherwise. State starts at Z = 0, E = 0, D = D_init.
    """
    views = batch.views if hasattr(batch, "views") else list(batch)
    if len(views) != params.n_views:
        raise tc.ShapeError(f"batch has {len(views)} views, params expect {params.n_views}")
    layers = params.num_layers if num_layers is None else num_layers
    if not 1 <= layers <= params.num_layers:
        raise ValueError(f"num_layers must lie in [1, {params.num_layers}], got {layers}")
    if inference and params.fusion_weights_snapshot is None:
        raise StateError("inference requires a fusion weight snapshot; train first")

    n = views[0].shape[0]
    nodes = _bind_params(params)
    x = [tc.constant(v) for v in views]
    z = [tc.constant(np.zeros((n, params.num_classes))) for _ in range(params.n_views)]
    e: list[tc.DiffNode | None] = [None] * params.n_views
    d = [nodes[f"d_init/{v}"] for v in range(params.n_views)]

    v_count = params.n_views
    uniform = np.full((1, v_count), 1.0 / v_count)
    trace: list[LayerState] = []
    z_fused = None
    weights_value = None
    for l in range(layers):
        for v in range(v_count):
            z[v] = rf_forward(
                z[v], x[v], e[v], d[v],
                nodes[f"r/{l}/{v}"], nodes[f"u/{l}/{v}"], nodes[f"theta/{l}/{v}"],
            )
            if params.ablation != "no_cd_dn":
                d[v] = cd_forward(z[v], x[v], e[v], nodes[f"m/{l}/{v}"])
            if params.ablation == "full":
                e[v] = dn_forward(x[v], z[v], d[v], nodes[f"rho/{l}/{v}"], params.group_axis)

        if inference:
            w = tc.constant(params.fusion_weights_snapshot.reshape(1, -1))
        elif labels_for_fusion is not None:
            try:
                w = fusion_weights(z, labels_for_fusion)
            except FusionError as exc:
                logger.warning("fusion fallback to uniform weights: %s", exc)
                w = tc.constant(uniform)
        else:
            w = tc.constant(uniform)

        w_cols = tc.transpose(w)
        z_fused = tc.mul_scalar_node(z[0], tc.take_rows(w_cols, [0]))
        for v in range(1, v_count):
            z_fused = tc.add(z_fused, tc.mul_scalar_node(z[v], tc.take_rows(w_cols, [v])))
        weights_value = w.value.ravel().copy()

        trace.append(
            LayerState(
                z=[zv.value for zv in z],
                d=[dv.value for dv in d],
                e=[ev.value if ev is not None else np.zeros_like(xv.value) for ev, xv in zip(e, x)],
                z_fused=z_fused.value,
                weights=weights_value,
            )
        )

    return ForwardResult(z_fused=z_fused, param_nodes=nodes, trace=trace, weights=weights_value)


def predict(z_fused: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row argmax class (ties to the smaller index) and max softmax."""
    z = np.asarray(z_fused, dtype=np.float64)
    shifted = z - z.max(axis=1, keepdims=True)
    expv = np.exp(shifted)
    probs = expv / expv.sum(axis=1, keepdims=True)
    classes = np.argmax(probs, axis=1)
    return classes, probs[np.arange(z.shape[0]), classes]


# ---------------------------------------------------------------------------
# (de)serialization helpers used by checkpoints


def params_to_dict(params: UnfoldParams) -> dict:
    return {
        "view_dims": list(params.view_dims),
        "num_classes": params.num_classes,
        "num_layers": params.num_layers,
        "r": [[m.tolist() for m in layer] for layer in params.r],
        "u": [[m.tolist() for m in layer] for layer in params.u],
        "m": [[m.tolist() for m in layer] for layer in params.m],
        "theta": [list(layer) for layer in params.theta],
        "rho": [list(layer) for layer in params.rho],
        "d_init": [m.tolist() for m in params.d_init],
        "fusion_weights_snapshot": (
            None
            if params.fusion_weights_snapshot is None
            else params.fusion_weights_snapshot.tolist()
        ),
        "group_axis": params.group_axis,
        "ablation": params.ablation,
    }


def params_from_dict(data: dict) -> UnfoldParams:
    snapshot = data["fusion_weights_snapshot"]
    return UnfoldParams(
        view_dims=[int(d) for d in data["view_dims"]],
        num_classes=int(data["num_classes"]),
        num_layers=int(data["num_layers"]),
        r=[[np.array(m) for m in layer] for layer in data["r"]],
        u=[[np.array(m) for m in layer] for layer in data["u"]],
        m=[[np.array(m) for m in layer] for layer in data["m"]],
        theta=[[float(t) for t in layer] for layer in data["theta"]],
        rho=[[float(t) for t in layer] for layer in data["rho"]],
        d_init=[np.array(m) for m in data["d_init"]],
        fusion_weights_snapshot=None if snapshot is None else np.array(snapshot),
        group_axis=data["group_axis"],
        ablation=data["ablation"],
    )
