"""NoSAF / NoSAF-D, their ablations, and the GCN baselines.

Every variant shares one parameter layout (:func:`init_params` allocates the
full set regardless of variant), so two variants initialized with the same
seed share their input map, GCN blocks and output map exactly.

Stage ``l = 0`` filters the input embedding; stages ``1..L`` filter GCN-block
outputs.  The codebank therefore receives ``L + 1`` contributions.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import (BatchNormState, SparseCsr, Tape, Tensor, add, add_bias, batch_norm,
                       broadcast_col, concat_cols, dropout, hadamard, leaky_relu, matmul, relu,
                       sigmoid, spmm, sub)
from .errors import ArgumentError, DimensionError, IntegrityError, ParseError
from .graph import Graph, node_homophily_all, smoothness_davg

VARIANTS = ("nosaf", "nosaf_d", "plain_gcn", "res_gcn", "jk_sum", "oracle_h")

# Table-3 style ablation ladder, expressed as ModelConfig overrides.
ABLATIONS = {
    "nosaf_d": {"variant": "nosaf_d"},
    "wo_cpm": {"variant": "nosaf_d", "disable_cpm": True},
    "wo_cpm_nw": {"variant": "nosaf_d", "disable_cpm": True, "disable_node_weights": True},
    "wo_cpm_nw_cb": {"variant": "nosaf_d", "disable_cpm": True, "disable_node_weights": True,
                     "disable_codebank": True},
}


@dataclass
class ModelConfig:
    variant: str = "nosaf_d"
    layers: int = 2
    hidden: int = 64
    filter_proj: int | None = None  # defaults to hidden
    filter_hidden: int | None = None  # defaults to hidden // 2
    leaky_slope: float = 0.2
    dropout: float = 0.0
    in_layers: int = 1
    out_layers: int = 1
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    disable_cpm: bool = False
    disable_node_weights: bool = False
    disable_codebank: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ArgumentError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.layers < 0:
            raise ArgumentError(f"layers must be >= 0, got {self.layers}")
        if self.hidden < 1:
            raise ArgumentError(f"hidden must be >= 1, got {self.hidden}")
        if self.filter_proj is None:
            self.filter_proj = self.hidden
        if self.filter_hidden is None:
            self.filter_hidden = max(1, self.hidden // 2)
        if self.filter_proj < 1 or self.filter_hidden < 1:
            raise ArgumentError("filter dimensions must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ArgumentError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.in_layers < 1 or self.out_layers < 1:
            raise ArgumentError("in_layers and out_layers must be >= 1")

    def canonical(self) -> "ModelConfig":
        """Fold ablation switches into the variant they are equivalent to."""
        variant = self.variant
        if self.disable_codebank and variant in ("nosaf", "nosaf_d"):
            variant = "plain_gcn"
        elif variant == "nosaf_d" and self.disable_cpm:
            variant = "nosaf"
        return replace(self, variant=variant)

    @property
    def label_leaking(self) -> bool:
        return self.variant == "oracle_h"


@dataclass
class ModelParams:
    """Named weight arrays plus batch-norm states.

    ``weights`` holds every learnable array, including the batch-norm affine
    terms, which are the same objects as ``bn[l].gamma``/``bn[l].beta``.
    """

    weights: dict
    bn: dict = field(default_factory=dict)  # layer index (1..L) -> BatchNormState

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)

    def all_arrays(self) -> dict:
        """Learnable weights and running statistics under one flat namespace."""
        out = dict(self.weights)
        for l, st in self.bn.items():
            out[f"gcn.{l}.bn.running_mean"] = st.running_mean
            out[f"gcn.{l}.bn.running_var"] = st.running_var
        return out


def _glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_in, fan_out))


def init_params(cfg: ModelConfig, feature_dim: int, num_classes: int, seed: int = 0) -> ModelParams:
    """Glorot-uniform weights, zero biases, identity batch norm; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    d, dp, dh = cfg.hidden, cfg.filter_proj, cfg.filter_hidden
    w = {}
    dims = [feature_dim] + [d] * cfg.in_layers
    for i in range(cfg.in_layers):
        w[f"zeta_in.{i}.W"] = _glorot(rng, dims[i], dims[i + 1])
        w[f"zeta_in.{i}.b"] = np.zeros((1, dims[i + 1]))
    bn = {}
    for l in range(1, cfg.layers + 1):
        w[f"gcn.{l}.W"] = _glorot(rng, d, d)
        st = BatchNormState.fresh(d, cfg.bn_momentum, cfg.bn_eps)
        bn[l] = st
        w[f"gcn.{l}.bn.gamma"] = st.gamma
        w[f"gcn.{l}.bn.beta"] = st.beta
    for l in range(cfg.layers + 1):
        w[f"filter.{l}.W_Z"] = _glorot(rng, d, dp)
        w[f"filter.{l}.W_C"] = _glorot(rng, d, dp)
        w[f"filter.{l}.W_1"] = _glorot(rng, 2 * dp, dh)
        w[f"filter.{l}.b_1"] = np.zeros((1, dh))
        w[f"filter.{l}.W_2"] = _glorot(rng, dh, 1)
        w[f"filter.{l}.b_2"] = np.zeros((1, 1))
    dims = [d] * cfg.out_layers + [num_classes]
    for i in range(cfg.out_layers):
        w[f"zeta_out.{i}.W"] = _glorot(rng, dims[i], dims[i + 1])
        w[f"zeta_out.{i}.b"] = np.zeros((1, dims[i + 1]))
    return ModelParams(w, bn)


# ----------------------------------------------------------------------------
# building blocks


def gcn_block(h: Tensor, adj: SparseCsr, w: Tensor, bn: BatchNormState, training: bool,
              gamma: Tensor | None = None, beta: Tensor | None = None) -> Tensor:
    """ReLU(BN(adj @ h @ w))."""
    return relu(batch_norm(matmul(spmm(adj, h), w), bn, training, gamma, beta))


def filter_weights(z: Tensor, c: Tensor, p: dict, slope: float = 0.2) -> Tensor:
    """Per-node score in (0, 1) from the current output ``z`` and codebank ``c``.

    ``p`` maps ``W_Z, W_C, W_1, b_1, W_2, b_2`` to tensors.
    """
    if z.shape != c.shape:
        raise DimensionError(f"filter: z {z.shape} and codebank {c.shape} differ")
    mixed = concat_cols(matmul(z, p["W_Z"]), matmul(c, p["W_C"]))
    hidden = leaky_relu(add_bias(matmul(mixed, p["W_1"]), p["b_1"]), slope)
    return sigmoid(add_bias(matmul(hidden, p["W_2"]), p["b_2"]))


def apply_filter(z: Tensor, gamma: Tensor) -> Tensor:
    if gamma.shape != (z.rows, 1):
        raise DimensionError(f"filter weights {gamma.shape} for features {z.shape}")
    return hadamard(z, broadcast_col(gamma, z.cols))


def codebank_update(c: Tensor, filtered: Tensor) -> Tensor:
    return add(c, filtered)


def compensation(c: Tensor, gamma: Tensor) -> Tensor:
    """Codebank share ``c * (1 - gamma)`` fed back into the hidden state."""
    if gamma.shape != (c.rows, 1):
        raise DimensionError(f"filter weights {gamma.shape} for codebank {c.shape}")
    keep = sub(Tensor(np.ones(gamma.shape)), gamma)
    return hadamard(c, broadcast_col(keep, c.cols))


def compensate(c: Tensor, z: Tensor, gamma: Tensor) -> Tensor:
    """Per-row blend ``z * gamma + c * (1 - gamma)``."""
    if c.shape != z.shape:
        raise DimensionError(f"compensate: codebank {c.shape} and z {z.shape} differ")
    return add(apply_filter(z, gamma), compensation(c, gamma))


def _mlp(x: Tensor, W: dict, prefix: str, depth: int) -> Tensor:
    for i in range(depth):
        if i:
            x = relu(x)
        x = add_bias(matmul(x, W[f"{prefix}.{i}.W"]), W[f"{prefix}.{i}.b"])
    return x


# ----------------------------------------------------------------------------
# forward pass


@dataclass
class StageRecord:
    z: Tensor
    hidden: Tensor  # H^{l+1}, the input of the next stage
    gamma: Tensor | None = None  # None where node weights are off (gamma == 1)
    filtered: Tensor | None = None
    codebank: Tensor | None = None  # after this stage's update
    davg: float | None = None


@dataclass
class ForwardTrace:
    logits: Tensor
    representation: Tensor  # what the output map consumed
    stages: list
    variables: dict  # parameter name -> Tensor used in this pass
    label_leaking: bool = False

    @property
    def codebank(self) -> Tensor | None:
        return self.stages[-1].codebank

    def gamma_stats(self) -> list:
        out = []
        for st in self.stages:
            if st.gamma is None:
                out.append(None)
            else:
                g = st.gamma.data
                out.append({"mean": float(g.mean()), "min": float(g.min()), "max": float(g.max())})
        return out

    def davg(self) -> list:
        return [st.davg for st in self.stages]


def check_params(cfg: ModelConfig, params: ModelParams, feature_dim: int, num_classes: int):
    expected = init_params(cfg, feature_dim, num_classes, seed=0).all_arrays()
    got = params.all_arrays()
    if expected.keys() != got.keys():
        missing = sorted(expected.keys() - got.keys())
        extra = sorted(got.keys() - expected.keys())
        raise IntegrityError(f"parameter names disagree with config: missing={missing[:5]} "
                             f"unexpected={extra[:5]}")
    for name, arr in expected.items():
        if got[name].shape != arr.shape:
            raise IntegrityError(f"{name}: shape {got[name].shape}, config needs {arr.shape}")


def forward(graph: Graph, adj: SparseCsr, cfg: ModelConfig, params: ModelParams,
            training: bool = False, tape: Tape | None = None,
            rng: np.random.Generator | None = None, smoothness: bool = False) -> ForwardTrace:
    """Run every stage of the configured variant.

    With ``tape`` given, parameters become tape variables (see
    ``trace.variables``) and the logits can be back-propagated.  Training
    mode uses batch statistics, updates the running ones, and applies dropout.
    ``smoothness`` fills each stage's ``davg`` from its hidden output.
    """
    cfg = cfg.canonical()
    if adj.shape != (graph.n, graph.n):
        raise DimensionError(f"adjacency {adj.shape} for a graph of {graph.n} nodes")
    if "zeta_in.0.W" not in params.weights or \
            params.weights["zeta_in.0.W"].shape[0] != graph.feature_dim:
        raise IntegrityError("parameters do not match the graph's feature dimension")
    if training and cfg.dropout > 0 and rng is None:
        raise ArgumentError("dropout in training mode needs an rng")
    wrap = tape.variable if tape is not None else Tensor
    W = {name: wrap(arr) for name, arr in params.weights.items()}

    def drop(t):
        return dropout(t, cfg.dropout, rng) if training and cfg.dropout > 0 else t

    def davg(t):
        return smoothness_davg(t.data) if smoothness and graph.n >= 2 else None

    variant = cfg.variant
    uses_codebank = variant in ("nosaf", "nosaf_d")
    weighted = uses_codebank and not cfg.disable_node_weights
    if variant == "oracle_h":
        h_node = node_homophily_all(graph)
        h_node = Tensor(np.where(np.isnan(h_node), 1.0, h_node)[:, None])

    h = _mlp(drop(Tensor(graph.features)), W, "zeta_in", cfg.in_layers)
    c = Tensor(np.zeros(h.shape)) if uses_codebank else None
    jk = None
    stages = []
    for l in range(cfg.layers + 1):
        if l == 0:
            z = h
        else:
            z = drop(gcn_block(h, adj, W[f"gcn.{l}.W"], params.bn[l], training,
                               W[f"gcn.{l}.bn.gamma"], W[f"gcn.{l}.bn.beta"]))
        rec = StageRecord(z=z, hidden=z)
        if uses_codebank:
            if weighted:
                stage_p = {k: W[f"filter.{l}.{k}"] for k in ("W_Z", "W_C", "W_1", "b_1", "W_2", "b_2")}
                gamma = filter_weights(z, c, stage_p, cfg.leaky_slope)
                filtered = apply_filter(z, gamma)
                if variant == "nosaf_d":
                    rec.hidden = add(filtered, compensation(c, gamma))
                else:
                    rec.hidden = filtered
                rec.gamma = gamma
            else:
                filtered = z  # gamma == 1: nothing filtered, compensation vanishes
                rec.hidden = filtered
            c = codebank_update(c, filtered)
            rec.filtered, rec.codebank = filtered, c
        elif variant == "jk_sum":
            jk = z if jk is None else add(jk, z)
        elif variant == "res_gcn" and l > 0:
            rec.hidden = add(z, h)
        elif variant == "oracle_h" and l > 0:
            rec.hidden = add(hadamard(z, broadcast_col(h_node, z.cols)), h)
        rec.davg = davg(rec.hidden)
        stages.append(rec)
        h = rec.hidden

    if uses_codebank:
        rep = c
    elif variant == "jk_sum":
        rep = jk
    else:
        rep = h
    logits = _mlp(rep, W, "zeta_out", cfg.out_layers)
    return ForwardTrace(logits, rep, stages, W, cfg.label_leaking)


# ----------------------------------------------------------------------------
# checkpoints


def _fmt_values(arr: np.ndarray) -> str:
    return " ".join(format(float(x), ".17g") for x in arr.ravel())


def save_checkpoint(path, cfg: ModelConfig, params: ModelParams, feature_dim: int,
                    num_classes: int, extra: dict | None = None) -> Path:
    doc = {
        "version": __version__,
        "config": asdict(cfg),
        "feature_dim": int(feature_dim),
        "num_classes": int(num_classes),
        "params": {name: {"shape": list(arr.shape), "values": _fmt_values(arr)}
                   for name, arr in params.all_arrays().items()},
    }
    if extra:
        doc["extra"] = extra
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[ModelConfig, ModelParams, dict]:
    """Returns ``(config, params, header)``; rejects any shape or name mismatch."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ParseError(f"missing checkpoint: {path}") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}: {exc.msg}") from None
    try:
        known = {f.name for f in fields(ModelConfig)}
        cfg = ModelConfig(**{k: v for k, v in doc["config"].items() if k in known})
        D, K = int(doc["feature_dim"]), int(doc["num_classes"])
        stored = doc["params"]
    except (KeyError, TypeError) as exc:
        raise ParseError(f"{path}: malformed checkpoint ({exc})") from None
    params = init_params(cfg, D, K, seed=0)
    slots = params.all_arrays()
    if stored.keys() != slots.keys():
        raise IntegrityError(f"{path}: parameter names do not match the stored config")
    for name, target in slots.items():
        entry = stored[name]
        values = np.array([float(x) for x in entry["values"].split()])
        if tuple(entry["shape"]) != target.shape or values.size != target.size:
            raise IntegrityError(f"{path}: {name} has shape {entry['shape']}, "
                                 f"config needs {list(target.shape)}")
        target[...] = values.reshape(target.shape)
    header = {k: v for k, v in doc.items() if k != "params"}
    return cfg, params, header
