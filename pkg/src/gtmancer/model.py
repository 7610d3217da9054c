"""End-to-end network: encode, align, K propagation layers, fuse, classify."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import diffcore as dc
from .align import alignment_loss, build_target_matrix, encode
from .attention import inter_attention_raw, intra_attention, project_inter_attention
from .dataio import LabelMask, MultiOmicsDataset, split_semi_supervised
from .diffcore import Node
from .errors import ContractError, DigestMismatchError, DivergenceError, FormatError, ParameterError
from .graphopt import EmbeddingState, MultiplexStructure, objective_value

log = logging.getLogger(__name__)

FUSION_MODES = ("mean", "sum", "concat")
OPTIMIZERS = ("adam", "gd")
MAGIC = b"GTMANCER"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    K: int = 3
    tau: float = 10.0
    learning_rate: float = 1e-2
    weight_decay: float = 5e-5
    dropout_rate: float = 0.5
    epochs: int = 200
    fusion: str = "mean"
    seed: int = 0
    label_ratio: float = 0.1
    latent_dim: int = 64
    projection_tol: float = 1e-8
    projection_max_iter: int = 10_000
    spectral_limit: float = 2.7
    optimizer: str = "adam"

    def __post_init__(self):
        if self.K < 1:
            raise ParameterError("K must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ParameterError("dropout_rate must lie in [0, 1)")
        if not 0.0 < self.label_ratio < 1.0:
            raise ParameterError("label_ratio must lie in (0, 1)")
        if self.optimizer not in OPTIMIZERS:
            raise ParameterError(f"optimizer must be one of {OPTIMIZERS}")
        if self.fusion not in FUSION_MODES:
            raise ParameterError(f"fusion must be one of {FUSION_MODES}")
        if self.epochs < 0 or self.latent_dim < 1:
            raise ParameterError("epochs must be >= 0 and latent_dim >= 1")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ParameterError("learning_rate and weight_decay must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_mapping(cls, values: Mapping, base: "TrainConfig | None" = None) -> "TrainConfig":
        """Build from string or typed values, layered over ``base``."""
        current = (base or cls()).to_dict()
        types = {f.name: type(current[f.name]) for f in fields(cls)}
        for key, raw in values.items():
            if key not in types:
                raise ParameterError(f"unknown config key {key!r}")
            current[key] = types[key](raw)
        return cls(**current)


@dataclass
class ModelParams:
    tensors: dict
    widths: tuple
    class_count: int
    latent_dim: int
    K: int
    fusion: str

    @property
    def M(self) -> int:
        return len(self.widths)

    @property
    def fused_dim(self) -> int:
        return self.M * self.latent_dim if self.fusion == "concat" else self.latent_dim

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()}, self.widths,
                           self.class_count, self.latent_dim, self.K, self.fusion)

    def count(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))


def param_names(M: int, K: int) -> list:
    names = []
    for m in range(M):
        names += [f"enc.W.{m}", f"enc.b.{m}"]
    for k in range(K):
        for m in range(M):
            names += [f"att.K.{k}.{m}", f"att.Q.{k}.{m}"]
        names += [f"att.K.{k}.shared", f"att.Q.{k}.shared"]
    names.append("cls.W")
    return names


def init_params(widths: Sequence[int], class_count: int, config: TrainConfig) -> ModelParams:
    """Uniform in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``, drawn in a fixed order."""
    rng = np.random.default_rng(config.seed)
    d, M, K = config.latent_dim, len(widths), config.K
    fused = M * d if config.fusion == "concat" else d
    shapes = {}
    for m, w in enumerate(widths):
        shapes[f"enc.W.{m}"] = ((w, d), w)
        shapes[f"enc.b.{m}"] = ((1, d), w)
    for k in range(K):
        for tag in [str(m) for m in range(M)] + ["shared"]:
            shapes[f"att.K.{k}.{tag}"] = ((d, d), d)
            shapes[f"att.Q.{k}.{tag}"] = ((d, d), d)
    shapes["cls.W"] = ((fused, class_count), fused)
    tensors = {}
    for name in param_names(M, K):
        shape, fan_in = shapes[name]
        bound = 1.0 / math.sqrt(fan_in)
        tensors[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(tensors, tuple(widths), class_count, d, K, config.fusion)


@dataclass
class ForwardResult:
    logits: Node
    fused: Node
    Z_init: list
    Z_final: list
    per_layer_objective: list = field(default_factory=list)
    projection_reports: list = field(default_factory=list)
    safety_factors: list = field(default_factory=list)


def fuse(Z_list: Sequence[Node], mode: str = "mean") -> Node:
    if not Z_list:
        raise ContractError("fuse: empty modality list")
    if mode == "mean":
        return dc.mean_n(list(Z_list))
    if mode == "sum":
        return dc.add_n(list(Z_list))
    if mode == "concat":
        return dc.concat_cols(list(Z_list))
    raise ParameterError(f"unknown fusion mode {mode!r}")


def _propagate(Z: list, Z_init: list, S: list, P: Node) -> list:
    """One second-order layer on graph nodes (mirrors graphopt.second_order_step)."""
    M = len(Z)
    out = []
    for m in range(M):
        mixed = dc.add_n([dc.mul_scalar(Z[e], dc.pick(P, e, m)) for e in range(M)]) + Z_init[m]
        s = S[m]
        smooth = dc.matmul(s, dc.matmul(s, Z[m]))
        out.append(dc.scale(smooth + dc.scale(mixed, 3.0) + dc.matmul(s, mixed), 1.0 / 9.0))
    return out


def network(views: Sequence[np.ndarray], nodes: Mapping[str, Node], config: TrainConfig,
            K: int, fusion: str, mode: str = "eval",
            rng: Optional[np.random.Generator] = None, track_objective: bool = True) -> ForwardResult:
    """Build the forward graph from explicit parameter nodes."""
    if mode not in ("train", "eval"):
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
    M = len(views)
    Z_init = []
    for m, V in enumerate(views):
        z = encode(V, nodes[f"enc.W.{m}"], nodes[f"enc.b.{m}"])
        if mode == "train" and config.dropout_rate > 0:
            z = dc.dropout(z, config.dropout_rate, rng if rng is not None else np.random.default_rng(config.seed))
        Z_init.append(z)

    result = ForwardResult(None, None, Z_init, [])
    Z = list(Z_init)
    anchors = [z.value for z in Z_init]
    for k in range(K):
        S, factors = [], []
        for m in range(M):
            s, factor = intra_attention(Z[m], nodes[f"att.K.{k}.{m}"], nodes[f"att.Q.{k}.{m}"],
                                        config.spectral_limit, strict=mode == "eval")
            S.append(s)
            factors.append(factor)
        P_raw = inter_attention_raw(Z, nodes[f"att.K.{k}.shared"], nodes[f"att.Q.{k}.shared"])
        P, report = project_inter_attention(P_raw, config.projection_tol, config.projection_max_iter)
        result.projection_reports.append(report)
        result.safety_factors.append(factors)
        if track_objective:
            structure = MultiplexStructure(tuple(s.value for s in S), P.value)
            if k == 0:
                result.per_layer_objective.append(
                    objective_value(EmbeddingState(tuple(z.value for z in Z), tuple(anchors)), structure))
        Z = _propagate(Z, Z_init, S, P)
        if track_objective:
            result.per_layer_objective.append(
                objective_value(EmbeddingState(tuple(z.value for z in Z), tuple(anchors)), structure))
    result.Z_final = Z
    result.fused = fuse(Z, fusion)
    result.logits = dc.matmul(result.fused, nodes["cls.W"])
    return result


def _const_nodes(params: ModelParams) -> dict:
    return {k: dc.const(v, name=k) for k, v in params.tensors.items()}


def forward(dataset: MultiOmicsDataset, params: ModelParams, config: TrainConfig,
            mask: Optional[LabelMask] = None, mode: str = "eval", rng=None, nodes=None) -> ForwardResult:
    """Run the network on a dataset. ``mask`` is accepted for symmetry with the losses and unused here."""
    if dataset.widths != params.widths:
        raise FormatError(f"dataset widths {dataset.widths} do not match the model's {params.widths}")
    views = [v.features for v in dataset.views]
    return network(views, nodes or _const_nodes(params), config, params.K, params.fusion, mode, rng)


def cross_entropy_loss(logits: Node, labels, train_indices) -> Node:
    """Summed cross-entropy of the row softmax over labeled rows."""
    train = np.asarray(train_indices, dtype=np.int64)
    if train.size == 0:
        raise ContractError("cross_entropy_loss: no labeled samples")
    labels = np.asarray(labels)
    onehot = np.zeros(logits.shape)
    onehot[train, labels[train]] = 1.0
    return dc.scale(dc.sum_all(dc.mul(dc.const(onehot), dc.row_log_softmax(logits))), -1.0)


def total_loss(l_ct, l_ce):
    return l_ct + l_ce


def loss_terms(result: ForwardResult, labels, mask: LabelMask, tau: float) -> tuple:
    T = build_target_matrix(labels, mask.train_indices)
    l_ct = alignment_loss(result.Z_init, T, tau)
    l_ce = cross_entropy_loss(result.logits, labels, mask.train_indices)
    return l_ct, l_ce


# -- training -------------------------------------------------------------------

def _adam(tensors, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam direction per named tensor."""
    first = {k: np.zeros_like(v) for k, v in tensors.items()}
    second = {k: np.zeros_like(v) for k, v in tensors.items()}
    counts = dict.fromkeys(tensors, 0)

    def direction(name, g):
        counts[name] += 1
        t = counts[name]
        first[name] = beta1 * first[name] + (1 - beta1) * g
        second[name] = beta2 * second[name] + (1 - beta2) * g * g
        m_hat = first[name] / (1 - beta1 ** t)
        v_hat = second[name] / (1 - beta2 ** t)
        return m_hat / (np.sqrt(v_hat) + eps)

    return direction


def fit(dataset: MultiOmicsDataset, config: TrainConfig, mask: Optional[LabelMask] = None,
        params: Optional[ModelParams] = None) -> tuple:
    """Full-batch training with decoupled weight decay.

    ``config.optimizer`` selects Adam (default) or plain gradient descent.
    Returns ``(params, log)``; the parameters are those of the final epoch.
    Each log record holds ``epoch``, ``l_ct``, ``l_ce``, ``l_total`` and
    ``train_acc``.
    """
    if mask is None:
        mask = split_semi_supervised(dataset, config.label_ratio, config.seed)
    if params is None:
        params = init_params(dataset.widths, dataset.class_count, config)
    params = params.copy()
    views = [v.features for v in dataset.views]
    labels = dataset.labels
    lr, wd = config.learning_rate, config.weight_decay
    history = []
    step = _adam(params.tensors) if config.optimizer == "adam" else None
    for epoch in range(config.epochs):
        leaves = {k: dc.param(v, name=k) for k, v in params.tensors.items()}
        rng = np.random.default_rng([config.seed, epoch])
        result = network(views, leaves, config, params.K, params.fusion, "train", rng, track_objective=False)
        l_ct, l_ce = loss_terms(result, labels, mask, config.tau)
        loss = total_loss(l_ct, l_ce)
        if not np.isfinite(loss.item()):
            raise DivergenceError(f"non-finite loss at epoch {epoch}", epoch=epoch)
        grads = dc.backward(loss, leaves.values())
        for name, leaf in leaves.items():
            p = params.tensors[name]
            direction = grads[leaf] if step is None else step(name, grads[leaf])
            params.tensors[name] = p - lr * direction - lr * wd * p
        pred = np.argmax(result.logits.value[mask.train_indices], axis=1)
        record = {
            "epoch": epoch,
            "l_ct": l_ct.item(),
            "l_ce": l_ce.item(),
            "l_total": loss.item(),
            "train_acc": float(np.mean(pred == labels[mask.train_indices])),
        }
        history.append(record)
        log.debug("epoch %d  L_ct=%.6g  L_ce=%.6g  acc=%.3f", epoch, record["l_ct"], record["l_ce"],
                  record["train_acc"])
    return params, history


# -- evaluation -----------------------------------------------------------------

@dataclass
class EvalReport:
    accuracy: float
    macro_f1: float
    per_class_f1: list
    confusion: list
    per_layer_objective: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def confusion_matrix(truth, pred, class_count: int) -> np.ndarray:
    C = np.zeros((class_count, class_count), dtype=np.int64)
    np.add.at(C, (np.asarray(truth), np.asarray(pred)), 1)
    return C


def metrics_from_predictions(truth, pred, class_count: int, per_layer_objective=()) -> EvalReport:
    """Accuracy and macro-F1 from a confusion matrix; F1 is 0 wherever it is 0/0."""
    C = confusion_matrix(truth, pred, class_count)
    tp = np.diag(C).astype(float)
    denom = C.sum(axis=0) + C.sum(axis=1)
    f1 = np.where(denom > 0, 2.0 * tp / np.maximum(denom, 1), 0.0)
    total = C.sum()
    acc = float(tp.sum() / total) if total else 0.0
    return EvalReport(acc, float(f1.mean()), [float(x) for x in f1], C.tolist(),
                      [float(h) for h in per_layer_objective])


def predict_proba(dataset, params, config) -> np.ndarray:
    logits = forward(dataset, params, config, mode="eval").logits
    return dc.row_softmax(logits).value


def evaluate(dataset: MultiOmicsDataset, params: ModelParams, config: TrainConfig,
             mask: LabelMask) -> EvalReport:
    result = forward(dataset, params, config, mask, mode="eval")
    test = mask.test_indices
    pred = np.argmax(result.logits.value[test], axis=1)
    return metrics_from_predictions(dataset.labels[test], pred, dataset.class_count,
                                    result.per_layer_objective)


# -- container ------------------------------------------------------------------

def config_digest(config: TrainConfig, widths: Sequence[int], class_count: int) -> str:
    blob = json.dumps({"config": config.to_dict(), "widths": list(widths), "class_count": class_count},
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def save_params(path, params: ModelParams, config: TrainConfig):
    """Write ``MAGIC | u32 version | u32 header length | JSON header | float64 payloads``."""
    names = param_names(params.M, params.K)
    header = {
        "config": config.to_dict(),
        "widths": list(params.widths),
        "class_count": params.class_count,
        "digest": config_digest(config, params.widths, params.class_count),
        "tensors": [[n, *params.tensors[n].shape] for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(params.tensors[n], dtype="<f8").tobytes() for n in names)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(MAGIC + struct.pack("<II", FORMAT_VERSION, len(blob)) + blob + payload)
    tmp.replace(path)


def load_params(path) -> tuple:
    """Return ``(ModelParams, TrainConfig, header)``."""
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise FormatError(f"{path}: not a model container")
    offset = len(MAGIC)
    version, hlen = struct.unpack_from("<II", data, offset)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported container version {version}")
    offset += 8
    header = json.loads(data[offset:offset + hlen])
    offset += hlen
    config = TrainConfig(**header["config"])
    if header["digest"] != config_digest(config, header["widths"], header["class_count"]):
        raise DigestMismatchError(f"{path}: header digest does not match its own config")
    tensors = {}
    for name, rows, cols in header["tensors"]:
        size = rows * cols * 8
        if offset + size > len(data):
            raise FormatError(f"{path}: truncated payload at {name}")
        tensors[name] = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=offset).reshape(rows, cols).copy()
        offset += size
    params = ModelParams(tensors, tuple(header["widths"]), header["class_count"], config.latent_dim,
                         config.K, config.fusion)
    return params, config, header


def check_compatible(header: Mapping, dataset: MultiOmicsDataset):
    """Raise :class:`DigestMismatchError` unless the dataset matches the container."""
    config = TrainConfig(**header["config"])
    expected = config_digest(config, dataset.widths, dataset.class_count)
    if expected != header["digest"]:
        raise DigestMismatchError(
            f"config digest mismatch: model expects widths {header['widths']} / {header['class_count']} classes, "
            f"dataset has {list(dataset.widths)} / {dataset.class_count}")
