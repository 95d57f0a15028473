"""Dual-branch fusion regression network and its checkpoint format.

Each modality is projected to a shared hidden size by a LoRA-adapted
linear layer followed by GELU and batch normalization; a learned
sigmoid gate blends the two branches per dimension; a residual
refinement block (linear, GELU, batch norm, dropout) polishes the fused
representation; and a two-layer head (width halved, GELU between)
produces one scalar per row.

Checkpoints use the PLYM format: magic "PLYM" | version u16 | u32
length-prefixed JSON (config + free-form training metadata) | tensor
count u32 | per tensor: name (u16 len + UTF-8), rank u8, dims u32[],
f64 payload, all little-endian.  Saves are byte-deterministic.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    DataError,
    NumericalError,
    ShapeMismatchError,
    TruncatedError,
    VersionMismatchError,
)
from .ndmath import (
    BatchNormState,
    GateUnit,
    LinearLayer,
    LoraAdapter,
    Mode,
    batchnorm_backward,
    batchnorm_forward,
    dropout_backward,
    dropout_forward,
    gated_fuse_backward,
    gated_fuse_forward,
    gelu_backward,
    gelu_forward,
    linear_backward,
    linear_forward,
    lora_backward,
    lora_forward,
)
from .rng import Stream, derive_key

CHECKPOINT_MAGIC = b"PLYM"
CHECKPOINT_VERSION = 1

LOSS_KINDS = ("mse", "mae", "huber")


@dataclass(frozen=True)
class ModelConfig:
    llm_dim: int = 4096
    uni_dim: int = 1536
    hidden: int = 1024
    rank: int = 8
    alpha: float = 16.0
    dropout: float = 0.1
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if min(self.llm_dim, self.uni_dim) < 1 or self.hidden < 2:
            raise DataError("model dims must be positive (hidden at least 2)")
        if not 1 <= self.rank <= self.hidden:
            raise DataError(f"rank must be in [1, hidden], got {self.rank}")
        if not 0.0 <= self.dropout < 1.0:
            raise DataError(f"dropout must be in [0, 1), got {self.dropout}")


@dataclass
class Branch:
    proj: LinearLayer
    lora: LoraAdapter | None
    bn: BatchNormState


@dataclass
class ModelParams:
    config: ModelConfig
    llm: Branch
    uni: Branch
    gate: GateUnit
    refine: LinearLayer
    bn_refine: BatchNormState
    head1: LinearLayer
    head2: LinearLayer

    def trainable(self) -> dict[str, np.ndarray]:
        """Named views of every trainable tensor (mutating them updates the model)."""
        out: dict[str, np.ndarray] = {}
        for tag, branch in (("llm", self.llm), ("uni", self.uni)):
            out[f"proj_{tag}.W"] = branch.proj.W
            out[f"proj_{tag}.b"] = branch.proj.b
            if branch.lora is not None:
                out[f"lora_{tag}.A"] = branch.lora.A
                out[f"lora_{tag}.B"] = branch.lora.B
            out[f"bn_{tag}.gamma"] = branch.bn.gamma
            out[f"bn_{tag}.beta"] = branch.bn.beta
        out["gate.Wg"] = self.gate.Wg
        out["gate.bg"] = self.gate.bg
        out["refine.W"] = self.refine.W
        out["refine.b"] = self.refine.b
        out["bn_refine.gamma"] = self.bn_refine.gamma
        out["bn_refine.beta"] = self.bn_refine.beta
        out["head1.W"] = self.head1.W
        out["head1.b"] = self.head1.b
        out["head2.W"] = self.head2.W
        out["head2.b"] = self.head2.b
        return out

    def all_tensors(self) -> dict[str, np.ndarray]:
        """Trainable tensors plus batch-norm running statistics."""
        out = self.trainable()
        for tag, bn in (("llm", self.llm.bn), ("uni", self.uni.bn), ("refine", self.bn_refine)):
            out[f"bn_{tag}.running_mean"] = bn.running_mean
            out[f"bn_{tag}.running_var"] = bn.running_var
        return out

    def clone(self) -> "ModelParams":
        return copy.deepcopy(self)


def _kaiming_linear(out_dim: int, in_dim: int, stream: Stream) -> LinearLayer:
    bound = np.sqrt(6.0 / in_dim)
    W = (stream.uniform(out_dim * in_dim) * 2.0 - 1.0) * bound
    return LinearLayer(W.reshape(out_dim, in_dim), np.zeros(out_dim))


def init_model(config: ModelConfig, seed: int, with_lora: bool = True) -> ModelParams:
    """Seeded initialization: Kaiming-uniform linears with zero bias,
    identity batch norm, adapter A ~ N(0, 1/in) and B = 0."""
    root = Stream(derive_key("model-init", seed))

    def branch(tag: str, in_dim: int) -> Branch:
        proj = _kaiming_linear(config.hidden, in_dim, root.split(f"proj_{tag}"))
        lora = None
        if with_lora:
            a = root.split(f"lora_{tag}").normal(config.rank * in_dim) / np.sqrt(in_dim)
            lora = LoraAdapter(
                a.reshape(config.rank, in_dim),
                np.zeros((config.hidden, config.rank)),
                config.rank,
                config.alpha,
            )
        bn = BatchNormState.identity(config.hidden, config.bn_momentum, config.bn_eps)
        return Branch(proj, lora, bn)

    half = max(1, config.hidden // 2)
    gate_w = _kaiming_linear(config.hidden, 2 * config.hidden, root.split("gate"))
    return ModelParams(
        config=config,
        llm=branch("llm", config.llm_dim),
        uni=branch("uni", config.uni_dim),
        gate=GateUnit(gate_w.W, np.zeros(config.hidden)),
        refine=_kaiming_linear(config.hidden, config.hidden, root.split("refine")),
        bn_refine=BatchNormState.identity(config.hidden, config.bn_momentum, config.bn_eps),
        head1=_kaiming_linear(half, config.hidden, root.split("head1")),
        head2=_kaiming_linear(1, half, root.split("head2")),
    )


def _check_finite(x: np.ndarray, layer: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite values detected after layer '{layer}'")


def forward(
    params: ModelParams,
    llm: np.ndarray,
    uni: np.ndarray,
    mode: Mode = Mode.EVAL,
    dropout_stream: Stream | None = None,
) -> tuple[np.ndarray, dict]:
    """Predictions (one scalar per row) plus the cache for backward."""
    llm = np.asarray(llm, dtype=np.float64)
    uni = np.asarray(uni, dtype=np.float64)
    if llm.ndim != 2 or uni.ndim != 2 or llm.shape[0] != uni.shape[0]:
        raise ShapeMismatchError(
            f"inputs must be 2-D with equal batch size, got {llm.shape} and {uni.shape}"
        )
    cache: dict = {"mode": mode}

    branches = {}
    for tag, branch, x in (("llm", params.llm, llm), ("uni", params.uni, uni)):
        z, lora_cache = lora_forward(x, branch.proj, branch.lora)
        _check_finite(z, f"proj_{tag}")
        a, gelu_cache = gelu_forward(z)
        h, bn_cache = batchnorm_forward(a, branch.bn, mode)
        _check_finite(h, f"bn_{tag}")
        cache[tag] = (lora_cache, gelu_cache, bn_cache)
        branches[tag] = h

    fused, fuse_cache = gated_fuse_forward(branches["llm"], branches["uni"], params.gate)
    _check_finite(fused, "gate")
    cache["fuse"] = fuse_cache

    r, refine_lin_cache = linear_forward(fused, params.refine)
    r, refine_gelu_cache = gelu_forward(r)
    r, refine_bn_cache = batchnorm_forward(r, params.bn_refine, mode)
    r, refine_mask = dropout_forward(r, params.config.dropout, mode, dropout_stream)
    refined = fused + r
    _check_finite(refined, "refine")
    cache["refine"] = (refine_lin_cache, refine_gelu_cache, refine_bn_cache, refine_mask)

    h1, head1_cache = linear_forward(refined, params.head1)
    h1, head_gelu_cache = gelu_forward(h1)
    out, head2_cache = linear_forward(h1, params.head2)
    _check_finite(out, "head")
    cache["head"] = (head1_cache, head_gelu_cache, head2_cache)
    return out[:, 0], cache


def backward(
    params: ModelParams, cache: dict, dpred: np.ndarray
) -> tuple[dict[str, np.ndarray], np.ndarray, np.ndarray]:
    """Gradients for all trainable tensors plus both model inputs."""
    grads: dict[str, np.ndarray] = {}

    head1_cache, head_gelu_cache, head2_cache = cache["head"]
    dy = np.asarray(dpred, dtype=np.float64)[:, None]
    dh1, grads["head2.W"], grads["head2.b"] = linear_backward(dy, head2_cache)
    dh1 = gelu_backward(dh1, head_gelu_cache)
    drefined, grads["head1.W"], grads["head1.b"] = linear_backward(dh1, head1_cache)

    refine_lin_cache, refine_gelu_cache, refine_bn_cache, refine_mask = cache["refine"]
    dr = dropout_backward(drefined, refine_mask)
    dr, grads["bn_refine.gamma"], grads["bn_refine.beta"] = batchnorm_backward(
        dr, refine_bn_cache
    )
    dr = gelu_backward(dr, refine_gelu_cache)
    dfused_via_refine, grads["refine.W"], grads["refine.b"] = linear_backward(
        dr, refine_lin_cache
    )
    dfused = drefined + dfused_via_refine  # residual skip

    du, dv, grads["gate.Wg"], grads["gate.bg"] = gated_fuse_backward(dfused, cache["fuse"])

    dinputs = {}
    for tag, branch, dbranch in (("llm", params.llm, du), ("uni", params.uni, dv)):
        lora_cache, gelu_cache, bn_cache = cache[tag]
        dh, grads[f"bn_{tag}.gamma"], grads[f"bn_{tag}.beta"] = batchnorm_backward(
            dbranch, bn_cache
        )
        dh = gelu_backward(dh, gelu_cache)
        dx, dW, db, dA, dB = lora_backward(dh, lora_cache)
        grads[f"proj_{tag}.W"] = dW
        grads[f"proj_{tag}.b"] = db
        if branch.lora is not None:
            grads[f"lora_{tag}.A"] = dA
            grads[f"lora_{tag}.B"] = dB
        dinputs[tag] = dx
    return grads, dinputs["llm"], dinputs["uni"]


def predict(params: ModelParams, llm: np.ndarray, uni: np.ndarray) -> np.ndarray:
    return forward(params, llm, uni, Mode.EVAL)[0]


def input_gradient(
    params: ModelParams, llm: np.ndarray, uni: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode predictions and d(prediction_i)/d(llm_i) per row."""
    pred, cache = forward(params, llm, uni, Mode.EVAL)
    _, dllm, _ = backward(params, cache, np.ones_like(pred))
    return pred, dllm


# ---------------------------------------------------------------------------
# Losses


def loss_forward(
    pred: np.ndarray, targets: np.ndarray, kind: str, huber_delta: float = 1.0
) -> tuple[float, np.ndarray]:
    """Batch-mean loss and its gradient with respect to predictions."""
    pred = np.asarray(pred, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if pred.shape != targets.shape:
        raise ShapeMismatchError(f"predictions {pred.shape} vs targets {targets.shape}")
    if pred.size == 0:
        raise DataError("empty batch")
    n = pred.size
    r = pred - targets
    if kind == "mse":
        return float(np.mean(r * r)), 2.0 * r / n
    if kind == "mae":
        return float(np.mean(np.abs(r))), np.sign(r) / n
    if kind == "huber":
        d = huber_delta
        small = np.abs(r) <= d
        vals = np.where(small, 0.5 * r * r, d * (np.abs(r) - 0.5 * d))
        return float(np.mean(vals)), np.clip(r, -d, d) / n
    raise DataError(f"unknown loss kind {kind!r} (expected one of {LOSS_KINDS})")


def loss_and_grads(
    params: ModelParams,
    llm: np.ndarray,
    uni: np.ndarray,
    targets: np.ndarray,
    loss_kind: str = "mse",
    huber_delta: float = 1.0,
    mode: Mode = Mode.TRAIN,
    dropout_stream: Stream | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    pred, cache = forward(params, llm, uni, mode, dropout_stream)
    loss, dpred = loss_forward(pred, targets, loss_kind, huber_delta)
    grads, _, _ = backward(params, cache, dpred)
    return loss, grads


# ---------------------------------------------------------------------------
# Checkpoint I/O


def save_checkpoint(params: ModelParams, meta: dict, path: str | Path) -> None:
    """Serialize params and metadata; identical inputs give identical bytes."""
    header_obj = {"config": asdict(params.config), "meta": meta}
    blob = json.dumps(header_obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tensors = params.all_tensors()
    chunks = [
        CHECKPOINT_MAGIC,
        struct.pack("<H", CHECKPOINT_VERSION),
        struct.pack("<I", len(blob)),
        blob,
        struct.pack("<I", len(tensors)),
    ]
    for name in sorted(tensors):
        t = np.ascontiguousarray(tensors[name], dtype=np.float64)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", t.ndim))
        chunks.append(struct.pack(f"<{t.ndim}I", *t.shape))
        chunks.append(t.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    """Read a PLYM file and validate every tensor shape against its config."""
    data = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise TruncatedError(f"{path}: truncated while reading {what}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: not a PLYM checkpoint")
    version = struct.unpack("<H", take(2, "version"))[0]
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version} unsupported")
    blob_len = struct.unpack("<I", take(4, "header length"))[0]
    header_obj = json.loads(take(blob_len, "header").decode("utf-8"))
    config = ModelConfig(**header_obj["config"])
    meta = header_obj["meta"]

    count = struct.unpack("<I", take(4, "tensor count"))[0]
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = struct.unpack("<H", take(2, "tensor name length"))[0]
        name = take(name_len, "tensor name").decode("utf-8")
        ndim = struct.unpack("<B", take(1, "tensor rank"))[0]
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, "tensor dims"))
        payload = take(8 * int(np.prod(dims)), f"tensor {name!r} payload")
        tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    if pos != len(data):
        raise TruncatedError(f"{path}: {len(data) - pos} trailing bytes")

    with_lora = "lora_llm.A" in tensors
    params = init_model(config, seed=0, with_lora=with_lora)
    expected = params.all_tensors()
    if set(expected) != set(tensors):
        missing = sorted(set(expected) ^ set(tensors))
        raise ShapeMismatchError(f"{path}: tensor set mismatch around {missing[:4]}")
    for name, target in expected.items():
        if tensors[name].shape != target.shape:
            raise ShapeMismatchError(
                f"{path}: tensor {name!r} has shape {tensors[name].shape}, "
                f"config implies {target.shape}"
            )
        target[...] = tensors[name]
    return params, meta
