"""The learnable core: single-layer LSTM over the vitals+mask sequence, a
linear fusion head over the concatenated modality vector, and analytic
gradients for the full unrolled network.

Five variants share one implementation; each selects which pieces feed the
head.  The fused vector is always assembled in the fixed order (final LSTM
hidden state, aggregated note embedding, summary embedding), restricted to
the modalities the variant uses, so e.g. the full variant has width
hidden_size + 2 * embed_dim.

Everything runs in float64.  Gradients are derived by hand through the
head, the concatenation, and the LSTM unroll; ``gradient_check`` compares
every coordinate against central finite differences of the batch objective
and is part of the test gate, not the training path.

Parameter layout (all row-major):
  w_i, w_f, w_g, w_o : (hidden, input + hidden)   gate weights over [x_t, h_{t-1}]
  b_i, b_f, b_g, b_o : (hidden,)                  gate biases (forget bias init 1.0)
  head_w             : (fusion_width,)            final linear layer
  head_b             : ()                         final bias
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import ConfigError, DataError, TrainingError

VARIANTS = ("ts_only", "notes_only", "expert_only", "ts_notes", "ts_notes_expert")

_GATE_NAMES = ("w_i", "w_f", "w_g", "w_o")
_BIAS_NAMES = ("b_i", "b_f", "b_g", "b_o")
WEIGHT_TENSOR_NAMES = frozenset(("w_i", "w_f", "w_g", "w_o", "head_w"))

CHECKPOINT_FORMAT_VERSION = 1


def variant_uses(variant: str) -> tuple[bool, bool, bool]:
    """(uses time series, uses notes, uses expert summary) for a variant."""
    table = {
        "ts_only": (True, False, False),
        "notes_only": (False, True, False),
        "expert_only": (False, False, True),
        "ts_notes": (True, True, False),
        "ts_notes_expert": (True, True, True),
    }
    if variant not in table:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return table[variant]


@dataclass(frozen=True)
class ModelDims:
    """Sizes shared by the whole pipeline.

    input_size is 2 * n_channels because each vitals channel travels with
    its observation-mask channel.
    """

    n_channels: int = 10
    hidden_size: int = 256
    embed_dim: int = 256
    n_hours: int = 48

    def __post_init__(self):
        for name in ("n_channels", "hidden_size", "embed_dim", "n_hours"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")

    @property
    def input_size(self) -> int:
        return 2 * self.n_channels

    def to_json_dict(self) -> dict:
        return {
            "n_channels": self.n_channels,
            "hidden_size": self.hidden_size,
            "embed_dim": self.embed_dim,
            "n_hours": self.n_hours,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "ModelDims":
        return cls(**{k: int(obj[k]) for k in
                      ("n_channels", "hidden_size", "embed_dim", "n_hours")})


def fusion_width(variant: str, dims: ModelDims) -> int:
    uses_ts, uses_notes, uses_expert = variant_uses(variant)
    return (dims.hidden_size * uses_ts
            + dims.embed_dim * uses_notes
            + dims.embed_dim * uses_expert)


def stable_sigmoid(z: np.ndarray) -> np.ndarray:
    """Sigmoid without overflow for any finite input."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_with_logits(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Elementwise binary cross-entropy in the softplus-stable form."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    return np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))


@dataclass
class FusionModelParams:
    """All learnable tensors for one model variant."""

    variant: str
    dims: ModelDims
    seed: int
    w_i: Optional[np.ndarray] = None
    w_f: Optional[np.ndarray] = None
    w_g: Optional[np.ndarray] = None
    w_o: Optional[np.ndarray] = None
    b_i: Optional[np.ndarray] = None
    b_f: Optional[np.ndarray] = None
    b_g: Optional[np.ndarray] = None
    b_o: Optional[np.ndarray] = None
    head_w: np.ndarray = None
    head_b: np.ndarray = None

    @property
    def uses_ts(self) -> bool:
        return variant_uses(self.variant)[0]

    @property
    def width(self) -> int:
        return fusion_width(self.variant, self.dims)

    @classmethod
    def initialize(cls, variant: str, dims: ModelDims, seed: int) -> "FusionModelParams":
        """Uniform(-k, k) with k = 1/sqrt(fan_in); forget-gate bias 1.0."""
        uses_ts, _, _ = variant_uses(variant)
        rng = np.random.default_rng(seed)
        params = cls(variant=variant, dims=dims, seed=seed)
        if uses_ts:
            fan_in = dims.input_size + dims.hidden_size
            k = 1.0 / np.sqrt(fan_in)
            for name in _GATE_NAMES:
                setattr(params, name,
                        rng.uniform(-k, k, (dims.hidden_size, fan_in)))
            params.b_i = np.zeros(dims.hidden_size)
            params.b_f = np.ones(dims.hidden_size)
            params.b_g = np.zeros(dims.hidden_size)
            params.b_o = np.zeros(dims.hidden_size)
        width = fusion_width(variant, dims)
        k = 1.0 / np.sqrt(width)
        params.head_w = rng.uniform(-k, k, width)
        params.head_b = np.zeros(())
        return params

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        """Learnable tensors in a fixed order (stable across runs)."""
        if self.uses_ts:
            for name in _GATE_NAMES + _BIAS_NAMES:
                yield name, getattr(self, name)
        yield "head_w", self.head_w
        yield "head_b", self.head_b

    def copy(self) -> "FusionModelParams":
        clone = FusionModelParams(variant=self.variant, dims=self.dims, seed=self.seed,
                                  head_w=self.head_w.copy(), head_b=self.head_b.copy())
        if self.uses_ts:
            for name in _GATE_NAMES + _BIAS_NAMES:
                setattr(clone, name, getattr(self, name).copy())
        return clone

    def validate_shapes(self) -> None:
        if self.head_w.shape != (self.width,):
            raise DataError(
                f"head_w shape {self.head_w.shape} inconsistent with variant "
                f"{self.variant} (expected ({self.width},))"
            )
        if self.head_b.shape != ():
            raise DataError("head_b must be a scalar")
        if self.uses_ts:
            fan_in = self.dims.input_size + self.dims.hidden_size
            for name in _GATE_NAMES:
                arr = getattr(self, name)
                if arr is None or arr.shape != (self.dims.hidden_size, fan_in):
                    raise DataError(f"{name} has wrong shape for dims {self.dims}")
            for name in _BIAS_NAMES:
                arr = getattr(self, name)
                if arr is None or arr.shape != (self.dims.hidden_size,):
                    raise DataError(f"{name} has wrong shape for dims {self.dims}")
        for name, arr in self.items():
            if not np.all(np.isfinite(arr)):
                raise DataError(f"parameter {name} has non-finite entries")

    def to_json_dict(self) -> dict:
        return {
            "variant": self.variant,
            "dims": self.dims.to_json_dict(),
            "seed": self.seed,
            "tensors": {name: np.asarray(arr).tolist() for name, arr in self.items()},
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "FusionModelParams":
        params = cls(variant=obj["variant"],
                     dims=ModelDims.from_json_dict(obj["dims"]),
                     seed=int(obj["seed"]))
        tensors = obj["tensors"]
        for name in list(_GATE_NAMES) + list(_BIAS_NAMES) + ["head_w", "head_b"]:
            if name in tensors:
                setattr(params, name, np.asarray(tensors[name], dtype=np.float64))
        params.validate_shapes()
        return params


@dataclass
class LstmTrace:
    """Per-timestep activations retained for backpropagation.

    All arrays are (n_hours, batch, ...); ``inputs`` holds [x_t, h_{t-1}].
    """

    inputs: np.ndarray
    gate_i: np.ndarray
    gate_f: np.ndarray
    gate_g: np.ndarray
    gate_o: np.ndarray
    cell: np.ndarray
    tanh_cell: np.ndarray
    hidden: np.ndarray


@dataclass
class ForwardTrace:
    variant: str
    fused: np.ndarray        # (batch, width)
    logits: np.ndarray       # (batch,)
    probs: np.ndarray        # (batch,), strictly inside (0, 1)
    lstm: Optional[LstmTrace] = None


def lstm_forward(x: np.ndarray, params: FusionModelParams) -> tuple[np.ndarray, LstmTrace]:
    """Run the LSTM over (batch, n_hours, input_size); zero initial state.

    Returns all hidden states (batch, n_hours, hidden) and the trace needed
    by the backward pass.  Raises TrainingError naming the timestep if an
    activation goes non-finite.
    """
    if not params.uses_ts:
        raise DataError(f"variant {params.variant} has no time-series branch")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != params.dims.input_size:
        raise DataError(
            f"x must be (batch, n_hours, {params.dims.input_size}), got {x.shape}"
        )
    batch, n_hours, _ = x.shape
    h_size = params.dims.hidden_size
    u_all = np.empty((n_hours, batch, params.dims.input_size + h_size))
    i_all = np.empty((n_hours, batch, h_size))
    f_all = np.empty((n_hours, batch, h_size))
    g_all = np.empty((n_hours, batch, h_size))
    o_all = np.empty((n_hours, batch, h_size))
    c_all = np.empty((n_hours, batch, h_size))
    tc_all = np.empty((n_hours, batch, h_size))
    h_all = np.empty((n_hours, batch, h_size))

    h_prev = np.zeros((batch, h_size))
    c_prev = np.zeros((batch, h_size))
    for t in range(n_hours):
        u = np.concatenate([x[:, t, :], h_prev], axis=1)
        gate_i = stable_sigmoid(u @ params.w_i.T + params.b_i)
        gate_f = stable_sigmoid(u @ params.w_f.T + params.b_f)
        gate_g = np.tanh(u @ params.w_g.T + params.b_g)
        gate_o = stable_sigmoid(u @ params.w_o.T + params.b_o)
        c = gate_f * c_prev + gate_i * gate_g
        tanh_c = np.tanh(c)
        h = gate_o * tanh_c
        if not (np.all(np.isfinite(c)) and np.all(np.isfinite(h))):
            raise TrainingError(f"non-finite LSTM activation at timestep {t + 1}")
        u_all[t], i_all[t], f_all[t], g_all[t] = u, gate_i, gate_f, gate_g
        o_all[t], c_all[t], tc_all[t], h_all[t] = gate_o, c, tanh_c, h
        h_prev, c_prev = h, c
    trace = LstmTrace(inputs=u_all, gate_i=i_all, gate_f=f_all, gate_g=g_all,
                      gate_o=o_all, cell=c_all, tanh_cell=tc_all, hidden=h_all)
    return np.transpose(h_all, (1, 0, 2)), trace


def _clip_open_unit(p: np.ndarray) -> np.ndarray:
    info = np.finfo(np.float64)
    return np.clip(p, info.tiny, 1.0 - info.epsneg)


def forward(params: FusionModelParams,
            x: Optional[np.ndarray] = None,
            note_vec: Optional[np.ndarray] = None,
            summary_vec: Optional[np.ndarray] = None) -> ForwardTrace:
    """Full forward pass for the variant's modalities.

    The fused vector concatenates, in order, the final-hour LSTM hidden
    state, the final-hour aggregated note embedding, and the summary
    embedding, keeping only the pieces the variant uses.
    """
    uses_ts, uses_notes, uses_expert = variant_uses(params.variant)
    parts = []
    lstm_trace = None
    batch = None
    for flag, arr, label in ((uses_ts, x, "time-series tensor x"),
                             (uses_notes, note_vec, "aggregated note embedding"),
                             (uses_expert, summary_vec, "summary embedding")):
        if flag and arr is None:
            raise DataError(f"variant {params.variant} requires {label}")
    if uses_ts:
        _, lstm_trace = lstm_forward(x, params)
        parts.append(lstm_trace.hidden[-1])
        batch = x.shape[0]
    if uses_notes:
        note_vec = np.asarray(note_vec, dtype=np.float64)
        if note_vec.ndim != 2 or note_vec.shape[1] != params.dims.embed_dim:
            raise DataError(f"note embedding must be (batch, {params.dims.embed_dim})")
        parts.append(note_vec)
        batch = note_vec.shape[0]
    if uses_expert:
        summary_vec = np.asarray(summary_vec, dtype=np.float64)
        if summary_vec.ndim != 2 or summary_vec.shape[1] != params.dims.embed_dim:
            raise DataError(f"summary embedding must be (batch, {params.dims.embed_dim})")
        parts.append(summary_vec)
        batch = summary_vec.shape[0]
    if len({p.shape[0] for p in parts}) != 1:
        raise DataError("modality tensors disagree on batch size")
    fused = np.concatenate(parts, axis=1)
    logits = fused @ params.head_w + float(params.head_b)
    probs = _clip_open_unit(stable_sigmoid(logits))
    return ForwardTrace(variant=params.variant, fused=fused, logits=logits,
                        probs=probs, lstm=lstm_trace)


def backward(trace: ForwardTrace, labels: np.ndarray, l2: float,
             params: FusionModelParams) -> dict[str, np.ndarray]:
    """Gradients of mean-BCE + l2 * sum of squared weights.

    Biases are excluded from the L2 term.  The trace must come from
    ``forward`` on the same parameters.
    """
    y = np.asarray(labels, dtype=np.float64)
    batch = trace.probs.shape[0]
    if y.shape != (batch,):
        raise DataError(f"labels must have shape ({batch},), got {y.shape}")
    dz = (trace.probs - y) / batch
    grads: dict[str, np.ndarray] = {
        "head_w": trace.fused.T @ dz,
        "head_b": np.asarray(dz.sum()),
    }
    d_fused = np.outer(dz, params.head_w)
    if params.uses_ts:
        h_size = params.dims.hidden_size
        din = params.dims.input_size
        lstm = trace.lstm
        n_hours = lstm.hidden.shape[0]
        for name in _GATE_NAMES + _BIAS_NAMES:
            grads[name] = np.zeros_like(getattr(params, name))
        dh = d_fused[:, :h_size].copy()
        dc = np.zeros_like(dh)
        for t in range(n_hours - 1, -1, -1):
            gi, gf = lstm.gate_i[t], lstm.gate_f[t]
            gg, go = lstm.gate_g[t], lstm.gate_o[t]
            tanh_c = lstm.tanh_cell[t]
            c_prev = lstm.cell[t - 1] if t > 0 else np.zeros_like(dc)
            d_o = dh * tanh_c
            dc = dc + dh * go * (1.0 - tanh_c**2)
            d_i = dc * gg
            d_f = dc * c_prev
            d_g = dc * gi
            da = {
                "i": d_i * gi * (1.0 - gi),
                "f": d_f * gf * (1.0 - gf),
                "g": d_g * (1.0 - gg**2),
                "o": d_o * go * (1.0 - go),
            }
            u = lstm.inputs[t]
            du = np.zeros_like(u)
            for gate in ("i", "f", "g", "o"):
                grads[f"w_{gate}"] += da[gate].T @ u
                grads[f"b_{gate}"] += da[gate].sum(axis=0)
                du += da[gate] @ getattr(params, f"w_{gate}")
            dh = du[:, din:]
            dc = dc * gf
    if l2 != 0.0:
        for name, arr in params.items():
            if name in WEIGHT_TENSOR_NAMES:
                grads[name] = grads[name] + 2.0 * l2 * arr
    return grads


@dataclass
class FeatureBatch:
    """Assembled per-episode tensors consumed by forward/backward.

    Fields the variant does not use may be None.
    """

    labels: np.ndarray
    x: Optional[np.ndarray] = None            # (n, n_hours, input_size)
    note_vec: Optional[np.ndarray] = None     # (n, embed_dim)
    summary_vec: Optional[np.ndarray] = None  # (n, embed_dim)
    episode_ids: Optional[list[str]] = None
    demographics: Optional[list] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.float64)

    @property
    def n(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, idx: np.ndarray) -> "FeatureBatch":
        take = lambda a: None if a is None else a[idx]
        return FeatureBatch(
            labels=self.labels[idx],
            x=take(self.x),
            note_vec=take(self.note_vec),
            summary_vec=take(self.summary_vec),
            episode_ids=None if self.episode_ids is None
            else [self.episode_ids[int(i)] for i in idx],
            demographics=None if self.demographics is None
            else [self.demographics[int(i)] for i in idx],
        )


def forward_batch(params: FusionModelParams, batch: FeatureBatch) -> ForwardTrace:
    return forward(params, x=batch.x, note_vec=batch.note_vec,
                   summary_vec=batch.summary_vec)


def l2_penalty(params: FusionModelParams, l2: float) -> float:
    if l2 == 0.0:
        return 0.0
    return l2 * sum(float(np.sum(arr**2)) for name, arr in params.items()
                    if name in WEIGHT_TENSOR_NAMES)


def batch_objective(params: FusionModelParams, batch: FeatureBatch,
                    l2: float) -> float:
    """mean BCE over the batch plus the L2 weight penalty; the quantity
    whose gradient ``backward`` computes."""
    trace = forward_batch(params, batch)
    return float(np.mean(bce_with_logits(trace.logits, batch.labels))) + \
        l2_penalty(params, l2)


def gradient_check(params: FusionModelParams, batch: FeatureBatch,
                   l2: float = 0.0, epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per coordinate is |g_a - g_fd| / max(1e-8, |g_a| + |g_fd|).
    Double precision only; no gradient clipping is involved here.
    """
    trace = forward_batch(params, batch)
    analytic = backward(trace, batch.labels, l2, params)
    worst = 0.0
    for name, arr in params.items():
        for j in range(arr.size):
            original = arr.flat[j]
            arr.flat[j] = original + epsilon
            loss_plus = batch_objective(params, batch, l2)
            arr.flat[j] = original - epsilon
            loss_minus = batch_objective(params, batch, l2)
            arr.flat[j] = original
            g_fd = (loss_plus - loss_minus) / (2.0 * epsilon)
            g_a = float(np.asarray(analytic[name]).flat[j])
            rel = abs(g_a - g_fd) / max(1e-8, abs(g_a) + abs(g_fd))
            worst = max(worst, rel)
    return worst


def canonical_json_bytes(obj) -> bytes:
    """Deterministic JSON encoding used for checkpoints and hashing."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def checkpoint_dict(params: FusionModelParams, meta: Optional[dict] = None) -> dict:
    obj = {"format_version": CHECKPOINT_FORMAT_VERSION, "model": params.to_json_dict()}
    if meta:
        obj.update(meta)
    return obj


def save_checkpoint(path, params: FusionModelParams,
                    meta: Optional[dict] = None) -> str:
    """Write a checkpoint; returns the sha256 content hash of the file."""
    payload = canonical_json_bytes(checkpoint_dict(params, meta))
    Path(path).write_bytes(payload)
    return hashlib.sha256(payload).hexdigest()


def load_checkpoint(path) -> tuple[FusionModelParams, dict]:
    """Read a checkpoint; returns (params, full checkpoint dict)."""
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"checkpoint {path} is not valid JSON: {exc}") from exc
    version = obj.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise DataError(
            f"checkpoint {path} has format_version {version!r}, "
            f"expected {CHECKPOINT_FORMAT_VERSION}"
        )
    return FusionModelParams.from_json_dict(obj["model"]), obj


def params_content_hash(params: FusionModelParams) -> str:
    return hashlib.sha256(canonical_json_bytes(params.to_json_dict())).hexdigest()
