"""Gated recurrent network mapping a query feature to a bias vector.

The dim-length feature is split into T consecutive chunks and fed through a
single LSTM cell, then a zero-initialized linear head maps the final hidden
state to a dim-length bias. Zero head => zero bias at initialization, so the
adapted textual cache starts exactly at the frozen one.

Forward/backward accept a batch (B, dim) or a single vector (dim,).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .numerics import Rng

GATES = ("i", "f", "o", "g")


@dataclass
class ConditionNetParams:
    dim: int
    chunk_count: int            # T
    hidden_size: int            # h
    W: dict[str, np.ndarray]    # gate input weights, (h, dim/T) each
    U: dict[str, np.ndarray]    # gate recurrent weights, (h, h) each
    b: dict[str, np.ndarray]    # gate biases, (h,) each
    W_out: np.ndarray           # (dim, h), zero at init
    b_out: np.ndarray           # (dim,), zero at init

    @property
    def chunk_size(self) -> int:
        return self.dim // self.chunk_count

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for g in GATES:
            out[f"W_{g}"] = self.W[g]
            out[f"U_{g}"] = self.U[g]
            out[f"b_{g}"] = self.b[g]
        out["W_out"] = self.W_out
        out["b_out"] = self.b_out
        return out

    def param_count(self) -> int:
        return 4 * self.hidden_size * (self.chunk_size + self.hidden_size + 1) \
            + self.dim * (self.hidden_size + 1)


def init_condition_net(dim: int, chunk_count: int = 8, hidden_size: int = 64,
                       rng: Rng | None = None) -> ConditionNetParams:
    """Gate weights uniform(-1/sqrt(h), 1/sqrt(h)); forget-gate bias 1.0;
    output head exactly zero."""
    if dim % chunk_count != 0:
        raise ConfigError(f"dim {dim} not divisible by chunk count {chunk_count}")
    rng = rng or Rng(0)
    h = hidden_size
    cs = dim // chunk_count
    bound = 1.0 / np.sqrt(h)
    W = {g: rng.uniform(-bound, bound, (h, cs)) for g in GATES}
    U = {g: rng.uniform(-bound, bound, (h, h)) for g in GATES}
    b = {g: np.zeros(h) for g in GATES}
    b["f"] = np.ones(h)
    return ConditionNetParams(dim, chunk_count, h, W, U, b,
                              np.zeros((dim, h)), np.zeros(dim))


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass
class NetTape:
    """Per-step activations from one forward pass; consumed once by the
    matching backward pass."""
    X: list = field(default_factory=list)        # chunks, (B, cs)
    gates: list = field(default_factory=list)    # dicts of (B, h)
    C: list = field(default_factory=list)        # cell states incl. c_0
    H: list = field(default_factory=list)        # hidden states incl. h_0
    consumed: bool = False


def condition_forward(params: ConditionNetParams, f_test: np.ndarray):
    """Run the recurrence; returns (s, tape). s is (dim,) for a vector input,
    (B, dim) for a batch."""
    F = np.asarray(f_test, dtype=np.float64)
    single = F.ndim == 1
    if single:
        F = F[None, :]
    if F.shape[1] != params.dim:
        raise ShapeError(f"feature length {F.shape[1]} != dim {params.dim}")
    B = F.shape[0]
    h = params.hidden_size
    cs = params.chunk_size

    tape = NetTape()
    hs = np.zeros((B, h))
    cs_state = np.zeros((B, h))
    tape.H.append(hs)
    tape.C.append(cs_state)
    for t in range(params.chunk_count):
        x = F[:, t * cs:(t + 1) * cs]
        pre = {g: x @ params.W[g].T + hs @ params.U[g].T + params.b[g]
               for g in GATES}
        i = _sigmoid(pre["i"])
        f = _sigmoid(pre["f"])
        o = _sigmoid(pre["o"])
        g = np.tanh(pre["g"])
        cs_state = f * cs_state + i * g
        hs = o * np.tanh(cs_state)
        tape.X.append(x)
        tape.gates.append({"i": i, "f": f, "o": o, "g": g})
        tape.C.append(cs_state)
        tape.H.append(hs)
    s = hs @ params.W_out.T + params.b_out
    return (s[0] if single else s), tape


def condition_backward(params: ConditionNetParams, tape: NetTape,
                       d_s: np.ndarray):
    """Exact reverse-mode gradients of s w.r.t. every parameter and the input.

    Returns (grads dict keyed like tensors(), d_f_test). The tape is consumed;
    reuse raises ContractError.
    """
    if tape.consumed:
        raise ContractError("NetTape already consumed by a backward pass")
    tape.consumed = True

    dS = np.asarray(d_s, dtype=np.float64)
    single = dS.ndim == 1
    if single:
        dS = dS[None, :]
    B = dS.shape[0]
    T = params.chunk_count
    h = params.hidden_size

    grads = {k: np.zeros_like(v) for k, v in params.tensors().items()}
    grads["W_out"] = dS.T @ tape.H[T]
    grads["b_out"] = dS.sum(axis=0)
    dh = dS @ params.W_out
    dc = np.zeros((B, h))
    dF_chunks = []
    for t in range(T - 1, -1, -1):
        g = tape.gates[t]
        c_t = tape.C[t + 1]
        c_prev = tape.C[t]
        h_prev = tape.H[t]
        tanh_c = np.tanh(c_t)
        do = dh * tanh_c
        dc = dc + dh * g["o"] * (1.0 - tanh_c ** 2)
        di = dc * g["g"]
        dg = dc * g["i"]
        df = dc * c_prev
        dc = dc * g["f"]
        dz = {
            "i": di * g["i"] * (1.0 - g["i"]),
            "f": df * g["f"] * (1.0 - g["f"]),
            "o": do * g["o"] * (1.0 - g["o"]),
            "g": dg * (1.0 - g["g"] ** 2),
        }
        dh = np.zeros((B, h))
        dx = np.zeros_like(tape.X[t])
        for name in GATES:
            grads[f"W_{name}"] += dz[name].T @ tape.X[t]
            grads[f"U_{name}"] += dz[name].T @ h_prev
            grads[f"b_{name}"] += dz[name].sum(axis=0)
            dh += dz[name] @ params.U[name]
            dx += dz[name] @ params.W[name]
        dF_chunks.append(dx)
    dF = np.concatenate(dF_chunks[::-1], axis=1)
    return grads, (dF[0] if single else dF)
