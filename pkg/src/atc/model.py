"""Fused two-branch classification head: visual cache affinities plus an
instance-adapted textual cache, combined into logits, with exact
reverse-mode gradients for all trainable tensors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .caches import TextualCache, VisualCache, adapt_textual_cache
from .conditionnet import ConditionNetParams, condition_backward, condition_forward
from .errors import ShapeError
from .numerics import one_hot, softmax

ACTIVATIONS = ("linear", "tip")
_NORM_EPS = 1e-12


@dataclass
class AtcModel:
    textual: TextualCache
    visual: VisualCache
    net: ConditionNetParams
    alpha: float = 1.0
    beta: float = 1.0
    logit_scale: float = 100.0
    activation: str = "linear"      # linear | tip
    tip_gamma: float = 1.0
    adaptive_text: bool = True      # False freezes the bias network (s = 0)

    @property
    def num_classes(self) -> int:
        return self.textual.num_classes

    @property
    def dim(self) -> int:
        return self.textual.dim


@dataclass
class Prediction:
    logits: np.ndarray
    probabilities: np.ndarray
    predicted_class: int
    f_visual: np.ndarray
    f_textual: np.ndarray
    bias: np.ndarray


def trainables(model: AtcModel) -> dict[str, np.ndarray]:
    """Live references to every trainable tensor, keyed by group name."""
    out: dict[str, np.ndarray] = {}
    if model.adaptive_text:
        for k, v in model.net.tensors().items():
            out[f"net.{k}"] = v
    if model.visual.mode == "biases":
        out["visual.biases"] = model.visual.biases
    elif model.visual.mode == "linear":
        out["visual.linear"] = model.visual.linear
    return out


def set_trainables(model: AtcModel, values: dict[str, np.ndarray]) -> None:
    live = trainables(model)
    for k, v in values.items():
        np.copyto(live[k], v)


def _normalize_rows_fwd(raw: np.ndarray):
    """Row renorm keeping what backward needs: norms and the zero-row mask
    (zero rows pass through unchanged)."""
    norms = np.linalg.norm(raw, axis=-1, keepdims=True)
    zero = norms <= _NORM_EPS
    safe = np.where(zero, 1.0, norms)
    return raw / safe, safe, zero


def _normalize_rows_bwd(d_unit, unit, safe, zero):
    inner = np.sum(unit * d_unit, axis=-1, keepdims=True)
    d_raw = (d_unit - inner * unit) / safe
    return np.where(zero, d_unit, d_raw)


def _visual_rows(cache: VisualCache):
    if cache.mode == "linear":
        return cache.linear, None
    raw = cache.support if cache.mode == "fixed" else cache.support + cache.biases
    if cache.renormalize:
        unit, safe, zero = _normalize_rows_fwd(raw)
        return unit, (safe, zero)
    return raw, None


def _activate(a_raw: np.ndarray, activation: str, gamma: float) -> np.ndarray:
    if activation == "tip":
        return np.exp(-gamma * (1.0 - a_raw))
    return a_raw


def _forward(model: AtcModel, F: np.ndarray, self_indices=None):
    """Batched forward over queries F (B, dim). Returns (logits, ctx)."""
    if F.ndim != 2 or F.shape[1] != model.dim:
        raise ShapeError(f"queries shape {F.shape} incompatible with dim {model.dim}")
    B = F.shape[0]

    # visual branch
    rows, vnorm = _visual_rows(model.visual)
    a_raw = F @ rows.T
    a_act = _activate(a_raw, model.activation, model.tip_gamma)
    if self_indices is not None:
        a_act = a_act.copy()
        a_act[np.arange(B), self_indices] = 0.0
    f1 = a_act @ model.visual.labels_onehot

    # textual branch
    if model.adaptive_text:
        S, tape = condition_forward(model.net, F)
    else:
        S, tape = np.zeros((B, model.dim)), None
    V = model.textual.class_texts[None, :, :] + S[:, None, :]
    if model.textual.renormalize:
        U, tsafe, tzero = _normalize_rows_fwd(V)
    else:
        U, tsafe, tzero = V, None, None
    f2 = np.einsum("bd,bcd->bc", F, U)

    logits = model.logit_scale * (model.alpha * f1 + model.beta * f2)
    ctx = dict(F=F, rows=rows, vnorm=vnorm, a_raw=a_raw, a_act=a_act,
               self_indices=self_indices, f1=f1, f2=f2, S=S, tape=tape,
               U=U, tsafe=tsafe, tzero=tzero)
    return logits, ctx


def _backward(model: AtcModel, ctx, d_logits: np.ndarray) -> dict[str, np.ndarray]:
    F = ctx["F"]
    B = F.shape[0]
    grads: dict[str, np.ndarray] = {}
    df1 = model.logit_scale * model.alpha * d_logits
    df2 = model.logit_scale * model.beta * d_logits

    if model.visual.mode in ("biases", "linear"):
        da_act = df1 @ model.visual.labels_onehot.T
        if ctx["self_indices"] is not None:
            da_act = da_act.copy()
            da_act[np.arange(B), ctx["self_indices"]] = 0.0
        if model.activation == "tip":
            da_raw = da_act * model.tip_gamma * ctx["a_act"]
        else:
            da_raw = da_act
        d_rows = da_raw.T @ F
        if model.visual.mode == "linear":
            grads["visual.linear"] = d_rows
        else:
            if ctx["vnorm"] is not None:
                safe, zero = ctx["vnorm"]
                d_rows = _normalize_rows_bwd(d_rows, ctx["rows"], safe, zero)
            grads["visual.biases"] = d_rows

    if model.adaptive_text:
        dU = df2[:, :, None] * F[:, None, :]
        if model.textual.renormalize:
            dV = _normalize_rows_bwd(dU, ctx["U"], ctx["tsafe"], ctx["tzero"])
        else:
            dV = dU
        dS = dV.sum(axis=1)
        net_grads, _ = condition_backward(model.net, ctx["tape"], dS)
        for k, v in net_grads.items():
            grads[f"net.{k}"] = v
    return grads


def _loss_from_logits(logits: np.ndarray, targets: np.ndarray):
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    idx = np.arange(logits.shape[0])
    losses = logz - shifted[idx, targets]
    probs = np.exp(shifted - logz[:, None])
    return float(losses.mean()), probs


def batch_loss(model: AtcModel, queries: np.ndarray, targets,
               self_indices=None) -> float:
    """Mean cross-entropy of the fused logits over a query batch."""
    targets = np.asarray(targets, dtype=np.int64)
    logits, _ = _forward(model, np.asarray(queries, dtype=np.float64),
                         self_indices)
    loss, _ = _loss_from_logits(logits, targets)
    return loss


def loss_and_grads(model: AtcModel, queries: np.ndarray, targets,
                   self_indices=None):
    """Mean cross-entropy plus exact gradients for every trainable group,
    averaged over the batch."""
    F = np.asarray(queries, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    logits, ctx = _forward(model, F, self_indices)
    loss, probs = _loss_from_logits(logits, targets)
    d_logits = (probs - one_hot(targets, logits.shape[1])) / F.shape[0]
    return loss, _backward(model, ctx, d_logits)


def branch_visual(f_test: np.ndarray, cache: VisualCache,
                  activation: str = "linear", gamma: float = 1.0) -> np.ndarray:
    """Per-class sum of (activated) query/support affinities."""
    f_test = np.asarray(f_test, dtype=np.float64)
    single = f_test.ndim == 1
    F = np.atleast_2d(f_test)
    if F.shape[1] != cache.dim:
        raise ShapeError(f"query length {F.shape[1]} != cache dim {cache.dim}")
    rows, _ = _visual_rows(cache)
    a = _activate(F @ rows.T, activation, gamma)
    f1 = a @ cache.labels_onehot
    return f1[0] if single else f1


def branch_textual(f_test: np.ndarray, cache: TextualCache,
                   net: ConditionNetParams):
    """Cosine scores against the instance-adapted textual cache."""
    f_test = np.asarray(f_test, dtype=np.float64)
    s, tape = condition_forward(net, f_test)
    adapted = adapt_textual_cache(cache, s)
    return adapted @ f_test, tape


def fuse(f1: np.ndarray, f2: np.ndarray, alpha: float, beta: float,
         logit_scale: float) -> np.ndarray:
    f1 = np.asarray(f1, dtype=np.float64)
    f2 = np.asarray(f2, dtype=np.float64)
    if f1.shape != f2.shape:
        raise ShapeError(f"branch shapes differ: {f1.shape} vs {f2.shape}")
    return logit_scale * (alpha * f1 + beta * f2)


def predict(model: AtcModel, f_test: np.ndarray) -> Prediction:
    f_test = np.asarray(f_test, dtype=np.float64)
    logits, ctx = _forward(model, f_test[None, :])
    probs = softmax(logits[0])
    return Prediction(
        logits=logits[0],
        probabilities=probs,
        predicted_class=int(np.argmax(logits[0])),
        f_visual=ctx["f1"][0],
        f_textual=ctx["f2"][0],
        bias=ctx["S"][0],
    )


def predict_batch(model: AtcModel, queries: np.ndarray) -> np.ndarray:
    """Predicted class per query row."""
    logits, _ = _forward(model, np.asarray(queries, dtype=np.float64))
    return np.argmax(logits, axis=1)


def zero_shot_logits(class_texts: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Plain cosine scores against the frozen text rows (the no-training
    baseline the fused head reduces to at alpha=0 with zero-init trainables)."""
    return np.asarray(queries, dtype=np.float64) @ np.asarray(class_texts).T
