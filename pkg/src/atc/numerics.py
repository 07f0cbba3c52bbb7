"""Dense 64-bit linear algebra, stable probabilistic primitives, seeded RNG,
and a finite-difference gradient checker.

Matrices are plain 2-D float64 numpy arrays. All public operations keep
entries finite; 32-bit floats appear only inside the file codecs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EvaluationError, ShapeError

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix64(x: int) -> int:
    x = (x + _GOLDEN) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def seed_child(seed: int, i: int) -> int:
    """Derive an independent child seed: mix(seed, i) via splitmix64."""
    return _splitmix64((seed + i * _GOLDEN) & _MASK64)


class Rng:
    """Counter-based seeded generator (Philox 4x64).

    Identical seed => identical stream within one build. Single-owner:
    never share an instance across threads; use child() for parallel work.
    """

    algorithm = "philox4x64"

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def child(self, i: int) -> "Rng":
        return Rng(seed_child(self.seed, i))

    def uniform(self, low: float, high: float, size) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def normal(self, size) -> np.ndarray:
        return self._gen.standard_normal(size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def sample_without_replacement(self, n: int, k: int) -> np.ndarray:
        return self._gen.choice(n, size=k, replace=False)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit shape check."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def l2_normalize_rows(m: np.ndarray, eps: float = 1e-12) -> tuple[np.ndarray, int]:
    """Divide each row by its Euclidean norm.

    Rows with norm <= eps pass through unchanged; their count is returned
    as an advisory alongside the normalized matrix.
    """
    m = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(m, axis=-1, keepdims=True)
    zero = norms[..., 0] <= eps
    safe = np.where(zero[..., None], 1.0, norms)
    return m / safe, int(np.count_nonzero(zero))


def softmax(logits: np.ndarray) -> np.ndarray:
    """Max-subtracted stable softmax along the last axis."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, target: int) -> tuple[float, np.ndarray]:
    """Multiclass softmax cross-entropy and its gradient w.r.t. the logits.

    loss = -log softmax(logits)[target]; grad = softmax(logits) - one_hot.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= target < logits.shape[-1]:
        raise IndexError(f"target {target} out of range for {logits.shape[-1]} logits")
    shifted = logits - logits.max()
    logz = np.log(np.sum(np.exp(shifted)))
    loss = float(logz - shifted[target])
    grad = np.exp(shifted - logz)
    grad[target] -= 1.0
    return loss, grad


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise IndexError(f"label out of range for {num_classes} classes")
    out = np.zeros((labels.size, num_classes), dtype=np.float64)
    out[np.arange(labels.size), labels] = 1.0
    return out


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(1.0, abs(a), abs(b))


@dataclass
class GroupCheck:
    name: str
    max_rel_err: float
    worst_index: tuple
    passed: bool


@dataclass
class GradReport:
    groups: dict[str, GroupCheck]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(g.passed for g in self.groups.values())

    def summary(self) -> str:
        lines = []
        for g in self.groups.values():
            status = "pass" if g.passed else "FAIL"
            lines.append(
                f"{status}  {g.name}: max rel err {g.max_rel_err:.3e} "
                f"at {g.worst_index} (tol {self.tolerance:g})"
            )
        return "\n".join(lines)


def grad_check(fn, params: dict[str, np.ndarray], analytic: dict[str, np.ndarray],
               eps: float = 1e-4, tol: float = 1e-4) -> GradReport:
    """Compare analytic gradients against central finite differences.

    fn maps the params dict to a scalar. Every coordinate of every group is
    perturbed by +/- eps; rel err uses max(1, |a|, |b|) in the denominator.
    """
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    groups: dict[str, GroupCheck] = {}
    for name, tensor in work.items():
        grad = np.asarray(analytic[name], dtype=np.float64)
        if grad.shape != tensor.shape:
            raise ShapeError(
                f"analytic grad for {name} has shape {grad.shape}, "
                f"expected {tensor.shape}"
            )
        worst = 0.0
        worst_idx: tuple = ()
        it = np.nditer(tensor, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = tensor[idx]
            tensor[idx] = orig + eps
            f_plus = float(fn(work))
            tensor[idx] = orig - eps
            f_minus = float(fn(work))
            tensor[idx] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise EvaluationError(f"non-finite value at {name}{idx}")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = relative_error(float(grad[idx]), numeric)
            if err > worst:
                worst = err
                worst_idx = idx
            it.iternext()
        groups[name] = GroupCheck(name, worst, worst_idx, worst <= tol)
    return GradReport(groups, tol)
