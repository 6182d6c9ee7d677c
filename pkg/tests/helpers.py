"""Brute-force oracles shared by several test modules."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from hybridpatch import tensor as T
from hybridpatch.model import Variant, head_for


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Normwise relative error ``|a - b|_inf / max(|a|_inf, |b|_inf)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - b).max() / scale)


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` with respect to every entry of ``x`` (mutated in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def check_op(op: Callable[..., T.Tensor], arrays: Sequence[np.ndarray], seed: int = 0, h: float = 1e-6) -> float:
    """Worst relative error between analytic and numeric gradients of
    ``sum(op(*inputs) * R)`` for a fixed random ``R``, over all inputs."""
    with T.precision(np.float64):
        leaves = [T.Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
        out = op(*leaves)
        weight = np.random.default_rng(seed).standard_normal(out.shape)
        loss = T.tsum(T.mul(out, weight))
        T.backward(loss)

        def f() -> float:
            with T.no_grad():
                return float(np.sum(op(*leaves).data * weight))

        worst = 0.0
        for leaf in leaves:
            num = numeric_grad(f, leaf.data, h)
            worst = max(worst, rel_error(leaf.grad, num))
    return worst


def sampled_entry_check(
    loss_fn: Callable[[], T.Tensor],
    params: Sequence[T.Tensor],
    per_tensor: int = 2,
    seed: int = 0,
    h: float = 1e-6,
    tol: float = 1e-6,
    skipped: list | None = None,
) -> dict[str, float]:
    """Central differences on a few entries of every parameter tensor.

    Each tensor contributes the entry with the largest analytic gradient
    plus ``per_tensor - 1`` random entries, so the normwise error of the
    sample is measured against the scale of that tensor's whole gradient.
    A full sweep over every weight of the network is far too slow.

    ReLU and max-pool make the loss piecewise smooth.  When an entry
    disagrees with its analytic value, the difference is repeated with
    step ``h / 2``.  On a smooth stretch the two estimates agree far inside
    the tolerance; when they do not, a switch lies inside the step and the
    entry is swapped for another random one (recorded in ``skipped``).  A
    wrong analytic gradient cannot escape this way, since both estimates
    would agree with each other and not with it.
    """
    for p in params:
        p.grad = None
    T.backward(loss_fn())
    rng = np.random.default_rng(seed)

    def central(flat, i, step):
        old = flat[i]
        with T.no_grad():
            flat[i] = old + step
            fp = float(loss_fn().data)
            flat[i] = old - step
            fm = float(loss_fn().data)
        flat[i] = old
        return (fp - fm) / (2 * step)

    errors = {}
    for k, p in enumerate(params):
        name = p.name or str(k)
        flat_g = (p.grad if p.grad is not None else np.zeros(p.shape)).reshape(-1)
        flat = p.data.reshape(-1)
        scale = max(float(np.abs(flat_g).max()), 1e-300)
        queue = [int(np.argmax(np.abs(flat_g)))] + rng.permutation(flat_g.size)[: 4 * per_tensor].tolist()
        analytic, numeric = [], []
        for i in queue:
            if len(analytic) == per_tensor:
                break
            n1 = central(flat, i, h)
            if abs(n1 - flat_g[i]) > tol * scale:
                n2 = central(flat, i, h / 2)
                if abs(n1 - n2) > 0.25 * tol * scale:
                    if skipped is not None:
                        skipped.append((name, i))
                    continue
            analytic.append(flat_g[i])
            numeric.append(n1)
        errors[name] = rel_error(np.array(analytic), np.array(numeric))
    return errors


def brute_force_hardest(net, ax: np.ndarray, by: np.ndarray, part: str, anchors) -> np.ndarray:
    """Exhaustive hardest-negative search, one pair at a time.

    Scores every ``(i, j)`` with ``j != i`` directly from its definition:
    Euclidean distance for the L2 variant (smallest wins) and the match
    probability of the classifier on ``a_i + b_j`` for the Softmax variant
    (largest wins).  Ties keep the lowest ``j``.
    """
    ax = np.asarray(ax, dtype=np.float64)
    by = np.asarray(by, dtype=np.float64)
    softmax = net.variant is Variant.SOFTMAX
    if softmax:
        head = head_for(net, part)
        w, b = head.weight.data.astype(np.float64), head.bias.data.astype(np.float64)
    out = []
    for i in anchors:
        best, best_j = None, -1
        for j in range(len(by)):
            if j == i:
                continue
            if softmax:
                logit = w @ (ax[i] + by[j]) + b
                s = -1.0 / (1.0 + np.exp(logit[0] - logit[1]))
            else:
                s = float(np.sqrt(np.sum((ax[i] - by[j]) ** 2)))
            if best is None or s < best:
                best, best_j = s, j
        out.append(best_j)
    return np.array(out, dtype=np.int64)


def sweep_fpr95(scores, labels, recall=0.95):
    """Try every observed score as a threshold; keep the smallest FPR reaching the recall."""
    scores, labels = np.asarray(scores, float), np.asarray(labels)
    pos, neg = scores[labels == 1], scores[labels == 0]
    best = None
    for t in sorted(set(scores.tolist())):
        tpr = np.mean(pos >= t)
        if tpr >= recall:
            fpr = np.mean(neg >= t)
            best = fpr if best is None else min(best, fpr)
    return best


def brute_knn(q, r, k):
    """Exact k-NN by listing every distance; ties keep the lower reference index."""
    out_i, out_d = [], []
    for row in q:
        d = [float(np.sqrt(np.sum((row - ref) ** 2))) for ref in r]
        order = sorted(range(len(r)), key=lambda j: (d[j], j))[:k]
        out_i.append(order)
        out_d.append([d[j] for j in order])
    return np.array(out_i), np.array(out_d)
