"""Central finite-difference verification of analytic gradients."""

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, branch_log, no_grad

MIN_STEP = 1e-8


def rel_error(analytic, numeric):
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_coords: int
    n_step_reduced: int

    def __float__(self):
        return self.max_rel_error


def grad_check_detail(fn, inputs, h=1e-4, check=None, seed=0, max_coords=None):
    """Like :func:`grad_check` but also reports coordinate counts.

    A central difference is only meaningful when ``x - h``, ``x`` and
    ``x + h`` fall on the same smooth piece.  If a ReLU mask or an argmax
    changes between them, the step is divided by 10 for that coordinate
    until the branch pattern is stable (down to ``MIN_STEP``).
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    check = set(range(len(arrays)) if check is None else check)

    def evaluate():
        with no_grad(), branch_log() as log:
            out = fn(*[Tensor(x) for x in arrays])
        # outputs may be views of the perturbed inputs
        return out.data.copy(), log

    probe, base_branches = evaluate()
    weight = None if probe.size == 1 else rng.standard_normal(probe.shape)

    def scalar(data):
        return float(data.sum()) if weight is None else float((data * weight).sum())

    tensors = [Tensor(a, requires_grad=i in check) for i, a in enumerate(arrays)]
    out = fn(*tensors)
    out.backward(None if weight is None else weight)

    worst, n_coords, n_reduced = 0.0, 0, 0
    for i in sorted(check):
        a = arrays[i]
        analytic = tensors[i].grad if tensors[i].grad is not None else np.zeros_like(a)
        coords = range(a.size)
        if max_coords is not None and a.size > max_coords:
            coords = rng.choice(a.size, size=max_coords, replace=False)
        flat = a.reshape(-1)
        for j in coords:
            orig = flat[j]
            step = h
            while True:
                flat[j] = orig + step
                fp, bp = evaluate()
                flat[j] = orig - step
                fm, bm = evaluate()
                flat[j] = orig
                if (bp == base_branches and bm == base_branches) or step / 10 < MIN_STEP:
                    break
                step /= 10
            n_reduced += step != h
            numeric = (scalar(fp) - scalar(fm)) / (2 * step)
            worst = max(worst, float(rel_error(analytic.reshape(-1)[j], numeric)))
            n_coords += 1
    return GradCheckResult(worst, n_coords, n_reduced)


def grad_check(fn, inputs, h=1e-4, check=None, seed=0, max_coords=None):
    """Max relative error ``|a - n| / max(1e-8, |a| + |n|)`` between backprop
    and central differences, over the checked input coordinates.

    ``fn`` maps Tensors to a Tensor; non-scalar outputs are contracted with
    a fixed random weight.  Inputs are promoted to float64.  ``check``
    selects input positions (default all); ``max_coords`` samples that many
    coordinates per input.
    """
    return grad_check_detail(fn, inputs, h, check, seed, max_coords).max_rel_error
