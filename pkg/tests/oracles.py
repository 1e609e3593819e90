"""Independent numerical oracles shared across test modules.

The finite-difference routine here never reuses any backward-pass code:
it re-evaluates the full scalar loss at perturbed parameters, so it can
arbitrate any analytic gradient in the package.
"""

import numpy as np

from fbtta import nn

FD_STEP = 1e-4


def flat_param_view(model: nn.ModelState) -> list[tuple[np.ndarray, int]]:
    """(tensor, flat_offset) pairs enumerating every trainable scalar."""
    out = []
    for tensor in model.param_tensors():
        for offset in range(tensor.size):
            out.append((tensor, offset))
    return out


def central_difference(loss_of_model, model: nn.ModelState, tensor: np.ndarray,
                       offset: int, step: float = FD_STEP) -> float:
    flat = tensor.reshape(-1)
    original = flat[offset]
    flat[offset] = original + step
    plus = loss_of_model(model)
    flat[offset] = original - step
    minus = loss_of_model(model)
    flat[offset] = original
    return (plus - minus) / (2.0 * step)


def check_gradient(loss_and_grad, model: nn.ModelState, n_samples: int = 120,
                   seed: int = 0, rel_tol: float = 1e-4,
                   abs_floor: float = 1e-9) -> float:
    """Compare an analytic gradient against central differences.

    ``loss_and_grad(model) -> (loss, GradientVector)`` must be a pure,
    deterministic function of the parameters. Returns the worst relative
    error over the sampled entries and asserts it is within tolerance;
    entries where both sides are essentially zero pass on the absolute
    floor.
    """
    _, gradient = loss_and_grad(model)
    analytic_tensors = gradient.tensors()
    scalars = []
    for t_idx, tensor in enumerate(model.param_tensors()):
        for offset in range(tensor.size):
            scalars.append((t_idx, tensor, offset))
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(scalars), size=min(n_samples, len(scalars)), replace=False)

    def loss_only(m):
        return loss_and_grad(m)[0]

    worst = 0.0
    for pick in picks:
        t_idx, tensor, offset = scalars[pick]
        numeric = central_difference(loss_only, model, tensor, offset)
        analytic = float(analytic_tensors[t_idx].reshape(-1)[offset])
        gap = abs(analytic - numeric)
        if gap <= abs_floor:
            continue
        rel = gap / max(abs(analytic), abs(numeric), 1e-12)
        worst = max(worst, rel)
        assert rel <= rel_tol, (
            f"gradient mismatch at tensor {t_idx} offset {offset}: "
            f"analytic={analytic:.10g} numeric={numeric:.10g} rel={rel:.3g}")
    return worst
