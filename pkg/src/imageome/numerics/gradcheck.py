"""Central finite differences, used as the independent gradient oracle."""
import numpy as np

from .tensor import StopGradientTape, replay_stop_gradients


def finite_difference_grads(fn, params, h=1e-6):
    """Central-difference gradient of scalar ``fn()`` w.r.t. each tensor in ``params``.

    ``fn`` is evaluated once to record stop-gradient values and discrete
    choices (code indices); every perturbed evaluation replays them, so the
    oracle differentiates the same surrogate the analytic backward pass does.
    """
    tape = StopGradientTape()
    with replay_stop_gradients(tape):
        fn()
    out = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            tape.rewind()
            with replay_stop_gradients(tape):
                fp = float(fn().data)
            flat[i] = orig - h
            tape.rewind()
            with replay_stop_gradients(tape):
                fm = float(fn().data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def max_relative_error(analytic, numeric, floor=1e-12):
    """Worst per-tensor ``||a - n|| / max(||a||, ||n||)`` over paired gradients."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
        worst = max(worst, float(np.linalg.norm(a - n)) / denom)
    return worst
