"""Independent reference computations used by the tests."""

import math

import numpy as np
import torch


def central_difference(fn, tensor, step=1e-3):
    """Numerical gradient of scalar ``fn()`` with respect to ``tensor`` (perturbed in place)."""
    grad = torch.zeros_like(tensor)
    flat = tensor.data.view(-1)
    out = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            plus = float(fn())
            flat[i] = orig - step
            minus = float(fn())
            flat[i] = orig
            out[i] = (plus - minus) / (2 * step)
    return grad


def relative_error(analytic, numeric, floor=1e-8):
    """||a - n|| / max(||a||, ||n||, floor)."""
    diff = torch.linalg.vector_norm(analytic - numeric).item()
    scale = max(torch.linalg.vector_norm(analytic).item(), torch.linalg.vector_norm(numeric).item(), floor)
    return diff / scale


def monte_carlo_jsd2(rho, n=1_000_000, seed=0):
    """2*JSD between a correlated standard bivariate normal and its product of marginals,
    estimated by sampling both distributions and averaging the log density ratios."""
    rng = np.random.default_rng(seed)

    def logpdf(x, z, r):
        det = 1 - r * r
        return -0.5 * (x * x - 2 * r * x * z + z * z) / det - math.log(2 * math.pi * math.sqrt(det))

    x = rng.standard_normal(n)
    z = rho * x + math.sqrt(1 - rho * rho) * rng.standard_normal(n)
    lp, lq = logpdf(x, z, rho), logpdf(x, z, 0.0)
    term_p = np.mean(math.log(2) + lp - np.logaddexp(lp, lq))
    x2, z2 = rng.standard_normal(n), rng.standard_normal(n)
    lp, lq = logpdf(x2, z2, rho), logpdf(x2, z2, 0.0)
    term_q = np.mean(math.log(2) + lq - np.logaddexp(lp, lq))
    return float(term_p + term_q)


class KinkMonitor:
    """Records the piecewise-linear regime of a network: the sign of every
    leaky-ReLU input (= batch-norm output) and, for 2-D maps, the winner of
    each 2x2 max-pool window.  Two evaluations with equal patterns lie on the
    same linear piece of every kink."""

    def __init__(self, *modules):
        self.records = []
        self.handles = []
        for module in modules:
            for m in module.modules():
                if isinstance(m, (torch.nn.BatchNorm1d, torch.nn.BatchNorm2d)):
                    self.handles.append(m.register_forward_hook(self._hook))

    def _hook(self, module, inputs, output):
        out = output.detach()
        self.records.append(out > 0)
        if out.dim() == 4:
            b, c, h, w = out.shape
            windows = out.reshape(b, c, h // 2, 2, w // 2, 2).permute(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
            self.records.append(windows.argmax(-1))

    def pattern(self, fn):
        self.records = []
        value = float(fn())
        return value, list(self.records)

    def close(self):
        for h in self.handles:
            h.remove()


def _same(a, b):
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def central_difference_kink_aware(fn, tensor, monitor, step=1e-3):
    """Central differences plus a validity mask: entries whose +/- step
    evaluations leave the linear piece of the unperturbed point are invalid."""
    grad = torch.zeros_like(tensor)
    valid = torch.ones_like(tensor, dtype=torch.bool)
    flat, out, ok = tensor.data.view(-1), grad.view(-1), valid.view(-1)
    with torch.no_grad():
        _, base = monitor.pattern(fn)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            plus, p_plus = monitor.pattern(fn)
            flat[i] = orig - step
            minus, p_minus = monitor.pattern(fn)
            flat[i] = orig
            out[i] = (plus - minus) / (2 * step)
            ok[i] = _same(base, p_plus) and _same(base, p_minus)
    return grad, valid
