"""Central finite differences over a model's flattened parameters.

Independent of torch autograd: each coordinate is perturbed by +-h and the
scalar objective is re-evaluated under ``torch.no_grad``.

ReLU and max-pool networks are only piecewise smooth. A difference quotient
whose stencil straddles a ReLU sign change or a max-pool argmax switch is
not an estimate of the derivative, so every perturbed evaluation records the
activation pattern, and a trial is valid only when all 2N patterns match the
unperturbed one. Invalid draws are replaced by fresh random batches and
counted.
"""

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from dmcl.losses import (ContrastiveConfig, domain_loss, mixed_domain_loss, mixed_task_loss, nt_xent,
                         task_loss)
from dmcl.model import ArchitectureConfig, GrlCoupling, build_model

STEP = 1e-5
TOLERANCE = 1e-4
LOSS_NAMES = ("l_d", "l_md", "l_f", "l_mf", "l_con_f", "l_con_d")


class ActivationPattern:
    """Records ReLU signs and max-pool argmaxes of the most recent forward."""

    def __init__(self, model: nn.Module):
        self.parts = []
        self.handles = []
        for m in model.modules():
            if isinstance(m, nn.ReLU):
                self.handles.append(m.register_forward_pre_hook(self._relu))
            elif isinstance(m, nn.MaxPool2d):
                self.handles.append(m.register_forward_pre_hook(self._pool))

    def _relu(self, module, inputs):
        self.parts.append((inputs[0] > 0).flatten())

    def _pool(self, module, inputs):
        _, idx = F.max_pool2d(inputs[0], module.kernel_size, module.stride, module.padding,
                              module.dilation, module.ceil_mode, return_indices=True)
        self.parts.append(idx.flatten())

    def take(self):
        out, self.parts = self.parts, []
        return out

    def close(self):
        for h in self.handles:
            h.remove()


def _same(a, b):
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def central_difference(objective, params, step=STEP, model=None):
    """Returns the FD gradient, or ``(gradient, smooth)`` when ``model`` is
    given; ``smooth`` is False if any stencil crossed a kink."""
    params = list(params)
    base = parameters_to_vector(params).detach().clone()
    grad = torch.zeros_like(base)
    pattern = ActivationPattern(model) if model is not None else None
    smooth = True
    try:
        with torch.no_grad():
            if pattern is not None:
                objective()
                reference = pattern.take()
            for i in range(base.numel()):
                v = base.clone()
                v[i] += step
                vector_to_parameters(v, params)
                up = float(objective())
                if pattern is not None and not _same(pattern.take(), reference):
                    smooth = False
                v[i] -= 2 * step
                vector_to_parameters(v, params)
                down = float(objective())
                if pattern is not None and not _same(pattern.take(), reference):
                    smooth = False
                grad[i] = (up - down) / (2 * step)
    finally:
        vector_to_parameters(base, params)
        if pattern is not None:
            pattern.close()
    return grad if model is None else (grad, smooth)


def analytic(objective, params):
    params = list(params)
    for p in params:
        p.grad = None
    objective().backward()
    return torch.cat([(p.grad if p.grad is not None else torch.zeros_like(p)).reshape(-1) for p in params])


def relative_error(a, b):
    scale = max(float(a.norm()), float(b.norm()), 1e-12)
    return float((a - b).norm()) / scale


# 16x16 inputs leave a 2x2 map after g, so branch normalization sees
# spatial variation; narrower or smaller nets collapse into locally flat
# losses where relative error is meaningless.
FD_SHAPE = (16, 16)


def fd_model(seed=0):
    arch = ArchitectureConfig(head_class_counts=(3, 2), input_shape=(*FD_SHAPE, 3),
                              conv_channels_g=[3, 3, 3], conv_channels_branch=[3, 3, 8])
    return build_model(arch, seed).double().train()


def loss_objective(name, model, rng, grl=None, include_positive=False):
    """A closure evaluating one loss on a random 4-sample batch (float64)."""
    k = 4
    x = lambda n=k: torch.as_tensor(rng.random((n, *FD_SHAPE, 3)), dtype=torch.float64)
    lams = torch.as_tensor(rng.random(k), dtype=torch.float64)
    toi = torch.as_tensor(rng.integers(0, 3, k))
    irt = torch.as_tensor(rng.integers(0, 2, 2 * k))
    ccfg = ContrastiveConfig(temperature=0.5, batch_k=k, include_positive_in_denominator=include_positive)
    if name == "l_d":
        xs, xt = x(), x()

        def f():
            p = model.forward_all(torch.cat([xs, xt]), grl)[2]
            return domain_loss(p[:k], p[k:])
        return f
    if name == "l_md":
        xm = x()
        return lambda: mixed_domain_loss(model.forward_all(xm, grl)[2], lams)
    if name == "l_f":
        xr, xir = x(), x(2 * k)

        def f():
            toi_logits, irt_logits, _ = model.forward_all(torch.cat([xr, xir]), grl)
            return task_loss(toi_logits[:k], toi, irt_logits[k:], irt)
        return f
    if name == "l_mf":
        xm = x()

        def f():
            toi_logits, irt_logits, _ = model.forward_all(xm, grl)
            return mixed_task_loss(toi_logits, irt_logits, toi, irt[:k], lams)
        return f
    if name in ("l_con_f", "l_con_d"):
        a, b, c = x(), x(), x()

        def f():
            h = model.shared(torch.cat([a, b, c]))
            if name == "l_con_f":
                z = model.g_f(h[: 2 * k])
            else:
                z = model.g_d(h[k:])
            return nt_xent(z[:k], z[k:], ccfg)
        return f
    raise KeyError(name)


class GradientCheck:
    """Valid-trial errors plus the number of random draws discarded as kinked."""

    def __init__(self):
        self.errors = []
        self.trials = 0
        self.discarded = 0

    @property
    def worst(self):
        return max(self.errors) if self.errors else float("nan")

    def __repr__(self):
        return f"{self.trials} trials, max rel err {self.worst:.2e}, {self.discarded} kinked draws discarded"


def _collect(trials, make_pairs, max_draws):
    check = GradientCheck()
    draw = 0
    while check.trials < trials:
        if draw >= max_draws:
            raise RuntimeError(f"only {check.trials} smooth draws out of {draw}")
        pairs = make_pairs(draw)
        draw += 1
        if pairs is None:
            check.discarded += 1
            continue
        check.errors.extend(pairs)
        check.trials += 1
    return check


def loss_gradient_errors(name, trials=10, seed=0, include_positive=False, max_draws=None):
    """Relative analytic-vs-FD error for ``trials`` smooth random batches."""

    def one(draw):
        rng = np.random.default_rng([seed, draw])
        model = fd_model(seed=draw)
        obj = loss_objective(name, model, rng, include_positive=include_positive)
        fd, smooth = central_difference(obj, model.parameters(), model=model)
        if not smooth:
            return None
        return [relative_error(analytic(obj, model.parameters()), fd)]

    return _collect(trials, one, max_draws or 5 * trials)


def grl_gradient_errors(trials=10, seed=0, max_draws=None):
    """GRL check: gradients reaching g through the coupling equal -mu x the
    finite-difference gradient of the un-reversed objective; parameters past
    the coupling see the plain finite-difference gradient."""

    def one(draw):
        rng = np.random.default_rng([seed, 100 + draw])
        mu = float(rng.uniform(0.1, 2.0))
        model = fd_model(seed=draw)
        rng_a, rng_b = (np.random.default_rng([seed, 100 + draw, 1]) for _ in range(2))
        reversed_obj = loss_objective("l_d", model, rng_a, GrlCoupling(mu))
        plain_obj = loss_objective("l_d", model, rng_b)
        g_params = list(model.g.parameters())
        head_params = list(model.g_d.parameters()) + list(model.d.parameters())
        fd_g, smooth_g = central_difference(plain_obj, g_params, model=model)
        fd_head, smooth_head = central_difference(plain_obj, head_params, model=model)
        if not (smooth_g and smooth_head):
            return None
        errors = [relative_error(analytic(reversed_obj, g_params), -mu * fd_g),
                  relative_error(analytic(reversed_obj, head_params), fd_head)]
        # the coupling on its own: d/dx sum(w * GRL(x)) = -mu * w
        x = torch.tensor(rng.standard_normal((4, 3)), dtype=torch.float64, requires_grad=True)
        w = torch.as_tensor(rng.standard_normal((4, 3)), dtype=torch.float64)
        (gx,) = torch.autograd.grad((w * GrlCoupling(mu)(x)).sum(), x)
        fd = torch.zeros_like(x)
        with torch.no_grad():
            for idx in np.ndindex(*x.shape):
                e = torch.zeros_like(x)
                e[idx] = STEP
                fd[idx] = ((w * (x + e)).sum() - (w * (x - e)).sum()) / (2 * STEP)
        errors.append(relative_error(gx, -mu * fd))
        return errors

    return _collect(trials, one, max_draws or 5 * trials)
