import copy

import numpy as np

from .losses import gaussian_nll_loss, masked_mse_loss


def model_loss(model, x, target, loss_kind="mse", valid=None, padding="reflect"):
    """Forward pass plus loss; returns ``(loss, upstream gradient)``."""
    out = model.forward(x, padding)
    if loss_kind == "mse":
        loss, g = masked_mse_loss(out[..., 0], target, valid)
        up = np.zeros_like(out)
        up[..., 0] = g
        return loss, up
    if loss_kind == "nll":
        loss, (gm, gv) = gaussian_nll_loss(out[..., 0], out[..., 1], target, valid)
        return loss, np.stack([gm, gv], axis=-1)
    raise ValueError(f"unknown loss kind {loss_kind!r}")


def grad_check(model, x, target, loss_kind="mse", valid=None, step=1e-3, padding="reflect"):
    """Max relative error between backprop and central differences, in float64.

    Relative error per parameter entry is
    ``|analytic - fd| / max(|analytic|, |fd|, 1e-8)``. The model passed in is not
    modified.
    """
    m = copy.deepcopy(model).astype(np.float64)
    x = np.asarray(x, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _, up = model_loss(m, x, target, loss_kind, valid, padding)
    analytic = m.backward(up)
    worst = 0.0
    for name, p in m.parameters().items():
        flat = p.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lp, _ = model_loss(m, x, target, loss_kind, valid, padding)
            flat[i] = orig - step
            lm, _ = model_loss(m, x, target, loss_kind, valid, padding)
            flat[i] = orig
            fd = (lp - lm) / (2 * step)
            err = abs(ga[i] - fd) / max(abs(ga[i]), abs(fd), 1e-8)
            worst = max(worst, err)
    return worst


def relu_margin(model, x, padding="reflect"):
    """Smallest |pre-activation| over all relu units for input ``x``."""
    from .layers import Conv2D, ResidualBlock

    model.forward(np.asarray(x, dtype=model.dtype), padding)
    convs = []
    for layer in model.layers:
        if isinstance(layer, ResidualBlock):
            convs += [layer.conv_a, layer.conv_b]
        elif isinstance(layer, Conv2D):
            convs.append(layer)
    z = [np.abs(c._cache[1]).min() for c in convs if c.activation == "relu"]
    return float(min(z)) if z else float("inf")


def _away_from_kinks(model, draw, padding="reflect", margin=0.02, tries=200):
    # central differences are only valid where no relu switches inside the step
    for _ in range(tries):
        x = draw()
        if relu_margin(model, x, padding) > margin:
            return x
    raise RuntimeError("could not draw an input away from relu kinks")


def standard_checks(seed=0, step=1e-3):
    """Gradient checks over the layer and loss vocabulary; name -> max relative error."""
    from .layers import Conv2D, Model, canopy_net, carbon_net

    rng = np.random.default_rng([seed, 99])
    results = {}
    conv = Model([Conv2D(2, 1, 3, "identity", rng)])
    results["conv3x3_mse"] = grad_check(conv, rng.normal(size=(2, 5, 5, 2)), rng.normal(size=(2, 5, 5)), step=step)
    lin = Model([Conv2D(3, 1, 1, "identity", rng)])
    results["linear1x1_mse"] = grad_check(lin, rng.normal(size=(2, 4, 4, 3)), rng.normal(size=(2, 4, 4)), step=step)

    stack = canopy_net(in_bands=3, width=3, blocks=1, seed=seed)
    x = _away_from_kinks(stack, lambda: rng.normal(size=(1, 5, 5, 3)))
    results["relu_stack_mse"] = grad_check(stack, x, rng.normal(size=(1, 5, 5)), step=step)
    x = _away_from_kinks(stack, lambda: rng.normal(size=(1, 7, 7, 3)), "valid")
    results["relu_stack_valid_mse"] = grad_check(stack, x, rng.normal(size=(1, 1, 1)), padding="valid", step=step)

    nll = carbon_net(width=3, depth=2, seed=seed)
    x = _away_from_kinks(nll, lambda: rng.uniform(0.2, 2.0, size=(1, 5, 5, 1)))
    results["relu_stack_gaussian_nll"] = grad_check(nll, x, rng.normal(size=(1, 5, 5)), "nll", step=step)

    plaw = carbon_net(width=3, depth=2, power_law=True, seed=seed)
    x = _away_from_kinks(plaw, lambda: rng.uniform(0.2, 2.0, size=(1, 5, 5, 1)))
    results["power_law_gaussian_nll"] = grad_check(plaw, x, rng.normal(size=(1, 5, 5)), "nll", step=step)
    results["power_law_mse"] = grad_check(plaw, x, rng.normal(size=(1, 5, 5)), "mse", step=step)
    return results
