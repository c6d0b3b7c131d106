"""Finite-difference validation of every layer and of the assembled network.

Each check evaluates its op in float64 behind a random linear read-out
(``sum(R * op(...))``), so no coordinate hides behind a symmetric sum.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import network as net
from . import numcore as nc
from .numcore import GradCheckReport, grad_check

LAYER_TOL = 1e-4
NETWORK_TOL = 1e-3
KINK = 1e-6
# conv biases feeding batch norm have an identically zero gradient; central
# differences through the whole net leave ~1e-10 of roundoff there
NETWORK_FLOOR = 1e-6


def _check_args(name, fwd: Callable, bwd: Callable, args: list, rng, *, h=1e-3, wrt=None,
                skip=None, inject=False) -> list[GradCheckReport]:
    """Check d(sum(R * fwd(*args)))/d(args[i]) against ``bwd`` for each i in ``wrt``."""
    out = fwd(*args)
    readout = rng.standard_normal(out.shape)
    grads = bwd(readout, args)
    if inject:
        grads = [-g for g in grads]
    reports = []
    for i in (range(len(args)) if wrt is None else wrt):
        x = args[i]

        def f(x=x):
            return float(np.sum(readout * fwd(*args)))

        rep = grad_check(f, x, grads[i], h=h, tolerance=LAYER_TOL, name=f"{name}[arg{i}]",
                         skip=(skip(i) if skip else None))
        reports.append(rep)
    return reports


def check_conv2d(rng, inject=False):
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)

    def fwd(x, w, b):
        return nc.conv2d(x, w, b)[0]

    def bwd(g, args):
        return nc.conv2d_backward(g, nc.conv2d(*args)[1])

    return _check_args("conv2d", fwd, bwd, [x, w, b], rng, inject=inject)


def check_conv1x1(rng, inject=False):
    x = rng.standard_normal((2, 4, 3, 3))
    w = rng.standard_normal((3, 4, 1, 1))
    b = rng.standard_normal(3)

    def fwd(x, w, b):
        return nc.conv1x1(x, w, b)[0]

    def bwd(g, args):
        return nc.conv1x1_backward(g, nc.conv1x1(*args)[1])

    return _check_args("conv1x1", fwd, bwd, [x, w, b], rng, inject=inject)


def check_batch_norm(rng, inject=False):
    x = rng.standard_normal((4, 3, 6, 6)) * 2 + 0.5
    gamma = rng.standard_normal(3)
    beta = rng.standard_normal(3)

    def fwd(x, g, b):
        return nc.batch_norm(x, g, b, None, "train")[0]

    def bwd(g, args):
        return nc.batch_norm_backward(g, nc.batch_norm(*args, None, "train")[1])

    idx = [tuple(rng.integers(0, s) for s in x.shape) for _ in range(40)]
    reps = []
    # the input has 432 coordinates; a random subset keeps the check fast
    out = fwd(x, gamma, beta)
    readout = rng.standard_normal(out.shape)
    grads = bwd(readout, [x, gamma, beta])
    if inject:
        grads = [-g for g in grads]
    for i, (arr, coords) in enumerate(((x, idx), (gamma, None), (beta, None))):
        def f():
            return float(np.sum(readout * fwd(x, gamma, beta)))
        reps.append(grad_check(f, arr, grads[i], h=1e-3, tolerance=LAYER_TOL,
                               indices=coords, name=f"batch_norm[arg{i}]"))
    return reps


def check_relu(rng, inject=False):
    x = rng.standard_normal((2, 3, 4, 4))

    def fwd(x):
        return nc.relu(x)[0]

    def bwd(g, args):
        return [nc.relu_backward(g, nc.relu(args[0])[1])]

    # piecewise linear: any step that stays off the kink is exact
    return _check_args("relu", fwd, bwd, [x], rng, h=KINK / 10, inject=inject,
                       skip=lambda i: (lambda idx: abs(x[idx]) < KINK))


def check_max_pool2(rng, inject=False):
    x = rng.standard_normal((2, 2, 8, 8))

    def fwd(x):
        return nc.max_pool2(x)[0]

    def bwd(g, args):
        return [nc.max_pool2_backward(g, nc.max_pool2(args[0])[1])]

    def near_tie(idx):
        n, c, y, xx = idx
        win = np.sort(x[n, c, y // 2 * 2:y // 2 * 2 + 2, xx // 2 * 2:xx // 2 * 2 + 2].ravel())
        return win[-1] - win[-2] < KINK

    return _check_args("max_pool2", fwd, bwd, [x], rng, h=KINK / 10, inject=inject,
                       skip=lambda i: near_tie)


def check_transposed_conv(rng, inject=False):
    reps = []
    for f in nc.UPSAMPLE_FACTORS[:2]:
        x = rng.standard_normal((2, 2, 3, 3))
        w = rng.standard_normal((2, 1, 2 * f, 2 * f))
        b = rng.standard_normal(2)

        def fwd(x, w, b, f=f):
            return nc.transposed_conv(x, f, w, b)[0]

        def bwd(g, args, f=f):
            x, w, b = args
            return nc.transposed_conv_backward(g, nc.transposed_conv(x, f, w, b)[1])

        reps += _check_args(f"transposed_conv(f={f})", fwd, bwd, [x, w, b], rng, inject=inject)
    return reps


def check_concat(rng, inject=False):
    a = rng.standard_normal((2, 2, 3, 3))
    b = rng.standard_normal((2, 3, 3, 3))

    def fwd(a, b):
        return nc.concat_channels([a, b])[0]

    def bwd(g, args):
        return nc.concat_channels_backward(g, [args[0].shape[1], args[1].shape[1]])

    return _check_args("concat_channels", fwd, bwd, [a, b], rng, inject=inject)


def check_softmax_cross_entropy(rng, inject=False):
    logits = rng.standard_normal((2, 4, 3, 3)) * 2
    labels = rng.integers(0, 4, (2, 3, 3))

    def f():
        return nc.softmax_cross_entropy(logits, labels)[0]

    _, _, cache = nc.softmax_cross_entropy(logits, labels)
    g = nc.softmax_cross_entropy_backward(cache)
    if inject:
        g = -g
    return [grad_check(f, logits, g, h=1e-3, tolerance=LAYER_TOL, name="softmax_cross_entropy")]


LAYER_CHECKS = {
    "conv2d": check_conv2d,
    "conv1x1": check_conv1x1,
    "batch_norm": check_batch_norm,
    "relu": check_relu,
    "max_pool2": check_max_pool2,
    "transposed_conv": check_transposed_conv,
    "concat_channels": check_concat,
    "softmax_cross_entropy": check_softmax_cross_entropy,
}


def _kink_pattern(model, x):
    """Every relu mask and pooling argmax of one forward pass."""
    _, tape = net.forward_logits(model, x, "train", keep_tape=True)
    return [c if k.endswith(".relu") else c[0] for k, c in tape.items()
            if k.endswith(".relu") or k.startswith("pool")]


def check_network(rng, n_weights=20, k=4, input_size=32, batch=2, h=1e-6, inject=False) -> GradCheckReport:
    """Full-network loss gradient at ``n_weights`` randomly sampled parameter entries.

    A sampled weight whose +/-h perturbation flips any relu or pooling
    decision sits on a kink of the loss; it is skipped and another drawn.
    """
    model = net.build_network(net.NetworkConfig(k=k, input_size=input_size),
                              seed=int(rng.integers(2**31))).astype(np.float64)
    # move away from the symmetric initial point so every layer carries signal
    for p in model.params.values():
        p.value += 0.05 * rng.standard_normal(p.value.shape)
    x = rng.random((batch, 1, input_size, input_size))
    y = rng.integers(0, k, (batch, input_size, input_size))
    net.loss_and_grads(model, x, y)
    names = list(model.params)

    def f():
        logits, _ = net.forward_logits(model, x, "train")
        return nc.softmax_cross_entropy(logits, y)[0]

    report = GradCheckReport(f"network (K={k}, {n_weights} weights)", 0.0, 0, NETWORK_TOL)
    seen = set()
    while report.n_checked < n_weights:
        name = names[int(rng.integers(len(names)))]
        p = model.params[name]
        idx = tuple(int(rng.integers(s)) for s in p.value.shape)
        if (name, idx) in seen:
            continue
        seen.add((name, idx))

        def on_kink(i, p=p):
            orig = p.value[i]
            patterns = []
            for v in (orig + h, orig - h):
                p.value[i] = v
                patterns.append(_kink_pattern(model, x))
            p.value[i] = orig
            return any(not np.array_equal(a, b) for a, b in zip(*patterns))

        analytic = -p.grad if inject else p.grad
        rep = grad_check(f, p.value, analytic, h=h, tolerance=NETWORK_TOL, indices=[idx],
                         floor=NETWORK_FLOOR, skip=on_kink)
        report.skipped += rep.skipped
        if rep.n_checked == 0:
            continue
        report.details += [((name,) + d[0],) + d[1:] for d in rep.details]
        report.n_checked += 1
        if rep.max_rel_error >= report.max_rel_error:
            report.max_rel_error, report.worst_index = rep.max_rel_error, (name, idx)
    return report


def run_suite(layers=None, include_network=True, seed=0, inject: str | None = None) -> list[GradCheckReport]:
    """Run the selected layer checks (all by default) plus the network check.

    ``inject`` names a layer (or ``"network"``) whose analytic gradient is
    sign-flipped, to prove the checker can fail.
    """
    rng = np.random.default_rng(seed)
    names = list(LAYER_CHECKS) if layers is None else list(layers)
    unknown = set(names) - set(LAYER_CHECKS) - {"network"}
    if unknown:
        raise ValueError(f"unknown layers {sorted(unknown)}; choose from {sorted(LAYER_CHECKS)}")
    reports = []
    for name in names:
        if name == "network":
            continue
        reports += LAYER_CHECKS[name](rng, inject=(inject == name))
    if include_network or "network" in names:
        reports.append(check_network(rng, inject=(inject == "network")))
    return reports
