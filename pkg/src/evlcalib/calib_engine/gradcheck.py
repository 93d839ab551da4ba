"""Central finite-difference check of every network parameter.

Perturbing one weight only shifts the pre-activation of its own output unit by
``h * input``, so each layer's perturbations are built from cached activations
and pushed through the remaining layers as one batch.

The loss is piecewise smooth (ReLU). A difference quotient is trusted only if
no ReLU changes state anywhere inside the stencil; otherwise that parameter is
retried with a ten times smaller step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import network as net
from .network import CONV_LAYERS, DENSE_LAYERS, PredictorModel

CHUNK = 256
MIN_STEP = 1e-8


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: str
    n_checked: int
    rel_errors: dict[str, np.ndarray]
    steps: dict[str, np.ndarray]  # step actually used per parameter


def _flip(z: np.ndarray, base: np.ndarray) -> np.ndarray:
    """Per-row flag: any ReLU on/off state differs from the base pass."""
    return np.any(((z > 0) != (base > 0)).reshape(len(z), -1), axis=1)


class _Tail:
    """Remaining forward pass from a given stage, with ReLU-state tracking."""

    def __init__(self, p, cache):
        self.p, self.c = p, cache
        self.base_out = net.forward_raw(PredictorModel(p), cache["x0"])[0]

    def from_conv(self, level: int, z: np.ndarray):
        p, c = self.p, self.c
        flipped = _flip(z, c[f"{CONV_LAYERS[level][0]}.z"])
        a = np.maximum(z, 0)
        for name, _, _ in CONV_LAYERS[level + 1:]:
            z = net.conv_forward(a, p[f"{name}.W"], p[f"{name}.b"])[0]
            flipped |= _flip(z, c[f"{name}.z"])
            a = np.maximum(z, 0)
        g = a.mean(axis=(2, 3))
        out, f2 = self.from_shared(g @ p["shared.W"].T + p["shared.b"])
        return out, flipped | f2

    def from_shared(self, zs: np.ndarray):
        p = self.p
        flipped = _flip(zs, self.c["zs"])
        s = np.maximum(zs, 0)
        ot, ft = self.from_head("trans", s @ p["trans1.W"].T + p["trans1.b"])
        orr, fr = self.from_head("rot", s @ p["rot1.W"].T + p["rot1.b"])
        return np.concatenate([ot[:, :3], orr[:, 3:]], axis=1), flipped | ft | fr

    def from_head(self, head: str, z1: np.ndarray):
        p = self.p
        flipped = _flip(z1, self.c[f"z{head[0]}1"])
        return self.from_output(head, np.maximum(z1, 0) @ p[f"{head}2.W"].T + p[f"{head}2.b"]), flipped

    def from_output(self, head: str, o: np.ndarray) -> np.ndarray:
        out = np.broadcast_to(self.base_out, (len(o), 6)).copy()
        out[:, slice(0, 3) if head == "trans" else slice(3, 6)] = o
        return out


def _perturbations(p, c, layer: str):
    """(run, base, unit, direction) describing every single-parameter nudge of a layer.

    ``run(z)`` maps perturbed stage inputs to (outputs, flipped); entry i nudges
    ``base[unit[i]]`` along ``direction[i]`` per unit step.
    """
    tail = _Tail(p, c)
    conv_names = [n for n, _, _ in CONV_LAYERS]
    if layer in conv_names:
        level = conv_names.index(layer)
        z = c[f"{layer}.z"][0]
        F = z.shape[0]
        cols = c[f"{layer}.cols"][0]
        base = z.reshape(F, -1)
        units = np.concatenate([np.repeat(np.arange(F), cols.shape[0]), np.arange(F)])
        dirs = np.concatenate([np.tile(cols, (F, 1)), np.ones((F, base.shape[1]))])
        return (lambda zb: tail.from_conv(level, zb.reshape(len(zb), *z.shape))), base, units, dirs
    inputs = {"shared": c["g"], "trans1": c["s"], "rot1": c["s"],
              "trans2": c["ht"], "rot2": c["hr"]}[layer][0]
    nout = p[f"{layer}.W"].shape[0]
    units = np.concatenate([np.repeat(np.arange(nout), len(inputs)), np.arange(nout)])
    dirs = np.concatenate([np.tile(inputs, nout), np.ones(nout)])[:, None]
    if layer == "shared":
        base, run = c["zs"][0], tail.from_shared
    elif layer in ("trans1", "rot1"):
        head = layer[:-1]
        base, run = c[f"z{head[0]}1"][0], (lambda zb, h=head: tail.from_head(h, zb))
    else:
        head = layer[:-1]
        base = tail.base_out[:3] if head == "trans" else tail.base_out[3:]
        run = (lambda zb, h=head: (tail.from_output(h, zb), np.zeros(len(zb), bool)))
    return run, base[:, None], units, dirs


def _central(run, base, units, dirs, y, steps):
    """Difference quotients and kink flags for the selected perturbations."""
    n = len(units)
    fd = np.empty(n)
    bad = np.empty(n, dtype=bool)
    for lo in range(0, n, CHUNK):
        sl = slice(lo, lo + CHUNK)
        u, d, h = units[sl], dirs[sl], steps[sl]
        vals, flips = [], []
        for sign in (1.0, -1.0):
            zb = np.broadcast_to(base, (len(u),) + base.shape).copy()
            zb[np.arange(len(u)), u] += sign * h[:, None] * d
            if zb.shape[-1] == 1:
                zb = zb[..., 0]
            out, fl = run(zb)
            vals.append(np.mean((out - y) ** 2, axis=1))
            flips.append(fl)
        fd[sl] = (vals[0] - vals[1]) / (2 * h)
        bad[sl] = flips[0] | flips[1]
    return fd, bad


def numeric_gradients(model: PredictorModel, x: np.ndarray, y: np.ndarray, h: float = 1e-3):
    """Kink-aware central differences in float64.

    Returns (gradients, steps) keyed by parameter name; a step of 0 marks a
    parameter whose stencil still crossed a ReLU kink at ``MIN_STEP``.
    """
    m = model.copy(np.float64)
    p = m.params
    x = np.asarray(x, dtype=np.float64).reshape(1, *np.shape(x)[-3:])
    y = np.asarray(y, dtype=np.float64).reshape(1, 6)
    _, c = net.forward_raw(m, x, keep=True)
    grads, used = {}, {}
    for layer in [n for n, _, _ in CONV_LAYERS] + [n for n, _, _ in DENSE_LAYERS]:
        run, base, units, dirs = _perturbations(p, c, layer)
        n = len(units)
        fd = np.zeros(n)
        steps = np.full(n, h)
        todo = np.arange(n)
        while todo.size:
            vals, bad = _central(run, base, units[todo], dirs[todo], y, steps[todo])
            fd[todo] = vals
            todo = todo[bad]
            steps[todo] /= 10.0
            stuck = steps[todo] < MIN_STEP
            steps[todo[stuck]] = 0.0
            todo = todo[~stuck]
        nW = p[f"{layer}.W"].size
        grads[f"{layer}.W"] = fd[:nW].reshape(p[f"{layer}.W"].shape)
        grads[f"{layer}.b"] = fd[nW:]
        used[f"{layer}.W"] = steps[:nW].reshape(p[f"{layer}.W"].shape)
        used[f"{layer}.b"] = steps[nW:]
    return grads, used


def check_gradients(model: PredictorModel, x: np.ndarray, y: np.ndarray, h: float = 1e-3,
                    abs_floor: float = 1e-10) -> GradCheckResult:
    """Relative error |a - n| / max(|a|, |n|) per parameter; pairs below
    ``abs_floor`` in both magnitudes count as exact zeros."""
    m = model.copy(np.float64)
    x = np.asarray(x, dtype=np.float64).reshape(1, *np.shape(x)[-3:])
    y = np.asarray(y, dtype=np.float64).reshape(1, 6)
    _, analytic = net.loss_and_grad(m, x, y)
    numeric, steps = numeric_gradients(m, x, y, h)
    rel, worst, worst_name, n = {}, 0.0, "", 0
    for name, _ in net.param_shapes():
        a, b = analytic[name], numeric[name]
        scale = np.maximum(np.abs(a), np.abs(b))
        r = np.where(scale > abs_floor, np.abs(a - b) / np.where(scale > 0, scale, 1.0), 0.0)
        r = np.where(steps[name] > 0, r, np.inf)
        rel[name] = r
        n += r.size
        if r.max() > worst:
            worst, worst_name = float(r.max()), name
    return GradCheckResult(worst, worst_name, n, rel, steps)
