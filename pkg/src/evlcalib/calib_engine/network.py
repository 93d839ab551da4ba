"""Toy convolutional regressor with a split translation / rotation head.

Layout (parameter order is also the checkpoint order)::

    conv1  2 -> 8   3x3 stride 2 pad 1, ReLU
    conv2  8 -> 16  3x3 stride 2 pad 1, ReLU
    conv3 16 -> 32  3x3 stride 2 pad 1, ReLU, global average pool
    shared 32 -> 32 dense, ReLU
    trans1 32 -> 16 dense, ReLU     rot1 32 -> 16 dense, ReLU
    trans2 16 -> 3  dense           rot2 16 -> 3  dense

Outputs live in loss units (decimetres, degrees) and are de-scaled by
:func:`predict`. Every array is float32 unless a float64 copy is requested
for gradient checking.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import CheckpointNotFoundError, FormatError, NonFiniteGradientError, NonFiniteParametersError
from ..geometry import EulerPose
from ..lidar_cam import CalibInput

CONV_LAYERS = (("conv1", 2, 8), ("conv2", 8, 16), ("conv3", 16, 32))
DENSE_LAYERS = (("shared", 32, 32), ("trans1", 32, 16), ("trans2", 16, 3),
                ("rot1", 32, 16), ("rot2", 16, 3))
TRANS_UNIT_M = 0.1  # one loss unit of translation is a decimetre
ROT_UNIT_DEG = 1.0

CKPT_MAGIC = b"EVLM"
CKPT_VERSION = 1


def param_shapes() -> list[tuple[str, tuple[int, ...]]]:
    shapes = []
    for name, cin, cout in CONV_LAYERS:
        shapes += [(f"{name}.W", (cout, cin, 3, 3)), (f"{name}.b", (cout,))]
    for name, nin, nout in DENSE_LAYERS:
        shapes += [(f"{name}.W", (nout, nin)), (f"{name}.b", (nout,))]
    return shapes


@dataclass
class PredictorModel:
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, seed: int = 0) -> "PredictorModel":
        """He-normal weights, zero biases; output layers scaled down."""
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in param_shapes():
            if name.endswith(".b"):
                params[name] = np.zeros(shape, dtype=np.float32)
                continue
            fan_in = int(np.prod(shape[1:]))
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
            if name.startswith(("trans2", "rot2")):
                w *= 0.1
            params[name] = w.astype(np.float32)
        return cls(params)

    @classmethod
    def zeros(cls) -> "PredictorModel":
        return cls({n: np.zeros(s, dtype=np.float32) for n, s in param_shapes()})

    def copy(self, dtype=np.float32) -> "PredictorModel":
        return PredictorModel({k: v.astype(dtype, copy=True) for k, v in self.params.items()})

    @property
    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.params.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[n].ravel() for n, _ in param_shapes()])

    def equals(self, other: "PredictorModel") -> bool:
        return all(np.array_equal(self.params[n], other.params[n]) for n, _ in param_shapes())


# -- layers --------------------------------------------------------------------

def im2col(x: np.ndarray) -> np.ndarray:
    """(N, C, H, W) -> (N, C*9, Ho*Wo) patches for a 3x3 stride-2 pad-1 conv."""
    N, C, H, W = x.shape
    Ho, Wo = (H + 1) // 2, (W + 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((N, C, 3, 3, Ho, Wo), dtype=x.dtype)
    for ki in range(3):
        for kj in range(3):
            cols[:, :, ki, kj] = xp[:, :, ki:ki + 2 * Ho:2, kj:kj + 2 * Wo:2]
    return cols.reshape(N, C * 9, Ho * Wo)


def col2im(dcols: np.ndarray, shape: tuple[int, int, int, int]) -> np.ndarray:
    """Adjoint of :func:`im2col`."""
    N, C, H, W = shape
    Ho, Wo = (H + 1) // 2, (W + 1) // 2
    d = dcols.reshape(N, C, 3, 3, Ho, Wo)
    dxp = np.zeros((N, C, H + 2, W + 2), dtype=dcols.dtype)
    for ki in range(3):
        for kj in range(3):
            dxp[:, :, ki:ki + 2 * Ho:2, kj:kj + 2 * Wo:2] += d[:, :, ki, kj]
    return dxp[:, :, 1:H + 1, 1:W + 1]


def conv_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray):
    N, _, H, Wd = x.shape
    cols = im2col(x)
    z = np.matmul(W.reshape(W.shape[0], -1), cols) + b[None, :, None]
    return z.reshape(N, W.shape[0], (H + 1) // 2, (Wd + 1) // 2), cols


def conv_backward(dz: np.ndarray, cols: np.ndarray, W: np.ndarray, x_shape):
    N, F = dz.shape[:2]
    dz2 = dz.reshape(N, F, -1)
    dW = np.einsum("nfp,nkp->fk", dz2, cols).reshape(W.shape)
    db = dz2.sum(axis=(0, 2))
    dx = col2im(np.matmul(W.reshape(F, -1).T, dz2), x_shape)
    return dx, dW, db


# -- network -------------------------------------------------------------------

def stack_inputs(inputs) -> np.ndarray:
    """CalibInput, list of them, or an (N, 2, H, W) array -> (N, 2, H, W)."""
    if isinstance(inputs, CalibInput):
        return inputs.stacked()[None]
    if isinstance(inputs, np.ndarray):
        return inputs if inputs.ndim == 4 else inputs[None]
    return np.stack([c.stacked() for c in inputs])


def forward_raw(model: PredictorModel, x: np.ndarray, keep: bool = False):
    """Network outputs in loss units, shape (N, 6); optionally with a backward cache."""
    p = model.params
    x = x.astype(next(iter(p.values())).dtype, copy=False)
    cache = {"x0": x}
    a = x
    for i, (name, _, _) in enumerate(CONV_LAYERS):
        z, cols = conv_forward(a, p[f"{name}.W"], p[f"{name}.b"])
        cache[f"{name}.in_shape"] = a.shape
        cache[f"{name}.cols"] = cols
        cache[f"{name}.z"] = z
        a = np.maximum(z, 0)
    g = a.mean(axis=(2, 3))
    cache["pool_shape"] = a.shape
    zs = g @ p["shared.W"].T + p["shared.b"]
    s = np.maximum(zs, 0)
    zt1 = s @ p["trans1.W"].T + p["trans1.b"]
    ht = np.maximum(zt1, 0)
    out_t = ht @ p["trans2.W"].T + p["trans2.b"]
    zr1 = s @ p["rot1.W"].T + p["rot1.b"]
    hr = np.maximum(zr1, 0)
    out_r = hr @ p["rot2.W"].T + p["rot2.b"]
    cache.update(g=g, zs=zs, s=s, zt1=zt1, ht=ht, zr1=zr1, hr=hr)
    out = np.concatenate([out_t, out_r], axis=1)
    return (out, cache) if keep else out


def label_units(labels) -> np.ndarray:
    """EulerPose or sequence of them -> (N, 6) array in loss units."""
    if isinstance(labels, EulerPose):
        labels = [labels]
    if isinstance(labels, np.ndarray):
        return np.atleast_2d(labels)
    arr = np.array([l.as_array() for l in labels], dtype=np.float64)
    arr[:, :3] /= TRANS_UNIT_M
    arr[:, 3:] /= ROT_UNIT_DEG
    return arr


def to_pose(out_row: np.ndarray) -> EulerPose:
    v = np.asarray(out_row, dtype=np.float64).copy()
    v[:3] *= TRANS_UNIT_M
    v[3:] *= ROT_UNIT_DEG
    return EulerPose.from_array(v)


def predict(model: PredictorModel, inp) -> EulerPose | list[EulerPose]:
    """Correction predicted for one CalibInput (or a list of them)."""
    if not model.is_finite():
        raise NonFiniteParametersError("model parameters contain NaN or inf")
    out = forward_raw(model, stack_inputs(inp))
    poses = [to_pose(r) for r in out]
    return poses[0] if isinstance(inp, CalibInput) else poses


def loss(pred: EulerPose, label: EulerPose) -> float:
    """Mean squared componentwise error after the decimetre / degree scaling."""
    d = label_units(pred) - label_units(label)
    return float(np.mean(d ** 2))


def loss_and_grad(model: PredictorModel, x: np.ndarray, y: np.ndarray):
    """Batch MSE in loss units and exact gradients for every parameter."""
    p = model.params
    out, c = forward_raw(model, x, keep=True)
    N = out.shape[0]
    diff = out - y.astype(out.dtype)
    L = float(np.mean(diff ** 2))
    dout = (2.0 / diff.size) * diff
    grads = {}
    dt, dr = dout[:, :3], dout[:, 3:]
    grads["trans2.W"] = dt.T @ c["ht"]
    grads["trans2.b"] = dt.sum(0)
    dzt1 = (dt @ p["trans2.W"]) * (c["zt1"] > 0)
    grads["trans1.W"] = dzt1.T @ c["s"]
    grads["trans1.b"] = dzt1.sum(0)
    grads["rot2.W"] = dr.T @ c["hr"]
    grads["rot2.b"] = dr.sum(0)
    dzr1 = (dr @ p["rot2.W"]) * (c["zr1"] > 0)
    grads["rot1.W"] = dzr1.T @ c["s"]
    grads["rot1.b"] = dzr1.sum(0)
    ds = dzt1 @ p["trans1.W"] + dzr1 @ p["rot1.W"]
    dzs = ds * (c["zs"] > 0)
    grads["shared.W"] = dzs.T @ c["g"]
    grads["shared.b"] = dzs.sum(0)
    dg = dzs @ p["shared.W"]
    _, F, Ho, Wo = c["pool_shape"]
    da = np.broadcast_to((dg / (Ho * Wo))[:, :, None, None], c["pool_shape"])
    for name, _, _ in reversed(CONV_LAYERS):
        dz = da * (c[f"{name}.z"] > 0)
        da, grads[f"{name}.W"], grads[f"{name}.b"] = conv_backward(
            dz, c[f"{name}.cols"], p[f"{name}.W"], c[f"{name}.in_shape"])
    for k, v in grads.items():
        if not np.all(np.isfinite(v)):
            raise NonFiniteGradientError(f"gradient of {k} is not finite")
    grads = {k: v.astype(p[k].dtype, copy=False) for k, v in grads.items()}
    return L, grads


# -- checkpoint ----------------------------------------------------------------

def save_checkpoint(path, model: PredictorModel) -> None:
    """magic, version u32, layer count u32, per layer (name len u32, name,
    ndim u32, dims u32...), then all parameters as little-endian float32."""
    shapes = param_shapes()
    head = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(shapes))]
    for name, shape in shapes:
        nb = name.encode()
        head.append(struct.pack("<I", len(nb)) + nb)
        head.append(struct.pack(f"<I{len(shape)}I", len(shape), *shape))
    body = [model.params[n].astype("<f4").tobytes() for n, _ in shapes]
    Path(path).write_bytes(b"".join(head + body))


def load_checkpoint(path) -> PredictorModel:
    path = Path(path)
    if not path.is_file():
        raise CheckpointNotFoundError(f"no checkpoint at {path}")
    raw = path.read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    try:
        version, count = struct.unpack_from("<II", raw, 4)
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        off = 12
        table = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off:off + nlen].decode()
            off += nlen
            (ndim,) = struct.unpack_from("<I", raw, off)
            off += 4
            dims = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            table.append((name, tuple(dims)))
    except struct.error as exc:
        raise FormatError(f"{path}: truncated header") from exc
    if table != param_shapes():
        raise FormatError(f"{path}: layer table does not match the architecture")
    params = {}
    for name, shape in table:
        n = int(np.prod(shape))
        if off + 4 * n > len(raw):
            raise FormatError(f"{path}: truncated parameters")
        params[name] = np.frombuffer(raw, "<f4", n, off).reshape(shape).astype(np.float32)
        off += 4 * n
    if off != len(raw):
        raise FormatError(f"{path}: trailing bytes after parameters")
    return PredictorModel(params)
