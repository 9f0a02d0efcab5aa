"""Radiance field: positional encoding and a small softplus MLP.

Topology: encoded position -> ``depth`` hidden layers -> density head, plus a
feature vector that is concatenated with the encoded view direction and fed to
a narrower color head.
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import autodiff as ad


class FieldError(RuntimeError):
    def __init__(self, layer: str, msg: str = "non-finite activations"):
        super().__init__(f"{msg} at layer {layer}")
        self.layer = layer


def positional_encoding(v, L: int, include_input: bool = True):
    """``[v, sin(2^k pi v), cos(2^k pi v)]`` for ``k < L``.

    Accepts a numpy array or a :class:`~jointnerf.autodiff.Var` of shape
    ``(3,)`` or ``(N, 3)``; the sin block precedes the cos block.
    """
    if L < 0:
        raise ValueError("L must be >= 0")
    freqs = np.pi * 2.0 ** np.arange(L)
    if isinstance(v, ad.Var):
        single = v.value.ndim == 1
        x = ad.reshape(v, (1, 3)) if single else v
        n = x.shape[0]
        parts = [x] if include_input else []
        if L:
            arg = ad.reshape(ad.reshape(x, (n, 1, 3)) * freqs[None, :, None], (n, 3 * L))
            parts += [ad.sin(arg), ad.cos(arg)]
        out = ad.concat(parts, axis=-1)
        return ad.reshape(out, (out.shape[1],)) if single else out
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 1
    x = v.reshape(1, 3) if single else v
    parts = [x] if include_input else []
    if L:
        arg = (x[:, None, :] * freqs[None, :, None]).reshape(len(x), 3 * L)
        parts += [np.sin(arg), np.cos(arg)]
    out = np.concatenate(parts, axis=-1)
    return out[0] if single else out


@dataclass
class FieldParams:
    L_pos: int = 6
    L_dir: int = 4
    width: int = 64
    depth: int = 4
    pos_scale: float = 1.0
    use_viewdirs: bool = True
    arrays: dict[str, np.ndarray] = dc_field(default_factory=dict)

    @property
    def pos_dim(self) -> int:
        return 3 + 6 * self.L_pos

    @property
    def dir_dim(self) -> int:
        return 3 + 6 * self.L_dir if self.use_viewdirs else 0

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        fan_in = self.pos_dim
        for i in range(self.depth):
            shapes[f"h{i}.W"] = (fan_in, self.width)
            shapes[f"h{i}.b"] = (self.width,)
            fan_in = self.width
        half = max(1, self.width // 2)
        shapes.update({
            "sigma.W": (self.width, 1), "sigma.b": (1,),
            "feat.W": (self.width, self.width), "feat.b": (self.width,),
            "rgb_h.W": (self.width + self.dir_dim, half), "rgb_h.b": (half,),
            "rgb.W": (half, 3), "rgb.b": (3,),
        })
        return shapes

    @classmethod
    def init(cls, rng, density_bias: float = 0.5, **kw) -> "FieldParams":
        """Glorot-uniform weights, zero biases, density bias ``density_bias``."""
        p = cls(**kw)
        for name, shape in p.layer_shapes().items():
            if name.endswith(".W"):
                s = np.sqrt(6.0 / (shape[0] + shape[1]))
                p.arrays[name] = rng.uniform(-s, s, size=shape)
            else:
                p.arrays[name] = np.zeros(shape)
        p.arrays["sigma.b"][:] = density_bias
        return p

    def copy(self) -> "FieldParams":
        return FieldParams(self.L_pos, self.L_dir, self.width, self.depth,
                           self.pos_scale, self.use_viewdirs,
                           {k: v.copy() for k, v in self.arrays.items()})

    def meta(self) -> dict:
        return {"L_pos": self.L_pos, "L_dir": self.L_dir, "width": self.width,
                "depth": self.depth, "pos_scale": self.pos_scale,
                "use_viewdirs": self.use_viewdirs}

    def on_tape(self, tape: ad.Tape, trainable: bool = True) -> dict[str, ad.Var]:
        make = tape.var if trainable else tape.const
        return {k: make(v) for k, v in self.arrays.items()}

    def save(self, path) -> None:
        save_npz_atomic(path, {"meta": json.dumps(self.meta(), sort_keys=True),
                               **{f"w/{k}": v for k, v in self.arrays.items()}})

    @classmethod
    def load(cls, path) -> "FieldParams":
        with np.load(path) as z:
            meta = json.loads(str(z["meta"]))
            arrays = {k[2:]: z[k].copy() for k in z.files if k.startswith("w/")}
        p = cls(**meta)
        p.arrays = {k: arrays[k] for k in p.layer_shapes()}
        return p


def save_npz_atomic(path, arrays: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp.npz")
    os.close(fd)
    try:
        np.savez(tmp, **{k: np.asarray(v) for k, v in arrays.items()})
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _check(v: ad.Var, layer: str) -> ad.Var:
    if not np.all(np.isfinite(v.value)):
        raise FieldError(layer)
    return v


def field_forward(params: FieldParams, x, d, tape: ad.Tape | None = None,
                  weights: dict[str, ad.Var] | None = None, dir_index=None):
    """Evaluate the field at points ``x`` viewed along unit directions ``d``.

    ``x`` and ``d`` are ``(N, 3)`` arrays or Vars. ``weights`` are tape
    handles for the parameters (from :meth:`FieldParams.on_tape`); when
    omitted they are added as constants. With ``dir_index``, ``d`` holds one
    direction per ray and ``dir_index`` maps each point to its ray. Returns ``(rgb, sigma)`` Vars of
    shapes ``(N, 3)`` and ``(N,)``.
    """
    if tape is None:
        tape = x.tape if isinstance(x, ad.Var) else ad.Tape()
    if weights is None:
        weights = params.on_tape(tape, trainable=False)
    x = tape.lift(x)
    d = tape.lift(d)
    dn = np.linalg.norm(np.atleast_2d(d.value), axis=-1)
    if np.any(np.abs(dn - 1) > 1e-6):
        raise ValueError("view directions must be unit length")
    xs = x * (1.0 / params.pos_scale) if params.pos_scale != 1.0 else x
    h = positional_encoding(xs, params.L_pos)
    for i in range(params.depth):
        h = _check(ad.softplus(h @ weights[f"h{i}.W"] + weights[f"h{i}.b"]), f"h{i}")
    raw_sigma = _check(h @ weights["sigma.W"] + weights["sigma.b"], "sigma")
    sigma = ad.softplus(ad.reshape(raw_sigma, (raw_sigma.shape[0],)))
    feat = h @ weights["feat.W"] + weights["feat.b"]
    if params.use_viewdirs:
        enc = positional_encoding(d, params.L_dir)
        if dir_index is not None:
            enc = ad.take(enc, dir_index)
        feat = ad.concat([feat, enc], axis=-1)
    hc = _check(ad.softplus(feat @ weights["rgb_h.W"] + weights["rgb_h.b"]), "rgb_h")
    rgb = ad.sigmoid(_check(hc @ weights["rgb.W"] + weights["rgb.b"], "rgb"))
    return rgb, sigma
