"""Residual MLP Q-network with hand-written reverse mode and AdamW.

Architecture: linear -> layer norm -> residual blocks (linear, layer norm,
GELU, skip) -> layer norm -> linear.  Everything is float64 and batch size 1.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf

from .errors import ConfigError, ContractError

LN_EPS = 1e-5
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int = 76
    hidden_dim: int = 64
    residual_blocks: int = 2
    output_dim: int = 24

    def __post_init__(self):
        for name in ("input_dim", "hidden_dim", "output_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"network.{name}", f"must be >= 1, got {getattr(self, name)}")
        if self.residual_blocks < 0:
            raise ConfigError("network.residual_blocks", "must be >= 0")
        if self.output_dim % 2:
            raise ConfigError("network.output_dim", "must be twice the number of joints")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        """Parameter names and shapes in canonical order."""
        h = self.hidden_dim
        out = {"in.W": (h, self.input_dim), "in.b": (h,), "in_ln.g": (h,), "in_ln.b": (h,)}
        for k in range(self.residual_blocks):
            out.update({f"res{k}.W": (h, h), f"res{k}.b": (h,), f"res{k}_ln.g": (h,), f"res{k}_ln.b": (h,)})
        out.update({"out_ln.g": (h,), "out_ln.b": (h,), "out.W": (self.output_dim, h), "out.b": (self.output_dim,)})
        return out


@dataclass
class NetworkParams:
    """Named parameter arrays plus a version counter bumped on every update.

    The named arrays are views into one contiguous buffer so the optimizer
    can update everything in a single vectorized pass.
    """

    spec: NetworkSpec
    arrays: dict[str, np.ndarray]
    version: int = 0

    def __post_init__(self):
        shapes = self.spec.shapes()
        if set(self.arrays) != set(shapes):
            raise ContractError("parameter names do not match the network spec")
        for name, shape in shapes.items():
            if self.arrays[name].shape != shape:
                raise ContractError(f"{name} has shape {self.arrays[name].shape}, expected {shape}")
        self.buffer = np.concatenate([np.asarray(self.arrays[k], dtype=float).ravel() for k in shapes])
        self.arrays = _views(self.buffer, shapes)

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.spec, {k: v.copy() for k, v in self.arrays.items()}, self.version)

    def flat(self) -> np.ndarray:
        return self.buffer.copy()

    def save(self, path: str | Path) -> None:
        """Write ``<path>.npy`` (flat float64 array) and ``<path>.json`` (shape manifest)."""
        path = Path(path)
        np.save(path.with_suffix(".npy"), self.flat())
        manifest = {
            "spec": asdict(self.spec),
            "version": self.version,
            "layout": [{"name": k, "shape": list(s)} for k, s in self.spec.shapes().items()],
        }
        path.with_suffix(".json").write_text(json.dumps(manifest, indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "NetworkParams":
        path = Path(path)
        manifest = json.loads(path.with_suffix(".json").read_text())
        spec = NetworkSpec(**manifest["spec"])
        flat = np.load(path.with_suffix(".npy"))
        shapes = spec.shapes()
        n = sum(int(np.prod(sh)) for sh in shapes.values())
        if flat.shape != (n,):
            raise ContractError(f"snapshot has {flat.size} values, layout needs {n}")
        arrays = _views(flat.astype(float), shapes)
        return cls(spec, arrays, manifest.get("version", 0))


def _views(buffer: np.ndarray, shapes: dict) -> dict[str, np.ndarray]:
    out, offset = {}, 0
    for name, shape in shapes.items():
        n = int(np.prod(shape))
        out[name] = buffer[offset : offset + n].reshape(shape)
        offset += n
    return out


def initialize(spec: NetworkSpec, seed: int) -> NetworkParams:
    """Fan-in scaled uniform weights, zero biases, unit gains and zero offsets."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in spec.shapes().items():
        if name.endswith(".W"):
            bound = 1.0 / math.sqrt(shape[1])
            arrays[name] = rng.uniform(-bound, bound, size=shape)
        elif name.endswith("_ln.g"):
            arrays[name] = np.ones(shape)
        else:
            arrays[name] = np.zeros(shape)
    return NetworkParams(spec, arrays)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _ln_forward(x, g, b):
    mu = x.mean()
    xc = x - mu
    inv = 1.0 / math.sqrt(float(xc @ xc) / x.size + LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv)


def _ln_backward(dy, g, cache):
    xhat, inv = cache
    dg = dy * xhat
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean() - xhat * (dxhat @ xhat) / xhat.size)
    return dx, dg, dy.copy()


@dataclass
class ForwardTrace:
    """Intermediate values of one forward pass, tied to the parameters that produced it."""

    params_id: int
    version: int
    x: np.ndarray
    caches: list = field(default_factory=list)
    output: np.ndarray | None = None


def forward(params: NetworkParams, x) -> tuple[np.ndarray, ForwardTrace]:
    """Evaluate the network on one input vector.

    Returns:
        The ``output_dim`` vector ordered (joint 0: NO_TORQUE, MOVE), (joint 1: ...), ...
        and the trace needed by :func:`backward`.
    """
    spec, p = params.spec, params.arrays
    x = np.asarray(x, dtype=float)
    if x.shape != (spec.input_dim,):
        raise ContractError(f"input must have shape ({spec.input_dim},), got {x.shape}")
    trace = ForwardTrace(id(params), params.version, x.copy())

    z = p["in.W"] @ x + p["in.b"]
    h, ln = _ln_forward(z, p["in_ln.g"], p["in_ln.b"])
    trace.caches.append(ln)
    for k in range(spec.residual_blocks):
        a = p[f"res{k}.W"] @ h + p[f"res{k}.b"]
        n, ln = _ln_forward(a, p[f"res{k}_ln.g"], p[f"res{k}_ln.b"])
        trace.caches.append((h, ln, n))
        h = h + gelu(n)
    y, ln = _ln_forward(h, p["out_ln.g"], p["out_ln.b"])
    trace.caches.append((ln, y))
    out = p["out.W"] @ y + p["out.b"]
    trace.output = out.copy()
    return out, trace


def backward(params: NetworkParams, trace: ForwardTrace, grad_output) -> dict[str, np.ndarray]:
    """Gradients of ``<output, grad_output>`` with respect to every parameter."""
    spec, p = params.spec, params.arrays
    if trace.params_id != id(params) or trace.version != params.version:
        raise ContractError("stale forward trace: parameters changed since the forward pass")
    g = np.asarray(grad_output, dtype=float)
    if g.shape != (spec.output_dim,):
        raise ContractError(f"output gradient must have shape ({spec.output_dim},), got {g.shape}")

    grads: dict[str, np.ndarray] = {}
    ln_out, y = trace.caches[-1]
    grads["out.W"] = np.outer(g, y)
    grads["out.b"] = g.copy()
    dh, grads["out_ln.g"], grads["out_ln.b"] = _ln_backward(p["out.W"].T @ g, p["out_ln.g"], ln_out)

    for k in reversed(range(spec.residual_blocks)):
        h_in, ln, n = trace.caches[1 + k]
        dn = dh * gelu_grad(n)
        da, grads[f"res{k}_ln.g"], grads[f"res{k}_ln.b"] = _ln_backward(dn, p[f"res{k}_ln.g"], ln)
        grads[f"res{k}.W"] = np.outer(da, h_in)
        grads[f"res{k}.b"] = da
        dh = dh + p[f"res{k}.W"].T @ da

    dz, grads["in_ln.g"], grads["in_ln.b"] = _ln_backward(dh, p["in_ln.g"], trace.caches[0])
    grads["in.W"] = np.outer(dz, trace.x)
    grads["in.b"] = dz
    return grads


@dataclass
class AdamW:
    """Decoupled-weight-decay Adam with per-parameter moments."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)

    def step(self, params: NetworkParams, grads: dict[str, np.ndarray]) -> None:
        """Update ``params`` in place and bump its version."""
        shapes = params.spec.shapes()
        if set(grads) != set(shapes):
            raise ContractError("gradient names do not match parameter names")
        for name, shape in shapes.items():
            if grads[name].shape != shape:
                raise ContractError(f"gradient for {name} has shape {grads[name].shape}, expected {shape}")
        g = np.concatenate([grads[k].ravel() for k in shapes])
        w = params.buffer
        if self.m is None:
            self.m = np.zeros_like(w)
            self.v = np.zeros_like(w)
        self.step_count += 1
        t = self.step_count
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * g
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * g * g
        m_hat = self.m / (1.0 - self.beta1**t)
        v_hat = self.v / (1.0 - self.beta2**t)
        w *= 1.0 - self.lr * self.weight_decay
        w -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        params.version += 1


def adamw_step(params: NetworkParams, grads: dict[str, np.ndarray], state: AdamW) -> None:
    state.step(params, grads)
