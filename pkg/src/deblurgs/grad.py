"""Flat parameter store, small MLPs with hand-written backward passes,
positional encoding, Adam, and a central-difference gradient checker.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np


class ShapeMismatch(ValueError):
    pass


class ParamStore:
    """All trainable scalars in one float64 vector, addressed by name.

    ``view(name)`` and ``grad(name)`` return reshaped views, so writes go
    straight into the flat arrays.
    """

    def __init__(self):
        self.values = np.zeros(0)
        self.grads = np.zeros(0)
        self._layout: dict[str, tuple[int, tuple[int, ...]]] = {}

    def add(self, name: str, init) -> np.ndarray:
        if name in self._layout:
            raise KeyError(f"duplicate parameter {name!r}")
        init = np.asarray(init, dtype=np.float64)
        offset = self.values.size
        self._layout[name] = (offset, init.shape)
        self.values = np.concatenate([self.values, init.ravel()])
        self.grads = np.zeros_like(self.values)
        return self.view(name)

    def __contains__(self, name: str) -> bool:
        return name in self._layout

    @property
    def names(self) -> list[str]:
        return list(self._layout)

    def span(self, name: str) -> slice:
        offset, shape = self._layout[name]
        return slice(offset, offset + int(np.prod(shape, dtype=int)))

    def shape(self, name: str) -> tuple[int, ...]:
        return self._layout[name][1]

    def view(self, name: str) -> np.ndarray:
        return self.values[self.span(name)].reshape(self.shape(name))

    def grad(self, name: str) -> np.ndarray:
        return self.grads[self.span(name)].reshape(self.shape(name))

    def zero_grad(self) -> None:
        self.grads[:] = 0.0

    def name_of(self, index: int) -> str:
        for name in self._layout:
            s = self.span(name)
            if s.start <= index < s.stop:
                return name
        raise IndexError(index)

    def copy(self) -> "ParamStore":
        other = ParamStore()
        other.values = self.values.copy()
        other.grads = self.grads.copy()
        other._layout = dict(self._layout)
        return other

    def manifest(self) -> list[dict]:
        return [
            {"name": n, "offset": o, "shape": list(s)}
            for n, (o, s) in self._layout.items()
        ]

    def save(self, directory: str | Path, stem: str = "params") -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.values.astype("<f8").tofile(directory / f"{stem}.bin")
        (directory / f"{stem}.json").write_text(json.dumps(self.manifest(), indent=1))

    @classmethod
    def load(cls, directory: str | Path, stem: str = "params") -> "ParamStore":
        directory = Path(directory)
        store = cls()
        for entry in json.loads((directory / f"{stem}.json").read_text()):
            store._layout[entry["name"]] = (entry["offset"], tuple(entry["shape"]))
        store.values = np.fromfile(directory / f"{stem}.bin", dtype="<f8").astype(np.float64)
        store.grads = np.zeros_like(store.values)
        return store


# --- positional encoding -------------------------------------------------

def positional_encoding(x, bands: int) -> np.ndarray:
    """(sin 2^0 πx, cos 2^0 πx, ..., sin 2^{L-1} πx, cos 2^{L-1} πx).

    For vector input each band contributes ``sin`` of every component,
    then ``cos`` of every component.
    """
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    out = []
    for k in range(bands):
        arg = (2.0**k) * np.pi * x
        out.append(np.sin(arg))
        out.append(np.cos(arg))
    return np.concatenate(out)


def positional_encoding_backward(x, bands: int, grad_out: np.ndarray) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    d = x.size
    g = np.zeros(d)
    for k in range(bands):
        w = (2.0**k) * np.pi
        gs = grad_out[2 * k * d:(2 * k + 1) * d]
        gc = grad_out[(2 * k + 1) * d:(2 * k + 2) * d]
        g += w * (gs * np.cos(w * x) - gc * np.sin(w * x))
    return g


# --- MLP -----------------------------------------------------------------

@dataclass(frozen=True)
class MlpSpec:
    """Layer widths including input and output, e.g. ``(12, 64, 64, 32)``.

    Hidden layers use ReLU; the output layer is affine.
    """

    widths: tuple[int, ...]

    def __post_init__(self):
        if len(self.widths) < 3:
            raise ValueError("an MLP needs at least one hidden layer")
        if any(w <= 0 for w in self.widths):
            raise ValueError("layer widths must be positive")

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]

    @property
    def n_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.widths[:-1], self.widths[1:]))

    def layers(self, params: np.ndarray):
        """Yield (W, b) views into the flat parameter vector."""
        if params.size != self.n_params:
            raise ShapeMismatch(f"expected {self.n_params} parameters, got {params.size}")
        off = 0
        for a, b in zip(self.widths[:-1], self.widths[1:]):
            w = params[off:off + a * b].reshape(a, b)
            off += a * b
            yield w, params[off:off + b]
            off += b

    def init(self, rng: np.random.Generator, zero_last: bool = False) -> np.ndarray:
        chunks = []
        n_layers = len(self.widths) - 1
        for i, (a, b) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            bound = 1.0 / np.sqrt(a)
            if zero_last and i == n_layers - 1:
                chunks += [np.zeros(a * b), np.zeros(b)]
            else:
                chunks += [rng.uniform(-bound, bound, a * b), rng.uniform(-bound, bound, b)]
        return np.concatenate(chunks)


def mlp_forward(spec: MlpSpec, params: np.ndarray, x: np.ndarray):
    """Returns ``(y, cache)``; ``x`` is ``(n_in,)`` or ``(batch, n_in)``."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None] if single else x
    if h.shape[-1] != spec.n_in:
        raise ShapeMismatch(f"input width {h.shape[-1]} != {spec.n_in}")
    inputs = []
    layers = list(spec.layers(params))
    for i, (w, b) in enumerate(layers):
        inputs.append(h)
        h = h @ w + b
        if i < len(layers) - 1:
            h = np.maximum(h, 0.0)
    return (h[0] if single else h), (single, inputs)


def mlp_backward(spec: MlpSpec, params: np.ndarray, cache, grad_out: np.ndarray):
    """Returns ``(grad_input, grad_params)``."""
    single, inputs = cache
    g = np.asarray(grad_out, dtype=np.float64)
    g = g[None] if single else g
    layers = list(spec.layers(params))
    grad_params = np.zeros(spec.n_params)
    gl = list(spec.layers(grad_params))
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        gw, gb = gl[i]
        gw += inputs[i].T @ g
        gb += g.sum(axis=0)
        g = g @ w.T
        if i > 0:
            # inputs[i] is the ReLU output of layer i-1
            g = g * (inputs[i] > 0.0)
    return (g[0] if single else g), grad_params


class Mlp:
    """An MLP whose weights live in a named slot of a ParamStore."""

    def __init__(self, spec: MlpSpec, store: ParamStore, name: str,
                 rng: np.random.Generator | None = None, zero_last: bool = False):
        self.spec = spec
        self.store = store
        self.name = name
        if name not in store:
            rng = rng if rng is not None else np.random.default_rng(0)
            store.add(name, spec.init(rng, zero_last=zero_last))

    @property
    def params(self) -> np.ndarray:
        return self.store.view(self.name)

    def __call__(self, x):
        return mlp_forward(self.spec, self.params, x)

    def backward(self, cache, grad_out) -> np.ndarray:
        g_in, g_params = mlp_backward(self.spec, self.params, cache, grad_out)
        self.store.grad(self.name)[:] += g_params
        return g_in


# --- Adam ----------------------------------------------------------------

class Adam:
    """Adam with bias correction and a learning rate per named slot."""

    def __init__(self, store: ParamStore, lr: dict[str, float] | float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15):
        self.store = store
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros_like(store.values)
        self.v = np.zeros_like(store.values)
        self.step_index = 0
        self.lr_vector = np.zeros_like(store.values)
        for name in store.names:
            rate = lr if np.isscalar(lr) else lr.get(name, lr.get("default", 0.0))
            self.lr_vector[store.span(name)] = rate

    def step(self) -> None:
        self.step_index += 1
        adam_step(self.store.values, self.store.grads, self.m, self.v,
                  self.lr_vector, self.beta1, self.beta2, self.eps, self.step_index)

    def state(self) -> dict:
        return {"m": self.m, "v": self.v, "step_index": self.step_index}

    def load_state(self, m: np.ndarray, v: np.ndarray, step_index: int) -> None:
        self.m[:] = m
        self.v[:] = v
        self.step_index = int(step_index)


def adam_step(values, grads, m, v, lr, beta1, beta2, eps, step_index) -> None:
    """In-place Adam update; ``step_index`` counts from 1."""
    m *= beta1
    m += (1.0 - beta1) * grads
    v *= beta2
    v += (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1**step_index)
    v_hat = v / (1.0 - beta2**step_index)
    values -= lr * m_hat / (np.sqrt(v_hat) + eps)


# --- finite differences --------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: int
    analytic: np.ndarray
    numeric: np.ndarray
    tol: float
    worst_name: str | None = None

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.tol)

    def __str__(self) -> str:
        where = f"{self.worst_name}[{self.worst_index}]" if self.worst_name else str(self.worst_index)
        return (f"max rel err {self.max_rel_error:.3e} at {where} "
                f"(analytic {self.analytic[self.worst_index]:.6e}, "
                f"numeric {self.numeric[self.worst_index]:.6e}), tol {self.tol:g}")


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float | None = None):
    """Elementwise |a - n| / max(|a|, |n|, floor).

    ``floor`` defaults to 1e-6 times the largest numeric magnitude (at
    least 1e-12) so coordinates with negligible gradient are compared
    on the scale of the whole gradient.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if floor is None:
        floor = max(1e-6 * float(np.max(np.abs(numeric), initial=0.0)), 1e-12)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5,
                     indices: Sequence[int] | None = None) -> np.ndarray:
    """Central differences of ``f`` at ``x`` (``x`` is restored afterwards)."""
    idx = range(x.size) if indices is None else indices
    out = np.zeros(len(idx))
    for j, i in enumerate(idx):
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        out[j] = (fp - fm) / (2.0 * h)
    return out


def check_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, analytic: np.ndarray,
                   h: float = 1e-5, tol: float = 1e-3,
                   indices: Sequence[int] | None = None,
                   floor: float | None = None) -> GradCheckReport:
    x = np.asarray(x, dtype=np.float64)
    idx = np.arange(x.size) if indices is None else np.asarray(indices)
    numeric = numeric_gradient(f, x, h, idx)
    a = np.asarray(analytic, dtype=np.float64).ravel()
    a = a if indices is None else a[idx]
    err = relative_errors(a, numeric, floor)
    worst = int(np.argmax(err)) if err.size else 0
    max_err = float(err[worst]) if err.size else 0.0
    if not np.all(np.isfinite(numeric)):
        max_err = float("inf")
    return GradCheckReport(max_err, worst, a, numeric, tol)


def finite_diff_check(f: Callable[[ParamStore], float], store: ParamStore,
                      h: float = 1e-5, tol: float = 1e-3,
                      indices: Sequence[int] | None = None,
                      floor: float | None = None) -> GradCheckReport:
    """Compare ``store.grads`` with central differences of ``f(store)``.

    ``store.grads`` must already hold the analytic gradient at the current
    values; ``f`` must read parameters from ``store.values`` only.
    """
    analytic = store.grads.copy()
    report = check_gradient(lambda _: f(store), store.values, analytic, h, tol, indices, floor)
    idx = np.arange(store.values.size) if indices is None else np.asarray(indices)
    report.worst_name = store.name_of(int(idx[report.worst_index])) if idx.size else None
    return report
