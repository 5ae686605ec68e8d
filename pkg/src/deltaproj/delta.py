"""Low-rank delta projections: a shared base weight plus a rank-r update ``u @ v.T``."""
from __future__ import annotations

from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dltn
from .errors import ConfigError, DimensionError
from .numerics import matmul, stage

RANK_RTOL = 1e-9


@dataclass(frozen=True)
class DeltaLinear:
    """``y = x @ (base + u @ v.T).T`` with ``base`` of shape (d_out, d_in).

    The constructor accepts ``rank <= min(d_out, d_in)`` so that degenerate
    full-rank factors can be built for testing; :func:`delta_init` and the
    projector config insist on ``rank < min(d_out, d_in)``.
    """

    base: np.ndarray
    u: np.ndarray
    v: np.ndarray
    layer_index: int = 0

    def __post_init__(self):
        if self.base.ndim != 2 or self.u.ndim != 2 or self.v.ndim != 2:
            raise DimensionError("base, u and v must all be matrices")
        d_out, d_in = self.base.shape
        r = self.u.shape[1]
        if self.u.shape != (d_out, r) or self.v.shape != (d_in, r):
            raise DimensionError(
                f"factor shapes u{self.u.shape} v{self.v.shape} incompatible with base {self.base.shape}"
            )
        if r < 1 or r > min(d_out, d_in):
            raise ConfigError(f"rank {r} outside [1, {min(d_out, d_in)}]")

    @property
    def d_out(self) -> int:
        return self.base.shape[0]

    @property
    def d_in(self) -> int:
        return self.base.shape[1]

    @property
    def rank(self) -> int:
        return self.u.shape[1]


@dataclass(frozen=True)
class DeltaFamily:
    """One stored base matrix shared by several pathways, each with its own factors."""

    base: np.ndarray
    deltas: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    layer_index: int = 0

    def layer(self, name: str) -> DeltaLinear:
        try:
            u, v = self.deltas[name]
        except KeyError:
            raise ConfigError(f"no delta pathway named {name!r}; have {sorted(self.deltas)}") from None
        return DeltaLinear(self.base, u, v, self.layer_index)


def _check_rank(d_out: int, d_in: int, r: int) -> None:
    if not 1 <= r < min(d_out, d_in):
        raise ConfigError(f"delta rank must satisfy 1 <= r < min(d_out, d_in) = {min(d_out, d_in)}, got {r}")


def delta_init(d_out: int, d_in: int, r: int, rng: np.random.Generator, layer_index: int = 0) -> DeltaLinear:
    """Zero-delta start: ``base ~ U(+-1/sqrt(d_in))``, ``u ~ U(+-1/sqrt(r))``, ``v = 0``."""
    _check_rank(d_out, d_in, r)
    base = rng.uniform(-1.0, 1.0, (d_out, d_in)) / np.sqrt(d_in)
    u = rng.uniform(-1.0, 1.0, (d_out, r)) / np.sqrt(r)
    return DeltaLinear(base, u, np.zeros((d_in, r)), layer_index)


def delta_family_init(
    d_out: int,
    d_in: int,
    r: int,
    rng: np.random.Generator,
    names=("q", "k", "v"),
    layer_index: int = 0,
) -> DeltaFamily:
    _check_rank(d_out, d_in, r)
    base = rng.uniform(-1.0, 1.0, (d_out, d_in)) / np.sqrt(d_in)
    deltas = {}
    for name in names:
        u = rng.uniform(-1.0, 1.0, (d_out, r)) / np.sqrt(r)
        deltas[name] = (u, np.zeros((d_in, r)))
    return DeltaFamily(base, deltas, layer_index)


def _check_input(layer: DeltaLinear, x: np.ndarray) -> None:
    if x.ndim != 2 or x.shape[1] != layer.d_in:
        raise DimensionError(f"input {x.shape} does not match layer d_in={layer.d_in}")


def delta_apply(layer: DeltaLinear, x: np.ndarray) -> np.ndarray:
    return delta_apply_vjp(layer, x)[0]


def delta_apply_vjp(layer: DeltaLinear, x: np.ndarray, name: str | None = None, use_delta: bool = True):
    """Factored application ``x @ base.T + (x @ v) @ u.T``; the d_out x d_in update is never formed.

    With ``name`` set, the base and low-rank products are traced as separate
    stages ``<name>.base`` and ``<name>.delta``.  ``use_delta=False`` drops the
    update (plain base projection) but keeps the empty delta stage in the trace.
    """
    _check_input(layer, x)
    with stage(f"{name}.base", "base_proj", x.shape) if name else nullcontext():
        y = matmul(x, layer.base.T)
    p = None
    with stage(f"{name}.delta", "deltaproj", x.shape) if name else nullcontext():
        if use_delta:
            p = matmul(x, layer.v)
            y = y + matmul(p, layer.u.T)

    def backward(g):
        dbase = g.T @ x
        dx = g @ layer.base
        if p is None:
            zu = np.zeros_like(layer.u)
            return dx, {"base": dbase, "u": zu, "v": np.zeros_like(layer.v)}
        gu = g @ layer.u
        dx = dx + gu @ layer.v.T
        return dx, {"base": dbase, "u": g.T @ p, "v": x.T @ gu}

    return y, backward


def delta_materialize(layer: DeltaLinear) -> np.ndarray:
    """Explicit ``base + u @ v.T``; diagnostics and tests only."""
    return layer.base + layer.u @ layer.v.T


def update_rank(layer: DeltaLinear, rtol: float = RANK_RTOL) -> int:
    """Numerical rank of ``u @ v.T`` via the r x r core ``R_u @ R_v.T`` of thin QRs."""
    _, ru = np.linalg.qr(layer.u)
    _, rv = np.linalg.qr(layer.v)
    sv = np.linalg.svd(ru @ rv.T, compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0:
        return 0
    return int(np.count_nonzero(sv > rtol * sv[0]))


def save_delta(layer: DeltaLinear, directory, name: str) -> dict[str, int]:
    """Write base/u/v as DLTN files; returns the header record for the run-config."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    dltn.save(directory / f"{name}.base.dltn", layer.base)
    dltn.save(directory / f"{name}.u.dltn", layer.u)
    dltn.save(directory / f"{name}.v.dltn", layer.v)
    return {
        f"{name}.d_out": layer.d_out,
        f"{name}.d_in": layer.d_in,
        f"{name}.r": layer.rank,
        f"{name}.layer_index": layer.layer_index,
    }


def load_delta(directory, name: str, header: dict) -> DeltaLinear:
    directory = Path(directory)
    layer = DeltaLinear(
        dltn.load(directory / f"{name}.base.dltn"),
        dltn.load(directory / f"{name}.u.dltn"),
        dltn.load(directory / f"{name}.v.dltn"),
        int(header[f"{name}.layer_index"]),
    )
    expect = (int(header[f"{name}.d_out"]), int(header[f"{name}.d_in"]), int(header[f"{name}.r"]))
    if (layer.d_out, layer.d_in, layer.rank) != expect:
        raise DimensionError(f"{name}: header {expect} disagrees with stored tensors")
    return layer
