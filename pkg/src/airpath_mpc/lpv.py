"""Gridded LPV prediction model: storage, bilinear scheduling, one-step prediction.

The model at operating point ``rho = (engine speed, fuel rate)`` is

    x+ - x_ss = A (x - x_ss) + B (u - u_ss) + Bf (w_inj - w_inj_ss)

with the matrices and equilibrium maps interpolated bilinearly between the
nodes of a speed x fuel mesh.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigurationError, DomainError

MAX_SPECTRAL_RADIUS = 0.999

DEFAULT_SPEED_BREAKPOINTS = tuple(np.linspace(600.0, 2400.0, 9))
DEFAULT_FUEL_BREAKPOINTS = tuple(np.linspace(5.0, 105.0, 11))


class OperatingPoint(NamedTuple):
    """Engine speed [rpm] and fuel injection rate [mg/stroke]."""

    engine_speed: float
    fuel_rate: float

    def check(self) -> "OperatingPoint":
        if not (math.isfinite(self.engine_speed) and math.isfinite(self.fuel_rate)):
            raise DomainError(f"non-finite operating point {tuple(self)}")
        if self.engine_speed < 0 or self.fuel_rate < 0:
            raise DomainError(f"negative operating point {tuple(self)}")
        return self


@dataclass(frozen=True, eq=False)
class LocalModel:
    A: np.ndarray
    B: np.ndarray
    Bf: np.ndarray
    x_ss: np.ndarray
    u_ss: np.ndarray
    w_inj_ss: float

    def __post_init__(self):
        for name, shape in (("A", (2, 2)), ("B", (2, 2)), ("Bf", (2, 1)),
                            ("x_ss", (2,)), ("u_ss", (2,))):
            arr = np.asarray(getattr(self, name), dtype=float)
            if name == "Bf" and arr.shape == (2,):
                arr = arr.reshape(2, 1)
            if arr.shape != shape:
                raise ConfigurationError(f"expected shape {shape}, got {arr.shape}", name)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "w_inj_ss", float(self.w_inj_ss))

    @property
    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.A))))

    def is_stable(self, threshold: float = MAX_SPECTRAL_RADIUS) -> bool:
        return self.spectral_radius < threshold

    def to_dict(self) -> dict:
        return {
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "Bf": self.Bf.tolist(),
            "x_ss": self.x_ss.tolist(),
            "u_ss": self.u_ss.tolist(),
            "w_inj_ss": self.w_inj_ss,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LocalModel":
        return cls(A=d["A"], B=d["B"], Bf=d["Bf"], x_ss=d["x_ss"],
                   u_ss=d["u_ss"], w_inj_ss=d["w_inj_ss"])

    def equals(self, other: "LocalModel") -> bool:
        """Bit-for-bit comparison of every entry."""
        return (all(np.array_equal(getattr(self, k), getattr(other, k))
                    for k in ("A", "B", "Bf", "x_ss", "u_ss"))
                and self.w_inj_ss == other.w_inj_ss)


def _check_breakpoints(bp, name) -> np.ndarray:
    bp = np.asarray(bp, dtype=float)
    if bp.ndim != 1 or bp.size < 2:
        raise ConfigurationError("need at least two breakpoints", name)
    if not np.all(np.isfinite(bp)) or np.any(np.diff(bp) <= 0):
        raise ConfigurationError("breakpoints must be finite and strictly increasing", name)
    bp.setflags(write=False)
    return bp


class CellWeights(NamedTuple):
    i: int
    j: int
    a: float  # fraction along speed
    b: float  # fraction along fuel

    @property
    def at_node(self):
        """(i, j) of the node hit exactly, or None."""
        if self.a in (0.0, 1.0) and self.b in (0.0, 1.0):
            return self.i + int(self.a), self.j + int(self.b)
        return None

    def blend(self, stack: np.ndarray) -> np.ndarray:
        """Bilinear blend of ``stack[i:i+2, j:j+2, ...]``."""
        i, j, a, b = self
        return ((1.0 - a) * (1.0 - b) * stack[i, j] + a * (1.0 - b) * stack[i + 1, j]
                + (1.0 - a) * b * stack[i, j + 1] + a * b * stack[i + 1, j + 1])


class Mesh:
    """Speed x fuel breakpoint mesh with clamped cell lookup."""

    def __init__(self, speed_breakpoints, fuel_breakpoints):
        self.speed = _check_breakpoints(speed_breakpoints, "speed_breakpoints")
        self.fuel = _check_breakpoints(fuel_breakpoints, "fuel_breakpoints")

    @property
    def shape(self):
        return (self.speed.size, self.fuel.size)

    def same_as(self, other: "Mesh") -> bool:
        return np.array_equal(self.speed, other.speed) and np.array_equal(self.fuel, other.fuel)

    def clamp(self, rho) -> OperatingPoint:
        s = min(max(float(rho[0]), self.speed[0]), self.speed[-1])
        f = min(max(float(rho[1]), self.fuel[0]), self.fuel[-1])
        return OperatingPoint(s, f)

    @staticmethod
    def _locate(bp, v):
        k = int(np.searchsorted(bp, v, side="right")) - 1
        k = min(max(k, 0), bp.size - 2)
        return k, (v - bp[k]) / (bp[k + 1] - bp[k])

    def weights(self, rho) -> CellWeights:
        s, f = self.clamp(rho)
        i, a = self._locate(self.speed, s)
        j, b = self._locate(self.fuel, f)
        return CellWeights(i, j, float(a), float(b))

    def node_points(self):
        for i, s in enumerate(self.speed):
            for j, f in enumerate(self.fuel):
                yield (i, j), OperatingPoint(float(s), float(f))


class ModelGrid(Mesh):
    """Immutable 2-D table of local models.

    ``nodes[i][j]`` is the model identified at ``(speed_breakpoints[i],
    fuel_breakpoints[j])``. Stacked copies of the entries are kept for fast
    interpolation.
    """

    def __init__(self, speed_breakpoints, fuel_breakpoints, nodes, terminal_penalties=None):
        super().__init__(speed_breakpoints, fuel_breakpoints)
        n_s, n_f = self.shape
        if len(nodes) != n_s or any(len(row) != n_f for row in nodes):
            raise ConfigurationError(
                f"node table must be {n_s}x{n_f} to match the breakpoints", "nodes")
        self.nodes = tuple(tuple(row) for row in nodes)
        self._stack = {
            k: np.array([[getattr(m, k) for m in row] for row in self.nodes])
            for k in ("A", "B", "Bf", "x_ss", "u_ss", "w_inj_ss")
        }
        for arr in self._stack.values():
            arr.setflags(write=False)
        # raw JSON-compatible penalty records, see riccati.PenaltyGrid
        self.terminal_penalties = list(terminal_penalties or [])

    @property
    def speed_breakpoints(self):
        return self.speed

    @property
    def fuel_breakpoints(self):
        return self.fuel

    def stack(self, key: str) -> np.ndarray:
        return self._stack[key]

    def __iter__(self):
        for row in self.nodes:
            yield from row

    # -- serialization ---------------------------------------------------
    def to_dict(self) -> dict:
        d = {
            "speed_breakpoints": self.speed.tolist(),
            "fuel_breakpoints": self.fuel.tolist(),
            "nodes": [m.to_dict() for m in self],
        }
        if self.terminal_penalties:
            d["terminal_penalties"] = self.terminal_penalties
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelGrid":
        try:
            speed = d["speed_breakpoints"]
            fuel = d["fuel_breakpoints"]
            flat = [LocalModel.from_dict(n) for n in d["nodes"]]
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"malformed model grid: {exc!r}") from exc
        n_f = len(fuel)
        if len(flat) != len(speed) * n_f:
            raise ConfigurationError(
                f"{len(flat)} nodes for a {len(speed)}x{n_f} mesh", "nodes")
        nodes = [flat[i * n_f:(i + 1) * n_f] for i in range(len(speed))]
        return cls(speed, fuel, nodes, d.get("terminal_penalties"))

    def save(self, path) -> None:
        # json writes floats with repr(), which round-trips doubles exactly
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "ModelGrid":
        return cls.from_dict(json.loads(Path(path).read_text()))


def interpolate_model(grid: ModelGrid, rho) -> LocalModel:
    """Bilinearly interpolated local model at ``rho`` (clamped into the mesh)."""
    w = grid.weights(rho)
    node = w.at_node
    if node is not None:
        return grid.nodes[node[0]][node[1]]
    s = grid._stack
    return LocalModel(A=w.blend(s["A"]), B=w.blend(s["B"]), Bf=w.blend(s["Bf"]),
                      x_ss=w.blend(s["x_ss"]), u_ss=w.blend(s["u_ss"]),
                      w_inj_ss=w.blend(s["w_inj_ss"]))


def step_model(m: LocalModel, rho, x, u, w_inj) -> np.ndarray:
    """One-step prediction of the LPV model in absolute coordinates.

    ``rho`` is accepted for interface symmetry; ``m`` must already be the
    model scheduled at ``rho``.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    return (m.x_ss + m.A @ (x - m.x_ss) + m.B @ (u - m.u_ss)
            + m.Bf[:, 0] * (float(w_inj) - m.w_inj_ss))


def simulate_model(m: LocalModel, x0, u_seq: Sequence, w_seq: Sequence) -> np.ndarray:
    """Open-loop trajectory ``x_0..x_T`` of a fixed local model."""
    xs = [np.asarray(x0, dtype=float)]
    for u, w in zip(u_seq, w_seq):
        xs.append(step_model(m, None, xs[-1], u, w))
    return np.array(xs)
