"""Per-robot filter state, error-state layout, cloning and marginalization.

The error state is ordered ``[imu (15) | calib (6) | clones (6 each) | t_d]``.
Clones are kept oldest first.  Every module that needs an index into the
covariance asks :class:`Layout` for it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConsistencyError, DimensionMismatch, EmptyWindow, NonMonotonicTime, WindowFull
from .geom import quat_identity, quat_multiply, quat_normalize, small_angle_quat

IMU_DIM = 15
CALIB_DIM = 6
CLONE_DIM = 6
TD_DIM = 1
DEFAULT_WINDOW = 11


@dataclass
class ImuState:
    q_GtoI: np.ndarray = field(default_factory=quat_identity)
    p_IinG: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v_IinG: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bg: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ba: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.q_GtoI = quat_normalize(self.q_GtoI)
        for name in ("p_IinG", "v_IinG", "bg", "ba"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).copy())

    def copy(self):
        return ImuState(self.q_GtoI.copy(), self.p_IinG.copy(), self.v_IinG.copy(),
                        self.bg.copy(), self.ba.copy())


@dataclass
class CalibState:
    q_ItoC: np.ndarray = field(default_factory=quat_identity)
    p_IinC: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.q_ItoC = quat_normalize(self.q_ItoC)
        self.p_IinC = np.asarray(self.p_IinC, dtype=float).copy()

    def copy(self):
        return CalibState(self.q_ItoC.copy(), self.p_IinC.copy())


@dataclass
class ClonePose:
    timestamp: float
    q_GtoI: np.ndarray
    p_IinG: np.ndarray

    def __post_init__(self):
        self.timestamp = float(self.timestamp)
        self.q_GtoI = quat_normalize(self.q_GtoI)
        self.p_IinG = np.asarray(self.p_IinG, dtype=float).copy()

    def copy(self):
        return ClonePose(self.timestamp, self.q_GtoI.copy(), self.p_IinG.copy())


class Layout:
    """Offsets of each error-state block for a given number of clones."""

    imu_theta = 0
    imu_p = 3
    imu_v = 6
    bg = 9
    ba = 12
    calib_theta = 15
    calib_p = 18
    clones_start = IMU_DIM + CALIB_DIM

    def __init__(self, n_clones: int):
        self.n_clones = n_clones
        self.td = self.clones_start + CLONE_DIM * n_clones
        self.dim = self.td + TD_DIM

    def clone(self, j: int) -> int:
        if j < 0:
            j += self.n_clones
        if not 0 <= j < self.n_clones:
            raise IndexError(j)
        return self.clones_start + CLONE_DIM * j

    def blocks(self) -> dict[str, tuple[int, int]]:
        out = {"imu": (0, IMU_DIM), "calib": (IMU_DIM, CALIB_DIM)}
        for j in range(self.n_clones):
            out[f"clone{j}"] = (self.clone(j), CLONE_DIM)
        out["td"] = (self.td, TD_DIM)
        return out


@dataclass
class RobotState:
    robot_id: int
    imu: ImuState
    calib: CalibState
    clones: list[ClonePose]
    t_d: float
    cov: np.ndarray
    max_clones: int = DEFAULT_WINDOW
    # first-estimate linearization points: clone timestamp -> (q, p), plus
    # "imu" -> (q, p, v) for the current propagation step
    fej_values: dict = field(default_factory=dict)

    @property
    def layout(self) -> Layout:
        return Layout(len(self.clones))

    @property
    def dim(self) -> int:
        return self.layout.dim

    def copy(self) -> "RobotState":
        return RobotState(
            self.robot_id, self.imu.copy(), self.calib.copy(),
            [c.copy() for c in self.clones], self.t_d, self.cov.copy(),
            # entries are replaced, never modified in place
            self.max_clones, dict(self.fej_values),
        )

    def clone_index(self, timestamp: float) -> int:
        for j, c in enumerate(self.clones):
            if c.timestamp == timestamp:
                return j
        raise KeyError(timestamp)

    def set_clone_fej(self, timestamp, q, p):
        if timestamp in self.fej_values:
            raise ConsistencyError(f"first estimate of clone {timestamp} already recorded")
        self.fej_values[timestamp] = (np.array(q, dtype=float), np.array(p, dtype=float))

    def clone_linearization(self, j: int, use_fej: bool):
        """(q, p) at which Jacobians w.r.t. clone ``j`` are evaluated."""
        c = self.clones[j]
        if use_fej and c.timestamp in self.fej_values:
            return self.fej_values[c.timestamp]
        return c.q_GtoI, c.p_IinG

    # -- serialization --------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "robot_id": self.robot_id,
            "imu": {k: getattr(self.imu, k).tolist() for k in ("q_GtoI", "p_IinG", "v_IinG", "bg", "ba")},
            "calib": {"q_ItoC": self.calib.q_ItoC.tolist(), "p_IinC": self.calib.p_IinC.tolist()},
            "clones": [
                {"timestamp": c.timestamp, "q_GtoI": c.q_GtoI.tolist(), "p_IinG": c.p_IinG.tolist()}
                for c in self.clones
            ],
            "t_d": self.t_d,
            "cov": self.cov.tolist(),
            "max_clones": self.max_clones,
            "fej_values": [
                {"key": k, "values": [np.asarray(a).tolist() for a in v]}
                for k, v in self.fej_values.items()
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RobotState":
        state = cls(
            robot_id=d["robot_id"],
            imu=ImuState(**{k: np.array(v) for k, v in d["imu"].items()}),
            calib=CalibState(np.array(d["calib"]["q_ItoC"]), np.array(d["calib"]["p_IinC"])),
            clones=[ClonePose(c["timestamp"], np.array(c["q_GtoI"]), np.array(c["p_IinG"]))
                    for c in d["clones"]],
            t_d=float(d["t_d"]),
            cov=np.array(d["cov"], dtype=float),
            max_clones=int(d.get("max_clones", DEFAULT_WINDOW)),
        )
        for item in d.get("fej_values", []):
            state.fej_values[item["key"]] = tuple(np.array(a) for a in item["values"])
        if state.cov.shape != (state.dim, state.dim):
            raise DimensionMismatch(f"covariance {state.cov.shape} for state dim {state.dim}")
        return state

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "RobotState":
        return cls.from_dict(json.loads(text))


def initial_state(robot_id, imu, calib, cov_std, t_d=0.0, max_clones=DEFAULT_WINDOW) -> RobotState:
    """State with no clones and diagonal covariance.

    ``cov_std`` maps ``theta, p, v, bg, ba, calib_theta, calib_p, td`` to
    standard deviations (missing keys default to zero).
    """
    order = ["theta", "p", "v", "bg", "ba", "calib_theta", "calib_p"]
    diag = np.concatenate([np.full(3, cov_std.get(k, 0.0)) for k in order]
                          + [[cov_std.get("td", 0.0)]])
    return RobotState(robot_id, imu, calib, [], t_d, np.diag(diag ** 2), max_clones)


def symmetrize(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def check_covariance(P: np.ndarray, tol=1e-9) -> np.ndarray:
    """Symmetrize ``P`` and raise if its smallest eigenvalue is below ``-tol``."""
    P = symmetrize(P)
    try:
        # P + tol I is positive definite exactly when min eig(P) > -tol
        np.linalg.cholesky(P + tol * np.eye(P.shape[0]))
    except np.linalg.LinAlgError:
        lam = np.linalg.eigvalsh(P).min()
        raise ConsistencyError(f"covariance not PSD (min eigenvalue {lam:.3e})") from None
    return P


def clone_at(state: RobotState, t_imu: float) -> RobotState:
    """Stochastic cloning of the current IMU pose at IMU time ``t_imu``."""
    if state.clones and t_imu <= state.clones[-1].timestamp:
        raise NonMonotonicTime(f"clone time {t_imu} not after {state.clones[-1].timestamp}")
    if len(state.clones) >= state.max_clones:
        raise WindowFull(f"window already holds {state.max_clones} clones")
    old = state.layout
    n = old.dim
    # old index -> new index; t_d moves 6 slots to make room for the clone
    idx = np.arange(n)
    idx[old.td:] += CLONE_DIM
    new_dim = n + CLONE_DIM
    J = np.zeros((new_dim, n))
    J[idx, np.arange(n)] = 1.0
    J[old.td:old.td + CLONE_DIM, 0:CLONE_DIM] = np.eye(CLONE_DIM)
    out = state.copy()
    out.cov = symmetrize(J @ state.cov @ J.T)
    out.clones.append(ClonePose(t_imu, state.imu.q_GtoI, state.imu.p_IinG))
    if t_imu not in out.fej_values:
        out.set_clone_fej(t_imu, state.imu.q_GtoI, state.imu.p_IinG)
    return out


def marginalize_oldest(state: RobotState) -> RobotState:
    if not state.clones:
        raise EmptyWindow("no clone to marginalize")
    lay = state.layout
    start = lay.clone(0)
    keep = np.r_[0:start, start + CLONE_DIM:lay.dim]
    out = state.copy()
    out.cov = state.cov[np.ix_(keep, keep)]
    oldest = out.clones.pop(0)
    out.fej_values.pop(oldest.timestamp, None)
    return out


def apply_correction(state: RobotState, dx) -> RobotState:
    """Retract an error-state correction onto the nominal state."""
    dx = np.asarray(dx, dtype=float)
    lay = state.layout
    if dx.shape != (lay.dim,):
        raise DimensionMismatch(f"correction of shape {dx.shape} for state dim {lay.dim}")
    out = state.copy()
    imu = out.imu
    imu.q_GtoI = quat_multiply(small_angle_quat(dx[0:3]), imu.q_GtoI)
    imu.p_IinG = imu.p_IinG + dx[3:6]
    imu.v_IinG = imu.v_IinG + dx[6:9]
    imu.bg = imu.bg + dx[9:12]
    imu.ba = imu.ba + dx[12:15]
    out.calib.q_ItoC = quat_multiply(small_angle_quat(dx[15:18]), out.calib.q_ItoC)
    out.calib.p_IinC = out.calib.p_IinC + dx[18:21]
    for j, c in enumerate(out.clones):
        o = lay.clone(j)
        c.q_GtoI = quat_multiply(small_angle_quat(dx[o:o + 3]), c.q_GtoI)
        c.p_IinG = c.p_IinG + dx[o + 3:o + 6]
    out.t_d = state.t_d + dx[lay.td]
    return out
