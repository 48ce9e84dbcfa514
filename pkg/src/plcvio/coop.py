"""Common-feature update across neighboring robots with covariance intersection.

A robot that has nullspace-projected a shared feature keeps the top block
``(r1, H_x1, H_f1)`` and sends it to its neighbors together with its
covariance over the columns ``H_x1`` touches.  The receiver stacks its own top
block with the neighbors', removes the common feature by a second nullspace
projection, and updates only its own state.  Cross-robot correlations are
never tracked; the CI weights keep the update conservative.

All residual blocks are whitened (unit noise) by :mod:`plcvio.msckf`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla
from scipy.optimize import minimize_scalar

from .errors import ConsistencyError, FeatureMismatch, RankDeficientFeature, SingularInnovation
from .geom import CPLine, cp_boxminus, quat_to_rot
from .meas import CameraModel, TriangulatedFeature, Track, triangulate_line_arrays, triangulate_point_arrays
from .msckf import RANK_TOL, ProjectedResidual, _clone_indices, clone_arrays
from .state import RobotState, apply_correction, check_covariance

WIRE_VERSION = 1
COND_LIMIT = 1e12


@dataclass(frozen=True)
class CommonFeatureMessage:
    sender_id: int
    feature_id: int
    kind: str
    r1: np.ndarray
    H_x1: np.ndarray  # over the sender's columns ``cols``
    H_f1: np.ndarray
    feature_estimate: np.ndarray  # p_G, or the Closest-Point product d * q
    cols: np.ndarray
    P_block: np.ndarray
    sigma: float = 1.0
    clone_timestamps: tuple = ()
    version: int = WIRE_VERSION

    def __post_init__(self):
        m = 3 if self.kind == "point" else 4
        for name in ("r1", "H_x1", "H_f1", "feature_estimate", "P_block"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        object.__setattr__(self, "cols", np.asarray(self.cols, dtype=int))
        if len(self.r1) != m or self.H_x1.shape != (m, len(self.cols)) or self.H_f1.shape != (m, m):
            raise ValueError(f"message blocks do not match a {self.kind} feature")
        if self.P_block.shape != (len(self.cols), len(self.cols)):
            raise ValueError("P_block does not cover the message columns")
        if not np.allclose(self.P_block, self.P_block.T, atol=1e-12, rtol=1e-9):
            raise ConsistencyError("P_block not symmetric")

    @property
    def feature(self):
        if self.kind == "point":
            return self.feature_estimate
        return CPLine.from_vector(self.feature_estimate)

    def payload_floats(self, include_covariance=True) -> int:
        n = len(self.r1) + self.H_x1.size + self.H_f1.size + len(self.feature_estimate)
        if include_covariance:
            k = len(self.cols)
            n += k * (k + 1) // 2
        return n

    def to_dict(self) -> dict:
        return {
            "version": self.version, "sender_id": int(self.sender_id), "feature_id": int(self.feature_id),
            "kind": self.kind, "r1": self.r1.tolist(), "H_x1": self.H_x1.tolist(),
            "H_f1": self.H_f1.tolist(), "feature_estimate": self.feature_estimate.tolist(),
            "cols": self.cols.tolist(), "P_block": self.P_block.tolist(), "sigma": self.sigma,
            "clone_timestamps": list(self.clone_timestamps),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "CommonFeatureMessage":
        d = json.loads(text)
        if d.get("version") != WIRE_VERSION:
            raise ValueError(f"unsupported message version {d.get('version')}")
        d["clone_timestamps"] = tuple(d["clone_timestamps"])
        return cls(**d)


def make_message(state: RobotState, proj: ProjectedResidual, cols=None) -> CommonFeatureMessage:
    """Package the top block of a projected residual for the neighbors.

    ``cols`` widens the column set (for instance to the sender's whole
    window) so several messages from one sender share one covariance block.
    """
    if proj.feature is None:
        raise ValueError("projected residual carries no feature estimate")
    H = proj.H_x1
    if cols is None:
        cols = proj.cols
    else:
        cols = np.asarray(cols, dtype=int)
        where = {c: k for k, c in enumerate(cols)}
        H = np.zeros((len(proj.r1), len(cols)))
        H[:, [where[c] for c in proj.cols]] = proj.H_x1
    return CommonFeatureMessage(
        state.robot_id, proj.feature_id, proj.kind, proj.r1.copy(), H, proj.H_f1.copy(),
        proj.feature.as_vector(), cols, state.cov[np.ix_(cols, cols)], proj.sigma, proj.times)


@dataclass(frozen=True)
class CIWeights:
    w: dict

    def __post_init__(self):
        vals = np.array(list(self.w.values()), dtype=float)
        if len(vals) == 0 or np.any(vals <= 0) or np.any(vals > 1):
            raise ValueError("CI weights must lie in (0, 1]")
        if abs(vals.sum() - 1.0) > 1e-12:
            raise ValueError(f"CI weights sum to {vals.sum():.15f}, not 1")

    def __getitem__(self, robot_id):
        return self.w[robot_id]

    @classmethod
    def equal(cls, participants) -> "CIWeights":
        participants = list(participants)
        return cls({r: 1.0 / len(participants) for r in participants})


def select_weights(participants, mode="equal", objective=None, own_id=None) -> CIWeights:
    """Equal weights, or the own weight minimizing ``objective(weights)``.

    In ``"trace"`` mode the own weight is searched over (0, 1) and the rest of
    the mass is split equally among the neighbors; ``objective`` usually
    returns the trace of the updated covariance.
    """
    participants = list(participants)
    if len(participants) < 1:
        raise ValueError("no participants")
    if mode == "equal" or len(participants) == 1:
        return CIWeights.equal(participants)
    if mode != "trace" or objective is None:
        raise ValueError(f"unknown weight mode {mode!r} or missing objective")
    own = participants[0] if own_id is None else own_id
    others = [p for p in participants if p != own]

    def weights(wi):
        rest = (1.0 - wi) / len(others)
        w = {p: rest for p in others}
        w[own] = 1.0 - rest * len(others)
        return CIWeights(w)

    res = minimize_scalar(lambda wi: objective(weights(wi)), bounds=(1e-4, 1 - 1e-4),
                          method="bounded", options={"xatol": 1e-3})
    return weights(float(res.x))


# --------------------------------------------------------------------------
# joint triangulation of a common feature


@dataclass(frozen=True)
class TrackShare:
    """A robot's observations of a common feature with its camera poses.

    Sharing these before the update lets every participant triangulate the
    feature from all robots at once; robot-to-robot baselines are much longer
    than a single robot's motion over the window.
    """

    sender_id: int
    feature_id: int
    kind: str
    R_GtoC: np.ndarray  # (k,3,3)
    centers: np.ndarray  # (k,3) camera centers in G
    uv: np.ndarray | None = None
    xs: np.ndarray | None = None
    xe: np.ndarray | None = None

    def payload_floats(self) -> int:
        k = len(self.centers)
        # a rotation travels as a quaternion
        return k * (4 + 3) + (self.uv.size if self.kind == "point" else self.xs.size + self.xe.size)


def share_track(state: RobotState, track: Track) -> TrackShare:
    Rs, ps = clone_arrays(state, _clone_indices(state, track.times))
    Rc = quat_to_rot(state.calib.q_ItoC)
    R_GC = np.einsum("ij,kjl->kil", Rc, Rs)
    centers = ps - np.einsum("kji,kj->ki", Rs, np.broadcast_to(Rc.T @ state.calib.p_IinC, ps.shape))
    return TrackShare(state.robot_id, track.feature_id, track.kind, R_GC, centers, track.uv, track.xs, track.xe)


def triangulate_common(shares, cam: CameraModel) -> TriangulatedFeature:
    """Triangulate one feature from the tracks of several robots."""
    shares = sorted(shares, key=lambda s: s.sender_id)
    first = shares[0]
    if any(s.feature_id != first.feature_id or s.kind != first.kind for s in shares):
        raise FeatureMismatch("shared tracks describe different features")
    R = np.concatenate([s.R_GtoC for s in shares])
    c = np.concatenate([s.centers for s in shares])
    eye, zero = np.eye(3), np.zeros(3)
    if first.kind == "point":
        p = triangulate_point_arrays(R, c, eye, zero, np.concatenate([s.uv for s in shares]))
        return TriangulatedFeature("point", first.feature_id, p_G=p)
    line = triangulate_line_arrays(R, c, eye, zero, np.concatenate([s.xs for s in shares]),
                                   np.concatenate([s.xe for s in shares]), cam)
    return TriangulatedFeature("line", first.feature_id, line_G=line)


# --------------------------------------------------------------------------
# stacking and projection


@dataclass
class RobotBlock:
    robot_id: int
    H: np.ndarray  # rows of this block's slice of the stacked system
    cols: np.ndarray
    P: np.ndarray | None = None


@dataclass
class CommonSystem:
    feature_id: int
    kind: str
    r: np.ndarray
    H_f: np.ndarray
    blocks: list  # RobotBlock, own first; each H spans all rows of ``r``


def _feature_offset(own_feature, kind, other_vec):
    if kind == "point":
        return np.asarray(own_feature) - other_vec
    return cp_boxminus(own_feature, CPLine.from_vector(other_vec))


def stack_common(own: ProjectedResidual, msgs, own_id: int, own_P=None) -> CommonSystem:
    """Stack the own top block with neighbor top blocks for one feature.

    Neighbor residuals are moved onto the own feature estimate so every row
    shares one feature error; without this, two independent triangulations
    would leave a constant bias in the stack.
    """
    msgs = sorted(msgs, key=lambda m: m.sender_id)
    for m in msgs:
        if m.feature_id != own.feature_id or m.kind != own.kind:
            raise FeatureMismatch(f"message for feature {m.feature_id} stacked with {own.feature_id}")
    dim = len(own.r1)
    n = dim * (1 + len(msgs))
    r = np.empty(n)
    H_f = np.empty((n, dim))
    r[:dim] = own.r1
    H_f[:dim] = own.H_f1
    H_own = np.zeros((n, len(own.cols)))
    H_own[:dim] = own.H_x1
    blocks = [RobotBlock(own_id, H_own, own.cols, own_P)]
    own_feat = own.feature.p_G if own.kind == "point" else own.feature.line_G
    for k, m in enumerate(msgs, start=1):
        sl = slice(k * dim, (k + 1) * dim)
        r[sl] = m.r1 - m.H_f1 @ _feature_offset(own_feat, own.kind, m.feature_estimate)
        H_f[sl] = m.H_f1
        H = np.zeros((n, len(m.cols)))
        H[sl] = m.H_x1
        blocks.append(RobotBlock(m.sender_id, H, m.cols, m.P_block))
    return CommonSystem(own.feature_id, own.kind, r, H_f, blocks)


def project_common(sys: CommonSystem) -> CommonSystem:
    """Left-nullspace projection removing the common feature."""
    m = sys.H_f.shape[1]
    if len(sys.r) <= m:
        return CommonSystem(sys.feature_id, sys.kind, np.zeros(0), np.zeros((0, m)),
                            [RobotBlock(b.robot_id, b.H[:0], b.cols, b.P) for b in sys.blocks])
    Q, Rf = np.linalg.qr(sys.H_f, mode="complete")
    diag = np.abs(np.diag(Rf))
    if diag.min() < RANK_TOL * diag.max():
        raise RankDeficientFeature("stacked common-feature Jacobian rank deficient")
    N = Q[:, m:]
    return CommonSystem(sys.feature_id, sys.kind, N.T @ sys.r, N.T @ sys.H_f,
                        [RobotBlock(b.robot_id, N.T @ b.H, b.cols, b.P) for b in sys.blocks])


# --------------------------------------------------------------------------
# update


def assemble(systems, own_id: int, dim: int):
    """Stack projected common systems of several features into one.

    Returns ``(r, H_own, own_cols, neighbors)`` where ``neighbors`` maps a
    robot id to ``(H, P)``; a robot absent from a feature gets zero rows.
    """
    systems = [s for s in systems if len(s.r)]
    rows = sum(len(s.r) for s in systems)
    own_cols = np.unique(np.concatenate([b.cols for s in systems for b in s.blocks if b.robot_id == own_id]
                                        or [np.zeros(0, dtype=int)]))
    where = np.full(dim, -1)
    where[own_cols] = np.arange(len(own_cols))
    r = np.empty(rows)
    H_own = np.zeros((rows, len(own_cols)))
    neighbors: dict = {}
    o = 0
    for s in systems:
        n = len(s.r)
        r[o:o + n] = s.r
        for b in s.blocks:
            if b.robot_id == own_id:
                H_own[o:o + n, where[b.cols]] = b.H
                continue
            if b.robot_id not in neighbors:
                neighbors[b.robot_id] = (np.zeros((rows, len(b.cols))), b.P, b.cols)
            H, P, cols = neighbors[b.robot_id]
            if len(cols) != len(b.cols) or np.any(cols != b.cols):
                raise FeatureMismatch(f"robot {b.robot_id} sent blocks over different columns")
            H[o:o + n] = b.H
        o += n
    return r, H_own, own_cols, {k: (H, P) for k, (H, P, _) in neighbors.items()}


def innovation(state: RobotState, H_own, own_cols, neighbors, weights: CIWeights, own_id):
    P = state.cov
    PHt = P[:, own_cols] @ H_own.T / weights[own_id]
    S = H_own @ PHt[own_cols] + np.eye(H_own.shape[0])
    for rid, (H, Pr) in neighbors.items():
        S += H @ Pr @ H.T / weights[rid]
    return PHt, 0.5 * (S + S.T)


def _check_condition(S):
    # unit measurement noise keeps the smallest eigenvalue >= 1, so the
    # trace bounds the condition number and spares most SVDs
    if np.trace(S) > COND_LIMIT and np.linalg.cond(S) > COND_LIMIT:
        raise SingularInnovation("innovation matrix ill-conditioned")


def observed_part(state: RobotState, H_own, own_cols):
    """``P H^T (H P H^T)^+ H P``: the covariance the residual can see."""
    G = state.cov[:, own_cols] @ H_own.T
    M = H_own @ G[own_cols]
    lam, V = np.linalg.eigh(0.5 * (M + M.T))
    keep = lam > 1e-12 * max(lam.max(), 0.0)
    B = G @ V[:, keep] / np.sqrt(lam[keep])
    return B @ B.T


def _posterior(state, H_own, own_cols, PHt, K, wi, inflation):
    # (1/w)(I - K H) P, with K H P = K (P H^T)^T * w
    if inflation == "full":
        return state.cov / wi - K @ PHt.T
    if inflation == "subspace":
        return state.cov + (1.0 / wi - 1.0) * observed_part(state, H_own, own_cols) - K @ PHt.T
    raise ValueError(f"unknown inflation mode {inflation!r}")


def ci_update(state: RobotState, r, H_own, own_cols, neighbors, weights: CIWeights, own_id=None,
              inflation="full"):
    """Covariance-intersection update of the own state.

    ``neighbors`` maps robot id to ``(H'_r, P_r)``.  Returns the updated state
    and its correction.  ``inflation="full"`` scales the whole prior by
    ``1/w_i``; ``"subspace"`` scales only the part the residual observes,
    which assumes the unobserved remainder of the own error is uncorrelated
    with the neighbors.  Gain and correction are the same in both modes.
    """
    own_id = state.robot_id if own_id is None else own_id
    if len(r) == 0:
        return state, np.zeros(state.dim)
    PHt, S = innovation(state, H_own, own_cols, neighbors, weights, own_id)
    _check_condition(S)
    cho = sla.cho_factor(S, lower=True, check_finite=False)
    K = sla.cho_solve(cho, PHt.T, check_finite=False).T
    dx = K @ r
    new = apply_correction(state, dx)
    new.cov = check_covariance(_posterior(state, H_own, own_cols, PHt, K, weights[own_id], inflation))
    return new, dx


def updated_trace(state, H_own, own_cols, neighbors, weights, own_id, inflation="full") -> float:
    """Trace of the covariance a CI update with ``weights`` would produce."""
    PHt, S = innovation(state, H_own, own_cols, neighbors, weights, own_id)
    K = sla.cho_solve(sla.cho_factor(S, lower=True), PHt.T).T
    wi = weights[own_id]
    gain = np.einsum("ij,ij->", K, PHt)
    if inflation == "full":
        return float(np.trace(state.cov) / wi - gain)
    return float(np.trace(state.cov) + (1.0 / wi - 1.0) * np.trace(observed_part(state, H_own, own_cols)) - gain)


def trace_objective(state, H_own, own_cols, neighbors, own_id, inflation="full"):
    """Fast equivalent of :func:`updated_trace` as a function of the weights.

    Everything except the small residual-space solve is computed once.
    """
    G = state.cov[:, own_cols] @ H_own.T
    A_own = H_own @ G[own_cols]
    C = G.T @ G
    A_nb = {rid: H @ Pr @ H.T for rid, (H, Pr) in neighbors.items()}
    eye = np.eye(len(C))
    tr_P = float(np.trace(state.cov))
    tr_obs = float(np.trace(observed_part(state, H_own, own_cols))) if inflation == "subspace" else 0.0

    def objective(weights):
        wi = weights[own_id]
        S = A_own / wi + eye
        for rid, A in A_nb.items():
            S = S + A / weights[rid]
        gain = np.trace(np.linalg.solve(S, C)) / wi ** 2
        if inflation == "full":
            return tr_P / wi - gain
        return tr_P + (1.0 / wi - 1.0) * tr_obs - gain

    return objective


def cooperative_update(state: RobotState, systems, weights: CIWeights | None = None,
                       weight_mode="equal", inflation="full"):
    """Stack all projected common systems of a frame and run one CI update."""
    own_id = state.robot_id
    r, H_own, own_cols, neighbors = assemble(systems, own_id, state.dim)
    if len(r) == 0:
        return state, np.zeros(state.dim)
    if weights is None:
        participants = [own_id] + sorted(neighbors)
        obj = trace_objective(state, H_own, own_cols, neighbors, own_id, inflation)
        weights = select_weights(participants, weight_mode, obj, own_id)
    return ci_update(state, r, H_own, own_cols, neighbors, weights, own_id, inflation)
