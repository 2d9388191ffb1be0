"""Pre-collected trajectory data, Hankel lifts and persistency of excitation."""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import LtiSystem, numerical_rank


class PersistencyError(ValueError):
    """Input data are not persistently exciting of the required order."""


class DataKind(str, enum.Enum):
    OUTPUT_FEEDBACK = "output-feedback"
    STATE_FEEDBACK = "state-feedback"


def _as_sequence(seq) -> np.ndarray:
    """Coerce a sample sequence to an ``(N, m)`` array."""
    X = np.asarray(seq, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.ndim != 2:
        raise ValueError("sequence must be 1-D or (N, m)")
    return X


@dataclass(frozen=True, eq=False)
class TrajectoryData:
    """Offline input/output (or input/state) record of length N."""

    inputs: np.ndarray
    outputs: np.ndarray
    kind: DataKind = DataKind.OUTPUT_FEEDBACK

    def __post_init__(self):
        U = _as_sequence(self.inputs)
        Y = _as_sequence(self.outputs)
        if U.shape[0] != Y.shape[0]:
            raise ValueError(
                f"inputs ({U.shape[0]}) and outputs ({Y.shape[0]}) differ in length")
        U.setflags(write=False)
        Y.setflags(write=False)
        object.__setattr__(self, "inputs", U)
        object.__setattr__(self, "outputs", Y)
        object.__setattr__(self, "kind", DataKind(self.kind))

    @property
    def N(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_u(self) -> int:
        return self.inputs.shape[1]

    @property
    def n_y(self) -> int:
        return self.outputs.shape[1]


@dataclass(frozen=True, eq=False)
class HankelMatrix:
    """Order-L block Hankel matrix of an m-dimensional signal."""

    entries: np.ndarray
    L: int
    m: int

    @property
    def cols(self) -> int:
        return self.entries.shape[1]

    def rows(self, first: int, count: int) -> np.ndarray:
        """Block rows ``first .. first+count-1`` as a plain matrix."""
        if first < 0 or count < 0 or first + count > self.L:
            raise IndexError(f"block rows [{first}, {first + count}) outside 0..{self.L}")
        return self.entries[first * self.m:(first + count) * self.m]

    def leading(self, k: int) -> "HankelMatrix":
        """The first ``k`` block rows, i.e. ``H_k`` on the same columns."""
        return HankelMatrix(self.rows(0, k), k, self.m)


def hankel(seq, L: int) -> HankelMatrix:
    """Block Hankel matrix with ``N - L + 1`` columns.

    Column ``j`` is the stacked window of samples ``j .. j+L-1``.
    """
    X = _as_sequence(seq)
    N, m = X.shape
    if L < 1:
        raise ValueError("L must be >= 1")
    if L > N:
        raise ValueError(f"L={L} exceeds sequence length N={N}")
    cols = N - L + 1
    # row block i holds samples i .. i+cols-1
    H = np.empty((L * m, cols))
    for i in range(L):
        H[i * m:(i + 1) * m, :] = X[i:i + cols].T
    H.setflags(write=False)
    return HankelMatrix(H, L, m)


def stacked_window(seq, t1: int, t2: int) -> np.ndarray:
    """Concatenation ``x_t1, ..., x_t2``."""
    X = _as_sequence(seq)
    N = X.shape[0]
    if not 0 <= t1 <= t2 < N:
        raise IndexError(f"window [{t1}, {t2}] outside 0..{N - 1}")
    return X[t1:t2 + 1].reshape(-1).copy()


def is_persistently_exciting(u, L: int) -> bool:
    """True iff ``rank(H_L(u)) = n_u L``."""
    U = _as_sequence(u)
    N, n_u = U.shape
    if L < 1 or L > N:
        return False
    if N - L + 1 < n_u * L:
        return False
    return numerical_rank(hankel(U, L).entries) == n_u * L


def min_length_for_pe(n_u: int, order: int) -> int:
    """Fewest samples that can be persistently exciting of ``order``."""
    return (n_u + 1) * order - 1


def generate_pe_input(n_u: int, N: int, order: int, seed: int,
                      max_tries: int = 10) -> np.ndarray:
    """Seeded i.i.d. uniform input on ``[-1, 1]^n_u`` verified PE of ``order``.

    Raises:
        PersistencyError: if ``N`` is below ``(n_u+1)*order - 1`` or no draw
            passes the rank test within ``max_tries``.
    """
    need = min_length_for_pe(n_u, order)
    if N < need:
        raise PersistencyError(
            f"N={N} too short for PE of order {order} with n_u={n_u}; need N >= {need}")
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        u = rng.uniform(-1.0, 1.0, size=(N, n_u))
        if is_persistently_exciting(u, order):
            return u
    raise PersistencyError(
        f"no PE draw of order {order} found after {max_tries} tries (N={N})")


def collect_offline_data(sys: LtiSystem, u, x0=None, feedback=None) -> TrajectoryData:
    """Simulate the plant from ``x0`` under ``u`` and record outputs.

    Args:
        sys: plant.
        u: excitation sequence, ``(N, n_u)``.
        x0: initial state (zero by default).
        feedback: optional gain ``F``; the applied input is then
            ``u_t + F x_t``, which keeps experiments on unstable plants
            bounded. The recorded input is the applied one, so its
            persistency of excitation must be checked on the returned data.
    """
    U = _as_sequence(u)
    if U.shape[1] != sys.n_u:
        raise ValueError(f"input dimension {U.shape[1]} != n_u={sys.n_u}")
    x = np.zeros(sys.n_x) if x0 is None else np.asarray(x0, dtype=float).reshape(-1)
    if x.shape[0] != sys.n_x:
        raise ValueError(f"x0 has length {x.shape[0]}, expected {sys.n_x}")
    F = None if feedback is None else np.atleast_2d(np.asarray(feedback, dtype=float))
    if F is not None and F.shape != (sys.n_u, sys.n_x):
        raise ValueError(f"feedback gain must be {(sys.n_u, sys.n_x)}")
    applied = np.empty_like(U)
    Y = np.empty((U.shape[0], sys.n_y))
    for t, ut in enumerate(U):
        if F is not None:
            ut = ut + F @ x
        applied[t] = ut
        Y[t] = sys.C @ x + sys.D @ ut
        x = sys.A @ x + sys.B @ ut
    kind = DataKind.STATE_FEEDBACK if sys.is_state_output else DataKind.OUTPUT_FEEDBACK
    return TrajectoryData(applied, Y, kind)


def _header(n_u: int, n_y: int) -> list[str]:
    return ["t"] + [f"u{i}" for i in range(n_u)] + [f"y{i}" for i in range(n_y)]


def save_csv(data: TrajectoryData, path, comments: dict | None = None) -> None:
    """Write ``t,u0..,y0..`` rows with 17 significant digits.

    ``comments`` become leading ``# key=value`` lines.
    """
    path = Path(path)
    with path.open("w", newline="") as fh:
        for k, v in (comments or {}).items():
            fh.write(f"# {k}={v}\n")
        fh.write(f"# kind={data.kind.value}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_header(data.n_u, data.n_y))
        for t in range(data.N):
            w.writerow([t] + [format(v, ".17g") for v in data.inputs[t]]
                       + [format(v, ".17g") for v in data.outputs[t]])


def read_csv_table(path) -> tuple[dict, list[str], list[list[str]]]:
    """Split a CSV file into ``# key=value`` comments, header and rows."""
    path = Path(path)
    meta: dict[str, str] = {}
    lines = path.read_text().splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            key, _, val = line[1:].strip().partition("=")
            meta[key.strip()] = val.strip()
        elif line.strip():
            body.append(line)
    if not body:
        raise ValueError(f"{path}: empty trajectory file")
    reader = csv.reader(body)
    header = next(reader)
    rows = list(reader)
    return meta, header, rows


def load_csv(path) -> TrajectoryData:
    """Inverse of :func:`save_csv`.

    Raises:
        ValueError: on an empty file, a malformed header or ragged rows.
    """
    meta, header, rows = read_csv_table(path)
    if not header or header[0] != "t":
        raise ValueError(f"{path}: header must start with 't'")
    u_cols = [i for i, h in enumerate(header) if h.startswith("u")]
    y_cols = [i for i, h in enumerate(header) if h.startswith("y")]
    n_u, n_y = len(u_cols), len(y_cols)
    if n_u == 0 or n_y == 0:
        raise ValueError(f"{path}: need at least one u and one y column")
    if header[1:1 + n_u + n_y] != _header(n_u, n_y)[1:]:
        raise ValueError(f"{path}: columns must be u0..u{n_u - 1},y0..y{n_y - 1}")
    if not rows:
        raise ValueError(f"{path}: no data rows")
    U = np.empty((len(rows), n_u))
    Y = np.empty((len(rows), n_y))
    for r, row in enumerate(rows):
        if len(row) != len(header):
            raise ValueError(
                f"{path}: row {r} has {len(row)} fields, header has {len(header)}")
        try:
            U[r] = [float(row[i]) for i in u_cols]
            Y[r] = [float(row[i]) for i in y_cols]
        except ValueError as exc:
            raise ValueError(f"{path}: row {r}: {exc}") from None
    kind = meta.get("kind", DataKind.OUTPUT_FEEDBACK.value)
    return TrajectoryData(U, Y, DataKind(kind))
