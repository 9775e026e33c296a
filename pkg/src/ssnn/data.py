"""Synthetic data, dataset files, normalization, chunking and splits."""
from __future__ import annotations

import csv
import io
import os
import struct
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ContractViolation, DatasetParseError, SchemaError
from .generative import GenerativeParams, LatentPath, Sequence, sample_sequence

RAW_MAGIC = b"SSNNDAT1"
FORMATS = ("csv", "raw-f32")


@dataclass
class PendulumConfig:
    mass: float = 1.0
    length: float = 1.0
    damping: float = 0.5
    gravity: float = 9.81
    torque: str = "random"          # "zero" or "random"
    torque_hold: float = 0.5        # seconds between torque draws
    torque_max: float = 2.0
    dt: float = 0.01
    duration: float = 2.0
    record_every: int = 1
    observation: str = "trig"       # "trig" or "image"
    image_side: int = 16
    noise_std: float = 0.05
    phi0: float | None = None
    omega0: float | None = None

    def __post_init__(self):
        if self.dt <= 0 or self.duration <= 0:
            raise ContractViolation("dt and duration must be positive")
        if self.mass <= 0 or self.length <= 0 or self.gravity <= 0 or self.damping < 0:
            raise ContractViolation("mass, length and gravity must be positive, damping non-negative")
        if self.torque not in ("zero", "random"):
            raise ContractViolation(f"torque must be 'zero' or 'random', got {self.torque!r}")
        if self.observation not in ("trig", "image"):
            raise ContractViolation(f"observation must be 'trig' or 'image', got {self.observation!r}")
        if self.record_every < 1 or self.image_side < 2 or self.noise_std < 0:
            raise ContractViolation("record_every >= 1, image_side >= 2, noise_std >= 0 required")

    @property
    def steps(self) -> int:
        return int(round(self.duration / self.dt))


def _pendulum_rhs(state: np.ndarray, u: float, c: PendulumConfig) -> np.ndarray:
    phi, omega = state
    inertia = c.mass * c.length ** 2
    acc = (-c.damping * omega + c.mass * c.gravity * c.length * np.sin(phi) + u) / inertia
    return np.array([omega, acc])


def rk4_step(state: np.ndarray, u: float, dt: float, config: PendulumConfig) -> np.ndarray:
    k1 = _pendulum_rhs(state, u, config)
    k2 = _pendulum_rhs(state + 0.5 * dt * k1, u, config)
    k3 = _pendulum_rhs(state + 0.5 * dt * k2, u, config)
    k4 = _pendulum_rhs(state + dt * k3, u, config)
    return state + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def integrate(config: PendulumConfig, phi0: float, omega0: float, torque=None, dt: float | None = None,
              duration: float | None = None) -> np.ndarray:
    """(steps+1) x 2 array of (phi, omega) from the initial state; ``torque(t)`` gives u."""
    dt = config.dt if dt is None else dt
    n = int(round((config.duration if duration is None else duration) / dt))
    out = np.empty((n + 1, 2))
    out[0] = (phi0, omega0)
    for i in range(n):
        u = 0.0 if torque is None else torque(i * dt)
        out[i + 1] = rk4_step(out[i], u, dt, config)
    return out


def render(phi: np.ndarray, config: PendulumConfig) -> np.ndarray:
    """Rod endpoint as a Gaussian blob on an s x s grid, flattened."""
    s = config.image_side
    grid = np.linspace(-1.2, 1.2, s)
    gx, gy = np.meshgrid(grid, grid)
    ex, ey = np.sin(phi), np.cos(phi)
    width = 2.4 / s
    img = np.exp(-((gx[None] - ex[:, None, None]) ** 2 + (gy[None] - ey[:, None, None]) ** 2) / (2 * width ** 2))
    return img.reshape(len(phi), s * s)


def simulate_pendulum(config: PendulumConfig, rng: np.random.Generator):
    """Integrate the torque-driven pendulum with RK4 and observe it.

    Returns ``(angles, velocities, observations)`` sampled every
    ``record_every`` integration steps, starting after the first step.
    """
    phi0 = rng.uniform(-np.pi, np.pi) if config.phi0 is None else config.phi0
    omega0 = rng.uniform(-1.0, 1.0) if config.omega0 is None else config.omega0
    n = config.steps
    if config.torque == "random":
        hold = max(1, int(round(config.torque_hold / config.dt)))
        levels = rng.uniform(-config.torque_max, config.torque_max, n // hold + 1)
        torque = lambda t: levels[int(round(t / config.dt)) // hold]  # noqa: E731
    else:
        torque = None
    traj = integrate(config, phi0, omega0, torque)[1::config.record_every]
    phi, omega = traj[:, 0], traj[:, 1]
    if config.observation == "trig":
        obs = np.stack([np.sin(phi), np.cos(phi)], axis=1)
    else:
        obs = render(phi, config)
    obs = obs + config.noise_std * rng.standard_normal(obs.shape)
    return phi, omega, obs


@dataclass
class Dataset:
    sequences: list = field(default_factory=list)
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        self.sequences = list(self.sequences)
        dims = {s.m for s in self.sequences}
        if len(dims) > 1:
            raise SchemaError(f"inconsistent observation dims {sorted(dims)}")

    def __len__(self) -> int:
        return len(self.sequences)

    def __iter__(self):
        return iter(self.sequences)

    def __getitem__(self, i):
        return self.sequences[i]

    @property
    def m(self) -> int | None:
        return self.sequences[0].m if self.sequences else None

    def statistics(self) -> tuple[np.ndarray, np.ndarray]:
        """Global per-dimension mean and std over every frame; zero std maps to 1."""
        if not self.sequences:
            raise ContractViolation("cannot compute statistics of an empty dataset")
        X = np.concatenate([s.x for s in self.sequences])
        std = X.std(axis=0)
        return X.mean(axis=0), np.where(std > 0, std, 1.0)

    def with_statistics(self, mean=None, std=None) -> "Dataset":
        if mean is None:
            mean, std = self.statistics()
        return Dataset(self.sequences, np.asarray(mean, float), np.asarray(std, float))

    def normalized(self) -> "Dataset":
        """Sequences standardized with the stored statistics."""
        if self.mean is None:
            raise ContractViolation("no normalization statistics stored")
        seqs = [replace(s, x=(s.x - self.mean) / self.std) for s in self.sequences]
        return Dataset(seqs, self.mean, self.std)


def separated_truth_params(K: int, M: int, m: int, h: int, rng: np.random.Generator,
                           separation: float = 4.0, min_duration: int = 1) -> GenerativeParams:
    """Ground-truth model with unit-variance, state-constant emissions.

    State means sit on a circle (a line when m = 1) with nearest pairs
    ``separation`` standard deviations apart; durations are uniform on
    ``[min_duration, M]``; with K > 1 consecutive segments change state.
    """
    if not 1 <= min_duration <= M:
        raise ContractViolation("need 1 <= min_duration <= M")
    theta = GenerativeParams.initialize(K, M, m, h, rng, self_transitions=K == 1)
    s = theta.store
    means = np.zeros((K, m))
    if K > 1:
        if m == 1:
            means[:, 0] = separation * (np.arange(K) - (K - 1) / 2)
        else:
            radius = separation / (2 * np.sin(np.pi / K))
            ang = 2 * np.pi * np.arange(K) / K
            means[:, 0], means[:, 1] = radius * np.sin(ang), radius * np.cos(ang)
    s.set("b_mu", means)
    s.set("W_mu", np.zeros((K, m, h)))
    s.set("W_sigma", np.zeros((K, m, h)))
    s.set("b_sigma", np.zeros((K, m)))
    s.set("init_logits", np.zeros(K))
    s.set("trans_logits", np.zeros((K, K)))
    dur = np.full(M, -30.0)
    dur[min_duration - 1:] = 0.0
    s.set("dur_logits", np.tile(dur, (K, 1)))
    return theta


def generate_ssnn_dataset(theta: GenerativeParams, count: int, T: int, rng: np.random.Generator,
                          prefix: str = "seq") -> Dataset:
    seqs = [sample_sequence(theta, T, rng, f"{prefix}{i:04d}")[0] for i in range(count)]
    return Dataset(seqs)


def generate_pendulum_dataset(config: PendulumConfig, count: int, rng: np.random.Generator,
                              prefix: str = "pend") -> tuple[Dataset, list[np.ndarray]]:
    """Dataset of observations plus the per-sequence (phi, omega) trajectories."""
    seqs, states = [], []
    for i in range(count):
        phi, omega, obs = simulate_pendulum(config, rng)
        seqs.append(Sequence(f"{prefix}{i:04d}", obs))
        states.append(np.stack([phi, omega], axis=1))
    return Dataset(seqs), states


def chunk_sequences(dataset: Dataset, chunk_len: int) -> Dataset:
    """Non-overlapping chunks; each records its parent id and offset."""
    if chunk_len < 1:
        raise ContractViolation("chunk_len must be >= 1")
    out = []
    for s in dataset:
        if chunk_len >= s.T:
            out.append(s)
            continue
        for off in range(0, s.T, chunk_len):
            stop = min(off + chunk_len, s.T)
            truth = None if s.truth is None else LatentPath(s.truth.z[off:stop], s.truth.d[off:stop])
            out.append(Sequence(f"{s.id}@{off}", s.x[off:stop], truth, parent=s.id, offset=off))
    return Dataset(out, dataset.mean, dataset.std)


def leave_one_out_splits(dataset: Dataset):
    """Yield ``(train, test)`` per sequence; both carry statistics of ``train``."""
    n = len(dataset)
    if n < 2:
        raise ContractViolation("leave-one-out needs at least 2 sequences")
    for i in range(n):
        train = Dataset(dataset.sequences[:i] + dataset.sequences[i + 1:]).with_statistics()
        yield train, Dataset([dataset.sequences[i]], train.mean, train.std)


# ---------------------------------------------------------------- file I/O

def _atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def truth_path(path) -> Path:
    return Path(str(path) + ".truth.csv")


def _write_truth(dataset: Dataset, path) -> None:
    side = truth_path(path)
    if not any(s.truth is not None for s in dataset):
        if side.exists():
            side.unlink()
        return
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seq_id", "t", "z", "d"])
    for s in dataset:
        if s.truth is None:
            continue
        for t in range(s.T):
            w.writerow([s.id, t, int(s.truth.z[t]), int(s.truth.d[t])])
    _atomic_write(side, buf.getvalue().encode())


def write_dataset(dataset: Dataset, path, fmt: str = "csv") -> None:
    """Write observations (and a ``.truth.csv`` sidecar when truth is present).

    raw-f32 stores 32-bit floats, so float64 values are rounded on write.
    """
    if fmt not in FORMATS:
        raise ContractViolation(f"format must be one of {FORMATS}")
    if fmt == "csv":
        buf = io.StringIO()
        m = dataset.m or 0
        buf.write(",".join(["seq_id", "t"] + [f"x{j}" for j in range(m)]) + "\n")
        for s in dataset:
            if "," in s.id or "\n" in s.id:
                raise ContractViolation(f"sequence id {s.id!r} cannot be written to csv")
            for t in range(s.T):
                buf.write(f"{s.id},{t}," + ",".join(f"{v:.17g}" for v in s.x[t]) + "\n")
        data = buf.getvalue().encode()
    else:
        head = [RAW_MAGIC, struct.pack("<I", len(dataset))]
        for s in dataset:
            ident = s.id.encode("utf-8")
            head.append(struct.pack("<I", len(ident)) + ident + struct.pack("<II", s.T, s.m))
        body = [np.ascontiguousarray(s.x, dtype="<f4").tobytes() for s in dataset]
        data = b"".join(head + body)
    _atomic_write(Path(path), data)
    _write_truth(dataset, path)


def _read_csv(path: Path) -> list[Sequence]:
    text = path.read_text()
    if not text.strip():
        raise SchemaError(f"{path}: empty dataset file")
    lines = text.splitlines()
    header = lines[0].split(",")
    m = len(header) - 2
    if header[:2] != ["seq_id", "t"] or m < 1 or header[2:] != [f"x{j}" for j in range(m)]:
        raise SchemaError(f"{path}: header must be seq_id,t,x0..x{{m-1}}, got {lines[0]!r}")
    order: list[str] = []
    rows: dict[str, list] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != m + 2:
            raise SchemaError(f"{path}: line {lineno} has {len(cells)} cells, expected {m + 2}")
        sid = cells[0]
        try:
            t = int(cells[1])
        except ValueError:
            raise DatasetParseError(f"{path}: line {lineno}, column t: not an integer: {cells[1]!r}") from None
        vals = []
        for j, c in enumerate(cells[2:]):
            try:
                vals.append(float(c))
            except ValueError:
                raise DatasetParseError(f"{path}: line {lineno}, column x{j}: not a number: {c!r}") from None
        if sid not in rows:
            order.append(sid)
            rows[sid] = []
        elif order[-1] != sid:
            raise DatasetParseError(f"{path}: line {lineno}: rows of sequence {sid!r} are not contiguous")
        if t != len(rows[sid]):
            raise DatasetParseError(f"{path}: line {lineno}: expected t={len(rows[sid])} for {sid!r}, got {t}")
        rows[sid].append(vals)
    if not order:
        raise SchemaError(f"{path}: no data rows")
    return [Sequence(sid, np.array(rows[sid])) for sid in order]


def _read_raw(path: Path) -> list[Sequence]:
    data = path.read_bytes()
    if not data:
        raise SchemaError(f"{path}: empty dataset file")
    if data[:8] != RAW_MAGIC:
        raise DatasetParseError(f"{path}: offset 0: bad magic {data[:8]!r}")
    pos = 8

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise DatasetParseError(f"{path}: offset {pos}: truncated while reading {what}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4, "sequence count"))
    heads = []
    for i in range(count):
        (n,) = struct.unpack("<I", take(4, f"id length of sequence {i}"))
        try:
            ident = take(n, f"id of sequence {i}").decode("utf-8")
        except UnicodeDecodeError:
            raise DatasetParseError(f"{path}: offset {pos - n}: id of sequence {i} is not UTF-8") from None
        T, m = struct.unpack("<II", take(8, f"shape of sequence {i}"))
        heads.append((ident, T, m))
    if len({m for _, _, m in heads}) > 1:
        raise SchemaError(f"{path}: inconsistent observation dims {sorted({m for _, _, m in heads})}")
    seqs = []
    for ident, T, m in heads:
        raw = take(4 * T * m, f"values of sequence {ident!r}")
        x = np.frombuffer(raw, dtype="<f4").reshape(T, m).astype(np.float64)
        seqs.append(Sequence(ident, x))
    if pos != len(data):
        raise DatasetParseError(f"{path}: offset {pos}: {len(data) - pos} trailing bytes")
    return seqs


def _read_truth(path: Path, seqs: list[Sequence]) -> None:
    side = truth_path(path)
    if not side.exists():
        return
    by_id = {s.id: s for s in seqs}
    cols: dict[str, tuple[list, list]] = {}
    with open(side, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["seq_id", "t", "z", "d"]:
            raise SchemaError(f"{side}: header must be seq_id,t,z,d")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise SchemaError(f"{side}: line {lineno} has {len(row)} cells, expected 4")
            try:
                t, z, d = int(row[1]), int(row[2]), int(row[3])
            except ValueError:
                raise DatasetParseError(f"{side}: line {lineno}: non-integer t/z/d") from None
            zs, ds = cols.setdefault(row[0], ([], []))
            if t != len(zs):
                raise DatasetParseError(f"{side}: line {lineno}: expected t={len(zs)}, got {t}")
            zs.append(z)
            ds.append(d)
    for sid, (zs, ds) in cols.items():
        if sid not in by_id:
            raise SchemaError(f"{side}: truth for unknown sequence {sid!r}")
        s = by_id[sid]
        path_ = LatentPath(zs, ds)
        if len(path_) != s.T or not path_.is_valid():
            raise SchemaError(f"{side}: truth for {sid!r} has wrong length or breaks the countdown rule")
        s.truth = path_


def read_dataset(path, fmt: str | None = None) -> Dataset:
    """Read a dataset; the format is inferred from the magic bytes when omitted."""
    path = Path(path)
    if fmt is None:
        with open(path, "rb") as fh:
            fmt = "raw-f32" if fh.read(8) == RAW_MAGIC else "csv"
    if fmt not in FORMATS:
        raise ContractViolation(f"format must be one of {FORMATS}")
    seqs = _read_csv(path) if fmt == "csv" else _read_raw(path)
    _read_truth(path, seqs)
    return Dataset(seqs)
