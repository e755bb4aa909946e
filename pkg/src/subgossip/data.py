"""Instance generators, file loaders, train/test splitting and partitioning.

Synthetic matrix-completion instances keep only the rank-``r`` factors and
the sampled entry positions; the full matrix is never materialized for large
sizes.  The observed-entry count follows the over-sampling convention

    |Omega| = round(OS * (m*r + n*r - r^2)),

i.e. OS times the degrees of freedom of a rank-``r`` matrix.

File formats (plain ASCII):

* MC triplets: a header line ``m n`` followed by one entry per line,
  ``i j v`` with 1-based row/column indices.
* MTL directory: one file per task, header ``d_t m`` followed by ``d_t``
  rows of ``m`` feature values and the label: ``x_1 ... x_m y``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from subgossip.manifold import Subspace, random_subspace
from subgossip.problems import McShard, TaskGroup

# Above this many candidate positions, sample entry positions by rejection
# with a seen-set instead of shuffling the full index space.
_SHUFFLE_LIMIT = 20_000_000


@dataclass(frozen=True)
class Triplets:
    """Parallel (rows, cols, vals) arrays of matrix entries."""

    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.int64)
        cols = np.asarray(self.cols, dtype=np.int64)
        vals = np.asarray(self.vals, dtype=float)
        if not rows.shape == cols.shape == vals.shape or rows.ndim != 1:
            raise ValueError("rows, cols, vals must be equal-length 1-d arrays")
        for name, a in (("rows", rows), ("cols", cols), ("vals", vals)):
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    def __len__(self) -> int:
        return self.rows.size

    def flat(self, n: int) -> np.ndarray:
        """Positions encoded as ``row * n + col`` (for set comparisons)."""
        return self.rows * n + self.cols


def _empty_triplets() -> Triplets:
    return Triplets(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0))


@dataclass(frozen=True)
class McInstance:
    """A (possibly synthetic) partially observed matrix.

    For synthetic instances the ground truth is ``A @ B.T`` kept in factored
    form.  Loaded instances have ``r_true``/factors set to ``None``.
    ``center_mean`` records the training-value mean subtracted by
    :func:`split_train_test` when centering was requested.
    """

    m: int
    n: int
    train: Triplets
    test: Triplets = field(default_factory=_empty_triplets)
    r_true: int | None = None
    factor_left: np.ndarray | None = None
    factor_right: np.ndarray | None = None
    noise_sd: float | None = None
    os_ratio: float | None = None
    center_mean: float | None = None

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise ValueError("need m >= 1 and n >= 1")
        for part in (self.train, self.test):
            if len(part):
                if part.rows.min() < 0 or part.rows.max() >= self.m:
                    raise ValueError("row index out of range")
                if part.cols.min() < 0 or part.cols.max() >= self.n:
                    raise ValueError("column index out of range")
        if len(self.train) and len(self.test):
            overlap = np.intersect1d(
                self.train.flat(self.n), self.test.flat(self.n)
            )
            if overlap.size:
                raise ValueError("train and test entries overlap")
        for F in (self.factor_left, self.factor_right):
            if F is not None:
                np.asarray(F).setflags(write=False)


@dataclass(frozen=True)
class MtlInstance:
    """A collection of regression tasks, optionally with held-out samples.

    ``u_star`` is the generating subspace for synthetic instances (used to
    report subspace recovery error); ``None`` for loaded data.  When a
    train/test split has been applied, ``test_tasks`` is index-aligned with
    ``tasks`` and may contain zero-sample tasks.
    """

    tasks: tuple[tuple[np.ndarray, np.ndarray], ...]
    u_star: Subspace | None = None
    noise_sd: float | None = None
    test_tasks: tuple[tuple[np.ndarray, np.ndarray], ...] | None = None

    def __post_init__(self):
        if len(self.tasks) == 0:
            raise ValueError("need at least one task")
        m = self.m
        for part in (self.tasks, self.test_tasks or ()):
            for t, (X, y) in enumerate(part):
                X = np.asarray(X)
                if X.ndim != 2 or X.shape[1] != m:
                    raise ValueError(f"task {t}: X must have {m} columns")
                if np.asarray(y).shape != (X.shape[0],):
                    raise ValueError(f"task {t}: y length must match rows of X")
        if self.test_tasks is not None and len(self.test_tasks) != len(self.tasks):
            raise ValueError("test_tasks must be aligned with tasks")

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    @property
    def m(self) -> int:
        return np.asarray(self.tasks[0][0]).shape[1]


def expected_sample_count(m: int, n: int, r: int, os_ratio: float) -> int:
    """``round(OS * (m*r + n*r - r^2))``, the observed-entry budget."""
    return int(round(os_ratio * (m * r + n * r - r * r)))


def _sample_positions(mn: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """k distinct positions uniformly from range(mn), deterministic per rng."""
    if k > mn:
        raise ValueError(f"cannot sample {k} distinct positions from {mn}")
    if mn <= _SHUFFLE_LIMIT:
        return rng.permutation(mn)[:k]
    seen: set[int] = set()
    out = np.empty(k, dtype=np.int64)
    filled = 0
    while filled < k:
        batch = rng.integers(0, mn, size=2 * (k - filled))
        for p in batch:
            p = int(p)
            if p not in seen:
                seen.add(p)
                out[filled] = p
                filled += 1
                if filled == k:
                    break
    return out


def _factored_entries(
    A: np.ndarray, B: np.ndarray, rows: np.ndarray, cols: np.ndarray
) -> np.ndarray:
    return np.einsum("kr,kr->k", A[rows], B[cols])


def gen_mc(
    m: int,
    n: int,
    r: int,
    os_ratio: float,
    noise_sd: float,
    rng: np.random.Generator,
    test_fraction: float = 0.2,
) -> McInstance:
    """Synthetic rank-``r`` completion instance with Gaussian factors.

    Training entries are the ground-truth values plus ``N(0, noise_sd^2)``
    noise; the held-out test entries (``round(test_fraction * |Omega|)`` of
    them, disjoint from the training set) are noiseless.
    """
    if os_ratio < 1:
        raise ValueError("os_ratio must be >= 1")
    if not 1 <= r < min(m, n):
        raise ValueError("need 1 <= r < min(m, n)")
    A = rng.standard_normal((m, r))
    B = rng.standard_normal((n, r))
    return _assemble_mc(m, n, r, A, B, os_ratio, noise_sd, rng, test_fraction)


def gen_mc_illcond(
    m: int,
    n: int,
    r: int,
    cond: float,
    os_ratio: float,
    noise_sd: float,
    rng: np.random.Generator,
    sigma_1: float | None = None,
    test_fraction: float = 0.2,
) -> McInstance:
    """Completion instance whose singular values decay geometrically.

    The ground truth is ``P diag(sigma) Q^T`` with random orthonormal ``P``,
    ``Q`` and ``sigma_k = sigma_1 * cond^(-(k-1)/(r-1))``, so the extreme
    singular values have ratio exactly ``cond``.  ``sigma_1`` defaults to
    ``sqrt(m*n)``, matching the entry scale of :func:`gen_mc`.
    """
    if cond < 1:
        raise ValueError("cond must be >= 1")
    if r == 1 and cond > 1:
        raise ValueError("r=1 admits only cond=1")
    if not 1 <= r < min(m, n):
        raise ValueError("need 1 <= r < min(m, n)")
    if sigma_1 is None:
        sigma_1 = float(np.sqrt(m * n))
    P = random_subspace(m, r, rng).basis
    if r == 1:
        sigma = np.array([sigma_1])
    else:
        sigma = sigma_1 * cond ** (-np.arange(r) / (r - 1))
    Q = random_subspace(n, r, rng).basis
    return _assemble_mc(
        m, n, r, P * sigma, Q, os_ratio, noise_sd, rng, test_fraction
    )


def _assemble_mc(m, n, r, A, B, os_ratio, noise_sd, rng, test_fraction):
    if not 0 <= test_fraction < 1:
        raise ValueError("test_fraction must be in [0, 1)")
    k_train = expected_sample_count(m, n, r, os_ratio)
    k_test = int(round(test_fraction * k_train))
    if k_train + k_test > m * n:
        raise ValueError(
            f"requested {k_train}+{k_test} distinct entries from a "
            f"{m}x{n} matrix"
        )
    pos = _sample_positions(m * n, k_train + k_test, rng)
    rows, cols = np.divmod(pos, n)
    exact = _factored_entries(A, B, rows, cols)
    noise = noise_sd * rng.standard_normal(k_train)
    train = Triplets(rows[:k_train], cols[:k_train], exact[:k_train] + noise)
    test = Triplets(rows[k_train:], cols[k_train:], exact[k_train:])
    return McInstance(
        m, n, train=train, test=test, r_true=r, factor_left=A, factor_right=B,
        noise_sd=noise_sd, os_ratio=os_ratio,
    )


def gen_mtl(
    T: int,
    m: int,
    r: int,
    d_min: int,
    d_max: int,
    noise_sd: float,
    rng: np.random.Generator,
) -> MtlInstance:
    """Synthetic multitask instance with a shared generating subspace.

    Each task draws ``d_t`` uniform in ``[d_min, d_max]``, Gaussian features
    ``X_t`` and weights ``w_t``, and labels
    ``y_t = X_t U_* U_*^T w_t + N(0, noise_sd^2)``.
    """
    if T < 1:
        raise ValueError("need T >= 1")
    if d_min < 1 or d_max < d_min:
        raise ValueError("need 1 <= d_min <= d_max")
    if not 1 <= r < m:
        raise ValueError("need 1 <= r < m")
    u_star = random_subspace(m, r, rng)
    proj = u_star.basis @ u_star.basis.T
    tasks = []
    for _ in range(T):
        d = int(rng.integers(d_min, d_max + 1))
        X = rng.standard_normal((d, m))
        w = rng.standard_normal(m)
        y = X @ (proj @ w) + noise_sd * rng.standard_normal(d)
        tasks.append((X, y))
    return MtlInstance(tuple(tasks), u_star=u_star, noise_sd=noise_sd)


def contiguous_blocks(count: int, N: int) -> list[tuple[int, int]]:
    """N contiguous (start, stop) blocks of sizes differing by at most one.

    The first ``count % N`` blocks are one longer than the rest.
    """
    if not 1 <= N <= count:
        raise ValueError(f"need 1 <= N <= {count}, got N={N}")
    base, extra = divmod(count, N)
    blocks = []
    start = 0
    for i in range(N):
        stop = start + base + (1 if i < extra else 0)
        blocks.append((start, stop))
        start = stop
    return blocks


def _slice_triplets(trip: Triplets, start: int, stop: int) -> Triplets:
    sel = (trip.cols >= start) & (trip.cols < stop)
    return Triplets(trip.rows[sel], trip.cols[sel] - start, trip.vals[sel])


def partition_columns(
    instance: McInstance, N: int, lam: float = 0.0
) -> list[McShard]:
    """Split an instance's training entries into N contiguous column shards."""
    shards = []
    for start, stop in contiguous_blocks(instance.n, N):
        part = _slice_triplets(instance.train, start, stop)
        shards.append(
            McShard(instance.m, stop - start, part.rows, part.cols, part.vals,
                    lam=lam)
        )
    return shards


def partition_test(instance: McInstance, N: int) -> list[Triplets]:
    """The test entries under the same column blocks as :func:`partition_columns`."""
    return [
        _slice_triplets(instance.test, start, stop)
        for start, stop in contiguous_blocks(instance.n, N)
    ]


def partition_tasks(
    instance: MtlInstance, N: int, lam: float = 0.0, test: bool = False
) -> list[TaskGroup]:
    """Split tasks into N contiguous near-equal groups.

    With ``test=True`` the groups are built from the held-out samples of the
    same task blocks (zero-sample tasks allowed), staying index-aligned with
    the training groups.
    """
    tasks = instance.test_tasks if test else instance.tasks
    if tasks is None:
        raise ValueError("instance has no held-out samples; split it first")
    m = instance.m
    return [
        TaskGroup(tasks[start:stop], m=m, lam=lam, allow_empty=test)
        for start, stop in contiguous_blocks(len(tasks), N)
    ]


def split_train_test(
    instance: McInstance | MtlInstance,
    fraction: float,
    rng: np.random.Generator,
    center: bool = False,
):
    """Split observed data into train/test parts (seeded, in-place-free).

    For MC instances the split is per entry over ``instance.train`` (which
    must be the only populated part); ``center=True`` additionally subtracts
    the training-value mean from both parts and records it in
    ``center_mean``.  For MTL instances the split is per sample within each
    task; the result's ``test_tasks`` stays aligned with ``tasks``.
    """
    if not 0 < fraction < 1:
        raise ValueError("fraction must be in (0, 1)")
    if isinstance(instance, McInstance):
        if len(instance.test):
            raise ValueError("instance already has test entries")
        k = len(instance.train)
        if k < 2:
            raise ValueError("need at least 2 entries to split")
        k_train = min(max(int(round(fraction * k)), 1), k - 1)
        perm = rng.permutation(k)
        tr, te = perm[:k_train], perm[k_train:]
        t = instance.train
        mean = float(np.mean(t.vals[tr])) if center else 0.0
        return McInstance(
            instance.m, instance.n,
            train=Triplets(t.rows[tr], t.cols[tr], t.vals[tr] - mean),
            test=Triplets(t.rows[te], t.cols[te], t.vals[te] - mean),
            r_true=instance.r_true, factor_left=instance.factor_left,
            factor_right=instance.factor_right, noise_sd=instance.noise_sd,
            os_ratio=instance.os_ratio, center_mean=mean if center else None,
        )
    if center:
        raise ValueError("centering applies to matrix-completion data only")
    if instance.test_tasks is not None:
        raise ValueError("instance already has held-out samples")
    train_tasks, test_tasks = [], []
    for X, y in instance.tasks:
        d = X.shape[0]
        d_train = min(max(int(round(fraction * d)), 1), d)
        perm = rng.permutation(d)
        tr, te = np.sort(perm[:d_train]), np.sort(perm[d_train:])
        train_tasks.append((X[tr], y[tr]))
        test_tasks.append((X[te], y[te]))
    return MtlInstance(
        tuple(train_tasks), u_star=instance.u_star,
        noise_sd=instance.noise_sd, test_tasks=tuple(test_tasks),
    )


# ---------------------------------------------------------------------------
# File I/O


def _parse_tokens(tokens: list[str], path, what: str) -> np.ndarray:
    try:
        return np.array(tokens, dtype=float)
    except ValueError:
        _diagnose_lines(path, what)
        raise


def _diagnose_lines(path, what: str) -> None:
    """Find and report the first malformed line (slow path, errors only)."""
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            try:
                [float(p) for p in parts]
            except ValueError:
                raise ValueError(
                    f"{path}: line {lineno}: malformed {what} line: {line!r}"
                ) from None


def load_mc_triplets(path) -> McInstance:
    """Load a triplet file (header ``m n``; lines ``i j v``, 1-based)."""
    path = Path(path)
    tokens = path.read_text().split()
    if len(tokens) < 2:
        raise ValueError(f"{path}: missing 'm n' header")
    header = _parse_tokens(tokens[:2], path, "header")
    if not np.all(header == np.floor(header)):
        raise ValueError(f"{path}: line 1: header must be two integers")
    m, n = int(header[0]), int(header[1])
    body = tokens[2:]
    if len(body) % 3:
        _diagnose_lines(path, "entry")
        raise ValueError(f"{path}: token count not a multiple of 3")
    arr = _parse_tokens(body, path, "entry").reshape(-1, 3)
    ij = arr[:, :2]
    if not np.all(ij == np.floor(ij)):
        k = int(np.flatnonzero((ij != np.floor(ij)).any(axis=1))[0])
        raise ValueError(f"{path}: line {k + 2}: indices must be integers")
    rows = arr[:, 0].astype(np.int64) - 1
    cols = arr[:, 1].astype(np.int64) - 1
    if len(rows):
        bad = (rows < 0) | (rows >= m) | (cols < 0) | (cols >= n)
        if bad.any():
            k = int(np.flatnonzero(bad)[0])
            raise ValueError(
                f"{path}: line {k + 2}: entry ({rows[k] + 1}, {cols[k] + 1}) "
                f"outside declared {m} x {n} bounds"
            )
        flat = rows * n + cols
        uniq, counts = np.unique(flat, return_counts=True)
        if (counts > 1).any():
            p = int(uniq[np.argmax(counts > 1)])
            raise ValueError(
                f"{path}: duplicate entry ({p // n + 1}, {p % n + 1})"
            )
    return McInstance(m, n, train=Triplets(rows, cols, arr[:, 2]))


def write_mc_triplets(path, m: int, n: int, triplets: Triplets) -> None:
    """Write a triplet file readable by :func:`load_mc_triplets` (bit-exact)."""
    with open(path, "w") as fh:
        fh.write(f"{m} {n}\n")
        for i, j, v in zip(triplets.rows, triplets.cols, triplets.vals):
            fh.write(f"{i + 1} {j + 1} {float(v)!r}\n")


def load_mtl_dir(path) -> MtlInstance:
    """Load a directory of per-task files (header ``d_t m``; rows ``x... y``)."""
    path = Path(path)
    files = sorted(p for p in path.iterdir() if p.is_file())
    if not files:
        raise ValueError(f"{path}: no task files found")
    tasks = []
    m_shared = None
    for f in files:
        tokens = f.read_text().split()
        if len(tokens) < 2:
            raise ValueError(f"{f}: missing 'd m' header")
        header = _parse_tokens(tokens[:2], f, "header")
        if not np.all(header == np.floor(header)):
            raise ValueError(f"{f}: line 1: header must be two integers")
        d, m = int(header[0]), int(header[1])
        if m_shared is None:
            m_shared = m
        elif m != m_shared:
            raise ValueError(
                f"{f}: feature dimension {m} differs from {m_shared}"
            )
        body = tokens[2:]
        if len(body) != d * (m + 1):
            _diagnose_lines(f, "sample")
            raise ValueError(
                f"{f}: expected {d * (m + 1)} values for {d} samples, "
                f"got {len(body)}"
            )
        arr = _parse_tokens(body, f, "sample").reshape(d, m + 1)
        tasks.append((arr[:, :m], arr[:, m]))
    return MtlInstance(tuple(tasks))


def write_mtl_dir(path, instance: MtlInstance) -> None:
    """Write per-task files readable by :func:`load_mtl_dir` (bit-exact)."""
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    for t, (X, y) in enumerate(instance.tasks):
        with open(path / f"task_{t:04d}.txt", "w") as fh:
            fh.write(f"{X.shape[0]} {X.shape[1]}\n")
            for xrow, label in zip(X, y):
                fh.write(" ".join(repr(float(v)) for v in xrow))
                fh.write(f" {float(label)!r}\n")
