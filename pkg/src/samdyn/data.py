"""Signal-plus-noise patch data model.

Each input is P patches of dimension d.  One patch, at a uniformly random
position, carries the signal: the true label times a fixed vector mu.  The
remaining P-1 patches are all equal to a single fresh Gaussian noise vector
xi ~ N(0, sigma_p^2 I).  The observed label is the true label flipped with
probability p.

Conventions
-----------
- labels are +1/-1 ints on Sample, stacked to float64 arrays for arithmetic
- a Dataset is reproducible from (params, seed): per-sample generators are
  spawned from one SeedSequence, so generation order never matters
"""

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class DataParams:
    """Distribution parameters: patch dim d, patch count P, noise std
    sigma_p, label-flip probability p, and signal strength mu_norm."""

    d: int
    P: int = 2
    sigma_p: float = 1.0
    p: float = 0.0
    mu_norm: float = 1.0

    def __post_init__(self):
        if self.d < 1:
            raise ValueError(f"d must be >= 1, got {self.d}")
        if self.P < 2:
            raise ValueError(f"P must be >= 2, got {self.P}")
        if not self.sigma_p > 0:
            raise ValueError(f"sigma_p must be > 0, got {self.sigma_p}")
        if not 0 <= self.p < 0.5:
            raise ValueError(f"p must be in [0, 0.5), got {self.p}")
        if self.mu_norm < 0:
            raise ValueError(f"mu_norm must be >= 0, got {self.mu_norm}")


@dataclass
class Sample:
    """One data point.

    patches[signal_pos] == y_hat * mu exactly; every other patch is the
    shared noise vector xi.
    """

    patches: np.ndarray  # (P, d)
    y: int               # observed label, +1/-1
    y_hat: int           # true label, +1/-1
    xi: np.ndarray       # (d,)
    signal_pos: int


@dataclass
class Dataset:
    samples: list[Sample]
    mu: np.ndarray
    params: DataParams
    seed: int | None = None

    @property
    def n(self) -> int:
        return len(self.samples)


@dataclass
class StackedData:
    """Array view of a Dataset used by the training loop."""

    patches: np.ndarray     # (n, P, d)
    y: np.ndarray           # (n,) float64
    y_hat: np.ndarray       # (n,) float64
    xi: np.ndarray          # (n, d)
    signal_pos: np.ndarray  # (n,) int
    mu: np.ndarray          # (d,)


def make_signal(d: int, mu_norm: float) -> np.ndarray:
    """Signal vector mu_norm * e1.

    The learning problem is rotation invariant, so the first canonical
    direction is used; tests may pass an arbitrary mu to the generators.
    """
    if d < 1:
        raise ValueError(f"d must be >= 1, got {d}")
    if mu_norm < 0:
        raise ValueError(f"mu_norm must be >= 0, got {mu_norm}")
    mu = np.zeros(d)
    mu[0] = mu_norm
    return mu


def gen_sample(params: DataParams, mu: np.ndarray, rng: np.random.Generator) -> Sample:
    """Draw one sample: true label uniform on +-1, observed label flipped
    with probability p, one shared noise vector, uniform signal position."""
    y_hat = 1 if rng.random() < 0.5 else -1
    y = -y_hat if rng.random() < params.p else y_hat
    xi = rng.normal(0.0, params.sigma_p, size=params.d)
    signal_pos = int(rng.integers(params.P))
    patches = np.tile(xi, (params.P, 1))
    patches[signal_pos] = y_hat * mu
    return Sample(patches=patches, y=y, y_hat=y_hat, xi=xi, signal_pos=signal_pos)


def gen_dataset(params: DataParams, mu: np.ndarray, n: int, seed) -> Dataset:
    """n independent samples, deterministic given seed.

    Each sample gets its own spawned RNG stream, so datasets are bitwise
    reproducible and per-sample streams could be generated in parallel.
    seed may be an int or a prepared SeedSequence (derived-stream callers).
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    mu = np.asarray(mu, dtype=np.float64)
    if mu.shape != (params.d,):
        raise ValueError(f"mu has shape {mu.shape}, expected ({params.d},)")
    if isinstance(seed, np.random.SeedSequence):
        root, stored = seed, None
    else:
        root, stored = np.random.SeedSequence(seed), int(seed)
    samples = [gen_sample(params, mu, np.random.default_rng(c)) for c in root.spawn(n)]
    return Dataset(samples=samples, mu=mu, params=params, seed=stored)


def stack(ds: Dataset) -> StackedData:
    return StackedData(
        patches=np.stack([s.patches for s in ds.samples]),
        y=np.array([s.y for s in ds.samples], dtype=np.float64),
        y_hat=np.array([s.y_hat for s in ds.samples], dtype=np.float64),
        xi=np.stack([s.xi for s in ds.samples]),
        signal_pos=np.array([s.signal_pos for s in ds.samples], dtype=np.int64),
        mu=ds.mu,
    )


@dataclass
class ConcentrationReport:
    """Outcome of the geometry checks a generated dataset is expected to
    satisfy at large d.  Violations are listed, never fatal: small-d
    stress datasets are expected to fail some bounds."""

    n: int
    d: int
    delta: float
    norm_violations: list[int] = field(default_factory=list)
    cross_violations: list[tuple[int, int]] = field(default_factory=list)
    mu_violations: list[int] = field(default_factory=list)
    label_count_ok: bool = True
    label_counts: dict = field(default_factory=dict)
    n_flipped: int = 0

    @property
    def ok(self) -> bool:
        return (
            not self.norm_violations
            and not self.cross_violations
            and not self.mu_violations
            and self.label_count_ok
        )

    def rows(self) -> list[tuple]:
        """(check, violations, total) summary rows."""
        npairs = self.n * (self.n - 1) // 2
        return [
            ("noise_norm_range", len(self.norm_violations), self.n),
            ("noise_cross_inner", len(self.cross_violations), npairs),
            ("noise_signal_inner", len(self.mu_violations), self.n),
            ("label_class_counts", 0 if self.label_count_ok else 1, 1),
        ]


def concentration_report(ds: Dataset, delta: float = 0.05) -> ConcentrationReport:
    """Check the high-probability geometry of a generated dataset.

    Per sample: sigma_p^2 d/2 <= ||xi_i||^2 <= 3 sigma_p^2 d/2.
    Per pair:   |<xi_i, xi_k>| <= 2 sigma_p^2 sqrt(d log(6 n^2/delta)).
    Per sample: |<xi_i, mu>|   <= ||mu|| sigma_p sqrt(2 log(6 n/delta)).
    Label classes: per observed label value, the clean count must lie in
    (1-p)n/2 +- sqrt((n/2) log(8/delta)) and the flipped count in
    pn/2 +- the same slack.
    """
    if ds.n == 0:
        raise ValueError("dataset is empty")
    arrays = stack(ds)
    prm = ds.params
    n, d = arrays.xi.shape
    sp2 = prm.sigma_p**2

    rep = ConcentrationReport(n=n, d=d, delta=delta)

    norms = np.einsum("nd,nd->n", arrays.xi, arrays.xi)
    bad = (norms < sp2 * d / 2) | (norms > 3 * sp2 * d / 2)
    rep.norm_violations = list(np.flatnonzero(bad))

    cross_bound = 2 * sp2 * math.sqrt(d * math.log(6 * n**2 / delta))
    gram = arrays.xi @ arrays.xi.T
    iu = np.triu_indices(n, k=1)
    bad_pairs = np.abs(gram[iu]) > cross_bound
    rep.cross_violations = [
        (int(i), int(k)) for i, k in zip(iu[0][bad_pairs], iu[1][bad_pairs])
    ]

    mu_bound = prm.mu_norm * prm.sigma_p * math.sqrt(2 * math.log(6 * n / delta))
    mu_inner = arrays.xi @ arrays.mu
    rep.mu_violations = list(np.flatnonzero(np.abs(mu_inner) > mu_bound))

    clean = arrays.y == arrays.y_hat
    rep.n_flipped = int(np.sum(~clean))
    slack = math.sqrt((n / 2) * math.log(8 / delta))
    ok = True
    for yval in (1.0, -1.0):
        n_clean = int(np.sum(clean & (arrays.y == yval)))
        n_flip = int(np.sum(~clean & (arrays.y == yval)))
        rep.label_counts[int(yval)] = {"clean": n_clean, "flipped": n_flip}
        if abs(n_clean - (1 - prm.p) * n / 2) > slack:
            ok = False
        if abs(n_flip - prm.p * n / 2) > slack:
            ok = False
    rep.label_count_ok = ok
    return rep


def save_dataset(path, ds: Dataset) -> None:
    """Write the documented binary container.

    NumPy .npz archive with keys:
      header: int64 [d, P, n, seed_flag, seed], floats [sigma_p, p, mu_norm]
      mu (d,), y (n,), y_hat (n,), signal_pos (n,), xi (n, d)
    Patches are reconstructed on load from (mu, y_hat, signal_pos, xi).
    """
    arrays = stack(ds)
    prm = ds.params
    seed_flag = 0 if ds.seed is None else 1
    seed = 0 if ds.seed is None else ds.seed
    np.savez(
        path,
        header_int=np.array([prm.d, prm.P, ds.n, seed_flag, seed], dtype=np.int64),
        header_float=np.array([prm.sigma_p, prm.p, prm.mu_norm], dtype=np.float64),
        mu=arrays.mu,
        y=arrays.y.astype(np.int64),
        y_hat=arrays.y_hat.astype(np.int64),
        signal_pos=arrays.signal_pos,
        xi=arrays.xi,
    )


def load_dataset(path) -> Dataset:
    with np.load(path) as z:
        d, P, n, seed_flag, seed = (int(v) for v in z["header_int"])
        sigma_p, p, mu_norm = (float(v) for v in z["header_float"])
        params = DataParams(d=d, P=P, sigma_p=sigma_p, p=p, mu_norm=mu_norm)
        mu = z["mu"]
        y = z["y"]
        y_hat = z["y_hat"]
        signal_pos = z["signal_pos"]
        xi = z["xi"]
    samples = []
    for i in range(n):
        patches = np.tile(xi[i], (P, 1))
        patches[signal_pos[i]] = y_hat[i] * mu
        samples.append(
            Sample(
                patches=patches,
                y=int(y[i]),
                y_hat=int(y_hat[i]),
                xi=xi[i],
                signal_pos=int(signal_pos[i]),
            )
        )
    return Dataset(samples=samples, mu=mu, params=params, seed=seed if seed_flag else None)
