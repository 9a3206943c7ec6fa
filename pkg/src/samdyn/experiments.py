"""Phase-transition grid experiments and Monte Carlo test-error estimation.

A GridSpec describes a (d, ||mu||) grid, a list of seeds, and one training
variant per algorithm; run_grid executes all trials (optionally in a
process pool), persists each trial atomically so interrupted grids resume,
and exports per-cell aggregates as CSV plus a portable-graymap render.

Per-trial randomness is derived from the grid coordinates, never from
execution order: the seed material is the tuple (tag, base_seed, seed, d,
round(mu * 1e6)), so adding cells or changing the worker count cannot
perturb existing trials.  The variant name is deliberately absent: one
seed label denotes one (dataset, init, test set) triple shared by every
training variant, so per-seed differences between variants are paired
comparisons of the algorithms alone.
"""

import dataclasses
import json
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checks import activation_threshold, effective_sigma0, own_noise_pre
from .data import DataParams, gen_dataset, make_signal
from .decomposition import CoeffTracker, InvariantViolation
from .network import NetConfig
from .optim import TrainConfig, TrainingDivergedError, train

_SEED_TAG = 88261599  # fixed domain tag for trial seed derivation


@dataclass(frozen=True)
class GridSpec:
    d_values: tuple
    mu_values: tuple
    seeds: tuple
    n: int
    P: int
    sigma_p: float
    p: float
    m: int
    train: dict  # variant name -> TrainConfig template (seed ignored)
    n_test: int
    init: str = "uniform_fan_in"
    sigma_0: float | None = None  # None + gaussian -> 1/(P sigma_p sqrt(d))
    loss_target: float = 0.05
    base_seed: int = 0

    def __post_init__(self):
        if not self.d_values or not self.mu_values or not self.seeds:
            raise ValueError("d_values, mu_values and seeds must be nonempty")
        if self.n_test < 1:
            raise ValueError(f"n_test must be >= 1, got {self.n_test}")
        if not self.train:
            raise ValueError("at least one training variant is required")

    def data_params(self, d: int, mu_norm: float) -> DataParams:
        return DataParams(d=d, P=self.P, sigma_p=self.sigma_p, p=self.p, mu_norm=mu_norm)

    def net_config(self, d: int) -> NetConfig:
        if self.init == "gaussian":
            s0 = self.sigma_0
            if s0 is None:
                s0 = 1.0 / (self.P * self.sigma_p * math.sqrt(d))
            return NetConfig(m=self.m, d=d, init="gaussian", sigma_0=s0)
        return NetConfig(m=self.m, d=d, init="uniform_fan_in")

    def cells(self) -> list[tuple]:
        return [
            (d, mu, variant, seed)
            for variant in sorted(self.train)
            for d in self.d_values
            for mu in self.mu_values
            for seed in self.seeds
        ]


@dataclass
class TrialResult:
    d: int
    mu_norm: float
    algo: str
    seed: int
    train_loss: float = math.nan
    test_error: float = math.nan
    test_stderr: float = math.nan
    convergence_epoch: int | None = None
    max_gamma: float = math.nan
    max_sum_zeta: float = math.nan
    invariant_violations: int = 0
    failed: bool = False
    error: str = ""


def trial_seed_sequence(base_seed: int, d: int, mu_norm: float, seed: int):
    """Documented per-trial seed derivation (coordinate hash, shared by
    all training variants at the same cell)."""
    entropy = (
        _SEED_TAG,
        int(base_seed),
        int(seed),
        int(d),
        int(round(mu_norm * 1_000_000)),
    )
    return np.random.SeedSequence(entropy)


def estimate_test_error(
    w: np.ndarray,
    params: DataParams,
    mu: np.ndarray,
    n_test: int,
    rng: np.random.Generator,
    chunk: int = 256,
) -> tuple[float, float]:
    """Fraction of fresh samples with y != sign(f); sign(0) counts as an
    error.  Draws in fixed-size chunks so large d stays memory-bounded
    while the stream remains reproducible for a given generator state.
    """
    if n_test < 1:
        raise ValueError(f"n_test must be >= 1, got {n_test}")
    m = w.shape[1]
    mu_pre = w @ mu  # (2, m)
    errors = 0
    remaining = n_test
    while remaining > 0:
        k = min(chunk, remaining)
        y_hat = np.where(rng.random(k) < 0.5, 1.0, -1.0)
        y = np.where(rng.random(k) < params.p, -y_hat, y_hat)
        xi = rng.normal(0.0, params.sigma_p, size=(k, params.d))
        sig = np.maximum(y_hat[:, None, None] * mu_pre[None, :, :], 0.0).sum(axis=2)
        noi = np.maximum(np.einsum("jmd,kd->kjm", w, xi), 0.0).sum(axis=2)
        fj = (sig + (params.P - 1) * noi) / m
        f = fj[:, 0] - fj[:, 1]
        errors += int(np.sum(y * f <= 0))
        remaining -= k
    rate = errors / n_test
    stderr = math.sqrt(rate * (1 - rate) / n_test)
    return rate, stderr


def run_trial(spec: GridSpec, d: int, mu_norm: float, variant: str, seed: int) -> TrialResult:
    """One training run plus evaluation; deterministic given coordinates.

    Individual failures (divergence, invariant violations) are captured in
    the result so a grid never aborts on one bad cell.
    """
    result = TrialResult(d=d, mu_norm=mu_norm, algo=variant, seed=seed)
    try:
        ss = trial_seed_sequence(spec.base_seed, d, mu_norm, seed)
        data_ss, train_ss, test_ss = ss.spawn(3)
        params = spec.data_params(d, mu_norm)
        mu = make_signal(d, mu_norm)
        ds = gen_dataset(params, mu, spec.n, seed=data_ss)
        net = spec.net_config(d)
        base = spec.train[variant]
        cfg = dataclasses.replace(base, seed=int(train_ss.generate_state(1)[0]))
        tracker = CoeffTracker(ds, spec.m, keep_history=False, check=True)
        traj = train(ds, net, cfg, hooks=(tracker,))

        thr = activation_threshold(effective_sigma0(net), spec.sigma_p, d)
        y = np.array([s.y for s in ds.samples], dtype=float)
        inclusion_viol = 0
        for rec in traj.records:
            own = own_noise_pre(rec.noise_pre, y)
            inclusion_viol += int(np.sum(np.any((own > thr) & ~(own > 0), axis=1)))

        result.train_loss = traj.records[-1].train_loss
        for rec in traj.epoch_records():
            if rec.train_loss <= spec.loss_target:
                result.convergence_epoch = rec.t
                break
        rate, stderr = estimate_test_error(
            traj.w_final, params, mu, spec.n_test, np.random.default_rng(test_ss)
        )
        result.test_error = rate
        result.test_stderr = stderr
        result.max_gamma = float(tracker.coeffs.gamma.max())
        result.max_sum_zeta = float(tracker.coeffs.zeta.sum(axis=2).max())
        result.invariant_violations = inclusion_viol
    except (TrainingDivergedError, InvariantViolation, FloatingPointError, ValueError) as exc:
        result.failed = True
        result.error = f"{type(exc).__name__}: {exc}"
    return result


def _trial_task(args):
    spec, d, mu_norm, variant, seed = args
    return run_trial(spec, d, mu_norm, variant, seed)


def _trial_filename(d, mu_norm, variant, seed) -> str:
    return f"{variant}_d{d}_mu{mu_norm:g}_s{seed}.json"


def _atomic_write_json(path: Path, payload: dict) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(payload, fh, indent=0, sort_keys=True)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def run_grid(spec: GridSpec, out_dir, jobs: int = 1, resume: bool = False) -> list[TrialResult]:
    """Execute every (d, mu, variant, seed) cell and persist results.

    Writes trials/<cell>.json incrementally (atomic per trial), then
    results.csv and per-variant heatmap CSV + PGM files under out_dir.
    With resume=True, existing trial files are loaded instead of re-run.
    """
    out = Path(out_dir)
    trials_dir = out / "trials"
    trials_dir.mkdir(parents=True, exist_ok=True)

    cells = spec.cells()
    done: dict[tuple, TrialResult] = {}
    pending = []
    for cell in cells:
        path = trials_dir / _trial_filename(*cell)
        if resume and path.exists():
            with open(path) as fh:
                done[cell] = TrialResult(**json.load(fh))
        else:
            pending.append(cell)

    def persist(cell, result: TrialResult) -> None:
        _atomic_write_json(trials_dir / _trial_filename(*cell), dataclasses.asdict(result))
        done[cell] = result

    if jobs > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for cell, result in zip(
                pending, pool.map(_trial_task, [(spec, *c) for c in pending])
            ):
                persist(cell, result)
    else:
        for cell in pending:
            persist(cell, run_trial(spec, *cell))

    results = [done[c] for c in cells]
    write_results_csv(out / "results.csv", results)
    export_heatmap(results, out)
    return results


_CSV_COLUMNS = (
    "algo", "d", "mu_norm", "seed", "train_loss", "test_error", "test_stderr",
    "convergence_epoch", "max_gamma", "max_sum_zeta", "invariant_violations",
    "failed", "error",
)


def write_results_csv(path, results: list[TrialResult]) -> None:
    """Long-form per-trial table, sorted so identical grids give identical
    bytes regardless of execution order."""
    rows = sorted(results, key=lambda r: (r.algo, r.d, r.mu_norm, r.seed))
    with open(path, "w") as fh:
        fh.write(",".join(_CSV_COLUMNS) + "\n")
        for r in rows:
            conv = "" if r.convergence_epoch is None else str(r.convergence_epoch)
            fh.write(
                f"{r.algo},{r.d},{r.mu_norm!r},{r.seed},{r.train_loss!r},"
                f"{r.test_error!r},{r.test_stderr!r},{conv},{r.max_gamma!r},"
                f"{r.max_sum_zeta!r},{r.invariant_violations},{int(r.failed)},{r.error}\n"
            )


def load_results_csv(path) -> list[TrialResult]:
    results = []
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        assert header == list(_CSV_COLUMNS), f"unexpected results header: {header}"
        for line in fh:
            vals = line.rstrip("\n").split(",")
            row = dict(zip(_CSV_COLUMNS, vals))
            results.append(
                TrialResult(
                    d=int(row["d"]),
                    mu_norm=float(row["mu_norm"]),
                    algo=row["algo"],
                    seed=int(row["seed"]),
                    train_loss=float(row["train_loss"]),
                    test_error=float(row["test_error"]),
                    test_stderr=float(row["test_stderr"]),
                    convergence_epoch=(
                        None if row["convergence_epoch"] == "" else int(row["convergence_epoch"])
                    ),
                    max_gamma=float(row["max_gamma"]),
                    max_sum_zeta=float(row["max_sum_zeta"]),
                    invariant_violations=int(row["invariant_violations"]),
                    failed=bool(int(row["failed"])),
                    error=row["error"],
                )
            )
    return results


@dataclass
class CellAggregate:
    d: int
    mu_norm: float
    algo: str
    mean_test_error: float
    stderr: float
    n_seeds: int


def aggregate(results: list[TrialResult]) -> list[CellAggregate]:
    """Per-cell mean test error; stderr is the spread of per-seed values
    (falls back to the single trial's binomial stderr for one seed)."""
    cells: dict[tuple, list[TrialResult]] = {}
    for r in results:
        if r.failed:
            continue
        cells.setdefault((r.algo, r.d, r.mu_norm), []).append(r)
    out = []
    for (algo, d, mu_norm), trials in sorted(cells.items()):
        errs = np.array([t.test_error for t in trials])
        if len(errs) > 1:
            stderr = float(errs.std(ddof=1) / math.sqrt(len(errs)))
        else:
            stderr = trials[0].test_stderr
        out.append(
            CellAggregate(
                d=d, mu_norm=mu_norm, algo=algo,
                mean_test_error=float(errs.mean()), stderr=stderr, n_seeds=len(errs),
            )
        )
    return out


def export_heatmap(results: list[TrialResult], out_dir, prefix: str = "heatmap") -> list[Path]:
    """Write per-variant aggregates as CSV and a PGM render.

    The graymap uses gray = round(255 * (1 - clamp(error, 0, 1))), so low
    test error renders bright; rows are d ascending (top row = smallest d),
    columns mu ascending.  The CSV is the artifact of record; the image is
    a convenience render of the same numbers.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    aggs = aggregate(results)
    by_algo: dict[str, list[CellAggregate]] = {}
    for a in aggs:
        by_algo.setdefault(a.algo, []).append(a)

    written = []
    algos = sorted(by_algo) or sorted({r.algo for r in results})
    for algo in algos:
        cells = by_algo.get(algo, [])
        csv_path = out / f"{prefix}_{algo}.csv"
        with open(csv_path, "w") as fh:
            fh.write("d,mu_norm,algo,mean_test_error,stderr,n_seeds\n")
            for a in sorted(cells, key=lambda a: (a.d, a.mu_norm)):
                fh.write(
                    f"{a.d},{a.mu_norm!r},{a.algo},{a.mean_test_error!r},"
                    f"{a.stderr!r},{a.n_seeds}\n"
                )
        written.append(csv_path)
        if not cells:
            continue
        ds = sorted({a.d for a in cells})
        mus = sorted({a.mu_norm for a in cells})
        grid = {(a.d, a.mu_norm): a.mean_test_error for a in cells}
        pgm_path = out / f"{prefix}_{algo}.pgm"
        with open(pgm_path, "w") as fh:
            fh.write("P2\n")
            fh.write("# gray = round(255*(1 - clamp(test_error, 0, 1)));")
            fh.write(" rows: d ascending, cols: mu ascending\n")
            fh.write(f"{len(mus)} {len(ds)}\n255\n")
            for d in ds:
                vals = []
                for mu in mus:
                    err = grid.get((d, mu), 1.0)
                    vals.append(str(int(round(255 * (1 - min(max(err, 0.0), 1.0))))))
                fh.write(" ".join(vals) + "\n")
        written.append(pgm_path)
    return written


def phase_train_variants(algos=("sgd", "sam"), eta: float = 0.2, epochs: int = 100,
                         B: int = 20, tau: float = 0.03) -> dict:
    """Training variants of the synthetic phase-transition experiment:
    full-batch descent for 100 epochs, and the same with an ascent
    perturbation of radius 0.03.  The batch loss here is a size-B mean, so
    eta=0.2 equals a step of 0.01 under the per-sample-sum convention at
    n=20; the perturbation radius is normalization-invariant."""
    variants = {}
    if "sgd" in algos:
        variants["sgd"] = TrainConfig(eta=eta, B=B, epochs=epochs, algo="sgd")
    if "sam" in algos:
        variants["sam"] = TrainConfig(eta=eta, B=B, epochs=epochs, algo="sam", tau=tau)
    return variants


def phase_grid_spec(reduced: bool = False, algos=("sgd", "sam"), seeds=None) -> GridSpec:
    """The synthetic heatmap experiment: n=20 clean samples, sigma_p=1,
    m=10 filters, d from 1000 to 21000 by mu from 0 to 10, 10 seeds,
    1000 test points.  reduced=True gives the 3x4x3-seed acceptance grid.
    """
    if reduced:
        d_values = (1000, 5000, 20000)
        mu_values = (1.0, 3.0, 6.0, 10.0)
        default_seeds = (0, 1, 2)
    else:
        d_values = tuple(range(1000, 21001, 2000))
        mu_values = tuple(float(v) for v in range(0, 11))
        default_seeds = tuple(range(10))
    return GridSpec(
        d_values=d_values,
        mu_values=mu_values,
        seeds=tuple(seeds) if seeds is not None else default_seeds,
        n=20,
        P=2,
        sigma_p=1.0,
        p=0.0,
        m=10,
        train=phase_train_variants(algos),
        n_test=1000,
    )


def lr_ablation_spec(etas=(0.02, 0.2, 2.0, 20.0), B: int = 10, reduced: bool = True) -> GridSpec:
    """Step-size ablation with minibatches of 10: one SGD variant per eta,
    expressed purely through the grid spec.  The eta list is the
    {0.001, 0.01, 0.1, 1} sweep in per-sample-sum units rescaled to the
    mean-reduction convention (times n=20)."""
    base = phase_grid_spec(reduced=reduced, algos=("sgd",))
    train = {
        f"sgd_eta{eta:g}": TrainConfig(eta=eta, B=B, epochs=100, algo="sgd")
        for eta in etas
    }
    return dataclasses.replace(base, train=train)
