"""Minibatch SGD and sharpness-aware minimization (SAM) training loops.

Epoch/batch indexing follows the recurrence convention: state (t, b) is the
weight configuration before batch b of epoch t is applied, and (t+1, 0) is
the same state as (t, H).  Trajectory records always refer to such states.

The SAM step perturbs the weights by tau * g/||g||_F (Frobenius norm over
all 2m filters), then descends along the full gradient evaluated at the
perturbed point.  A zero gradient or tau=0 yields a zero perturbation and
the step degenerates to plain SGD on the identical code path, so tau=0 runs
are bitwise equal to SGD runs.

Hooks are called once per batch step with a StepEvent carrying the exact
loss derivatives and activation indicators the step used (for SAM, those of
the perturbed weights), which is what allows the signal/noise coefficient
tracker to reproduce the weight trajectory exactly.
"""

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, StackedData, stack
from .network import NetConfig, gradient_with_aux, init_weights, loss, loss_grad


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    eta: float
    B: int
    epochs: int
    algo: str = "sgd"  # "sgd" | "sam"
    tau: float = 0.0
    seed: int = 0
    record_every: int | None = None   # batch-step stride; None -> epoch boundaries
    sam_phase_iters: int | None = None  # switch SAM -> SGD after this many steps
    snapshot_weights: bool = False

    def __post_init__(self):
        if not self.eta >= 0:
            raise ValueError(f"eta must be >= 0, got {self.eta}")
        if self.B < 1:
            raise ValueError(f"B must be >= 1, got {self.B}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.algo not in ("sgd", "sam"):
            raise ValueError(f"algo must be sgd or sam, got {self.algo!r}")
        if self.tau < 0:
            raise ValueError(f"tau must be >= 0, got {self.tau}")
        if self.record_every is not None and self.record_every < 1:
            raise ValueError(f"record_every must be >= 1, got {self.record_every}")


@dataclass
class StepEvent:
    """What one optimizer step actually did.

    ell, sig_act, noise_act are the loss derivatives and activation
    indicators used to form the descent gradient: for SAM these belong to
    the perturbed weights.  noise_pre holds <w, xi_i> at the unperturbed
    weights and noise_pre_used the same at the weights the gradient was
    evaluated at; they coincide for SGD.
    """

    t: int
    b: int
    step: int
    batch: np.ndarray          # (B,) sample indices
    eta: float
    tau: float                 # effective radius; 0 when no perturbation applied
    ell: np.ndarray            # (B,)
    sig_act: np.ndarray        # (2, m, B) indicators at <w_used, y_hat_i mu>
    noise_act: np.ndarray      # (2, m, B) indicators at <w_used, xi_i>
    noise_pre: np.ndarray      # (2, m, B) <w, xi_i>
    noise_pre_used: np.ndarray  # (2, m, B) <w_used, xi_i>
    w_before: np.ndarray
    w_after: np.ndarray


@dataclass
class TrajectoryRecord:
    t: int
    b: int
    train_loss: float
    margins: np.ndarray    # (n,) y_i f(W, x_i)
    mu_pre: np.ndarray     # (2, m) <w_{j,r}, mu>
    noise_pre: np.ndarray  # (2, m, n) <w_{j,r}, xi_i>
    weights: np.ndarray | None = None


@dataclass
class Trajectory:
    records: list[TrajectoryRecord] = field(default_factory=list)
    schedules: list[list[np.ndarray]] = field(default_factory=list)
    w0: np.ndarray | None = None
    w_final: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def record_at(self, t: int, b: int) -> TrajectoryRecord:
        for r in self.records:
            if r.t == t and r.b == b:
                return r
        raise KeyError(f"no record at state ({t}, {b})")

    def epoch_records(self) -> list[TrajectoryRecord]:
        return [r for r in self.records if r.b == 0]


def epoch_schedule(n: int, B: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Uniformly random partition of [n] into H = n/B batches of size B.

    The full-batch case returns the identity order without consuming the
    stream: batch membership is what matters, and a fixed within-batch
    order keeps full-batch runs independent of the shuffle seed down to
    float summation order.
    """
    if n % B != 0:
        raise ValueError(f"B={B} does not divide n={n}")
    if B == n:
        return [np.arange(n)]
    perm = rng.permutation(n)
    return list(perm.reshape(n // B, B))


def grad_frobenius_norm(g: np.ndarray) -> float:
    return float(np.sqrt(np.sum(g * g)))


def sam_perturbation(w, patches, y, tau: float) -> np.ndarray:
    """Ascent perturbation tau * g/||g||_F; zero when tau=0 or the gradient
    vanishes (the 0/0 limit is taken as 0)."""
    g, _ = gradient_with_aux(w, patches, y)
    norm = grad_frobenius_norm(g)
    if tau == 0.0 or norm == 0.0:
        return np.zeros_like(w)
    return (tau / norm) * g


def _step(w, patches, y, eta: float, tau: float):
    """One descent step; returns (w_next, aux_at_w, aux_used, w_used, perturbed)."""
    g, aux0 = gradient_with_aux(w, patches, y)
    perturbed = False
    w_used, g_used, aux = w, g, aux0
    if tau > 0.0:
        norm = grad_frobenius_norm(g)
        if norm > 0.0:
            w_used = w + (tau / norm) * g
            g_used, aux = gradient_with_aux(w_used, patches, y)
            perturbed = True
    return w - eta * g_used, aux0, aux, w_used, perturbed


def sgd_step(w, patches, y, eta: float) -> np.ndarray:
    w_next, _, _, _, _ = _step(w, patches, y, eta, 0.0)
    return w_next


def sam_step(w, patches, y, eta: float, tau: float) -> np.ndarray:
    w_next, _, _, _, _ = _step(w, patches, y, eta, tau)
    return w_next


def _gather_patch(act: np.ndarray, pos: np.ndarray) -> np.ndarray:
    # act (B, 2, m, P), pos (B,) -> (2, m, B)
    B = act.shape[0]
    return np.moveaxis(act[np.arange(B), :, :, pos], 0, -1)


def _state_stats(w, arrays: StackedData, P: int):
    """Margins and loss at a state from the (2,m) x mu and (2,m,n) x xi
    pre-activations; costs one pass over the weights per record."""
    m = w.shape[1]
    mu_pre = w @ arrays.mu                      # (2, m)
    noise_pre = np.einsum("jmd,nd->jmn", w, arrays.xi)
    sig = np.maximum(arrays.y_hat[None, None, :] * mu_pre[:, :, None], 0.0).sum(axis=1)
    noi = np.maximum(noise_pre, 0.0).sum(axis=1)  # (2, n)
    fj = (sig + (P - 1) * noi) / m
    margins = arrays.y * (fj[0] - fj[1])
    train_loss = float(np.mean(loss(margins)))
    return mu_pre, noise_pre, margins, train_loss


def train(ds: Dataset, net: NetConfig, cfg: TrainConfig, hooks=()) -> Trajectory:
    """Run epochs x batches of SGD or SAM over the dataset.

    Records the state before every due batch step plus the final state,
    calls each hook after every step, and aborts on non-finite loss.
    """
    arrays = stack(ds)
    n = arrays.y.size
    P = ds.params.P
    if n % cfg.B != 0:
        raise ValueError(f"B={cfg.B} does not divide n={n}")
    H = n // cfg.B

    ss = np.random.SeedSequence(cfg.seed)
    init_ss, shuffle_ss = ss.spawn(2)
    w = init_weights(net, np.random.default_rng(init_ss))
    shuffle_rng = np.random.default_rng(shuffle_ss)

    traj = Trajectory(
        w0=w.copy(),
        meta={
            "n": n,
            "d": net.d,
            "m": net.m,
            "P": P,
            "H": H,
            "algo": cfg.algo,
            "eta": cfg.eta,
            "tau": cfg.tau,
            "B": cfg.B,
            "epochs": cfg.epochs,
            "seed": cfg.seed,
            "record_every": cfg.record_every,
            "sam_phase_iters": cfg.sam_phase_iters,
            "init": net.init,
            "sigma_0": net.sigma_0,
        },
    )

    def due(s: int) -> bool:
        if cfg.record_every is None:
            return s % H == 0
        return s % cfg.record_every == 0

    def record(t: int, b: int) -> None:
        mu_pre, noise_pre, margins, train_loss = _state_stats(w, arrays, P)
        if not np.isfinite(train_loss):
            raise TrainingDivergedError(f"non-finite train loss at state ({t}, {b})")
        traj.records.append(
            TrajectoryRecord(
                t=t,
                b=b,
                train_loss=train_loss,
                margins=margins,
                mu_pre=mu_pre,
                noise_pre=noise_pre,
                weights=w.copy() if cfg.snapshot_weights else None,
            )
        )

    noise_pos = (arrays.signal_pos + 1) % P
    s = 0
    for t in range(cfg.epochs):
        batches = epoch_schedule(n, cfg.B, shuffle_rng)
        traj.schedules.append(batches)
        for b, idx in enumerate(batches):
            if due(s):
                record(t, b)
            sam_now = cfg.algo == "sam" and (
                cfg.sam_phase_iters is None or s < cfg.sam_phase_iters
            )
            tau_eff = cfg.tau if sam_now else 0.0
            w_next, aux0, aux, _w_used, perturbed = _step(
                w, arrays.patches[idx], arrays.y[idx], cfg.eta, tau_eff
            )
            if not np.all(np.isfinite(aux.margins)):
                raise TrainingDivergedError(f"non-finite margins at state ({t}, {b})")
            if hooks:
                pos = noise_pos[idx]
                event = StepEvent(
                    t=t,
                    b=b,
                    step=s,
                    batch=idx,
                    eta=cfg.eta,
                    tau=tau_eff if perturbed else 0.0,
                    ell=aux.ell,
                    sig_act=_gather_patch(aux.act, arrays.signal_pos[idx]),
                    noise_act=_gather_patch(aux.act, pos),
                    noise_pre=_gather_patch(aux0.pre, pos),
                    noise_pre_used=_gather_patch(aux.pre, pos),
                    w_before=w,
                    w_after=w_next,
                )
                for hook in hooks:
                    hook(event)
            w = w_next
            s += 1

    record(cfg.epochs, 0)
    traj.w_final = w.copy()
    return traj


def margins_to_ell(margins: np.ndarray) -> np.ndarray:
    """Loss derivatives for recorded margins (used by trajectory checkers)."""
    return loss_grad(margins)


def write_metrics_csv(path, traj: Trajectory) -> None:
    """Stream per-record metrics: (t, b, train_loss, min_margin, max_margin)."""
    with open(path, "w") as fh:
        fh.write("t,b,train_loss,min_margin,max_margin\n")
        for r in traj.records:
            fh.write(
                f"{r.t},{r.b},{r.train_loss!r},"
                f"{float(r.margins.min())!r},{float(r.margins.max())!r}\n"
            )
