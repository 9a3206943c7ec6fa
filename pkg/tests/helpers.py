"""Shared test utilities: independent oracles and small instance builders."""

import numpy as np

from samdyn.data import DataParams, Dataset, Sample, gen_dataset, make_signal


def fd_gradient(w, patches, y, h=1e-6):
    """Central finite differences of the mean logistic loss over every
    weight coordinate, vectorized over a stack of perturbed weights.  This
    is the independent oracle for the analytic gradient; it reimplements
    the forward pass and never calls batch_gradient."""
    flat = w.ravel()
    k = flat.size
    eye = np.eye(k)
    m = w.shape[1]

    def stack_losses(stack):
        pre = np.einsum("kjmd,bpd->kbjmp", stack, patches)
        fj = np.maximum(pre, 0.0).sum(axis=(3, 4)) / m  # (k, B, 2)
        z = y[None, :] * (fj[:, :, 0] - fj[:, :, 1])
        return (np.log1p(np.exp(-np.abs(z))) + np.maximum(-z, 0.0)).mean(axis=1)

    plus = stack_losses((flat[None, :] + h * eye).reshape(k, *w.shape))
    minus = stack_losses((flat[None, :] - h * eye).reshape(k, *w.shape))
    return ((plus - minus) / (2 * h)).reshape(w.shape)


def min_kink_distance(w, patches):
    """Smallest |<w_{j,r}, x^(p)>| over the batch; used to reject
    configurations too close to a ReLU kink for finite differencing."""
    pre = np.einsum("jmd,bpd->bjmp", w, patches)
    return float(np.min(np.abs(pre)))


def random_instance(rng, d=None, m=None, P=None, B=None, mu_norm=None, p=0.0):
    """A random small (weights, patches, y) triple plus its dataset."""
    d = d or int(rng.integers(3, 65))
    m = m or int(rng.integers(1, 9))
    P = P or int(rng.integers(2, 5))
    B = B or int(rng.integers(1, 17))
    mu_norm = mu_norm if mu_norm is not None else float(rng.uniform(0.5, 3.0))
    params = DataParams(d=d, P=P, sigma_p=1.0, p=p, mu_norm=mu_norm)
    ds = gen_dataset(params, make_signal(d, mu_norm), B, seed=int(rng.integers(2**31)))
    patches = np.stack([s.patches for s in ds.samples])
    y = np.array([s.y for s in ds.samples], dtype=float)
    w = rng.normal(0.0, 0.3, size=(2, m, d))
    return w, patches, y, ds


def manual_sample(mu, xi, y, y_hat, signal_pos, P):
    """Build a Sample by hand for closed-form checks."""
    patches = np.tile(np.asarray(xi, dtype=float), (P, 1))
    patches[signal_pos] = y_hat * np.asarray(mu, dtype=float)
    return Sample(patches=patches, y=y, y_hat=y_hat, xi=np.asarray(xi, dtype=float),
                  signal_pos=signal_pos)


def dataset_from_samples(samples, mu, params):
    return Dataset(samples=list(samples), mu=np.asarray(mu, dtype=float),
                   params=params, seed=None)
