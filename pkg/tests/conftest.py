import numpy as np
import pytest
from scipy.special import logsumexp

from bcsi.datagen import BiasedDataset, GenConfig, generate_synthetic
from bcsi.nn import init_mlp


def make_dataset(n, d, C, seed, conflict_every=3):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % C
    bias = labels.copy()
    bias[::conflict_every] = (bias[::conflict_every] + 1) % C
    return BiasedDataset(np.arange(n), rng.normal(size=(n, d)), labels, bias, C, float(np.mean(bias != labels)))


def tiny_instance(seed, n=None, h=None, C=None):
    """Random MLP and dataset with N <= 10, h_dim <= 4, C <= 3."""
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(2, 11))
    h = h or int(rng.integers(1, 5))
    C = C or int(rng.integers(2, 4))
    d = int(rng.integers(2, 5))
    params = init_mlp([d, h, C], seed)
    return params, make_dataset(n, d, C, seed + 1)


# --- independent oracles (plain loops, no bcsi gradient code) -----------------


def oracle_hidden(params, x):
    h = np.asarray(x, dtype=float)
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        h = np.array([max(0.0, float(w[i] @ h + b[i])) for i in range(w.shape[0])])
    return h


def oracle_probs(params, x):
    h = oracle_hidden(params, x)
    z = params.weights[-1] @ h + params.biases[-1]
    return np.exp(z - logsumexp(z)), h


def oracle_grad(params, x, y):
    """CE gradient w.r.t. [vec(W) row-major, b] by explicit index loops."""
    p, h = oracle_probs(params, x)
    C, H = params.num_classes, params.hidden_dim
    g = np.zeros((H + 1) * C)
    for i in range(C):
        r = p[i] - (1.0 if i == y else 0.0)
        for a in range(H):
            g[i * H + a] = r * h[a]
        g[C * H + i] = r
    return g


def oracle_hessian(params, ds, damping):
    """Mean CE last-layer Hessian by explicit loops over parameter index pairs."""
    C, H = params.num_classes, params.hidden_dim
    P = (H + 1) * C

    def unpack(k):
        return (k // H, k % H) if k < C * H else (k - C * H, None)

    M = np.zeros((P, P))
    for x in ds.features:
        p, h = oracle_probs(params, x)
        for u in range(P):
            i, a = unpack(u)
            for v in range(P):
                j, b = unpack(v)
                curv = (p[i] if i == j else 0.0) - p[i] * p[j]
                ha = 1.0 if a is None else h[a]
                hb = 1.0 if b is None else h[b]
                M[u, v] += curv * ha * hb
    return M / len(ds) + damping * np.eye(P)


def mean_ce_of_last_layer(params, ds, theta):
    """Mean CE as a function of the flattened last-layer parameters."""
    C, H = params.num_classes, params.hidden_dim
    W = theta[: C * H].reshape(C, H)
    b = theta[C * H:]
    total = 0.0
    for x, y in zip(ds.features, ds.labels):
        z = W @ oracle_hidden(params, x) + b
        total += logsumexp(z) - z[y]
    return total / len(ds)


def last_layer_theta(params):
    return np.concatenate([params.weights[-1].ravel(), params.biases[-1]])


@pytest.fixture(scope="session")
def toy_train():
    return generate_synthetic(GenConfig(r=0.05, seed=3))


# --- acceptance verdicts ------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
