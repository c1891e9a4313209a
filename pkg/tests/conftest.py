import hashlib
from pathlib import Path

import numpy as np
import pytest

from dqmil import numerics as nx


@pytest.fixture(autouse=True)
def float64_session():
    """Every test starts in 64-bit mode with an empty tape."""
    with nx.precision("float64"):
        nx.current_graph().clear()
        yield
        nx.current_graph().clear()


def numeric_grad(f, x: np.ndarray, eps=1e-6) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_error(analytic, numeric) -> float:
    """Per-tensor relative error: max |analytic - numeric| over the larger max-magnitude.

    The magnitude is floored at 1e-4 so tensors whose true gradient is zero
    (e.g. key biases, which softmax ignores) are judged against finite-difference
    noise at an absolute 1e-8.
    """
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = max(1e-4, float(np.abs(numeric).max(initial=0.0)), float(np.abs(analytic).max(initial=0.0)))
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def tree_digest(root) -> str:
    """SHA-256 over the relative paths and bytes of every file under ``root``."""
    h = hashlib.sha256()
    root = Path(root)
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def toy_config(n_sources=1, width=12, d_proj=16, M=4, d_k=8, heads=2, J=1, K=2, variant="dq-sd", tau=None):
    from dqmil.dme import SourceSpec
    from dqmil.model import DQConfig

    specs = [SourceSpec(f"s{i}", width + i, d_proj) for i in range(n_sources)]
    return DQConfig(sources=specs, num_latents=M, dim=heads * d_k, d_k=d_k, depth=J, heads=heads,
                    num_classes=K, temperature=tau, variant=variant)


def toy_bag(config, n, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.normal(size=(n, s.width)) for s in config.sources]


def jitter(model, seed, scale=0.3):
    """Move every parameter off its (near-linear) initialisation so gradient checks bite."""
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.data = (p.data + rng.normal(scale=scale, size=p.shape)).astype(p.data.dtype)


def check_model_gradients(model, loss_fn, eps=1e-6, max_coords=None, seed=0):
    """Per-tensor relative error between backward() and central differences.

    With ``max_coords`` set, larger tensors are checked on that many random
    coordinates plus one random direction spanning all of their entries.
    """
    named = list(model.named_parameters())
    model.zero_grad()
    nx.backward(loss_fn())
    analytic = {n: p.grad.copy() for n, p in named}
    rng = np.random.default_rng(seed)

    def value():
        with nx.no_grad():
            return loss_fn().item()

    def central(p, direction):
        old = p.data.copy()
        p.data[...] = old + eps * direction
        hi = value()
        p.data[...] = old - eps * direction
        lo = value()
        p.data[...] = old
        return (hi - lo) / (2 * eps)

    errors = {}
    for n, p in named:
        if max_coords is None or p.size <= max_coords:
            errors[n] = rel_error(analytic[n], numeric_grad(value, p.data, eps))
            continue
        picks = rng.choice(p.size, size=max_coords, replace=False)
        fd, an = [], []
        for flat in picks:
            e = np.zeros(p.size)
            e[flat] = 1.0
            fd.append(central(p, e.reshape(p.shape)))
            an.append(analytic[n].reshape(-1)[flat])
        u = rng.normal(size=p.shape)
        errors[n] = max(rel_error(an, fd), rel_error(float(np.sum(analytic[n] * u)), central(p, u)))
    return errors


# ---------------------------------------------------------------------------
# acceptance reporting
# ---------------------------------------------------------------------------

ACCEPTANCE_LINES = {}


def record_criterion(number, ok, detail):
    """Print one PASS/FAIL line now and again in the terminal summary; fail the test if not ok."""
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
