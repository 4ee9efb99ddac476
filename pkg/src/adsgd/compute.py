"""Local objectives, stochastic gradient oracles, stragglers and stale local updates."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy import optimize

TASK_KINDS = ("quadratic", "logistic", "tiny-mlp")
NOISE_KINDS = ("gaussian", "sphere")
STRAGGLER_MODES = ("bernoulli", "timing-derived")


class ProtocolError(RuntimeError):
    """A device tried to apply a gradient it does not have."""


def _log1pexp(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class LossTask:
    """Per-device objectives ``f_i`` and the network objective ``f = mean_i f_i``."""

    kind = "abstract"
    has_test_set = False

    def __init__(self, m: int, dimension: int, smoothness: float):
        self.m = m
        self.dimension = dimension
        self.smoothness = float(smoothness)
        self._optimum: tuple[np.ndarray, float] | None = None

    def local_loss(self, i: int, theta) -> float:
        raise NotImplementedError

    def local_grad(self, i: int, theta) -> np.ndarray:
        raise NotImplementedError

    def loss(self, theta) -> float:
        return float(np.mean([self.local_loss(i, theta) for i in range(self.m)]))

    def grad(self, theta) -> np.ndarray:
        return np.mean([self.local_grad(i, theta) for i in range(self.m)], axis=0)

    def local_grads(self, thetas: np.ndarray) -> np.ndarray:
        """Row ``i`` is ``grad f_i(thetas[i])``."""
        return np.stack([self.local_grad(i, thetas[i]) for i in range(self.m)])

    def optimum(self) -> tuple[np.ndarray, float] | None:
        return None

    @property
    def f_star(self) -> float | None:
        opt = self.optimum()
        return None if opt is None else opt[1]

    def accuracy(self, thetas: np.ndarray) -> float | None:
        return None

    def _check(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape[-1] != self.dimension:
            raise ValueError(f"expected dimension {self.dimension}, got {theta.shape[-1]}")
        return theta


class QuadraticTask(LossTask):
    """``f_i(x) = x^T A_i x / 2 - b_i^T x`` with PSD ``A_i``."""

    kind = "quadratic"

    def __init__(self, A: np.ndarray, b: np.ndarray):
        A = np.asarray(A, dtype=float)
        b = np.asarray(b, dtype=float)
        m, d, _ = A.shape
        eig = np.linalg.eigvalsh(A)
        if eig.min() < -1e-10:
            raise ValueError("quadratic curvature matrices must be positive semidefinite")
        super().__init__(m, d, float(eig.max()))
        self.A = A
        self.b = b

    def local_loss(self, i, theta):
        theta = self._check(theta)
        return float(0.5 * theta @ self.A[i] @ theta - self.b[i] @ theta)

    def local_grad(self, i, theta):
        theta = self._check(theta)
        return self.A[i] @ theta - self.b[i]

    def loss(self, theta):
        theta = self._check(theta)
        return float(0.5 * theta @ self.A.mean(0) @ theta - self.b.mean(0) @ theta)

    def grad(self, theta):
        theta = self._check(theta)
        return self.A.mean(0) @ theta - self.b.mean(0)

    def local_grads(self, thetas):
        return np.einsum("ijk,ik->ij", self.A, thetas) - self.b

    def optimum(self):
        if self._optimum is None:
            a_bar, b_bar = self.A.mean(0), self.b.mean(0)
            theta = np.linalg.lstsq(a_bar, b_bar, rcond=None)[0]
            self._optimum = (theta, self.loss(theta))
        return self._optimum


def make_quadratic_task(
    m: int, dimension: int, seed=0, curvature=(0.1, 1.0), heterogeneity: float = 1.0
) -> QuadraticTask:
    """Random heterogeneous quadratics with eigenvalues in ``curvature``."""
    rng = np.random.default_rng(seed)
    lo, hi = curvature
    A = np.empty((m, dimension, dimension))
    for i in range(m):
        q, _ = np.linalg.qr(rng.standard_normal((dimension, dimension)))
        lam = rng.uniform(lo, hi, dimension)
        A[i] = (q * lam) @ q.T
        A[i] = 0.5 * (A[i] + A[i].T)
    b = heterogeneity * rng.standard_normal((m, dimension))
    return QuadraticTask(A, b)


class _DataTask(LossTask):
    has_test_set = True

    def __init__(self, features, labels, test_features, test_labels, dimension, smoothness, l2):
        super().__init__(len(features), dimension, smoothness)
        self.features = [np.asarray(x, dtype=float) for x in features]
        self.labels = [np.asarray(y, dtype=float) for y in labels]
        self.test_features = np.asarray(test_features, dtype=float)
        self.test_labels = np.asarray(test_labels, dtype=float)
        self.l2 = float(l2)

    def sample_count(self, i: int) -> int:
        return len(self.labels[i])

    def batch_grads(self, i: int, theta, idx: np.ndarray) -> np.ndarray:
        """Minibatch gradients for index array ``idx`` of shape ``(n, B)``; returns ``(n, d)``."""
        raise NotImplementedError

    def local_grad(self, i, theta):
        theta = self._check(theta)
        idx = np.arange(self.sample_count(i))[None, :]
        return self.batch_grads(i, theta, idx)[0]

    def optimum(self):
        if self._optimum is None:
            res = optimize.minimize(
                self.loss, np.zeros(self.dimension), jac=self.grad, method="L-BFGS-B",
                options={"gtol": 1e-10, "ftol": 1e-14, "maxiter": 5000},
            )
            self._optimum = (res.x, float(res.fun))
        return self._optimum


class LogisticTask(_DataTask):
    """L2-regularised logistic regression with labels in {-1, +1}."""

    kind = "logistic"

    def __init__(self, features, labels, test_features, test_labels, l2=1e-3):
        d = np.asarray(features[0]).shape[1]
        smooth = max(np.linalg.norm(x, 2) ** 2 / (4 * len(x)) for x in features) + l2
        super().__init__(features, labels, test_features, test_labels, d, smooth, l2)

    def local_loss(self, i, theta):
        theta = self._check(theta)
        z = self.labels[i] * (self.features[i] @ theta)
        return float(np.mean(_log1pexp(-z)) + 0.5 * self.l2 * theta @ theta)

    def batch_grads(self, i, theta, idx):
        x = self.features[i][idx]  # (n, B, d)
        y = self.labels[i][idx]
        z = y * (x @ theta)
        coef = -y * _sigmoid(-z)
        return np.einsum("nb,nbd->nd", coef, x) / idx.shape[1] + self.l2 * theta

    def accuracy(self, thetas):
        thetas = np.atleast_2d(thetas)
        pred = np.sign(self.test_features @ thetas.T)
        pred[pred == 0] = 1.0
        return float(np.mean(pred == self.test_labels[:, None]))


class TinyMLPTask(_DataTask):
    """One tanh hidden layer, logistic output. Parameters ``[W1 (h x p), w2 (h), b2]``."""

    kind = "tiny-mlp"

    def __init__(self, features, labels, test_features, test_labels, hidden=8, l2=1e-3, smoothness=None):
        p = np.asarray(features[0]).shape[1]
        self.hidden = hidden
        self.n_inputs = p
        d = hidden * p + hidden + 1
        super().__init__(features, labels, test_features, test_labels, d, 1.0, l2)
        self.smoothness = float(smoothness) if smoothness else self._estimate_smoothness()

    def _unpack(self, theta):
        h, p = self.hidden, self.n_inputs
        return theta[: h * p].reshape(h, p), theta[h * p : h * p + h], theta[-1]

    def _outputs(self, theta, x):
        w1, w2, b2 = self._unpack(theta)
        a = np.tanh(x @ w1.T)
        return a @ w2 + b2, a

    def local_loss(self, i, theta):
        theta = self._check(theta)
        out, _ = self._outputs(theta, self.features[i])
        return float(np.mean(_log1pexp(-self.labels[i] * out)) + 0.5 * self.l2 * theta @ theta)

    def batch_grads(self, i, theta, idx):
        w1, w2, _ = self._unpack(theta)
        x = self.features[i][idx]  # (n, B, p)
        y = self.labels[i][idx]
        out, a = self._outputs(theta, x)
        s = -y * _sigmoid(-y * out) / idx.shape[1]  # dloss/dout, batch-mean folded in
        g_w2 = np.einsum("nb,nbh->nh", s, a)
        g_b2 = s.sum(axis=1, keepdims=True)
        back = s[..., None] * (1.0 - a**2) * w2  # (n, B, h)
        g_w1 = np.einsum("nbh,nbp->nhp", back, x).reshape(len(idx), -1)
        return np.concatenate([g_w1, g_w2, g_b2], axis=1) + self.l2 * theta

    def optimum(self):
        return None  # nonconvex

    def accuracy(self, thetas):
        thetas = np.atleast_2d(thetas)
        accs = []
        for th in thetas:
            out, _ = self._outputs(th, self.test_features)
            accs.append(np.mean(np.where(out >= 0, 1.0, -1.0) == self.test_labels))
        return float(np.mean(accs))

    def _estimate_smoothness(self, iters: int = 25, seed: int = 0) -> float:
        # power iteration on finite-difference Hessian-vector products, doubled for slack
        rng = np.random.default_rng(seed)
        eps = 1e-5
        best = self.l2
        for i in range(self.m):
            theta = 0.5 * rng.standard_normal(self.dimension)
            v = rng.standard_normal(self.dimension)
            v /= np.linalg.norm(v)
            for _ in range(iters):
                hv = (self.local_grad(i, theta + eps * v) - self.local_grad(i, theta - eps * v)) / (2 * eps)
                lam = float(np.linalg.norm(hv))
                if lam == 0.0:
                    break
                v = hv / lam
            best = max(best, lam)
        return 2.0 * best


def make_classification_data(
    m: int,
    n_per_device: int,
    n_features: int,
    seed=0,
    separation: float = 1.0,
    label_skew: float = 0.8,
    test_size: int = 500,
    anisotropy: float = 1.0,
):
    """Two-class Gaussian mixture split non-IID across devices.

    Device ``i`` draws class ``+1`` with probability spread linearly over
    ``0.5 +/- label_skew / 2``. Per-feature noise scales are log-spaced from
    ``anisotropy`` down to ``1 / anisotropy``; for ``anisotropy > 1`` the class-mean
    direction is a poor classifier and training is ill-conditioned. A constant
    feature is appended as bias.
    """
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(n_features)
    mean = separation * direction / np.linalg.norm(direction)
    scales = np.logspace(math.log10(anisotropy), -math.log10(anisotropy), n_features)
    priors = np.linspace(0.5 - label_skew / 2, 0.5 + label_skew / 2, m) if m > 1 else np.array([0.5])

    def draw(n, prior):
        y = np.where(rng.random(n) < prior, 1.0, -1.0)
        x = scales * rng.standard_normal((n, n_features)) + y[:, None] * mean
        return np.hstack([x, np.ones((n, 1))]), y

    feats, labs = zip(*(draw(n_per_device, pr) for pr in priors))
    xt, yt = draw(test_size, 0.5)
    return list(feats), list(labs), xt, yt


def make_task(kind: str, m: int, dimension: int, seed=0, **kw) -> LossTask:
    """Build a synthetic task. ``dimension`` is the model size for quadratic/logistic
    and the input feature count (bias included) for tiny-mlp."""
    if kind == "quadratic":
        return make_quadratic_task(m, dimension, seed, kw.get("curvature", (0.1, 1.0)), kw.get("heterogeneity", 1.0))
    if kind not in TASK_KINDS:
        raise ValueError(f"unknown task kind {kind!r}")
    feats, labs, xt, yt = make_classification_data(
        m, kw.get("samples_per_device", 200), dimension - 1, seed,
        kw.get("separation", 1.0), kw.get("label_skew", 0.8), kw.get("test_size", 500),
        kw.get("anisotropy", 1.0),
    )
    if kind == "logistic":
        return LogisticTask(feats, labs, xt, yt, l2=kw.get("l2", 1e-3))
    return TinyMLPTask(feats, labs, xt, yt, hidden=kw.get("hidden", 8), l2=kw.get("l2", 1e-3), smoothness=kw.get("smoothness"))


@dataclass(frozen=True)
class GradientOracle:
    """Stochastic first-order oracle.

    ``batch_size=None`` means full batch. ``noise_std`` adds zero-mean noise of
    per-coordinate standard deviation ``noise_std``: Gaussian, or uniform on the
    sphere of radius ``noise_std * sqrt(d)`` (``noise_kind="sphere"``) so that the
    squared deviation equals ``sigma^2 = noise_std^2 d`` on every draw.
    """

    task: LossTask
    batch_size: int | None = None
    clip: float | None = None
    noise_std: float = 0.0
    noise_kind: str = "gaussian"

    def __post_init__(self) -> None:
        if self.noise_kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise_kind {self.noise_kind!r}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.clip is not None and self.clip <= 0:
            raise ValueError("clip bound must be positive")

    @property
    def sigma2(self) -> float:
        """Configured additive-noise variance ``E||noise||^2`` (minibatch noise excluded)."""
        return self.noise_std**2 * self.task.dimension


def _additive_noise(oracle: GradientOracle, rng, n: int, d: int) -> np.ndarray:
    z = rng.standard_normal((n, d))
    if oracle.noise_kind == "sphere":
        z *= math.sqrt(d) / np.linalg.norm(z, axis=1, keepdims=True)
    return oracle.noise_std * z


def gradient_samples(oracle: GradientOracle, device: int, theta, n: int, seed) -> np.ndarray:
    """``n`` independent oracle outputs at ``theta`` as an ``(n, d)`` array."""
    task = oracle.task
    theta = task._check(theta)
    rng = np.random.default_rng(seed)
    if isinstance(task, _DataTask) and oracle.batch_size is not None and oracle.batch_size < task.sample_count(device):
        n_i = task.sample_count(device)
        idx = np.stack([rng.choice(n_i, oracle.batch_size, replace=False) for _ in range(n)]) if n < 64 else \
            np.argsort(rng.random((n, n_i)), axis=1)[:, : oracle.batch_size]
        g = task.batch_grads(device, theta, idx)
    else:
        g = np.broadcast_to(task.local_grad(device, theta), (n, task.dimension)).copy()
    if oracle.noise_std > 0:
        g += _additive_noise(oracle, rng, n, task.dimension)
    if oracle.clip is not None:
        norms = np.linalg.norm(g, axis=1, keepdims=True)
        g *= np.minimum(1.0, oracle.clip / np.maximum(norms, 1e-300))
    return g


def gradient(oracle: GradientOracle, device: int, theta, seed) -> np.ndarray:
    return gradient_samples(oracle, device, theta, 1, seed)[0]


def measure_oracle_constants(oracle: GradientOracle, probe_points, num_samples: int, seed) -> tuple[float, float]:
    """Empirical ``(sigma^2, G^2)``: the largest mean squared noise and mean squared
    gradient norm over devices and probe points.

    A probe point is either a ``d``-vector used for every device or an ``(m, d)``
    array holding one point per device.
    """
    probes = list(probe_points)
    if not probes:
        raise ValueError("need at least one probe point")
    rng = np.random.default_rng(seed)
    task = oracle.task
    sigma2 = g2 = 0.0
    for point in probes:
        point = np.asarray(point, dtype=float)
        for i in range(task.m):
            theta = point if point.ndim == 1 else point[i]
            g = gradient_samples(oracle, i, theta, num_samples, rng)
            exact = task.local_grad(i, theta)
            sigma2 = max(sigma2, float(np.mean(np.sum((g - exact) ** 2, axis=1))))
            g2 = max(g2, float(np.mean(np.sum(g**2, axis=1))))
    return sigma2, g2


@dataclass(frozen=True)
class StragglerModel:
    rho: tuple[float, ...]
    t_min: float = 0.25
    mu: float = 1.0
    mode: str = "bernoulli"

    def __post_init__(self) -> None:
        if self.mode not in STRAGGLER_MODES:
            raise ValueError(f"unknown straggler mode {self.mode!r}")
        rho = tuple(float(r) for r in self.rho)
        if any(not 0.0 <= r < 1.0 for r in rho):
            raise ValueError(f"straggle probabilities must lie in [0, 1), got {rho}")
        if self.mu <= 0 or self.t_min < 0:
            raise ValueError("timing model needs mu > 0 and t_min >= 0")
        object.__setattr__(self, "rho", rho)

    @property
    def mean_compute_time(self) -> float:
        return self.t_min + 1.0 / self.mu


def sample_compute_time(model: StragglerModel, rng) -> float:
    return model.t_min + float(rng.exponential(1.0 / model.mu))


def sample_straggle(model: StragglerModel, device: int, iteration: int, seed, barrier: float = math.inf) -> tuple[bool, float]:
    """Draw ``(is_straggler, compute_time)`` for one device and round.

    With an int seed the draw is keyed on ``(seed, device, iteration)``; a
    ``Generator`` is consumed in place.
    """
    if isinstance(seed, np.random.Generator):
        rng = seed
    else:
        rng = np.random.default_rng([int(seed), int(device), int(iteration)])
    t = sample_compute_time(model, rng)
    if model.mode == "bernoulli":
        return bool(rng.random() < model.rho[device]), t
    return bool(t > barrier), t


@dataclass(frozen=True)
class PendingGradient:
    grad: np.ndarray
    issue_iteration: int
    eval_point: np.ndarray


@dataclass(frozen=True)
class DeviceState:
    theta: np.ndarray
    pending: PendingGradient | None = None
    staleness: int = 0
    completed_compute_time: float = 0.0


def launch_computation(state: DeviceState, oracle: GradientOracle, device: int, iteration: int, seed) -> DeviceState:
    """Start a gradient computation on the current model; the result is held until applied."""
    g = gradient(oracle, device, state.theta, seed)
    return replace(state, pending=PendingGradient(g, iteration, state.theta.copy()))


def local_update(
    state: DeviceState, is_straggler: bool, stale_gradient=None, eta_i: float = 0.0, iteration: int | None = None
) -> DeviceState:
    """Apply the stale-gradient step for one round.

    Stragglers keep their model and their pending gradient. Otherwise the
    gradient (``stale_gradient`` or the pending one) is applied and the pending
    slot is cleared; the caller launches a fresh computation afterwards.
    """
    if eta_i < 0:
        raise ValueError("learning rate must be nonnegative")
    pending = state.pending
    if is_straggler:
        if pending is None:
            return state
        age = iteration - pending.issue_iteration if iteration is not None else state.staleness + 1
        return replace(state, staleness=age)
    g = stale_gradient if stale_gradient is not None else (pending.grad if pending is not None else None)
    if g is None:
        raise ProtocolError("non-straggling device has no gradient to apply")
    if pending is not None and iteration is not None:
        tau = iteration - pending.issue_iteration
    else:
        tau = state.staleness
    return DeviceState(state.theta - eta_i * np.asarray(g), None, tau, state.completed_compute_time)


def equalized_learning_rates(rho: Sequence[float], L: float, T: int) -> np.ndarray:
    """Per-device rates making ``(1 - rho_i) eta_i`` equal across devices."""
    rho = np.asarray(rho, dtype=float)
    if np.any(rho >= 1) or np.any(rho < 0):
        raise ValueError(f"straggle probabilities must lie in [0, 1), got {rho}")
    if L <= 0 or T <= 0:
        raise ValueError("L and T must be positive")
    rho_min = np.min(1.0 - rho)
    return rho_min / (math.sqrt(4.0 * L * T) * (1.0 - rho))
