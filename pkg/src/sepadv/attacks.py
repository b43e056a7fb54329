"""Gradient-based adversarial attacks against separation models.

All attacks push the separated output of the target source away from the
model's own clean separation ``f(x)``, which is computed once and treated as
a constant. No ground-truth source is ever needed.

``gd``
    Fixed-step gradient descent on ``L(eta) = -||f(x+eta) - f(x)||^2 + lam * C(eta)``.
    By default the penalty is applied through its proximal operator
    (soft-thresholding); ``penalty_step="subgradient"`` uses plain subgradient
    steps instead.
``fgsm``
    One signed gradient step of size ``epsilon`` on the squared error.
``pgd``
    ``iterations`` signed steps of size ``step``, each followed by a clamp
    back into the sup-norm ball of radius ``epsilon`` around ``x``.

``C`` is one of the l2 norm, the sup norm or the short-term power ratio
(STPR): the l1 norm of the patch-wise l2 norms of ``eta`` divided by those of
``x``. STPR lets the perturbation grow where the input is loud and keeps it
out of quiet passages.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import dsp, models, rng
from .audio_io import AudioClip
from .errors import ConfigError, NumericError, ParameterError

METHODS = ("gd", "fgsm", "pgd")
CONSTRAINTS = ("l2", "sup", "stpr")
DOMAINS = ("time", "frequency")

STPR_REFERENCE_PATCH = 2048
STPR_REFERENCE_RATE = 44100


@dataclass(frozen=True)
class ConstraintKind:
    kind: str = "l2"
    stpr_patch_len: int = None
    floor: float = 1e-6

    def __post_init__(self):
        if self.kind not in CONSTRAINTS:
            raise ConfigError(f"unknown constraint {self.kind!r}; expected one of {CONSTRAINTS}")
        if self.stpr_patch_len is not None and self.stpr_patch_len < 1:
            raise ConfigError("stpr_patch_len must be >= 1")
        if not self.floor > 0:
            raise ConfigError("floor must be positive")

    def patch_length(self, sample_rate):
        """Patch length in samples; defaults to ~46 ms at any rate."""
        if self.stpr_patch_len is not None:
            return int(self.stpr_patch_len)
        return max(1, int(round(STPR_REFERENCE_PATCH * sample_rate / STPR_REFERENCE_RATE)))

    def to_dict(self):
        return {"kind": self.kind, "stpr_patch_len": self.stpr_patch_len, "floor": self.floor}


def _patch_sums(values, length):
    """Sum a (C, N) array over channels and ``length``-sample patches."""
    num = values.shape[-1]
    patches = -(-num // length)
    padded = np.zeros((values.shape[0], patches * length))
    padded[:, :num] = values
    return padded.reshape(values.shape[0], patches, length).sum(axis=(0, 2))


def _constraint(eta, x, c, sample_rate, with_grad):
    if c.kind == "l2":
        norm = float(np.sqrt(np.sum(eta ** 2)))
        grad = eta / norm if norm > 0 else np.zeros_like(eta)
    elif c.kind == "sup":
        flat = np.abs(eta).ravel()
        idx = int(np.argmax(flat))
        norm = float(flat[idx])
        grad = np.zeros(eta.size)
        grad[idx] = np.sign(eta.ravel()[idx])
        grad = grad.reshape(eta.shape)
    else:
        length = c.patch_length(sample_rate)
        eta_norms = np.sqrt(_patch_sums(eta ** 2, length))
        ref = np.maximum(np.sqrt(_patch_sums(x ** 2, length)), c.floor)
        norm = float(np.sum(eta_norms / ref))
        if not with_grad:
            return norm, None
        scale = np.where(eta_norms > 0, 1.0 / (np.where(eta_norms > 0, eta_norms, 1.0) * ref), 0.0)
        per_sample = np.repeat(scale, length)[: eta.shape[-1]]
        grad = eta * per_sample[None, :]
    return norm, grad


def constraint_value(eta, x, c):
    """Size of ``eta`` under constraint ``c`` (``x`` is only used by STPR)."""
    if eta.shape != x.shape:
        raise ParameterError(f"shape mismatch: {eta.shape} vs {x.shape}")
    value, _ = _constraint(eta.samples, x.samples, c, x.sample_rate, with_grad=False)
    return value


def constraint_gradient(eta, x, c):
    """(Sub)gradient of :func:`constraint_value` with respect to ``eta``."""
    _, grad = _constraint(eta.samples, x.samples, c, x.sample_rate, with_grad=True)
    return AudioClip(grad, x.sample_rate)


def _project_l1_ball(v, radius):
    """Euclidean projection of a flat vector onto the l1 ball."""
    if np.sum(np.abs(v)) <= radius:
        return v
    u = np.sort(np.abs(v))[::-1]
    cssv = np.cumsum(u) - radius
    k = np.nonzero(u * np.arange(1, len(u) + 1) > cssv)[0][-1]
    theta = cssv[k] / (k + 1.0)
    return np.sign(v) * np.maximum(np.abs(v) - theta, 0.0)


def penalty_prox(eta, x, c, t, sample_rate):
    """Proximal operator of ``t * C(.)`` evaluated at ``eta`` (arrays).

    l2 shrinks the whole perturbation, STPR shrinks every patch by its own
    threshold ``t / max(||x_patch||, floor)`` (so silent patches are zeroed),
    and sup uses the Moreau decomposition with the l1 ball.
    """
    if t <= 0:
        return eta
    if c.kind == "l2":
        norm = np.sqrt(np.sum(eta ** 2))
        return eta * max(0.0, 1.0 - t / norm) if norm > 0 else eta
    if c.kind == "sup":
        flat = eta.ravel()
        return (flat - t * _project_l1_ball(flat / t, 1.0)).reshape(eta.shape)
    length = c.patch_length(sample_rate)
    eta_norms = np.sqrt(_patch_sums(eta ** 2, length))
    ref = np.maximum(np.sqrt(_patch_sums(x ** 2, length)), c.floor)
    keep = np.where(eta_norms > 0, np.maximum(0.0, 1.0 - (t / ref) / np.where(eta_norms > 0, eta_norms, 1.0)), 0.0)
    return eta * np.repeat(keep, length)[: eta.shape[-1]][None, :]


def project_sup_ball(candidate, center, epsilon):
    """Clamp ``candidate`` elementwise into ``[center - eps, center + eps]``."""
    if candidate.shape != center.shape:
        raise ParameterError(f"shape mismatch: {candidate.shape} vs {center.shape}")
    if not epsilon > 0:
        raise ParameterError("epsilon must be positive")
    c = center.samples
    return AudioClip(np.clip(candidate.samples, c - epsilon, c + epsilon), center.sample_rate)


@dataclass(frozen=True)
class AttackConfig:
    method: str = "gd"
    target_source: object = 0
    epsilon: float = 0.01
    lam: float = 100.0
    iterations: int = 100
    step: float = None
    lr: float = 1e-3
    init_scale: float = 1e-4
    seed: int = 0
    domain: str = "time"
    constraint: ConstraintKind = field(default_factory=ConstraintKind)
    delta: float = None
    freq_param: str = "complex"
    gl_iters: int = 32
    stft: dsp.StftConfig = None
    penalty_step: str = "prox"

    def __post_init__(self):
        if isinstance(self.constraint, dict):
            object.__setattr__(self, "constraint", ConstraintKind(**self.constraint))
        if isinstance(self.stft, dict):
            object.__setattr__(self, "stft", dsp.StftConfig(**self.stft))
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.domain not in DOMAINS:
            raise ConfigError(f"unknown domain {self.domain!r}; expected one of {DOMAINS}")
        if self.penalty_step not in ("prox", "subgradient"):
            raise ConfigError(f"unknown penalty_step {self.penalty_step!r}")
        if self.freq_param not in ("complex", "magnitude"):
            raise ConfigError(f"unknown freq_param {self.freq_param!r}")
        if self.method != "gd" and self.domain != "time":
            raise ConfigError("frequency-domain crafting is only defined for gd")
        if self.method in ("fgsm", "pgd") and not self.epsilon > 0:
            raise ConfigError("epsilon must be positive for fgsm/pgd")
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.init_scale < 0:
            raise ConfigError("init_scale must be non-negative")
        if self.step is not None and not self.step > 0:
            raise ConfigError("step must be positive")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")

    @property
    def step_size(self):
        """PGD step; defaults to ``epsilon / sqrt(iterations)``."""
        if self.step is not None:
            return self.step
        return self.epsilon / np.sqrt(self.iterations)

    def to_dict(self):
        return {
            "method": self.method,
            "target_source": self.target_source,
            "epsilon": self.epsilon,
            "lambda": self.lam,
            "iterations": self.iterations,
            "step": self.step,
            "lr": self.lr,
            "init_scale": self.init_scale,
            "seed": self.seed,
            "domain": self.domain,
            "constraint": self.constraint.to_dict(),
            "delta": self.delta,
            "freq_param": self.freq_param,
            "gl_iters": self.gl_iters,
            "stft": self.stft.to_dict() if self.stft else None,
            "penalty_step": self.penalty_step,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown attack fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True, eq=False)
class AttackResult:
    eta: AudioClip
    adversarial: AudioClip
    loss_trace: list
    objective_trace: list
    constraint_trace: list
    config: AttackConfig
    deviation_trace: list = None
    final_objective: float = None
    final_constraint: float = None

    @property
    def iterations(self):
        return len(self.loss_trace)

    @property
    def within_delta(self):
        """Whether ``C(eta) < delta``; ``None`` when no threshold is set."""
        if self.config.delta is None:
            return None
        return self.final_constraint < self.config.delta

    def trace_rows(self):
        return [
            (i, l, o, c)
            for i, (l, o, c) in enumerate(
                zip(self.loss_trace, self.objective_trace, self.constraint_trace)
            )
        ]


# --------------------------------------------------------------------------
# Shared helpers
# --------------------------------------------------------------------------


class _Target:
    """Forward/VJP restricted to the attacked output(s), with a frozen reference."""

    def __init__(self, model, x, target_source):
        self.model = model
        if target_source == "all":
            self.index = slice(None)
        else:
            self.index = model.source_index(target_source)
        self.reference = models.forward_array(model, x.samples)[self.index].copy()

    def residual(self, samples):
        return models.forward_array(self.model, samples)[self.index] - self.reference

    def vjp(self, samples, cot):
        full = np.zeros((self.model.num_sources,) + samples.shape)
        full[self.index] = cot
        return models.vjp_array(self.model, samples, full)


def _uniform(seed, name, scale, shape):
    if scale == 0:
        return np.zeros(shape)
    return rng.stream(seed, name).uniform(-scale, scale, shape)


def _finite(value, what, iteration):
    if not np.all(np.isfinite(value)):
        raise NumericError(f"{what} became non-finite at iteration {iteration}", iteration=iteration)


def spectral_step_scale(cfg):
    """Factor making a spectral GD step move the signal like a time-domain one.

    ``istft @ istft^T`` is approximately ``2 / (n_fft * env)`` times identity,
    where ``env`` is the squared-window overlap sum.
    """
    env = np.sum(cfg.window_array() ** 2) / cfg.hop
    return cfg.n_fft * env / 2.0


def _check(model, x):
    if not isinstance(x, AudioClip):
        raise ParameterError("x must be an AudioClip")
    models._check_input(model, x)


# --------------------------------------------------------------------------
# Attacks
# --------------------------------------------------------------------------


def craft_gd(model, x, cfg):
    """Gradient-descent attack with a weighted size penalty."""
    if cfg.method != "gd":
        raise ConfigError(f"craft_gd needs method 'gd', got {cfg.method!r}")
    _check(model, x)
    target = _Target(model, x, cfg.target_source)
    xs = x.samples
    eta0 = _uniform(cfg.seed, "attack:init", cfg.init_scale, x.shape)

    identity = lambda p: p  # noqa: E731
    if cfg.domain == "time":
        to_time = to_param = from_time = identity
        param = eta0
        lr = cfg.lr
    else:
        stft_cfg = cfg.stft or model.stft_cfg or dsp.StftConfig()
        length = x.num_samples
        lr = cfg.lr * spectral_step_scale(stft_cfg)
        if cfg.freq_param == "complex":
            to_time = lambda p: dsp.istft_array(p, stft_cfg, length)  # noqa: E731
            to_param = lambda g: dsp.istft_adjoint_array(g, stft_cfg, length)  # noqa: E731
            from_time = lambda e: dsp.stft_array(e, stft_cfg)  # noqa: E731
        else:
            spec_x = dsp.stft_array(xs, stft_cfg)
            phase = np.exp(1j * np.angle(spec_x))
            to_time = lambda p: dsp.istft_array(p * phase, stft_cfg, length)  # noqa: E731
            to_param = lambda g: np.real(  # noqa: E731
                np.conj(phase) * dsp.istft_adjoint_array(g, stft_cfg, length)
            )
            from_time = lambda e: np.real(np.conj(phase) * dsp.stft_array(e, stft_cfg))  # noqa: E731
        param = from_time(eta0)

    # the magnitude parameterization cannot represent every time signal, so
    # its penalty is always applied by subgradient
    prox = cfg.penalty_step == "prox" and not (
        cfg.domain == "frequency" and cfg.freq_param == "magnitude"
    )
    loss_trace, obj_trace, con_trace = [], [], []
    for it in range(cfg.iterations):
        eta = to_time(param)
        resid = target.residual(xs + eta)
        objective = -float(np.sum(resid ** 2))
        c_val, c_grad = _constraint(eta, xs, cfg.constraint, x.sample_rate, with_grad=not prox)
        loss = objective + cfg.lam * c_val
        _finite(loss, "loss", it)
        loss_trace.append(loss)
        obj_trace.append(objective)
        con_trace.append(c_val)
        grad = target.vjp(xs + eta, -2.0 * resid)
        if prox:
            _finite(grad, "gradient", it)
            stepped = to_time(param - lr * to_param(grad))
            param = from_time(penalty_prox(stepped, xs, cfg.constraint, cfg.lr * cfg.lam,
                                           x.sample_rate))
        else:
            grad = grad + cfg.lam * c_grad
            _finite(grad, "gradient", it)
            param = param - lr * to_param(grad)

    if cfg.domain == "frequency" and cfg.freq_param == "magnitude":
        adv_mag = np.maximum(np.abs(spec_x) + param, 0.0)
        adv = dsp.griffin_lim(
            adv_mag, stft_cfg, cfg.gl_iters, seed=cfg.seed, length=length,
            init_phase=np.angle(spec_x), sample_rate=x.sample_rate,
        ).samples
        eta = adv - xs
    else:
        eta = to_time(param)
    _finite(eta, "perturbation", cfg.iterations)
    return _result(target, x, eta, cfg, loss_trace, obj_trace, con_trace)


def craft_fgsm(model, x, cfg):
    """Single signed-gradient step of size ``epsilon``."""
    if cfg.method != "fgsm":
        raise ConfigError(f"craft_fgsm needs method 'fgsm', got {cfg.method!r}")
    _check(model, x)
    target = _Target(model, x, cfg.target_source)
    xs = x.samples
    start = xs + _uniform(cfg.seed, "attack:init", cfg.init_scale, x.shape)
    resid = target.residual(start)
    mse = float(np.mean(resid ** 2))
    _finite(mse, "loss", 0)
    grad = target.vjp(start, 2.0 * resid / resid.size)
    _finite(grad, "gradient", 0)
    eta = cfg.epsilon * np.sign(grad)
    c_val = _constraint(eta, xs, cfg.constraint, x.sample_rate, with_grad=False)[0]
    return _result(target, x, eta, cfg, [-mse], [-float(np.sum(resid ** 2))], [c_val])


def craft_pgd(model, x, cfg):
    """Iterated signed steps with projection onto the sup-norm epsilon-ball."""
    if cfg.method != "pgd":
        raise ConfigError(f"craft_pgd needs method 'pgd', got {cfg.method!r}")
    _check(model, x)
    target = _Target(model, x, cfg.target_source)
    xs = x.samples
    eps = cfg.epsilon
    alpha = cfg.step_size
    adv = np.clip(xs + _uniform(cfg.seed, "attack:init", cfg.init_scale, x.shape), xs - eps, xs + eps)
    deviations = [float(np.max(np.abs(adv - xs)))]
    loss_trace, obj_trace, con_trace = [], [], []
    for it in range(cfg.iterations):
        resid = target.residual(adv)
        mse = float(np.mean(resid ** 2))
        _finite(mse, "loss", it)
        loss_trace.append(-mse)
        obj_trace.append(-float(np.sum(resid ** 2)))
        con_trace.append(_constraint(adv - xs, xs, cfg.constraint, x.sample_rate, False)[0])
        grad = target.vjp(adv, 2.0 * resid / resid.size)
        _finite(grad, "gradient", it)
        adv = np.clip(adv + alpha * np.sign(grad), xs - eps, xs + eps)
        deviations.append(float(np.max(np.abs(adv - xs))))
    return _result(target, x, adv - xs, cfg, loss_trace, obj_trace, con_trace, deviations)


def _result(target, x, eta, cfg, loss_trace, obj_trace, con_trace, deviations=None):
    eta_clip = AudioClip(eta, x.sample_rate)
    adversarial = AudioClip(x.samples + eta_clip.samples, x.sample_rate)
    final_obj = -float(np.sum(target.residual(adversarial.samples) ** 2))
    final_con = _constraint(eta_clip.samples, x.samples, cfg.constraint, x.sample_rate, False)[0]
    return AttackResult(
        eta=eta_clip, adversarial=adversarial, loss_trace=loss_trace,
        objective_trace=obj_trace, constraint_trace=con_trace, config=cfg,
        deviation_trace=deviations, final_objective=final_obj, final_constraint=final_con,
    )


_CRAFT = {"gd": craft_gd, "fgsm": craft_fgsm, "pgd": craft_pgd}


def craft(model, x, cfg):
    """Dispatch on ``cfg.method``."""
    return _CRAFT[cfg.method](model, x, cfg)


KNOBS = {"lambda": "lam", "lr": "lr", "epsilon": "epsilon"}


def default_knob(cfg):
    """Knob that continuously controls the perturbation level of ``cfg``'s method."""
    return "lr" if cfg.method == "gd" else "epsilon"


def with_strength(cfg, value, knob=None):
    """Copy of ``cfg`` with its noise-level knob set to ``value``."""
    return replace(cfg, **{KNOBS[knob or default_knob(cfg)]: value})


def strength(cfg, knob=None):
    return getattr(cfg, KNOBS[knob or default_knob(cfg)])
