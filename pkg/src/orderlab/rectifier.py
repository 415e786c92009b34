"""Influence triage and targeted gradient-ascent rectification.

The influence of a flagged sample is Inf = -g_v^T H^{-1} grad(sample),
where g_v is the mean gradient over clean validation pairs and H the
Hessian of the training objective at the compromised parameters. One
inverse-Hessian-vector product on g_v (LiSSA recursion over
finite-difference Hessian-vector products) serves every sample via the
symmetry of H. Samples with positive influence are harmful: ascent on
their summed gradients, alternated with small descent steps on clean
data, produces the rectified checkpoint.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, EmptyCleanSet, InvalidArgument, NumericalFailure
from .numkit import SeededRng
from .params import ParamVector, clip_to_norm
from .seqrec import SeqRecModel

log = logging.getLogger(__name__)


@dataclass
class InfluenceConfig:
    lissa_depth: int = 100
    damping: float = 0.01
    scale: float | None = None  # None: 1.5x a power-iteration top-eigenvalue estimate
    scale_power_iters: int = 20
    scale_margin: float = 1.5
    repeats: int = 2
    fd_step: float = 1e-3
    threshold: float = 0.0
    batch_users: int | None = 128  # minibatch per LiSSA iteration; None = full batch

    def validate(self) -> None:
        if self.lissa_depth < 1 or self.repeats < 1:
            raise InvalidArgument("lissa_depth and repeats must be >= 1")
        if self.damping < 0.0 or self.fd_step <= 0.0:
            raise InvalidArgument("damping must be >= 0 and fd_step > 0")


@dataclass
class RectifyConfig:
    ascent_rate: float = 1e-4
    descent_rate: float = 1e-5
    max_rounds: int = 5
    ascent_clip: float = 1.0
    val_drop_tol: float = 0.02
    clean_batch: int = 1024

    def validate(self) -> None:
        if self.max_rounds < 1:
            raise InvalidArgument("max_rounds must be >= 1")
        if not (0.0 <= self.descent_rate < self.ascent_rate):
            raise InvalidArgument("need descent_rate < ascent_rate")


# --- Hessian-vector machinery ----------------------------------------------

def hvp(grad_fn, x: np.ndarray, v: np.ndarray, fd_step: float = 1e-3) -> np.ndarray:
    """Central finite difference of a gradient function: H v ~ [g(x+e v) - g(x-e v)] / 2e.

    Exact (up to rounding) on quadratics. `grad_fn` maps a flat parameter
    array to the flat gradient of the dataset loss.
    """
    norm_v = float(np.linalg.norm(v))
    if norm_v == 0.0:
        raise InvalidArgument("hvp direction has zero norm")
    eps = fd_step / max(norm_v, 1e-8)
    g_plus = np.asarray(grad_fn(x + eps * v), dtype=np.float64)
    g_minus = np.asarray(grad_fn(x - eps * v), dtype=np.float64)
    if not (np.all(np.isfinite(g_plus)) and np.all(np.isfinite(g_minus))):
        raise NumericalFailure("non-finite gradient inside hvp")
    return (g_plus - g_minus) / (2.0 * eps)


def estimate_scale(apply_hvp, dim: int, iters: int, margin: float, rng: SeededRng) -> float:
    """margin x power-iteration estimate of the top Hessian eigenvalue magnitude."""
    v = rng.gen.standard_normal(dim)
    v /= np.linalg.norm(v)
    lam = 1.0
    for _ in range(iters):
        w = apply_hvp(v)
        lam = float(np.linalg.norm(w))
        if lam <= 1e-300:
            return margin  # numerically zero curvature; any positive scale works
        v = w / lam
    return margin * lam


def lissa_solve(apply_hvp, v: np.ndarray, depth: int, damping: float, scale: float):
    """Core LiSSA recursion.

    h_0 = v;  h_j = v + h_{j-1} - (H h_{j-1} + damping * h_{j-1}) / scale;
    the returned estimate is h_depth / scale, whose fixed point solves
    (H + damping I) h = v. `apply_hvp(h, j)` may be stochastic in j.
    """
    norm_v = float(np.linalg.norm(v))
    if norm_v == 0.0:
        return np.zeros_like(v)
    h = v.copy()
    for j in range(1, depth + 1):
        hv = apply_hvp(h, j)
        h = v + h - (hv + damping * h) / scale
        if float(np.linalg.norm(h)) > 1e6 * norm_v:
            raise DivergenceError(
                f"LiSSA diverged at iteration {j} with scale {scale!r}; increase the scale"
            )
    return h / scale


@dataclass
class IhvpResult:
    estimate: np.ndarray
    scale: float
    residual: float
    per_repeat_norms: list[float] = field(default_factory=list)


def lissa_ihvp(
    model: SeqRecModel,
    params: ParamVector,
    sequences,
    v: np.ndarray,
    cfg: InfluenceConfig,
    rng: SeededRng,
) -> IhvpResult:
    """Approximate H^{-1} v for the training loss of `model` on `sequences`.

    Repeats run over independent minibatch orderings and are averaged; the
    residual ||(H + damping I) est - v|| / ||v|| is evaluated with one
    full-batch Hessian-vector product and logged for diagnostics.
    """
    cfg.validate()
    seqs = [np.asarray(s, dtype=np.int64) for s in sequences if len(s) >= 2]
    if not seqs:
        raise InvalidArgument("no sequences to form the training Hessian")
    n = len(seqs)
    batch = n if cfg.batch_users is None else min(cfg.batch_users, n)

    def grad_on(idx, x_flat):
        pv = ParamVector(model.registry, x_flat)
        chosen = [seqs[i] for i in idx]
        weights = [np.full(len(s) - 1, 1.0 / (len(s) - 1) / len(chosen)) for s in chosen]
        return model.weighted_gradient(pv, chosen, weights)[1].flat

    full_idx = np.arange(n)

    def full_grad(x_flat):
        return model.dataset_loss(ParamVector(model.registry, x_flat), seqs)[1].flat

    def full_hvp(h):
        return hvp(full_grad, params.flat, h, cfg.fd_step)

    scale = cfg.scale
    if scale is None:
        scale_rng = rng.child("scale")
        if batch < n:
            idx = np.sort(scale_rng.gen.choice(n, size=batch, replace=False))
            scale_op = lambda h: hvp(lambda x: grad_on(idx, x), params.flat, h, cfg.fd_step)
        else:
            scale_op = full_hvp
        scale = estimate_scale(
            scale_op, params.size, cfg.scale_power_iters, cfg.scale_margin, scale_rng
        )

    estimates = []
    norms = []
    for r in range(cfg.repeats):
        rep_rng = rng.child(f"repeat-{r}")

        def apply(h, j):
            if batch < n:
                idx = np.sort(rep_rng.gen.choice(n, size=batch, replace=False))
            else:
                idx = full_idx
            return hvp(lambda x: grad_on(idx, x), params.flat, h, cfg.fd_step)

        est = lissa_solve(apply, np.asarray(v, dtype=np.float64), cfg.lissa_depth, cfg.damping, scale)
        estimates.append(est)
        norms.append(float(np.linalg.norm(est)))
    estimate = np.mean(estimates, axis=0)
    if float(np.linalg.norm(v)) > 0.0:
        residual = float(
            np.linalg.norm(full_hvp(estimate) + cfg.damping * estimate - v)
            / np.linalg.norm(v)
        )
    else:
        residual = 0.0
    log.info("lissa: scale=%.4g residual=%.4g", scale, residual)
    return IhvpResult(estimate, float(scale), residual, norms)


# --- influence -----------------------------------------------------------

def validation_gradient(model: SeqRecModel, params: ParamVector, pairs) -> np.ndarray:
    """Mean sample-term gradient over (prefix, target) validation pairs."""
    pairs = list(pairs)
    if not pairs:
        raise EmptyCleanSet("no clean validation pairs")
    seqs = [np.append(np.asarray(p, dtype=np.int64), np.int64(t)) for p, t in pairs]
    weights = [np.concatenate([np.zeros(len(s) - 2), [1.0 / len(pairs)]]) for s in seqs]
    return model.weighted_gradient(params, seqs, weights)[1].flat


def influence_values(
    model: SeqRecModel,
    params: ParamVector,
    sequences,
    ihvp_of_validation: np.ndarray,
    samples,
) -> np.ndarray:
    """Inf(sample) = -(H^{-1} g_v) . grad(sample term) for each (user, position)."""
    out = np.empty(len(samples))
    for i, (user, pos) in enumerate(samples):
        seq = sequences[user]
        if not (1 <= pos < len(seq)):
            raise InvalidArgument(f"sample position {pos} needs a non-empty prefix")
        _, grad = model.sample_term_loss(params, seq[:pos], int(seq[pos]))
        out[i] = -float(ihvp_of_validation @ grad.flat)
    return out


@dataclass
class InfluenceReport:
    samples: list[tuple[int, int]]
    values: np.ndarray
    threshold: float
    scale: float
    residual: float
    validation_grad_norm: float

    @property
    def harmful(self) -> list[tuple[int, int]]:
        return [s for s, v in zip(self.samples, self.values) if v > self.threshold]

    def harmful_mask(self) -> np.ndarray:
        return self.values > self.threshold


def filter_harmful(report: InfluenceReport, threshold: float | None = None):
    tau = report.threshold if threshold is None else threshold
    return [s for s, v in zip(report.samples, report.values) if v > tau]


def influence_report(
    model: SeqRecModel,
    params: ParamVector,
    sequences,
    suspicious,
    validation_pairs,
    cfg: InfluenceConfig,
    rng: SeededRng,
) -> InfluenceReport:
    """Score every suspicious (user, position) sample against clean validation."""
    g_v = validation_gradient(model, params, validation_pairs)
    ihvp_res = lissa_ihvp(model, params, sequences, g_v, cfg, rng)
    values = influence_values(model, params, sequences, ihvp_res.estimate, suspicious)
    return InfluenceReport(
        [(int(u), int(p)) for u, p in suspicious],
        values,
        cfg.threshold,
        ihvp_res.scale,
        ihvp_res.residual,
        float(np.linalg.norm(g_v)),
    )


# --- rectification ---------------------------------------------------------

def term_sum_gradient(
    model: SeqRecModel, params: ParamVector, sequences, samples, weight_each: float
) -> np.ndarray:
    """Gradient of weight_each * sum of the samples' term losses (batched by user)."""
    by_user: dict[int, list[int]] = {}
    for user, pos in samples:
        by_user.setdefault(int(user), []).append(int(pos))
    users = sorted(by_user)
    seqs = [sequences[u] for u in users]
    weights = []
    for u, s in zip(users, seqs):
        w = np.zeros(len(s) - 1)
        for pos in by_user[u]:
            w[pos - 1] += weight_each
        weights.append(w)
    return model.weighted_gradient(params, seqs, weights)[1].flat


@dataclass
class RectifyTrace:
    rounds: list[dict] = field(default_factory=list)
    initial_value: float = 0.0
    best_round: int = 0
    stopped_early: bool = False


def rectify(
    model: SeqRecModel,
    params: ParamVector,
    sequences,
    harmful,
    clean_pool,
    eval_fn,
    cfg: RectifyConfig,
    rng: SeededRng,
) -> tuple[ParamVector, RectifyTrace]:
    """Alternate targeted ascent on harmful samples with clean-set descent.

    Per round: ascent step eta1 * sum of harmful term gradients (step
    norm-capped at ascent_clip), then descent eta2 * mean gradient over a
    seeded clean-sample batch; validation performance is evaluated every
    round and the best checkpoint (including the input) is returned.
    Stops early when validation drops more than val_drop_tol relative.
    """
    cfg.validate()
    trace = RectifyTrace()
    current = params.copy()
    base_value = float(eval_fn(current))
    trace.initial_value = base_value
    best_value = base_value
    best_params = current.copy()
    if not harmful:
        log.info("rectify: empty harmful set, returning input parameters")
        return best_params, trace
    clean_pool = list(clean_pool)
    for round_idx in range(1, cfg.max_rounds + 1):
        ascent = term_sum_gradient(model, current, sequences, harmful, 1.0)
        step = clip_to_norm(cfg.ascent_rate * ascent, cfg.ascent_clip)
        current.flat += step
        if clean_pool and cfg.descent_rate > 0.0:
            round_rng = rng.child(f"round-{round_idx}")
            k = min(cfg.clean_batch, len(clean_pool))
            pick = round_rng.gen.choice(len(clean_pool), size=k, replace=False)
            batch = [clean_pool[i] for i in pick]
            descent = term_sum_gradient(model, current, sequences, batch, 1.0 / k)
            current.flat -= cfg.descent_rate * descent
        if not np.all(np.isfinite(current.flat)):
            raise NumericalFailure(f"non-finite parameters after round {round_idx}")
        value = float(eval_fn(current))
        trace.rounds.append(
            {
                "round": round_idx,
                "ascent_step_norm": float(np.linalg.norm(step)),
                "validation_value": value,
            }
        )
        if value > best_value:
            best_value = value
            best_params = current.copy()
            trace.best_round = round_idx
        if value < (1.0 - cfg.val_drop_tol) * base_value:
            trace.stopped_early = True
            log.info("rectify: early stop at round %d (validation fell to %.4f)", round_idx, value)
            break
    return best_params, trace
