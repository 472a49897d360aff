"""Non-contrastive pretraining losses with analytic gradients.

Implements the similarity (mean squared distance), variance-hinge and
covariance terms, the time-margin similarity variants (hinge on squared
pair distance with a per-pair margin in [0, 1], plus a squared variant),
the cross-correlation redundancy loss, and the time-difference MSE head.

Every loss has a hand-derived gradient (``loss_gradient``) and can be
verified against central finite differences (``finite_difference_check``).
All functions are pure, operate on float64 for verification paths, and
reduce in a fixed order so repeated calls are bit-identical.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from tinc.errors import ValidationError

# Normalization stabilizer for the cross-correlation loss, separate from the
# variance-hinge epsilon.
BT_EPSILON = 1e-12

SIMILARITY_VARIANTS = ("mse", "tinc", "tinc_squared")

LOSS_IDS = (
    "invariance",
    "variance",
    "covariance",
    "tinc",
    "tinc_squared",
    "vicreg",
    "barlow_twins",
    "time_head",
)


@dataclass(frozen=True)
class LossConfig:
    """Weights and constants for the combined pretraining loss."""

    lambda_inv: float = 25.0
    mu_var: float = 5.0
    nu_cov: float = 1.0
    gamma: float = 1.0
    epsilon: float = 1e-4
    lambda_bt: float = 0.005
    similarity_variant: str = "mse"
    dv_min_days: int = 0
    dv_max_days: int = 540

    def validate(self):
        if min(self.lambda_inv, self.mu_var, self.nu_cov, self.lambda_bt) < 0:
            raise ValidationError("loss weights must be nonnegative")
        if self.gamma <= 0:
            raise ValidationError("gamma must be positive")
        if self.epsilon <= 0:
            raise ValidationError("epsilon must be positive")
        if self.similarity_variant not in SIMILARITY_VARIANTS:
            raise ValidationError(
                f"similarity_variant must be one of {SIMILARITY_VARIANTS}, "
                f"got {self.similarity_variant!r}")
        if self.dv_min_days >= self.dv_max_days:
            raise ValidationError(
                f"dv_min_days ({self.dv_min_days}) must be < dv_max_days "
                f"({self.dv_max_days})")
        return self


@dataclass(frozen=True)
class LossBreakdown:
    """Unweighted loss parts plus the weighted total.

    ``total`` recombines from the parts with the producing loss's weights:
    the three-term loss uses total = lambda*invariance + mu*variance +
    nu*covariance, the cross-correlation loss uses total = invariance
    (diagonal part) + lambda_bt*extra (off-diagonal part).
    """

    total: float
    invariance: float
    variance: float
    covariance: float
    extra: Optional[float] = None

    def to_dict(self):
        return {
            "total": self.total,
            "invariance": self.invariance,
            "variance": self.variance,
            "covariance": self.covariance,
            "extra": self.extra,
        }


def _check_embedding(z, name, min_rows=1):
    z = np.asarray(z)
    if z.ndim != 2:
        raise ValidationError(f"{name} must be a 2-d batch, got shape {z.shape}")
    if z.shape[0] < min_rows:
        raise ValidationError(
            f"batch too small for variance term: {name} has {z.shape[0]} rows, "
            f"needs >= {min_rows}")
    if not np.all(np.isfinite(z)):
        raise ValidationError(f"{name} contains non-finite values")
    return np.asarray(z, dtype=np.float64)


def _check_pair(z1, z2, min_rows=1):
    z1 = _check_embedding(z1, "z1", min_rows)
    z2 = _check_embedding(z2, "z2", min_rows)
    if z1.shape != z2.shape:
        raise ValidationError(
            f"embedding shape mismatch: z1 is {z1.shape}, z2 is {z2.shape}")
    return z1, z2


def _check_dv(dv, n):
    dv = np.asarray(dv, dtype=np.float64)
    if dv.shape != (n,):
        raise ValidationError(f"dv must have shape ({n},), got {dv.shape}")
    if not np.all(np.isfinite(dv)):
        raise ValidationError("dv contains non-finite values")
    if np.any(dv < 0.0) or np.any(dv > 1.0):
        raise ValidationError("dv values must lie in [0, 1]")
    return dv


def invariance_term(z1, z2):
    """Mean squared euclidean distance between paired embedding rows.

    Summed per row first, matching ``tinc_term``'s reduction order so the
    zero-margin case agrees bit for bit.
    """
    z1, z2 = _check_pair(z1, z2)
    diff = z1 - z2
    sq = np.sum(diff * diff, axis=1)
    return float(np.sum(sq) / z1.shape[0])


def _std_per_dim(z, epsilon):
    var = np.var(z, axis=0, ddof=1)
    return np.sqrt(var + epsilon)


def variance_term(z, gamma=1.0, epsilon=1e-4):
    """Hinge keeping each dimension's batch std (with stabilizer) above gamma."""
    z = _check_embedding(z, "z", min_rows=2)
    std = _std_per_dim(z, epsilon)
    return float(np.sum(np.maximum(0.0, gamma - std)) / z.shape[1])


def covariance_term(z):
    """Mean squared off-diagonal entry of the batch covariance matrix."""
    z = _check_embedding(z, "z", min_rows=2)
    n, d = z.shape
    zc = z - z.mean(axis=0)
    cov = (zc.T @ zc) / (n - 1)
    off = cov - np.diag(np.diag(cov))
    return float(np.sum(off * off) / d)


def tinc_term(z1, z2, dv):
    """Hinge on squared pair distance with per-pair margin dv in [0, 1].

    Reduces to ``invariance_term`` when every margin is zero; widening any
    margin can only lower the value.
    """
    z1, z2 = _check_pair(z1, z2)
    dv = _check_dv(dv, z1.shape[0])
    diff = z1 - z2
    sq = np.sum(diff * diff, axis=1)
    return float(np.sum(np.maximum(0.0, sq - dv)) / z1.shape[0])


def tinc_squared_term(z1, z2, dv):
    """Squared-hinge variant of ``tinc_term`` (smoother margin boundary)."""
    z1, z2 = _check_pair(z1, z2)
    dv = _check_dv(dv, z1.shape[0])
    diff = z1 - z2
    sq = np.sum(diff * diff, axis=1)
    return float(np.sum(np.maximum(0.0, sq - dv) ** 2) / z1.shape[0])


def _similarity(variant, z1, z2, dv):
    if variant == "mse":
        return invariance_term(z1, z2)
    if variant == "tinc":
        return tinc_term(z1, z2, dv)
    if variant == "tinc_squared":
        return tinc_squared_term(z1, z2, dv)
    raise ValidationError(f"unknown similarity variant {variant!r}")


def vicreg_loss(z1, z2, cfg, dv=None):
    """Weighted similarity + variance + covariance loss.

    Variance and covariance are computed per view and summed. The breakdown
    parts are unweighted; ``total`` applies (lambda_inv, mu_var, nu_cov).
    """
    cfg.validate()
    z1, z2 = _check_pair(z1, z2, min_rows=2)
    if cfg.similarity_variant != "mse":
        if dv is None:
            raise ValidationError(
                f"dv is required for similarity variant {cfg.similarity_variant!r}")
    sim = _similarity(cfg.similarity_variant, z1, z2, dv)
    var = variance_term(z1, cfg.gamma, cfg.epsilon) + variance_term(
        z2, cfg.gamma, cfg.epsilon)
    cov = covariance_term(z1) + covariance_term(z2)
    total = cfg.lambda_inv * sim + cfg.mu_var * var + cfg.nu_cov * cov
    return LossBreakdown(total=total, invariance=sim, variance=var, covariance=cov)


def _bt_normalize(z, epsilon):
    mean = z.mean(axis=0)
    std = np.sqrt(np.mean((z - mean) ** 2, axis=0))
    if epsilon == 0.0 and np.any(std == 0.0):
        dim = int(np.argmax(std == 0.0))
        raise ValidationError(
            f"zero-variance dimension {dim} cannot be normalized with epsilon=0")
    return (z - mean) / (std + epsilon), std


def barlow_twins_loss(z1, z2, lambda_bt=0.005, epsilon=BT_EPSILON):
    """Cross-correlation loss pushing the two views' correlation to identity.

    Views are standardized per dimension (biased batch std), the n-scaled
    cross-correlation is formed, and total = sum((1 - diag)^2) +
    lambda_bt * sum(offdiag^2). Breakdown: ``invariance`` holds the diagonal
    part, ``extra`` the off-diagonal part.
    """
    z1, z2 = _check_pair(z1, z2, min_rows=2)
    n = z1.shape[0]
    zn1, _ = _bt_normalize(z1, epsilon)
    zn2, _ = _bt_normalize(z2, epsilon)
    c = (zn1.T @ zn2) / n
    diag = np.diag(c)
    diag_part = float(np.sum((1.0 - diag) ** 2))
    off = c - np.diag(diag)
    off_part = float(np.sum(off * off))
    total = diag_part + lambda_bt * off_part
    return LossBreakdown(total=total, invariance=diag_part, variance=0.0,
                         covariance=0.0, extra=off_part)


def time_head_loss(pred, delta_signed):
    """Mean squared error between predicted and true signed scaled time gaps."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(delta_signed, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 1:
        raise ValidationError(
            f"prediction/label length mismatch: {pred.shape} vs {target.shape}")
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(target))):
        raise ValidationError("time head inputs contain non-finite values")
    return float(np.mean((pred - target) ** 2))


# ---------------------------------------------------------------------------
# Analytic gradients
# ---------------------------------------------------------------------------

def _grad_invariance(z1, z2):
    diff = (2.0 / z1.shape[0]) * (z1 - z2)
    return {"z1": diff, "z2": -diff}


def _grad_variance(z, gamma, epsilon):
    n, d = z.shape
    std = _std_per_dim(z, epsilon)
    active = std < gamma
    centered = z - z.mean(axis=0)
    scale = np.where(active, -1.0 / (d * (n - 1) * std), 0.0)
    return {"z": centered * scale}


def _grad_covariance(z):
    n, d = z.shape
    zc = z - z.mean(axis=0)
    cov = (zc.T @ zc) / (n - 1)
    off = cov - np.diag(np.diag(cov))
    return {"z": (4.0 / (d * (n - 1))) * (zc @ off)}


def _grad_tinc(z1, z2, dv):
    n = z1.shape[0]
    diff = z1 - z2
    sq = np.sum(diff * diff, axis=1)
    mask = (sq > dv).astype(np.float64)
    g = (2.0 / n) * mask[:, None] * diff
    return {"z1": g, "z2": -g}


def _grad_tinc_squared(z1, z2, dv):
    n = z1.shape[0]
    diff = z1 - z2
    sq = np.sum(diff * diff, axis=1)
    hinge = np.maximum(0.0, sq - dv)
    g = (4.0 / n) * hinge[:, None] * diff
    return {"z1": g, "z2": -g}


def _grad_similarity(variant, z1, z2, dv):
    if variant == "mse":
        return _grad_invariance(z1, z2)
    if variant == "tinc":
        return _grad_tinc(z1, z2, dv)
    return _grad_tinc_squared(z1, z2, dv)


def _grad_vicreg(z1, z2, dv, cfg):
    gs = _grad_similarity(cfg.similarity_variant, z1, z2, dv)
    gv1 = _grad_variance(z1, cfg.gamma, cfg.epsilon)["z"]
    gv2 = _grad_variance(z2, cfg.gamma, cfg.epsilon)["z"]
    gc1 = _grad_covariance(z1)["z"]
    gc2 = _grad_covariance(z2)["z"]
    return {
        "z1": cfg.lambda_inv * gs["z1"] + cfg.mu_var * gv1 + cfg.nu_cov * gc1,
        "z2": cfg.lambda_inv * gs["z2"] + cfg.mu_var * gv2 + cfg.nu_cov * gc2,
    }


def _grad_barlow_twins(z1, z2, lambda_bt, epsilon):
    n = z1.shape[0]
    zn1, std1 = _bt_normalize(z1, epsilon)
    zn2, std2 = _bt_normalize(z2, epsilon)
    c = (zn1.T @ zn2) / n
    dc = 2.0 * lambda_bt * (c - np.diag(np.diag(c)))
    np.fill_diagonal(dc, -2.0 * (1.0 - np.diag(c)))
    g_zn1 = (zn2 @ dc.T) / n
    g_zn2 = (zn1 @ dc) / n

    def back_norm(g, zn, std):
        # d/dx of x_hat = (x - mean) / (std + eps), std biased over the batch
        term1 = (g - g.mean(axis=0)) / (std + epsilon)
        term2 = zn * np.mean(g * zn, axis=0) / std
        return term1 - term2

    return {"z1": back_norm(g_zn1, zn1, std1), "z2": back_norm(g_zn2, zn2, std2)}


def _grad_time_head(pred, target):
    return {"pred": (2.0 / pred.shape[0]) * (pred - target)}


def _prepare(loss_id, inputs, cfg):
    """Validate inputs for a loss id; returns canonical float64 arrays."""
    cfg = cfg if cfg is not None else LossConfig()
    out = {}
    if loss_id in ("invariance", "tinc", "tinc_squared", "vicreg", "barlow_twins"):
        min_rows = 2 if loss_id in ("vicreg", "barlow_twins") else 1
        z1, z2 = _check_pair(inputs["z1"], inputs["z2"], min_rows)
        out["z1"], out["z2"] = z1, z2
        if loss_id in ("tinc", "tinc_squared"):
            out["dv"] = _check_dv(inputs["dv"], z1.shape[0])
        if loss_id == "vicreg":
            if cfg.similarity_variant != "mse":
                if inputs.get("dv") is None:
                    raise ValidationError(
                        "dv is required for similarity variant "
                        f"{cfg.similarity_variant!r}")
                out["dv"] = _check_dv(inputs["dv"], z1.shape[0])
            else:
                out["dv"] = None
    elif loss_id in ("variance", "covariance"):
        out["z"] = _check_embedding(inputs["z"], "z", min_rows=2)
    elif loss_id == "time_head":
        out["pred"] = np.asarray(inputs["pred"], dtype=np.float64)
        out["target"] = np.asarray(inputs["target"], dtype=np.float64)
    else:
        raise ValidationError(f"unknown loss id {loss_id!r}")
    return out, cfg


def loss_value(loss_id, inputs, cfg=None):
    """Scalar value of the named loss on a dict of named inputs."""
    a, cfg = _prepare(loss_id, inputs, cfg)
    if loss_id == "invariance":
        return invariance_term(a["z1"], a["z2"])
    if loss_id == "variance":
        return variance_term(a["z"], cfg.gamma, cfg.epsilon)
    if loss_id == "covariance":
        return covariance_term(a["z"])
    if loss_id == "tinc":
        return tinc_term(a["z1"], a["z2"], a["dv"])
    if loss_id == "tinc_squared":
        return tinc_squared_term(a["z1"], a["z2"], a["dv"])
    if loss_id == "vicreg":
        return vicreg_loss(a["z1"], a["z2"], cfg, a["dv"]).total
    if loss_id == "barlow_twins":
        return barlow_twins_loss(a["z1"], a["z2"], cfg.lambda_bt).total
    return time_head_loss(a["pred"], a["target"])


def loss_gradient(loss_id, inputs, cfg=None):
    """Analytic gradients of the named loss w.r.t. each differentiable input.

    Margins (dv) and time labels are treated as constants. At hinge
    boundaries the inactive-branch subgradient (zero) is returned.
    """
    a, cfg = _prepare(loss_id, inputs, cfg)
    if loss_id == "invariance":
        return _grad_invariance(a["z1"], a["z2"])
    if loss_id == "variance":
        return _grad_variance(a["z"], cfg.gamma, cfg.epsilon)
    if loss_id == "covariance":
        return _grad_covariance(a["z"])
    if loss_id == "tinc":
        return _grad_tinc(a["z1"], a["z2"], a["dv"])
    if loss_id == "tinc_squared":
        return _grad_tinc_squared(a["z1"], a["z2"], a["dv"])
    if loss_id == "vicreg":
        return _grad_vicreg(a["z1"], a["z2"], a["dv"], cfg)
    if loss_id == "barlow_twins":
        return _grad_barlow_twins(a["z1"], a["z2"], cfg.lambda_bt, BT_EPSILON)
    return _grad_time_head(a["pred"], a["target"])


def hinge_pattern(loss_id, inputs, cfg=None):
    """Active-set pattern of every hinge in the loss (None when hinge-free).

    Used by the finite-difference oracle to exclude coordinates whose
    perturbation flips a hinge.
    """
    a, cfg = _prepare(loss_id, inputs, cfg)
    if loss_id == "variance":
        return _std_per_dim(a["z"], cfg.epsilon) < cfg.gamma
    if loss_id in ("tinc", "tinc_squared"):
        sq = np.sum((a["z1"] - a["z2"]) ** 2, axis=1)
        return sq > a["dv"]
    if loss_id == "vicreg":
        parts = [
            _std_per_dim(a["z1"], cfg.epsilon) < cfg.gamma,
            _std_per_dim(a["z2"], cfg.epsilon) < cfg.gamma,
        ]
        if cfg.similarity_variant != "mse":
            sq = np.sum((a["z1"] - a["z2"]) ** 2, axis=1)
            parts.append(sq > a["dv"])
        return np.concatenate(parts)
    return None


_DIFFERENTIABLE = {
    "invariance": ("z1", "z2"),
    "variance": ("z",),
    "covariance": ("z",),
    "tinc": ("z1", "z2"),
    "tinc_squared": ("z1", "z2"),
    "vicreg": ("z1", "z2"),
    "barlow_twins": ("z1", "z2"),
    "time_head": ("pred",),
}


@dataclass(frozen=True)
class FDReport:
    """Result of one finite-difference gradient verification run."""

    loss_id: str
    step: float
    tolerance: float
    max_rel_error: dict
    checked: dict
    excluded: dict

    @property
    def worst(self):
        return float(max(self.max_rel_error.values())) if self.max_rel_error \
            else 0.0

    @property
    def passed(self):
        return bool(self.worst <= self.tolerance)


def finite_difference_check(loss_id, inputs, cfg=None, step=1e-5, tolerance=1e-4):
    """Compare analytic gradients against central finite differences.

    Coordinates whose perturbation by 10*step flips any hinge are excluded
    from the comparison and counted separately. Relative error uses
    max(|analytic|, |numeric|, 1) as denominator.
    """
    if step <= 0:
        raise ValidationError("step must be positive")
    a, cfg = _prepare(loss_id, inputs, cfg)
    a = {k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in a.items()}
    grads = loss_gradient(loss_id, a, cfg)
    max_err, n_checked, n_excluded = {}, {}, {}
    for name in _DIFFERENTIABLE[loss_id]:
        x = a[name]
        gflat = grads[name].reshape(-1)
        worst = 0.0
        checked = excluded = 0
        flat = x.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            pattern = hinge_pattern(loss_id, a, cfg)
            if pattern is not None:
                flat[idx] = orig + 10.0 * step
                hi = hinge_pattern(loss_id, a, cfg)
                flat[idx] = orig - 10.0 * step
                lo = hinge_pattern(loss_id, a, cfg)
                flat[idx] = orig
                if not (np.array_equal(hi, pattern) and np.array_equal(lo, pattern)):
                    excluded += 1
                    continue
            flat[idx] = orig + step
            f_hi = loss_value(loss_id, a, cfg)
            flat[idx] = orig - step
            f_lo = loss_value(loss_id, a, cfg)
            flat[idx] = orig
            fd = (f_hi - f_lo) / (2.0 * step)
            an = gflat[idx]
            err = abs(fd - an) / max(abs(fd), abs(an), 1.0)
            worst = max(worst, err)
            checked += 1
        max_err[name] = worst
        n_checked[name] = checked
        n_excluded[name] = excluded
    return FDReport(loss_id=loss_id, step=step, tolerance=tolerance,
                    max_rel_error=max_err, checked=n_checked, excluded=n_excluded)


def sample_inputs(loss_id, rng, n=8, d=6):
    """Random valid inputs for a loss id; used by gradient verification."""
    z1 = rng.normal(size=(n, d))
    z2 = rng.normal(size=(n, d))
    if loss_id in ("variance", "covariance"):
        return {"z": z1}
    if loss_id == "time_head":
        return {"pred": rng.normal(size=n), "target": rng.uniform(-1, 1, size=n)}
    inputs = {"z1": z1, "z2": z2}
    if loss_id in ("tinc", "tinc_squared", "vicreg"):
        inputs["dv"] = rng.uniform(0.0, 1.0, size=n)
    return inputs
