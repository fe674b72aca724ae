""" Finite-difference oracles, continuity audits and reduced-precision checks """
# Std lib
import csv
import enum
from dataclasses import dataclass
from typing import Callable, Iterable, List, NamedTuple, Optional, TextIO, Tuple
# Non std lib
import numpy as np
# Local
from actbench import activations as act
from actbench import derivation
from actbench import tensor
from actbench.activations import ActivationKind, ConstrainedParams, FixedHyper, RawParams
from actbench.utils import format_real


INPUT_STEP: float = 1e-6
# The activations are linear in alpha, a wider step only removes rounding noise
PARAM_STEP: float = 1e-4
MODEL_STEP: float = 1e-5
RELATIVE_FLOOR: float = 1e-8
# Loss evaluations carry ~1e-10 of rounding noise at h=1e-5, gradients below this are compared absolutely
MODEL_FLOOR: float = 1e-5
KINK_BAND: float = 1e-4
DEFAULT_DOMAIN: Tuple[float, float] = (-8.0, 8.0)
RAW_RANGE: Tuple[float, float] = (-3.0, 3.0)
BETA_RANGE: Tuple[float, float] = (-1.0, 1.0)
CONTINUITY_TOLERANCE: float = 1e-12
STABILITY_POINTS: Tuple[float, ...] = (-1.0, -1e-3, -1e-6, -1e-8, -1e-10)
STABLE_BOUND_ULPS: float = 4.0
REPORT_HEADER = ["check", "kind", "samples", "max_rel_err", "worst_x", "tolerance", "pass"]
STABILITY_HEADER = ["mode", "x", "naive", "stable", "reference", "naive_rel_err", "stable_rel_err"]

# Stock gradients of the kinds whose gradient jumps, used to locate the points FD cannot resolve
_STOCK_GRADIENTS = {
    ActivationKind.Relu: derivation.relu_gradient_spec,
    ActivationKind.Relu2: derivation.relu2_spec,
}


@dataclass(frozen=True)
class GradCheckReport:
    """ Worst case of a finite-difference check

    :param label: Kind of check (`input`, `params`, `model`, `continuity`)
    :param worst_x: Input of the worst sample, or its flat index inside `worst_param` for model checks
    """
    label: str
    kind: str
    samples: int
    max_rel_err: float
    worst_x: float
    tolerance: float
    worst_param: Optional[str] = None

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tolerance)

    def row(self) -> List[str]:
        return [
            self.label, self.kind, str(self.samples), format_real(self.max_rel_err), format_real(self.worst_x),
            format_real(self.tolerance), "true" if self.passed else "false"
        ]

    def describe(self) -> str:
        where = f"{self.worst_param}[{int(self.worst_x)}]" if self.worst_param else f"x={self.worst_x:.6g}"
        return f"{self.label} check of {self.kind}: max relative error {self.max_rel_err:.3e} at {where} " \
               f"(tolerance {self.tolerance:g}, {self.samples} samples)"


class PrecisionMode(enum.Enum):
    """ Emulated floating point formats, every intermediate is rounded to nearest (ties to even) """
    Double = "double"
    EmulatedSingle = "single"
    EmulatedBf16 = "bf16"

    @classmethod
    def from_name(cls, name: str) -> "PrecisionMode":
        for mode in cls:
            if mode.value == name.lower():
                return mode
        raise ValueError(f"Unknown precision mode `{name}`")

    @property
    def significand_bits(self) -> int:
        return {"double": 53, "single": 24, "bf16": 8}[self.value]

    @property
    def unit_roundoff(self) -> float:
        """
        >>> PrecisionMode.EmulatedBf16.unit_roundoff
        0.00390625
        """
        return 2.0 ** -self.significand_bits

    def round(self, value: float) -> float:
        """ Round a double to this format, range limits are ignored

        >>> PrecisionMode.EmulatedBf16.round(1.0 + 2 ** -9), PrecisionMode.EmulatedSingle.round(1.0 + 2 ** -30)
        (1.0, 1.0)
        """
        if self is PrecisionMode.Double:
            return float(value)
        if self is PrecisionMode.EmulatedSingle:
            return float(np.float32(value))
        mantissa, exponent = np.frexp(value)
        scale = 2.0 ** self.significand_bits
        return float(np.ldexp(np.rint(mantissa * scale) / scale, exponent))


class StabilityResult(NamedTuple):
    x: float
    mode: PrecisionMode
    naive: float
    stable: float
    reference: float
    naive_rel_err: float
    stable_rel_err: float

    def row(self) -> List[str]:
        return [self.mode.value] + [format_real(v) for v in (
            self.x, self.naive, self.stable, self.reference, self.naive_rel_err, self.stable_rel_err)]


class ContinuityRow(NamedTuple):
    breakpoint: float
    value_jump: float
    slope_jump: float


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def central_diff(f: Callable[[float], float], x: float, h: float = INPUT_STEP) -> float:
    """ (f(x + h) - f(x - h)) / 2h. Kinks average out: |x| at 0 gives 0.

    >>> abs(central_diff(lambda v: v * v, 3.0) - 6.0) < 1e-9
    True
    >>> central_diff(abs, 0.0)
    0.0
    """
    if not h > 0:
        raise ValueError(f"Finite difference step must be positive, got {h}")
    return (f(x + h) - f(x - h)) / (2.0 * h)


def relative_error(analytic, numeric, floor: float = RELATIVE_FLOOR):
    """ |a - n| / max(|a|, |n|, floor)

    >>> relative_error(0.0, 0.0), relative_error(1.0, 0.5)
    (0.0, 0.5)
    """
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    out = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(out) if out.ndim == 0 else out


def _kinks(kind: ActivationKind) -> List[float]:
    if kind not in _STOCK_GRADIENTS:
        return []
    return [b for b, jump in derivation.gradient_discontinuities(_STOCK_GRADIENTS[kind]()) if jump != 0]


def _draws(kind: ActivationKind, hyper: FixedHyper, rng: np.random.Generator, count: int
           ) -> List[Optional[ConstrainedParams]]:
    raws = rng.uniform(*RAW_RANGE, size=(count, 2))
    if not kind.trainable:
        return [None] * count
    if hyper.trainable_beta and kind.has_beta:
        betas = rng.uniform(*BETA_RANGE, size=count)
        return [act.constrain(RawParams(float(p), float(n), float(b)), hyper, kind) for (p, n), b in zip(raws, betas)]
    return [act.constrain(RawParams(float(p), float(n)), hyper, kind) for p, n in raws]


def _samples(kind: ActivationKind, rng: np.random.Generator, samples: int, domain: Tuple[float, float],
             exclude_band: float) -> np.ndarray:
    lo, hi = domain
    if not lo < hi:
        raise ValueError(f"Empty sampling domain {domain}")
    xs = rng.uniform(lo, hi, size=samples)
    kinks = [k for k in _kinks(kind) if lo <= k <= hi]
    # Gradient jumps are always sampled, the exclusion band then decides whether they count
    xs = np.concatenate([np.asarray(kinks, dtype=float), xs])
    for kink in kinks:
        xs = xs[np.abs(xs - kink) > exclude_band] if exclude_band > 0 else xs
    return xs


def gradcheck_activation(kind: ActivationKind, hyper: Optional[FixedHyper] = None, tol: float = 1e-5,
                         samples: int = 1000, domain: Tuple[float, float] = DEFAULT_DOMAIN, seed: int = 0,
                         exclude_band: float = KINK_BAND, h: float = INPUT_STEP) -> GradCheckReport:
    """ Input-gradient check of `kind`, every sample with its own parameter draw (raw uniform in [-3, 3]).

    Points where the gradient jumps (ReLU's origin) are part of the samples unless `exclude_band` removes them
    together with their neighbourhood.
    """
    if not tol > 0:
        raise ValueError(f"Tolerance must be positive, got {tol}")
    hyper = hyper or FixedHyper()
    rng = np.random.default_rng(seed)
    xs = _samples(kind, rng, samples, domain, exclude_band)
    params = _draws(kind, hyper, rng, len(xs))
    errors = np.empty(len(xs))
    for index, (x, p) in enumerate(zip(xs, params)):
        analytic = act.grad_input(kind, float(x), p, hyper)
        numeric = central_diff(lambda v: act.forward(kind, v, p, hyper), float(x), h)
        errors[index] = relative_error(analytic, numeric)
    worst = int(np.argmax(errors)) if len(errors) else 0
    return GradCheckReport(
        label="input", kind=kind.value, samples=len(xs), max_rel_err=float(errors.max()) if len(errors) else 0.0,
        worst_x=float(xs[worst]) if len(xs) else 0.0, tolerance=tol
    )


def gradcheck_params(kind: ActivationKind, hyper: Optional[FixedHyper] = None, tol: float = 1e-6,
                     samples: int = 1000, domain: Tuple[float, float] = DEFAULT_DOMAIN, seed: int = 0,
                     h: float = PARAM_STEP) -> GradCheckReport:
    """ Check of (d/d alpha_p, d/d alpha_n) against finite differences in constrained space, and of d/d beta when
    `hyper` trains it (both alphas held fixed) """
    if not tol > 0:
        raise ValueError(f"Tolerance must be positive, got {tol}")
    hyper = hyper or FixedHyper()
    rng = np.random.default_rng(seed)
    xs = rng.uniform(*domain, size=samples)
    params = _draws(kind, hyper, rng, samples)
    errors = np.zeros(samples)
    if kind.trainable:
        for index, (x, p) in enumerate(zip(xs, params)):
            d_p, d_n = act.grad_params(kind, float(x), p, hyper)
            numeric_p = central_diff(
                lambda a: act.forward(kind, float(x), ConstrainedParams(a, p.alpha_n, p.beta), hyper), p.alpha_p, h)
            numeric_n = central_diff(
                lambda a: act.forward(kind, float(x), ConstrainedParams(p.alpha_p, a, p.beta), hyper), p.alpha_n, h)
            errors[index] = max(relative_error(d_p, numeric_p), relative_error(d_n, numeric_n))
            if p.beta is not None:
                numeric_b = central_diff(
                    lambda b: act.forward(kind, float(x), ConstrainedParams(p.alpha_p, p.alpha_n, b), hyper), p.beta, h)
                errors[index] = max(errors[index], relative_error(act.grad_beta(kind, float(x), p, hyper), numeric_b))
    worst = int(np.argmax(errors))
    return GradCheckReport(
        label="params", kind=kind.value, samples=samples, max_rel_err=float(errors.max()),
        worst_x=float(xs[worst]), tolerance=tol
    )


def gradcheck_model(model: "tensor.ToyLm", tokens: np.ndarray, targets: np.ndarray, tol: float = 1e-4,
                    h: float = MODEL_STEP, floor: float = MODEL_FLOOR) -> GradCheckReport:
    """ Central differences over every trainable scalar of `model`, compared with :func:`tensor.toylm_bwd` """
    _, grads = tensor.loss_and_grads(model, tokens, targets)
    worst_err, worst_name, worst_index, count = 0.0, None, 0, 0
    for name, value in model.parameters().items():
        flat = value.reshape(-1)
        for index in range(flat.size):
            original = flat[index]
            flat[index] = original + h
            plus, _ = tensor.toylm_fwd(model, tokens, targets)
            flat[index] = original - h
            minus, _ = tensor.toylm_fwd(model, tokens, targets)
            flat[index] = original
            err = relative_error(grads[name].reshape(-1)[index], (plus - minus) / (2.0 * h), floor)
            count += 1
            if not err <= worst_err:
                worst_err, worst_name, worst_index = err, name, index
    return GradCheckReport(
        label="model", kind=model.config.activation, samples=count, max_rel_err=float(worst_err),
        worst_x=float(worst_index), tolerance=tol, worst_param=worst_name
    )


# ---------------------------------------------------------------------------
# Continuity
# ---------------------------------------------------------------------------


def continuity_audit(kind: ActivationKind, hyper: Optional[FixedHyper] = None, draws: int = 200,
                     seed: int = 0) -> List[ContinuityRow]:
    """ One-sided limits at the breakpoint, from the piece formulas. Reports the largest signed jumps over the
    draws, an empty list for smooth kinds.

    >>> continuity_audit(ActivationKind.Relu2)
    [ContinuityRow(breakpoint=0.0, value_jump=0.0, slope_jump=0.0)]
    """
    br = act.branches(kind)
    if br is None:
        return []
    hyper = hyper or FixedHyper()
    at = np.asarray(0.0)
    value_jump, slope_jump = 0.0, 0.0
    for p in _draws(kind, hyper, np.random.default_rng(seed), draws):
        value = float(br.positive(at, p, hyper)) - float(br.negative(at, p, hyper))
        slope = float(br.positive_dx(at, p, hyper)) - float(br.negative_dx(at, p, hyper))
        value_jump = value if abs(value) > abs(value_jump) else value_jump
        slope_jump = slope if abs(slope) > abs(slope_jump) else slope_jump
    return [ContinuityRow(0.0, value_jump, slope_jump)]


def continuity_report(kind: ActivationKind, hyper: Optional[FixedHyper] = None, draws: int = 200, seed: int = 0,
                      tol: float = CONTINUITY_TOLERANCE) -> GradCheckReport:
    """ Continuity audit folded in a report, jumps of kinds that are only C0 by construction (ReLU) do not count
    as slope failures """
    rows = continuity_audit(kind, hyper, draws, seed)
    smooth_gradient = not _kinks(kind)
    worst, where = 0.0, 0.0
    for row in rows:
        jump = max(abs(row.value_jump), abs(row.slope_jump) if smooth_gradient else 0.0)
        if jump > worst:
            worst, where = jump, row.breakpoint
    return GradCheckReport(
        label="continuity", kind=kind.value, samples=draws if rows else 0, max_rel_err=worst, worst_x=where,
        tolerance=tol
    )


# ---------------------------------------------------------------------------
# Reduced precision
# ---------------------------------------------------------------------------


def stability_probe(x: float, mode: PrecisionMode) -> StabilityResult:
    """ e^x - 1 for x < 0 computed naively and with expm1, every intermediate rounded to `mode`

    >>> r = stability_probe(-1e-8, PrecisionMode.EmulatedSingle)
    >>> r.naive, r.naive_rel_err
    (0.0, 1.0)
    """
    if not x < 0:
        raise ValueError(f"The stability check targets negative inputs, got {x}")
    x_mode = mode.round(x)
    naive = mode.round(mode.round(np.exp(x_mode)) - 1.0)
    stable = mode.round(np.expm1(x_mode))
    reference = float(np.expm1(x))
    return StabilityResult(
        x=float(x), mode=mode, naive=naive, stable=stable, reference=reference,
        naive_rel_err=abs(naive - reference) / abs(reference),
        stable_rel_err=abs(stable - reference) / abs(reference),
    )


def stability_table(mode: PrecisionMode, xs: Iterable[float] = STABILITY_POINTS) -> List[StabilityResult]:
    return [stability_probe(x, mode) for x in xs]


def stability_passed(result: StabilityResult) -> bool:
    """ The stable form must stay within a few rounding units of the reference, the naive one is only reported """
    return result.stable_rel_err < STABLE_BOUND_ULPS * result.mode.unit_roundoff


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def write_reports(reports: Iterable[GradCheckReport], handle: TextIO) -> None:
    writer = csv.writer(handle, lineterminator="\n")
    writer.writerow(REPORT_HEADER)
    for report in reports:
        writer.writerow(report.row())


def write_stability(results: Iterable[StabilityResult], handle: TextIO) -> None:
    writer = csv.writer(handle, lineterminator="\n")
    writer.writerow(STABILITY_HEADER)
    for result in results:
        writer.writerow(result.row())
