# Std lib
import enum
from dataclasses import dataclass
from typing import Callable, Dict, NamedTuple, Optional, Tuple, Union
# Non std lib
import numpy as np


Real = Union[float, np.ndarray]
BranchFunction = Callable[[np.ndarray, "ConstrainedParams", "FixedHyper"], np.ndarray]

# Branch thresholds for softplus, avoids overflow even in single precision
OVERFLOW_THRESHOLD: float = 30.0
SQRT_2_OVER_PI: float = float(np.sqrt(2.0 / np.pi))
GELU_CUBIC: float = 0.044715


class ActivationKind(enum.Enum):
    """ Every activation known to the workbench. The value is the name used on the command line and in configs. """
    Elu = "elu"
    Relu2 = "relu2"
    Silu = "silu"
    GeluTanh = "gelu_tanh"
    XSilu = "xsilu"
    XIelu = "xielu"
    XIPRelu = "xiprelu"
    Relu = "relu"

    @classmethod
    def from_name(cls, name: str) -> "ActivationKind":
        """ Resolve a command line name

        >>> ActivationKind.from_name("xielu")
        <ActivationKind.XIelu: 'xielu'>
        >>> ActivationKind.from_name("GELU-tanh")
        <ActivationKind.GeluTanh: 'gelu_tanh'>
        """
        key = name.strip().lower().replace("-", "_")
        for kind in cls:
            if kind.value == key:
                return kind
        raise ValueError(f"Unknown activation `{name}`, expected one of {', '.join(k.value for k in cls)}")

    @property
    def trainable(self) -> bool:
        return CONSTRAINT_POLICY[self] is not None

    @property
    def has_beta(self) -> bool:
        """ Kinds whose gradient carries the beta intercept, the only ones where beta can be trained """
        return self in (ActivationKind.XIelu, ActivationKind.XIPRelu)


class Constraint(enum.Enum):
    Positive = "positive"  # alpha = softplus(raw)
    Shifted = "shifted"  # alpha_p = softplus(raw_p), alpha_n = beta_n + softplus(raw_n)


# Per-kind constraint policy. xSiLU keeps its single alpha in `alpha_p`, `alpha_n` is carried but unused.
CONSTRAINT_POLICY: Dict[ActivationKind, Optional[Constraint]] = {
    ActivationKind.Elu: None,
    ActivationKind.Relu2: None,
    ActivationKind.Silu: None,
    ActivationKind.GeluTanh: None,
    ActivationKind.Relu: None,
    ActivationKind.XSilu: Constraint.Positive,
    ActivationKind.XIPRelu: Constraint.Positive,
    ActivationKind.XIelu: Constraint.Shifted,
}

POSITIVE_COMPONENTS = ("quadratic", "cubic")
NEGATIVE_COMPONENTS = ("exp", "silu", "xsilu", "zero")


@dataclass(frozen=True)
class FixedHyper:
    """ Fixed (non-trained) scalars shared by every layer

    :param beta: Gradient y-intercept of the positive branch (and of the negative one unless `beta_n` is set)
    :param eps: Upper bound of negative inputs in clamp mode
    :param elu_alpha: ELU saturation
    :param beta_n: Negative-branch y-intercept, for the mis-matched beta ablation
    :param clamp: Clamp negative inputs with min(x, eps) before expm1, in forward and backward
    :param positive_component: xIELU positive branch, `quadratic` (default) or `cubic` (ablation)
    :param negative_component: xIELU negative branch, `exp` (default), `silu`, `xsilu` or `zero` (ablations)
    :param trainable_beta: Train one beta per layer, shared by both sides and initialised at `beta`
    """
    beta: float = 0.5
    eps: float = -1e-6
    elu_alpha: float = 1.0
    beta_n: Optional[float] = None
    clamp: bool = False
    positive_component: str = "quadratic"
    negative_component: str = "exp"
    trainable_beta: bool = False

    def __post_init__(self):
        if self.trainable_beta and self.beta_n is not None:
            raise ValueError("A trainable beta is shared by both sides, beta_n cannot be set")
        if not np.isfinite(self.beta) or (self.beta_n is not None and not np.isfinite(self.beta_n)):
            raise ValueError(f"beta must be finite, got {self.beta} / {self.beta_n}")
        if not self.eps < 0:
            raise ValueError(f"eps must be negative, got {self.eps}")
        if not self.elu_alpha > 0:
            raise ValueError(f"elu_alpha must be positive, got {self.elu_alpha}")
        if self.positive_component not in POSITIVE_COMPONENTS:
            raise ValueError(f"Unknown positive component `{self.positive_component}`")
        if self.negative_component not in NEGATIVE_COMPONENTS:
            raise ValueError(f"Unknown negative component `{self.negative_component}`")

    @property
    def negative_beta(self) -> float:
        return self.beta if self.beta_n is None else self.beta_n


@dataclass(frozen=True)
class RawParams:
    """ Unconstrained trainables, any finite real is valid. `beta` is only set when beta is trained. """
    alpha_p_raw: float
    alpha_n_raw: float
    beta: Optional[float] = None


@dataclass(frozen=True)
class ConstrainedParams:
    alpha_p: float
    alpha_n: float
    beta: Optional[float] = None


def _beta_p(p: Optional[ConstrainedParams], h: "FixedHyper") -> float:
    return p.beta if p is not None and p.beta is not None else h.beta


def _beta_n(p: Optional[ConstrainedParams], h: "FixedHyper") -> float:
    return p.beta if p is not None and p.beta is not None else h.negative_beta


class OpCount(NamedTuple):
    exps: int = 0
    mults: int = 0
    adds: int = 0
    divs: int = 0
    conditionals: int = 0

    def __add__(self, other: "OpCount") -> "OpCount":
        return OpCount(*(a + b for a, b in zip(self, other)))


class Branches(NamedTuple):
    """ Closed forms of each side of the breakpoint at 0, the negative side owns x = 0 """
    negative: BranchFunction
    positive: BranchFunction
    negative_dx: BranchFunction
    positive_dx: BranchFunction


def _as_output(value: np.ndarray) -> Real:
    return float(value) if np.ndim(value) == 0 else value


# ---------------------------------------------------------------------------
# Special functions
# ---------------------------------------------------------------------------


def softplus(x: Real) -> Real:
    """ ln(1 + e^x), with the asymptotes used beyond |x| > 30

    >>> round(softplus(0.0), 10)
    0.6931471806
    >>> softplus(100.0)
    100.0
    """
    x = np.asarray(x, dtype=float)
    middle = np.log1p(np.exp(np.clip(x, -OVERFLOW_THRESHOLD, OVERFLOW_THRESHOLD)))
    low = np.exp(np.minimum(x, -OVERFLOW_THRESHOLD))
    return _as_output(np.where(x > OVERFLOW_THRESHOLD, x, np.where(x < -OVERFLOW_THRESHOLD, low, middle)))


def inverse_softplus(y: Real) -> Real:
    """ ln(e^y - 1), written as y + ln(1 - e^-y) to stay finite for large y

    >>> abs(inverse_softplus(float(np.log(2.0)))) < 1e-15
    True
    >>> inverse_softplus(0.0)
    Traceback (most recent call last):
    ValueError: inverse_softplus is only defined for positive values, got 0.0
    """
    y = np.asarray(y, dtype=float)
    if np.any(~(y > 0)):
        raise ValueError(f"inverse_softplus is only defined for positive values, got {_as_output(y)}")
    return _as_output(y + np.log(-np.expm1(-y)))


def expm1_stable(x: Real) -> Real:
    """ e^x - 1 without cancellation near 0 """
    return _as_output(np.expm1(np.asarray(x, dtype=float)))


def sigmoid(x: Real) -> Real:
    """ Logistic function, evaluated on e^-|x| so that it never overflows """
    x = np.asarray(x, dtype=float)
    z = np.exp(-np.abs(x))
    return _as_output(np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z)))


# ---------------------------------------------------------------------------
# Constraints
# ---------------------------------------------------------------------------


def _strictly_above(value: float, bound: float) -> float:
    # softplus tails underflow (e^-40 vanishes next to 0.5), the next float keeps the bound strict
    return max(float(value), float(np.nextafter(bound, np.inf)))


def constrain(raw: RawParams, hyper: FixedHyper, kind: ActivationKind) -> ConstrainedParams:
    """ Map raw trainables to the constrained space of `kind`

    >>> p = constrain(RawParams(0.0, 0.0), FixedHyper(beta=0.5), ActivationKind.XIelu)
    >>> round(p.alpha_p, 6), round(p.alpha_n, 6)
    (0.693147, 1.193147)
    """
    alpha_p = _strictly_above(softplus(raw.alpha_p_raw), 0.0)
    if CONSTRAINT_POLICY[kind] is Constraint.Shifted:
        # A trained beta moves the lower bound of alpha_n with it
        bound = hyper.negative_beta if raw.beta is None else raw.beta
        alpha_n = _strictly_above(bound + softplus(raw.alpha_n_raw), bound)
    else:
        alpha_n = _strictly_above(softplus(raw.alpha_n_raw), 0.0)
    return ConstrainedParams(alpha_p=alpha_p, alpha_n=alpha_n, beta=raw.beta)


def init_raw(kind: ActivationKind, hyper: FixedHyper, alpha_p: float = 0.8, alpha_n: float = 0.8) -> RawParams:
    """ Inverse of :func:`constrain`, used to initialise layers at the requested constrained values

    >>> init_raw(ActivationKind.XIelu, FixedHyper(trainable_beta=True)).beta
    0.5
    """
    if CONSTRAINT_POLICY[kind] is Constraint.Shifted:
        if alpha_n <= hyper.negative_beta:
            raise ValueError(f"alpha_n ({alpha_n}) must be greater than beta ({hyper.negative_beta}) for {kind.value}")
        alpha_n = alpha_n - hyper.negative_beta
    beta = hyper.beta if hyper.trainable_beta and kind.has_beta else None
    return RawParams(float(inverse_softplus(alpha_p)), float(inverse_softplus(alpha_n)), beta=beta)


def dalpha_n_dbeta(kind: ActivationKind) -> float:
    """ Derivative of the constrained alpha_n with respect to a trained beta """
    return 1.0 if CONSTRAINT_POLICY[kind] is Constraint.Shifted else 0.0


# ---------------------------------------------------------------------------
# Branch formulas
# ---------------------------------------------------------------------------


def _xielu_positive(x, p, h):
    if h.positive_component == "cubic":
        return p.alpha_p * x * x * x + _beta_p(p, h) * x
    return p.alpha_p * x * x + _beta_p(p, h) * x


def _xielu_positive_dx(x, p, h):
    if h.positive_component == "cubic":
        return 3.0 * p.alpha_p * x * x + _beta_p(p, h)
    return 2.0 * p.alpha_p * x + _beta_p(p, h)


def _xielu_negative(x, p, h):
    if h.negative_component == "silu":
        return x * sigmoid(x)
    if h.negative_component == "xsilu":
        return _xsilu(x, p.alpha_n)
    if h.negative_component == "zero":
        return _beta_n(p, h) * x
    xc = np.minimum(x, h.eps) if h.clamp else x
    return p.alpha_n * np.expm1(xc) - p.alpha_n * x + _beta_n(p, h) * x


def _xielu_negative_dx(x, p, h):
    if h.negative_component == "silu":
        s = sigmoid(x)
        return s * (1.0 + x * (1.0 - s))
    if h.negative_component == "xsilu":
        return _xsilu_dx(x, p.alpha_n)
    if h.negative_component == "zero":
        return _beta_n(p, h) + 0.0 * x
    if h.clamp:
        return np.where(x < h.eps, p.alpha_n * np.expm1(x), -p.alpha_n) + _beta_n(p, h)
    return p.alpha_n * np.expm1(x) + _beta_n(p, h)


def _xiprelu_positive(x, p, h):
    return p.alpha_p * x * x + _beta_p(p, h) * x


def _xiprelu_positive_dx(x, p, h):
    return 2.0 * p.alpha_p * x + _beta_p(p, h)


def _xiprelu_negative(x, p, h):
    return p.alpha_n * x * x + _beta_n(p, h) * x


def _xiprelu_negative_dx(x, p, h):
    return 2.0 * p.alpha_n * x + _beta_n(p, h)


_BRANCHES: Dict[ActivationKind, Branches] = {
    ActivationKind.XIelu: Branches(_xielu_negative, _xielu_positive, _xielu_negative_dx, _xielu_positive_dx),
    ActivationKind.XIPRelu: Branches(_xiprelu_negative, _xiprelu_positive, _xiprelu_negative_dx, _xiprelu_positive_dx),
    ActivationKind.Elu: Branches(
        lambda x, p, h: h.elu_alpha * np.expm1(x),
        lambda x, p, h: x,
        lambda x, p, h: h.elu_alpha * np.exp(x),
        lambda x, p, h: 1.0 + 0.0 * x,
    ),
    ActivationKind.Relu2: Branches(
        lambda x, p, h: 0.0 * x,
        lambda x, p, h: x * x,
        lambda x, p, h: 0.0 * x,
        lambda x, p, h: 2.0 * x,
    ),
    ActivationKind.Relu: Branches(
        lambda x, p, h: 0.0 * x,
        lambda x, p, h: x,
        lambda x, p, h: 0.0 * x,
        lambda x, p, h: 1.0 + 0.0 * x,
    ),
}


def branches(kind: ActivationKind) -> Optional[Branches]:
    """ Piece formulas of a piecewise kind, None for the smooth ones (SiLU, GELU, xSiLU) """
    return _BRANCHES.get(kind)


def _piecewise(functions: Tuple[BranchFunction, BranchFunction], x: Real, p, h) -> Real:
    x = np.asarray(x, dtype=float)
    negative, positive = functions
    # Each side only sees inputs of its own sign, so exponentials never overflow
    out = np.where(x > 0, positive(np.maximum(x, 0.0), p, h), negative(np.minimum(x, 0.0), p, h))
    return _as_output(out)


# ---------------------------------------------------------------------------
# xIELU / xIPReLU
# ---------------------------------------------------------------------------


def xielu_fwd(x: Real, p: ConstrainedParams, h: FixedHyper) -> Real:
    """ alpha_p x^2 + beta x for x > 0, alpha_n (e^x - 1) - alpha_n x + beta x otherwise

    >>> round(xielu_fwd(1.0, ConstrainedParams(0.8, 0.8), FixedHyper()), 12)
    1.3
    """
    br = _BRANCHES[ActivationKind.XIelu]
    return _piecewise((br.negative, br.positive), x, p, h)


def xielu_dx(x: Real, p: ConstrainedParams, h: FixedHyper) -> Real:
    br = _BRANCHES[ActivationKind.XIelu]
    return _piecewise((br.negative_dx, br.positive_dx), x, p, h)


def xielu_dparams(x: Real, p: ConstrainedParams, h: FixedHyper) -> Tuple[Real, Real]:
    """ Partial derivatives with respect to (alpha_p, alpha_n) """
    x = np.asarray(x, dtype=float)
    xp = np.maximum(x, 0.0)
    xn = np.minimum(x, 0.0)
    d_p = xp * xp * xp if h.positive_component == "cubic" else xp * xp
    if h.negative_component == "exp":
        xc = np.minimum(xn, h.eps) if h.clamp else xn
        d_n = np.expm1(xc) - xn
    elif h.negative_component == "xsilu":
        d_n = xn * (2.0 * sigmoid(xn) - 1.0)
    else:
        d_n = 0.0 * xn
    positive = x > 0
    return _as_output(np.where(positive, d_p, 0.0)), _as_output(np.where(positive, 0.0, d_n))


def xiprelu_fwd(x: Real, p: ConstrainedParams, h: FixedHyper) -> Real:
    br = _BRANCHES[ActivationKind.XIPRelu]
    return _piecewise((br.negative, br.positive), x, p, h)


def xiprelu_dx(x: Real, p: ConstrainedParams, h: FixedHyper) -> Real:
    br = _BRANCHES[ActivationKind.XIPRelu]
    return _piecewise((br.negative_dx, br.positive_dx), x, p, h)


def xiprelu_dparams(x: Real, p: ConstrainedParams, h: FixedHyper) -> Tuple[Real, Real]:
    x = np.asarray(x, dtype=float)
    squared = x * x
    positive = x > 0
    return _as_output(np.where(positive, squared, 0.0)), _as_output(np.where(positive, 0.0, squared))


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------


def silu(x: Real) -> Real:
    x = np.asarray(x, dtype=float)
    return _as_output(x * sigmoid(x))


def _xsilu(x, alpha):
    return x * (sigmoid(x) * (1.0 + 2.0 * alpha) - alpha)


def _xsilu_dx(x, alpha):
    s = sigmoid(x)
    return (s * (1.0 + 2.0 * alpha) - alpha) + x * s * (1.0 - s) * (1.0 + 2.0 * alpha)


# 0.5 (1 + tanh(u)) is evaluated as sigmoid(2u): 1 + tanh(u) cancels for u << 0
def _gelu_tanh(x):
    s = sigmoid(2.0 * SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x))
    return x * s


def _gelu_tanh_dx(x):
    s = sigmoid(2.0 * SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x))
    return s + 2.0 * x * s * (1.0 - s) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)


BASELINES = (
    ActivationKind.Elu, ActivationKind.Relu2, ActivationKind.Silu,
    ActivationKind.GeluTanh, ActivationKind.XSilu, ActivationKind.Relu
)


def baseline_fwd(kind: ActivationKind, x: Real, params: Optional[ConstrainedParams] = None,
                 hyper: Optional[FixedHyper] = None) -> Real:
    """ Closed forms of the baseline activations

    >>> round(baseline_fwd(ActivationKind.Elu, -1.0), 7)
    -0.6321206
    >>> baseline_fwd(ActivationKind.Relu2, 3.0)
    9.0
    """
    hyper = hyper or FixedHyper()
    x = np.asarray(x, dtype=float)
    if kind in _BRANCHES and kind in BASELINES:
        br = _BRANCHES[kind]
        return _piecewise((br.negative, br.positive), x, params, hyper)
    if kind is ActivationKind.Silu:
        return silu(x)
    if kind is ActivationKind.GeluTanh:
        return _as_output(_gelu_tanh(x))
    if kind is ActivationKind.XSilu:
        if params is None:
            raise ValueError("xSiLU requires its alpha (ConstrainedParams.alpha_p)")
        return _as_output(_xsilu(x, params.alpha_p))
    raise ValueError(f"{kind.value} is not a baseline activation")


def baseline_dx(kind: ActivationKind, x: Real, params: Optional[ConstrainedParams] = None,
                hyper: Optional[FixedHyper] = None) -> Real:
    hyper = hyper or FixedHyper()
    x = np.asarray(x, dtype=float)
    if kind in _BRANCHES and kind in BASELINES:
        br = _BRANCHES[kind]
        return _piecewise((br.negative_dx, br.positive_dx), x, params, hyper)
    if kind is ActivationKind.Silu:
        s = sigmoid(x)
        return _as_output(s * (1.0 + x * (1.0 - s)))
    if kind is ActivationKind.GeluTanh:
        return _as_output(_gelu_tanh_dx(x))
    if kind is ActivationKind.XSilu:
        if params is None:
            raise ValueError("xSiLU requires its alpha (ConstrainedParams.alpha_p)")
        return _as_output(_xsilu_dx(x, params.alpha_p))
    raise ValueError(f"{kind.value} is not a baseline activation")


# ---------------------------------------------------------------------------
# Dispatch over every kind
# ---------------------------------------------------------------------------


def forward(kind: ActivationKind, x: Real, params: Optional[ConstrainedParams], hyper: FixedHyper) -> Real:
    if kind is ActivationKind.XIelu:
        return xielu_fwd(x, params, hyper)
    if kind is ActivationKind.XIPRelu:
        return xiprelu_fwd(x, params, hyper)
    return baseline_fwd(kind, x, params, hyper)


def grad_input(kind: ActivationKind, x: Real, params: Optional[ConstrainedParams], hyper: FixedHyper) -> Real:
    if kind is ActivationKind.XIelu:
        return xielu_dx(x, params, hyper)
    if kind is ActivationKind.XIPRelu:
        return xiprelu_dx(x, params, hyper)
    return baseline_dx(kind, x, params, hyper)


def grad_params(kind: ActivationKind, x: Real, params: Optional[ConstrainedParams],
                hyper: FixedHyper) -> Tuple[Real, Real]:
    """ (d/d alpha_p, d/d alpha_n) of the activation, zeros for kinds without trainables """
    if kind is ActivationKind.XIelu:
        return xielu_dparams(x, params, hyper)
    if kind is ActivationKind.XIPRelu:
        return xiprelu_dparams(x, params, hyper)
    x = np.asarray(x, dtype=float)
    if kind is ActivationKind.XSilu:
        return _as_output(x * (2.0 * sigmoid(x) - 1.0)), _as_output(np.zeros_like(x))
    return _as_output(np.zeros_like(x)), _as_output(np.zeros_like(x))


def grad_beta(kind: ActivationKind, x: Real, params: Optional[ConstrainedParams], hyper: FixedHyper) -> Real:
    """ d/d beta of the activation with both alphas held fixed: x on every side carrying a beta x term.

    Through the shifted constraint a trained beta also moves alpha_n, see :func:`dalpha_n_dbeta`.

    >>> grad_beta(ActivationKind.XIelu, np.array([-2.0, 3.0]), ConstrainedParams(0.8, 0.8), FixedHyper()).tolist()
    [-2.0, 3.0]
    """
    x = np.asarray(x, dtype=float)
    if not kind.has_beta:
        return _as_output(np.zeros_like(x))
    negative = x
    if kind is ActivationKind.XIelu and hyper.negative_component in ("silu", "xsilu"):
        negative = 0.0 * x
    return _as_output(np.where(x > 0, x, negative))


# ---------------------------------------------------------------------------
# Operation census of the inference path (constraint evaluations excluded)
# ---------------------------------------------------------------------------


_OP_COUNTS: Dict[ActivationKind, OpCount] = {
    # branch select, alpha_p*x*x + beta*x or alpha_n*expm1(x) - alpha_n*x + beta*x
    ActivationKind.XIelu: OpCount(exps=1, mults=4, adds=4, divs=0, conditionals=1),
    # max(0, x) then x*x
    ActivationKind.Relu2: OpCount(exps=0, mults=1, adds=0, divs=0, conditionals=1),
    ActivationKind.XIPRelu: OpCount(exps=0, mults=4, adds=1, divs=0, conditionals=1),
    ActivationKind.Relu: OpCount(exps=0, mults=0, adds=0, divs=0, conditionals=1),
    ActivationKind.Elu: OpCount(exps=1, mults=1, adds=1, divs=0, conditionals=1),
    # x / (1 + e^-x)
    ActivationKind.Silu: OpCount(exps=1, mults=2, adds=1, divs=1, conditionals=0),
    # scalar tanh form, tanh written with two exponentials
    ActivationKind.GeluTanh: OpCount(exps=2, mults=6, adds=4, divs=1, conditionals=0),
    # x * (sigma(x) * (1 + 2 alpha) - alpha) with (1 + 2 alpha) folded at inference
    ActivationKind.XSilu: OpCount(exps=1, mults=3, adds=2, divs=1, conditionals=0),
}


def op_count(kind: ActivationKind) -> OpCount:
    """ Static operation census of the scalar hot path

    >>> op_count(ActivationKind.XIelu)
    OpCount(exps=1, mults=4, adds=4, divs=0, conditionals=1)
    """
    return _OP_COUNTS[kind]
