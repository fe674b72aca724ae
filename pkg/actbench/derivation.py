""" Gradient-first derivation of activations

A gradient is described piecewise over the basis {1, x, x^2, e^x}. Trainable affine transforms are applied to it,
then it is integrated term by term and the integration constants are solved at each breakpoint so that the
resulting activation is continuous and passes through an anchor point.
"""
# Std lib
import bisect
import csv
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, TextIO, Tuple, Union
# Non std lib
import numpy as np
# Local
from actbench.utils import format_real


Real = Union[float, np.ndarray]
SPEC_HEADER = "# actbench gradient spec v1"


class SpecFormatError(ValueError):
    """ Malformed gradient spec text """


class UntrackedSlotError(KeyError):
    """ Derivative requested for a parameter slot no piece tracks """


def _as_output(value: np.ndarray) -> Real:
    return float(value) if np.ndim(value) == 0 else value


@dataclass(frozen=True)
class BasisCoeffs:
    """ c0 + c1 x + c2 x^2 + ce e^x """
    c0: float = 0.0
    c1: float = 0.0
    c2: float = 0.0
    ce: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(c) for c in (self.c0, self.c1, self.c2, self.ce)):
            raise ValueError(f"Basis coefficients must be finite, got {self}")

    def scaled(self, factor: float) -> "BasisCoeffs":
        return BasisCoeffs(self.c0 * factor, self.c1 * factor, self.c2 * factor, self.ce * factor)

    def shifted(self, beta: float) -> "BasisCoeffs":
        return replace(self, c0=self.c0 + beta)

    def __add__(self, other: "BasisCoeffs") -> "BasisCoeffs":
        return BasisCoeffs(self.c0 + other.c0, self.c1 + other.c1, self.c2 + other.c2, self.ce + other.ce)

    def evaluate(self, x: Real) -> Real:
        x = np.asarray(x, dtype=float)
        # ce e^x + c0 is written ce (e^x - 1) + (c0 + ce) so that exponential gradients stay exact near 0
        out = self.c1 * x + self.c2 * x * x + (self.c0 + self.ce)
        if self.ce:
            out = out + self.ce * np.expm1(x)
        return _as_output(out)


@dataclass(frozen=True)
class GradientSpec:
    """ Piecewise gradient. Piece i covers (breakpoints[i-1], breakpoints[i]], the last one is open on the right.

    :param slots: Name of the trainable scale tracked by each piece (None when untracked)
    :param sensitivities: Derivative of each piece's coefficients with respect to its slot
    """
    breakpoints: Tuple[float, ...]
    pieces: Tuple[BasisCoeffs, ...]
    slots: Tuple[Optional[str], ...] = ()
    sensitivities: Tuple[BasisCoeffs, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "breakpoints", tuple(float(b) for b in self.breakpoints))
        object.__setattr__(self, "pieces", tuple(self.pieces))
        if not self.pieces:
            raise ValueError("A gradient spec needs at least one piece")
        if len(self.pieces) != len(self.breakpoints) + 1:
            raise ValueError(
                f"{len(self.breakpoints)} breakpoints require {len(self.breakpoints) + 1} pieces, "
                f"got {len(self.pieces)}")
        if any(not math.isfinite(b) for b in self.breakpoints):
            raise ValueError("Breakpoints must be finite")
        if any(b >= a for a, b in zip(self.breakpoints[1:], self.breakpoints)):
            raise ValueError(f"Breakpoints must be strictly increasing, got {self.breakpoints}")
        if not self.slots:
            object.__setattr__(self, "slots", (None,) * len(self.pieces))
        if not self.sensitivities:
            object.__setattr__(self, "sensitivities", (BasisCoeffs(),) * len(self.pieces))
        if len(self.slots) != len(self.pieces) or len(self.sensitivities) != len(self.pieces):
            raise ValueError("slots and sensitivities must have one entry per piece")

    def interval(self, index: int) -> Tuple[float, float]:
        lo = self.breakpoints[index - 1] if index > 0 else -math.inf
        hi = self.breakpoints[index] if index < len(self.breakpoints) else math.inf
        return lo, hi

    def piece_index(self, x: float) -> int:
        """ Negative side owns the breakpoint

        >>> relu2_spec().piece_index(0.0), relu2_spec().piece_index(1e-300)
        (0, 1)
        """
        return bisect.bisect_left(self.breakpoints, x)

    def __add__(self, other: "GradientSpec") -> "GradientSpec":
        if self.breakpoints != other.breakpoints:
            raise ValueError("Gradient specs can only be added on identical breakpoints")
        return GradientSpec(self.breakpoints, tuple(a + b for a, b in zip(self.pieces, other.pieces)))


@dataclass(frozen=True)
class AffineTransform:
    """ alpha * g(x) + beta, with an extra scale on pieces entirely on one side of 0

    :param slot: Name under which alpha is tracked for :func:`integrate_dalpha`
    """
    alpha: float
    beta: float = 0.0
    positive_scale: float = 2.0
    negative_scale: float = 1.0
    slot: Optional[str] = None

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.alpha, self.beta, self.positive_scale, self.negative_scale)):
            raise ValueError(f"Affine transform must be finite, got {self}")


@dataclass(frozen=True)
class AntiderivativePiece:
    """ c0x x + c1x2 x^2 + c2x3 x^3 + cex e^x + C """
    c0x: float = 0.0
    c1x2: float = 0.0
    c2x3: float = 0.0
    cex: float = 0.0
    C: float = 0.0

    def evaluate(self, x: Real) -> Real:
        x = np.asarray(x, dtype=float)
        out = x * (self.c0x + x * (self.c1x2 + x * self.c2x3)) + (self.C + self.cex)
        if self.cex:
            out = out + self.cex * np.expm1(x)
        return _as_output(out)


@dataclass(frozen=True)
class DerivedActivation:
    breakpoints: Tuple[float, ...]
    pieces: Tuple[AntiderivativePiece, ...] = field(default_factory=tuple)

    @property
    def constants(self) -> Tuple[float, ...]:
        return tuple(piece.C for piece in self.pieces)

    def __call__(self, x: Real) -> Real:
        return evaluate(self, x)


def _scale_for(spec: GradientSpec, index: int, transform: AffineTransform) -> float:
    lo, hi = spec.interval(index)
    if lo >= 0:
        return transform.positive_scale
    if hi <= 0:
        return transform.negative_scale
    return 1.0


def apply_piecewise_affine(g: GradientSpec, transforms: Sequence[AffineTransform]) -> GradientSpec:
    """ Apply one transform per piece, so that each side can carry its own trainable scale """
    if len(transforms) != len(g.pieces):
        raise ValueError(f"Expected {len(g.pieces)} transforms, got {len(transforms)}")
    pieces, slots, sensitivities = [], [], []
    for index, (piece, transform) in enumerate(zip(g.pieces, transforms)):
        geometric = _scale_for(g, index, transform)
        pieces.append(piece.scaled(transform.alpha * geometric).shifted(transform.beta))
        slot, sensitivity = g.slots[index], g.sensitivities[index]
        if transform.slot is not None:
            if slot is not None:
                raise ValueError(f"Piece {index} already tracks `{slot}`, only one slot per piece is supported")
            slot, sensitivity = transform.slot, piece.scaled(geometric)
        elif slot is not None:
            sensitivity = sensitivity.scaled(transform.alpha * geometric)
        slots.append(slot)
        sensitivities.append(sensitivity)
    return GradientSpec(g.breakpoints, tuple(pieces), tuple(slots), tuple(sensitivities))


def apply_affine(g: GradientSpec, t: AffineTransform) -> GradientSpec:
    """ The integrand of alpha * g(x) + beta, the same transform on every piece """
    return apply_piecewise_affine(g, [t] * len(g.pieces))


def _antiderivative(piece: BasisCoeffs) -> AntiderivativePiece:
    return AntiderivativePiece(c0x=piece.c0, c1x2=piece.c1 / 2.0, c2x3=piece.c2 / 3.0, cex=piece.ce)


def integrate(g: GradientSpec, anchor_x: float = 0.0, anchor_value: float = 0.0) -> DerivedActivation:
    """ Term-wise antiderivative, constants solved outward from the piece holding the anchor

    >>> derived = integrate(xielu_spec(0.8, 0.8), 0.0, 0.0)
    >>> derived.constants
    (-0.8, 0.0)
    """
    if not (math.isfinite(anchor_x) and math.isfinite(anchor_value)):
        raise ValueError(f"Anchor must be finite, got ({anchor_x}, {anchor_value})")
    free = [_antiderivative(piece) for piece in g.pieces]
    solved: List[Optional[AntiderivativePiece]] = [None] * len(free)

    start = g.piece_index(anchor_x)
    solved[start] = replace(free[start], C=anchor_value - free[start].evaluate(anchor_x))
    for index in range(start + 1, len(free)):
        b = g.breakpoints[index - 1]
        solved[index] = replace(free[index], C=solved[index - 1].evaluate(b) - free[index].evaluate(b))
    for index in range(start - 1, -1, -1):
        b = g.breakpoints[index]
        solved[index] = replace(free[index], C=solved[index + 1].evaluate(b) - free[index].evaluate(b))
    return DerivedActivation(g.breakpoints, tuple(solved))


def _select(breakpoints: Tuple[float, ...], evaluators, x: Real) -> Real:
    x = np.asarray(x, dtype=float)
    index = np.searchsorted(np.asarray(breakpoints, dtype=float), x, side="left")
    out = np.zeros_like(x)
    for position, evaluate in enumerate(evaluators):
        mask = index == position
        if np.any(mask):
            out = np.where(mask, evaluate(x), out)
    return _as_output(out)


def evaluate(d: DerivedActivation, x: Real) -> Real:
    """ Evaluate a derived activation, pieces picked like :meth:`GradientSpec.piece_index` """
    return _select(d.breakpoints, [piece.evaluate for piece in d.pieces], x)


def eval_gradient(g: GradientSpec, x: Real) -> Real:
    """
    >>> eval_gradient(xielu_spec(0.8, 0.8), 0.0)
    0.5
    """
    return _select(g.breakpoints, [piece.evaluate for piece in g.pieces], x)


def gradient_discontinuities(g: GradientSpec) -> List[Tuple[float, float]]:
    """ (breakpoint, right limit - left limit) for every breakpoint

    >>> gradient_discontinuities(relu_gradient_spec())
    [(0.0, 1.0)]
    """
    return [
        (b, float(g.pieces[index + 1].evaluate(b)) - float(g.pieces[index].evaluate(b)))
        for index, b in enumerate(g.breakpoints)
    ]


def integrate_dalpha(g: GradientSpec, wrt: str, anchor_x: float = 0.0) -> DerivedActivation:
    """ d f / d alpha_wrt. The anchor value does not depend on alpha, so it is anchored at 0. """
    if wrt not in g.slots:
        raise UntrackedSlotError(wrt)
    pieces = tuple(
        sensitivity if slot == wrt else BasisCoeffs()
        for slot, sensitivity in zip(g.slots, g.sensitivities)
    )
    return integrate(GradientSpec(g.breakpoints, pieces), anchor_x, 0.0)


# ---------------------------------------------------------------------------
# Stock gradients
# ---------------------------------------------------------------------------


def elu_gradient_base() -> GradientSpec:
    """ ELU used as a gradient: e^x - 1 for x <= 0, x for x > 0 """
    return GradientSpec((0.0,), (BasisCoeffs(c0=-1.0, ce=1.0), BasisCoeffs(c1=1.0)))


def prelu_gradient_base() -> GradientSpec:
    return GradientSpec((0.0,), (BasisCoeffs(c1=1.0), BasisCoeffs(c1=1.0)))


def relu_gradient_spec() -> GradientSpec:
    return GradientSpec((0.0,), (BasisCoeffs(), BasisCoeffs(c0=1.0)))


def relu2_spec() -> GradientSpec:
    """ 2x on the positive side, the gradient of x^2 """
    return apply_affine(GradientSpec((0.0,), (BasisCoeffs(), BasisCoeffs(c1=1.0))), AffineTransform(1.0))


def xielu_spec(alpha_p: float, alpha_n: float, beta: float = 0.5, beta_n: Optional[float] = None,
               positive_scale: float = 2.0) -> GradientSpec:
    """ Trainable affine transforms of the ELU gradient. `positive_scale=1` gives the un-doubled variant. """
    beta_n = beta if beta_n is None else beta_n
    return apply_piecewise_affine(elu_gradient_base(), [
        AffineTransform(alpha_n, beta_n, slot="alpha_n"),
        AffineTransform(alpha_p, beta, positive_scale=positive_scale, slot="alpha_p"),
    ])


def xiprelu_spec(alpha_p: float, alpha_n: float, beta: float = 0.5, beta_n: Optional[float] = None) -> GradientSpec:
    beta_n = beta if beta_n is None else beta_n
    return apply_piecewise_affine(prelu_gradient_base(), [
        AffineTransform(alpha_n, beta_n, negative_scale=2.0, slot="alpha_n"),
        AffineTransform(alpha_p, beta, positive_scale=2.0, slot="alpha_p"),
    ])


def cubic_positive_spec(alpha_p: float, alpha_n: float, beta: float = 0.5) -> GradientSpec:
    """ xIELU with the positive gradient replaced by 3 alpha_p x^2 + beta (integrates to alpha_p x^3 + beta x) """
    base = GradientSpec((0.0,), (BasisCoeffs(c0=-1.0, ce=1.0), BasisCoeffs(c2=1.0)))
    return apply_piecewise_affine(base, [
        AffineTransform(alpha_n, beta, slot="alpha_n"),
        AffineTransform(alpha_p, beta, positive_scale=3.0, slot="alpha_p"),
    ])


# ---------------------------------------------------------------------------
# Text format
# ---------------------------------------------------------------------------


def parse_spec(text: str) -> GradientSpec:
    """ Read the plain-text piecewise description, one piece per line:

    `lo hi c0 c1 c2 ce [alpha=A] [beta=B] [scale=S] [slot=NAME]`

    >>> spec = parse_spec("-inf 0 -1 0 0 1 alpha=0.8 beta=0.5 slot=alpha_n\\n0 inf 0 1 0 0 alpha=0.8 beta=0.5 scale=2")
    >>> spec.pieces[1]
    BasisCoeffs(c0=0.5, c1=1.6, c2=0.0, ce=0.0)
    >>> eval_gradient(parse_spec("-inf inf 0 1 0 0 scale=2"), 1.0)
    2.0
    """
    bounds: List[Tuple[float, float]] = []
    pieces: List[BasisCoeffs] = []
    transforms: List[AffineTransform] = []
    has_transform = False
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if len(tokens) < 6:
            raise SpecFormatError(f"Line {number}: expected `lo hi c0 c1 c2 ce`, got `{line}`")
        try:
            lo, hi, c0, c1, c2, ce = (float(token) for token in tokens[:6])
            options = dict(token.split("=", 1) for token in tokens[6:])
            scale = float(options.pop("scale", 1.0))
            if not math.isfinite(scale):
                raise ValueError(f"scale must be finite, got {scale}")
            transform = AffineTransform(
                alpha=float(options.pop("alpha", 1.0)),
                beta=float(options.pop("beta", 0.0)),
                positive_scale=1.0,
                negative_scale=1.0,
                slot=options.pop("slot", None),
            )
            # The scale of a line applies to its piece whatever its sign, pieces crossing 0 included
            piece = BasisCoeffs(c0, c1, c2, ce).scaled(scale)
        except ValueError as error:
            raise SpecFormatError(f"Line {number}: {error}") from error
        if options:
            raise SpecFormatError(f"Line {number}: unknown options {', '.join(sorted(options))}")
        has_transform = has_transform or len(tokens) > 6
        bounds.append((lo, hi))
        pieces.append(piece)
        transforms.append(transform)

    if not pieces:
        raise SpecFormatError("Empty gradient spec")
    if bounds[0][0] != -math.inf or bounds[-1][1] != math.inf:
        raise SpecFormatError("The first piece must start at -inf and the last one end at inf")
    for (_, hi), (lo, _) in zip(bounds, bounds[1:]):
        if hi != lo:
            raise SpecFormatError(f"Pieces are not contiguous: {hi} is followed by {lo}")
    try:
        spec = GradientSpec(tuple(hi for _, hi in bounds[:-1]), tuple(pieces))
    except ValueError as error:
        raise SpecFormatError(str(error)) from error
    if has_transform:
        spec = apply_piecewise_affine(spec, transforms)
    return spec


def dump_spec(g: GradientSpec) -> str:
    """ Write the already transformed coefficients, readable back by :func:`parse_spec` """
    lines = [SPEC_HEADER, "# lo hi c0 c1 c2 ce"]
    for index, piece in enumerate(g.pieces):
        lo, hi = g.interval(index)
        lines.append(" ".join(format_real(v) for v in (lo, hi, piece.c0, piece.c1, piece.c2, piece.ce)))
    return "\n".join(lines) + "\n"


DERIVED_HEADER = ["lo", "hi", "c0x", "c1x2", "c2x3", "cex", "C"]


def write_derived_csv(d: DerivedActivation, handle: TextIO) -> None:
    writer = csv.writer(handle, lineterminator="\n")
    writer.writerow(DERIVED_HEADER)
    bounds = (-math.inf,) + d.breakpoints + (math.inf,)
    for index, piece in enumerate(d.pieces):
        writer.writerow([format_real(v) for v in (
            bounds[index], bounds[index + 1], piece.c0x, piece.c1x2, piece.c2x3, piece.cex, piece.C
        )])
