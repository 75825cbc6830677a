# loss_models.py - Loss functions L_i(lambda) and upper bounds B(lambda)

"""
Concrete loss families for conformal risk control.

StepLoss   - left-continuous nondecreasing piecewise-constant loss
             L(lam) = base + sum_j c_j * 1[g_j < lam]
LinearLoss - L(lam) = a * lam, slope of either sign
BoundFn    - the upper bound B: constant, linear (b * lam) or a StepLoss
LossSet    - read-only vectorised view of many losses, used by the
             calibration hot loops

Losses serialise to one line each:

    step <base> <g1>:<c1> <g2>:<c2> ...
    linear <a>
"""

from dataclasses import dataclass
import math

import numpy as np

from .exceptions import LossFormatError, NonMonotoneLoss, NoPositivePixels
from .validators import validate_interval

# Slack allowed when comparing a loss against its bound; FNR jump sizes
# 1/|Y| do not always sum to exactly 1 in floating point.
BOUND_TOLERANCE = 1e-9


@dataclass(frozen=True)
class ParamInterval:
    """Closed parameter set Lambda = [lo, hi]"""

    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        is_valid, error = validate_interval(self.lo, self.hi, 'ParamInterval')
        if not is_valid:
            raise ValueError(error)
        object.__setattr__(self, 'lo', float(self.lo))
        object.__setattr__(self, 'hi', float(self.hi))

    def contains(self, lam):
        return self.lo <= lam <= self.hi

    def clip(self, lam):
        return min(max(lam, self.lo), self.hi)

    def grid(self, n=1001):
        """Uniform grid with n points including both ends"""
        return np.linspace(self.lo, self.hi, n)

    @property
    def width(self):
        return self.hi - self.lo


class StepLoss:
    """
    Left-continuous nondecreasing step function of lambda

    Jumps are sorted at construction and duplicate locations merge by
    summing their sizes, so evaluation is one binary search.
    """

    __slots__ = ('base', 'locations', 'sizes', '_cumulative')

    def __init__(self, base=0.0, jumps=()):
        """
        Args:
            base (float): Value c_0 for lambda at or below every jump
            jumps (iterable): (location g_j, size c_j) pairs, sizes >= 0
        """
        pairs = [(float(g), float(c)) for g, c in jumps]
        locations = np.array([g for g, _ in pairs], dtype=float)
        sizes = np.array([c for _, c in pairs], dtype=float)

        if not math.isfinite(float(base)):
            raise ValueError("StepLoss base must be finite")
        if locations.size and not np.all(np.isfinite(locations)):
            raise ValueError("StepLoss jump locations must be finite")
        if sizes.size and (not np.all(np.isfinite(sizes)) or np.any(sizes < 0)):
            raise NonMonotoneLoss("StepLoss jump sizes must be finite and nonnegative")

        if locations.size:
            locations, inverse = np.unique(locations, return_inverse=True)
            sizes = np.bincount(inverse, weights=sizes, minlength=locations.size)

        locations.setflags(write=False)
        sizes.setflags(write=False)
        cumulative = np.concatenate(([0.0], np.cumsum(sizes)))
        cumulative.setflags(write=False)

        self.base = float(base)
        self.locations = locations
        self.sizes = sizes
        self._cumulative = cumulative

    def evaluate(self, lam):
        """L(lam) = base + sum of jumps strictly below lam"""
        value = self.base + self._cumulative[np.searchsorted(self.locations, lam, side='left')]
        return float(value) if np.ndim(value) == 0 else value

    __call__ = evaluate

    @property
    def jumps(self):
        return list(zip(self.locations.tolist(), self.sizes.tolist()))

    @property
    def total(self):
        """Value once lambda is past every jump"""
        return self.base + float(self._cumulative[-1])

    is_nondecreasing = True

    def __eq__(self, other):
        if not isinstance(other, StepLoss):
            return NotImplemented
        return (self.base == other.base
                and np.array_equal(self.locations, other.locations)
                and np.array_equal(self.sizes, other.sizes))

    def __hash__(self):
        return hash((self.base, self.locations.tobytes(), self.sizes.tobytes()))

    def __repr__(self):
        return f"StepLoss(base={self.base!r}, jumps={self.jumps!r})"


@dataclass(frozen=True)
class LinearLoss:
    """L(lam) = slope * lam"""

    slope: float

    def evaluate(self, lam):
        value = self.slope * np.asarray(lam, dtype=float)
        return float(value) if np.ndim(value) == 0 else value

    __call__ = evaluate

    @property
    def is_nondecreasing(self):
        return self.slope >= 0


@dataclass(frozen=True)
class BoundFn:
    """
    Upper bound B(lambda) on every loss

    kind is 'constant' (B = value), 'linear' (B = value * lam) or
    'step' (B = step(lam)).
    """

    kind: str
    value: float = 0.0
    step: StepLoss | None = None

    def __post_init__(self):
        if self.kind not in ('constant', 'linear', 'step'):
            raise ValueError(f"Unknown bound kind: {self.kind}")
        if self.kind == 'linear' and self.value < 0:
            raise NonMonotoneLoss("A linear bound needs a nonnegative slope")
        if self.kind == 'step' and self.step is None:
            raise ValueError("A step bound needs a StepLoss")

    @classmethod
    def constant(cls, b):
        return cls('constant', float(b))

    @classmethod
    def linear(cls, b):
        return cls('linear', float(b))

    @classmethod
    def from_step(cls, step):
        return cls('step', 0.0, step)

    def evaluate(self, lam):
        if self.kind == 'constant':
            value = np.full(np.shape(lam), self.value, dtype=float)
        elif self.kind == 'linear':
            value = self.value * np.asarray(lam, dtype=float)
        else:
            value = self.step.evaluate(lam)
        return float(value) if np.ndim(value) == 0 else value

    __call__ = evaluate

    @property
    def slope(self):
        """dB/dlambda for the linear kind, 0 otherwise"""
        return self.value if self.kind == 'linear' else 0.0

    @property
    def jump_locations(self):
        if self.kind == 'step':
            return self.step.locations
        return np.empty(0)

    @classmethod
    def parse(cls, spec):
        """
        Parse a bound from text

        Examples:
            >>> BoundFn.parse('constant:1')
            BoundFn(kind='constant', value=1.0, step=None)
            >>> BoundFn.parse('linear:100').slope
            100.0
            >>> BoundFn.parse('step:0 0.5:1')(0.75)
            1.0
        """
        text = str(spec).strip()
        if not text:
            raise LossFormatError("Empty bound spec")
        if ':' not in text.split()[0]:
            try:
                return cls.constant(float(text))
            except ValueError:
                raise LossFormatError(f"Cannot parse bound spec '{spec}'")

        kind, _, rest = text.partition(':')
        kind = kind.strip().lower()
        try:
            if kind == 'constant':
                return cls.constant(float(rest))
            if kind == 'linear':
                return cls.linear(float(rest))
            if kind == 'step':
                return cls.from_step(parse_loss_line(f"step {rest}"))
        except (ValueError, IndexError) as e:
            raise LossFormatError(f"Cannot parse bound spec '{spec}': {e}")
        raise LossFormatError(f"Unknown bound kind in '{spec}'")

    def describe(self):
        if self.kind == 'step':
            return f"step:{format_loss(self.step)[len('step '):]}"
        return f"{self.kind}:{self.value!r}"


def eval_loss(loss, lam):
    """
    Evaluate a StepLoss or LinearLoss at lambda

    Args:
        loss (StepLoss | LinearLoss): Loss to evaluate
        lam (float): Parameter value

    Returns:
        float: L(lam)

    Examples:
        >>> eval_loss(StepLoss(0, [(0.4, 1)]), 0.4)
        0.0
        >>> eval_loss(LinearLoss(-2), 0.5)
        -1.0
    """
    return loss.evaluate(lam)


def fnr_step_loss(scores_of_positive_pixels):
    """
    False-negative-rate loss of one image as a StepLoss

    L(lam) = (1/|Y|) * sum over positive pixels of 1[score < lam]

    Args:
        scores_of_positive_pixels (list): Model scores of the positive pixels

    Returns:
        StepLoss: base 0, a jump of 1/|Y| at every positive-pixel score
    """
    scores = np.asarray(scores_of_positive_pixels, dtype=float).ravel()
    if scores.size == 0:
        raise NoPositivePixels("FNR is undefined for an image without positive pixels")
    size = 1.0 / scores.size
    return StepLoss(0.0, ((s, size) for s in scores))


def miscoverage_step_loss(score):
    """
    Miscoverage loss 1[s > 1 - lam] of a conformal prediction set

    Equivalent to a unit jump located at 1 - s.
    """
    return StepLoss(0.0, [(1.0 - float(score), 1.0)])


def validate_bound(losses, bound, grid, eps=1e-9):
    """
    Check L_i(lam) <= B(lam) for every loss on a grid

    Jump locations of step losses and bounds inside the grid's range are
    checked as well, together with their eps-neighbours.

    Args:
        losses (list): StepLoss / LinearLoss instances
        bound (BoundFn): Candidate upper bound
        grid (list): Lambda values to check
        eps (float): Offset around jump locations

    Returns:
        bool: True if the bound holds everywhere checked
    """
    losses = list(losses.losses) if isinstance(losses, LossSet) else list(losses)
    if not losses:
        return True

    grid = np.asarray(grid, dtype=float).ravel()
    if grid.size == 0:
        return True

    lo, hi = grid.min(), grid.max()
    jumps = [loss.locations for loss in losses if isinstance(loss, StepLoss)]
    jumps.append(bound.jump_locations)
    jumps = np.concatenate(jumps) if jumps else np.empty(0)
    jumps = jumps[(jumps >= lo) & (jumps <= hi)]
    extra = np.concatenate((jumps - eps, jumps, jumps + eps))
    points = np.unique(np.clip(np.concatenate((grid, extra)), lo, hi))

    loss_set = LossSet(losses)
    for lam in points:
        limit = bound.evaluate(lam) + BOUND_TOLERANCE * max(1.0, abs(bound.evaluate(lam)))
        if np.any(loss_set.values(lam) > limit):
            return False
    return True


def check_nondecreasing(losses, grid=None):
    """
    Check that every loss is nondecreasing in lambda

    Step losses are nondecreasing by construction and linear losses iff
    their slope is nonnegative; a grid, when given, is also checked
    pointwise.

    Args:
        losses (list | LossSet): Losses to check
        grid (list): Optional lambda values

    Returns:
        bool: True if no loss decreases
    """
    loss_set = as_loss_set(losses)
    if not loss_set.is_nondecreasing:
        return False
    if grid is None or loss_set.n == 0:
        return True

    grid = np.sort(np.asarray(grid, dtype=float).ravel())
    previous = None
    for lam in grid:
        current = loss_set.values(lam)
        if previous is not None and np.any(current < previous):
            return False
        previous = current
    return True


class LossSet:
    """
    Vectorised view of N losses for repeated evaluation at many lambdas

    Step jumps of all losses are merged into one sorted array so the
    per-loss values at lam come from a single prefix bincount.
    """

    def __init__(self, losses):
        losses = tuple(losses)
        for loss in losses:
            if not isinstance(loss, (StepLoss, LinearLoss)):
                raise TypeError(f"Unsupported loss type: {type(loss).__name__}")

        self.losses = losses
        self.n = len(losses)
        self.bases = np.array([loss.base if isinstance(loss, StepLoss) else 0.0
                               for loss in losses], dtype=float)
        self.slopes = np.array([loss.slope if isinstance(loss, LinearLoss) else 0.0
                                for loss in losses], dtype=float)

        owners, locations, sizes = [], [], []
        for i, loss in enumerate(losses):
            if isinstance(loss, StepLoss) and loss.locations.size:
                owners.append(np.full(loss.locations.size, i))
                locations.append(loss.locations)
                sizes.append(loss.sizes)

        if locations:
            locations = np.concatenate(locations)
            order = np.argsort(locations, kind='stable')
            self.locations = locations[order]
            self.owners = np.concatenate(owners)[order]
            self.sizes = np.concatenate(sizes)[order]
        else:
            self.locations = np.empty(0)
            self.owners = np.empty(0, dtype=int)
            self.sizes = np.empty(0)

        self.has_linear = bool(np.any(self.slopes != 0))

    def __len__(self):
        return self.n

    def __iter__(self):
        return iter(self.losses)

    def values(self, lam):
        """Per-loss values L_i(lam) in input order"""
        values = self.bases + self.slopes * lam if self.has_linear else self.bases.copy()
        k = int(np.searchsorted(self.locations, lam, side='left'))
        if k:
            values += np.bincount(self.owners[:k], weights=self.sizes[:k], minlength=self.n)
        return values

    @property
    def is_nondecreasing(self):
        return bool(np.all(self.slopes >= 0))

    @property
    def jump_locations(self):
        return self.locations


def as_loss_set(losses):
    """Return losses as a LossSet, reusing an existing one"""
    return losses if isinstance(losses, LossSet) else LossSet(losses)


def parse_loss_line(line):
    """
    Parse one line of the loss file format

    Examples:
        >>> parse_loss_line('linear -2').slope
        -2.0
        >>> parse_loss_line('step 0 0.3:0.5 0.7:0.5')(0.5)
        0.5
    """
    parts = line.split()
    if not parts:
        raise LossFormatError("Empty loss line")

    kind = parts[0].lower()
    try:
        if kind == 'linear':
            if len(parts) != 2:
                raise LossFormatError(f"'linear' takes one slope: '{line}'")
            return LinearLoss(float(parts[1]))
        if kind == 'step':
            if len(parts) < 2:
                raise LossFormatError(f"'step' needs a base value: '{line}'")
            jumps = []
            for token in parts[2:]:
                location, sep, size = token.partition(':')
                if not sep:
                    raise LossFormatError(f"Jump '{token}' must look like g:c")
                jumps.append((float(location), float(size)))
            return StepLoss(float(parts[1]), jumps)
    except ValueError as e:
        if isinstance(e, LossFormatError):
            raise
        raise LossFormatError(f"Cannot parse loss line '{line}': {e}")

    raise LossFormatError(f"Unknown loss kind '{parts[0]}'")


def format_loss(loss):
    """Serialise one loss to its text line"""
    if isinstance(loss, LinearLoss):
        return f"linear {loss.slope!r}"
    jumps = ' '.join(f"{g!r}:{c!r}" for g, c in loss.jumps)
    return f"step {loss.base!r} {jumps}".rstrip()


def read_losses(path):
    """
    Read a loss file (blank lines and '#' comments are ignored)

    Args:
        path (str): File path

    Returns:
        list: StepLoss / LinearLoss instances
    """
    losses = []
    with open(path, 'r', encoding='utf-8') as f:
        for line_number, line in enumerate(f, 1):
            line = line.split('#', 1)[0].strip()
            if not line:
                continue
            try:
                losses.append(parse_loss_line(line))
            except LossFormatError as e:
                raise LossFormatError(f"{path}:{line_number}: {e}")
    return losses


def write_losses(path, losses):
    """Write losses one per line"""
    with open(path, 'w', encoding='utf-8') as f:
        for loss in losses:
            f.write(format_loss(loss) + '\n')
