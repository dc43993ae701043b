"""Covariance function catalog.

Each kernel is described by its parameter count, admissible parameter box
(possibly depending on the number of distance dimensions), whether it
carries a free multiplicative scale, dimension limits for the compactly
supported families, and an emitter that appends the kernel's RPN
instructions to a program under construction.

Emitters receive a ``dist`` callback that appends instructions computing
the (possibly range-scaled) distance between the two rows for the kernel's
variables.
"""

import math

from .rpn import Instruction, Op


class KernelError(ValueError):
    pass


def _ins(out, op, arg=None):
    out.append(Instruction(op, arg))


def _param(out, k):
    _ins(out, Op.PUSH_PARAM, k)


def _const(out, c):
    _ins(out, Op.PUSH_CONST, float(c))


# ---------------------------------------------------------------------------
# emitters: leave exactly one covariance factor on the stack


def _emit_gr(out, p, dist):
    _param(out, p[0])
    _param(out, p[0])
    _ins(out, Op.MUL)
    dist(out)
    _ins(out, Op.IS_ZERO)
    _ins(out, Op.MUL)


def _emit_fexp(out, p, dist):
    _param(out, p[0])
    dist(out)
    _ins(out, Op.NEG)
    _param(out, p[1])
    _ins(out, Op.DIV)
    _ins(out, Op.EXP)
    _ins(out, Op.MUL)


def _emit_fexp0(out, p, dist):
    dist(out)
    _ins(out, Op.NEG)
    _param(out, p[0])
    _ins(out, Op.DIV)
    _ins(out, Op.EXP)


def _emit_sqexp(out, p, dist):
    _param(out, p[0])
    dist(out)
    _param(out, p[1])
    _ins(out, Op.DIV)
    _const(out, 2.0)
    _ins(out, Op.POW)
    _ins(out, Op.NEG)
    _ins(out, Op.EXP)
    _ins(out, Op.MUL)


def _emit_sqexp0(out, p, dist):
    dist(out)
    _param(out, p[0])
    _ins(out, Op.DIV)
    _const(out, 2.0)
    _ins(out, Op.POW)
    _ins(out, Op.NEG)
    _ins(out, Op.EXP)


def _emit_ar1(out, p, dist):
    _param(out, p[0])
    dist(out)
    _ins(out, Op.POW)


def _emit_bessel(out, p, dist):
    _param(out, p[0])
    dist(out)
    _ins(out, Op.BESSEL_K)


def _emit_matern(out, p, dist):
    # 2^(1-nu)/Gamma(nu) * y^nu K_nu(y),  y = sqrt(2 nu) d / rho
    def y(out):
        _const(out, 2.0)
        _param(out, p[0])
        _ins(out, Op.MUL)
        _ins(out, Op.SQRT)
        dist(out)
        _ins(out, Op.MUL)
        _param(out, p[1])
        _ins(out, Op.DIV)

    _const(out, 2.0)
    _const(out, 1.0)
    _param(out, p[0])
    _ins(out, Op.SUB)
    _ins(out, Op.POW)
    _param(out, p[0])
    _ins(out, Op.GAMMA_FN)
    _ins(out, Op.DIV)
    _param(out, p[0])
    y(out)
    _ins(out, Op.BESSEL_POW)
    _ins(out, Op.MUL)


def _scaled_y(out, dist):
    dist(out)
    _ins(out, Op.CLAMP1)


def _emit_wend0(out, p, dist):
    _param(out, p[0])
    _const(out, 1.0)
    _scaled_y(out, dist)
    _ins(out, Op.SUB)
    _param(out, p[1])
    _ins(out, Op.POW)
    _ins(out, Op.MUL)


def _emit_wend1(out, p, dist):
    # theta1 (1 + (theta2+1) y) (1-y)^(theta2+1)
    _param(out, p[0])
    _const(out, 1.0)
    _param(out, p[1])
    _const(out, 1.0)
    _ins(out, Op.ADD)
    _scaled_y(out, dist)
    _ins(out, Op.MUL)
    _ins(out, Op.ADD)
    _ins(out, Op.MUL)
    _const(out, 1.0)
    _scaled_y(out, dist)
    _ins(out, Op.SUB)
    _param(out, p[1])
    _const(out, 1.0)
    _ins(out, Op.ADD)
    _ins(out, Op.POW)
    _ins(out, Op.MUL)


def _emit_wend2(out, p, dist):
    # theta1 (1 + (theta2+2) y + ((theta2+2)^2 - 1) y^2 / 3) (1-y)^(theta2+2)
    def k2(out):
        _param(out, p[1])
        _const(out, 2.0)
        _ins(out, Op.ADD)

    _param(out, p[0])
    _const(out, 1.0)
    k2(out)
    _scaled_y(out, dist)
    _ins(out, Op.MUL)
    _ins(out, Op.ADD)
    k2(out)
    _const(out, 2.0)
    _ins(out, Op.POW)
    _const(out, 1.0)
    _ins(out, Op.SUB)
    _scaled_y(out, dist)
    _const(out, 2.0)
    _ins(out, Op.POW)
    _ins(out, Op.MUL)
    _const(out, 3.0)
    _ins(out, Op.DIV)
    _ins(out, Op.ADD)
    _ins(out, Op.MUL)
    _const(out, 1.0)
    _scaled_y(out, dist)
    _ins(out, Op.SUB)
    k2(out)
    _ins(out, Op.POW)
    _ins(out, Op.MUL)


def _emit_prodwm(out, p, dist):
    # theta1 * 2^(1-theta2)/Gamma(theta2) * y^theta2 K_theta2(y)
    #        * (1 + 11/2 y + 117/12 y^2) * (1-y)^(11/2)
    # The 11/2 exponent is the minimal one keeping the taper positive
    # definite in up to two dimensions.
    _param(out, p[0])
    _const(out, 2.0)
    _const(out, 1.0)
    _param(out, p[1])
    _ins(out, Op.SUB)
    _ins(out, Op.POW)
    _param(out, p[1])
    _ins(out, Op.GAMMA_FN)
    _ins(out, Op.DIV)
    _ins(out, Op.MUL)
    _param(out, p[1])
    _scaled_y(out, dist)
    _ins(out, Op.BESSEL_POW)
    _ins(out, Op.MUL)
    _const(out, 1.0)
    _const(out, 5.5)
    _scaled_y(out, dist)
    _ins(out, Op.MUL)
    _ins(out, Op.ADD)
    _const(out, 117.0 / 12.0)
    _scaled_y(out, dist)
    _const(out, 2.0)
    _ins(out, Op.POW)
    _ins(out, Op.MUL)
    _ins(out, Op.ADD)
    _ins(out, Op.MUL)
    _const(out, 1.0)
    _scaled_y(out, dist)
    _ins(out, Op.SUB)
    _const(out, 5.5)
    _ins(out, Op.POW)
    _ins(out, Op.MUL)


def _emit_prodcb(out, p, dist):
    # theta1 (1 + y^theta2)^(-3) ((1-y) cos(pi y) + sin(pi y)/pi)
    _param(out, p[0])
    _const(out, 1.0)
    _scaled_y(out, dist)
    _param(out, p[1])
    _ins(out, Op.POW)
    _ins(out, Op.ADD)
    _const(out, -3.0)
    _ins(out, Op.POW)
    _ins(out, Op.MUL)
    _const(out, 1.0)
    _scaled_y(out, dist)
    _ins(out, Op.SUB)
    _const(out, math.pi)
    _scaled_y(out, dist)
    _ins(out, Op.MUL)
    _ins(out, Op.COS)
    _ins(out, Op.MUL)
    _const(out, math.pi)
    _scaled_y(out, dist)
    _ins(out, Op.MUL)
    _ins(out, Op.SIN)
    _const(out, math.pi)
    _ins(out, Op.DIV)
    _ins(out, Op.ADD)
    _ins(out, Op.MUL)


def _emit_prodek(out, p, dist):
    # theta1 exp(-y^theta2) ((1-y) sinc(2 pi y) + verc(2 pi y)/pi)
    def two_pi_y(out):
        _const(out, 2.0 * math.pi)
        _scaled_y(out, dist)
        _ins(out, Op.MUL)

    _param(out, p[0])
    _scaled_y(out, dist)
    _param(out, p[1])
    _ins(out, Op.POW)
    _ins(out, Op.NEG)
    _ins(out, Op.EXP)
    _ins(out, Op.MUL)
    _const(out, 1.0)
    _scaled_y(out, dist)
    _ins(out, Op.SUB)
    two_pi_y(out)
    _ins(out, Op.SINC)
    _ins(out, Op.MUL)
    two_pi_y(out)
    _ins(out, Op.VERC)
    _const(out, math.pi)
    _ins(out, Op.DIV)
    _ins(out, Op.ADD)
    _ins(out, Op.MUL)


# ---------------------------------------------------------------------------
# catalog

# bound spec: (lower, upper, lower_strict, upper_strict); None = unbounded
_POS = (0.0, None, True, False)


class Kernel:

    def __init__(self, name, n_params, emitter, has_scale, compact=False,
                 max_dim=None, bounds=None, default=None):
        self.name = name
        self.n_params = n_params
        self.emitter = emitter
        self.has_scale = has_scale
        self.compact = compact
        self.max_dim = max_dim
        self._bounds = bounds
        self.default = default if default is not None else [0.5] * n_params

    def bounds(self, d):
        """Admissible parameter box; entries (lo, hi, lo_strict, hi_strict)."""
        if callable(self._bounds):
            return self._bounds(d)
        return list(self._bounds)

    def validate(self, theta, d):
        for k, ((lo, hi, slo, shi), val) in enumerate(zip(self.bounds(d), theta)):
            bad = (
                lo is not None and (val < lo or (slo and val == lo))
                or hi is not None and (val > hi or (shi and val == hi))
            )
            if bad:
                lob = "(" if slo else "["
                hib = ")" if shi else "]"
                raise KernelError(
                    f"{self.name}: parameter {k + 1} = {val} outside "
                    f"{lob}{lo}, {hi if hi is not None else 'inf'}{hib}"
                )


KERNELS = {
    "gr": Kernel("gr", 1, _emit_gr, has_scale=True, bounds=[_POS]),
    "fexp": Kernel("fexp", 2, _emit_fexp, has_scale=True, bounds=[_POS, _POS]),
    "fexp0": Kernel("fexp0", 1, _emit_fexp0, has_scale=False, bounds=[_POS]),
    "sqexp": Kernel("sqexp", 2, _emit_sqexp, has_scale=True, bounds=[_POS, _POS]),
    "sqexp0": Kernel("sqexp0", 1, _emit_sqexp0, has_scale=False, bounds=[_POS]),
    "ar1": Kernel("ar1", 1, _emit_ar1, has_scale=False,
                  bounds=[(0.0, 1.0, True, True)]),
    "bessel": Kernel("bessel", 1, _emit_bessel, has_scale=False, bounds=[_POS]),
    "matern": Kernel("matern", 2, _emit_matern, has_scale=False,
                     bounds=[_POS, _POS], default=[1.5, 0.5]),
    "wend0": Kernel("wend0", 2, _emit_wend0, has_scale=True, compact=True,
                    bounds=lambda d: [_POS, ((d + 1) / 2.0, None, False, False)],
                    default=[0.5, 2.0]),
    "wend1": Kernel("wend1", 2, _emit_wend1, has_scale=True, compact=True,
                    bounds=lambda d: [_POS, ((d + 3) / 2.0, None, False, False)],
                    default=[0.5, 3.0]),
    "wend2": Kernel("wend2", 2, _emit_wend2, has_scale=True, compact=True,
                    bounds=lambda d: [_POS, ((d + 5) / 2.0, None, False, False)],
                    default=[0.5, 4.0]),
    "prodwm": Kernel("prodwm", 2, _emit_prodwm, has_scale=True, compact=True,
                     max_dim=2, bounds=[_POS, _POS]),
    "prodcb": Kernel("prodcb", 2, _emit_prodcb, has_scale=True, compact=True,
                     max_dim=1, bounds=[_POS, (0.0, 2.0, False, False)]),
    "prodek": Kernel("prodek", 2, _emit_prodek, has_scale=True, compact=True,
                     max_dim=3, bounds=[_POS, _POS]),
}


def get_kernel(name):
    try:
        return KERNELS[name]
    except KeyError:
        raise KernelError(f"unknown covariance function {name!r}") from None
