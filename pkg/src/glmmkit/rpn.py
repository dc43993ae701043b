"""Stack-machine programs for covariance entries.

A compiled covariance term is a reverse-Polish instruction stream that, run
against a pair of rows and a parameter vector, leaves the covariance value
on the stack. Programs evaluate vectorised: the row-pair arguments are index
arrays and every stack slot holds a numpy array.

Instruction set (version 1)
---------------------------
PUSH_DATA k    push variable k of the first row, then of the second row
PUSH_PARAM i   push the i-th parameter of this program
PUSH_CONST c   push the constant c
ADD SUB MUL DIV POW
               binary; pop b then a, push a op b
NEG EXP LOG SQRT COS SIN
               unary on the top of stack
SINC           sin(x)/x with value 1 at x = 0
VERC           (1 - cos(x))/x with value 0 at x = 0
ABS_DIFF       pop b then a, push |a - b|
EUCLID_FOLD d  pop d pairs pushed by PUSH_DATA, push the Euclidean distance
IS_ZERO        push 1.0 where the popped value is 0, else 0.0
CLAMP1         push min(x, 1); compactly supported kernels vanish at 1
BESSEL_K       pop x then nu, push K_nu(x)
BESSEL_POW     pop x then nu, push x^nu * K_nu(x), with the x -> 0 limit
               Gamma(nu) * 2^(nu-1)
GAMMA_FN       Gamma function of the top of stack
"""

import enum
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import special


class Op(enum.IntEnum):
    PUSH_DATA = 0
    PUSH_PARAM = 1
    PUSH_CONST = 2
    ADD = 3
    SUB = 4
    MUL = 5
    DIV = 6
    NEG = 7
    POW = 8
    EXP = 9
    LOG = 10
    SQRT = 11
    COS = 12
    SIN = 13
    SINC = 14
    VERC = 15
    ABS_DIFF = 16
    EUCLID_FOLD = 17
    IS_ZERO = 18
    CLAMP1 = 19
    BESSEL_K = 20
    BESSEL_POW = 21
    GAMMA_FN = 22


@dataclass(frozen=True)
class Instruction:
    op: Op
    arg: object = None


def _sinc(x):
    out = np.ones_like(x)
    nz = x != 0
    out[nz] = np.sin(x[nz]) / x[nz]
    return out


def _verc(x):
    out = np.zeros_like(x)
    nz = x != 0
    out[nz] = (1.0 - np.cos(x[nz])) / x[nz]
    return out


def _bessel_pow(nu, x):
    # limit of x^nu K_nu(x) as x -> 0+, for nu > 0
    out = np.empty_like(x)
    zero = x == 0
    out[zero] = special.gamma(nu[zero]) * 2.0 ** (nu[zero] - 1.0)
    nz = ~zero
    out[nz] = x[nz] ** nu[nz] * special.kv(nu[nz], x[nz])
    return out


@dataclass
class Program:
    """Instruction stream plus its parameter binding.

    ``param_indices`` maps the program's local parameter slots to positions
    in the model-level parameter vector, in formula order. Programs are
    immutable after construction and safe to evaluate concurrently.
    """

    instructions: list
    param_indices: list
    var_names: list = field(default_factory=list)

    @property
    def n_params(self):
        return len(self.param_indices)

    def evaluate(self, table_a, idx_a, table_b=None, idx_b=None, theta=None):
        """Run the program on row pairs (idx_a from table_a, idx_b from
        table_b) under global parameter vector theta. Returns an array the
        shape of the index arrays."""
        if table_b is None:
            table_b = table_a
        idx_a = np.asarray(idx_a)
        idx_b = np.asarray(idx_b)
        theta = np.asarray(theta, dtype=float)
        local = theta[self.param_indices]
        shape = np.broadcast_shapes(idx_a.shape, idx_b.shape)
        stack = []
        for ins in self.instructions:
            op = ins.op
            if op == Op.PUSH_DATA:
                stack.append(np.broadcast_to(table_a[idx_a, ins.arg], shape).astype(float))
                stack.append(np.broadcast_to(table_b[idx_b, ins.arg], shape).astype(float))
            elif op == Op.PUSH_PARAM:
                stack.append(np.full(shape, local[ins.arg]))
            elif op == Op.PUSH_CONST:
                stack.append(np.full(shape, float(ins.arg)))
            elif op == Op.ADD:
                b, a = stack.pop(), stack.pop()
                stack.append(a + b)
            elif op == Op.SUB:
                b, a = stack.pop(), stack.pop()
                stack.append(a - b)
            elif op == Op.MUL:
                b, a = stack.pop(), stack.pop()
                stack.append(a * b)
            elif op == Op.DIV:
                b, a = stack.pop(), stack.pop()
                stack.append(a / b)
            elif op == Op.NEG:
                stack.append(-stack.pop())
            elif op == Op.POW:
                b, a = stack.pop(), stack.pop()
                stack.append(a**b)
            elif op == Op.EXP:
                stack.append(np.exp(stack.pop()))
            elif op == Op.LOG:
                stack.append(np.log(stack.pop()))
            elif op == Op.SQRT:
                stack.append(np.sqrt(stack.pop()))
            elif op == Op.COS:
                stack.append(np.cos(stack.pop()))
            elif op == Op.SIN:
                stack.append(np.sin(stack.pop()))
            elif op == Op.SINC:
                stack.append(_sinc(stack.pop()))
            elif op == Op.VERC:
                stack.append(_verc(stack.pop()))
            elif op == Op.ABS_DIFF:
                b, a = stack.pop(), stack.pop()
                stack.append(np.abs(a - b))
            elif op == Op.EUCLID_FOLD:
                ssq = np.zeros(shape)
                for _ in range(ins.arg):
                    b, a = stack.pop(), stack.pop()
                    ssq += (a - b) ** 2
                stack.append(np.sqrt(ssq))
            elif op == Op.IS_ZERO:
                stack.append((stack.pop() == 0).astype(float))
            elif op == Op.CLAMP1:
                stack.append(np.minimum(stack.pop(), 1.0))
            elif op == Op.BESSEL_K:
                x, nu = stack.pop(), stack.pop()
                stack.append(special.kv(nu, x))
            elif op == Op.BESSEL_POW:
                x, nu = stack.pop(), stack.pop()
                stack.append(_bessel_pow(nu, x))
            elif op == Op.GAMMA_FN:
                stack.append(special.gamma(stack.pop()))
            else:  # pragma: no cover
                raise RuntimeError(f"unknown opcode {op!r}")
        if len(stack) != 1:
            raise RuntimeError(
                f"program left {len(stack)} values on the stack, expected 1"
            )
        return stack[0]

    def to_json(self):
        """Dump the instruction stream with symbolic opcode names."""
        return json.dumps(
            {
                "params": list(self.param_indices),
                "variables": list(self.var_names),
                "instructions": [
                    {"op": ins.op.name} if ins.arg is None
                    else {"op": ins.op.name, "arg": ins.arg}
                    for ins in self.instructions
                ],
            },
            indent=2,
        )
