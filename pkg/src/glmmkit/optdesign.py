"""Approximate c-optimal experimental designs by combinatorial search.

A design space partitions the observations of one or more models into
experimental conditions (each observation its own condition by default). A
design is a subset of conditions of fixed size minimising c' M_d^-1 c,
where M_d = X_d' Sigma_d^-1 X_d is the information of the sub-design; with
several candidate models the criterion is a weighted combination. Three
searches are provided: best-swap local search, greedy addition, and greedy
deletion. Candidate moves reuse the current inverse covariance through
rank-1 updates instead of refactorising.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

PD_PIVOT = 1e-10


class DegenerateDesignError(ValueError):

    def __init__(self, message, candidates=None):
        super().__init__(message)
        self.candidates = candidates or []


# ---------------------------------------------------------------------------
# rank-1 machinery


def downdate_inverse(ainv, index):
    """Inverse of the matrix with row/column ``index`` removed, from the
    full inverse: permute the row last, then G = C - f f'/e."""
    ainv = np.asarray(ainv, dtype=float)
    n = ainv.shape[0]
    keep = [i for i in range(n) if i != index]
    perm = keep + [index]
    b = ainv[np.ix_(perm, perm)]
    c, f, e = b[:-1, :-1], b[:-1, -1], b[-1, -1]
    if abs(e) < 1e-12:
        raise FloatingPointError(
            f"downdate pivot {e:.3e} too small; refactorise instead"
        )
    return c - np.outer(f, f) / e


def expand_inverse(sinv, k, h):
    """Inverse of the covariance expanded by one observation, via two
    rank-1 corrections of the block-diagonal extension.

    k is the cross-covariance with the current rows, h the new diagonal
    entry. O(n^2)."""
    sinv = np.asarray(sinv, dtype=float)
    k = np.asarray(k, dtype=float)
    n = sinv.shape[0]
    if h <= 0:
        raise FloatingPointError(f"new diagonal {h:.3e} not positive")
    star = np.zeros((n + 1, n + 1))
    star[:n, :n] = sinv
    star[n, n] = 1.0 / h
    u = np.concatenate([k, [0.0]])
    v = np.zeros(n + 1)
    v[n] = 1.0
    # H** = H* + u v'
    su = star @ u
    sv = star[:, n].copy()          # star @ v; star is symmetric
    denom = 1.0 + v @ su
    if abs(denom) < 1e-12:
        raise FloatingPointError("rank-1 update denominator near zero")
    dstar = star - np.outer(su, sv) / denom
    # H = H** + v u'; dstar is no longer symmetric, keep row/column apart
    dv = dstar @ v
    utd = u @ dstar
    denom2 = 1.0 + u @ dv
    if abs(denom2) < 1e-12:
        raise FloatingPointError("rank-1 update denominator near zero")
    return dstar - np.outer(dv, utd) / denom2


# ---------------------------------------------------------------------------
# design space


@dataclass
class SearchResult:
    design: tuple            # condition ids, sorted
    objective: float
    trace: list = field(default_factory=list)
    rows: np.ndarray = None
    algorithm: str = ""


class _ModelContext:
    """Dense pieces of one candidate model needed by the searches."""

    def __init__(self, model, c, rm_idx=None):
        self.x = np.delete(model.X, rm_idx, axis=1) if rm_idx else model.X.copy()
        self.c = np.delete(np.asarray(c, dtype=float), rm_idx) if rm_idx \
            else np.asarray(c, dtype=float)
        if self.c.shape[0] != self.x.shape[1]:
            raise ValueError(
                f"c vector has length {self.c.shape[0]}, X has "
                f"{self.x.shape[1]} columns"
            )
        self.sigma = model.sigma()
        self.z_dense = model.re.z.toarray() if model.q else np.zeros((model.n, 0))
        self.w = model.weights()
        # observation -> covariance blocks it loads on (for the
        # uncorrelated-conditions check)
        self.obs_blocks = []
        z = model.re.z.tocsr()
        col_block = np.empty(model.q, dtype=int)
        for b, (_, lo, hi) in enumerate(model.re.blocks):
            col_block[lo:hi] = b
        for i in range(model.n):
            cols = z.indices[z.indptr[i]:z.indptr[i + 1]]
            self.obs_blocks.append(frozenset(col_block[c] for c in cols))


class DesignSpace:
    """One or more candidate models over a shared set of observations.

    Parameters
    ----------
    models : list of Glmm
    c_vectors : list of arrays, one per model
        Target linear combinations of the fixed effects.
    conditions : array of length n, optional
        Experimental-condition label per observation; observations sharing
        a label enter or leave designs together. Defaults to one condition
        per observation.
    weights : array of length R, optional
        Prior model weights; uniform by default.
    robust_kind : "weighted-mean" or "log-sum"
    """

    def __init__(self, models, c_vectors, conditions=None, weights=None,
                 robust_kind="weighted-mean", rm_cols=None):
        if not models:
            raise ValueError("at least one model is required")
        self.n = models[0].n
        for m in models:
            if m.n != self.n:
                raise ValueError("all models must describe the same rows")
        if len(c_vectors) != len(models):
            raise ValueError("one c vector per model is required")
        if robust_kind not in ("weighted-mean", "log-sum"):
            raise ValueError("robust_kind must be 'weighted-mean' or 'log-sum'")
        self.robust_kind = robust_kind
        rm_idx = sorted(rm_cols) if rm_cols else None
        self.ctx = [_ModelContext(m, c, rm_idx) for m, c in zip(models, c_vectors)]
        if weights is None:
            weights = np.full(len(models), 1.0 / len(models))
        self.weights = np.asarray(weights, dtype=float)
        if self.weights.shape != (len(models),):
            raise ValueError("one weight per model is required")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be nonnegative and sum to one")

        if conditions is None:
            conditions = np.arange(self.n)
        conditions = np.asarray(conditions)
        if conditions.shape != (self.n,):
            raise ValueError("conditions must label every observation")
        labels = []
        self.cond_rows = []
        for lab in sorted(set(conditions.tolist())):
            labels.append(lab)
            self.cond_rows.append(np.nonzero(conditions == lab)[0])
        self.labels = labels
        self.j = len(labels)

        # duplicate conditions are exchangeable in every design: either the
        # random-effect loadings match row for row, or the conditions touch
        # only their own covariance blocks and look identical internally
        block_owners = [dict() for _ in self.ctx]
        for r, ctx in enumerate(self.ctx):
            for k in range(self.j):
                for b in self._cond_blocks(ctx, k):
                    block_owners[r].setdefault(b, set()).add(k)
        isolated = []
        for k in range(self.j):
            private = all(
                block_owners[r][b] == {k}
                for r, ctx in enumerate(self.ctx)
                for b in self._cond_blocks(ctx, k)
            )
            isolated.append(private)
        sigs_z, sigs_iso = {}, {}
        self.duplicate_of = np.arange(self.j)
        for k, rows in enumerate(self.cond_rows):
            sig_z = tuple(
                (ctx.x[rows].tobytes(), ctx.z_dense[rows].tobytes(),
                 ctx.w[rows].tobytes())
                for ctx in self.ctx
            )
            if sig_z in sigs_z:
                self.duplicate_of[k] = sigs_z[sig_z]
                continue
            sigs_z[sig_z] = k
            if isolated[k]:
                sig = tuple(
                    (ctx.x[rows].tobytes(), ctx.w[rows].tobytes(),
                     ctx.sigma[np.ix_(rows, rows)].tobytes())
                    for ctx in self.ctx
                )
                if sig in sigs_iso:
                    self.duplicate_of[k] = sigs_iso[sig]
                else:
                    sigs_iso[sig] = k

        self._uncorrelated = self._check_uncorrelated()
        self._marginal_info = None
        if self._uncorrelated:
            self._marginal_info = [
                [self._condition_info(ctx, k) for k in range(self.j)]
                for ctx in self.ctx
            ]

    # -- structure ---------------------------------------------------------

    def _cond_blocks(self, ctx, k):
        out = set()
        for i in self.cond_rows[k]:
            out |= ctx.obs_blocks[i]
        return out

    def _check_uncorrelated(self):
        for ctx in self.ctx:
            seen = {}
            for k in range(self.j):
                for b in self._cond_blocks(ctx, k):
                    if b in seen and seen[b] != k:
                        return False
                    seen[b] = k
        return True

    def _condition_info(self, ctx, k):
        rows = self.cond_rows[k]
        sig = ctx.sigma[np.ix_(rows, rows)]
        xk = ctx.x[rows]
        return xk.T @ np.linalg.solve(sig, xk)

    def design_rows(self, design):
        idx = [r for k in sorted(design) for r in self.cond_rows[k]]
        return np.array(idx, dtype=int)

    # -- objective ----------------------------------------------------------

    def _crit_from_info(self, info, ctx):
        try:
            chol = cho_factor(info, lower=True)
        except np.linalg.LinAlgError:
            return None
        if np.min(np.diag(chol[0])) ** 2 <= PD_PIVOT:
            return None
        return float(ctx.c @ cho_solve(chol, ctx.c))

    def _combine(self, gs):
        if any(g is None or g <= 0 for g in gs):
            return None
        if self.robust_kind == "log-sum":
            return float(np.dot(self.weights, np.log(gs)))
        return float(np.dot(self.weights, gs))

    def objective(self, design, use_shortcut=None):
        """Criterion value of a design (iterable of condition ids); None
        when the information matrix is not positive definite."""
        design = sorted(set(design))
        if use_shortcut is None:
            use_shortcut = self._uncorrelated
        gs = []
        for r, ctx in enumerate(self.ctx):
            if use_shortcut and self._marginal_info is not None:
                info = sum(self._marginal_info[r][k] for k in design)
                gs.append(self._crit_from_info(info, ctx))
            else:
                rows = self.design_rows(design)
                sig = ctx.sigma[np.ix_(rows, rows)]
                xd = ctx.x[rows]
                try:
                    info = xd.T @ np.linalg.solve(sig, xd)
                except np.linalg.LinAlgError:
                    return None
                gs.append(self._crit_from_info(info, ctx))
        return self._combine(gs)

    def report_rank_candidates(self, design):
        """Columns that are constant on the design's rows (the usual cause
        of a singular information matrix)."""
        rows = self.design_rows(design)
        out = []
        for ctx in self.ctx:
            for j in range(ctx.x.shape[1]):
                col = ctx.x[rows, j]
                if np.ptp(col) == 0.0 and not np.all(col == 1.0):
                    out.append(j)
        return sorted(set(out))

    # -- incremental state ----------------------------------------------------

    def _state_new(self, design):
        rows = []
        for k in sorted(design):
            rows.extend(self.cond_rows[k].tolist())
        rows = np.array(rows, dtype=int)
        invs = []
        for ctx in self.ctx:
            sig = ctx.sigma[np.ix_(rows, rows)]
            try:
                invs.append(np.linalg.inv(sig))
            except np.linalg.LinAlgError:
                return None
        return {"design": sorted(design), "rows": rows.tolist(), "invs": invs}

    def _state_remove(self, state, cond):
        state = {
            "design": [k for k in state["design"] if k != cond],
            "rows": list(state["rows"]),
            "invs": [inv.copy() for inv in state["invs"]],
        }
        for r in self.cond_rows[cond]:
            pos = state["rows"].index(int(r))
            state["rows"].pop(pos)
            state["invs"] = [
                downdate_inverse(inv, pos) for inv in state["invs"]
            ]
        state["design"].sort()
        return state

    def _state_add(self, state, cond):
        state = {
            "design": state["design"] + [cond],
            "rows": list(state["rows"]),
            "invs": [inv.copy() for inv in state["invs"]],
        }
        for r in self.cond_rows[cond]:
            new_invs = []
            for ctx, inv in zip(self.ctx, state["invs"]):
                k = ctx.sigma[np.ix_(np.array(state["rows"], dtype=int),
                                     np.array([r]))].ravel()
                h = float(ctx.sigma[r, r])
                new_invs.append(expand_inverse(inv, k, h))
            state["invs"] = new_invs
            state["rows"].append(int(r))
        state["design"].sort()
        return state

    def _state_objective(self, state):
        rows = np.array(state["rows"], dtype=int)
        gs = []
        for ctx, inv in zip(self.ctx, state["invs"]):
            xd = ctx.x[rows]
            info = xd.T @ inv @ xd
            gs.append(self._crit_from_info(info, ctx))
        return self._combine(gs)

    # -- searches ---------------------------------------------------------------

    def _random_design(self, j_prime, rng, attempts=50):
        reps = [k for k in range(self.j)]
        for _ in range(attempts):
            design = rng.choice(self.j, size=j_prime, replace=False).tolist()
            if self.objective(design) is not None:
                return design
        raise DegenerateDesignError(
            f"no non-degenerate random design of size {j_prime} found in "
            f"{attempts} attempts",
            candidates=self.report_rank_candidates(reps),
        )

    def local_search(self, j_prime, start=None, rng=None, use_rank1=True):
        """Best-improving swap search from a non-degenerate starting design."""
        rng = rng if rng is not None else np.random.default_rng()
        if j_prime < 1 or j_prime > self.j:
            raise ValueError(f"design size must be in [1, {self.j}]")
        design = list(start) if start is not None else \
            self._random_design(j_prime, rng)
        current = self.objective(design)
        if current is None:
            raise DegenerateDesignError(
                "starting design is degenerate",
                candidates=self.report_rank_candidates(design),
            )
        trace = [current]
        use_shortcut = self._uncorrelated
        state = None
        if use_rank1 and not use_shortcut:
            state = self._state_new(design)
        while True:
            out_set = sorted(set(design))
            in_set = [k for k in range(self.j) if k not in design]
            # skip swaps between equivalent duplicated conditions
            best = (0.0, None, None)
            for out_c in out_set:
                partial = None
                if state is not None:
                    try:
                        partial = self._state_remove(state, out_c)
                    except FloatingPointError:
                        partial = None   # refactorise candidate by candidate
                seen_dupe = set()
                for in_c in in_set:
                    rep = self.duplicate_of[in_c]
                    if rep == self.duplicate_of[out_c] or rep in seen_dupe:
                        continue
                    seen_dupe.add(rep)
                    if partial is not None:
                        try:
                            cand_state = self._state_add(partial, in_c)
                            val = self._state_objective(cand_state)
                        except FloatingPointError:
                            cand = [k for k in design if k != out_c] + [in_c]
                            val = self.objective(cand, use_shortcut=False)
                    else:
                        cand = [k for k in design if k != out_c] + [in_c]
                        val = self.objective(cand, use_shortcut=use_shortcut)
                    if val is None:
                        continue
                    gain = current - val
                    if gain > best[0] + 1e-13:
                        best = (gain, out_c, in_c)
            if best[1] is None:
                break
            design = [k for k in design if k != best[1]] + [best[2]]
            if state is not None:
                try:
                    state = self._state_add(
                        self._state_remove(state, best[1]), best[2]
                    )
                except FloatingPointError:
                    state = self._state_new(design)
            current -= best[0]
            trace.append(current)
        design = tuple(sorted(design))
        final = self.objective(design)
        return SearchResult(design, final, trace, self.design_rows(design),
                            "local")

    def greedy_search(self, j_prime, start=None, rng=None):
        """Add the best condition until the design reaches the target size.

        Starts from a small non-degenerate seed (random when not given)."""
        rng = rng if rng is not None else np.random.default_rng()
        if j_prime < 1 or j_prime > self.j:
            raise ValueError(f"design size must be in [1, {self.j}]")
        if start is None:
            p = max(ctx.x.shape[1] for ctx in self.ctx)
            seed_size = min(max(p, 2), j_prime)
            design = self._random_design(seed_size, rng)
        else:
            design = list(start)
            if self.objective(design) is None:
                raise DegenerateDesignError(
                    "greedy seed design is degenerate",
                    candidates=self.report_rank_candidates(design),
                )
        current = self.objective(design)
        trace = [current]
        while len(design) < j_prime:
            best = (None, np.inf)
            for in_c in [k for k in range(self.j) if k not in design]:
                val = self.objective(design + [in_c])
                if val is not None and val < best[1]:
                    best = (in_c, val)
            if best[0] is None:
                raise DegenerateDesignError(
                    "every candidate addition is degenerate",
                    candidates=self.report_rank_candidates(design),
                )
            design.append(best[0])
            current = best[1]
            trace.append(current)
        design = tuple(sorted(design))
        return SearchResult(design, current, trace, self.design_rows(design),
                            "greedy")

    def reverse_greedy(self, j_prime):
        """Remove the least useful condition until the target size."""
        if j_prime < 1 or j_prime > self.j:
            raise ValueError(f"design size must be in [1, {self.j}]")
        design = list(range(self.j))
        current = self.objective(design)
        if current is None:
            raise DegenerateDesignError(
                "the full design space is degenerate",
                candidates=self.report_rank_candidates(design),
            )
        trace = [current]
        while len(design) > j_prime:
            best = (None, np.inf)
            for out_c in design:
                val = self.objective([k for k in design if k != out_c])
                if val is not None and val < best[1]:
                    best = (out_c, val)
            if best[0] is None:
                raise DegenerateDesignError(
                    "every candidate removal is degenerate",
                    candidates=self.report_rank_candidates(design),
                )
            design.remove(best[0])
            current = best[1]
            trace.append(current)
        design = tuple(sorted(design))
        return SearchResult(design, current, trace, self.design_rows(design),
                            "reverse-greedy")

    def optimal(self, j_prime, algo=(1,), restarts=10, rng=None,
                use_rank1=True):
        """Run a chain of algorithms (1 local, 2 greedy, 3 reverse greedy).

        The local search is restarted from random designs and the best
        result kept; later algorithms in the chain start from the previous
        result."""
        rng = rng if rng is not None else np.random.default_rng()
        if isinstance(algo, int):
            algo = (algo,)
        result = None
        for step, a in enumerate(algo):
            start = list(result.design) if result is not None else None
            if a == 1:
                if start is None:
                    best = None
                    for _ in range(max(1, restarts)):
                        cand = self.local_search(j_prime, rng=rng,
                                                 use_rank1=use_rank1)
                        if best is None or cand.objective < best.objective:
                            best = cand
                    result = best
                else:
                    result = self.local_search(j_prime, start=start, rng=rng,
                                               use_rank1=use_rank1)
            elif a == 2:
                if start is not None and len(start) >= j_prime:
                    # nothing to add; keep the previous result
                    continue
                result = self.greedy_search(j_prime, rng=rng, start=start)
            elif a == 3:
                result = self.reverse_greedy(j_prime)
            else:
                raise ValueError(f"unknown algorithm code {a}")
        return result


# ---------------------------------------------------------------------------
# apportionment


def _largest_remainder(weights, m):
    quotas = weights * m
    base = np.floor(quotas).astype(int)
    left = m - int(base.sum())
    remainders = quotas - base
    order = np.lexsort((np.arange(weights.size), -remainders))
    for k in order[:left]:
        base[k] += 1
    return base


def _divisor_method(weights, m, divisor):
    counts = np.zeros(weights.size, dtype=int)
    for _ in range(m):
        scores = weights / divisor(counts)
        counts[int(np.argmax(scores))] += 1
    return counts


def _adams_modified(weights, m):
    # ceilings force one unit per condition; adjust the multiplier until
    # the counts sum to m
    j = weights.size
    if m < j:
        raise ValueError(
            f"the modified Adams method needs at least one unit per "
            f"condition: m={m} < {j}"
        )
    counts = np.ceil(weights * (m - j / 2.0)).astype(int)
    counts = np.maximum(counts, 1)
    while counts.sum() < m:
        scores = weights / counts
        counts[int(np.argmax(scores))] += 1
    while counts.sum() > m:
        adjustable = counts > 1
        scores = np.where(adjustable, (counts - 1) / weights, -np.inf)
        counts[int(np.argmax(scores))] -= 1
    return counts


def apportion(weights, m):
    """Integer designs from a weight vector by four rounding methods.

    Returns a dict with Hamilton (largest remainder), Webster, Jefferson,
    and modified Adams counts, each summing to m.
    """
    weights = np.asarray(weights, dtype=float)
    if weights.ndim != 1 or weights.size == 0:
        raise ValueError("weights must be a non-empty vector")
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError("weights must be nonnegative and sum to one")
    if m < 1:
        raise ValueError("m must be at least 1")
    out = {
        "hamilton": _largest_remainder(weights, m),
        "webster": _divisor_method(weights, m, lambda c: 2 * c + 1),
        "jefferson": _divisor_method(weights, m, lambda c: c + 1),
    }
    try:
        out["adams_modified"] = _adams_modified(weights, m)
    except ValueError as err:
        out["adams_modified"] = None
        out["adams_error"] = str(err)
    return out
