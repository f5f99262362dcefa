"""State elimination for transcribed problems.

With the initial node fixed, the integral-form collocation equations

    X_k - X_0 - (T/2) sum_l Dinv_kl F(t_l, s_j, X_lj, U_l) = 0,  k = 1..N

determine the states from the controls, one small dense system per
parameter sample.  Solving them by Newton's method (one step for bilinear
dynamics) leaves an NLP in the controls alone; gradients come from the
adjoint of the same systems.  Solutions satisfy the full NLP's equalities
to the Newton tolerance.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .transcription import Layout, NlpProblem, Transcription

NEWTON_TOL = 1e-13
NEWTON_MAXITER = 30


class StateSolveError(RuntimeError):
    pass


class Eliminator:
    """Control-to-state map of one transcription, with adjoint gradients."""

    def __init__(self, tr: Transcription):
        if tr.form != "integral":
            raise ValueError("state elimination needs the integral constraint form")
        self.tr = tr
        self.layout = tr.layout
        self._cache = None

    @property
    def reduced_size(self) -> int:
        return self.layout.nu + int(self.layout.free_horizon)

    def split(self, y):
        y = np.asarray(y, dtype=float)
        lay = self.layout
        U = y[: lay.nu].reshape(lay.N + 1, lay.m)
        T = y[lay.nu] if lay.free_horizon else None
        return U, T

    def join(self, U, T=None) -> np.ndarray:
        parts = [np.asarray(U, dtype=float).ravel()]
        if self.layout.free_horizon:
            parts.append(np.array([float(T)]))
        return np.concatenate(parts)

    def _factor(self, X, U, T):
        tr = self.tr
        lay = self.layout
        N, K, n = lay.N, lay.K, lay.n
        c = 0.5 * tr.horizon(T)
        jx, _ = tr._f_jac(X, U, T)
        # G[j, (k,a), (l,b)] = delta - c Dinv[k,l] Jx[l,j,a,b]
        A = np.ascontiguousarray(jx[1:].transpose(1, 2, 0, 3))
        G = (-c) * tr.D_inv[None, :, None, :, None] * A[:, None, :, :, :]
        G = G.reshape(K, N * n, N * n)
        idx = np.arange(N * n)
        G[:, idx, idx] += 1.0
        return [lu_factor(g, check_finite=False) for g in G]

    def states(self, U, T=None, X0=None) -> np.ndarray:
        """Solve the collocation equations for the states, shape ``(N+1, K, n)``."""
        tr = self.tr
        lay = self.layout
        N, K, n = lay.N, lay.K, lay.n
        if X0 is None:
            if tr.x0 is None:
                raise ValueError("state elimination needs an initial state")
            X0 = tr.x0
        U = np.asarray(U, dtype=float)
        X0 = np.broadcast_to(np.asarray(X0, dtype=float), (K, n))
        key = (U.tobytes(), None if T is None else float(T), X0.tobytes())
        if self._cache is not None and self._cache[0] == key:
            return self._cache[1]
        if self._cache is not None:
            X = self._cache[1].copy()
        else:
            X = np.broadcast_to(X0, (N + 1, K, n)).copy()
        X[0] = X0
        R = tr.integral_residual(lay.pack(X, U, T))
        for _ in range(NEWTON_MAXITER):
            lus = self._factor(X, U, T)
            rhs = R.transpose(1, 0, 2).reshape(K, N * n)
            step = np.stack([lu_solve(lu, r, check_finite=False) for lu, r in zip(lus, rhs)])
            X[1:] -= step.reshape(K, N, n).transpose(1, 0, 2)
            R = tr.integral_residual(lay.pack(X, U, T))
            if not np.all(np.isfinite(R)):
                raise StateSolveError("non-finite states from the collocation solve")
            if np.max(np.abs(R)) <= NEWTON_TOL * (1.0 + np.max(np.abs(X))):
                break
        else:
            raise StateSolveError("Newton iteration on the collocation equations did not converge")
        if not self.tr.problem.linear_in_state:
            lus = self._factor(X, U, T)
        self._cache = (key, X, lus)
        return X

    def full_decision(self, y, X0=None) -> np.ndarray:
        U, T = self.split(y)
        return self.layout.pack(self.states(U, T, X0), U, T)

    def adjoint(self, U, T, X0, hX, hU, hT=0.0):
        """Reduced gradient of a function ``h(X, U, T)`` through ``X = X(U, T, X0)``.

        ``hX``, ``hU``, ``hT`` are the partial derivatives of ``h``.  Returns
        ``(gU, gT, gX0)``.
        """
        tr = self.tr
        lay = self.layout
        N, K, n = lay.N, lay.K, lay.n
        X = self.states(U, T, X0)
        lus = self._cache[2]
        rhs = np.asarray(hX, dtype=float)[1:].transpose(1, 0, 2).reshape(K, N * n)
        lam = np.stack([lu_solve(lu, r, trans=1, check_finite=False) for lu, r in zip(lus, rhs)])
        lam = lam.reshape(K, N, n).transpose(1, 0, 2)
        v = np.zeros(tr.num_eq)
        v[: tr.n_colloc] = lam.ravel()
        gX, gUc, gTc = lay.unpack(tr.eq_vjp(lay.pack(X, U, T), v))
        gU = np.asarray(hU, dtype=float) - gUc
        gT = float(hT - gTc) if lay.free_horizon else 0.0
        gX0 = np.asarray(hX, dtype=float)[0] - gX[0]
        return gU, gT, gX0


def reduce(nlp: NlpProblem) -> "ReducedNlp":
    """Eliminate the states of a transcribed NLP (see :class:`ReducedNlp`)."""
    return ReducedNlp(nlp.transcription)


class ReducedNlp(NlpProblem):
    """NLP in the controls (and free horizon) of a single-phase transcription.

    Remaining constraints are the endpoint equalities and the path / control
    bound inequalities of the full problem.  Initial-state equalities and the
    collocation equalities are satisfied exactly by construction.
    """

    def __init__(self, tr: Transcription):
        self.tr = tr
        self.elim = Eliminator(tr)
        lay = tr.layout
        lo, hi = tr.bounds()
        lower = np.full(self.elim.reduced_size, -np.inf)
        upper = np.full(self.elim.reduced_size, np.inf)
        if lay.free_horizon:
            lower[-1], upper[-1] = lo[-1], hi[-1]
        super().__init__(
            num_vars=self.elim.reduced_size,
            objective=self._objective,
            gradient=self._gradient,
            eq_constraints=self._eq if tr.n_endpoint else None,
            eq_vjp=self._eq_vjp if tr.n_endpoint else None,
            num_eq=tr.n_endpoint,
            ineq_constraints=self._ineq if tr.num_ineq else None,
            ineq_vjp=self._ineq_vjp if tr.num_ineq else None,
            num_ineq=tr.num_ineq,
            lower=lower,
            upper=upper,
            layout=None,
        )
        self.full_nlp = tr.nlp()
        self.full_nlp.transcription = tr
        self.transcription = tr

    def lift(self, y) -> np.ndarray:
        """Full decision vector (states included) for reduced variables ``y``."""
        return self.elim.full_decision(y)

    def restrict(self, z) -> np.ndarray:
        X, U, T = self.tr.layout.unpack(z)
        return self.elim.join(U, T)

    def _objective(self, y):
        return self.tr.objective(self.lift(y))

    def _through(self, y, gz):
        U, T = self.elim.split(y)
        hX, hU, hT = self.tr.layout.unpack(gz)
        gU, gT, _ = self.elim.adjoint(U, T, None, hX, hU, hT if hT is not None else 0.0)
        return self.elim.join(gU, gT)

    def _gradient(self, y):
        return self._through(y, self.tr.gradient(self.lift(y)))

    def _eq(self, y):
        return self.tr.eq(self.lift(y))[self.tr.n_colloc + self.tr.n_init:]

    def _eq_vjp(self, y, v):
        full = np.zeros(self.tr.num_eq)
        full[self.tr.n_colloc + self.tr.n_init:] = v
        return self._through(y, self.tr.eq_vjp(self.lift(y), full))

    def _ineq(self, y):
        return self.tr.ineq(self.lift(y))

    def _ineq_vjp(self, y, v):
        gz = self.tr.ineq_vjp(self.lift(y), v)
        if self.tr.n_path:
            return self._through(y, gz)
        # control bounds do not touch the states
        _, gU, gT = self.tr.layout.unpack(gz)
        return self.elim.join(gU, gT)


class StagedNlp(NlpProblem):
    """Phases chained by state continuity, optimised jointly.

    Phase ``i + 1`` starts, per parameter sample, from the terminal states of
    phase ``i``.  Only the first phase needs an initial state.  Inequalities
    must not depend on the states (control bounds only).  The objective is
    the sum of the phase objectives.
    """

    def __init__(self, transcriptions: Sequence[Transcription]):
        self.trs = list(transcriptions)
        self.elims = [Eliminator(tr) for tr in self.trs]
        for tr in self.trs:
            if tr.n_path or tr.n_endpoint or tr.layout.free_horizon:
                raise ValueError("staged problems support control bounds and fixed horizons only")
        K = {tr.layout.K for tr in self.trs}
        if len(K) != 1:
            raise ValueError("all phases must share the parameter grid")
        self.sizes = [e.reduced_size for e in self.elims]
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)])
        num_ineq = sum(tr.num_ineq for tr in self.trs)
        super().__init__(
            num_vars=int(self.offsets[-1]),
            objective=self._objective,
            gradient=self._gradient,
            ineq_constraints=self._ineq if num_ineq else None,
            ineq_vjp=self._ineq_vjp if num_ineq else None,
            num_ineq=num_ineq,
        )

    def parts(self, y):
        return [np.asarray(y, dtype=float)[a:b] for a, b in zip(self.offsets[:-1], self.offsets[1:])]

    def lift(self, y):
        """Full decision vectors of every phase."""
        out = []
        X0 = None
        for elim, yi in zip(self.elims, self.parts(y)):
            z = elim.full_decision(yi, X0)
            out.append(z)
            X0 = elim.layout.unpack(z)[0][-1]
        return out

    def phase_objectives(self, y):
        return [tr.objective(z) for tr, z in zip(self.trs, self.lift(y))]

    def _objective(self, y):
        return float(sum(self.phase_objectives(y)))

    def _gradient(self, y):
        zs = self.lift(y)
        grads = [None] * len(self.trs)
        carry = None
        for i in reversed(range(len(self.trs))):
            tr, elim = self.trs[i], self.elims[i]
            hX, hU, _ = tr.layout.unpack(tr.gradient(zs[i]))
            hX = hX.copy()
            if carry is not None:
                hX[-1] += carry
            X, U, _ = tr.layout.unpack(zs[i])
            gU, _, gX0 = elim.adjoint(U, None, X[0], hX, hU)
            grads[i] = gU.ravel()
            carry = gX0
        return np.concatenate(grads)

    def _ineq(self, y):
        return np.concatenate([tr.ineq(z) for tr, z in zip(self.trs, self.lift(y))])

    def _ineq_vjp(self, y, v):
        out = []
        off = 0
        for tr, z in zip(self.trs, self.lift(y)):
            vi = v[off: off + tr.num_ineq]
            off += tr.num_ineq
            _, gU, _ = tr.layout.unpack(tr.ineq_vjp(z, vi))
            out.append(gU.ravel())
        return np.concatenate(out)
