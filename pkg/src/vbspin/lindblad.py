"""Lindblad dynamics of the electron (ground/excited triplet + singlet) coupled
to nearby nuclear spins.

Hilbert space: ``electronic (7) x nuclear (prod 2I+1)``; the flat index of
level ``l`` and nuclear configuration ``n`` is ``l * N + n``.  Hamiltonians
are in rad/us, so ``exp(-i H t)`` takes ``t`` in us.

Every jump operator moves population between (or within) a single pair of
manifolds and the Hamiltonian is block diagonal, so a density matrix that
starts without ground/excited/singlet coherences keeps none.  Propagation
therefore runs on the three diagonal blocks only (:class:`BlockState`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.integrate import solve_ivp

from .core import (
    ISOTOPE_RATIO,
    DegeneracyError,
    ElectronicRates,
    MagneticField,
    SpinSystemConfig,
    scale_hyperfine_isotope,
    spin_operators,
)
from .instrument import background_contrast

TWO_PI = 2.0 * math.pi
DENSE_LIMIT = 2000  # largest reduced Liouville dimension handled with dense algebra

__all__ = [
    "HilbertLayout",
    "JumpOperatorSet",
    "BlockState",
    "LindbladModel",
    "build_hamiltonian",
    "build_jump_operators",
    "lindblad_rhs",
    "scale_hyperfine_isotope",
    "ISOTOPE_RATIO",
    "DENSE_LIMIT",
    "maximally_mixed_ground",
    "state_from_populations",
    "check_state",
    "pl_time_trace",
    "polarization_timescale",
    "relative_threshold",
    "crossing_time",
    "SweepPoint",
    "sweep_point",
    "field_sweep",
    "sweep_maps",
    "find_dip",
    "find_peak",
    "NoCrossingError",
    "StiffnessError",
]


class NoCrossingError(ValueError):
    """Trace never crosses the requested threshold."""


class StiffnessError(RuntimeError):
    """Adaptive integration failed; ``t_reached`` is in ns."""

    def __init__(self, msg, t_reached):
        super().__init__(f"{msg} (reached t = {t_reached:.6g} ns)")
        self.t_reached = t_reached


@dataclass(frozen=True)
class HilbertLayout:
    nuclear_dims: tuple[int, ...] = ()
    electronic_dim: int = 7

    @property
    def nuclear_dim(self) -> int:
        return int(np.prod(self.nuclear_dims, dtype=int))

    @property
    def total_dim(self) -> int:
        return self.electronic_dim * self.nuclear_dim

    def index(self, level: int, config: int) -> int:
        return level * self.nuclear_dim + config

    def split(self, flat: int) -> tuple[int, int]:
        return divmod(flat, self.nuclear_dim)

    def config_of(self, config: int) -> tuple[int, ...]:
        return tuple(int(x) for x in np.unravel_index(config, self.nuclear_dims)) if self.nuclear_dims else ()

    def manifold_slices(self) -> tuple[slice, slice, slice]:
        N = self.nuclear_dim
        return slice(0, 3 * N), slice(3 * N, 6 * N), slice(6 * N, 7 * N)

    @classmethod
    def for_config(cls, cfg: SpinSystemConfig) -> "HilbertLayout":
        return cls(cfg.nuclear_dims)


def _nuclear_ops(cfg: SpinSystemConfig):
    """Per-nucleus (Ix, Iy, Iz) embedded in the full nuclear space."""
    dims = cfg.nuclear_dims
    ops = []
    for i, nuc in enumerate(cfg.nuclei):
        single = spin_operators(nuc.spin)
        emb = []
        for o in single:
            m = np.eye(1, dtype=complex)
            for j, d in enumerate(dims):
                m = np.kron(m, o if j == i else np.eye(d))
            emb.append(m)
        ops.append(tuple(emb))
    return ops


def manifold_hamiltonians(cfg: SpinSystemConfig, B: MagneticField, hyperfine: bool = True):
    """(H_ground, H_excited, H_singlet) in rad/us."""
    N = int(np.prod(cfg.nuclear_dims, dtype=int))
    S = spin_operators(1.0)
    Bv = B.vector
    In = np.eye(N)
    nuc = _nuclear_ops(cfg)

    # nuclear Zeeman and quadrupole terms, shared by all manifolds
    h_nuc = np.zeros((N, N), dtype=complex)
    for n, (ix, iy, iz) in zip(cfg.nuclei, nuc):
        h_nuc -= n.gamma_n * 1e-3 * (Bv[0] * ix + Bv[1] * iy + Bv[2] * iz)
        h_nuc += n.Q_zz * (iz @ iz)

    def triplet(D, which):
        h = D * np.kron(S[2] @ S[2], In)
        h += cfg.gamma_e * sum(Bv[a] * np.kron(S[a], In) for a in range(3))
        h += np.kron(np.eye(3), h_nuc)
        if hyperfine:
            for n, iops in zip(cfg.nuclei, nuc):
                A = n.A_gs if which == "g" else n.A_es
                for a in range(3):
                    for b in range(3):
                        if A[a, b] != 0.0:
                            h += A[a, b] * np.kron(S[a], iops[b])
        return TWO_PI * h

    Hg = triplet(cfg.D_gs, "g")
    He = triplet(cfg.D_es, "e")
    Hs = TWO_PI * h_nuc
    # enforce exact Hermiticity against round-off in the sums
    return tuple((h + h.conj().T) / 2 for h in (Hg, He, Hs))


def build_hamiltonian(cfg: SpinSystemConfig, B: MagneticField, hyperfine: bool = True) -> np.ndarray:
    """Full block-diagonal Hamiltonian (rad/us) on the 7*N dimensional space."""
    return sla.block_diag(*manifold_hamiltonians(cfg, B, hyperfine))


@dataclass
class JumpOperatorSet:
    ops: list  # list of (scipy.sparse matrix, label)

    def __iter__(self):
        return iter(self.ops)

    def __len__(self):
        return len(self.ops)

    def get(self, label: str):
        for m, lab in self.ops:
            if lab == label:
                return m
        raise KeyError(label)

    @property
    def labels(self) -> list[str]:
        return [lab for _, lab in self.ops]


def _electronic_jumps(rates: ElectronicRates) -> list[tuple[np.ndarray, str]]:
    """7x7 electronic jump operators in the (g+1, g0, g-1, e+1, e0, e-1, s) basis.

    T1 operators use sqrt(gamma_1/4) S+- so that each neighbouring-sublevel
    transfer rate equals gamma_1/2, identical to the rate-equation generator.
    """

    def ket_bra(i, j):
        m = np.zeros((7, 7))
        m[i, j] = 1.0
        return m

    g, e, s = (0, 1, 2), (3, 4, 5), 6
    ops = [
        (math.sqrt(rates.gamma_P) * sum(ket_bra(e[i], g[i]) for i in range(3)), "c_P"),
        (math.sqrt(rates.gamma_E) * sum(ket_bra(g[i], e[i]) for i in range(3)), "c_E"),
        (math.sqrt(rates.r * rates.gamma_ISC) * ket_bra(s, e[1]), "c_ISC,0"),
        (math.sqrt(rates.gamma_ISC) * ket_bra(s, e[0]), "c_ISC,+1"),
        (math.sqrt(rates.gamma_ISC) * ket_bra(s, e[2]), "c_ISC,-1"),
        (math.sqrt(rates.gamma_s) * ket_bra(g[1], s), "c_s,0"),
        (math.sqrt(rates.k * rates.gamma_s) * ket_bra(g[0], s), "c_s,+1"),
        (math.sqrt(rates.k * rates.gamma_s) * ket_bra(g[2], s), "c_s,-1"),
    ]
    sx, sy, sz = spin_operators(1.0)
    s_plus = np.real(sx + 1j * sy)
    s_minus = s_plus.T
    for name, block in (("g", g), ("e", e)):
        lo = block[0]
        for lab, op in (("+", s_plus), ("-", s_minus)):
            m = np.zeros((7, 7))
            m[lo:lo + 3, lo:lo + 3] = math.sqrt(rates.gamma_1 / 4.0) * op
            ops.append((m, f"c_1{lab},{name}"))
        m = np.zeros((7, 7))
        m[lo:lo + 3, lo:lo + 3] = math.sqrt(rates.gamma_2) * np.real(sz)
        ops.append((m, f"c_2,{name}"))
    return ops


def build_jump_operators(rates: ElectronicRates, layout: HilbertLayout) -> JumpOperatorSet:
    """All jump operators (rates in MHz => operators in sqrt(1/us)), nuclear identity attached."""
    In = sp.identity(layout.nuclear_dim, format="csr")
    ops = [(sp.kron(sp.csr_matrix(m), In, format="csr"), lab) for m, lab in _electronic_jumps(rates)]
    return JumpOperatorSet(ops)


def lindblad_rhs(H, jumps: Iterable, rho: np.ndarray) -> np.ndarray:
    """-i[H, rho] + sum_k (c rho c^dag - {c^dag c, rho}/2) on the full space."""
    rho = np.asarray(rho)
    H = np.asarray(H) if not sp.issparse(H) else H
    if rho.shape != H.shape:
        raise ValueError(f"shape mismatch: H {H.shape} vs rho {rho.shape}")
    out = -1j * (H @ rho - rho @ H)
    for item in jumps:
        c = item[0] if isinstance(item, tuple) else item
        if c.shape != rho.shape:
            raise ValueError(f"shape mismatch: jump {c.shape} vs rho {rho.shape}")
        cd = c.conj().T
        cdc = cd @ c
        out = out + c @ (c @ rho.conj().T).conj().T - 0.5 * (cdc @ rho + (cdc @ rho.conj().T).conj().T)
    return np.asarray(out)


# ------------------------------------------------------------ block states


@dataclass
class BlockState:
    """Density matrix restricted to the (ground, excited, singlet) diagonal blocks."""

    g: np.ndarray
    e: np.ndarray
    s: np.ndarray

    @classmethod
    def from_full(cls, rho: np.ndarray, layout: HilbertLayout) -> "BlockState":
        sg, se, ss = layout.manifold_slices()
        return cls(rho[sg, sg].copy(), rho[se, se].copy(), rho[ss, ss].copy())

    def to_full(self) -> np.ndarray:
        return sla.block_diag(self.g, self.e, self.s)

    def vec(self) -> np.ndarray:
        return np.concatenate([self.g.ravel(), self.e.ravel(), self.s.ravel()])

    @classmethod
    def from_vec(cls, v: np.ndarray, N: int) -> "BlockState":
        d = 3 * N
        return cls(v[: d * d].reshape(d, d), v[d * d: 2 * d * d].reshape(d, d),
                   v[2 * d * d:].reshape(N, N))

    def trace(self) -> complex:
        return np.trace(self.g) + np.trace(self.e) + np.trace(self.s)

    def level_populations(self) -> np.ndarray:
        """7-vector of electronic populations (nuclear index traced out)."""
        N = self.s.shape[0]
        dg = np.real(np.diag(self.g)).reshape(3, N).sum(axis=1)
        de = np.real(np.diag(self.e)).reshape(3, N).sum(axis=1)
        return np.concatenate([dg, de, [np.real(np.trace(self.s))]])

    def hermiticity_error(self) -> float:
        return max(np.abs(b - b.conj().T).max() for b in (self.g, self.e, self.s))

    def min_eigenvalue(self) -> float:
        return min(np.linalg.eigvalsh((b + b.conj().T) / 2).min() for b in (self.g, self.e, self.s))


def maximally_mixed_ground(N: int) -> BlockState:
    d = 3 * N
    return BlockState(np.eye(d, dtype=complex) / d, np.zeros((d, d), complex), np.zeros((N, N), complex))


def state_from_populations(p: Sequence[float], N: int) -> BlockState:
    """Block state with electronic populations ``p`` and unpolarized nuclei."""
    p = np.asarray(p, dtype=float)
    dg = np.repeat(p[:3], N) / N
    de = np.repeat(p[3:6], N) / N
    return BlockState(np.diag(dg).astype(complex), np.diag(de).astype(complex),
                      np.eye(N, dtype=complex) * p[6] / N)


# ------------------------------------------------------------ the model


def _kron(a, b):
    return sp.kron(sp.csr_matrix(a), sp.csr_matrix(b), format="csr")


def _hermitian_maps(d: int) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Maps between a row-major d x d Hermitian matrix and d^2 real numbers.

    Entry (i, j) with i <= j of the real vector holds Re rho_ij and entry
    (j, i) holds Im rho_ij, so diagonal positions coincide in both forms.
    """
    iu, ju = np.triu_indices(d, 1)
    diag = np.arange(d) * (d + 1)
    up = iu * d + ju
    lo = ju * d + iu
    n = d * d
    # vec = T x
    rows = np.concatenate([diag, up, lo, up, lo])
    cols = np.concatenate([diag, up, up, lo, lo])
    vals = np.concatenate([np.ones(d), np.ones(len(up)), np.ones(len(up)),
                           np.full(len(up), 1j), np.full(len(up), -1j)])
    T = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    # x = P vec
    rows = np.concatenate([diag, up, up, lo, lo])
    cols = np.concatenate([diag, up, lo, up, lo])
    vals = np.concatenate([np.ones(d), np.full(len(up), 0.5), np.full(len(up), 0.5),
                           np.full(len(up), -0.5j), np.full(len(up), 0.5j)])
    P = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return T, P


class LindbladModel:
    """Generator for one (system, rates, field) triple, acting on block states."""

    def __init__(self, cfg: SpinSystemConfig, rates: ElectronicRates, B: MagneticField,
                 hyperfine: bool = True):
        self.cfg = cfg
        self.rates = rates
        self.B = B
        self.layout = HilbertLayout.for_config(cfg)
        self.N = self.layout.nuclear_dim
        self.d = 3 * self.N
        self.Hg, self.He, self.Hs = manifold_hamiltonians(cfg, B, hyperfine)
        self.jumps = build_jump_operators(rates, self.layout)

    # -- dimensions ----------------------------------------------------------
    @property
    def reduced_dim(self) -> int:
        return 2 * self.d**2 + self.N**2

    @property
    def hamiltonian(self) -> np.ndarray:
        return sla.block_diag(self.Hg, self.He, self.Hs)

    # -- superoperator -------------------------------------------------------
    @cached_property
    def superoperator(self) -> sp.csr_matrix:
        """Sparse generator on ``BlockState.vec()`` (row-major block vectorization)."""
        slices = self.layout.manifold_slices()
        sizes = [self.d, self.d, self.N]
        blocks = [[None] * 3 for _ in range(3)]

        def add(b, a, m):
            blocks[b][a] = m if blocks[b][a] is None else blocks[b][a] + m

        for a, H in enumerate((self.Hg, self.He, self.Hs)):
            I = sp.identity(sizes[a], format="csr")
            add(a, a, -1j * (_kron(H, I) - _kron(I, H.T)))
        for c, label in self.jumps:
            c = sp.csr_matrix(c)
            if c.nnz == 0:
                continue
            cdc = (c.conj().T @ c).tocsr()
            for a, sa in enumerate(slices):
                for b, sb in enumerate(slices):
                    cba = c[sb, sa]
                    if cba.nnz:
                        add(b, a, _kron(cba, cba.conj()))
                    if a != b and cdc[sb, sa].nnz:
                        raise AssertionError(f"{label}: c^dag c couples manifolds")
                K = cdc[sa, sa]
                if K.nnz:
                    I = sp.identity(sizes[a], format="csr")
                    add(a, a, -0.5 * (_kron(K, I) + _kron(I, K.T)))
        for a in range(3):
            for b in range(3):
                if blocks[a][b] is None:
                    blocks[a][b] = sp.csr_matrix((sizes[a] ** 2, sizes[b] ** 2), dtype=complex)
        return sp.bmat(blocks, format="csr")

    @cached_property
    def _real_maps(self) -> tuple[sp.csr_matrix, sp.csr_matrix]:
        """(T, P) with ``vec = T x`` and ``x = P vec`` for real parameters x."""
        Ts, Ps = zip(*(_hermitian_maps(n) for n in (self.d, self.d, self.N)))
        return sp.block_diag(Ts, format="csr"), sp.block_diag(Ps, format="csr")

    @cached_property
    def real_superoperator(self) -> sp.csr_matrix:
        """Generator on the real parametrization of the Hermitian blocks.

        Same dimension as :attr:`superoperator` but real, which makes dense
        exponentials and sparse solves several times cheaper.
        """
        T, P = self._real_maps
        Lr = (P @ self.superoperator @ T).tocsr()
        scale = max(abs(Lr.data).max(), 1.0) if Lr.nnz else 1.0
        if Lr.nnz and abs(Lr.data.imag).max() > 1e-9 * scale:
            raise AssertionError("generator does not preserve Hermiticity")
        Lr = sp.csr_matrix(Lr.real)
        Lr.eliminate_zeros()
        return Lr

    @cached_property
    def _dense(self) -> np.ndarray:
        return self.real_superoperator.toarray()

    @cached_property
    def _trace_row(self) -> np.ndarray:
        # diagonal entries sit at the same positions in both parametrizations
        row = np.zeros(self.reduced_dim)
        d, N = self.d, self.N
        row[np.arange(d) * (d + 1)] = 1.0
        row[d * d + np.arange(d) * (d + 1)] = 1.0
        row[2 * d * d + np.arange(N) * (N + 1)] = 1.0
        return row

    def to_real(self, state: BlockState) -> np.ndarray:
        return np.real(self._real_maps[1] @ state.vec())

    def from_real(self, x: np.ndarray) -> BlockState:
        return BlockState.from_vec(self._real_maps[0] @ x, self.N)

    # -- structured right-hand side -------------------------------------------
    def rhs(self, state: BlockState) -> BlockState:
        """Structured (matrix-free) Lindblad right-hand side on block states."""
        return BlockState(*self._apply(state.g, state.e, state.s))

    def _apply(self, G, E, Sg):
        """Dissipative plus coherent RHS using the structure of each jump operator."""
        dG, dE, dS = self._dissipate(G, E, Sg)
        dG += -1j * (self.Hg @ G - G @ self.Hg)
        dE += -1j * (self.He @ E - E @ self.He)
        dS += -1j * (self.Hs @ Sg - Sg @ self.Hs)
        return dG, dE, dS

    @cached_property
    def _diss_consts(self):
        r = self.rates
        N = self.N
        isc = np.repeat([r.gamma_ISC, r.r * r.gamma_ISC, r.gamma_ISC], N)
        sdec = np.array([r.k * r.gamma_s, r.gamma_s, r.k * r.gamma_s])
        mz = np.repeat([1.0, 0.0, -1.0], N)
        return isc, sdec, mz

    def _dissipate(self, G, E, Sg):
        r = self.rates
        N, d = self.N, self.d
        isc, sdec, mz = self._diss_consts
        GP, GE, g1, g2 = r.gamma_P, r.gamma_E, r.gamma_1, r.gamma_2
        dG = GE * E - GP * G
        dE = GP * G - GE * E - 0.5 * (isc[:, None] * E + E * isc[None, :])
        dS = sum(isc[m * N] * E[m * N:(m + 1) * N, m * N:(m + 1) * N] for m in range(3))
        dS = dS - (1 + 2 * r.k) * r.gamma_s * Sg
        for m in range(3):
            dG[m * N:(m + 1) * N, m * N:(m + 1) * N] += sdec[m] * Sg
        if g1:
            dG += self._t1(G, g1)
            dE += self._t1(E, g1)
        if g2:
            # c = sqrt(g2) Sz: off-diagonal (m, m') blocks decay at g2 (m - m')^2 / 2
            dz = mz[:, None] - mz[None, :]
            dG -= 0.5 * g2 * dz**2 * G
            dE -= 0.5 * g2 * dz**2 * E
        return dG, dE, dS

    def _t1(self, X, g1):
        """T1 dissipator with c = sqrt(g1/4) S+- on one triplet block."""
        N = self.N
        b = [[X[i * N:(i + 1) * N, j * N:(j + 1) * N] for j in range(3)] for i in range(3)]
        out = np.zeros_like(X)

        def blk(i, j):
            return slice(i * N, (i + 1) * N), slice(j * N, (j + 1) * N)

        # S+ (sqrt2 on |+1><0| and |0><-1|); S- its transpose. index 0:+1, 1:0, 2:-1
        rate = g1 / 4.0 * 2.0  # |<m+1|S+|m>|^2 = 2 for spin 1
        # (S+ X S-)_{ij} = sum_kl S+_{ik} X_{kl} S+_{jl}; index 0:+1, 1:0, 2:-1
        up = {0: 1, 1: 2}  # row i of S+ is fed by column k
        for i, k in up.items():
            for j, l in up.items():
                out[blk(i, j)] += rate * b[k][l]
        down = {1: 0, 2: 1}
        for i, k in down.items():
            for j, l in down.items():
                out[blk(i, j)] += rate * b[k][l]
        # c^dag c summed over both operators: g1/4 * (S-S+ + S+S-) = g1/4 * diag(2, 4, 2)
        kdiag = g1 / 4.0 * np.array([2.0, 4.0, 2.0])
        for i in range(3):
            for j in range(3):
                out[blk(i, j)] -= 0.5 * (kdiag[i] + kdiag[j]) * b[i][j]
        return out

    # -- propagation ---------------------------------------------------------
    def evolve(self, state0: BlockState, times_ns, observables=None, method: str = "auto",
               rtol: float = 1e-8, atol: float = 1e-10) -> list:
        """Propagate ``state0`` (at t=0) and sample at ``times_ns``.

        ``observables`` is a callable mapping a BlockState to a value; when
        given, a list of its values is returned instead of the states.
        Methods: ``dense`` (exact exponential of the real generator),
        ``krylov`` (sparse exponential action) and ``rk`` (adaptive
        Dormand-Prince in the interaction picture of H).
        """
        return list(self.iter_evolve(state0, times_ns, observables, method, rtol, atol))

    def iter_evolve(self, state0: BlockState, times_ns, observables=None, method: str = "auto",
                    rtol: float = 1e-8, atol: float = 1e-10):
        """Generator form of :meth:`evolve`; stopping early skips the remaining work."""
        times = np.asarray(times_ns, dtype=float)
        if times.ndim != 1 or times.size == 0:
            raise ValueError("times must be a non-empty 1-d array")
        if np.any(np.diff(times) < 0) or times[0] < 0:
            raise ValueError("times must be non-negative and sorted")
        if method == "auto":
            method = "dense" if self.reduced_dim <= DENSE_LIMIT else "krylov"
        obs = observables or (lambda s: s)
        if method == "dense":
            yield from self._iter_dense(state0, times, obs)
        elif method == "krylov":
            yield from self._iter_krylov(state0, times, obs)
        elif method == "rk":
            yield from self._evolve_rk(state0, times, obs, rtol, atol)
        else:
            raise ValueError(f"unknown method {method!r}")

    def _iter_dense(self, state0, times, obs):
        L = self._dense
        x = self.to_real(state0)
        cache = {}
        prev = 0.0
        for t in times:
            dt = t - prev
            if dt > 0:
                key = round(dt, 9)
                if key not in cache:
                    cache[key] = sla.expm(L * (dt * 1e-3))
                x = cache[key] @ x
            prev = t
            yield obs(self.from_real(x))

    def _iter_krylov(self, state0, times, obs, chunk: int = 50):
        A = (self.real_superoperator * 1e-3).tocsr()  # per ns
        x = self.to_real(state0)
        prev = 0.0
        i = 0
        n = times.size
        while i < n:
            if times[i] == prev:
                yield obs(self.from_real(x))
                i += 1
                continue
            # extend a run of equally spaced samples starting at prev
            dt = times[i] - prev
            j = i + 1
            while j < n and j - i < chunk and abs(times[j] - times[j - 1] - dt) <= 1e-9 * dt:
                j += 1
            k = j - i
            X = spla.expm_multiply(A, x, start=0.0, stop=k * dt, num=k + 1, endpoint=True)
            for row in X[1:]:
                yield obs(self.from_real(row))
            x = X[-1]
            prev = times[j - 1]
            i = j

    @cached_property
    def _eig(self):
        return [np.linalg.eigh(H) for H in (self.Hg, self.He, self.Hs)]

    def _evolve_rk(self, state0, times, obs, rtol, atol):
        """Adaptive Dormand-Prince integration in the interaction picture of H.

        The Hamiltonian part is integrated exactly via its eigenbasis, so
        step sizes are set by the dissipative rates only.  The trace is
        renormalized at every sample.
        """
        (Eg, Ug), (Ee, Ue), (Es, Us) = self._eig
        d, N = self.d, self.N
        wg, we, ws = (E[:, None] - E[None, :] for E in (Eg, Ee, Es))
        sizes = (d * d, d * d, N * N)

        def to_eig(X, U):
            return U.conj().T @ X @ U

        def from_eig(X, U):
            return U @ X @ U.conj().T

        def split(y):
            return (y[: sizes[0]].reshape(d, d), y[sizes[0]: sizes[0] + sizes[1]].reshape(d, d),
                    y[sizes[0] + sizes[1]:].reshape(N, N))

        def rhs(t_us, y):
            Yg, Ye, Ys = split(y)
            pg, pe, ps = (np.exp(-1j * w * t_us) for w in (wg, we, ws))
            G = from_eig(pg * Yg, Ug)
            E = from_eig(pe * Ye, Ue)
            S = from_eig(ps * Ys, Us)
            dG, dE, dS = self._dissipate(G, E, S)
            return np.concatenate([(to_eig(dG, Ug) / pg).ravel(), (to_eig(dE, Ue) / pe).ravel(),
                                   (to_eig(dS, Us) / ps).ravel()])

        y0 = np.concatenate([to_eig(state0.g, Ug).ravel(), to_eig(state0.e, Ue).ravel(),
                             to_eig(state0.s, Us).ravel()]).astype(complex)
        t_us = times * 1e-3
        if t_us[-1] == 0:
            return [obs(state0) for _ in times]
        sol = solve_ivp(rhs, (0.0, t_us[-1]), y0, method="DOP853", t_eval=t_us,
                        rtol=rtol, atol=atol)
        if not sol.success:
            raise StiffnessError(sol.message, sol.t[-1] * 1e3 if sol.t.size else 0.0)
        out = []
        for j, t in enumerate(sol.t):
            Yg, Ye, Ys = split(sol.y[:, j])
            st = BlockState(from_eig(np.exp(-1j * wg * t) * Yg, Ug),
                            from_eig(np.exp(-1j * we * t) * Ye, Ue),
                            from_eig(np.exp(-1j * ws * t) * Ys, Us))
            tr = st.trace()
            st = BlockState(st.g / tr, st.e / tr, st.s / tr)
            out.append(obs(st))
        return out

    # -- steady state --------------------------------------------------------
    def steady_state(self) -> BlockState:
        """Unique stationary state from ``L x = 0`` with unit trace."""
        n = self.reduced_dim
        rhs = np.zeros(n)
        rhs[0] = 1.0
        # the first diagonal-element equation is replaced by the trace condition
        if n <= DENSE_LIMIT:
            A = self._dense.copy()
            A[0, :] = self._trace_row
            try:
                lu = sla.lu_factor(A, check_finite=True)
            except (np.linalg.LinAlgError, ValueError) as exc:
                raise DegeneracyError(str(exc)) from exc
            diag = np.abs(np.diag(lu[0]))
            if diag.min() < 1e-12 * diag.max():
                raise DegeneracyError("Liouvillian kernel is not one-dimensional")
            x = sla.lu_solve(lu, rhs)
        else:
            A = self.real_superoperator.tolil()
            A[0, :] = self._trace_row
            x = spla.spsolve(A.tocsc(), rhs)
            if not np.all(np.isfinite(x)):
                raise DegeneracyError("Liouvillian kernel is not one-dimensional")
        st = self.from_real(x)
        return BlockState(*((b + b.conj().T) / 2 for b in (st.g, st.e, st.s)))

    def residual_norm(self, state: BlockState) -> float:
        return float(np.abs(self.superoperator @ state.vec()).max())

    # -- observables -----------------------------------------------------------
    @cached_property
    def _iz_ops(self):
        ops = []
        for ix, iy, iz in _nuclear_ops(self.cfg):
            d = np.real(np.diag(iz))
            ops.append(d)
        return ops

    def nuclear_populations(self, state: BlockState) -> np.ndarray:
        """Occupation of each nuclear product state, electron traced out."""
        N = self.N
        return (np.real(np.diag(state.g)).reshape(3, N).sum(0)
                + np.real(np.diag(state.e)).reshape(3, N).sum(0)
                + np.real(np.diag(state.s)))

    def nuclear_polarization(self, state: BlockState) -> np.ndarray:
        """<I_z> of each nucleus."""
        occ = self.nuclear_populations(state)
        return np.array([float(occ @ d) for d in self._iz_ops])

    @staticmethod
    def excited_population(state: BlockState) -> float:
        return float(np.real(np.trace(state.e)))


def check_state(state: BlockState, trace_tol=1e-8, herm_tol=1e-10, pos_tol=-1e-8) -> None:
    """Raise AssertionError on trace, Hermiticity or positivity violations."""
    tr = state.trace()
    if abs(tr - 1.0) > trace_tol:
        raise AssertionError(f"trace drift {abs(tr - 1.0):.3g}")
    h = state.hermiticity_error()
    if h > herm_tol:
        raise AssertionError(f"Hermiticity error {h:.3g}")
    lam = state.min_eigenvalue()
    if lam < pos_tol:
        raise AssertionError(f"negative eigenvalue {lam:.3g}")


# ------------------------------------------------------------ traces and sweeps


def pl_time_trace(model: LindbladModel, times_ns, background: float = 0.0,
                  state0: BlockState | None = None, reference: float | None = None,
                  method: str = "auto") -> np.ndarray:
    """Contrast ``(sig + b)/(ref + b)`` of the excited-manifold population."""
    if background < 0:
        raise ValueError("background must be >= 0")
    state0 = state0 or maximally_mixed_ground(model.N)
    sig = np.array(model.evolve(state0, times_ns, LindbladModel.excited_population, method=method))
    ref = reference if reference is not None else LindbladModel.excited_population(model.steady_state())
    if ref + background == 0:
        raise ZeroDivisionError("zero reference and zero background")
    return background_contrast(sig, ref, background)


def polarization_timescale(times_ns, trace, threshold: float) -> float:
    """First time ``trace`` reaches ``threshold``, linearly interpolated (ns)."""
    t = np.asarray(times_ns, dtype=float)
    y = np.asarray(trace, dtype=float)
    above = y >= threshold
    if not above.any():
        raise NoCrossingError(f"trace never reaches {threshold}")
    i = int(np.argmax(above))
    if i == 0:
        return float(t[0])
    y0, y1 = y[i - 1], y[i]
    return float(t[i - 1] + (threshold - y0) / (y1 - y0) * (t[i] - t[i - 1]))


def relative_threshold(trace, fraction: float) -> float:
    """Level at ``fraction`` of the way from the trace's first value to 1."""
    c0 = float(np.asarray(trace)[0])
    return c0 + fraction * (1.0 - c0)


BASELINES = ("start", "transient")
TRANSIENT_SKIP_NS = 10.0


class _CrossingTracker:
    """Incremental threshold crossing on a contrast trace.

    ``start`` measures the level from the first sample; ``transient`` from the
    lowest value reached after the optical transient (t >= ``t_skip``), so
    only the slow polarization dynamics are timed.  With ``transient`` the
    result is final once the crossing is seen provided the trace has a single
    minimum after ``t_skip``, which holds for the traces produced here.
    """

    def __init__(self, fraction: float, baseline: str = "start", t_skip: float = TRANSIENT_SKIP_NS):
        if baseline not in BASELINES:
            raise ValueError(f"baseline must be one of {BASELINES}")
        if not 0.0 < fraction < 1.0:
            raise ValueError("threshold fraction must lie in (0, 1)")
        self.fraction = fraction
        self.baseline = baseline
        self.t_skip = t_skip
        self.t: list[float] = []
        self.y: list[float] = []
        self.base = None
        self.i_base = 0
        self.result: float | None = None

    def push(self, t: float, y: float) -> bool:
        self.t.append(t)
        self.y.append(y)
        i = len(self.y) - 1
        if self.baseline == "start":
            if self.base is None:
                self.base = y
        elif t >= self.t_skip and (self.base is None or y < self.base):
            self.base, self.i_base = y, i
        if self.base is None or i == self.i_base:
            return False
        level = self.base + self.fraction * (1.0 - self.base)
        if y >= level:
            j = i
            y0, t0 = self.y[j - 1], self.t[j - 1]
            self.result = t0 if y0 >= level else t0 + (level - y0) / (y - y0) * (t - t0)
            return True
        return False


def crossing_time(times_ns, trace, fraction: float = 0.7, baseline: str = "start",
                  t_skip: float = TRANSIENT_SKIP_NS) -> float:
    """Timescale of a contrast trace: first crossing of ``base + fraction*(1 - base)``."""
    tr = _CrossingTracker(fraction, baseline, t_skip)
    for t, y in zip(np.asarray(times_ns, float), np.asarray(trace, float)):
        if tr.push(float(t), float(y)):
            return float(tr.result)
    raise NoCrossingError(f"trace never reaches {fraction:g} of its range")


@dataclass
class SweepPoint:
    Bz: float
    theta: float
    timescale: float
    iz: np.ndarray
    pl_ss: float
    nuclear_pops: np.ndarray | None = None

    def to_row(self) -> list[float]:
        return [self.Bz, self.theta, self.timescale, *map(float, self.iz)]


def sweep_point(cfg: SpinSystemConfig, rates: ElectronicRates, Bz: float, theta: float,
                threshold: float = 0.7, background: float = 0.0, t_end_ns: float = 1200.0,
                dt_ns: float = 2.0, baseline: str = "start", phi: float = 0.0,
                method: str = "auto") -> SweepPoint:
    """Polarization timescale and steady-state <I_z> at one field point.

    The trace starts from the unpolarized ground state; propagation stops as
    soon as the threshold crossing is found.  A trace that has not crossed by
    ``t_end_ns`` gives a NaN timescale.
    """
    model = LindbladModel(cfg, rates, MagneticField.from_bz(Bz, theta, phi))
    ss = model.steady_state()
    ref = LindbladModel.excited_population(ss)
    if ref + background <= 0:
        raise ZeroDivisionError("zero reference and zero background")
    times = np.arange(0.0, t_end_ns + dt_ns / 2, dt_ns)
    tracker = _CrossingTracker(threshold, baseline)
    ts = float("nan")
    for t, sig in zip(times, model.iter_evolve(maximally_mixed_ground(model.N), times,
                                               LindbladModel.excited_population, method=method)):
        if tracker.push(float(t), (sig + background) / (ref + background)):
            ts = float(tracker.result)
            break
    return SweepPoint(float(Bz), float(theta), ts, model.nuclear_polarization(ss), ref,
                      model.nuclear_populations(ss))


def field_sweep(cfg: SpinSystemConfig, rates: ElectronicRates, Bz_grid, theta_grid,
                threshold: float = 0.7, background: float = 0.0, t_end_ns: float = 1200.0,
                dt_ns: float = 2.0, baseline: str = "start", point_fn=None) -> list[SweepPoint]:
    """Row-major (theta outer, Bz inner) sweep; failed points become NaN."""
    point_fn = point_fn or sweep_point
    out = []
    n_nuc = len(cfg.nuclei)
    for th in theta_grid:
        for bz in Bz_grid:
            try:
                out.append(point_fn(cfg, rates, float(bz), float(th), threshold=threshold,
                                    background=background, t_end_ns=t_end_ns, dt_ns=dt_ns,
                                    baseline=baseline))
            except (DegeneracyError, StiffnessError, np.linalg.LinAlgError, ValueError,
                    ZeroDivisionError):
                out.append(SweepPoint(float(bz), float(th), float("nan"),
                                      np.full(n_nuc, np.nan), float("nan")))
    return out


def sweep_maps(points: Sequence[SweepPoint], Bz_grid, theta_grid) -> tuple[np.ndarray, np.ndarray]:
    """(timescale map, mean <I_z> map) with shape (len(theta), len(Bz))."""
    nb, nt = len(Bz_grid), len(theta_grid)
    ts = np.array([p.timescale for p in points], dtype=float).reshape(nt, nb)
    iz = np.array([np.mean(p.iz) if len(p.iz) else 0.0 for p in points], dtype=float).reshape(nt, nb)
    return ts, iz


def find_dip(Bz, values, lo: float, hi: float, rel_tol: float = 0.02) -> float | None:
    """Centre of the lowest plateau inside [lo, hi] if it is a local dip.

    The plateau is the contiguous run of samples within ``rel_tol`` of the
    window minimum; it counts as a dip only when both window edges lie at
    least 5% above it.  Returns None otherwise.
    """
    B = np.asarray(Bz, float)
    v = np.asarray(values, float)
    w = (B >= lo) & (B <= hi) & np.isfinite(v)
    if w.sum() < 3:
        return None
    Bw, vw = B[w], v[w]
    i = int(np.argmin(vw))
    vmin = vw[i]
    near = vw <= vmin * (1 + rel_tol) + 1e-12
    a = i
    while a > 0 and near[a - 1]:
        a -= 1
    b = i
    while b < len(vw) - 1 and near[b + 1]:
        b += 1
    if a == 0 or b == len(vw) - 1:
        return None
    if min(vw[0], vw[-1]) < 1.05 * vmin:
        return None
    return float(0.5 * (Bw[a] + Bw[b]))


def find_peak(Bz, values, lo: float, hi: float) -> float | None:
    B = np.asarray(Bz, float)
    v = np.asarray(values, float)
    w = (B >= lo) & (B <= hi) & np.isfinite(v)
    if not w.any():
        return None
    return float(B[w][int(np.argmax(v[w]))])
