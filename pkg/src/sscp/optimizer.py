"""Transmit-subspace optimization under per-user SINR outage targets.

The design problem maximizes a common weighted QoS level gamma subject to a
conservative, deterministic restriction of each user's SINR outage
constraint.  With W_n = F_n F_n^H the restriction is linear in the W's:

    qos margin:   a_k tr(Td_{n(k)} W_{n(k)}) >= gamma * sum_{n in B_k} tr(Tc_{k,n} W_n)
                                                 + c1_k + c2_k * gamma
    gain floor:   tr(Td_n W_n) >= eta_n

where Td_n is the cluster's normalized direct-link covariance (unit top
eigenvalue) and Tc_{k,n} collects the cross-link covariance together with the
power/weight scaling.  The semi-unitary constraint on F_n relaxes to
0 <= W_n <= I, which the inner maximizer of the Lagrange dual attains at
projector matrices, so the relaxation is tight and S_n = rank(W_n) comes out
of the optimization for free.  A bisection over gamma wraps the fixed-gamma
dual solver.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NumericalError
from .linalg import herm
from .precoding import SubspaceControl

logger = logging.getLogger(__name__)


def bernstein_constants(eps):
    """Outage constants (delta, sigma, a) for target outage probabilities.

    delta = ln(1/eps), sigma = (sqrt(2 delta) + sqrt(2 delta + 4)) / 2 and
    a = 1 - sqrt(2 delta)/sigma, the concentration margin of a complex
    Gaussian quadratic form at outage level eps.
    """
    eps = np.asarray(eps, dtype=float)
    if np.any((eps <= 0.0) | (eps >= 1.0)):
        raise ConfigurationError("outage targets must lie in (0, 1)")
    delta = np.log(1.0 / eps)
    sigma, a = _sigma_a(delta)
    return delta, sigma, a


def _sigma_a(delta):
    root = np.sqrt(2.0 * delta)
    sigma = 0.5 * (root + np.sqrt(2.0 * delta + 4.0))
    a = 1.0 - root / sigma
    return sigma, a


# ---------------------------------------------------------------------------
# problem data


@dataclass
class QoSProblem:
    """All constants of the subspace QoS program.

    User-indexed arrays have length K, cluster-indexed ones length N.
    ``theta_cross[(k, n)]`` holds the scaled cross covariance for user k and
    interfering cluster n (n in ``interferers[k]``).
    """

    # per user
    eps: np.ndarray
    delta: np.ndarray
    sigma: np.ndarray
    a: np.ndarray
    c1: np.ndarray
    c2: np.ndarray
    w: np.ndarray
    power: np.ndarray
    cluster_of: np.ndarray
    # per cluster
    members: tuple
    cluster_power: np.ndarray
    lam: np.ndarray
    theta_dir: list
    eta: np.ndarray
    interferers: tuple
    interfered: tuple
    theta_cross: dict
    gamma_floor: float = 0.0

    def __post_init__(self):
        self.K = len(self.eps)
        self.N = len(self.members)
        self.M = self.theta_dir[0].shape[0]
        # flat (user, cluster) pair layout grouped by cluster, for fast trace sums
        pair_user, pair_cluster = [], []
        self._cluster_pairs = []
        for n in range(self.N):
            start = len(pair_user)
            for k in self.interfered[n]:
                pair_user.append(k)
                pair_cluster.append(n)
            self._cluster_pairs.append((start, len(pair_user)))
        self._pair_user = np.asarray(pair_user, dtype=np.int64)
        self._cross_stack = [
            np.stack([self.theta_cross[(k, n)] for k in self.interfered[n]])
            if self.interfered[n] else np.zeros((0, self.M, self.M), dtype=complex)
            for n in range(self.N)
        ]

    # -- constructors --------------------------------------------------------

    @classmethod
    def from_primitives(cls, theta_circ, cross_cov, members, interferers,
                        w, power, eps, gamma_floor=0.0) -> "QoSProblem":
        """Build all derived constants from raw covariances and QoS inputs.

        ``theta_circ[n]`` is the cluster's normalized direct covariance with
        trace M; ``cross_cov[(k, n)]`` the raw covariance of user k toward the
        serving BS of interfering cluster n (path loss included).
        """
        w = np.asarray(w, dtype=float)
        power = np.asarray(power, dtype=float)
        eps = np.asarray(eps, dtype=float)
        K = len(w)
        N = len(members)
        cluster_of = np.full(K, -1, dtype=np.int64)
        for n, ms in enumerate(members):
            for k in ms:
                cluster_of[k] = n
        if np.any(cluster_of < 0):
            raise ConfigurationError("members must cover every user")
        delta, sigma, a = bernstein_constants(eps)
        lam = np.array([float(np.linalg.eigvalsh(herm(t))[-1]) for t in theta_circ])
        if np.any(lam <= 0.0):
            raise ConfigurationError("cluster covariances must be nonzero")
        theta_dir = [herm(t) / l for t, l in zip(theta_circ, lam)]
        sizes = np.array([len(ms) for ms in members], dtype=float)
        u_of = sizes[cluster_of]
        c1 = a * (u_of - 1.0)
        c2 = w / (lam[cluster_of] * power)
        eta = np.array([
            max(sigma[k] ** 2 for k in ms) + len(ms) - 1.0 for ms in members
        ])
        cluster_power = np.array([sum(power[k] for k in ms) for ms in members])
        interferers = tuple(tuple(b) for b in interferers)
        interfered = [[] for _ in range(N)]
        for k, hit in enumerate(interferers):
            for n in hit:
                interfered[n].append(k)
        theta_cross = {}
        for k, hit in enumerate(interferers):
            for n in hit:
                scale = w[k] * cluster_power[n] / (lam[cluster_of[k]] * power[k])
                theta_cross[(k, n)] = scale * herm(np.asarray(cross_cov[(k, n)]))
        return cls(
            eps=eps, delta=delta, sigma=sigma, a=a, c1=c1, c2=c2, w=w,
            power=power, cluster_of=cluster_of, members=tuple(tuple(m) for m in members),
            cluster_power=cluster_power, lam=lam, theta_dir=theta_dir, eta=eta,
            interferers=interferers, interfered=tuple(tuple(u) for u in interfered),
            theta_cross=theta_cross, gamma_floor=float(gamma_floor),
        )

    def with_deltas(self, delta) -> "QoSProblem":
        """Same problem with recalibrated outage exponents delta_k.

        sigma, a, c1 and the per-cluster floor eta follow the new deltas;
        covariance scalings do not depend on delta and stay untouched.
        """
        delta = np.asarray(delta, dtype=float)
        sigma, a = _sigma_a(delta)
        sizes = np.array([len(ms) for ms in self.members], dtype=float)
        u_of = sizes[self.cluster_of]
        eta = np.array([
            max(sigma[k] ** 2 for k in ms) + len(ms) - 1.0 for ms in self.members
        ])
        return QoSProblem(
            eps=self.eps, delta=delta, sigma=sigma, a=a,
            c1=a * (u_of - 1.0), c2=self.c2, w=self.w, power=self.power,
            cluster_of=self.cluster_of, members=self.members,
            cluster_power=self.cluster_power, lam=self.lam,
            theta_dir=self.theta_dir, eta=eta, interferers=self.interferers,
            interfered=self.interfered, theta_cross=self.theta_cross,
            gamma_floor=self.gamma_floor,
        )


def build_constants(scenario, power=None, weights=None, eps=None,
                    gamma_floor=None) -> QoSProblem:
    """Assemble the QoS program from a scenario (defaults from its config)."""
    topo = scenario.topology
    power = scenario.user_power() if power is None else np.asarray(power, dtype=float)
    weights = scenario.qos_weights() if weights is None else np.asarray(weights, dtype=float)
    eps = scenario.user_epsilon() if eps is None else np.asarray(eps, dtype=float)
    if gamma_floor is None:
        gamma_floor = scenario.config.gamma_floor
    theta_circ = [scenario.cluster_cov(n) for n in range(topo.num_clusters)]
    cross_cov = {}
    for k in range(topo.num_users):
        nk = int(topo.cluster_of[k])
        for n in topo.interferers[k]:
            l = topo.cluster_bs[n]
            cross_cov[(k, n)] = scenario.pathloss[k, l] * scenario.theta_norm[(nk, l)]
    return QoSProblem.from_primitives(
        theta_circ, cross_cov, topo.cluster_members, topo.interferers,
        weights, power, eps, gamma_floor=gamma_floor,
    )


# ---------------------------------------------------------------------------
# elementary pieces of the dual method


def interference_bound(subspace: SubspaceControl, scenario, cluster_power, k: int) -> float:
    """Deterministic cross-link interference budget of user k.

    Sum over interfering clusters of P_n * tr(F_n^H Theta_{k, bs(n)} F_n);
    an almost-sure upper bound on the realized interference for wide arrays.
    """
    topo = scenario.topology
    total = 0.0
    for n in topo.interferers[k]:
        theta = scenario.cov(k, topo.cluster_bs[n]).theta
        f = subspace.matrices[n]
        total += float(cluster_power[n]) * float(
            np.einsum("ji,jk,ki->", f.conj(), theta, f).real
        )
    return total


def assemble_dual_matrix(problem: QoSProblem, mu, nu, gamma: float, n: int) -> np.ndarray:
    """Weight matrix of cluster n in the dual inner maximization."""
    mu = np.asarray(mu, dtype=float)
    coef = sum(mu[k] * problem.a[k] for k in problem.members[n]) + float(np.asarray(nu)[n])
    a_n = coef * problem.theta_dir[n]
    for k in problem.interfered[n]:
        a_n = a_n - gamma * mu[k] * problem.theta_cross[(k, n)]
    return herm(a_n)


def inner_maximizer(a_n: np.ndarray, zero_tol: float = 1e-12) -> np.ndarray:
    """Maximizer of tr(A W) over 0 <= W <= I: projector onto positive eigenspace.

    Eigenvalues within ``zero_tol`` of zero are excluded, which keeps the
    maximizer an extreme point without losing objective value.
    """
    w, v = np.linalg.eigh(herm(a_n))
    sel = w > zero_tol
    u = v[:, sel]
    return u @ u.conj().T


def dual_subgradient(problem: QoSProblem, mu, nu, gamma: float, w_list):
    """Subgradient of the dual function at (mu, nu) given the inner maximizer."""
    t_dir = np.array([
        float(np.einsum("ij,ji->", problem.theta_dir[n], w_list[n]).real)
        for n in range(problem.N)
    ])
    leak = np.zeros(problem.K)
    for (k, n), mat in problem.theta_cross.items():
        leak[k] += float(np.einsum("ij,ji->", mat, w_list[n]).real)
    g_mu = (problem.a * t_dir[problem.cluster_of]
            - gamma * leak - problem.c1 - problem.c2 * gamma)
    g_nu = t_dir - problem.eta
    return g_mu, g_nu


# ---------------------------------------------------------------------------
# fixed-gamma feasibility solver


@dataclass
class SolverOptions:
    max_iters: int = 5000
    feas_tol: float = None          # default 1e-6 * K
    zero_tol: float = 1e-12
    average_check_every: int = 25
    repair_steps: int = 60          # greedy eigen-rounding budget
    stall_window: int = 1500        # exit when dual and recovery both stagnate
    max_repair_failures: int = 3    # give up rounding a feasible average

    def resolved_feas_tol(self, n_users: int) -> float:
        return 1e-6 * n_users if self.feas_tol is None else self.feas_tol


@dataclass
class FixedGammaResult:
    feasible: bool
    status: str                     # feasible / feasible-average / certificate /
                                    # inconclusive
    w_list: list = None
    iterations: int = 0
    dual_best: float = math.inf
    max_violation: float = math.inf


class _DualState:
    """Per-iteration evaluation of the decomposed inner maximization.

    Everything is carried in stacked (N, M, M) form so one iteration is a
    handful of batched LAPACK/einsum calls rather than per-cluster loops.
    """

    _DENSE_LIMIT = 96 * 2**20           # bytes for the dense coefficient tensor

    def __init__(self, problem: QoSProblem, gamma: float, zero_tol: float):
        self.p = problem
        self.gamma = gamma
        self.zero_tol = zero_tol
        self._dir_stack = np.stack(problem.theta_dir)
        if len(problem._pair_user):
            self._pair_mats = np.concatenate(
                [m for m in problem._cross_stack if m.shape[0]], axis=0)
            self._pair_cluster = np.concatenate([
                np.full(hi - lo, n, dtype=np.int64)
                for n, (lo, hi) in enumerate(problem._cluster_pairs)
            ])
        else:
            self._pair_mats = np.zeros((0, problem.M, problem.M), dtype=complex)
            self._pair_cluster = np.zeros(0, dtype=np.int64)
        # the dual matrices are linear in the multipliers; for moderate sizes
        # keep the full coefficient tensor so assembly is one matrix-vector
        # product per iteration
        p, size = problem, problem.K + problem.N
        nbytes = size * p.N * p.M * p.M * 16
        if nbytes <= self._DENSE_LIMIT:
            coeffs = np.zeros((size, p.N, p.M, p.M), dtype=complex)
            for k in range(p.K):
                nk = p.cluster_of[k]
                coeffs[k, nk] += p.a[k] * p.theta_dir[nk]
                for n in p.interferers[k]:
                    coeffs[k, n] -= gamma * p.theta_cross[(k, n)]
            for n in range(p.N):
                coeffs[p.K + n, n] = p.theta_dir[n]
            self._coeffs = coeffs.reshape(size, -1)
        else:
            self._coeffs = None

    def _assemble(self, mu, nu):
        p = self.p
        if self._coeffs is not None:
            x = np.concatenate([mu, nu]).astype(complex)
            return (x @ self._coeffs).reshape(p.N, p.M, p.M)
        coef = nu.copy()
        np.add.at(coef, p.cluster_of, mu * p.a)
        a_stack = coef[:, None, None] * self._dir_stack
        if len(self._pair_cluster) and self.gamma != 0.0:
            weighted = (self.gamma * mu[p._pair_user])[:, None, None] * self._pair_mats
            for n, (lo, hi) in enumerate(p._cluster_pairs):
                if hi > lo:
                    a_stack[n] -= weighted[lo:hi].sum(axis=0)
        return a_stack

    def evaluate(self, mu, nu):
        """Inner maximizers for given multipliers.

        Returns (W stack (N, M, M), t_dir, pair_traces, positive_sum) where
        the W's are the projector maximizers of each cluster's dual matrix.
        """
        a_stack = self._assemble(mu, nu)
        a_stack = 0.5 * (a_stack + np.conj(np.swapaxes(a_stack, 1, 2)))
        evals, evecs = np.linalg.eigh(a_stack)
        mask = evals > self.zero_tol
        # the dual value keeps every positive eigenvalue, however tiny, so
        # the infeasibility certificate stays sound
        pos_sum = float(evals[evals > 0.0].sum())
        w_stack = (evecs * mask[:, None, :]) @ np.conj(np.swapaxes(evecs, 1, 2))
        t_dir, pair_traces = self.traces_of(w_stack)
        return w_stack, t_dir, pair_traces, pos_sum

    def slacks(self, t_dir, pair_traces):
        """Absolute constraint slacks [per-user qos, per-cluster floor]."""
        p = self.p
        leak = np.zeros(p.K)
        np.add.at(leak, p._pair_user, pair_traces)
        s_qos = (p.a * t_dir[p.cluster_of] - self.gamma * leak
                 - p.c1 - p.c2 * self.gamma)
        s_floor = t_dir - p.eta
        return np.concatenate([s_qos, s_floor])

    def violations(self, t_dir, pair_traces):
        """Worst normalized violation (negative slack over its scale)."""
        p = self.p
        leak = np.zeros(p.K)
        np.add.at(leak, p._pair_user, pair_traces)
        lhs = p.a * t_dir[p.cluster_of]
        rhs = self.gamma * leak + p.c1 + p.c2 * self.gamma
        scale = np.maximum(1.0, np.maximum(np.abs(lhs), np.abs(rhs)))
        v_qos = (rhs - lhs) / scale
        scale_f = np.maximum(1.0, np.maximum(np.abs(t_dir), np.abs(p.eta)))
        v_floor = (p.eta - t_dir) / scale_f
        return max(float(v_qos.max(initial=-math.inf)),
                   float(v_floor.max(initial=-math.inf)))

    def dual_value(self, mu, nu, pos_sum):
        """Margin-form dual: multipliers live on the probability simplex."""
        p = self.p
        return (pos_sum - float(nu @ p.eta)
                - float(mu @ (p.c1 + p.c2 * self.gamma)))

    def traces_of(self, w_list):
        w_stack = w_list if isinstance(w_list, np.ndarray) else np.stack(w_list)
        t_dir = np.einsum("nij,nji->n", self._dir_stack, w_stack).real
        if len(self._pair_cluster):
            pair_traces = np.einsum("pij,pji->p", self._pair_mats,
                                    w_stack[self._pair_cluster]).real
        else:
            pair_traces = np.zeros(0)
        return t_dir, pair_traces


_PROBES = ((0.0, 1.0), (1.0, 1.0), (1.0, 0.0))


def _project_simplex(x: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex."""
    u = np.sort(x)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, len(x) + 1)
    cond = u - css / idx > 0
    rho = int(np.nonzero(cond)[0][-1])
    tau = css[rho] / (rho + 1.0)
    return np.clip(x - tau, 0.0, None)


def _round_repair(state: _DualState, w_avg, feas_tol: float, max_steps: int):
    """Search for a feasible projector near a (possibly fractional) iterate.

    Eigen-round each cluster to its top-r eigenvectors, starting from the
    count of eigenvalues above 1/2, then greedily grow/shrink per-cluster
    ranks while the worst constraint violation improves.  Candidate moves
    touch a single cluster, so only that cluster's projector is rebuilt.
    """
    p = state.p
    spectra = []
    for w in w_avg:
        vals, vecs = np.linalg.eigh(herm(w))
        spectra.append((vals[::-1], vecs[:, ::-1]))
    ranks = [int(np.sum(vals > 0.5)) for vals, _ in spectra]

    def projector(n, r):
        u = spectra[n][1][:, :r]
        return u @ u.conj().T

    current = np.stack([projector(n, ranks[n]) for n in range(p.N)])

    def violation_with(n=None, w_n=None):
        if n is None:
            t, pair = state.traces_of(current)
        else:
            saved = current[n].copy()
            current[n] = w_n
            t, pair = state.traces_of(current)
            current[n] = saved
        return state.violations(t, pair)

    best_v = violation_with()
    for _ in range(max_steps):
        if best_v <= feas_tol:
            return list(current)
        best_move = None
        for n in range(p.N):
            for delta in (1, -1):
                r = ranks[n] + delta
                if not (0 <= r <= p.M):
                    continue
                w_n = projector(n, r)
                v = violation_with(n, w_n)
                if v < best_v:
                    best_v, best_move = v, (n, r, w_n)
        if best_move is None:
            break
        n, r, w_n = best_move
        ranks[n] = r
        current[n] = w_n
    return list(current) if best_v <= feas_tol else None


def solve_fixed_gamma(problem: QoSProblem, gamma: float,
                      opts: SolverOptions = None, warm_w=None) -> FixedGammaResult:
    """Feasibility of the QoS program at a fixed gamma via the Lagrange dual.

    The feasibility question is posed as maximizing the worst constraint
    slack m over W in [0, I]; dualizing the slack constraints restricts the
    multipliers to the probability simplex and keeps the closed-form
    projector inner maximizers.  Projected subgradient descent (Polyak steps
    toward the best recovered primal margin) then yields, by strong duality,
    either a primal candidate that satisfies the constraints within
    tolerance (FEASIBLE: candidates are ``warm_w`` from a nearby gamma,
    fixed-multiplier probes, the instantaneous maximizer, and greedy
    eigen-roundings of averaged iterates) or a dual value below zero, which
    certifies that no feasible W exists (INFEASIBLE).  Hitting the iteration
    cap without either outcome is treated as infeasible and logged.
    """
    if gamma < 0:
        raise ConfigurationError("gamma must be >= 0")
    opts = opts or SolverOptions()
    feas_tol = opts.resolved_feas_tol(problem.K)
    cert_margin = 1e-9 * (1.0 + gamma)
    state = _DualState(problem, gamma, opts.zero_tol)

    margin_lb = -math.inf               # best primal margin seen (Polyak target)

    def consider(t, pair):
        nonlocal margin_lb
        margin_lb = max(margin_lb, float(state.slacks(t, pair).min()))
        return state.violations(t, pair)

    if warm_w is not None:
        t_w, p_w = state.traces_of(warm_w)
        if consider(t_w, p_w) <= feas_tol:
            return FixedGammaResult(True, "feasible", list(warm_w), 0, math.inf,
                                    state.violations(t_w, p_w))

    for m_scale, n_scale in _PROBES:
        mu = np.full(problem.K, m_scale)
        nu = np.full(problem.N, n_scale)
        w_stack, t_dir, pair_tr, _ = state.evaluate(mu, nu)
        viol = consider(t_dir, pair_tr)
        if viol <= feas_tol:
            return FixedGammaResult(True, "feasible", list(w_stack), 0,
                                    math.inf, viol)

    size = problem.K + problem.N
    x = np.full(size, 1.0 / size)       # uniform start on the simplex
    best_dual = math.inf
    avg_acc = np.zeros((problem.N, problem.M, problem.M), dtype=complex)
    avg_weight = 0.0
    fractional_w = None
    best_viol = math.inf
    repair_failures = 0
    last_progress = 0
    iterations_run = 0
    for it in range(1, opts.max_iters + 1):
        iterations_run = it
        mu, nu = x[: problem.K], x[problem.K:]
        w_stack, t_dir, pair_tr, pos_sum = state.evaluate(mu, nu)
        viol = consider(t_dir, pair_tr)
        if viol <= feas_tol:
            return FixedGammaResult(True, "feasible", list(w_stack), it,
                                    best_dual, viol)
        dual = state.dual_value(mu, nu, pos_sum)
        if dual < best_dual - 1e-12 * (1.0 + abs(dual)):
            best_dual = min(best_dual, dual)
            last_progress = it
        if best_dual < -cert_margin:
            return FixedGammaResult(False, "certificate", None, it, best_dual, viol)
        g = state.slacks(t_dir, pair_tr)
        gnorm = float(np.linalg.norm(g))
        if gnorm <= 0:
            break
        # normalized diminishing step: the simplex has diameter sqrt(2), and
        # Polyak-style targets are unreliable before good primal candidates
        # exist, so pair the robust schedule with a Polyak cap once the gap
        # to the best recovered margin is meaningful
        step = math.sqrt(2.0) / (gnorm * math.sqrt(it))
        if margin_lb > -math.inf and dual > margin_lb:
            step = min(step, (dual - margin_lb) / (gnorm * gnorm))
        x = _project_simplex(x - step * g)
        avg_acc += step * w_stack
        avg_weight += step
        if it % opts.average_check_every == 0 and avg_weight > 0:
            w_avg = list(avg_acc / avg_weight)
            t_a, p_a = state.traces_of(w_avg)
            v_avg = consider(t_a, p_a)
            if v_avg < best_viol - 1e-12:
                best_viol, fractional_w = v_avg, w_avg
                last_progress = it
            if v_avg <= feas_tol:
                repaired = _round_repair(state, w_avg, feas_tol, opts.repair_steps)
                if repaired is not None:
                    t_r, p_r = state.traces_of(repaired)
                    return FixedGammaResult(True, "feasible", repaired, it,
                                            best_dual, state.violations(t_r, p_r))
                repair_failures += 1
                if repair_failures >= opts.max_repair_failures:
                    break               # feasibility is established, only the
                                        # projector rounding keeps failing
        if it - last_progress > opts.stall_window:
            break                       # neither the dual nor the recovered
                                        # candidates are improving
    if fractional_w is not None:
        repaired = _round_repair(state, fractional_w, feas_tol, 4 * opts.repair_steps)
        if repaired is not None:
            t_r, p_r = state.traces_of(repaired)
            return FixedGammaResult(True, "feasible", repaired, iterations_run,
                                    best_dual, state.violations(t_r, p_r))
        if best_viol <= feas_tol:
            logger.info(
                "gamma=%.6g: only the averaged iterate is feasible; "
                "subspace extraction would lose tightness", gamma,
            )
            return FixedGammaResult(True, "feasible-average", fractional_w,
                                    iterations_run, best_dual, best_viol)
    logger.info(
        "gamma=%.6g: no feasible point or certificate within %d iterations; "
        "treating as infeasible (best dual %.6g)", gamma, iterations_run, best_dual,
    )
    return FixedGammaResult(False, "inconclusive", None, iterations_run,
                            best_dual, math.inf)


# ---------------------------------------------------------------------------
# bisection wrapper


@dataclass
class BcaResult:
    feasible: bool
    gamma: float = None
    gamma_upper: float = None       # first level found infeasible by doubling
    subspace: SubspaceControl = None
    dims: list = None
    w_list: list = None
    iterations: int = 0             # bisection steps only
    tightness_residual: float = None
    trace: list = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "feasible": self.feasible,
            "gamma": self.gamma,
            "gamma_upper": self.gamma_upper,
            "dims": self.dims,
            "iterations": self.iterations,
            "tightness_residual": self.tightness_residual,
            "trace": self.trace,
        }


def extract_subspace(w_list, threshold: float = 0.5) -> SubspaceControl:
    """Per-cluster eigenvectors of W_n with eigenvalue above ``threshold``."""
    mats = []
    for w in w_list:
        evals, evecs = np.linalg.eigh(herm(w))
        mats.append(evecs[:, evals > threshold])
    return SubspaceControl(matrices=mats)


def tightness_residual(w_list) -> float:
    """max_n || W_n - W_n^2 ||_F, zero when every W_n is a projector."""
    return max(float(np.linalg.norm(w - w @ w)) for w in w_list)


def bca(problem: QoSProblem, eps_bisect: float = 1e-3,
        opts: SolverOptions = None, doubling_cap: int = 60) -> BcaResult:
    """Bisection over gamma around the fixed-gamma dual solver.

    Starts from the configured floor, doubles gamma from max(floor, 1) until a
    level is infeasible, then bisects the bracket to within ``eps_bisect``.
    Returns the last feasible iterate; ``feasible=False`` signals that even
    the floor cannot be met (admission control).
    """
    if eps_bisect <= 0:
        raise ConfigurationError("eps_bisect must be positive")
    opts = opts or SolverOptions()
    trace = []
    # warm candidates and the returned incumbent only ever hold projector
    # solutions; a fractional averaged iterate is a valid feasibility witness
    # for the bracket but would spoil subspace extraction
    warm = {"w": None}
    incumbent = {"gamma": None, "w": None}

    def probe(gamma):
        res = solve_fixed_gamma(problem, gamma, opts, warm_w=warm["w"])
        trace.append({
            "gamma": gamma,
            "feasible": res.feasible,
            "status": res.status,
            "iterations": res.iterations,
        })
        if res.feasible and res.status != "feasible-average":
            warm["w"] = res.w_list
            if incumbent["gamma"] is None or gamma >= incumbent["gamma"]:
                incumbent["gamma"], incumbent["w"] = gamma, res.w_list
        return res

    floor = float(problem.gamma_floor)
    res0 = probe(floor)
    if not res0.feasible:
        return BcaResult(feasible=False, gamma_upper=None, trace=trace)
    if incumbent["w"] is None:
        logger.warning("floor solution is fractional; extraction may lose tightness")
        incumbent["gamma"], incumbent["w"] = floor, res0.w_list

    gamma_try = max(floor, 1.0)
    gamma_upper = None
    for _ in range(doubling_cap):
        res = probe(gamma_try)
        if not res.feasible:
            gamma_upper = gamma_try
            break
        gamma_try *= 2.0
    if gamma_upper is None:
        raise NumericalError(
            f"QoS level still feasible after {doubling_cap} doublings; "
            "problem appears unbounded"
        )

    lo, hi = floor, gamma_upper
    iterations = 0
    while hi - lo > eps_bisect:
        mid = 0.5 * (lo + hi)
        res = probe(mid)
        iterations += 1
        if res.feasible:
            lo = mid
        else:
            hi = mid
    w_best, gamma_best = incumbent["w"], incumbent["gamma"]
    residual = tightness_residual(w_best)
    subspace = extract_subspace(w_best)
    return BcaResult(
        feasible=True,
        gamma=gamma_best,
        gamma_upper=gamma_upper,
        subspace=subspace,
        dims=subspace.dims,
        w_list=w_best,
        iterations=iterations,
        tightness_residual=residual,
        trace=trace,
    )


# ---------------------------------------------------------------------------
# certified level of a fixed subspace, and outage-exponent refinement


def gram_list(subspace: SubspaceControl) -> list:
    return [f @ f.conj().T for f in subspace.matrices]


def certified_gamma(problem: QoSProblem, w_list) -> float:
    """Largest gamma certified by the restriction for a fixed subspace.

    Returns -inf when the gain floor fails for some user (the subspace cannot
    be certified at any level).
    """
    t_dir = np.array([
        float(np.einsum("ij,ji->", problem.theta_dir[n], w_list[n]).real)
        for n in range(problem.N)
    ])
    leak = np.zeros(problem.K)
    for (k, n), mat in problem.theta_cross.items():
        leak[k] += float(np.einsum("ij,ji->", mat, w_list[n]).real)
    sizes = np.array([len(ms) for ms in problem.members], dtype=float)
    u_of = sizes[problem.cluster_of]
    t_user = t_dir[problem.cluster_of]
    if np.any(t_user < problem.sigma ** 2 + u_of - 1.0):
        return -math.inf
    caps = (problem.a * t_user - problem.c1) / (leak + problem.c2)
    gamma = float(caps.min())
    return gamma if gamma >= 0.0 else -math.inf


DELTA_REFINE_LO = math.log(1.0 / 0.5)
DELTA_REFINE_HI = math.log(1.0 / 0.001)


def margin_at_delta(delta: float, t_user: float, leak: float, c2: float,
                    cluster_size: float, gamma: float) -> float:
    """Constraint slack of one user at outage exponent delta (fixed subspace).

    Strictly decreasing in delta, which makes the refinement a bisection.
    """
    sigma, a = _sigma_a(np.asarray(delta, dtype=float))
    m_qos = a * (t_user - (cluster_size - 1.0)) - gamma * leak - c2 * gamma
    m_floor = t_user - sigma ** 2 - (cluster_size - 1.0)
    return float(np.minimum(m_qos, m_floor))


def largest_feasible_delta(t_user, leak, c2, cluster_size, gamma,
                           lo: float = DELTA_REFINE_LO, hi: float = DELTA_REFINE_HI,
                           tol: float = 1e-9):
    """Largest delta in [lo, hi] with nonnegative margin, None if none exists."""
    if margin_at_delta(lo, t_user, leak, c2, cluster_size, gamma) < 0.0:
        return None
    if margin_at_delta(hi, t_user, leak, c2, cluster_size, gamma) >= 0.0:
        return hi
    a, b = lo, hi
    while b - a > tol:
        mid = 0.5 * (a + b)
        if margin_at_delta(mid, t_user, leak, c2, cluster_size, gamma) >= 0.0:
            a = mid
        else:
            b = mid
    return a


def refine_delta(problem: QoSProblem, scenario, subspace_bd: SubspaceControl,
                 draws: int, seed: int = 0, gamma_rule: str = "min",
                 lo: float = DELTA_REFINE_LO, hi: float = DELTA_REFINE_HI):
    """Recalibrate the outage exponents against an empirical reference design.

    Simulates the baseline subspace with zero-forcing inner precoding, reads
    off the per-user epsilon-quantile of the SINR, forms the reference level
    gamma_ref (min over users of quantile / weight by default), and replaces
    each delta_k by the largest value that the restriction still certifies at
    (subspace_bd, gamma_ref).  Users whose margin is negative over the whole
    search range keep their original delta.

    Returns (refined problem, info dict).
    """
    from .evaluation import outage_statistics  # deferred: evaluation imports precoding

    if draws < 2000:
        raise ConfigurationError("refinement needs at least 2000 draws")
    report = outage_statistics(
        scenario, subspace_bd, power=problem.power, weights=problem.w,
        eps=problem.eps, gamma=None, draws=draws, seed=seed,
    )
    per_user_gamma = report.quantile_at_eps / problem.w
    if gamma_rule == "min":
        gamma_ref = float(per_user_gamma.min())
    elif gamma_rule == "per-user":
        gamma_ref = per_user_gamma
    else:
        raise ConfigurationError(f"unknown gamma_rule {gamma_rule!r}")

    w_list = gram_list(subspace_bd)
    t_dir = np.array([
        float(np.einsum("ij,ji->", problem.theta_dir[n], w_list[n]).real)
        for n in range(problem.N)
    ])
    leak = np.zeros(problem.K)
    for (k, n), mat in problem.theta_cross.items():
        leak[k] += float(np.einsum("ij,ji->", mat, w_list[n]).real)

    sizes = np.array([len(ms) for ms in problem.members], dtype=float)
    new_delta = problem.delta.copy()
    skipped = []
    for k in range(problem.K):
        g_k = gamma_ref if np.isscalar(gamma_ref) else float(gamma_ref[k])
        d = largest_feasible_delta(
            t_dir[problem.cluster_of[k]], leak[k], problem.c2[k],
            sizes[problem.cluster_of[k]], g_k, lo=lo, hi=hi,
        )
        if d is None:
            skipped.append(k)
            logger.info("refine: user %d margin negative over search range, "
                        "keeping delta=%.4g", k, problem.delta[k])
        else:
            new_delta[k] = d
    info = {
        "gamma_ref": gamma_ref if np.isscalar(gamma_ref) else list(map(float, gamma_ref)),
        "skipped_users": skipped,
        "delta": [float(d) for d in new_delta],
    }
    return problem.with_deltas(new_delta), info
