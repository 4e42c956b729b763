"""Monte Carlo verification: per-draw SINR, outage statistics, overhead ledger.

One vectorized engine simulates blocks of channel draws, forms the inner
precoders per cluster and draw, and evaluates every user's SINR

    SINR_k = P_k |h_{k,b}^H F g_k|^2 / (intra_k + inter_k + 1)

with the intra-cluster term always computed (it is numerically zero for exact
zero forcing and is checked to be, so the same path serves regularized and
noisy-CSI precoders).
"""

import logging
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ConfigurationError, NumericalError
from .linalg import complex_gaussian
from .precoding import SubspaceControl, rzf_default_alpha
from .optimizer import interference_bound

logger = logging.getLogger(__name__)

_STREAM_EVAL = 10
_ZF_LEAK_TOL = 1e-9
_COND_TOL = 1e-8


def _rng(seed, *key):
    return np.random.default_rng([int(seed)] + [int(k) for k in key])


# ---------------------------------------------------------------------------
# scalar SINR (single draw), mirrors the Monte Carlo engine


def sinr(topology, draw: dict, subspace: SubspaceControl, inners: dict,
         power, k: int) -> float:
    """SINR of user k for one channel draw and fixed precoders.

    ``draw`` maps (user, bs) to channel vectors, ``inners`` maps cluster
    index to its inner precoder matrix (unit-norm columns).
    """
    power = np.asarray(power, dtype=float)
    n = int(topology.cluster_of[k])
    members = topology.cluster_members[n]
    f_n = subspace.matrices[n]
    h_own = draw[(k, int(topology.serving[k]))]
    row = h_own.conj() @ f_n @ inners[n]           # h^H F g_j for every member
    i = members.index(k)
    signal = power[k] * abs(row[i]) ** 2
    intra = sum(power[members[j]] * abs(row[j]) ** 2
                for j in range(len(members)) if j != i)
    inter = 0.0
    for nn in topology.interferers[k]:
        h = draw[(k, topology.cluster_bs[nn])]
        leak_row = h.conj() @ subspace.matrices[nn] @ inners[nn]
        inter += float(np.sum(np.asarray(power)[list(topology.cluster_members[nn])]
                              * np.abs(leak_row) ** 2))
    return float(signal / (intra + inter + 1.0))


def perturb_csi(htilde: np.ndarray, sigma_e: float, rng: np.random.Generator) -> np.ndarray:
    """Model imperfect effective CSI: h_hat = h_tilde - e, e ~ CN(0, sigma_e^2 I)."""
    if sigma_e < 0:
        raise ConfigurationError("sigma_e must be >= 0")
    if sigma_e == 0.0:
        return htilde
    return htilde - sigma_e * complex_gaussian(rng, *htilde.shape)


# ---------------------------------------------------------------------------
# vectorized engine


def _draw_edges(scenario, count, seed, chunk_index, round_index=0):
    """Channel matrices (M, count) for every edge, independent per stream key."""
    out = {}
    for k, l in scenario.topology.edges:
        rng = _rng(seed, _STREAM_EVAL, chunk_index, round_index, k, l)
        out[(k, l)] = scenario.link_factor(k, l) @ complex_gaussian(rng, scenario.M, count)
    return out


def _inner_precoders(scenario, subspace, channels, inner, alpha_by_cluster,
                     sigma_e, err_rng):
    """Per-cluster batched inner precoders from a block of channel draws.

    Returns (G, Ht, bad) where G[n] is (c, S_n, u_n) with unit-norm columns,
    Ht[n] the true effective channel rows (c, u_n, S_n), and ``bad`` flags
    draws whose effective channel was rank deficient.
    """
    topo = scenario.topology
    count = next(iter(channels.values())).shape[1]
    bad = np.zeros(count, dtype=bool)
    g_list, ht_list = [], []
    for n in range(topo.num_clusters):
        members = topo.cluster_members[n]
        f_n = subspace.matrices[n]
        eff = np.stack([f_n.conj().T @ channels[(k, topo.cluster_bs[n])]
                        for k in members])              # (u, S, c)
        ht = np.conj(eff.transpose(2, 0, 1))            # (c, u, S), rows h~^H
        ht_list.append(ht)
        ht_used = ht if sigma_e == 0.0 else ht - sigma_e * complex_gaussian(
            err_rng, *ht.shape)
        if inner == "zf":
            u_svd, s, vh = np.linalg.svd(ht_used, full_matrices=False)
            bad |= s[:, -1] < _COND_TOL * s[:, 0]
            s_inv = np.where(s > 0, 1.0 / np.maximum(s, 1e-300), 0.0)
            raw = np.conj(vh.transpose(0, 2, 1)) * s_inv[:, None, :]
            raw = raw @ np.conj(u_svd.transpose(0, 2, 1))   # (c, S, u) = pinv(Ht)
        else:
            gram = ht_used @ np.conj(ht_used.transpose(0, 2, 1))
            gram += alpha_by_cluster[n] * np.eye(len(members))
            x = np.linalg.solve(gram, ht_used)              # (c, u, S)
            raw = np.conj(x.transpose(0, 2, 1))
        norms = np.linalg.norm(raw, axis=1, keepdims=True)
        bad |= np.any(norms[:, 0, :] <= 0, axis=1)
        g_list.append(raw / np.maximum(norms, 1e-300))
    return g_list, ht_list, bad


def _evaluate_block(scenario, subspace, power, channels, inner,
                    alpha_by_cluster, sigma_e, err_rng, check_leakage):
    """(sinr, inter, bad) arrays of shape (K, c) for one block of draws."""
    topo = scenario.topology
    g_list, ht_list, bad = _inner_precoders(
        scenario, subspace, channels, inner, alpha_by_cluster, sigma_e, err_rng)
    count = bad.shape[0]
    power = np.asarray(power, dtype=float)
    signal = np.zeros((topo.num_users, count))
    intra = np.zeros((topo.num_users, count))
    inter = np.zeros((topo.num_users, count))
    for n in range(topo.num_clusters):
        members = list(topo.cluster_members[n])
        t = ht_list[n] @ g_list[n]                      # (c, u, u): h~_i^H g_j
        gains = np.abs(t) ** 2
        if check_leakage:
            row_norms = np.linalg.norm(ht_list[n], axis=2)      # (c, u)
            off = gains.copy()
            idx = np.arange(len(members))
            off[:, idx, idx] = 0.0
            worst = np.sqrt(off.max(initial=0.0)) / max(row_norms.min(initial=1.0), 1e-300)
            if worst > _ZF_LEAK_TOL and not bad.any():
                raise NumericalError(
                    f"zero-forcing leakage {worst:.2e} above tolerance in cluster {n}"
                )
        p_members = power[members]
        weighted = gains * p_members[None, None, :]
        for i, k in enumerate(members):
            signal[k] = weighted[:, i, i]
            intra[k] = weighted[:, i, :].sum(axis=1) - weighted[:, i, i]
    for k in range(topo.num_users):
        for n in topo.interferers[k]:
            members = list(topo.cluster_members[n])
            e = subspace.matrices[n].conj().T @ channels[(k, topo.cluster_bs[n])]
            v = np.einsum("sc,csu->cu", e.conj(), g_list[n])
            inter[k] += (np.abs(v) ** 2) @ power[members]
    sinr_vals = signal / (intra + inter + 1.0)
    return sinr_vals, inter, bad


def simulate_sinr(scenario, subspace: SubspaceControl, power, draws: int,
                  seed: int, inner: str = "zf", rzf_alpha=None,
                  sigma_e: float = 0.0, chunk: int = 512,
                  resample_cap: float = 0.01):
    """SINR and cross-interference samples for every user.

    Returns (sinr (K, draws), inter (K, draws), resampled count).  Draws whose
    effective channel is rank deficient are redrawn (capped at
    ``resample_cap`` of the total).  Bit-reproducible from (seed, draws).
    """
    if inner not in ("zf", "rzf"):
        raise ConfigurationError(f"unknown inner precoder {inner!r}")
    topo = scenario.topology
    subspace.validate()
    if len(subspace.matrices) != topo.num_clusters:
        raise ConfigurationError("subspace control does not match the topology")
    for n, f in enumerate(subspace.matrices):
        if f.shape[1] < len(topo.cluster_members[n]):
            raise ConfigurationError(
                f"cluster {n}: S={f.shape[1]} below cluster size "
                f"{len(topo.cluster_members[n])}"
            )
    power = np.asarray(power, dtype=float)
    if inner == "rzf":
        alpha_by_cluster = _resolve_rzf_alpha(scenario, subspace, power, rzf_alpha)
    else:
        alpha_by_cluster = None
    check_leakage = inner == "zf" and sigma_e == 0.0

    sinr_all = np.zeros((topo.num_users, draws))
    inter_all = np.zeros((topo.num_users, draws))
    resampled = 0
    cap = max(1, int(math.ceil(resample_cap * draws)))
    pos = 0
    for chunk_index in range(math.ceil(draws / chunk)):
        count = min(chunk, draws - pos)
        channels = _draw_edges(scenario, count, seed, chunk_index)
        err_rng = _rng(seed, _STREAM_EVAL, chunk_index, 999)
        s, i, bad = _evaluate_block(scenario, subspace, power, channels, inner,
                                    alpha_by_cluster, sigma_e, err_rng, check_leakage)
        round_index = 0
        while bad.any():
            resampled += int(bad.sum())
            if resampled > cap:
                raise NumericalError(
                    f"more than {cap} singular draws resampled; "
                    "the subspace is too small for zero forcing"
                )
            round_index += 1
            idx = np.nonzero(bad)[0]
            repl = _draw_edges(scenario, len(idx), seed, chunk_index, round_index)
            err_rng2 = _rng(seed, _STREAM_EVAL, chunk_index, 999, round_index)
            s2, i2, bad2 = _evaluate_block(scenario, subspace, power, repl, inner,
                                           alpha_by_cluster, sigma_e, err_rng2,
                                           check_leakage)
            s[:, idx], i[:, idx] = s2, i2
            new_bad = np.zeros_like(bad)
            new_bad[idx[bad2]] = True
            bad = new_bad
        sinr_all[:, pos:pos + count] = s
        inter_all[:, pos:pos + count] = i
        pos += count
    if resampled:
        logger.info("resampled %d singular draws", resampled)
    return sinr_all, inter_all, resampled


def _resolve_rzf_alpha(scenario, subspace, power, rzf_alpha):
    if rzf_alpha is not None:
        return [float(rzf_alpha)] * scenario.topology.num_clusters
    topo = scenario.topology
    dims = subspace.dims
    alpha = []
    for n in range(topo.num_clusters):
        cell = topo.cluster_bs[n]
        s_total = sum(dims[m] for m in topo.bs_clusters[cell])
        cell_users = [k for k in range(topo.num_users) if topo.serving[k] == cell]
        p_mean = float(np.mean(np.asarray(power)[cell_users]))
        alpha.append(rzf_default_alpha(len(cell_users), s_total, p_mean))
    return alpha


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvaluationReport:
    """Per-user outage statistics plus scenario-level aggregates."""

    draws: int
    gamma: float                    # level the satisfaction refers to (or None)
    sat_prob: np.ndarray            # Pr{SINR_k >= w_k * gamma}
    sat_stderr: np.ndarray
    quantile_at_eps: np.ndarray     # empirical eps_k quantile of SINR_k
    outage_throughput: np.ndarray   # log2(1 + quantile)
    min_satisfaction: float
    min_satisfaction_stderr: float
    resampled: int
    sinr_samples: np.ndarray = None

    def to_dict(self) -> dict:
        return {
            "draws": self.draws,
            "gamma": self.gamma,
            "sat_prob": [float(x) for x in self.sat_prob],
            "sat_stderr": [float(x) for x in self.sat_stderr],
            "quantile_at_eps": [float(x) for x in self.quantile_at_eps],
            "outage_throughput": [float(x) for x in self.outage_throughput],
            "min_satisfaction": self.min_satisfaction,
            "min_satisfaction_stderr": self.min_satisfaction_stderr,
            "resampled": self.resampled,
        }

    def per_user_csv(self) -> str:
        lines = ["user,sat_prob,sat_stderr,quantile_at_eps,outage_throughput"]
        for k in range(len(self.sat_prob)):
            lines.append(
                f"{k},{self.sat_prob[k]:.10g},{self.sat_stderr[k]:.10g},"
                f"{self.quantile_at_eps[k]:.10g},{self.outage_throughput[k]:.10g}"
            )
        return "\n".join(lines) + "\n"


def _binomial_stderr(p, n):
    return np.sqrt(np.clip(p * (1.0 - p), 0.0, None) / n)


def outage_statistics(scenario, subspace: SubspaceControl, power=None,
                      weights=None, eps=None, gamma=None, draws: int = 10000,
                      seed: int = 0, inner: str = "zf", rzf_alpha=None,
                      sigma_e: float = 0.0, chunk: int = 512,
                      keep_samples: bool = False) -> EvaluationReport:
    """Simulate a subspace design and report satisfaction/outage statistics.

    When ``gamma`` is None only quantiles and outage throughput are reported
    (satisfaction probabilities need a level to compare against).
    """
    if draws < 100:
        raise ConfigurationError("need at least 100 draws")
    power = scenario.user_power() if power is None else np.asarray(power, dtype=float)
    weights = scenario.qos_weights() if weights is None else np.asarray(weights, dtype=float)
    eps = scenario.user_epsilon() if eps is None else np.asarray(eps, dtype=float)
    samples, _, resampled = simulate_sinr(
        scenario, subspace, power, draws, seed, inner=inner, rzf_alpha=rzf_alpha,
        sigma_e=sigma_e, chunk=chunk)
    K = samples.shape[0]
    quant = np.array([
        float(np.quantile(samples[k], eps[k], method="linear")) for k in range(K)
    ])
    throughput = np.log2(1.0 + quant)
    if gamma is None:
        sat = np.full(K, np.nan)
        stderr = np.full(K, np.nan)
        min_sat, min_sat_se = float("nan"), float("nan")
        gamma_out = None
    else:
        sat = (samples >= np.asarray(weights)[:, None] * float(gamma)).mean(axis=1)
        stderr = _binomial_stderr(sat, draws)
        worst = int(np.argmin(sat))
        min_sat, min_sat_se = float(sat[worst]), float(stderr[worst])
        gamma_out = float(gamma)
    return EvaluationReport(
        draws=draws,
        gamma=gamma_out,
        sat_prob=sat,
        sat_stderr=stderr,
        quantile_at_eps=quant,
        outage_throughput=throughput,
        min_satisfaction=min_sat,
        min_satisfaction_stderr=min_sat_se,
        resampled=resampled,
        sinr_samples=samples if keep_samples else None,
    )


def verify_interference_bound(scenario, subspace: SubspaceControl, power=None,
                              draws: int = 5000, seed: int = 0,
                              chunk: int = 512) -> dict:
    """Empirical rate of the realized interference exceeding its budget.

    Per user: Pr{I_k > I_hat_k} with I_k the simulated cross-cluster
    interference and I_hat_k the deterministic trace bound.
    """
    power = scenario.user_power() if power is None else np.asarray(power, dtype=float)
    _, inter, _ = simulate_sinr(scenario, subspace, power, draws, seed, chunk=chunk)
    topo = scenario.topology
    cluster_power = np.array([
        float(np.sum(power[list(ms)])) for ms in topo.cluster_members
    ])
    bounds = np.array([
        interference_bound(subspace, scenario, cluster_power, k)
        for k in range(topo.num_users)
    ])
    rates = (inter > bounds[:, None]).mean(axis=1)
    return {
        "bound": bounds,
        "violation_rate": rates,
        "stderr": _binomial_stderr(rates, draws),
        "draws": draws,
    }


# ---------------------------------------------------------------------------
# signaling overhead ledger


def overhead_ledger(config, topology, s_dim: int, rank: int) -> dict:
    """Average signaling overhead per slot, exact rational bookkeeping.

    Real-time: the subspace dimension sets the pilot count and the feedback
    vector size.  Statistical: covariance estimation needs M-antenna pilots on
    Tp of the T slots per epoch plus eigenvector/eigenvalue feedback.
    Backhaul: every link's eigen-decomposition travels to the central node
    once per epoch.  A conventional full-CSI row is included for comparison.
    """
    K0, M, Tp, T = config.K0, config.M, config.Tp, config.T
    n_links = len(topology.edges)
    n_users = topology.num_users
    links_per_user = Fraction(n_links, n_users)          # L0
    return {
        "realtime": {
            "pilots_per_slot_cell": Fraction(int(s_dim)),
            "feedback_vectors_per_slot_cell": Fraction(K0),
            "feedback_dim": int(s_dim),
        },
        "statistical": {
            "pilots_per_slot_cell": Fraction(M * Tp, T),
            "eigvector_feedback_per_slot_cell": Fraction(K0 * rank, T) * links_per_user,
            "eigvector_dim": M,
            "eigvalue_feedback_per_slot_cell": Fraction(K0, T) * links_per_user,
            "eigvalue_dim": int(rank),
        },
        "backhaul": {
            "vectors_per_slot": Fraction(n_links * rank, T),
            "vector_dim": M,
            "scalars_per_slot": Fraction(n_links * rank, T),
        },
        "conventional_realtime": {
            "pilots_per_slot_cell": Fraction(M),
            "feedback_vectors_per_slot_cell": Fraction(K0),
            "feedback_dim": M,
        },
    }


def ledger_to_json(ledger: dict) -> dict:
    out = {}
    for section, rows in ledger.items():
        out[section] = {}
        for key, val in rows.items():
            if isinstance(val, Fraction):
                out[section][key] = {
                    "num": val.numerator, "den": val.denominator,
                    "value": float(val),
                }
            else:
                out[section][key] = val
    return out
