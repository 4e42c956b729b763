"""Multi-cell scenario generation: layout, path loss, spatial correlation, channels.

A scenario is a hexagonal (or explicitly positioned) grid of base stations,
each serving ``K0`` single-antenna users.  Users either belong to a hotspot
(all hotspot members form one user cluster and share the angular scattering
window toward every BS) or are singleton clusters.  Per cluster/BS pair the
spatial correlation matrix follows a one-ring model for a half-wavelength
uniform linear array:

    [Theta]_{i,m}  ∝  integral over the window of exp(j*pi*(i-m)*sin(phi))

normalized so that trace(Theta_{k,l}) = M * L_{k,l}.
"""

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import container
from .errors import ConfigurationError, NumericalError
from .linalg import complex_gaussian, effective_rank, herm, psd_sqrt

# rng stream tags, keep stable across versions: results are seeded by
# (rng_seed, tag, ...indices)
_STREAM_LAYOUT = 0
_STREAM_SHADOW = 1
_STREAM_WINDOW = 2
_STREAM_CHANNEL = 3

_DEG = math.pi / 180.0


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([int(seed)] + [int(k) for k in key])


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ScenarioConfig:
    """All knobs of a scenario; defaults reproduce the basic multi-cell setup."""

    num_tiers: int = 2                      # 0 = single cell, 1 -> 7 cells, 2 -> 19
    inter_site_distance: float = 500.0      # meters
    M: int = 40                             # BS antennas
    K0: int = 7                             # users per cell
    Kc: int = 3                             # users per hotspot
    hotspots_per_cell: int = 2
    angular_spread: float = math.pi / 6     # radians
    Pb: float = 10.0                        # per-BS transmit power, linear
    per_user_power_rule: object = "uniform"         # or explicit per-user list
    qos_weights_rule: object = "serving-pathloss"   # or explicit per-user list
    epsilon: object = 0.05                  # outage cap, scalar or per-user list
    gamma_floor: float = 0.0
    T: int = 1000                           # slots per statistics epoch
    Tp: int = 20                            # statistics samples per epoch
    rng_seed: int = 0
    # layout details
    edge_threshold_db: object = -30.0       # cross link kept if within this of the
                                            # direct link; None keeps every link
    hotspot_radius: float = 40.0
    hotspot_annulus: tuple = (0.2, 0.9)     # fraction of the cell radius
    min_bs_distance: float = 35.0
    bs_positions: object = None             # explicit [(x, y), ...] overrides the grid
    # propagation details
    shadowing_sigma_db: float = 0.0         # lognormal shadowing, 0 disables
    normalize_pathloss: bool = True
    pathloss_ref_distance: object = None    # None -> inter_site_distance / 2
    # scattering window placement: "random" draws the window center near
    # broadside (as wide-sense stationary scattering seen by the array),
    # "geometric" centers it on the direction toward the cluster anchor
    window_center_rule: str = "random"
    max_center_offset: float = 5.0 * _DEG
    cross_center_offset: float = 45.0 * _DEG
    # window width: "fixed" uses angular_spread on every link; "one-ring"
    # subtends a scattering ring of the given radius from the BS, so nearby
    # (serving) links see wide windows and distant cross links narrow ones
    spread_rule: str = "fixed"
    scattering_radius: float = 85.0
    max_spread: float = 110.0 * _DEG
    quad_nodes: int = 64

    def validate(self) -> None:
        if self.num_tiers < 0:
            raise ConfigurationError("num_tiers must be >= 0")
        if self.inter_site_distance <= 0:
            raise ConfigurationError("inter_site_distance must be positive")
        if self.M < 1 or self.K0 < 1:
            raise ConfigurationError("M and K0 must be >= 1")
        if self.M < self.K0:
            raise ConfigurationError(f"M={self.M} must be >= K0={self.K0}")
        if self.Kc < 0 or self.hotspots_per_cell < 0:
            raise ConfigurationError("Kc and hotspots_per_cell must be >= 0")
        if self.Kc * self.hotspots_per_cell > self.K0:
            raise ConfigurationError(
                f"Kc*hotspots_per_cell={self.Kc * self.hotspots_per_cell} exceeds K0={self.K0}"
            )
        if self.hotspots_per_cell > 0 and self.Kc == 0:
            raise ConfigurationError("hotspots need Kc >= 1 users each")
        if self.angular_spread <= 0:
            raise ConfigurationError("angular_spread must be positive")
        for eps in np.atleast_1d(np.asarray(self.epsilon, dtype=float)):
            if not (0.0 < eps < 1.0):
                raise ConfigurationError(f"epsilon={eps} outside (0, 1)")
        if self.gamma_floor < 0:
            raise ConfigurationError("gamma_floor must be >= 0")
        if self.Pb <= 0:
            raise ConfigurationError("Pb must be positive")
        if self.T < 1 or self.Tp < 1:
            raise ConfigurationError("T and Tp must be >= 1")
        if self.rng_seed < 0:
            raise ConfigurationError("rng_seed must be a non-negative 64-bit integer")
        if self.window_center_rule not in ("random", "geometric"):
            raise ConfigurationError(f"unknown window_center_rule {self.window_center_rule!r}")
        if self.spread_rule not in ("fixed", "one-ring"):
            raise ConfigurationError(f"unknown spread_rule {self.spread_rule!r}")
        lo, hi = self.hotspot_annulus
        if not (0.0 <= lo < hi <= 1.0):
            raise ConfigurationError("hotspot_annulus must satisfy 0 <= lo < hi <= 1")
        if self.spread_rule == "one-ring" and not (0.0 < self.scattering_radius):
            raise ConfigurationError("scattering_radius must be positive")
        if not (0.0 < self.max_spread <= math.pi):
            raise ConfigurationError("max_spread must lie in (0, pi]")
        if self.quad_nodes < 2:
            raise ConfigurationError("quad_nodes must be >= 2")

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["bs_positions"] is not None:
            d["bs_positions"] = [list(p) for p in d["bs_positions"]]
        d["hotspot_annulus"] = list(d["hotspot_annulus"])
        for key in ("epsilon", "per_user_power_rule", "qos_weights_rule"):
            if isinstance(d[key], (tuple, np.ndarray)):
                d[key] = [float(x) for x in d[key]]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        d.pop("schema_version", None)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown config fields: {sorted(unknown)}")
        if d.get("bs_positions") is not None:
            d["bs_positions"] = tuple(tuple(float(x) for x in p) for p in d["bs_positions"])
        if "hotspot_annulus" in d:
            d["hotspot_annulus"] = tuple(float(x) for x in d["hotspot_annulus"])
        for key in ("epsilon", "per_user_power_rule", "qos_weights_rule"):
            if isinstance(d.get(key), list):
                d[key] = tuple(float(x) for x in d[key])
        cfg = cls(**d)
        cfg.validate()
        return cfg


def desk_scale_config(seed: int = 0, **overrides) -> ScenarioConfig:
    """Small preset used for CI-speed runs: 7 cells, M=16, 2 clusters per cell.

    The one-ring spread rule makes serving links see wide scattering windows
    (a 16-antenna array needs roughly ten strong eigendirections to support
    the outage constants at epsilon=0.05) while distant cross links stay
    low rank, so subspace selection has something to trade off.  Hotspots
    sit in the inner half of the cell to keep the serving distance short.
    """
    base = dict(
        num_tiers=1,
        M=16,
        K0=2,
        Kc=1,
        hotspots_per_cell=2,
        spread_rule="one-ring",
        scattering_radius=120.0,
        max_spread=110.0 * _DEG,
        hotspot_annulus=(0.2, 0.45),
        max_center_offset=5.0 * _DEG,
        rng_seed=seed,
    )
    base.update(overrides)
    cfg = ScenarioConfig(**base)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# path loss


def pathloss_urban_macro(distance, shadow_db: float = 0.0):
    """Urban-macro NLOS distance gain, linear scale.

    PL_dB(d) = 128.1 + 37.6*log10(d / 1km); optional shadowing offset in dB.
    """
    d = np.asarray(distance, dtype=float)
    if np.any(d <= 0):
        raise ConfigurationError("pathloss requires distance > 0")
    pl_db = 128.1 + 37.6 * np.log10(d / 1000.0) + shadow_db
    gain = 10.0 ** (-pl_db / 10.0)
    return float(gain) if np.isscalar(distance) else gain


# ---------------------------------------------------------------------------
# spatial correlation


@dataclass
class SpatialCovariance:
    """Per-link spatial correlation matrix with its path gain and usable rank."""

    theta: np.ndarray       # M x M complex Hermitian PSD, trace == M * pathloss
    pathloss: float
    rank: int

    def validate(self, tol: float = 1e-9) -> None:
        m = self.theta.shape[0]
        scale = max(float(np.abs(self.theta).max(initial=0.0)), 1e-300)
        if np.abs(self.theta - self.theta.conj().T).max(initial=0.0) > tol * scale:
            raise NumericalError("covariance is not Hermitian within tolerance")
        w = np.linalg.eigvalsh(herm(self.theta))
        if w[0] < -tol * max(w[-1], 1e-300):
            raise NumericalError(f"covariance has negative eigenvalue {w[0]:.3e}")
        trace = float(np.trace(self.theta).real)
        if abs(trace - m * self.pathloss) > 1e-9 * max(abs(m * self.pathloss), 1e-300):
            raise NumericalError(
                f"trace {trace:.6e} != M*pathloss {m * self.pathloss:.6e}"
            )


def correlation_kernel(phi_min: float, phi_max: float, M: int, nodes: int = 64) -> np.ndarray:
    """Trace-M normalized one-ring ULA correlation matrix for a given window.

    Composite Gauss-Legendre quadrature; panel count grows with the phase
    oscillation M*|sin(phi_max)-sin(phi_min)| so the entries stay accurate up
    to large arrays.  Positive weights make the result PSD by construction.
    A zero-width window is the single-path (rank one) limit.
    """
    if phi_max < phi_min:
        raise ConfigurationError("phi_max must be >= phi_min")
    lags = np.arange(M)
    if phi_max == phi_min:
        a = np.exp(1j * np.pi * lags * math.sin(phi_min))
        return np.outer(a, a.conj())
    panels = max(1, int(np.ceil((M - 1) * abs(math.sin(phi_max) - math.sin(phi_min)) / 4.0)))
    x, w = np.polynomial.legendre.leggauss(nodes)
    edges = np.linspace(phi_min, phi_max, panels + 1)
    phis = np.concatenate([0.5 * (b - a) * x + 0.5 * (a + b) for a, b in zip(edges[:-1], edges[1:])])
    wts = np.concatenate([0.5 * (b - a) * w for a, b in zip(edges[:-1], edges[1:])])
    steer = np.exp(1j * np.pi * np.outer(lags, np.sin(phis)))   # M x Q
    theta = (steer * wts) @ steer.conj().T / (phi_max - phi_min)
    return herm(theta)


def build_correlation(phi_min: float, phi_max: float, pathloss: float, M: int,
                      nodes: int = 64) -> SpatialCovariance:
    """One-ring covariance scaled so trace(Theta) = M * pathloss."""
    kernel = correlation_kernel(phi_min, phi_max, M, nodes=nodes)
    theta = pathloss * kernel
    return SpatialCovariance(theta=theta, pathloss=float(pathloss), rank=effective_rank(theta))


def sample_channel(cov: SpatialCovariance, rng: np.random.Generator) -> np.ndarray:
    """One channel draw h = Theta^(1/2) h_w with h_w standard complex Gaussian."""
    root = psd_sqrt(cov.theta)
    return root @ complex_gaussian(rng, cov.theta.shape[0])


# ---------------------------------------------------------------------------
# topology


@dataclass
class TopologyGraph:
    """Bipartite BS/user graph with clusters and interference bookkeeping.

    ``interferers[k]`` lists every cluster n != cluster_of[k] whose serving BS
    has a link to user k (this includes other clusters served by user k's own
    BS).  ``interfered[n]`` is the mirror image.
    """

    bs_pos: np.ndarray              # (B, 2)
    user_pos: np.ndarray            # (K, 2)
    serving: np.ndarray             # (K,) serving BS index
    cluster_members: tuple          # tuple of tuples of user indices
    cluster_bs: tuple               # serving BS per cluster
    cluster_anchor: np.ndarray      # (N, 2) hotspot center or user position
    edges: tuple                    # sorted tuple of (user, bs)

    def __post_init__(self):
        self.num_bs = int(self.bs_pos.shape[0])
        self.num_users = int(self.user_pos.shape[0])
        self.num_clusters = len(self.cluster_members)
        self.cluster_of = np.full(self.num_users, -1, dtype=np.int64)
        for n, members in enumerate(self.cluster_members):
            for k in members:
                self.cluster_of[k] = n
        self.edge_set = frozenset((int(k), int(l)) for k, l in self.edges)
        bs_clusters = [[] for _ in range(self.num_bs)]
        for n, l in enumerate(self.cluster_bs):
            bs_clusters[l].append(n)
        self.bs_clusters = tuple(tuple(c) for c in bs_clusters)
        interferers = []
        for k in range(self.num_users):
            own = int(self.cluster_of[k])
            hit = [n for n in range(self.num_clusters)
                   if n != own and (k, self.cluster_bs[n]) in self.edge_set]
            interferers.append(tuple(hit))
        self.interferers = tuple(interferers)
        interfered = [[] for _ in range(self.num_clusters)]
        for k, hit in enumerate(self.interferers):
            for n in hit:
                interfered[n].append(k)
        self.interfered = tuple(tuple(u) for u in interfered)

    def validate(self) -> None:
        if np.any(self.cluster_of < 0):
            raise ConfigurationError("every user must belong to exactly one cluster")
        seen = [0] * self.num_users
        for members in self.cluster_members:
            for k in members:
                seen[k] += 1
        if any(c != 1 for c in seen):
            raise ConfigurationError("clusters must partition the user set")
        for k in range(self.num_users):
            if (k, int(self.serving[k])) not in self.edge_set:
                raise ConfigurationError(f"missing direct edge for user {k}")
            if self.cluster_bs[self.cluster_of[k]] != int(self.serving[k]):
                raise ConfigurationError(f"user {k} cluster served by a different BS")
        for k, hit in enumerate(self.interferers):
            for n in hit:
                if k not in self.interfered[n]:
                    raise ConfigurationError("interferer sets are inconsistent")


def hex_bs_positions(num_tiers: int, isd: float) -> np.ndarray:
    """Hexagonal grid centers: the reference cell surrounded by ``num_tiers`` rings."""
    a1 = np.array([isd, 0.0])
    a2 = np.array([isd / 2.0, isd * math.sqrt(3.0) / 2.0])
    cells = []
    for i in range(-num_tiers, num_tiers + 1):
        for j in range(-num_tiers, num_tiers + 1):
            dist = (abs(i) + abs(j) + abs(i + j)) // 2
            if dist <= num_tiers:
                cells.append((dist, i, j))
    cells.sort()
    return np.array([i * a1 + j * a2 for _, i, j in cells])


_HEX_AXES = np.array(
    [[1.0, 0.0], [0.5, math.sqrt(3.0) / 2.0], [-0.5, math.sqrt(3.0) / 2.0]]
)


def _in_hexagon(p: np.ndarray, inradius: float) -> bool:
    return bool(np.all(np.abs(_HEX_AXES @ p) <= inradius))


def _uniform_cell_point(rng, inradius: float, hexagon: bool, min_r: float) -> np.ndarray:
    bound = inradius * 2.0 / math.sqrt(3.0) if hexagon else inradius
    while True:
        p = rng.uniform(-bound, bound, size=2)
        r = math.hypot(p[0], p[1])
        if r < min_r or r > bound:
            continue
        if hexagon and not _in_hexagon(p, inradius):
            continue
        return p


def _uniform_annulus(rng, r_lo: float, r_hi: float) -> np.ndarray:
    r = math.sqrt(rng.uniform(r_lo**2, r_hi**2))
    ang = rng.uniform(-math.pi, math.pi)
    return np.array([r * math.cos(ang), r * math.sin(ang)])


def _layout_and_pathloss(config: ScenarioConfig):
    config.validate()
    isd = config.inter_site_distance
    if config.bs_positions is not None:
        bs_pos = np.asarray(config.bs_positions, dtype=float).reshape(-1, 2)
        hexagon = False
    else:
        bs_pos = hex_bs_positions(config.num_tiers, isd)
        hexagon = True
    n_bs = bs_pos.shape[0]
    inradius = isd / 2.0

    user_pos, serving = [], []
    members_list, cluster_bs, anchors = [], [], []
    ann_lo, ann_hi = config.hotspot_annulus
    for cell in range(n_bs):
        rng = _rng(config.rng_seed, _STREAM_LAYOUT, cell)
        base = bs_pos[cell]
        for _ in range(config.hotspots_per_cell):
            center = base + _uniform_annulus(rng, ann_lo * inradius, ann_hi * inradius)
            members = []
            for _ in range(config.Kc):
                while True:
                    p = center + _uniform_annulus(rng, 0.0, config.hotspot_radius)
                    if math.hypot(*(p - base)) >= config.min_bs_distance:
                        break
                members.append(len(user_pos))
                user_pos.append(p)
                serving.append(cell)
            members_list.append(tuple(members))
            cluster_bs.append(cell)
            anchors.append(center)
        for _ in range(config.K0 - config.Kc * config.hotspots_per_cell):
            p = base + _uniform_cell_point(rng, inradius, hexagon, config.min_bs_distance)
            members_list.append((len(user_pos),))
            cluster_bs.append(cell)
            anchors.append(p)
            user_pos.append(p)
            serving.append(cell)

    user_pos = np.array(user_pos).reshape(-1, 2)
    serving = np.array(serving, dtype=np.int64)
    n_users = user_pos.shape[0]

    dist = np.linalg.norm(user_pos[:, None, :] - bs_pos[None, :, :], axis=2)
    dist = np.maximum(dist, 1.0)  # guard against degenerate co-located points
    if config.shadowing_sigma_db > 0.0:
        shadow = config.shadowing_sigma_db * _rng(
            config.rng_seed, _STREAM_SHADOW
        ).standard_normal((n_users, n_bs))
    else:
        shadow = 0.0
    gains = pathloss_urban_macro(dist, shadow_db=shadow)
    if config.normalize_pathloss:
        ref_d = config.pathloss_ref_distance
        if ref_d is None:
            ref_d = isd / 2.0
        gains = gains / pathloss_urban_macro(float(ref_d))

    direct = gains[np.arange(n_users), serving]
    if config.edge_threshold_db is None:
        keep = np.ones((n_users, n_bs), dtype=bool)
    else:
        rel = 10.0 ** (float(config.edge_threshold_db) / 10.0)
        keep = gains >= rel * direct[:, None]
        keep[np.arange(n_users), serving] = True
    edges = tuple(sorted((int(k), int(l)) for k, l in zip(*np.nonzero(keep))))

    topo = TopologyGraph(
        bs_pos=bs_pos,
        user_pos=user_pos,
        serving=serving,
        cluster_members=tuple(members_list),
        cluster_bs=tuple(int(l) for l in cluster_bs),
        cluster_anchor=np.array(anchors).reshape(-1, 2),
        edges=edges,
    )
    topo.validate()
    return topo, gains


def build_layout(config: ScenarioConfig) -> TopologyGraph:
    """Generate the topology graph for a configuration (deterministic in the seed)."""
    topo, _ = _layout_and_pathloss(config)
    return topo


# ---------------------------------------------------------------------------
# scenario = layout + propagation statistics


class Scenario:
    """Topology plus per-link statistics.

    Per (cluster n, BS l) pair with at least one edge the normalized
    correlation matrix (trace M) is shared by all cluster members, so the
    per-link covariance is pathloss[k, l] * theta_norm[(n, l)].
    """

    def __init__(self, config: ScenarioConfig, topology: TopologyGraph,
                 pathloss: np.ndarray, theta_norm: dict):
        self.config = config
        self.topology = topology
        self.pathloss = pathloss
        self.theta_norm = theta_norm
        self._sqrt_cache = {}

    # -- construction ------------------------------------------------------

    @classmethod
    def generate(cls, config: ScenarioConfig) -> "Scenario":
        topo, gains = _layout_and_pathloss(config)
        theta_norm = {}
        pairs = sorted({(int(topo.cluster_of[k]), l) for k, l in topo.edges})
        for n, l in pairs:
            delta = topo.cluster_anchor[n] - topo.bs_pos[l]
            if config.window_center_rule == "geometric":
                center = math.atan2(delta[1], delta[0])
            else:
                rng = _rng(config.rng_seed, _STREAM_WINDOW, n, l)
                offset = (config.max_center_offset if l == topo.cluster_bs[n]
                          else config.cross_center_offset)
                center = rng.uniform(-offset, offset)
            if config.spread_rule == "one-ring":
                dist = max(math.hypot(delta[0], delta[1]), 1.0)
                ratio = min(config.scattering_radius / dist,
                            math.sin(config.max_spread / 2.0))
                spread = 2.0 * math.asin(ratio)
            else:
                spread = config.angular_spread
            theta_norm[(n, l)] = correlation_kernel(
                center - spread / 2.0, center + spread / 2.0, config.M,
                nodes=config.quad_nodes,
            )
        return cls(config, topo, gains, theta_norm)

    # -- accessors -----------------------------------------------------------

    @property
    def M(self) -> int:
        return self.config.M

    def cov(self, k: int, l: int) -> SpatialCovariance:
        """Covariance of link (user k, BS l); must be an edge."""
        n = int(self.topology.cluster_of[k])
        if (k, l) not in self.topology.edge_set:
            raise ConfigurationError(f"({k}, {l}) is not an edge of the topology")
        gain = float(self.pathloss[k, l])
        theta = gain * self.theta_norm[(n, l)]
        return SpatialCovariance(theta=theta, pathloss=gain, rank=effective_rank(theta))

    def cluster_cov(self, n: int) -> np.ndarray:
        """Normalized (trace M) covariance of cluster n toward its serving BS."""
        return self.theta_norm[(n, self.topology.cluster_bs[n])]

    def norm_sqrt(self, n: int, l: int) -> np.ndarray:
        key = (n, l)
        if key not in self._sqrt_cache:
            self._sqrt_cache[key] = psd_sqrt(self.theta_norm[key])
        return self._sqrt_cache[key]

    def link_factor(self, k: int, l: int) -> np.ndarray:
        """Matrix A with A A^H = Theta_{k,l}; channel draws are A @ h_w."""
        n = int(self.topology.cluster_of[k])
        return math.sqrt(float(self.pathloss[k, l])) * self.norm_sqrt(n, l)

    # -- per-user QoS inputs -------------------------------------------------

    def user_power(self) -> np.ndarray:
        rule = self.config.per_user_power_rule
        K = self.topology.num_users
        if isinstance(rule, str):
            if rule != "uniform":
                raise ConfigurationError(f"unknown power rule {rule!r}")
            p = np.full(K, self.config.Pb / self.config.K0)
        else:
            p = np.asarray(rule, dtype=float)
            if p.shape != (K,):
                raise ConfigurationError(f"explicit power list must have length {K}")
        if np.any(p <= 0):
            raise ConfigurationError("per-user powers must be positive")
        for l in range(self.topology.num_bs):
            total = p[self.topology.serving == l].sum()
            if total > self.config.Pb * (1.0 + 1e-9):
                raise ConfigurationError(
                    f"BS {l} power budget exceeded: {total:.6g} > {self.config.Pb:.6g}"
                )
        return p

    def qos_weights(self) -> np.ndarray:
        rule = self.config.qos_weights_rule
        K = self.topology.num_users
        if isinstance(rule, str):
            if rule != "serving-pathloss":
                raise ConfigurationError(f"unknown weight rule {rule!r}")
            return self.pathloss[np.arange(K), self.topology.serving].copy()
        w = np.asarray(rule, dtype=float)
        if w.shape != (K,):
            raise ConfigurationError(f"explicit weight list must have length {K}")
        return w

    def user_epsilon(self) -> np.ndarray:
        eps = self.config.epsilon
        K = self.topology.num_users
        if np.isscalar(eps):
            return np.full(K, float(eps))
        arr = np.asarray(eps, dtype=float)
        if arr.shape != (K,):
            raise ConfigurationError(f"explicit epsilon list must have length {K}")
        return arr

    # -- serialization ---------------------------------------------------------

    def _serial(self):
        topo = self.topology
        meta = {
            "kind": "scenario",
            "format_version": 1,
            "config": self.config.to_dict(),
            "edges": [[k, l] for k, l in topo.edges],
            "cluster_members": [list(m) for m in topo.cluster_members],
            "cluster_bs": list(topo.cluster_bs),
        }
        arrays = {
            "bs_pos": topo.bs_pos,
            "user_pos": topo.user_pos,
            "serving": topo.serving.astype(np.int64),
            "cluster_anchor": topo.cluster_anchor,
            "pathloss": self.pathloss,
        }
        for (n, l), theta in self.theta_norm.items():
            arrays[f"theta_norm/{n:05d}/{l:05d}"] = theta
        return meta, arrays

    def save(self, path) -> str:
        meta, arrays = self._serial()
        return container.write_container(path, meta, arrays)

    def digest(self) -> str:
        meta, arrays = self._serial()
        return container.container_digest(meta, arrays)

    @classmethod
    def load(cls, path) -> "Scenario":
        meta, arrays = container.read_container(path)
        if meta.get("kind") != "scenario":
            raise ConfigurationError(f"{path}: not a scenario container")
        config = ScenarioConfig.from_dict(meta["config"])
        topo = TopologyGraph(
            bs_pos=arrays["bs_pos"],
            user_pos=arrays["user_pos"],
            serving=arrays["serving"].astype(np.int64),
            cluster_members=tuple(tuple(int(k) for k in m) for m in meta["cluster_members"]),
            cluster_bs=tuple(int(l) for l in meta["cluster_bs"]),
            cluster_anchor=arrays["cluster_anchor"],
            edges=tuple((int(k), int(l)) for k, l in meta["edges"]),
        )
        theta_norm = {}
        for name, arr in arrays.items():
            if name.startswith("theta_norm/"):
                _, n, l = name.split("/")
                theta_norm[(int(n), int(l))] = arr
        return cls(config, topo, arrays["pathloss"], theta_norm)


def build_scenario(config: ScenarioConfig) -> Scenario:
    return Scenario.generate(config)


def draw_channels(scenario: Scenario, slot_index: int, seed: int) -> dict:
    """One slot of instantaneous CSI: {(user, bs): h vector} over all edges.

    Each link uses its own counter-based stream, so draws are reproducible
    from (seed, slot_index) regardless of iteration order.
    """
    draw = {}
    for k, l in scenario.topology.edges:
        rng = _rng(seed, _STREAM_CHANNEL, slot_index, k, l)
        draw[(k, l)] = scenario.link_factor(k, l) @ complex_gaussian(rng, scenario.M)
    return draw
