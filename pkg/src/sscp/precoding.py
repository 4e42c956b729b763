"""Inner precoders and transmit-subspace constructions.

Per cluster the composite precoder is F_n @ G_n: a semi-unitary outer matrix
F_n (M x S_n, adapted to channel statistics) and an inner per-slot precoder
G_n (S_n x |U_n|, unit-norm columns) computed from the effective channels
h_tilde = F_n^H h.  Effective channel matrices follow the row convention
``Htilde[i, :] = h_tilde_i^H`` so that ``Htilde @ g`` stacks the inner
products h_tilde_i^H g.
"""

from dataclasses import dataclass

import numpy as np

from . import container
from .errors import ConfigurationError, InfeasibleError, SingularClusterError
from .linalg import herm, orthonormal_columns, top_eigvecs


@dataclass
class SubspaceControl:
    """Per-cluster semi-unitary transmit subspaces."""

    matrices: list                      # cluster n -> (M, S_n) complex

    @property
    def dims(self) -> list:
        return [f.shape[1] for f in self.matrices]

    def validate(self, tol: float = 1e-8) -> None:
        for n, f in enumerate(self.matrices):
            gram = f.conj().T @ f
            err = np.abs(gram - np.eye(f.shape[1])).max(initial=0.0)
            if err > tol:
                raise ConfigurationError(
                    f"subspace {n} is not semi-unitary (max deviation {err:.2e})"
                )

    def save(self, path, meta_extra: dict = None) -> str:
        meta = {"kind": "subspace", "format_version": 1, "dims": self.dims}
        if meta_extra:
            meta.update(meta_extra)
        arrays = {f"F/{n:05d}": f for n, f in enumerate(self.matrices)}
        return container.write_container(path, meta, arrays)

    @classmethod
    def load(cls, path):
        meta, arrays = container.read_container(path)
        if meta.get("kind") != "subspace":
            raise ConfigurationError(f"{path}: not a subspace container")
        mats = [arrays[name] for name in sorted(arrays) if name.startswith("F/")]
        return cls(matrices=mats), meta


def effective_channel(f_n: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Project a channel into the transmit subspace: h_tilde = F^H h."""
    if f_n.shape[0] != h.shape[0]:
        raise ConfigurationError(
            f"dimension mismatch: F is {f_n.shape}, channel has length {h.shape[0]}"
        )
    return f_n.conj().T @ h


def effective_channel_matrix(f_n: np.ndarray, channels) -> np.ndarray:
    """Stack effective channels into the |U| x S row-conjugated matrix."""
    return np.array([effective_channel(f_n, h).conj() for h in channels])


def _check_rank(htilde: np.ndarray, cluster, rel_tol: float = 1e-8) -> None:
    s = np.linalg.svd(htilde, compute_uv=False)
    if s[0] <= 0.0 or s[-1] < rel_tol * s[0]:
        label = "cluster ?" if cluster is None else f"cluster {cluster}"
        raise SingularClusterError(
            f"effective channel of {label} is rank deficient "
            f"(singular values {s[-1]:.3e} .. {s[0]:.3e})",
            cluster=cluster,
        )


def zf_inner(htilde: np.ndarray, cluster=None) -> np.ndarray:
    """Zero-forcing inner precoder with unit-norm columns.

    Column g_k is the normalized projection of h_tilde_k onto the orthogonal
    complement of the other users' effective channels, so Htilde @ G is
    diagonal with positive entries.
    """
    users, dims = htilde.shape
    if dims < users:
        raise ConfigurationError(f"need S >= |U| for zero forcing, got {dims} < {users}")
    _check_rank(htilde, cluster)
    gram = htilde @ htilde.conj().T
    raw = htilde.conj().T @ np.linalg.inv(gram)
    return raw / np.linalg.norm(raw, axis=0, keepdims=True)


def rzf_inner(htilde: np.ndarray, alpha: float) -> np.ndarray:
    """Regularized zero forcing: columns of H^H (H H^H + alpha I)^-1, normalized."""
    if alpha <= 0.0:
        raise ConfigurationError("regularization factor must be positive")
    users = htilde.shape[0]
    gram = htilde @ htilde.conj().T + alpha * np.eye(users)
    raw = htilde.conj().T @ np.linalg.inv(gram)
    return raw / np.linalg.norm(raw, axis=0, keepdims=True)


def rzf_default_alpha(k0: int, s_total: int, per_user_power: float) -> float:
    """Standard regularization K0 / (S0 * P) from the served cell's dimensions."""
    return float(k0) / (float(s_total) * float(per_user_power))


def dominant_eigvecs(theta: np.ndarray, threshold_db: float) -> np.ndarray:
    """Eigenvectors whose eigenvalues are within ``threshold_db`` of the largest."""
    w, v = np.linalg.eigh(herm(theta))
    w = w[::-1]
    v = v[:, ::-1]
    if w[0] <= 0.0:
        return np.zeros((theta.shape[0], 0), dtype=complex)
    cutoff = w[0] * 10.0 ** (threshold_db / 10.0)
    r = int(np.sum(w > cutoff))
    return v[:, :r]


def bd_prebeamforming(scenario, dims=None, eig_threshold_db: float = -20.0,
                      on_infeasible: str = "error") -> SubspaceControl:
    """Block-diagonalization baseline subspace control.

    For each cluster, stack the dominant eigenvectors (relative eigenvalue
    above ``eig_threshold_db``) of the covariance toward every interfered
    user, project the cluster's own normalized covariance onto the null space
    of that stack, and keep the strongest projected eigendirections.

    ``dims`` fixes S_n per cluster (scalar or list); the default is
    min(null-space dimension, |U_n| + 2).  When the stacked interference
    eigenvectors leave fewer than the required dimensions,
    ``on_infeasible="error"`` raises while ``"truncate"`` drops the weakest
    interference directions (smallest eigenvalue, which includes the path
    loss) until the target dimension fits.
    """
    if on_infeasible not in ("error", "truncate"):
        raise ConfigurationError(f"unknown on_infeasible mode {on_infeasible!r}")
    topo = scenario.topology
    m = scenario.M
    matrices = []
    for n in range(topo.num_clusters):
        need = len(topo.cluster_members[n])
        if dims is None:
            target = None
        elif np.isscalar(dims):
            target = int(dims)
        else:
            target = int(dims[n])
        if target is not None and target < need:
            raise ConfigurationError(
                f"cluster {n}: requested S={target} below cluster size {need}"
            )
        vec_list, val_list = [], []
        for k in topo.interfered[n]:
            theta = scenario.cov(k, topo.cluster_bs[n]).theta
            w, v = np.linalg.eigh(herm(theta))
            w, v = w[::-1], v[:, ::-1]
            if w[0] <= 0.0:
                continue
            cutoff = w[0] * 10.0 ** (eig_threshold_db / 10.0)
            r = int(np.sum(w > cutoff))
            vec_list.append(v[:, :r])
            val_list.append(w[:r])
        stacked = (np.concatenate(vec_list, axis=1) if vec_list
                   else np.zeros((m, 0), dtype=complex))
        strengths = np.concatenate(val_list) if val_list else np.zeros(0)

        def null_dim(cols):
            return m - orthonormal_columns(cols).shape[1]

        floor = max(need, target) if target is not None else need
        if null_dim(stacked) < floor:
            if on_infeasible == "error":
                raise InfeasibleError(
                    f"cluster {n}: null space dimension {null_dim(stacked)} < required {floor}"
                )
            order = np.argsort(strengths)[::-1]  # keep strongest directions
            keep = len(order)
            while keep > 0 and null_dim(stacked[:, order[:keep]]) < floor:
                keep -= 1
            stacked = stacked[:, order[:keep]]
        q_int = orthonormal_columns(stacked)
        q_null = orthonormal_columns(np.eye(m, dtype=complex) - q_int @ q_int.conj().T)
        nd = q_null.shape[1]
        s_n = min(nd, need + 2) if target is None else target
        # diagonalize the cluster covariance restricted to the null space so
        # every returned column annihilates the stacked eigenvectors exactly
        reduced = q_null.conj().T @ scenario.cluster_cov(n) @ q_null
        f_n = q_null @ top_eigvecs(reduced, s_n)
        matrices.append(f_n)
    control = SubspaceControl(matrices=matrices)
    control.validate()
    return control
