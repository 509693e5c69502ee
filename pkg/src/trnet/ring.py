"""Tensor-ring representation and algebra.

A ring over a shape (I_1, ..., I_d) is an ordered list of 3-mode cores
U_k with shape (R_{k-1}, I_k, R_k), bond ranks chaining cyclically
(R_0 = R_d).  Merging a contiguous run contracts the shared bonds into
one open tensor (left bond, run modes..., right bond); the dense tensor
the ring represents is the full merge followed by the bond trace.

Also here: the variance-calibrated Gaussian initializer, alternating
least-squares decomposition of a dense tensor into a ring, and the
``.trm`` container of named tensors.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .planner import MergePlan, balanced_plan
from .tensor import DenseTensor, as_ndarray, dumps_trt, loads_trt, tensordot_counted

__all__ = [
    "TRCore",
    "TRFactorSet",
    "InitSpec",
    "ALSOptions",
    "DecompResult",
    "merge",
    "merge_chain",
    "construct",
    "random_init",
    "decomp",
    "save_trm",
    "load_trm",
    "save_ring",
    "load_ring",
]

TRM_MAGIC = b"TRM1"


class TRCore:
    """One ring core: modes (left bond, physical mode, right bond)."""

    __slots__ = ("_data",)

    def __init__(self, data):
        t = data if isinstance(data, DenseTensor) else DenseTensor(data)
        if t.ndim != 3:
            raise ValueError(f"a core must have exactly 3 modes, got shape {t.shape}")
        self._data = t

    @property
    def data(self) -> DenseTensor:
        return self._data

    @property
    def left_rank(self) -> int:
        return self._data.shape[0]

    @property
    def mode_size(self) -> int:
        return self._data.shape[1]

    @property
    def right_rank(self) -> int:
        return self._data.shape[2]

    def __repr__(self) -> str:
        return f"TRCore{self._data.shape}"


class TRFactorSet:
    """An ordered, cyclically consistent list of cores.

    Immutable; bond ranks may vary along the ring as long as each
    core's right bond matches the next core's left bond and the last
    wraps to the first.
    """

    def __init__(self, cores):
        cores = tuple(c if isinstance(c, TRCore) else TRCore(c) for c in cores)
        if not cores:
            raise ValueError("a ring needs at least one core")
        for i, core in enumerate(cores):
            nxt = cores[(i + 1) % len(cores)]
            if core.right_rank != nxt.left_rank:
                raise ValueError(
                    f"bond mismatch between core {i + 1} (right rank "
                    f"{core.right_rank}) and core {(i + 1) % len(cores) + 1} "
                    f"(left rank {nxt.left_rank})")
        self._cores = cores

    def __len__(self) -> int:
        return len(self._cores)

    def __iter__(self):
        return iter(self._cores)

    def __getitem__(self, i) -> TRCore:
        return self._cores[i]

    @property
    def d(self) -> int:
        return len(self._cores)

    def shape(self) -> tuple:
        return tuple(c.mode_size for c in self._cores)

    def bond_ranks(self) -> tuple:
        """Right bond of each core; entry d-1 is the closure bond."""
        return tuple(c.right_rank for c in self._cores)

    @property
    def uniform_rank(self):
        ranks = set(self.bond_ranks())
        return ranks.pop() if len(ranks) == 1 else None

    def param_count(self) -> int:
        return sum(c.data.size for c in self._cores)

    def rotated(self, k: int) -> "TRFactorSet":
        """Ring with cores cyclically shifted so old core k+1 comes first."""
        k %= len(self._cores)
        return TRFactorSet(self._cores[k:] + self._cores[:k])


def merge_chain(arrays, plan: MergePlan | None = None) -> np.ndarray:
    """Contract an open chain of 3-mode core arrays along shared bonds.

    Result modes: (left bond of first, each core's physical mode in
    order, right bond of last).  ``plan`` fixes the pairwise order
    (balanced by default); the value is order-independent.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    if not arrays:
        raise ValueError("cannot merge an empty chain")
    if len(arrays) == 1:
        return arrays[0]
    if plan is None:
        plan = balanced_plan(1, len(arrays))
    leaves = plan.leaves
    if len(leaves) != len(arrays):
        raise ValueError(
            f"plan covers {len(leaves)} cores but the chain has {len(arrays)}")
    base = leaves[0]

    def ev(tree) -> np.ndarray:
        if isinstance(tree, int):
            return arrays[tree - base]
        left = ev(tree[0])
        right = ev(tree[1])
        return tensordot_counted(left, right, [left.ndim - 1], [0])

    return ev(plan.tree)


def merge(u: TRFactorSet, k: int, j: int, plan: MergePlan | None = None) -> DenseTensor:
    """Merge cores k..j (1-based, inclusive) of a ring into one tensor.

    Requires 1 <= k < j <= d.  If ``plan`` is given its leaves must be
    exactly k..j.
    """
    d = u.d
    if not (1 <= k < j <= d):
        raise ValueError(f"need 1 <= k < j <= {d}, got k={k}, j={j}")
    if plan is not None and plan.leaves != tuple(range(k, j + 1)):
        raise ValueError(
            f"plan leaves {plan.leaves} do not cover cores {k}..{j}")
    arrays = [u[i].data.array for i in range(k - 1, j)]
    if plan is None:
        plan = balanced_plan(k, j)
    return DenseTensor(merge_chain(arrays, plan))


def construct(u: TRFactorSet) -> DenseTensor:
    """Dense tensor the ring represents: full merge, then bond trace."""
    if u.d == 1:
        arr = u[0].data.array
        return DenseTensor(np.trace(arr, axis1=0, axis2=2))
    m = merge_chain([c.data.array for c in u])
    return DenseTensor(np.trace(m, axis1=0, axis2=m.ndim - 1))


@dataclass(frozen=True)
class InitSpec:
    """Gaussian core initialization calibrated to the constructed tensor.

    Cores drawn i.i.d. N(0, sigma^2) give the constructed tensor entry
    variance exactly rank^d * sigma^(2d) (one bond sum per core, and the
    summed product terms are pairwise uncorrelated).  Solving for a
    target entry standard deviation v gives
    sigma = (v^2 / rank^d)^(1 / (2d)); the default target is
    v = sqrt(2 / N) with N the uncompressed parameter count, which
    keeps layer activations scaled as in the uncompressed net.
    """

    uncompressed_param_count: int
    num_cores: int
    rank: int
    target_std: float | None = None

    def __post_init__(self):
        if self.uncompressed_param_count < 1:
            raise ValueError("uncompressed_param_count must be >= 1")
        if self.num_cores < 1:
            raise ValueError("num_cores must be >= 1")
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.target_std is not None and not self.target_std > 0:
            raise ValueError("target_std must be > 0")

    @property
    def resolved_target_std(self) -> float:
        if self.target_std is not None:
            return float(self.target_std)
        return float(np.sqrt(2.0 / self.uncompressed_param_count))

    @property
    def sigma(self) -> float:
        v = self.resolved_target_std
        d = self.num_cores
        return float((v * v / self.rank ** d) ** (1.0 / (2 * d)))


def random_init(shape, rank: int, init: InitSpec | None = None, seed: int = 0) -> TRFactorSet:
    """Fresh ring over ``shape`` with uniform bond rank and calibrated scale.

    Core streams are split from one seed, so adding or removing cores
    elsewhere in a model does not shift this ring's draw.
    """
    shape = tuple(int(s) for s in shape)
    if not shape:
        raise ValueError("shape must have at least one mode")
    if any(s < 1 for s in shape):
        raise ValueError(f"mode sizes must be >= 1, got {shape}")
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    if init is None:
        init = InitSpec(uncompressed_param_count=int(np.prod(shape)),
                        num_cores=len(shape), rank=rank)
    if init.num_cores != len(shape):
        raise ValueError(
            f"init expects {init.num_cores} cores but shape has {len(shape)} modes")
    if init.rank != rank:
        raise ValueError(f"init rank {init.rank} does not match rank {rank}")
    sigma = init.sigma
    streams = np.random.SeedSequence(seed).spawn(len(shape))
    cores = []
    for mode, stream in zip(shape, streams):
        rng = np.random.default_rng(stream)
        cores.append(TRCore(rng.normal(0.0, sigma, size=(rank, mode, rank))))
    return TRFactorSet(cores)


@dataclass(frozen=True)
class ALSOptions:
    max_sweeps: int = 100
    tol: float = 1e-10
    seed: int = 0
    restarts: int = 5
    # an attempt at or below this error ends the restart loop early; it is
    # only a shortcut, the best attempt is returned either way
    success_error: float = 1e-9
    # extra Gauss-Newton polish rounds taken when every sweep attempt
    # stalls above success_error (0 disables the polish stage)
    polish_starts: int = 4


# largest data-size x parameter-count product the polish stage will build a
# dense Jacobian for (~8 MB of float64)
_LM_BUDGET = 1 << 20


@dataclass
class DecompResult:
    ring: TRFactorSet
    sweep_errors: list = field(default_factory=list)
    attempts: int = 1

    @property
    def final_error(self) -> float:
        return self.sweep_errors[-1] if self.sweep_errors else float("nan")


def _svd_init(arr: np.ndarray, rank: int) -> list:
    """Sequential-SVD warm start for ALS.

    Splits the first mode's unfolding into a bond pair (closure bond
    last), then peels the remaining modes one truncated SVD at a time.
    Exact whenever no step truncates (always for d <= 2); otherwise a
    structured start that lands ALS near the target, where random
    starts often hit long plateaus.
    """
    d = arr.ndim
    r = rank
    if d == 1:
        core = np.zeros((r, arr.shape[0], r))
        core[0, :, 0] = arr
        return [core]
    first = arr.reshape(arr.shape[0], -1)
    u, s, vt = np.linalg.svd(first, full_matrices=False)
    keep = min(r * r, s.size)
    cols = np.zeros((arr.shape[0], r * r))
    cols[:, :keep] = u[:, :keep]
    cores = [cols.reshape(arr.shape[0], r, r).transpose(1, 0, 2)]
    rem = np.zeros((r * r, first.shape[1]))
    rem[:keep] = s[:keep, None] * vt[:keep]
    # bond pair (a, b): a closes the ring, so it rides along to the end
    z = np.moveaxis(rem.reshape((r, r) + arr.shape[1:]), 0, -1)
    for k in range(1, d - 1):
        mat = z.reshape(r * arr.shape[k], -1)
        u, s, vt = np.linalg.svd(mat, full_matrices=False)
        keep = min(r, s.size)
        cols = np.zeros((mat.shape[0], r))
        cols[:, :keep] = u[:, :keep]
        cores.append(cols.reshape(r, arr.shape[k], r))
        rem = np.zeros((r, mat.shape[1]))
        rem[:keep] = s[:keep, None] * vt[:keep]
        z = rem
    cores.append(z.reshape(r, arr.shape[d - 1], r))
    return cores


def _solve_core(g: np.ndarray, xmat: np.ndarray) -> np.ndarray:
    """Minimum-norm least squares G @ W ~= X.

    The system is rank deficient whenever the bond pair outnumbers the
    rest of the tensor (and near-deficient close to convergence), so the
    SVD route is the only one that keeps sweeps stable; normal equations
    blow up along the null space.
    """
    w, _, _, _ = np.linalg.lstsq(g, xmat, rcond=None)
    return w


def decomp(x, rank: int, num_modes: int | None = None,
           opts: ALSOptions | None = None) -> DecompResult:
    """Fit a uniform-rank ring to a dense tensor by alternating least squares.

    Each pass solves every core exactly against the merge of the other
    d-1 cores (taken in ring order starting after the updated one), so
    the relative fit error is non-increasing sweep over sweep.  An
    attempt stops after ``max_sweeps`` or when a sweep stops improving
    the error meaningfully; because the loss surface has flat basins
    under random starts, up to ``restarts`` deterministic attempts run
    and the best one is returned (``sweep_errors`` is that attempt's
    error trajectory, extended by the polish milestone when one fires).

    When every sweep attempt stalls above ``success_error`` and the
    problem is small enough to afford a dense Jacobian, a damped
    Gauss-Newton polish with a graduated norm penalty takes over; the
    shrinking penalty steers iterates out of the spurious basins that
    trap coordinate-wise updates.
    """
    arr = as_ndarray(x)
    if not np.all(np.isfinite(arr)):
        raise ValueError("input tensor must be finite")
    if num_modes is not None and num_modes != arr.ndim:
        raise ValueError(f"expected {num_modes} modes, input has {arr.ndim}")
    d = arr.ndim
    if d < 1:
        raise ValueError("input must have at least one mode")
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    opts = opts or ALSOptions()
    if opts.restarts < 1:
        raise ValueError("restarts must be >= 1")
    if opts.max_sweeps < 1:
        raise ValueError("max_sweeps must be >= 1")

    norm = float(np.linalg.norm(arr))
    if norm == 0.0:
        cores = [np.zeros((rank, m, rank)) for m in arr.shape]
        return DecompResult(ring=TRFactorSet(cores), sweep_errors=[0.0])

    scale = float(arr.std()) or 1.0
    init = InitSpec(uncompressed_param_count=arr.size, num_cores=d, rank=rank,
                    target_std=scale)

    best = None
    for attempt in range(opts.restarts):
        if attempt == 0:
            cores = _svd_init(arr, rank)
        else:
            ring = random_init(arr.shape, rank, init, seed=(opts.seed, attempt))
            cores = [c.data.array.copy() for c in ring]
        result = _als_attempt(arr, norm, cores, opts)
        if best is None or result.final_error < best.final_error:
            best = result
        best.attempts = attempt + 1
        if best.final_error <= opts.success_error:
            return best

    param_count = sum(c.data.array.size for c in best.ring)
    if arr.size * param_count > _LM_BUDGET or opts.polish_starts < 1:
        return best

    def adopt(cores, err):
        nonlocal best
        if err < best.final_error:
            best = DecompResult(ring=TRFactorSet(cores),
                                sweep_errors=best.sweep_errors + [err],
                                attempts=best.attempts)

    # finish the best sweep iterate locally first: near a solution the
    # damped Newton steps converge quadratically where sweeping crawls
    cores = [c.data.array.copy() for c in best.ring]
    cores, err = _lm_refine(arr, norm, cores, 0.0, max_iters=120,
                            target=1e-13)
    adopt(cores, err)
    if best.final_error <= opts.success_error:
        return best

    # rescue rounds: jolted restarts around the best iterate escape deep
    # spurious basins; graduated-penalty runs from fresh seeds migrate
    # across the landscape when the whole neighborhood is bad
    kick_opts = ALSOptions(max_sweeps=150, tol=opts.tol, seed=opts.seed,
                           restarts=1, polish_starts=0)
    for round_ in range(opts.polish_starts):
        for k, kick_scale in enumerate((0.3, 1.0, 3.0)):
            rng = np.random.default_rng((opts.seed, 7919, round_, k))
            cores = [c.data.array +
                     kick_scale * (c.data.array.std() or 1.0) *
                     rng.standard_normal(c.data.array.shape)
                     for c in best.ring]
            result = _als_attempt(arr, norm, cores, kick_opts)
            cores = [c.data.array.copy() for c in result.ring]
            cores, err = _lm_refine(arr, norm, cores, 0.0, max_iters=80,
                                    target=1e-13)
            best.attempts += 1
            adopt(cores, err)
            if best.final_error <= opts.success_error:
                return best
        ring = random_init(arr.shape, rank, init,
                           seed=(opts.seed, 104729, round_ + 1))
        cores = [c.data.array.copy() for c in ring]
        cores, err = _lm_polish(arr, norm, cores)
        best.attempts += 1
        adopt(cores, err)
        if best.final_error <= opts.success_error:
            return best
    return best


def _left_orthogonalize(cores) -> None:
    """Gauge fix in place: QR each core, push the factor rightward.

    The represented tensor is unchanged, but core norms stay bounded;
    without this the scales of neighboring cores drift apart (g and
    1/g) until the least-squares systems hit the float64 condition
    ceiling.
    """
    for k in range(len(cores) - 1):
        rl, m, rr = cores[k].shape
        q, rmat = np.linalg.qr(cores[k].reshape(rl * m, rr))
        if q.shape[1] < rr:
            qp = np.zeros((rl * m, rr))
            qp[:, :q.shape[1]] = q
            rp = np.zeros((rr, rr))
            rp[:q.shape[1], :] = rmat
            q, rmat = qp, rp
        cores[k] = np.ascontiguousarray(q.reshape(rl, m, rr))
        cores[k + 1] = np.tensordot(rmat, cores[k + 1], axes=([1], [0]))


def _design_matrix(cores, i: int) -> np.ndarray:
    """Merge of all cores but ``i`` as the matrix multiplying that core.

    Rows run over the complement's physical modes (in ring order starting
    after core i), columns over core i's (left, right) bond pair.
    """
    others = cores[i + 1:] + cores[:i]
    if not others:
        # d == 1: the complement is the closure bond identity
        return np.eye(cores[i].shape[0]).reshape(1, -1)
    mc = merge_chain(others)
    # mc modes: (bond r_i, other physical modes..., bond r_{i-1})
    perm = tuple(range(1, mc.ndim)) + (0,)
    return mc.transpose(perm).reshape(-1, cores[i].shape[0] * cores[i].shape[2])


def _als_attempt(arr, norm, cores, opts: ALSOptions) -> DecompResult:
    d = arr.ndim

    errors = []
    best_err = float("inf")
    best_cores = None
    prev_cores = None
    for _ in range(opts.max_sweeps):
        if d > 1:
            _left_orthogonalize(cores)
        snapshot = [c.copy() for c in cores]
        err = best_err
        for i in range(d):
            g = _design_matrix(cores, i)
            mode_order = tuple(range(i + 1, d)) + tuple(range(i)) + (i,)
            xmat = arr.transpose(mode_order).reshape(-1, arr.shape[i])
            r_left = cores[i].shape[0]
            r_right = cores[i].shape[2]
            w_old = cores[i].transpose(0, 2, 1).reshape(-1, arr.shape[i])
            w_new = _solve_core(g, xmat)
            # the unfolding is an isometry, so these residuals ARE the fit
            # error; accepting a candidate only when it measures no worse
            # than the current core keeps the sweep from regressing even
            # when the truncated solve misjudges an ill-conditioned system
            resid_old = float(np.linalg.norm(xmat - g @ w_old)) / norm
            resid_new = float(np.linalg.norm(xmat - g @ w_new)) / norm
            if resid_new <= resid_old:
                cores[i] = np.ascontiguousarray(
                    w_new.reshape(r_left, r_right, arr.shape[i]).transpose(0, 2, 1))
                err = resid_new
            else:
                err = resid_old
        # a sweep advances all cores along a correlated direction; stepping
        # further along it (classic line acceleration) cuts through the
        # long shallow valleys where plain sweeping crawls; candidates are
        # rebalanced before evaluation so accepted steps cannot compound
        # into scale drift that poisons later residual readings
        if prev_cores is not None:
            for beta in (1.0, 3.0):
                cand = [c + beta * (c - p) for c, p in zip(cores, prev_cores)]
                if d > 1:
                    _left_orthogonalize(cand)
                cand_err = float(
                    np.linalg.norm(arr - construct(TRFactorSet(cand)).array) / norm)
                if cand_err < err:
                    cores = cand
                    err = cand_err
        prev_cores = snapshot
        # error readings route the same contraction two ways (per-core
        # unfolding vs full rebuild); the bond trace cancels large
        # intermediates, so readings of one state can wobble by ~1e-4
        # relative on badly conditioned iterates.  The returned ring and
        # trajectory track the best reading, so wobble cannot corrupt the
        # result; a jump past this margin means the solver itself diverged
        if err > best_err * 1.01 + 1e-9:
            raise RuntimeError(
                f"fit error increased between sweeps ({best_err} -> {err}); "
                "this indicates a numerical failure")
        prev_best = best_err
        if err < best_err:
            best_err = err
            best_cores = [c.copy() for c in cores]
        errors.append(best_err)
        # scale-relative progress test: keeps sweeping through shallow
        # valleys (absolute improvement tiny, relative to error meaningful)
        # yet stops promptly at convergence or a genuine stall
        if prev_best - best_err < opts.tol * best_err + 1e-15:
            break
    return DecompResult(ring=TRFactorSet(best_cores), sweep_errors=errors)


def _ring_jacobian(cores, dims) -> np.ndarray:
    """Dense Jacobian of vec(construct(cores)) in the cores' entries.

    Column blocks follow core order; within a block, columns run over
    (left bond, right bond, mode) in that significance order.
    """
    d = len(cores)
    size = int(np.prod(dims))
    blocks = []
    for i in range(d):
        g = _design_matrix(cores, i)
        ji = np.einsum("pc,qQ->pqcQ", g, np.eye(dims[i])).reshape(
            g.shape[0] * dims[i], g.shape[1] * dims[i])
        mode_order = tuple(range(i + 1, d)) + tuple(range(i)) + (i,)
        inv = tuple(np.argsort(mode_order))
        jt = ji.reshape(tuple(dims[m] for m in mode_order) + (ji.shape[1],))
        blocks.append(jt.transpose(inv + (d,)).reshape(size, -1))
    return np.concatenate(blocks, axis=1)


def _lm_refine(arr, norm, cores, penalty: float, max_iters: int,
               target: float) -> tuple:
    """Damped Gauss-Newton steps on the penalized ring fit.

    Minimizes ||arr - construct(cores)||^2 + penalty*||cores||^2; damping
    grows until a step improves the objective, so iterates never regress.
    Returns (cores, relative fit error).
    """
    d = arr.ndim
    dims = arr.shape

    def objective(cs):
        fit = float(np.linalg.norm(arr - construct(TRFactorSet(cs)).array))
        reg = penalty * sum(float(np.sum(c * c)) for c in cs)
        return fit * fit + reg, fit / norm

    damp = 1e-3
    obj, fit_rel = objective(cores)
    for _ in range(max_iters):
        jac = _ring_jacobian(cores, dims)
        resid = (construct(TRFactorSet(cores)).array - arr).ravel()
        theta = np.concatenate(
            [c.transpose(0, 2, 1).reshape(-1) for c in cores])
        jtj = jac.T @ jac + penalty * np.eye(jac.shape[1])
        jtr = jac.T @ resid + penalty * theta
        scale = float(np.trace(jtj)) / jtj.shape[0] or 1.0
        improved = False
        for _ in range(12):
            step = np.linalg.solve(
                jtj + damp * scale * np.eye(jtj.shape[0]), -jtr)
            trial = []
            offset = 0
            for i in range(d):
                r_left, mode, r_right = cores[i].shape
                n = r_left * r_right * mode
                dw = step[offset:offset + n].reshape(
                    r_left, r_right, mode).transpose(0, 2, 1)
                offset += n
                trial.append(cores[i] + dw)
            trial_obj, trial_fit = objective(trial)
            if trial_obj < obj:
                cores, obj, fit_rel = trial, trial_obj, trial_fit
                damp = max(damp / 3.0, 1e-12)
                improved = True
                break
            damp *= 10.0
        if not improved or (penalty == 0.0 and fit_rel <= target):
            break
    return cores, fit_rel


def _lm_polish(arr, norm, cores) -> tuple:
    """Graduated-penalty Gauss-Newton rescue for stalled sweep attempts.

    A strong norm penalty smooths the landscape enough for the iterate to
    migrate between basins; relaxing it in stages then hands a good
    neighborhood to the plain fit.  Returns (cores, relative fit error).
    """
    energy = float(np.sum(arr * arr))
    for factor in (1e-2, 1e-3, 1e-4, 1e-6):
        cores, _ = _lm_refine(arr, norm, cores, factor * energy,
                              max_iters=60, target=0.0)
    return _lm_refine(arr, norm, cores, 0.0, max_iters=120, target=1e-13)


# --- .trm format -----------------------------------------------------------
#
#   magic   4 bytes   b"TRM1"
#   count   u32 little-endian
#   record  u16 name length, name UTF-8, then one complete .trt blob

def save_trm(path, named) -> None:
    """Write an ordered list of (name, tensor) records."""
    named = list(named)
    chunks = [TRM_MAGIC, struct.pack("<I", len(named))]
    for name, t in named:
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"record name too long: {name!r}")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(dumps_trt(t))
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_trm(path) -> list:
    """Read back the ordered (name, DenseTensor) records."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 8:
        raise ValueError("truncated container: header incomplete")
    if buf[:4] != TRM_MAGIC:
        raise ValueError(f"bad magic: expected {TRM_MAGIC!r}, got {buf[:4]!r}")
    (count,) = struct.unpack_from("<I", buf, 4)
    pos = 8
    out = []
    for _ in range(count):
        if len(buf) - pos < 2:
            raise ValueError("truncated container: record name length missing")
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if len(buf) - pos < nlen:
            raise ValueError("truncated container: record name missing")
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        t, pos = loads_trt(buf, pos)
        out.append((name, t))
    if pos != len(buf):
        raise ValueError(f"trailing bytes after last record: {len(buf) - pos}")
    return out


def save_ring(path, u: TRFactorSet, prefix: str = "core") -> None:
    save_trm(path, [(f"{prefix}{i}", c.data) for i, c in enumerate(u)])


def load_ring(path, prefix: str = "core") -> TRFactorSet:
    records = load_trm(path)
    cores = []
    for i, (name, t) in enumerate(records):
        want = f"{prefix}{i}"
        if name != want:
            raise ValueError(f"unexpected record name {name!r} (wanted {want!r})")
        cores.append(TRCore(t))
    return TRFactorSet(cores)
