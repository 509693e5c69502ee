"""Merge-order planning for ring contraction.

Any order of pairwise merges over a contiguous run of cores is a binary
tree whose leaves are the core indices.  With bond rank R, an internal
node whose leaf descendants carry mode-size product P costs exactly
R^3 * P MACs (2 R^3 P flops) and produces an intermediate of R^2 * P
floats.  This module enumerates trees (Catalan growth, guarded),
costs them including a liveness model of peak intermediate storage,
picks the cheapest, and checks the uniform-mode cost bounds
exhaustively.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

__all__ = [
    "MergePlan",
    "PlanCost",
    "BestPlan",
    "Theorem1Report",
    "balanced_plan",
    "sequential_plan",
    "enumerate_plans",
    "cost_plan",
    "merge_mac_coefficient",
    "construct_mac_coefficient",
    "best_plan",
    "verify_bounds",
    "catalan",
]

MAX_ENUM_LEAVES = 12


def catalan(n: int) -> int:
    return math.comb(2 * n, n) // (n + 1)


def _leaves(tree) -> tuple:
    if isinstance(tree, int):
        return (tree,)
    left, right = tree
    return _leaves(left) + _leaves(right)


def _notation(tree) -> str:
    if isinstance(tree, int):
        return str(tree)
    return f"({_notation(tree[0])},{_notation(tree[1])})"


@dataclass(frozen=True)
class MergePlan:
    """A binary merge tree; leaves are 1-based core indices, contiguous ascending."""

    tree: object

    def __post_init__(self):
        leaves = _leaves(self.tree)
        lo = leaves[0]
        if leaves != tuple(range(lo, lo + len(leaves))):
            raise ValueError(
                f"plan leaves must be consecutive ascending core indices, got {leaves}")

    @property
    def leaves(self) -> tuple:
        return _leaves(self.tree)

    @property
    def n_leaves(self) -> int:
        return len(self.leaves)

    def notation(self) -> str:
        return _notation(self.tree)

    def __repr__(self) -> str:
        return f"MergePlan({self.notation()})"


def _balanced(lo: int, hi: int):
    if lo == hi:
        return lo
    # left half takes the extra leaf when the count is odd
    mid = lo + (hi - lo + 1 + 1) // 2 - 1
    return (_balanced(lo, mid), _balanced(mid + 1, hi))


def balanced_plan(k: int, j: int) -> MergePlan:
    """Recursive halving over cores k..j inclusive (left half rounds up)."""
    if j < k:
        raise ValueError(f"need k <= j, got k={k}, j={j}")
    return MergePlan(_balanced(k, j))


def sequential_plan(k: int, j: int) -> MergePlan:
    """Left-to-right chain: ((((k, k+1), k+2), ...), j)."""
    if j < k:
        raise ValueError(f"need k <= j, got k={k}, j={j}")
    tree = k
    for i in range(k + 1, j + 1):
        tree = (tree, i)
    return MergePlan(tree)


@lru_cache(maxsize=None)
def _all_trees(lo: int, hi: int) -> tuple:
    if lo == hi:
        return (lo,)
    out = []
    # larger left subtrees first so the first minimal plan found is the
    # leftmost-deepest one
    for split in range(hi - 1, lo - 1, -1):
        for left in _all_trees(lo, split):
            for right in _all_trees(split + 1, hi):
                out.append((left, right))
    return tuple(out)


def enumerate_plans(d: int, start: int = 1) -> list:
    """All merge trees over d contiguous cores; Catalan(d-1) of them."""
    if d < 2:
        raise ValueError(f"need at least 2 cores to merge, got {d}")
    if d > MAX_ENUM_LEAVES:
        raise ValueError(
            f"enumeration over {d} cores would produce {catalan(d - 1)} plans; "
            f"the guard stops at {MAX_ENUM_LEAVES}")
    return [MergePlan(t) for t in _all_trees(start, start + d - 1)]


@dataclass(frozen=True)
class PlanCost:
    """Exact integer cost of executing a plan at a given bond rank."""

    flops_2x: int
    macs: int
    peak_memory_floats: int


def _plan_products(dims, plan: MergePlan):
    """Per-node leaf products plus liveness-model peak, rank-free.

    Returns (sum of node products, peak concurrent product units) where
    memory during a node's merge counts all live non-leaf intermediates
    plus the node's own result; input cores are free.
    """
    leaves = plan.leaves
    if len(dims) != len(leaves):
        raise ValueError(
            f"plan has {len(leaves)} leaves but {len(dims)} mode sizes were given")
    base = leaves[0]
    dims = [int(s) for s in dims]
    if any(s < 1 for s in dims):
        raise ValueError(f"mode sizes must be >= 1, got {dims}")

    live: list[int] = []
    total = 0
    peak = 0

    def ev(tree) -> tuple[int, bool]:
        nonlocal total, peak
        if isinstance(tree, int):
            return dims[tree - base], True
        lp, lleaf = ev(tree[0])
        rp, rleaf = ev(tree[1])
        prod = lp * rp
        total += prod
        current = sum(live) + prod
        peak = max(peak, current)
        if not lleaf:
            live.remove(lp)
        if not rleaf:
            live.remove(rp)
        live.append(prod)
        return prod, False

    ev(plan.tree)
    return total, peak


def cost_plan(dims, rank: int, plan: MergePlan) -> PlanCost:
    """Exact flop and peak-storage cost of a merge plan.

    ``dims`` are the mode sizes of the cores in leaf order; every bond
    has rank ``rank``.  All arithmetic is exact integer.
    """
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    total, peak = _plan_products(dims, plan)
    macs = rank ** 3 * total
    return PlanCost(flops_2x=2 * macs, macs=macs, peak_memory_floats=rank ** 2 * peak)


def merge_mac_coefficient(dims, plan: MergePlan | None = None) -> int:
    """Sum of node leaf-products: the r^3 coefficient of a merge.

    Defaults to the balanced plan.  Fewer than two cores merge for
    free (the segment is a single core or empty).
    """
    dims = list(dims)
    if len(dims) < 2:
        return 0
    if plan is None:
        plan = balanced_plan(1, len(dims))
    total, _ = _plan_products(dims, plan)
    return total


def construct_mac_coefficient(dims, plan: MergePlan | None = None) -> tuple[int, int]:
    """Merge cost with the bond trace fused into the final pairwise step.

    When the closed ring is wanted (not the open merge), the last merge
    only needs the bond-diagonal of its result, so the root node costs
    R^2 * P instead of R^3 * P.  Returns (r3_coefficient,
    r2_coefficient); the plain unfused accounting is
    merge_mac_coefficient.
    """
    dims = list(dims)
    if len(dims) < 2:
        # no pairwise merge happens; the trace itself is additions only
        return 0, 0
    if plan is None:
        plan = balanced_plan(1, len(dims))
    total, _ = _plan_products(dims, plan)
    root = _prod_int(dims)
    return total - root, root


def _prod_int(dims) -> int:
    return math.prod(int(s) for s in dims)


@dataclass(frozen=True)
class BestPlan:
    plan: MergePlan
    cost: PlanCost
    exhaustive: bool


def best_plan(dims, rank: int) -> BestPlan:
    """Cheapest plan by flops, ties broken by peak memory then by
    enumeration order (leftmost-deepest trees come first)."""
    d = len(list(dims))
    if d == 1:
        raise ValueError("a single core needs no merge plan")
    plans = enumerate_plans(d)
    best = None
    best_cost = None
    for plan in plans:
        cost = cost_plan(dims, rank, plan)
        key = (cost.flops_2x, cost.peak_memory_floats)
        if best_cost is None or key < best_cost:
            best = plan
            best_cost = key
            best_pc = cost
    return BestPlan(plan=best, cost=best_pc, exhaustive=True)


@dataclass(frozen=True)
class Theorem1Report:
    """Exhaustive check of the uniform-mode cost window.

    For d cores of equal mode size m >= 2 and rank R, every plan must
    satisfy 2 R^3 I <= flops_2x <= 4 R^3 I and
    R^2 I <= peak_memory_floats <= 2 R^2 I with I = m^d, and the
    balanced plan must attain the flop minimum when d is a power of 2.
    """

    d: int
    mode_size: int
    rank: int
    total_modes: int
    plan_count: int
    flops_low: int
    flops_high: int
    mem_low: int
    mem_high: int
    min_flops: int
    max_flops: int
    min_mem: int
    max_mem: int
    balanced_flops: int
    balanced_is_min: bool
    passed: bool
    failures: tuple


def verify_bounds(d: int, mode_size: int, rank: int) -> Theorem1Report:
    """Check every plan for d uniform cores against the cost window."""
    if mode_size < 2:
        raise ValueError(f"the bounds assume mode size >= 2, got {mode_size}")
    dims = [mode_size] * d
    total_modes = mode_size ** d
    flops_low = 2 * rank ** 3 * total_modes
    flops_high = 2 * flops_low
    mem_low = rank ** 2 * total_modes
    mem_high = 2 * mem_low
    plans = enumerate_plans(d)
    failures = []
    min_f = max_f = None
    min_m = max_m = None
    for plan in plans:
        c = cost_plan(dims, rank, plan)
        if not flops_low <= c.flops_2x <= flops_high:
            failures.append((plan.notation(), "flops", c.flops_2x))
        if not mem_low <= c.peak_memory_floats <= mem_high:
            failures.append((plan.notation(), "memory", c.peak_memory_floats))
        min_f = c.flops_2x if min_f is None else min(min_f, c.flops_2x)
        max_f = c.flops_2x if max_f is None else max(max_f, c.flops_2x)
        min_m = c.peak_memory_floats if min_m is None else min(min_m, c.peak_memory_floats)
        max_m = c.peak_memory_floats if max_m is None else max(max_m, c.peak_memory_floats)
    bal = cost_plan(dims, rank, balanced_plan(1, d))
    is_pow2 = d & (d - 1) == 0
    balanced_is_min = bal.flops_2x == min_f
    if is_pow2 and not balanced_is_min:
        failures.append(("balanced", "not-minimal", bal.flops_2x))
    return Theorem1Report(
        d=d, mode_size=mode_size, rank=rank, total_modes=total_modes,
        plan_count=len(plans), flops_low=flops_low, flops_high=flops_high,
        mem_low=mem_low, mem_high=mem_high, min_flops=min_f, max_flops=max_f,
        min_mem=min_m, max_mem=max_m, balanced_flops=bal.flops_2x,
        balanced_is_min=balanced_is_min, passed=not failures,
        failures=tuple(failures))
