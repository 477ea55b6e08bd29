"""Contrastive view construction driven by feature correlations.

The encoder input is a stack of k feature rows. This module estimates how
strongly those features depend on each other (distance correlation over a
batch), keeps a slow-moving correlation matrix refreshed during training,
splits the features into two correlated groups by Gumbel-Max sampling, and
perturbs each group with one of three operators to build two views of the
same song. InfoNCE over the projected views closes the loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError, DimensionError

AUGMENTATION_KINDS = ("random_mask", "span_mask", "uniform_noise")

# floor for correlation entries before taking logs in the group sampler;
# keeps zero-correlation features selectable-in-principle but vanishingly so
_CORR_FLOOR = 1e-12


@dataclass(frozen=True)
class AugmentationOp:
    """One perturbation operator: a kind plus its strength knobs.

    ``rho`` is the masked fraction of each grouped row (mask kinds only),
    ``eps`` the half-width of the additive noise (noise kind only).
    """

    kind: str
    rho: float = 0.3
    eps: float = 0.05

    def __post_init__(self) -> None:
        if self.kind not in AUGMENTATION_KINDS:
            raise ContractError(f"unknown augmentation kind {self.kind!r}")
        if not 0.0 <= self.rho <= 1.0:
            raise ContractError(f"rho must be in [0, 1], got {self.rho}")
        if self.eps < 0.0:
            raise ContractError(f"eps must be >= 0, got {self.eps}")


@dataclass
class CorrelationMatrix:
    """Feature-by-feature correlation state carried across training."""

    values: np.ndarray
    last_refresh_step: int = 0

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != self.values.shape[1]:
            raise DimensionError(f"correlation matrix must be square, got {self.values.shape}")

    @property
    def k(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class AugmentedGroupPair:
    """A partition of the k features into two disjoint groups.

    group_a contains the seed feature plus the sampled correlated features;
    group_b is everything else. Together they cover all k indices.
    """

    seed_feature: int
    group_a: np.ndarray
    group_b: np.ndarray


def feature_names(n_attrs: int) -> list[str]:
    return [f"attr_{f}" for f in range(n_attrs)] + ["audio", "lyric"]


# Distance correlation --------------------------------------------------------


def _centered_distances(x: np.ndarray) -> np.ndarray:
    """Double-centered pairwise Euclidean distance matrix for (N, p) rows."""
    n = x.shape[0]
    dist = np.empty((n, n), dtype=np.float64)
    for i in range(n):
        diff = x[i] - x
        dist[i] = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    row = dist.mean(axis=1, keepdims=True)
    col = dist.mean(axis=0, keepdims=True)
    return dist - row - col + dist.mean()


def _dcor_from_centered(a: np.ndarray, b: np.ndarray) -> float:
    dcov2 = max(float((a * b).mean()), 0.0)
    dvar_a = float((a * a).mean())
    dvar_b = float((b * b).mean())
    if dvar_a <= 0.0 or dvar_b <= 0.0:
        return 0.0
    value = math.sqrt(dcov2) / math.sqrt(math.sqrt(dvar_a * dvar_b))
    return min(max(value, 0.0), 1.0)


def distance_correlation(x: np.ndarray, y: np.ndarray) -> float:
    """Sample distance correlation between two paired samples.

    Accepts (N,) or (N, p) arrays; rows are observations. Uses the biased
    V-statistic (mean over all N² pairs). Returns 0 when either sample has
    zero distance variance, since correlation against a constant carries no
    information.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    if x.ndim != 2 or y.ndim != 2:
        raise DimensionError("inputs must be 1-D or 2-D")
    if x.shape[0] != y.shape[0]:
        raise DimensionError(f"row counts differ: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise ContractError("distance correlation needs at least 2 observations")
    return _dcor_from_centered(_centered_distances(x), _centered_distances(y))


def correlation_snapshot(stacks: np.ndarray) -> np.ndarray:
    """Correlation of every feature pair across a batch of (N, k, d) stacks.

    Each feature's centered distance matrix is computed once and reused for
    all pairs. The diagonal is pinned to 1 and the result is exactly
    symmetric by construction.
    """
    stacks = np.asarray(stacks, dtype=np.float64)
    if stacks.ndim != 3:
        raise DimensionError(f"expected (N, k, d) stacks, got shape {stacks.shape}")
    n, k, _ = stacks.shape
    if n < 2:
        raise ContractError("correlation snapshot needs at least 2 stacks")
    centered = [_centered_distances(stacks[:, f, :]) for f in range(k)]
    out = np.eye(k, dtype=np.float64)
    for i in range(k):
        for j in range(i + 1, k):
            v = _dcor_from_centered(centered[i], centered[j])
            out[i, j] = v
            out[j, i] = v
    return out


def ema_update(
    corr: CorrelationMatrix, snapshot: np.ndarray, alpha: float, step: int | None = None
) -> None:
    """Fold a fresh snapshot into the running matrix: C <- a*C + (1-a)*S."""
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must be in [0, 1], got {alpha}")
    snapshot = np.asarray(snapshot, dtype=np.float64)
    if snapshot.shape != corr.values.shape:
        raise DimensionError(
            f"snapshot shape {snapshot.shape} does not match matrix {corr.values.shape}"
        )
    corr.values = alpha * corr.values + (1.0 - alpha) * snapshot
    # a*1 + (1-a)*1 can round below 1; the diagonal is 1 by definition
    np.fill_diagonal(corr.values, 1.0)
    corr.last_refresh_step = corr.last_refresh_step + 1 if step is None else step


# Correlated grouping ---------------------------------------------------------


def sample_groups(
    corr: CorrelationMatrix,
    rng: np.random.Generator,
    seed_feature: int | None = None,
) -> AugmentedGroupPair:
    """Split features into a correlated group and its complement.

    A seed feature is drawn uniformly, then n = floor((k-1)/2) companions
    are chosen by Gumbel-top-n over log-correlation scores, which matches
    sequential sampling without replacement with probabilities
    proportional to the correlation values.
    """
    k = corr.k
    if k < 2:
        raise ContractError("grouping needs at least 2 features")
    if seed_feature is None:
        s = int(rng.integers(k))
    else:
        if not 0 <= seed_feature < k:
            raise ContractError(f"seed_feature {seed_feature} out of range for k={k}")
        s = seed_feature
    candidates = np.array([i for i in range(k) if i != s], dtype=np.int64)
    n = (k - 1) // 2
    if n == 0:
        chosen = np.empty(0, dtype=np.int64)
    else:
        u = rng.uniform(size=candidates.size)
        gumbel = -np.log(-np.log(np.maximum(u, 1e-300)))
        scores = np.log(np.maximum(corr.values[s, candidates], _CORR_FLOOR)) + gumbel
        chosen = candidates[np.argsort(-scores, kind="stable")[:n]]
    group_a = np.sort(np.concatenate(([s], chosen)))
    in_a = np.zeros(k, dtype=bool)
    in_a[group_a] = True
    group_b = np.nonzero(~in_a)[0]
    return AugmentedGroupPair(seed_feature=s, group_a=group_a, group_b=group_b)


# Augmentation operators ------------------------------------------------------


def _mask_len(rho: float, d: int) -> int:
    # 0.3*10 lands just under 3 in binary; nudge before flooring so the
    # masked count matches the exact rational value
    return int(math.floor(rho * d + 1e-9))


@dataclass
class ViewPlan:
    """A fully drawn perturbation: apply is x*mask + noise.

    Keeping the mask around lets the trainer route gradients: only unmasked
    positions pass anything back.
    """

    op: AugmentationOp
    group: np.ndarray
    mask: np.ndarray
    noise: np.ndarray

    def apply(self, stack: np.ndarray) -> np.ndarray:
        return stack * self.mask + self.noise

    def backprop(self, d_view: np.ndarray) -> np.ndarray:
        return d_view * self.mask


def plan_op(
    op: AugmentationOp,
    k: int,
    d: int,
    group: np.ndarray,
    rng: np.random.Generator,
) -> ViewPlan:
    """Draw the randomness for one operator over one group of rows."""
    mask = np.ones((k, d), dtype=np.float64)
    noise = np.zeros((k, d), dtype=np.float64)
    if op.kind == "random_mask":
        length = _mask_len(op.rho, d)
        for row in group:
            if length > 0:
                cols = rng.choice(d, size=length, replace=False)
                mask[row, cols] = 0.0
    elif op.kind == "span_mask":
        length = _mask_len(op.rho, d)
        for row in group:
            if length > 0:
                start = int(rng.integers(0, d - length + 1))
                mask[row, start : start + length] = 0.0
    else:  # uniform_noise
        for row in group:
            noise[row] = rng.uniform(-op.eps, op.eps, size=d)
    return ViewPlan(op=op, group=np.asarray(group, dtype=np.int64), mask=mask, noise=noise)


def _checked_stack(stack: np.ndarray) -> np.ndarray:
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim != 2:
        raise DimensionError(f"expected a (k, d) stack, got shape {stack.shape}")
    return stack


def random_mask(
    stack: np.ndarray, group: Sequence[int], rho: float, rng: np.random.Generator
) -> np.ndarray:
    """Zero floor(rho*d) positions, freshly drawn per grouped row."""
    stack = _checked_stack(stack)
    plan = plan_op(AugmentationOp("random_mask", rho=rho), *stack.shape, np.asarray(group), rng)
    return plan.apply(stack)


def span_mask(
    stack: np.ndarray, group: Sequence[int], rho: float, rng: np.random.Generator
) -> np.ndarray:
    """Zero one contiguous run of floor(rho*d) positions per grouped row."""
    stack = _checked_stack(stack)
    plan = plan_op(AugmentationOp("span_mask", rho=rho), *stack.shape, np.asarray(group), rng)
    return plan.apply(stack)


def uniform_noise(
    stack: np.ndarray, group: Sequence[int], eps: float, rng: np.random.Generator
) -> np.ndarray:
    """Add U(-eps, eps) noise elementwise to grouped rows."""
    stack = _checked_stack(stack)
    plan = plan_op(AugmentationOp("uniform_noise", eps=eps), *stack.shape, np.asarray(group), rng)
    return plan.apply(stack)


def plan_views(
    k: int,
    d: int,
    pair: AugmentedGroupPair,
    rng: np.random.Generator,
    rho: float = 0.3,
    eps: float = 0.05,
    kinds: Sequence[str] = AUGMENTATION_KINDS,
) -> tuple[ViewPlan, ViewPlan]:
    """Draw two operators (independently, with replacement) and their masks.

    The first plan perturbs group_a and leaves group_b alone; the second
    does the opposite. ``kinds`` can be restricted to a subset of operators.
    """
    if len(kinds) == 0:
        raise ContractError("kinds must name at least one operator")
    for kind in kinds:
        if kind not in AUGMENTATION_KINDS:
            raise ContractError(f"unknown augmentation kind {kind!r}")
    kind_a = kinds[int(rng.integers(len(kinds)))]
    kind_b = kinds[int(rng.integers(len(kinds)))]
    plan_a = plan_op(AugmentationOp(kind_a, rho=rho, eps=eps), k, d, pair.group_a, rng)
    plan_b = plan_op(AugmentationOp(kind_b, rho=rho, eps=eps), k, d, pair.group_b, rng)
    return plan_a, plan_b


def make_views(
    stack: np.ndarray,
    pair: AugmentedGroupPair,
    rng: np.random.Generator,
    rho: float = 0.3,
    eps: float = 0.05,
    kinds: Sequence[str] = AUGMENTATION_KINDS,
) -> tuple[np.ndarray, np.ndarray]:
    """Two augmented copies of one stack, one group perturbed in each."""
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim != 2:
        raise DimensionError(f"expected a (k, d) stack, got shape {stack.shape}")
    plan_a, plan_b = plan_views(*stack.shape, pair, rng, rho=rho, eps=eps, kinds=kinds)
    return plan_a.apply(stack), plan_b.apply(stack)


def draw_view_batch(
    n: int,
    k: int,
    d: int,
    pair: AugmentedGroupPair,
    rng: np.random.Generator,
    rho: float = 0.3,
    eps: float = 0.05,
    kinds: Sequence[str] = AUGMENTATION_KINDS,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-song view randomness for a whole batch at once.

    Same distribution as calling plan_views once per song (independent
    operator kinds and fresh positions per song and feature), drawn in
    kind-grouped order so the hot path stays vectorized. Returns
    (mask_a, noise_a, mask_b, noise_b), each (n, k, d); view = x*mask+noise.
    """
    if n < 1:
        raise ContractError("batch must hold at least one song")
    if len(kinds) == 0:
        raise ContractError("kinds must name at least one operator")
    for kind in kinds:
        if kind not in AUGMENTATION_KINDS:
            raise ContractError(f"unknown augmentation kind {kind!r}")
    kind_draws = rng.integers(len(kinds), size=(n, 2))
    out = []
    for side, group in ((0, pair.group_a), (1, pair.group_b)):
        mask = np.ones((n, k, d), dtype=np.float64)
        noise = np.zeros((n, k, d), dtype=np.float64)
        drawn = kind_draws[:, side]
        g = len(group)
        if g:
            length = _mask_len(rho, d)
            for kind_idx, kind in enumerate(kinds):
                rows = np.nonzero(drawn == kind_idx)[0]
                if rows.size == 0:
                    continue
                if kind == "random_mask" and length > 0:
                    u = rng.random(size=(rows.size, g, d))
                    # the L smallest uniforms per row form a uniform L-subset
                    cols = np.argpartition(u, length - 1, axis=2)[:, :, :length]
                    mask[rows[:, None, None], np.asarray(group)[None, :, None], cols] = 0.0
                elif kind == "span_mask" and length > 0:
                    starts = rng.integers(0, d - length + 1, size=(rows.size, g))
                    pos = np.arange(d)
                    hit = (pos[None, None, :] >= starts[:, :, None]) & (
                        pos[None, None, :] < starts[:, :, None] + length
                    )
                    sub = mask[np.ix_(rows, np.asarray(group))]
                    sub[hit] = 0.0
                    mask[np.ix_(rows, np.asarray(group))] = sub
                elif kind == "uniform_noise":
                    noise[np.ix_(rows, np.asarray(group))] = rng.uniform(
                        -eps, eps, size=(rows.size, g, d)
                    )
        out.extend((mask, noise))
    return out[0], out[1], out[2], out[3]


# InfoNCE ----------------------------------------------------------------------


def _unit_rows(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.sqrt(np.einsum("ij,ij->i", z, z))
    safe = np.where(norms > 0.0, norms, 1.0)
    return z / safe[:, None], norms


def info_nce(
    z_a: np.ndarray,
    z_b: np.ndarray,
    tau: float,
    include_positive_in_denominator: bool = False,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Contrastive loss over two aligned banks of projections.

    Row i of each bank is a view of the same song; every other row of z_b
    is a negative for z_a[i]. The default denominator holds only the
    negatives, which can drive the loss below zero; the flag switches to
    the standard form that includes the positive term. Returns
    (loss, d_loss/d_z_a, d_loss/d_z_b). A zero row is treated as having
    cosine 0 against everything, with zero gradient.
    """
    z_a = np.asarray(z_a, dtype=np.float64)
    z_b = np.asarray(z_b, dtype=np.float64)
    if z_a.shape != z_b.shape or z_a.ndim != 2:
        raise DimensionError(f"banks must share (N, d_z) shape, got {z_a.shape} and {z_b.shape}")
    if tau <= 0.0:
        raise ContractError(f"tau must be positive, got {tau}")
    n = z_a.shape[0]
    if n < 2 and not include_positive_in_denominator:
        raise ContractError("need at least 2 songs: the denominator would be empty")

    ua, na = _unit_rows(z_a)
    ub, nb = _unit_rows(z_b)
    cos = ua @ ub.T
    scores = cos / tau
    if include_positive_in_denominator:
        pool = scores
    else:
        pool = scores.copy()
        np.fill_diagonal(pool, -np.inf)
    shift = pool.max(axis=1, keepdims=True)
    expd = np.exp(pool - shift)
    denom = expd.sum(axis=1)
    lse = shift[:, 0] + np.log(denom)
    loss = float((lse - np.diag(scores)).sum())

    # d loss / d scores: softmax weights minus the positive indicator
    p = expd / denom[:, None]
    g = (p - np.eye(n)) / tau
    # back through cosine; hatted matrices are the unit rows
    row_dot = np.einsum("ik,ik->i", g, cos)
    d_ua = g @ ub - row_dot[:, None] * ua
    col_dot = np.einsum("ik,ik->k", g, cos)
    d_ub = g.T @ ua - col_dot[:, None] * ub
    safe_a = np.where(na > 0.0, na, 1.0)
    safe_b = np.where(nb > 0.0, nb, 1.0)
    d_za = np.where((na > 0.0)[:, None], d_ua / safe_a[:, None], 0.0)
    d_zb = np.where((nb > 0.0)[:, None], d_ub / safe_b[:, None], 0.0)
    return loss, d_za, d_zb


# Correlation export ----------------------------------------------------------


def save_correlation(path: str, corr: CorrelationMatrix, names: Sequence[str]) -> None:
    """Write the matrix as TSV: a header row of feature names, then k rows."""
    if len(names) != corr.k:
        raise DimensionError(f"{len(names)} names for a {corr.k}-feature matrix")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(names) + "\n")
        for row in corr.values:
            fh.write("\t".join(repr(float(v)) for v in row) + "\n")


def load_correlation(path: str) -> tuple[CorrelationMatrix, list[str]]:
    from .errors import FormatError

    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty correlation file")
    names = lines[0].split("\t")
    k = len(names)
    if len(lines) - 1 != k:
        raise FormatError(f"{path}: header names {k} features but {len(lines) - 1} rows follow")
    values = np.empty((k, k), dtype=np.float64)
    for i, line in enumerate(lines[1:]):
        parts = line.split("\t")
        if len(parts) != k:
            raise FormatError(f"{path}: row {i + 1} has {len(parts)} columns, expected {k}")
        values[i] = [float(p) for p in parts]
    return CorrelationMatrix(values=values), names
