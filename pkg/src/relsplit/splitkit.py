"""Leakage-safe grouped, stratified K-fold assignment and its audit.

Records are first partitioned into groups (by cleaned query text for the
query-item task, by category-path prefix for the query-category task). Whole
groups are then assigned to folds, so a group can never straddle two folds.
Among such assignments we pick one that keeps every fold's language x label
mix close to the global mix while keeping fold sizes even.
"""

from __future__ import annotations

import enum
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import (
    DEFAULT_DELIMITER,
    Dataset,
    TaskKind,
    dumps_line,
    iter_jsonl,
    parse_category_path,
)
from .errors import CoverageError, DataError, GroupingError, ParseError, TooFewGroups

DEFAULT_K = 5
DEFAULT_PREFIX_N = 2


class GroupKind(str, enum.Enum):
    QUERY = "query"
    CATEGORY_PREFIX = "category_prefix"


@dataclass(frozen=True, order=True)
class GroupKey:
    kind: GroupKind
    key: str


@dataclass(frozen=True, order=True)
class StratumKey:
    language: str
    label: int


Groups = dict[GroupKey, list[str]]


def group_by_query(ds: Dataset, raw: bool = False) -> Groups:
    """Group record ids by exact query text (cleaned by default).

    With ``raw=True`` the untouched query string is the key; near-duplicates
    differing only in case or spacing then land in different groups.
    """
    groups: Groups = {}
    for rec in ds.records:
        text = rec.query if raw else rec.cleaned_query
        groups.setdefault(GroupKey(GroupKind.QUERY, text), []).append(rec.id)
    return groups


def group_by_category_prefix(
    ds: Dataset, n: int = DEFAULT_PREFIX_N, delimiter: str = DEFAULT_DELIMITER
) -> Groups:
    """Group record ids by the first ``n`` segments of the target category path.

    Paths shorter than ``n`` form their own full-path group.
    """
    if n < 1:
        raise ValueError("prefix length must be >= 1")
    groups: Groups = {}
    for rec in ds.records:
        try:
            path = parse_category_path(rec.cleaned_target, delimiter)
        except DataError as exc:
            raise GroupingError(rec.id, exc) from exc
        key = path.prefix(n).render(delimiter)
        groups.setdefault(GroupKey(GroupKind.CATEGORY_PREFIX, key), []).append(rec.id)
    return groups


def make_groups(
    ds: Dataset,
    prefix_n: int = DEFAULT_PREFIX_N,
    delimiter: str = DEFAULT_DELIMITER,
    raw_query: bool = False,
) -> Groups:
    """Task-appropriate grouping: query text for QI, category prefix for QC."""
    if ds.task is TaskKind.QC:
        return group_by_category_prefix(ds, prefix_n, delimiter)
    return group_by_query(ds, raw=raw_query)


def record_strata(ds: Dataset) -> dict[str, StratumKey]:
    strata = {}
    for rec in ds.records:
        if rec.label is None:
            raise DataError(f"record {rec.id!r} has no label; stratified splitting needs labels")
        strata[rec.id] = StratumKey(rec.language, rec.label)
    return strata


def stratum_universe(strata: Mapping[str, StratumKey]) -> list[StratumKey]:
    """Observed languages x {0, 1}, sorted."""
    langs = sorted({s.language for s in strata.values()})
    return [StratumKey(lang, lab) for lang in langs for lab in (0, 1)]


# ---------------------------------------------------------------------------
# objective

class _Columns:
    """Maps records to stratum columns of the count matrix.

    Joint mode uses one column per (language, label); marginal mode uses one
    column per language plus one per label, each record counting in both.
    """

    def __init__(self, strata: Mapping[str, StratumKey], joint: bool = True):
        self.joint = joint
        if joint:
            self.names = [(s.language, s.label) for s in stratum_universe(strata)]
        else:
            langs = sorted({s.language for s in strata.values()})
            self.names = [("language", lang) for lang in langs] + [("label", 0), ("label", 1)]
        self.index = {name: i for i, name in enumerate(self.names)}
        # marginal mode splits into two families whose fractions each sum to 1
        self.families = 1 if joint else 2

    def of(self, s: StratumKey) -> list[int]:
        if self.joint:
            return [self.index[(s.language, s.label)]]
        return [self.index[("language", s.language)], self.index[("label", s.label)]]

    def count_vector(self, ids: Iterable[str], strata: Mapping[str, StratumKey]) -> np.ndarray:
        vec = np.zeros(len(self.names))
        for rid in ids:
            for col in self.of(strata[rid]):
                vec[col] += 1
        return vec


def _fold_term(counts: np.ndarray, size: float, global_frac: np.ndarray, mean_size: float, lam: float) -> float:
    size_term = lam * (size - mean_size) ** 2
    if size == 0:
        return size_term
    return float(np.sum((counts / size - global_frac) ** 2)) + size_term


def objective(
    fold_counts: np.ndarray, fold_sizes: np.ndarray, global_frac: np.ndarray
) -> float:
    """Stratification divergence plus size-imbalance penalty.

    ``sum_f sum_s (c_fs / n_f - g_s)^2 + lam * sum_f (n_f - mean)^2`` with
    ``lam = 1 / mean``; an empty fold contributes only its size term.
    """
    k = len(fold_sizes)
    mean_size = float(fold_sizes.sum()) / k
    lam = 1.0 / mean_size if mean_size > 0 else 0.0
    return sum(
        _fold_term(fold_counts[f], float(fold_sizes[f]), global_frac, mean_size, lam) for f in range(k)
    )


# ---------------------------------------------------------------------------
# assignment

@dataclass
class FoldAssignment:
    k: int
    group_to_fold: dict[GroupKey, int]
    seed: int
    objective_value: float
    per_fold_stats: list[dict[StratumKey, int]] = field(default_factory=list)
    prefix_n: int | None = None

    @property
    def kind(self) -> GroupKind | None:
        kinds = {g.kind for g in self.group_to_fold}
        return kinds.pop() if len(kinds) == 1 else None

    def record_folds(self, groups: Groups) -> dict[str, int]:
        """Expand to a per-record fold map; every group must be assigned."""
        out = {}
        for g, ids in groups.items():
            if g not in self.group_to_fold:
                raise CoverageError(f"group {g.key!r} ({g.kind.value}) has no fold")
            fold = self.group_to_fold[g]
            for rid in ids:
                out[rid] = fold
        return out

    def fold_sizes(self, groups: Groups) -> list[int]:
        sizes = [0] * self.k
        for g, ids in groups.items():
            sizes[self.group_to_fold[g]] += len(ids)
        return sizes


class _Problem:
    """Groups as rows of a count matrix, in greedy visiting order."""

    def __init__(self, groups: Groups, strata: Mapping[str, StratumKey], k: int, joint: bool,
                 keys: Sequence[GroupKey] | None = None):
        cols = _Columns(strata, joint)
        # descending size, then ascending key text
        self.keys = list(keys) if keys is not None else sorted(
            groups, key=lambda g: (-len(groups[g]), g.key, g.kind.value)
        )
        self.sizes = np.array([len(groups[g]) for g in self.keys], dtype=float)
        self.counts = np.array(
            [cols.count_vector(groups[g], strata) for g in self.keys]
        ).reshape(len(self.keys), len(cols.names))
        n_total = float(self.sizes.sum())
        self.global_frac = self.counts.sum(axis=0) / n_total if n_total else np.zeros(len(cols.names))
        self.k = k
        self.mean_size = n_total / k
        self.lam = 1.0 / self.mean_size if self.mean_size > 0 else 0.0
        self.sq_norms = np.einsum("ij,ij->i", self.counts, self.counts)
        # groups with equal size and stratum counts share a profile id
        _, self.profile = np.unique(np.column_stack([self.sizes, self.counts]), axis=0, return_inverse=True)
        self.profile = self.profile.reshape(-1)
        self.n_profiles = int(self.profile.max()) + 1 if len(self.profile) else 0
        self.g_sq = float(self.global_frac @ self.global_frac)

    def terms(self, counts: np.ndarray, sizes: np.ndarray) -> np.ndarray:
        """Per-fold objective terms; ``counts`` has strata on its last axis, ``sizes`` the leading axes."""
        empty = sizes <= 0
        if empty.any():
            frac = counts / np.where(empty, 1.0, sizes)[..., None]
            strat = np.where(empty, 0.0, np.sum((frac - self.global_frac) ** 2, axis=-1))
        else:
            strat = np.sum((counts / sizes[..., None] - self.global_frac) ** 2, axis=-1)
        return strat + self.lam * (sizes - self.mean_size) ** 2

    def total(self, assign: Sequence[int]) -> float:
        fc = np.zeros((self.k, self.counts.shape[1]))
        fs = np.zeros(self.k)
        np.add.at(fc, np.asarray(assign), self.counts)
        np.add.at(fs, np.asarray(assign), self.sizes)
        return float(self.terms(fc, fs).sum())


class _State:
    """A full assignment with cached per-fold counts and objective terms."""

    def __init__(self, p: _Problem, assign: Sequence[int]):
        self.p = p
        self.assign = np.asarray(assign, dtype=np.int64).copy()
        self.fc = np.zeros((p.k, p.counts.shape[1]))
        self.fs = np.zeros(p.k)
        np.add.at(self.fc, self.assign, p.counts)
        np.add.at(self.fs, self.assign, p.sizes)
        self.t = p.terms(self.fc, self.fs)

    def _refresh(self, folds: Sequence[int]) -> None:
        idx = list(folds)
        self.t[idx] = self.p.terms(self.fc[idx], self.fs[idx])

    def move(self, g: int, f: int) -> None:
        src = self.assign[g]
        self.fc[src] -= self.p.counts[g]
        self.fs[src] -= self.p.sizes[g]
        self.fc[f] += self.p.counts[g]
        self.fs[f] += self.p.sizes[g]
        self.assign[g] = f
        self._refresh((src, f))

    def move_deltas(self, idx: np.ndarray) -> np.ndarray:
        """Objective change of moving each group in ``idx`` to each fold (inf for its own fold)."""
        p, src = self.p, self.assign[idx]
        t_src = p.terms(self.fc[src] - p.counts[idx], self.fs[src] - p.sizes[idx])
        t_dst = p.terms(self.fc[None, :, :] + p.counts[idx][:, None, :], self.fs[None, :] + p.sizes[idx][:, None])
        delta = t_src[:, None] + t_dst - self.t[src][:, None] - self.t[None, :]
        delta[np.arange(len(idx)), src] = np.inf
        return delta

    def swap_deltas(self, a_idx: np.ndarray, b_idx: np.ndarray) -> np.ndarray:
        """Approximate objective change of swapping group a with group b, for a in
        ``a_idx`` and b in ``b_idx``; inf where both share a fold.

        The squared-deviation term is expanded into dot products so the strata
        axis never enters the pairwise arrays; callers confirm exactly."""
        p = self.p
        fa, fb = self.assign[a_idx], self.assign[b_idx]
        g = p.global_frac
        dot_a, dot_b = self.fc @ p.counts[a_idx].T, self.fc @ p.counts[b_idx].T  # (k, len)
        fold_sq = np.einsum("ij,ij->i", self.fc, self.fc)
        fold_g = self.fc @ g
        grp_sq, grp_g = p.sq_norms, p.counts @ g
        # |cb - ca|^2 is shared by both folds
        d_sq = p.counts[a_idx] @ p.counts[b_idx].T
        d_sq *= -2.0
        d_sq += grp_sq[a_idx][:, None]
        d_sq += grp_sq[b_idx][None, :]
        d_g = grp_g[b_idx][None, :] - grp_g[a_idx][:, None]
        ds = p.sizes[b_idx][None, :] - p.sizes[a_idx][:, None]
        # fold of a gains d = cb - ca, fold of b loses it
        fa_dot = dot_b[fa]
        fa_dot -= dot_a[fa, np.arange(len(a_idx))][:, None]
        fb_dot = dot_a[fb].T
        fb_dot -= dot_b[fb, np.arange(len(b_idx))][None, :]
        new_a = self._term_from_dots(d_sq, fa_dot, fold_sq[fa][:, None], fold_g[fa][:, None] + d_g,
                                     self.fs[fa][:, None] + ds)
        new_b = self._term_from_dots(d_sq, fb_dot, fold_sq[fb][None, :], fold_g[fb][None, :] - d_g,
                                     self.fs[fb][None, :] - ds)
        new_a += new_b
        new_a -= self.t[fa][:, None]
        new_a -= self.t[fb][None, :]
        new_a[fa[:, None] == fb[None, :]] = np.inf
        return new_a

    def _term_from_dots(self, d_sq: np.ndarray, cross: np.ndarray, base_sq: np.ndarray,
                        dot_g: np.ndarray, size: np.ndarray) -> np.ndarray:
        """Fold term from |C + d|^2 = base_sq + 2 cross + d_sq, g.(C + d) and size."""
        p = self.p
        sq = cross * 2.0
        sq += d_sq
        sq += base_sq
        empty = size <= 0
        inv = 1.0 / np.where(empty, 1.0, size) if empty.any() else 1.0 / size
        sq *= inv
        dot_g *= 2.0
        sq -= dot_g
        sq *= inv
        sq += p.g_sq
        if empty.any():
            sq[empty] = 0.0
        size -= p.mean_size
        size *= size
        size *= p.lam
        sq += size
        return sq


IMPROVEMENT_TOL = 1e-12
SWAP_SEARCH_LIMIT = 2000  # group classes; a swap pass is quadratic in them
PREFIX_SEARCH_LIMIT = 24  # groups; larger instances skip the multi-start stage
PREFIX_STARTS = 64  # starts from enumerated placements of the largest groups
EXACT_SEARCH_LIMIT = 4096  # distinct partitions; smaller instances are also solved exactly


def _greedy(p: _Problem, pinned: Sequence[int] = ()) -> np.ndarray:
    """Visit groups in order; each joins the fold with the smallest objective
    increase (lowest index on ties). The first ``len(pinned)`` groups are
    placed as given instead."""
    fc = np.zeros((p.k, p.counts.shape[1]))
    fs = np.zeros(p.k)
    assign = np.zeros(len(p.keys), dtype=np.int64)
    for g, f in enumerate(pinned):
        fc[f] += p.counts[g]
        fs[f] += p.sizes[g]
        assign[g] = f
    t = p.terms(fc, fs)
    for g in range(len(pinned), len(p.keys)):
        delta = p.terms(fc + p.counts[g], fs + p.sizes[g]) - t
        f = int(np.argmin(delta))
        fc[f] += p.counts[g]
        fs[f] += p.sizes[g]
        t[f] += delta[f]
        assign[g] = f
    return assign


# groups screened per vectorized evaluation: the block doubles after a clean
# screen and resets after a hit, since hits cluster early in a pass
MIN_SCREEN, MAX_SCREEN = 8, 64


def _move_pass(st: _State) -> bool:
    """Visit groups in order, moving each to its most improving fold (lowest
    index on ties). Groups are screened in blocks; only the first
    improving one is applied before screening resumes after it."""
    n = len(st.assign)
    g0, improved, block = 0, False, MIN_SCREEN
    while g0 < n:
        idx = np.arange(g0, min(g0 + block, n))
        delta = st.move_deltas(idx)
        best = np.argmin(delta, axis=1)
        hits = np.flatnonzero(delta[np.arange(len(idx)), best] < -IMPROVEMENT_TOL)
        if hits.size == 0:
            g0, block = int(idx[-1]) + 1, min(2 * block, MAX_SCREEN)
            continue
        h, block = int(hits[0]), MIN_SCREEN
        st.move(int(idx[h]), int(best[h]))
        improved = True
        g0 = int(idx[h]) + 1
    return improved


def _swap_classes(st: _State) -> np.ndarray:
    """Lowest-index member of each class of interchangeable groups (same fold,
    size and stratum counts), ascending. Swapping two groups only depends on
    their classes, and real corpora have far fewer classes than groups."""
    _, first = np.unique(st.assign * st.p.n_profiles + st.p.profile, return_index=True)
    return np.sort(first)


def _swap_pass(st: _State) -> bool:
    """Visit group classes in order, swapping each representative with its most
    improving partner class in another fold (lowest index on ties); screened in
    blocks. Classes are rebuilt after every swap."""
    reps = _swap_classes(st)
    if len(reps) > SWAP_SEARCH_LIMIT:
        return False
    r0, improved, block = 0, False, MIN_SCREEN
    while r0 < len(reps):
        a_idx = reps[r0:r0 + block]
        delta = st.swap_deltas(a_idx, reps)
        best = np.argmin(delta, axis=1)
        hits = np.flatnonzero(delta[np.arange(len(a_idx)), best] < -IMPROVEMENT_TOL)
        if hits.size == 0:
            r0, block = r0 + len(a_idx), min(2 * block, MAX_SCREEN)
            continue
        h, block = int(hits[0]), MIN_SCREEN
        a, b = int(a_idx[h]), int(reps[best[h]])
        fa, fb = int(st.assign[a]), int(st.assign[b])
        before = st.t[fa] + st.t[fb]
        st.move(a, fb)
        st.move(b, fa)
        if st.t[fa] + st.t[fb] < before - IMPROVEMENT_TOL:
            improved = True
            reps = _swap_classes(st)
        else:  # rounding in the screen; undo
            st.move(a, fa)
            st.move(b, fb)
        r0 = int(np.searchsorted(reps, a, side="right"))
    return improved


def _polish(p: _Problem, assign: Sequence[int], max_passes: int = 100) -> np.ndarray:
    """Local descent: single-group moves, then pairwise swaps, until neither
    lowers the objective by more than ``IMPROVEMENT_TOL``."""
    st = _State(p, assign)
    for _ in range(max_passes):
        moved = _move_pass(st)
        swapped = _swap_pass(st)
        if not (moved or swapped):
            break
    return st.assign


def _bundles(p: _Problem, members: np.ndarray) -> tuple[list[tuple[int, ...]], np.ndarray, np.ndarray]:
    """Every set of at most two groups from ``members``, with summed counts and sizes."""
    sets = [()] + [(int(g),) for g in members] + [(int(g), int(h)) for i, g in enumerate(members) for h in members[i + 1:]]
    counts = np.zeros((len(sets), p.counts.shape[1]))
    sizes = np.zeros(len(sets))
    for i, s in enumerate(sets):
        for g in s:
            counts[i] += p.counts[g]
            sizes[i] += p.sizes[g]
    return sets, counts, sizes


def _exchange_polish(p: _Problem, assign: Sequence[int], max_rounds: int = 100) -> np.ndarray:
    """Local descent over exchanges of up to two groups each way between two folds.

    Covers the 2-for-1 and 2-for-2 trades that single moves and swaps
    cannot reach. O(n^4) candidates per fold pair, so small instances only.
    """
    st = _State(p, assign)
    for _ in range(max_rounds):
        best_delta, best_move = -IMPROVEMENT_TOL, None
        for a in range(p.k):
            sets_a, ca, sa = _bundles(p, np.flatnonzero(st.assign == a))
            for b in range(a + 1, p.k):
                sets_b, cb, sb = _bundles(p, np.flatnonzero(st.assign == b))
                dc = (cb[None, :, :] - ca[:, None, :]).reshape(-1, ca.shape[1])
                ds = (sb[None, :] - sa[:, None]).reshape(-1)
                delta = (p.terms(st.fc[a] + dc, st.fs[a] + ds) + p.terms(st.fc[b] - dc, st.fs[b] - ds)
                         - st.t[a] - st.t[b])
                i = int(np.argmin(delta))
                if delta[i] < best_delta:
                    best_delta = float(delta[i])
                    best_move = (a, b, sets_a[i // len(sets_b)], sets_b[i % len(sets_b)])
        if best_move is None:
            break
        a, b, from_a, from_b = best_move
        for g in from_a:
            st.move(g, b)
        for g in from_b:
            st.move(g, a)
    return st.assign


def _exact(p: _Problem, budget: int) -> np.ndarray | None:
    """Optimal assignment by enumerating every distinct partition, or None
    when there are more than ``budget`` of them. Ties go to the earliest
    partition in enumeration order."""
    n = len(p.keys)
    placements = _prefix_placements(p.k, n, budget)
    if len(placements[0]) < n:
        return None
    combos = np.array(placements, dtype=np.int64)
    total = np.zeros(len(combos))
    for f in range(p.k):
        member = (combos == f).astype(float)
        total += p.terms(member @ p.counts, member @ p.sizes)
    return combos[int(np.argmin(total))]


def _prefix_placements(k: int, n: int, budget: int) -> list[tuple[int, ...]]:
    """Distinct partitions of the first r groups into folds, r as large as ``budget`` allows.

    Placements are restricted growth strings (group i may open at most fold
    max(previous) + 1), so fold relabelings of one partition appear once.
    """
    def grow(level):
        return [t + (f,) for t in level for f in range(min(k, max(t) + 2))]

    level = [(0,)]
    for _ in range(1, n):
        nxt = grow(level)
        if len(nxt) > budget:
            break
        level = nxt
    return level


def assign_folds(
    groups: Groups,
    strata: Mapping[str, StratumKey],
    k: int = DEFAULT_K,
    seed: int = 0,
    joint: bool = True,
    restarts: int = 0,
) -> FoldAssignment:
    """Assign every group to one of ``k`` folds.

    Groups are visited largest first (ties by key text) and each goes to the
    fold whose objective increase is smallest, lowest index on ties; the
    result is then polished with improving moves and swaps. On instances of
    up to ``PREFIX_SEARCH_LIMIT`` groups the same greedy+polish is also run
    from every distinct placement of the few largest groups (at most
    ``PREFIX_STARTS`` of them) and the lowest objective wins, earliest start
    on ties. The winner then gets an exchange polish (up to two groups each
    way between two folds). Instances with at most ``EXACT_SEARCH_LIMIT``
    distinct partitions skip all of this and are enumerated outright, since
    their optimum can sit several group moves away from every local optimum.

    The result depends only on ``groups``/``strata``/``k`` unless ``restarts``
    is positive, in which case ``seed`` drives extra starts that shuffle
    groups of equal size.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    if len(groups) < k:
        raise TooFewGroups(f"{len(groups)} groups cannot fill {k} folds")
    p = _Problem(groups, strata, k, joint)
    n = len(p.keys)

    best = _exact(p, EXACT_SEARCH_LIMIT)
    if best is None:
        best = _polish(p, _greedy(p))
        best_j = p.total(best)
        if n <= PREFIX_SEARCH_LIMIT:
            for placement in _prefix_placements(k, n, PREFIX_STARTS):
                cand = _polish(p, _greedy(p, placement))
                j = p.total(cand)
                if j < best_j - IMPROVEMENT_TOL:
                    best, best_j = cand, j
            best = _exchange_polish(p, best)
    best_j = p.total(best)

    if restarts:
        rng = random.Random(seed)
        base_keys, base = p.keys, p
        for _ in range(restarts):
            order = list(range(n))
            rng.shuffle(order)
            order.sort(key=lambda g: -base.sizes[g])  # stable: only equal sizes move
            alt = _Problem(groups, strata, k, joint, keys=[base_keys[g] for g in order])
            cand = _polish(alt, _greedy(alt))
            j = alt.total(cand)
            if j < best_j - IMPROVEMENT_TOL:
                pos = {key: i for i, key in enumerate(base_keys)}
                best = np.empty(n, dtype=np.int64)
                for i, key in enumerate(alt.keys):
                    best[pos[key]] = cand[i]
                best_j = j

    g2f = {p.keys[g]: int(f) for g, f in enumerate(best)}
    universe = stratum_universe(strata)
    stats = [{s: 0 for s in universe} for _ in range(k)]
    for g, ids in groups.items():
        fold = g2f[g]
        for rid in ids:
            stats[fold][strata[rid]] += 1
    return FoldAssignment(k, g2f, seed, best_j, stats)


def assignment_objective(
    record_folds: Mapping[str, int], strata: Mapping[str, StratumKey], k: int, joint: bool = True
) -> float:
    cols = _Columns(strata, joint)
    fc = np.zeros((k, len(cols.names)))
    fs = np.zeros(k)
    for rid, fold in record_folds.items():
        for c in cols.of(strata[rid]):
            fc[fold, c] += 1
        fs[fold] += 1
    n = fs.sum()
    global_frac = fc.sum(axis=0) / n if n else np.zeros(len(cols.names))
    return objective(fc, fs, global_frac)


# ---------------------------------------------------------------------------
# audit

@dataclass
class AuditReport:
    leakage_violations: list[tuple[GroupKey, frozenset[int]]]
    per_fold_label_rate: list[float]
    per_fold_language_histogram: list[dict[str, int]]
    divergence: float
    fold_sizes: list[int]

    @property
    def ok(self) -> bool:
        return not self.leakage_violations

    def language_share(self) -> list[dict[str, float]]:
        out = []
        for hist, size in zip(self.per_fold_language_histogram, self.fold_sizes):
            out.append({lang: (c / size if size else 0.0) for lang, c in hist.items()})
        return out

    def to_obj(self) -> dict:
        return {
            "leakage_violations": [
                {"group_key": g.key, "kind": g.kind.value, "folds": sorted(fs)}
                for g, fs in self.leakage_violations
            ],
            "per_fold_label_rate": self.per_fold_label_rate,
            "per_fold_language_histogram": self.per_fold_language_histogram,
            "divergence": self.divergence,
            "fold_sizes": self.fold_sizes,
        }


def audit(
    record_folds: Mapping[str, int] | FoldAssignment,
    ds: Dataset,
    groups: Groups,
    k: int | None = None,
    joint: bool = True,
) -> AuditReport:
    """Check a fold assignment against the dataset it was built from.

    ``record_folds`` is normally the per-record map handed to training; a
    :class:`FoldAssignment` is expanded first. Spans are recomputed from the
    records, so a group whose members were split across folds after
    assignment is reported as a violation.
    """
    if isinstance(record_folds, FoldAssignment):
        k = record_folds.k
        record_folds = record_folds.record_folds(groups)
    missing = [r.id for r in ds.records if r.id not in record_folds]
    if missing:
        raise CoverageError(f"{len(missing)} record(s) have no fold, e.g. {missing[:5]}")
    if k is None:
        k = max(record_folds.values()) + 1 if record_folds else 1

    violations = []
    for g in sorted(groups):
        folds = frozenset(record_folds[rid] for rid in groups[g])
        if len(folds) > 1:
            violations.append((g, folds))

    langs = sorted(ds.languages)
    sizes = [0] * k
    positives = [0] * k
    hist = [{lang: 0 for lang in langs} for _ in range(k)]
    for rec in ds.records:
        f = record_folds[rec.id]
        if not 0 <= f < k:
            raise CoverageError(f"record {rec.id!r} has fold {f} outside [0, {k})")
        sizes[f] += 1
        positives[f] += rec.label or 0
        hist[f][rec.language] += 1
    rates = [positives[f] / sizes[f] if sizes[f] else 0.0 for f in range(k)]

    labeled = {r.id: r for r in ds.records if r.label is not None}
    if len(labeled) == len(ds.records) and ds.records:
        divergence = assignment_objective(
            {rid: record_folds[rid] for rid in labeled}, record_strata(ds), k, joint
        )
    else:
        divergence = float("nan")
    return AuditReport(violations, rates, hist, divergence, sizes)


# ---------------------------------------------------------------------------
# files

def dumps_assignment(a: FoldAssignment) -> str:
    """Group lines sorted by (key, kind), then one footer object."""
    lines = [
        dumps_line({"group_key": g.key, "kind": g.kind.value, "fold": a.group_to_fold[g]})
        for g in sorted(a.group_to_fold, key=lambda g: (g.key, g.kind.value))
    ]
    footer = {
        "k": a.k,
        "seed": a.seed,
        "objective_value": a.objective_value,
        "prefix_n": a.prefix_n,
        "per_fold_stats": [
            [{"language": s.language, "label": s.label, "count": c} for s, c in sorted(stats.items())]
            for stats in a.per_fold_stats
        ],
    }
    lines.append(dumps_line({"footer": footer}))
    return "".join(lines)


def save_assignment(a: FoldAssignment, path: str | Path) -> None:
    Path(path).write_text(dumps_assignment(a), encoding="utf-8", newline="")


def _parse_assignment(lines: Iterable[tuple[int, object]]) -> FoldAssignment:
    g2f: dict[GroupKey, int] = {}
    footer = None
    for lineno, obj in lines:
        if not isinstance(obj, dict):
            raise ParseError("expected a JSON object", lineno)
        if "footer" in obj:
            footer = obj["footer"]
            continue
        if footer is not None:
            raise ParseError("group line after footer", lineno)
        try:
            g = GroupKey(GroupKind(obj["kind"]), obj["group_key"])
            fold = obj["fold"]
        except (KeyError, ValueError, TypeError) as exc:
            raise ParseError(f"bad group line: {exc}", lineno) from None
        if g in g2f:
            raise ParseError(f"group {g.key!r} listed twice", lineno)
        g2f[g] = fold
    if footer is None:
        raise ParseError("fold assignment file has no footer")
    try:
        stats = [
            {StratumKey(e["language"], e["label"]): e["count"] for e in fold}
            for fold in footer.get("per_fold_stats", [])
        ]
        a = FoldAssignment(
            footer["k"], g2f, footer["seed"], footer["objective_value"], stats, footer.get("prefix_n")
        )
    except (KeyError, TypeError) as exc:
        raise ParseError(f"bad footer: {exc}") from None
    bad = [g for g, f in g2f.items() if not (isinstance(f, int) and 0 <= f < a.k)]
    if bad:
        raise ParseError(f"group {bad[0].key!r} has fold outside [0, {a.k})")
    return a


def load_assignment(path: str | Path) -> FoldAssignment:
    return _parse_assignment(iter_jsonl(path))


def dumps_record_folds(record_folds: Mapping[str, int], k: int, kind: GroupKind | None = None,
                       prefix_n: int | None = None) -> str:
    """Per-record ``(record_id, fold)`` lines in id order plus a footer."""
    lines = [dumps_line({"record_id": rid, "fold": record_folds[rid]}) for rid in sorted(record_folds)]
    lines.append(dumps_line({"footer": {"k": k, "kind": kind.value if kind else None, "prefix_n": prefix_n}}))
    return "".join(lines)


def save_record_folds(record_folds: Mapping[str, int], path: str | Path, k: int,
                      kind: GroupKind | None = None, prefix_n: int | None = None) -> None:
    Path(path).write_text(dumps_record_folds(record_folds, k, kind, prefix_n), encoding="utf-8", newline="")


def load_folds_file(path: str | Path) -> tuple[dict[str, int] | None, FoldAssignment | None, dict]:
    """Read either fold file flavour.

    Returns ``(record_folds, None, footer)`` for a per-record file and
    ``(None, assignment, footer)`` for a group assignment file.
    """
    items = list(iter_jsonl(path))
    body = [obj for _, obj in items if isinstance(obj, dict) and "footer" not in obj]
    if body and "record_id" in body[0]:
        folds: dict[str, int] = {}
        footer: dict = {}
        for lineno, obj in items:
            if not isinstance(obj, dict):
                raise ParseError("expected a JSON object", lineno)
            if "footer" in obj:
                footer = obj["footer"]
                continue
            try:
                rid, fold = str(obj["record_id"]), int(obj["fold"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"bad record fold line: {exc}", lineno) from None
            if rid in folds:
                raise ParseError(f"record {rid!r} listed twice", lineno)
            folds[rid] = fold
        return folds, None, footer
    a = _parse_assignment(items)
    kind = a.kind
    return None, a, {"k": a.k, "kind": kind.value if kind else None, "prefix_n": a.prefix_n}


def resolve_record_folds(path: str | Path, ds: Dataset, delimiter: str = DEFAULT_DELIMITER,
                         prefix_n: int | None = None) -> tuple[dict[str, int], int, Groups]:
    """Per-record folds for ``ds`` from either fold file flavour, plus k and the groups used."""
    folds, assignment, footer = load_folds_file(path)
    n = prefix_n or footer.get("prefix_n") or DEFAULT_PREFIX_N
    groups = make_groups(ds, n, delimiter)
    if assignment is not None:
        return assignment.record_folds(groups), assignment.k, groups
    k = footer.get("k") or (max(folds.values()) + 1 if folds else DEFAULT_K)
    return folds, k, groups
