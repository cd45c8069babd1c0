"""Anytime reconstruction by simulated annealing over rows, with incremental scoring.

Rows are Python ints used as bit sets; per-cell values ``D = noisy - derived`` are
kept up to date so a move only touches the cells it changes. The search objective
uses the soft tail so that infeasible states still have a finite score.
"""

from __future__ import annotations

import logging
import math
import random
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .problem import NInterval, ReconstructionProblem
from .solution import CandidateSolution, TracePoint, make_solution

logger = logging.getLogger(__name__)

DEFAULT_MOVE_WEIGHTS = {"flip": 0.3, "swap": 0.2, "relabel": 0.1, "targeted": 0.35, "resize": 0.05}


@dataclass(frozen=True)
class AnnealingConfig:
    """Schedule knobs. ``nominal_move_rate`` converts a time budget into a move count."""

    restarts: int = 8
    cooling: float = 0.999
    final_ratio: float = 1e-3
    reheat: float = 0.1
    nominal_move_rate: float = 50000.0
    move_weights: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_MOVE_WEIGHTS))
    sample_rows: int = 6

    @property
    def batches_per_cycle(self) -> int:
        return max(1, math.ceil(math.log(self.final_ratio) / math.log(self.cooling)))


def _popcount(x: int) -> int:
    return bin(x).count("1")


class _Search:
    def __init__(self, problem: ReconstructionProblem, rng: random.Random, cfg: AnnealingConfig):
        self.p = problem
        self.rng = rng
        self.cfg = cfg
        C = self.C = problem.num_classes
        m = self.m = problem.num_features
        self.T = len(problem.trees)
        self.off = list(problem.cell_offsets)
        self.noisy = [int(x) for x in problem.noisy_flat]
        self.gamma = problem.noise_model.gamma

        self.routes = []
        self.leaf_pos: list[list[int]] = []
        self.leaf_neg: list[list[int]] = []
        uses: list[set[int]] = [set() for _ in range(m)]
        for ti, t in enumerate(problem.trees):
            attr, left, right, leaf = (a.tolist() for a in t.arrays())
            self.routes.append((attr, left, right, leaf))
            self.leaf_pos.append([sum(1 << a for a in s) for s in t.positive_splits])
            self.leaf_neg.append([sum(1 << a for a in s) for s in t.negative_splits])
            for a in attr:
                if a >= 0:
                    uses[a].add(ti)
        self.trees_using = [sorted(u) for u in uses]

        # soft log-probability table indexed by D + R
        n_hi = problem.n_max
        lo = min(self.noisy) - n_hi - 2
        hi = max(self.noisy) + 2
        self.R = R = max(-lo, hi, self.gamma + 2)
        self.L = problem.noise_model.soft_table(R - problem.noise_model.gamma)
        assert len(self.L) == 2 * R + 1

        self.informed = problem.informed
        self.w = problem.alpha / problem.num_cells if self.informed else 1.0
        self.regw = [0.0] * m
        if self.informed:
            k = problem.known_rows.n
            ones = problem.known_rows.rows.sum(axis=0)
            self.regw = [(2.0 * float(ones[a]) - k) / k for a in range(m)]
            self.reg_const = -float(ones.sum()) / k

        self.groups = [sum(1 << a for a in g.attribute_indices) for g in problem.groups]
        self.group_members = [list(g.attribute_indices) for g in problem.groups]
        grouped = {a for g in problem.groups for a in g.attribute_indices}
        self.free_binary = [a for a in range(m) if a not in grouped]

        self.k0 = problem.num_known_rows
        self.resizable = isinstance(problem.n_knowledge, NInterval) and problem.n_min < problem.n_max
        self.col_mask = sum(1 << a for a in problem.known_columns)
        self.col_vals = {a: [int(v) for v in col] for a, col in problem.known_columns.items()}

        self.base_D = list(self.noisy)
        if self.k0:
            for r, c in zip(problem.known_rows.rows, problem.known_rows.labels):
                bits = self._bits(r)
                for cell in self._cells(bits, int(c)):
                    self.base_D[cell] -= 1
            self.known_bits = [self._bits(r) for r in problem.known_rows.rows]
            self.known_labels = [int(c) for c in problem.known_rows.labels]

        self.upper = problem.upper_bound()
        self.lp0 = self.L[R]

    # ------------------------------------------------------------ helpers

    def _bits(self, row) -> int:
        b = 0
        for a, v in enumerate(row):
            if v:
                b |= 1 << a
        return b

    def _route(self, bits: int, ti: int) -> int:
        attr, left, right, leaf = self.routes[ti]
        n = 0
        a = attr[0]
        while a >= 0:
            n = left[n] if (bits >> a) & 1 else right[n]
            a = attr[n]
        return leaf[n]

    def _cells(self, bits: int, c: int) -> list[int]:
        C = self.C
        return [self.off[ti] + self._route(bits, ti) * C + c for ti in range(self.T)]

    def _fixed(self, k: int) -> tuple[int, int]:
        """(mask, values) of attributes the adversary already knows for row k."""
        if k < self.k0:
            return (1 << self.m) - 1, self.known_bits[k]
        if not self.col_mask:
            return 0, 0
        vals = 0
        for a, col in self.col_vals.items():
            if col[k]:
                vals |= 1 << a
        return self.col_mask, vals

    def _reg(self, bits: int) -> float:
        r = self.reg_const
        for a in range(self.m):
            if (bits >> a) & 1:
                r += self.regw[a]
        return r

    # ------------------------------------------------------------- state

    def _reset(self) -> None:
        self.D = list(self.base_D)
        self.rows: list[int] = []
        self.labels: list[int] = []
        self.rc: list[list[int]] = []
        self.fmask: list[int] = []
        self.fval: list[int] = []
        if self.k0:
            for k in range(self.k0):
                self.rows.append(self.known_bits[k])
                self.labels.append(self.known_labels[k])
                self.rc.append(self._cells(self.known_bits[k], self.known_labels[k]))
                self.fmask.append((1 << self.m) - 1)
                self.fval.append(self.known_bits[k])

    def _append_row(self, bits: int, c: int, k: int) -> None:
        cells = self._cells(bits, c)
        for cell in cells:
            self.D[cell] -= 1
        mask, vals = self._fixed(k)
        self.rows.append(bits)
        self.labels.append(c)
        self.rc.append(cells)
        self.fmask.append(mask)
        self.fval.append(vals)

    def _total(self) -> tuple[float, int]:
        L, R, g = self.L, self.R, self.gamma
        ll = 0.0
        viol = 0
        for d in self.D:
            ll += L[d + R]
            if d > g or d < -g:
                viol += 1
        obj = self.w * ll
        if self.informed:
            obj += sum(self._reg(b) for b in self.rows[self.k0:])
        return obj, viol

    def _leaf_ok(self, P: int, Q: int, pos: int, neg: int) -> bool:
        if pos & Q or neg & P:
            return False
        P2, Q2 = P | pos, Q | neg
        for gm in self.groups:
            if _popcount(P2 & gm) > 1 or (Q2 & gm) == gm:
                return False
        return True

    def _construct(self, k: int, mask: int, vals: int, randomize: bool = True) -> tuple[int, int]:
        """Build a row aiming at the cells with the largest remaining deficit."""
        rng = self.rng
        D, C, off = self.D, self.C, self.off
        P = vals & mask
        Q = mask & ~vals
        order = list(range(self.T))
        if randomize:
            rng.shuffle(order)
        label = None
        for ti in order:
            best = None
            best_cells: list[tuple[int, int]] = []
            pos_l, neg_l = self.leaf_pos[ti], self.leaf_neg[ti]
            for v in range(len(pos_l)):
                if not self._leaf_ok(P, Q, pos_l[v], neg_l[v]):
                    continue
                classes = range(C) if label is None else (label,)
                for c in classes:
                    r = D[off[ti] + v * C + c]
                    if best is None or r > best:
                        best, best_cells = r, [(v, c)]
                    elif r == best:
                        best_cells.append((v, c))
            if not best_cells:
                continue
            v, c = best_cells[rng.randrange(len(best_cells))] if randomize else best_cells[0]
            label = c
            P |= pos_l[v]
            Q |= neg_l[v]
        bits = P
        for gm, members in zip(self.groups, self.group_members):
            if not bits & gm:
                opts = [a for a in members if not (Q >> a) & 1]
                bits |= 1 << opts[rng.randrange(len(opts))]
        for a in self.free_binary:
            if not ((P | Q) >> a) & 1 and rng.random() < 0.5:
                bits |= 1 << a
        if label is None:
            label = rng.randrange(C)
        return bits, label

    def greedy(self, n_rows: int) -> None:
        self._reset()
        for k in range(self.k0, n_rows):
            mask, vals = self._fixed(k)
            bits, c = self._construct(k, mask, vals)
            self._append_row(bits, c, k)

    def load(self, rows: list[int], labels: list[int]) -> None:
        self._reset()
        for k in range(self.k0, len(rows)):
            self._append_row(rows[k], labels[k], k)

    # ------------------------------------------------------------- moves

    def _change_gain(self, old: list[int], new: list[int]) -> float:
        L, R, D = self.L, self.R, self.D
        g = 0.0
        for o, n in zip(old, new):
            if o != n:
                do = D[o] + R
                dn = D[n] + R
                g += L[do + 1] - L[do] + L[dn - 1] - L[dn]
        return g

    def _apply_change(self, k: int, bits: int, c: int, new: list[int]) -> int:
        D, g = self.D, self.gamma
        dv = 0
        for o, n in zip(self.rc[k], new):
            if o != n:
                before = (D[o] > g or D[o] < -g) + (D[n] > g or D[n] < -g)
                D[o] += 1
                D[n] -= 1
                dv += (D[o] > g or D[o] < -g) + (D[n] > g or D[n] < -g) - before
        self.rows[k] = bits
        self.labels[k] = c
        self.rc[k] = new
        return dv

    def _reg_delta(self, old: int, new: int) -> float:
        if not self.informed:
            return 0.0
        diff = old ^ new
        out = 0.0
        a = 0
        while diff:
            if diff & 1:
                out += self.regw[a] if (new >> a) & 1 else -self.regw[a]
            diff >>= 1
            a += 1
        return out

    def propose(self, kind: str):
        """Return (gain, apply-callable) or None when the move is not applicable."""
        rng = self.rng
        n = len(self.rows)
        if kind == "resize":
            return self._propose_resize()
        if n <= self.k0:
            return None
        if kind == "targeted":
            return self._propose_targeted()
        k = rng.randrange(self.k0, n)
        bits, c = self.rows[k], self.labels[k]
        mask = self.fmask[k]
        if kind == "flip":
            if not self.free_binary:
                return None
            a = self.free_binary[rng.randrange(len(self.free_binary))]
            if (mask >> a) & 1:
                return None
            nb = bits ^ (1 << a)
            trees = self.trees_using[a]
            new = list(self.rc[k])
            C, off = self.C, self.off
            for ti in trees:
                new[ti] = off[ti] + self._route(nb, ti) * C + c
            nc = c
        elif kind == "swap":
            if not self.groups:
                return None
            gi = rng.randrange(len(self.groups))
            gm = self.groups[gi]
            if mask & gm:
                return None
            members = self.group_members[gi]
            j = members[rng.randrange(len(members))]
            if (bits >> j) & 1:
                return None
            nb = (bits & ~gm) | (1 << j)
            new = self._cells(nb, c)
            nc = c
        elif kind == "relabel":
            if self.C < 2:
                return None
            nc = rng.randrange(self.C - 1)
            if nc >= c:
                nc += 1
            nb = bits
            new = [cell - c + nc for cell in self.rc[k]]
        else:
            raise ValueError(kind)
        gain = self.w * self._change_gain(self.rc[k], new) + self._reg_delta(bits, nb)
        return gain, (k, nb, nc, new)

    def _propose_targeted(self):
        rng = self.rng
        D, C, off = self.D, self.C, self.off
        ti = rng.randrange(self.T)
        lo, hi = off[ti], off[ti + 1]
        deficits = [cell for cell in range(lo, hi) if D[cell] > 0]
        if not deficits:
            return None
        cell = deficits[rng.randrange(len(deficits))]
        v, c = divmod(cell - lo, C)
        n = len(self.rows)
        best_k = None
        for _ in range(self.cfg.sample_rows):
            k = rng.randrange(self.k0, n)
            if self.rc[k][ti] == cell:
                continue
            if best_k is None or D[self.rc[k][ti]] < D[self.rc[best_k][ti]]:
                best_k = k
        if best_k is None:
            return None
        k = best_k
        bits = self.rows[k]
        pos, neg = self.leaf_pos[ti][v], self.leaf_neg[ti][v]
        nb = (bits | pos) & ~neg
        for gm, members in zip(self.groups, self.group_members):
            if pos & gm:
                nb = (nb & ~gm) | (pos & gm)
            elif _popcount(nb & gm) != 1 or nb & gm & neg:
                opts = [a for a in members if not (neg >> a) & 1]
                if not opts:
                    return None
                nb = (nb & ~gm) | (1 << opts[rng.randrange(len(opts))])
        if (nb ^ bits) & self.fmask[k]:
            return None
        new = self._cells(nb, c)
        gain = self.w * self._change_gain(self.rc[k], new) + self._reg_delta(bits, nb)
        return gain, (k, nb, c, new)

    def _propose_resize(self):
        if not self.resizable:
            return None
        rng = self.rng
        n = len(self.rows)
        L, R, D = self.L, self.R, self.D
        grow = rng.random() < 0.5
        if grow and n >= self.p.n_max:
            grow = False
        if not grow and n <= max(self.p.n_min, self.k0 + 1):
            if n >= self.p.n_max:
                return None
            grow = True
        if grow:
            bits, c = self._construct(n, 0, 0)
            cells = self._cells(bits, c)
            gain = sum(L[D[x] + R - 1] - L[D[x] + R] for x in cells)
            return self.w * gain, ("add", bits, c, cells)
        k = rng.randrange(self.k0, n)
        cells = self.rc[k]
        gain = sum(L[D[x] + R + 1] - L[D[x] + R] for x in cells)
        return self.w * gain, ("remove", k, None, cells)

    def apply(self, payload) -> int:
        """Apply an accepted move; return the change in the number of out-of-range cells."""
        D, g = self.D, self.gamma
        if payload[0] == "add":
            _, bits, c, cells = payload
            before = sum(D[x] > g or D[x] < -g for x in cells)
            for x in cells:
                D[x] -= 1
            self.rows.append(bits)
            self.labels.append(c)
            self.rc.append(cells)
            self.fmask.append(0)
            self.fval.append(0)
            return sum(D[x] > g or D[x] < -g for x in cells) - before
        if payload[0] == "remove":
            _, k, _, cells = payload
            before = sum(D[x] > g or D[x] < -g for x in cells)
            for x in cells:
                D[x] += 1
            last = len(self.rows) - 1
            for lst in (self.rows, self.labels, self.rc, self.fmask, self.fval):
                lst[k] = lst[last]
                lst.pop()
            return sum(D[x] > g or D[x] < -g for x in cells) - before
        k, nb, nc, new = payload
        return self._apply_change(k, nb, nc, new)


def _derive_seed(seed: int, worker: int) -> int:
    return int(np.random.SeedSequence([int(seed) & (2**64 - 1), worker]).generate_state(2, np.uint64)[0])


def _run(problem: ReconstructionProblem, time_budget: float, seed: int, worker: int,
         cfg: AnnealingConfig, max_moves: int | None) -> dict:
    start = time.perf_counter()
    deadline = start + time_budget
    rng = random.Random(_derive_seed(seed, worker))
    s = _Search(problem, rng, cfg)

    nb = cfg.batches_per_cycle
    if max_moves is not None:
        batch = max(1, max_moves // (cfg.restarts * nb))
    else:
        batch = max(1, int(cfg.nominal_move_rate * time_budget / (cfg.restarts * nb)))

    kinds = [k for k, w in cfg.move_weights.items() if w > 0]
    if not s.resizable:
        kinds = [k for k in kinds if k != "resize"]
    weights = [cfg.move_weights[k] for k in kinds]
    cum = list(np.cumsum(weights) / sum(weights))

    def pick() -> str:
        u = rng.random()
        for kk, cw in zip(kinds, cum):
            if u <= cw:
                return kk
        return kinds[-1]

    if isinstance(problem.n_knowledge, NInterval):
        n0 = int(min(max(round(problem.n_knowledge.n_star), problem.n_min), problem.n_max))
    else:
        n0 = problem.n_min

    best = {"feasible": None, "soft": None}
    trace: list[TracePoint] = []
    first_feasible: list[float] = []
    moves = 0
    accepted = 0
    ub = s.upper
    done = False

    def record(obj: float, viol: int) -> None:
        feas = viol == 0
        key = "feasible" if feas else "soft"
        cur = best[key]
        if cur is None or obj > cur[0] + 1e-12:
            best[key] = (obj, list(s.rows), list(s.labels))
            if feas and not first_feasible:
                first_feasible.append(time.perf_counter() - start)
            overall = best["feasible"] or best["soft"]
            if feas or best["feasible"] is None:
                trace.append(TracePoint(time.perf_counter() - start, overall[0], best["feasible"] is not None))

    T0 = None
    cycles = 0
    for cycle in range(cfg.restarts):
        if time.perf_counter() >= deadline:
            break
        cycles += 1
        from_best = cycle % 2 == 1 and (best["feasible"] or best["soft"]) is not None
        if from_best:
            src = best["feasible"] or best["soft"]
            s.load(src[1], src[2])
        else:
            s.greedy(n0)
        obj, viol = s._total()
        record(obj, viol)
        if T0 is None:
            samples = []
            for _ in range(200):
                prop = s.propose(pick())
                if prop is not None and prop[0] < 0:
                    samples.append(-prop[0])
            T0 = float(np.median(samples)) / math.log(2) if samples else 1.0
            T0 = max(T0, 1e-9)
        temp = T0 * (cfg.reheat if from_best else 1.0)
        for _b in range(nb):
            for _ in range(batch):
                moves += 1
                prop = s.propose(pick())
                if prop is None:
                    continue
                gain, payload = prop
                if gain >= 0 or rng.random() < math.exp(gain / temp):
                    viol += s.apply(payload)
                    obj += gain
                    accepted += 1
                    if gain > 0 or viol == 0:
                        record(obj, viol)
                    if ub is not None and viol == 0 and obj >= ub - 1e-9:
                        done = True
                        break
            temp *= cfg.cooling
            if done or time.perf_counter() >= deadline:
                break
        # resync against accumulated rounding
        obj, viol = s._total()
        record(obj, viol)
        if done or time.perf_counter() >= deadline:
            break

    chosen = best["feasible"] or best["soft"]
    return {
        "rows": chosen[1],
        "labels": chosen[2],
        "trace": trace,
        "first_feasible": first_feasible[0] if first_feasible else None,
        "stats": {
            "solver": "anytime",
            "worker": worker,
            "moves": moves,
            "accepted": accepted,
            "cycles": cycles,
            "batch_size": batch,
            "initial_temperature": T0,
            "reached_upper_bound": done,
            "wall_time": time.perf_counter() - start,
        },
    }


def _to_matrix(bits_rows: list[int], m: int) -> np.ndarray:
    out = np.zeros((len(bits_rows), m), dtype=np.uint8)
    for k, b in enumerate(bits_rows):
        for a in range(m):
            if (b >> a) & 1:
                out[k, a] = 1
    return out


def solve_anytime(
    problem: ReconstructionProblem,
    time_budget: float = 120.0,
    seed: int = 0,
    threads: int = 1,
    config: AnnealingConfig | None = None,
    max_moves: int | None = None,
) -> CandidateSolution:
    """Best reconstruction found within ``time_budget`` seconds.

    With ``threads > 1`` independent workers run in separate processes and the best
    result wins (hard-feasible first, then objective, then lowest worker index).
    Single-worker runs are reproducible for a seed whenever the move schedule, not
    the clock, ends the search (pass ``max_moves`` to make that explicit).
    """
    if time_budget <= 0:
        raise ValueError("time_budget must be positive")
    cfg = config or AnnealingConfig()
    if threads <= 1:
        results = [_run(problem, time_budget, seed, 0, cfg, max_moves)]
    else:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            futs = [ex.submit(_run, problem, time_budget, seed, w, cfg, max_moves) for w in range(threads)]
            results = [f.result() for f in futs]
    m = problem.num_features
    sols = []
    for r in results:
        sol = make_solution(
            problem, _to_matrix(r["rows"], m), r["labels"],
            trace=tuple(r["trace"]), time_to_first_feasible=r["first_feasible"], stats=r["stats"],
        )
        sols.append(sol)
    best = max(range(len(sols)), key=lambda i: (sols[i].hard_feasible, sols[i].objective, -i))
    out = sols[best]
    if len(sols) > 1:
        out.stats["workers"] = len(sols)
    if not out.hard_feasible:
        logger.warning("no hard-feasible reconstruction found within the budget")
    return out
