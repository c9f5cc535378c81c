"""Probability models of the attacks and measurements that feed them."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .bitmaps import PermissionBitmaps
from .program.image import BinaryImage
from .program.templates import templates_at, window_fits


class InsufficientSamples(ValueError):
    pass


class ImpossibleClass(ValueError):
    pass


# ------------------------------------------------------- anchors / windows

def fit_chance(img: BinaryImage, m: int) -> float:
    """Probability that a window of ``m`` bytes at a random block byte lies inside that block."""
    if m < 1:
        raise ValueError("m must be >= 1")
    sizes = np.array([b.size for b in img.blocks], dtype=np.int64)
    total = int(sizes.sum())
    if not total:
        return 0.0
    return float(np.maximum(0, sizes - m + 1).sum()) / total


def fit_chance_bruteforce(img: BinaryImage, m: int) -> float:
    """Enumerate every start byte of every block and test the window directly."""
    total = fit = 0
    for b in img.blocks:
        for o in range(b.start, b.end):
            total += 1
            fit += img.block_at(o) == img.block_at(o + m - 1) and o + m <= b.end
    return fit / total if total else 0.0


def fit_chance_dist(pmf: np.ndarray, m: int) -> float:
    """Fit chance for a block-size distribution given as pmf over sizes 0..len-1."""
    n = np.arange(len(pmf))
    return float((pmf * np.maximum(0, n - m + 1)).sum() / (pmf * n).sum())


def sequence_uniqueness(img: BinaryImage, m: int, samples: int, rng: np.random.Generator | int = 0,
                        offsets: np.ndarray | None = None) -> dict[int, float]:
    """Histogram {candidate count: fraction} for random windows lying inside a block.

    Counts are gap-aware matches among all single-block windows of the image.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    if not 3 <= m <= 16:
        raise ValueError("m must be within 3..16")
    if offsets is None:
        offsets = fitting_offsets(img, m, samples, rng)
    if not len(offsets):
        return {}
    counts = templates_at(img, m).match_counts(offsets)
    vals, cnt = np.unique(counts, return_counts=True)
    return {int(v): float(c) / len(counts) for v, c in zip(vals, cnt)}


def fitting_offsets(img: BinaryImage, m: int, samples: int, rng: np.random.Generator | int = 0) -> np.ndarray:
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    if len(img.text) < m:
        return np.zeros(0, dtype=np.int64)
    ok = np.nonzero(window_fits(img, m))[0]
    if not len(ok):
        return np.zeros(0, dtype=np.int64)
    return np.sort(rng.choice(ok, samples, replace=True))


def unique_fraction(hist: dict[int, float]) -> float:
    return hist.get(1, 0.0)


@dataclass
class Expectation:
    value: float
    ceiling: float
    bounded: bool = True


def expected_probes_to_anchor(uniqueness: float, fit: float) -> Expectation:
    if not (0 <= uniqueness <= 1 and 0 <= fit <= 1):
        raise ValueError("probabilities must lie in [0, 1]")
    q = uniqueness * fit
    if q == 0:
        return Expectation(math.inf, math.inf, False)
    v = 1.0 / q
    # guard against 3.0000000004-style float noise before taking the ceiling
    return Expectation(v, float(math.ceil(round(v, 9))))


# --------------------------------------------------- gadget collection

def gadget_collection_sim(class_distribution, required, trials: int, rng: np.random.Generator | int = 0,
                          chunk: int = 200_000) -> tuple[float, float]:
    """Mean and standard error of i.i.d. class draws until every required class was seen."""
    p = np.asarray(class_distribution, dtype=float)
    if abs(p.sum() - 1) > 1e-9 or (p < 0).any():
        raise ValueError("class distribution must be a probability vector")
    req = sorted(set(required))
    if any(p[r] == 0 for r in req):
        raise ImpossibleClass("a required class has probability 0")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    # a draw outside the required set only costs time; the waiting time for the
    # next new required class is geometric with the mass of the classes still missing
    k = len(req)
    pr = p[req]
    out = np.empty(trials)
    done = 0
    while done < trials:
        n = min(chunk, trials - done)
        missing = np.ones((n, k), dtype=bool)
        draws = np.zeros(n)
        for _ in range(k):
            mass = (missing * pr).sum(axis=1)
            draws += rng.geometric(mass)
            # which missing class arrived: proportional to its probability
            w = missing * pr
            u = rng.random(n) * mass
            pick = np.argmax(np.cumsum(w, axis=1) > u[:, None], axis=1)
            missing[np.arange(n), pick] = False
        out[done:done + n] = draws
        done += n
    return float(out.mean()), float(out.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0


def gadget_collection_brute(class_distribution, required, trials: int, rng: np.random.Generator | int = 0
                            ) -> tuple[float, float]:
    """Draw-by-draw simulation, for cross-checking the fast simulator."""
    p = np.asarray(class_distribution, dtype=float)
    req = set(required)
    if any(p[r] == 0 for r in req):
        raise ImpossibleClass("a required class has probability 0")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    out = []
    for _ in range(trials):
        seen: set[int] = set()
        n = 0
        while not req <= seen:
            seen.add(int(rng.choice(len(p), p=p)))
            n += 1
        out.append(n)
    a = np.array(out, dtype=float)
    return float(a.mean()), float(a.std(ddof=1) / math.sqrt(len(a))) if len(a) > 1 else 0.0


def coupon_collector_mean(k: int) -> float:
    return k * sum(1.0 / i for i in range(1, k + 1))


def probe_budget(mean_gadgets: float, survival_factor: float, anchor_factor: float, destruction_factor: float,
                 floor: bool = True) -> float:
    fs = (mean_gadgets, survival_factor, anchor_factor, destruction_factor)
    if any(f < 1 for f in fs):
        raise ValueError("all factors must be >= 1")
    if floor:
        return math.prod(math.floor(f) for f in fs)
    return math.prod(fs)


def success_curve(p: float, a: float) -> float:
    if not 0 <= p <= 1:
        raise ValueError("p must lie in [0, 1]")
    if p == 1:
        return 0.0 if a >= 1 else 1.0
    return (1 - p) ** a


def max_probes(p: float, threshold: float) -> tuple[int, bool]:
    """Largest probe count whose success chance stays at or above ``threshold``.

    Returns (probes, bounded); p = 1 yields (0, False).
    """
    if not 0 <= p <= 1 or not 0 < threshold <= 1:
        raise ValueError("bad p or threshold")
    if p == 1:
        return 0, False
    if p == 0:
        return math.inf, False
    a = math.floor(math.log(threshold) / math.log1p(-p))
    # the log ratio can land a hair off an integer; settle on the curve itself
    while success_curve(p, a + 1) >= threshold:
        a += 1
    while a > 0 and success_curve(p, a) < threshold:
        a -= 1
    return a, True


def window_xom_ratio(bitmaps: PermissionBitmaps, m: int) -> float:
    """Chance that an m-byte probe at a uniform offset touches an execute-only byte."""
    n = len(bitmaps)
    if n < m:
        return 0.0
    x = np.concatenate([[0], np.cumsum(bitmaps.xom)])
    return float(((x[m:] - x[:-m]) > 0).mean())


@dataclass
class Comparison:
    trials: int
    successes: int
    measured: float
    predicted: float
    stderr: float
    probes: float
    first_probe_survival: float | None
    first_probe_predicted: float
    first_probe_stderr: float
    flagged: bool

    def as_dict(self) -> dict:
        return asdict(self)


def empirical_vs_analytic(reports, p: float, probes: float | None = None, min_trials: int = 10,
                          random_first_probe: bool = True) -> Comparison:
    """Compare campaign outcomes with the (1 - p)^a model.

    ``p`` is the chance that one probe touches an execute-only byte and
    ``probes`` the number of probes an unhindered attack needs (default: median
    probes of the successful reports, else of all reports).  When every trial
    opens with a uniformly random probe, the survival of that first probe is
    checked against 1 - p as well.  A deviation beyond three standard errors in
    either check sets ``flagged``.
    """
    reps = list(reports)
    if len(reps) < min_trials:
        raise InsufficientSamples(f"{len(reps)} reports, need {min_trials}")
    n = len(reps)
    succ = sum(r.outcome == "success" for r in reps)
    if probes is None:
        pool = [r.probes_used for r in reps if r.outcome == "success"] or [r.probes_used for r in reps]
        probes = float(np.median(pool))
    pred = success_curve(p, probes)
    se = math.sqrt(pred * (1 - pred) / n)
    measured = succ / n
    tol = 1e-12
    flagged = abs(measured - pred) > 3 * se + tol
    surv = None
    pse = math.sqrt(p * (1 - p) / n)
    if random_first_probe:
        died = sum(r.outcome == "crash" and r.reason == "xom-read" and r.probes_used == 1 for r in reps)
        surv = 1 - died / n
        flagged |= abs(surv - (1 - p)) > 3 * pse + tol
    return Comparison(n, succ, measured, pred, se, probes, surv, 1 - p, pse, flagged)


# ----------------------------------------------------- block coverage

BUCKETS = ("never", "1-99", ">=100")


def executed_fraction(block_counts: np.ndarray) -> dict[str, float]:
    c = np.asarray(block_counts)
    n = len(c)
    if not n:
        return {b: 0.0 for b in BUCKETS}
    return {"never": float((c == 0).mean()), "1-99": float(((c >= 1) & (c <= 99)).mean()),
            ">=100": float((c >= 100).mean())}


def block_execution_counts(img: BinaryImage, workload, fuel: int = 1_000_000) -> np.ndarray:
    """How often each block was entered while replaying ``workload`` in a recording process."""
    from .enforcer import SimProcess

    counts = np.zeros(len(img.blocks), dtype=np.int64)
    starts = {b.start: b.id for b in img.blocks}
    procs = []
    p = None
    # one long-lived process, replaced only after a crash
    for entry, args in workload:
        if p is None or p.crashed:
            p = SimProcess(img, None, "none", mode="record", count_fetches=True)
            procs.append(p)
        p.run(entry, args, fuel)
    for p in procs:
        for addr, k in p.fetch_counts.items():
            b = starts.get(addr)
            if b is not None:
                counts[b] += k
    return counts


def browser_like_workload(img: BinaryImage, seed: int = 0, hot: int = 8, hot_calls: int = 100,
                          tail: int = 400) -> list:
    """A hot core of entry points called many times plus a long tail of one-off calls.

    Hot entries come from exported and address-taken functions; the tail stands
    in for rarely used paths and may start in any function.
    """
    rng = np.random.default_rng(seed)
    outer = sorted(set(img.entry_points) | {f for t in img.pointer_tables for f in t.entries})
    if not outer:
        return []
    out = []
    for f in rng.choice(outer, min(hot, len(outer)), replace=False).tolist():
        fn = img.functions[f]
        for _ in range(hot_calls):
            args = tuple(int(x) for x in rng.integers(0, 16, fn.param_count))
            out.append((img.entry_address(f), args))
    for f in rng.choice(len(img.functions), tail).tolist():
        fn = img.functions[f]
        args = tuple(int(x) & 0xFFFFFFFF for x in rng.integers(-64, 64, fn.param_count))
        out.append((img.entry_address(f), args))
    return out


def destruction_estimate(img: BinaryImage, probe_len: int = 3, gadget_len: int = 2, samples: int = 100_000,
                         rng: np.random.Generator | int = 0) -> float:
    """Fraction of block-ending gadgets destroyed by a probe that lands in their block.

    Every block is taken to end in one gadget of ``gadget_len`` bytes; the probe
    starts at a uniform byte of a uniformly chosen block and garbles
    ``probe_len`` bytes.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    sizes = np.array([b.size for b in img.blocks], dtype=np.int64)
    if not len(sizes):
        return 0.0
    n = sizes[rng.integers(0, len(sizes), samples)]
    start = (rng.random(samples) * n).astype(np.int64)
    return float((start + probe_len > n - gadget_len).mean())


def destruction_exact(sizes, probe_len: int = 3, gadget_len: int = 2) -> float:
    """Closed form of :func:`destruction_estimate` for a list of block sizes."""
    n = np.asarray(sizes, dtype=float)
    if not len(n):
        return 0.0
    return float(np.minimum(1.0, (probe_len + gadget_len - 1) / n).mean())


# ----------------------------------------------------------------- CSVs

CSV_FILES = ("fig3_candidates.csv", "table1_fitchance.csv", "fig8_curve.csv", "appendixA_cdf.csv",
             "table7_buckets.csv")


def _write(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow(r)


def emit_csvs(img: BinaryImage, out_dir, seed: int = 0, samples: int = 20_000, pmf: np.ndarray | None = None,
              workload=None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    empty = not img.blocks or len(img.text) < 3
    paths = [out / f for f in CSV_FILES]
    rows = []
    if not empty:
        for m in range(3, 9):
            hist = sequence_uniqueness(img, m, samples, rng)
            rows += [(m, k, f"{v:.6f}") for k, v in sorted(hist.items())]
    _write(paths[0], ["m", "candidates", "fraction"], rows)
    rows = []
    if not empty:
        for m in range(1, 11):
            d = f"{fit_chance_dist(pmf, m):.6f}" if pmf is not None else ""
            rows.append((m, f"{fit_chance(img, m):.6f}", d))
    _write(paths[1], ["m", "fit_chance", "fit_chance_distribution"], rows)
    rows = []
    if not empty:
        for p in (0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.5):
            for t in (1e-3, 1e-6, 1e-9, 1e-12):
                rows.append((p, t, max_probes(p, t)[0]))
    _write(paths[2], ["xom_ratio", "threshold", "max_probes"], rows)
    rows = []
    if not empty:
        sizes = np.array([b.size for b in img.blocks])
        for n in range(1, 129):
            d = f"{pmf[:n + 1].sum():.6f}" if pmf is not None else ""
            rows.append((n, f"{(sizes <= n).mean():.6f}", d))
    _write(paths[3], ["size", "cdf_image", "cdf_distribution"], rows)
    rows = []
    if not empty:
        wl = workload if workload is not None else browser_like_workload(img, seed)
        for k, v in executed_fraction(block_execution_counts(img, wl)).items():
            rows.append((k, f"{v:.6f}"))
    _write(paths[4], ["bucket", "fraction"], rows)
    return paths
