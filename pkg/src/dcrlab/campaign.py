"""Seeded attack/defense campaigns over one original image."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import yaml
from scipy.stats import binomtest

from . import __version__, analysis
from .attacker import MODES, WALK_MODES, AttackBudget, CampaignReport, run_attack
from .bitmaps import PermissionBitmaps
from .enforcer import POLICIES, load
from .profiler import CONFIDENCE, fixture_suite, merge, profile_dynamic, profile_static
from .program.image import BinaryImage
from .randomizer import TIERS, RandomizationSpec, randomize

PROFILE_SOURCES = ("none", "static", "dynamic", "merged", "file")


class ConfigError(ValueError):
    pass


@dataclass
class ProfileConfig:
    source: str = "static"
    confidence: str = "conservative"
    workload: str = "train"  # fixture suite name
    path: str = ""

    def check(self) -> None:
        if self.source not in PROFILE_SOURCES:
            raise ConfigError(f"profile.source must be one of {PROFILE_SOURCES}")
        if self.confidence not in CONFIDENCE:
            raise ConfigError(f"profile.confidence must be one of {CONFIDENCE}")
        if self.source == "file" and not self.path:
            raise ConfigError("profile.path is required for source 'file'")


@dataclass
class CampaignConfig:
    policy: str = "dcr-only"
    tier: str = "tier1"
    attack: str = "attack1"
    walk_mode: str | None = None
    profile: ProfileConfig = field(default_factory=ProfileConfig)
    budget: dict = field(default_factory=lambda: asdict(AttackBudget()))
    trials: int = 100
    # distinct randomized images; trials are spread evenly over them
    randomizations: int = 0
    # unprotected runs that measure how many probes the attack needs
    reference_trials: int = 0
    workers: int = 1
    seed: int = 0

    def check(self) -> None:
        if self.policy not in POLICIES:
            raise ConfigError(f"policy must be one of {POLICIES}")
        if self.tier not in TIERS:
            raise ConfigError(f"tier must be one of {TIERS}")
        if self.attack not in MODES:
            raise ConfigError(f"attack must be one of {MODES}")
        if self.walk_mode is not None and self.walk_mode not in WALK_MODES:
            raise ConfigError(f"walk_mode must be one of {WALK_MODES}")
        for k in ("trials", "randomizations", "reference_trials"):
            if getattr(self, k) < 0:
                raise ConfigError(f"{k} must be >= 0")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        self.profile.check()
        try:
            self.attack_budget()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"budget: {exc}") from None

    def attack_budget(self) -> AttackBudget:
        return AttackBudget(**self.budget)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CampaignConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown config keys: {sorted(bad)}")
        prof = d.pop("profile", None) or {}
        if not isinstance(prof, dict):
            raise ConfigError("profile must be a mapping")
        pk = {f.name for f in fields(ProfileConfig)}
        if set(prof) - pk:
            raise ConfigError(f"unknown profile keys: {sorted(set(prof) - pk)}")
        budget = {**asdict(AttackBudget()), **(d.pop("budget", None) or {})}
        try:
            cfg = cls(profile=ProfileConfig(**prof), budget=budget, **d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        cfg.check()
        return cfg

    @classmethod
    def from_yaml(cls, text: str) -> "CampaignConfig":
        try:
            raw = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config parse error: {exc}") from None
        if raw is not None and not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
        return cls.from_dict(raw or {})

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def build_profile(img: BinaryImage, cfg: ProfileConfig, seed: int = 0) -> PermissionBitmaps | None:
    if cfg.source == "none":
        return None
    if cfg.source == "file":
        return PermissionBitmaps.load(cfg.path)
    static = profile_static(img, cfg.confidence) if cfg.source in ("static", "merged") else None
    dyn = None
    if cfg.source in ("dynamic", "merged"):
        suite = fixture_suite(img, seed)
        if cfg.workload not in suite:
            raise ConfigError(f"unknown workload {cfg.workload!r}")
        dyn = profile_dynamic(img, suite[cfg.workload])
    if static is not None and dyn is not None:
        return merge(static, dyn)
    return static if static is not None else dyn


def trial_seeds(seed: int, index: int) -> tuple[int, int]:
    """(randomization seed, attacker seed) for one trial; independent of scheduling."""
    a, b = np.random.SeedSequence([seed, index]).generate_state(2)
    return int(a), int(b)


def randomization_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, 0x52414E44, k]).generate_state(1)[0])


# per-process state for workers (inherited through fork)
_STATE: dict = {}


def _rand_for(k: int):
    cache = _STATE.setdefault("rand", {})
    if k not in cache:
        cache.clear()
        cfg = _STATE["cfg"]
        cache[k] = randomize(_STATE["img"], _STATE["bitmaps"],
                             RandomizationSpec(tier=cfg.tier, seed=randomization_seed(cfg.seed, k)))
    return cache[k]


def _slot(i: int, trials: int, rands: int) -> int:
    return i * rands // trials if rands else i


def _trial(args) -> str:
    i, trials, policy = args
    cfg = _STATE["cfg"]
    rseed, aseed = trial_seeds(cfg.seed, i)
    if cfg.randomizations:
        rand = _rand_for(_slot(i, trials, cfg.randomizations))
    else:
        rand = randomize(_STATE["img"], _STATE["bitmaps"], RandomizationSpec(tier=cfg.tier, seed=rseed))
    proc = load(rand, policy)
    rep = run_attack(proc, _STATE["img"], cfg.attack, cfg.attack_budget(), aseed, cfg.walk_mode)
    rep.trial, rep.seed = i, aseed
    return rep.to_json()


def _run_trials(jobs: list, workers: int) -> list[CampaignReport]:
    if workers <= 1 or len(jobs) < 2:
        out = [_trial(j) for j in jobs]
    else:
        import multiprocessing as mp

        ctx = mp.get_context("fork")
        chunk = max(1, len(jobs) // (4 * workers))
        with ctx.Pool(workers) as pool:
            out = pool.map(_trial, jobs, chunksize=chunk)
    return [CampaignReport.from_json(s) for s in out]


@dataclass
class CampaignResult:
    config: dict
    reports: list[CampaignReport]
    summary: dict
    warnings: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"tool": "dcrlab", "version": __version__, "config": self.config,
                           "summary": self.summary, "warnings": self.warnings,
                           "reports": [json.loads(r.to_json()) for r in self.reports]}, indent=1)


def summarize(reports: list[CampaignReport], confidence: float = 0.95) -> dict:
    n = len(reports)
    k = sum(r.success for r in reports)
    if n:
        ci = binomtest(k, n).proportion_ci(confidence, method="wilson")
        lo, hi = float(ci.low), float(ci.high)
    else:
        lo = hi = None
    crashes = Counter(r.reason for r in reports if r.outcome == "crash")
    return {
        "trials": n,
        "successes": k,
        "success_rate": k / n if n else None,
        "ci": [lo, hi],
        "ci_level": confidence,
        "mean_probes": float(np.mean([r.probes_used for r in reports])) if n else None,
        "outcomes": dict(sorted(Counter(r.outcome for r in reports).items())),
        "crash_reasons": dict(sorted(crashes.items())),
        "chain_reads": sum(r.chain_bytes_read > 0 for r in reports),
    }


def run_campaign(img: BinaryImage, cfg: CampaignConfig, bitmaps: PermissionBitmaps | None = None,
                 trials: int | None = None, workers: int | None = None) -> CampaignResult:
    """Run the configured trials; records come back ordered by trial index."""
    cfg.check()
    trials = cfg.trials if trials is None else trials
    workers = cfg.workers if workers is None else workers
    warnings = []
    if bitmaps is None and cfg.policy in ("xom-only", "bgdx"):
        bitmaps = build_profile(img, cfg.profile, cfg.seed)
    _STATE.clear()
    _STATE.update(img=img, cfg=cfg, bitmaps=bitmaps)
    eff = cfg.to_dict()
    eff["trials"], eff["workers"] = trials, workers
    if trials == 0:
        warnings.append("no trials requested; report is empty")
        return CampaignResult(eff, [], summarize([]), warnings)
    workers = min(workers, trials)
    reports = _run_trials([(i, trials, cfg.policy) for i in range(trials)], workers)
    summary = summarize(reports)
    if bitmaps is not None and cfg.policy in ("xom-only", "bgdx"):
        summary.update(_prediction(img, cfg, bitmaps, reports, trials, workers))
    return CampaignResult(eff, reports, summary, warnings)


def _prediction(img, cfg, bitmaps, reports, trials, workers) -> dict:
    probe_len = cfg.attack_budget().probe_length
    rand = _rand_for(0) if cfg.randomizations else randomize(
        img, bitmaps, RandomizationSpec(tier=cfg.tier, seed=trial_seeds(cfg.seed, 0)[0]))
    out = {
        "xom_byte_ratio": float(rand.bitmap.xom.mean()) if len(rand.bitmap) else 0.0,
        "xom_probe_ratio": analysis.window_xom_ratio(rand.bitmap, probe_len),
    }
    probes = None
    if cfg.reference_trials:
        n = min(cfg.reference_trials, trials)
        ref = _run_trials([(i, trials, "dcr-only") for i in range(n)], workers)
        ok = [r.probes_used for r in ref if r.success]
        out["reference_successes"] = len(ok)
        out["reference_trials"] = n
        if ok:
            probes = float(np.median(ok))
    if probes is not None:
        out["reference_probes"] = probes
        out["predicted_success"] = analysis.success_curve(out["xom_probe_ratio"], probes)
        if len(reports) >= 10:
            cmp = analysis.empirical_vs_analytic(reports, out["xom_probe_ratio"], probes,
                                                 random_first_probe=cfg.attack == "attack1")
            out["comparison"] = cmp.as_dict()
    return out
