"""Model in, RSS configuration and analysis report out."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .keygen import (
    DistributionScore,
    FieldsetUnavailable,
    KeySearchConfig,
    VerificationReport,
    score_distribution,
    select_fieldsets,
    synthesize_keys,
    verify_keys,
)
from .nf.model import NfModel
from .nf.paths import enumerate_paths
from .parsim.executors import lock_mode_bundle
from .rss import NicProfile, RssConfigBundle, default_profile
from .sharding import (
    PairConstraintSet,
    Reason,
    ShardingSolution,
    build_report,
    emit_constraints,
    filter_readonly,
    solve_sharding,
)

STRATEGIES = ("auto", "shared-nothing", "locks")
JSON_BEGIN = "----- BEGIN ANALYSIS JSON -----"
JSON_END = "----- END ANALYSIS JSON -----"

EXIT_OK, EXIT_ERROR, EXIT_FALLBACK = 0, 1, 2


class AnalysisRefused(RuntimeError):
    """Shared-nothing was demanded but the model cannot be sharded."""

    def __init__(self, message: str, report: "AnalysisReport"):
        super().__init__(message)
        self.report = report


@dataclass
class AnalysisReport:
    model: str
    strategy: str
    verdict: str  # analysis outcome: shared-nothing | no-constraints | infeasible
    mode: str  # deployed configuration: shared-nothing | locks
    seed: int
    profile: str
    reasons: list[Reason] = field(default_factory=list)
    justifications: list[Reason] = field(default_factory=list)
    sharding_fields: dict[str, tuple[str, ...]] = field(default_factory=dict)
    constraints: PairConstraintSet | None = None
    bundle: RssConfigBundle | None = None
    verification: VerificationReport | None = None
    score: DistributionScore | None = None
    paths: int = 0
    report_entries: int = 0
    note: str = ""

    @property
    def fallback(self) -> bool:
        return self.strategy == "auto" and self.mode == "locks"

    @property
    def exit_code(self) -> int:
        return EXIT_FALLBACK if self.fallback else EXIT_OK

    def to_json(self) -> dict:
        return {
            "model": self.model,
            "strategy": self.strategy,
            "verdict": self.verdict,
            "mode": self.mode,
            "seed": self.seed,
            "profile": self.profile,
            "reasons": [[r.rule, r.obj, r.text] for r in self.reasons],
            "justifications": [[r.rule, r.obj, r.text] for r in self.justifications],
            "sharding_fields": {k: list(v) for k, v in self.sharding_fields.items()},
            "constraints": self.constraints.to_json() if self.constraints is not None else None,
            "fieldsets": {n: c.fieldset.id for n, c in self.bundle.configs.items()} if self.bundle else {},
            "rss_config": self.bundle.to_text() if self.bundle else None,
            "verification": self.verification.to_dict() if self.verification else None,
            "distribution": self.score.to_dict() if self.score else None,
        }

    def to_text(self) -> str:
        lines = [f"model: {self.model}", f"strategy: {self.strategy}", f"seed: {self.seed}",
                 f"nic profile: {self.profile}",
                 f"execution tree: {self.paths} paths, {self.report_entries} stateful accesses",
                 f"verdict: {self.verdict}", f"configuration: {self.mode}"]
        if self.note:
            lines.append(f"note: {self.note}")
        if self.reasons:
            lines.append("diagnosis:")
            lines += [f"  {r}" for r in self.reasons]
        if self.justifications and self.verdict != "infeasible":
            lines.append("justification:")
            lines += [f"  {r}" for r in self.justifications]
        if self.sharding_fields:
            lines.append("sharding fields:")
            lines += [f"  {i}: {', '.join(fs)}" for i, fs in self.sharding_fields.items()]
        if self.constraints is not None:
            lines.append("constraints:")
            lines += [f"  {ln}" for ln in self.constraints.to_text().splitlines()]
        if self.bundle is not None:
            lines.append("rss keys:")
            for n, c in self.bundle.configs.items():
                lines.append(f"  {n}: fieldset {c.fieldset.id}, weight {c.key.hamming_weight()}/{c.key.bits}")
                lines.append(f"    {c.key.hex()}")
        if self.verification is not None:
            lines += self.verification.to_text().splitlines()
        if self.score is not None:
            lines.append(f"distribution: max/mean {self.score.ratio:.4f} on {len(self.score.shares)} cores "
                         f"({'accepted' if self.score.accepted else 'rejected'})")
        lines += [JSON_BEGIN, json.dumps(self.to_json(), indent=2, sort_keys=True), JSON_END]
        return "\n".join(lines) + "\n"


def parse_report(text: str) -> dict:
    """The machine-readable section of a report, with typed constraints and config."""
    try:
        body = text.split(JSON_BEGIN, 1)[1].split(JSON_END, 1)[0]
    except IndexError:
        raise ValueError("no analysis JSON section found") from None
    doc = json.loads(body)
    if doc.get("constraints") is not None:
        doc["constraints"] = PairConstraintSet.from_json(doc["constraints"])
    if doc.get("rss_config"):
        doc["rss_config"] = RssConfigBundle.from_text(doc["rss_config"])
    return doc


def solve(model: NfModel, profile: NicProfile | None = None) -> tuple[ShardingSolution, int, int]:
    tree = enumerate_paths(model, witnesses=False)
    report = filter_readonly(build_report(tree), model)
    sol = solve_sharding(report, model, profile=profile, tree=tree)
    return sol, len(tree.paths), len(report)


def analyze(model: NfModel, profile: NicProfile | None = None, strategy: str = "auto", seed: int = 0,
            config: KeySearchConfig | None = None) -> AnalysisReport:
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {', '.join(STRATEGIES)}")
    profile = profile or default_profile()
    config = config or KeySearchConfig(seed=seed)
    if config.seed != seed:
        config = KeySearchConfig(**{**config.__dict__, "seed": seed})
    sol, npaths, nentries = solve(model, profile)
    diag = sol.diagnosis
    rep = AnalysisReport(model.name, strategy, diag.verdict, "shared-nothing", seed, profile.name,
                         list(diag.reasons), list(sol.justifications), sol.sharding_fields,
                         paths=npaths, report_entries=nentries)

    def lock_mode(note: str = "") -> AnalysisReport:
        rep.mode = "locks"
        rep.note = note
        rep.bundle = lock_mode_bundle(model, config.cores, seed, profile)
        rep.score = score_distribution(rep.bundle, cores=config.score_cores, threshold=config.threshold, seed=seed)
        return rep

    if strategy == "locks":
        return lock_mode("lock-based configuration requested")
    if not diag.feasible:
        if strategy == "shared-nothing":
            raise AnalysisRefused(f"{model.name}: shared-nothing is infeasible", rep)
        return lock_mode("shared-nothing infeasible; falling back to locks")
    constraints = emit_constraints(sol, model)
    rep.constraints = constraints
    try:
        fieldsets = select_fieldsets(constraints, profile, model.interfaces)
    except FieldsetUnavailable as e:
        rep.reasons.append(Reason("R4", "-", str(e)))
        rep.verdict = "infeasible"
        if strategy == "shared-nothing":
            raise AnalysisRefused(str(e), rep) from e
        return lock_mode("no NIC fieldset covers the sharding fields; falling back to locks")
    bundle = synthesize_keys(constraints, fieldsets, config, profile)
    rep.bundle = bundle
    rep.verification = verify_keys(bundle, constraints, config.verify_samples, seed)
    rep.score = score_distribution(bundle, cores=config.score_cores, threshold=config.threshold, seed=seed)
    if not rep.verification.ok:  # would be a synthesis bug; never ship such keys
        raise RuntimeError(f"{model.name}: synthesized keys violate the constraints")
    return rep
