"""Run configuration: one JSON document drives every command.

The schema is validated before any work; unknown keys are rejected by full
path so typos fail loudly.  A service template expands deterministically
(from the global seed) into the per-service generator specs and policies of
the default corpus.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .drift import LsddConfig, WindowConfig
from .pattern import PatternConfig
from .plan import ServicePolicy
from .seeding import rng_for
from .sim import LatencyModel, SimConfig, SimMode
from .synth import (ChangeRateSpec, GenSpec, ServiceGenSpec, UpgradeEvent,
                    UpgradeSampling)
from .trace import FleetEntry, MachineFleet

MINUTES_PER_DAY = 1440


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ServiceTemplate:
    """Deterministic per-service parameter draws for a synthetic corpus."""

    count: int = 50
    base_total_rps: tuple[float, float] = (3000.0, 20000.0)   # log-uniform range
    daily_amplitude: tuple[float, float] = (0.2, 0.35)
    noise_cv: float = 0.03
    base_rue: tuple[float, float] = (2.0, 6.0)
    usage_noise_cv: float = 0.01
    u_star_range: tuple[float, float] = (0.4, 0.7)
    red_profile: str = "production_envelope"   # or "fixed"
    fixed_red: dict[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class GenSection:
    days: int = 60
    fleet: tuple[FleetEntry, ...] = (
        FleetEntry("m-std", 140, 64, True),
        FleetEntry("m-alt", 90, 48, False),
    )
    true_red: dict[str, float] = field(default_factory=lambda: {"m-std": 1.0, "m-alt": 1.15})
    services: tuple[dict, ...] = ()
    service_template: ServiceTemplate | None = None
    upgrades: UpgradeSampling | tuple[UpgradeEvent, ...] = field(
        default_factory=UpgradeSampling)


@dataclass(frozen=True)
class RunConfig:
    global_seed: int = 0
    output_dir: str = "out"
    gen: GenSection = field(default_factory=GenSection)
    window: WindowConfig = field(default_factory=WindowConfig)
    lsdd: LsddConfig = field(default_factory=LsddConfig)
    pattern: PatternConfig = field(default_factory=PatternConfig)
    forecaster_method: str = "seasonal_naive_trend"
    policy: ServicePolicy = field(default_factory=ServicePolicy)
    policy_overrides: dict[str, dict] = field(default_factory=dict)
    latency: LatencyModel = field(default_factory=LatencyModel)
    sim: SimConfig = field(default_factory=SimConfig)
    modes: tuple[str, ...] = ("humas", "fixed_relearn(8)", "no_normalize", "static")


def _check_keys(data: dict, allowed, path: str) -> None:
    unknown = set(data) - set(allowed)
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"unknown config key {path + key!r}")


def _build_dataclass(cls, data: dict, path: str):
    names = {f.name for f in dataclasses.fields(cls)}
    _check_keys(data, names, path)
    coerced = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        val = data[f.name]
        if isinstance(val, list):
            val = tuple(val)
        coerced[f.name] = val
    try:
        return cls(**coerced)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value under {path.rstrip('.')!r}: {exc}") from exc


_TOP_KEYS = ("global_seed", "output_dir", "gen", "window", "lsdd", "pattern",
             "forecaster_method", "policy", "policy_overrides", "latency",
             "sim", "modes")
_GEN_KEYS = ("days", "fleet", "true_red", "services", "service_template", "upgrades")


def parse_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    _check_keys(doc, _TOP_KEYS, "")

    kwargs: dict = {}
    for key in ("global_seed", "output_dir", "forecaster_method"):
        if key in doc:
            kwargs[key] = doc[key]
    if "modes" in doc:
        kwargs["modes"] = tuple(doc["modes"])
        for m in kwargs["modes"]:
            SimMode.parse(m)
    if "window" in doc:
        kwargs["window"] = _build_dataclass(WindowConfig, doc["window"], "window.")
    if "lsdd" in doc:
        kwargs["lsdd"] = _build_dataclass(LsddConfig, doc["lsdd"], "lsdd.")
    if "pattern" in doc:
        kwargs["pattern"] = _build_dataclass(PatternConfig, doc["pattern"], "pattern.")
    if "policy" in doc:
        kwargs["policy"] = _build_dataclass(ServicePolicy, doc["policy"], "policy.")
    if "policy_overrides" in doc:
        overrides = doc["policy_overrides"]
        if not isinstance(overrides, dict):
            raise ConfigError("policy_overrides must map service_id to policy fields")
        for sid, fields_ in overrides.items():
            _build_dataclass(ServicePolicy, fields_, f"policy_overrides.{sid}.")
        kwargs["policy_overrides"] = overrides
    if "latency" in doc:
        kwargs["latency"] = _build_dataclass(LatencyModel, doc["latency"], "latency.")
    if "sim" in doc:
        sim = dict(doc["sim"])
        if "eval_start_day" in sim:
            sim["eval_start_min"] = int(sim.pop("eval_start_day") * MINUTES_PER_DAY)
        kwargs["sim"] = _build_dataclass(SimConfig, sim, "sim.")
    if "gen" in doc:
        gen = doc["gen"]
        _check_keys(gen, _GEN_KEYS, "gen.")
        gkw: dict = {}
        if "days" in gen:
            gkw["days"] = gen["days"]
        if "fleet" in gen:
            gkw["fleet"] = tuple(
                _build_dataclass(FleetEntry, e, f"gen.fleet[{i}].")
                for i, e in enumerate(gen["fleet"]))
        if "true_red" in gen:
            gkw["true_red"] = dict(gen["true_red"])
        if "services" in gen:
            gkw["services"] = tuple(gen["services"])
            for i, svc in enumerate(gen["services"]):
                _build_dataclass(ServiceGenSpec, svc, f"gen.services[{i}].")
        if "service_template" in gen:
            gkw["service_template"] = _build_dataclass(
                ServiceTemplate, gen["service_template"], "gen.service_template.")
        if "upgrades" in gen:
            ups = gen["upgrades"]
            if isinstance(ups, list):
                gkw["upgrades"] = tuple(
                    _build_dataclass(UpgradeEvent, e, f"gen.upgrades[{i}].")
                    for i, e in enumerate(ups))
            else:
                up_keys = {f.name for f in dataclasses.fields(UpgradeSampling)}
                _check_keys(ups, up_keys, "gen.upgrades.")
                ups = dict(ups)
                if "change_rate" in ups:
                    ups["change_rate"] = _build_dataclass(
                        ChangeRateSpec, ups["change_rate"], "gen.upgrades.change_rate.")
                gkw["upgrades"] = _build_dataclass(
                    UpgradeSampling, ups, "gen.upgrades.")
        kwargs["gen"] = GenSection(**gkw)
    return RunConfig(**kwargs)


def load_config(path: str | Path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return parse_config(doc)


def config_digest(cfg: RunConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def config_to_dict(obj) -> object:
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: config_to_dict(getattr(obj, f.name))
                for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(k): config_to_dict(v) for k, v in sorted(obj.items())}
    if isinstance(obj, (list, tuple)):
        return [config_to_dict(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# Corpus construction from the template


def _draw_red(rng, profile: str, fleet: MachineFleet,
              fixed: dict[str, float]) -> dict[str, float]:
    """Per-service efficiency factors for non-standard types.

    The production envelope mirrors observed fleet behavior: most services
    run somewhat less efficiently on the alternate hardware, a few run
    better, a few much worse.
    """
    red = {fleet.standard_type: 1.0}
    for entry in fleet.entries:
        if entry.is_standard:
            continue
        if profile == "fixed":
            red[entry.machine_type] = float(fixed.get(entry.machine_type, 1.0))
            continue
        u = rng.uniform()
        if u < 0.84:
            red[entry.machine_type] = float(rng.uniform(1.005, 1.25))
        elif u < 0.92:
            red[entry.machine_type] = float(rng.uniform(0.865, 0.974))
        else:
            red[entry.machine_type] = float(rng.uniform(1.25, 1.45))
    return red


def expand_services(cfg: RunConfig) -> tuple[tuple[ServiceGenSpec, ...],
                                             dict[str, ServicePolicy]]:
    """Materialize per-service generator specs and policies.

    Explicit `gen.services` entries pass through; otherwise the template
    draws every parameter deterministically from the global seed.  Initial
    container counts are sized so a service starts near its planned
    utilization target.
    """
    fleet = MachineFleet(cfg.gen.fleet)
    policies: dict[str, ServicePolicy] = {}
    if cfg.gen.services:
        specs = []
        for svc in cfg.gen.services:
            spec = _build_dataclass(ServiceGenSpec, dict(svc), "gen.services.")
            specs.append(spec)
            policies[spec.service_id] = _policy_for(cfg, spec.service_id)
        return tuple(specs), policies

    tmpl = cfg.gen.service_template or ServiceTemplate()
    specs = []
    core_share = {e.machine_type: e.machine_count * e.cores_per_machine
                  for e in fleet.entries}
    total_cores = sum(core_share.values())
    for k in range(tmpl.count):
        sid = f"svc-{k:03d}"
        rng = rng_for(cfg.global_seed, "template", sid)
        lo, hi = tmpl.base_total_rps
        base_rps = float(math.exp(rng.uniform(math.log(lo), math.log(hi))))
        amplitude = float(rng.uniform(*tmpl.daily_amplitude))
        base_rue = float(rng.uniform(*tmpl.base_rue))
        u_star = float(rng.uniform(*tmpl.u_star_range))
        red = _draw_red(rng, tmpl.red_profile, fleet, tmpl.fixed_red)
        policy = dataclasses.replace(cfg.policy, u_star=u_star)
        policies[sid] = _policy_for(cfg, sid, policy)
        peak_usage = base_rps * (1.0 + amplitude) * base_rue
        n0 = max(1, math.ceil(peak_usage * (1.0 + policy.psi)
                              / (policy.u_star * policy.r_std_mcore)))
        containers = {}
        remaining = n0
        for i, entry in enumerate(fleet.entries):
            if i == len(fleet.entries) - 1:
                containers[entry.machine_type] = remaining
            else:
                share = round(n0 * core_share[entry.machine_type] / total_cores)
                share = min(share, remaining)
                containers[entry.machine_type] = share
                remaining -= share
        specs.append(ServiceGenSpec(
            service_id=sid, base_total_rps=base_rps, daily_amplitude=amplitude,
            noise_cv=tmpl.noise_cv, base_rue=base_rue,
            containers_per_type=containers, usage_noise_cv=tmpl.usage_noise_cv,
            true_red=red))
    return tuple(specs), policies


def _policy_for(cfg: RunConfig, sid: str,
                base: ServicePolicy | None = None) -> ServicePolicy:
    policy = base or cfg.policy
    override = cfg.policy_overrides.get(sid)
    if override:
        policy = dataclasses.replace(policy, **override)
    return policy


def build_gen_spec(cfg: RunConfig) -> tuple[GenSpec, dict[str, ServicePolicy]]:
    services, policies = expand_services(cfg)
    fleet = MachineFleet(cfg.gen.fleet)
    spec = GenSpec(seed=cfg.global_seed, days=cfg.gen.days, services=services,
                   fleet=fleet, true_red=dict(cfg.gen.true_red),
                   upgrades=cfg.gen.upgrades)
    return spec, policies
