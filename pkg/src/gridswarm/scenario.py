"""Feeder and scenario file formats (JSON, ``"format": 1``).

Feeder file::

    {
      "format": 1,
      "name": "chain12",
      "v0": 1.0,
      "buses": 12,                              # count, or explicit id list
      "lines": [[0, 1, 0.01, 0.02], ...],       # [parent, child, r, x] in pu
      "loads": [{"bus": 3, "p": 0.02, "q": 0.01}],
      "ders": [{"bus": 5, "s_cap": 0.3, "p_avail": 0.25, "name": "pv5"}],
      "meters": [{"bus": 7, "kind": "sampled", "period": 900}]
    }

Lines may also be objects ``{"from": 0, "to": 1, "r": 0.01, "x": 0.02}``.
A scenario file references a feeder and adds clusters, profiles, controller
gains and timing; see :class:`ScenarioConfig` for the keys.
"""
from __future__ import annotations

import copy
import json
import math
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .comms import INTER_DELAY, INTRA_DELAY
from .control import PControlParams, QControlParams
from .errors import ParseError, ValidationError
from .network import DerUnit, Feeder, LoadPoint, Profile, build_network
from .sensitivity import EPS_ANCHOR, MeterRecord

FORMAT_VERSION = 1
CONTROL_MODES = ("none", "q_only", "q_and_p")
MODE_ALIASES = {"q": "q_only", "qp": "q_and_p", "none": "none",
                "q_only": "q_only", "q_and_p": "q_and_p"}


def bundled_dir() -> Path:
    return Path(str(resources.files("gridswarm") / "feeders"))


def resolve(path, base_dir=None) -> Path:
    """Find ``path`` as given, relative to ``base_dir``, or among bundled files."""
    p = Path(path)
    candidates = [p]
    if base_dir is not None and not p.is_absolute():
        candidates.append(Path(base_dir) / p)
    candidates.append(bundled_dir() / p.name)
    if p.suffix == "":
        candidates.append(bundled_dir() / (p.name + ".json"))
    for c in candidates:
        if c.is_file():
            return c
    raise FileNotFoundError(f"no such feeder or scenario file: {path}")


def _load_json(path):
    path = Path(path)
    text = path.read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno, column=exc.colno, path=str(path)) from exc


def _num(obj, key, where, default=None, lo=None):
    if key not in obj:
        if default is None:
            raise ParseError(f"{where}: missing field {key!r}")
        return default
    val = obj[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)) or not math.isfinite(val):
        raise ParseError(f"{where}: field {key!r} must be a finite number, got {val!r}")
    if lo is not None and val < lo:
        raise ValidationError(f"{where}: field {key!r} must be >= {lo}, got {val}")
    return float(val)


def _check_format(doc, path):
    if not isinstance(doc, dict):
        raise ParseError("top level must be an object", path=str(path))
    if doc.get("format") != FORMAT_VERSION:
        raise ParseError(f"unsupported or missing format {doc.get('format')!r}; expected 1",
                         path=str(path))


def feeder_from_dict(doc, path="<feeder>") -> Feeder:
    _check_format(doc, path)
    buses = doc.get("buses")
    if isinstance(buses, int):
        buses = range(buses)
    elif not isinstance(buses, list):
        raise ParseError("'buses' must be a count or a list of ids", path=str(path))
    lines = []
    for k, ln in enumerate(doc.get("lines", [])):
        where = f"lines[{k}]"
        if isinstance(ln, dict):
            try:
                frm, to = int(ln["from"]), int(ln["to"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"{where}: needs integer 'from' and 'to'") from exc
            r, x = _num(ln, "r", where), _num(ln, "x", where)
        elif isinstance(ln, list) and len(ln) == 4:
            frm, to, r, x = int(ln[0]), int(ln[1]), float(ln[2]), float(ln[3])
        else:
            raise ParseError(f"{where}: expected [from, to, r, x] or an object")
        lines.append((frm, to, r, x))
    net = build_network(buses, lines, v0=float(doc.get("v0", 1.0)))

    loads = []
    for k, ld in enumerate(doc.get("loads", [])):
        where = f"loads[{k}]"
        loads.append(LoadPoint(_bus(ld, where, net), _num(ld, "p", where), _num(ld, "q", where, 0.0)))
    ders = []
    for k, dd in enumerate(doc.get("ders", [])):
        where = f"ders[{k}]"
        s_cap = _num(dd, "s_cap", where, lo=0.0)
        p_avail = _num(dd, "p_avail", where, lo=0.0)
        if s_cap < p_avail:
            raise ValidationError(f"{where}: s_cap {s_cap} below p_avail {p_avail} at bus {dd.get('bus')}")
        ders.append(DerUnit(_bus(dd, where, net), s_cap, p_avail, p_g=p_avail,
                            name=dd.get("name")))
    meters = [_meter(m, f"meters[{k}]", net) for k, m in enumerate(doc.get("meters", []))]
    return Feeder(net, ders, loads, meters, name=doc.get("name"))


def _bus(obj, where, net):
    try:
        bus = int(obj["bus"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{where}: missing or non-integer 'bus'") from exc
    if not 0 <= bus < net.n:
        raise ValidationError(f"{where}: unknown bus {bus}")
    return bus


def _meter(obj, where, net):
    kind = obj.get("kind", "realtime")
    if kind not in ("realtime", "sampled"):
        raise ValidationError(f"{where}: unknown meter kind {kind!r}")
    return MeterRecord(_bus(obj, where, net), kind, float(obj.get("period", 0.0)))


def parse_feeder(path) -> Feeder:
    """Parse and validate a feeder file; see the module docstring for the format."""
    path = Path(path)
    return feeder_from_dict(_load_json(path), path)


@dataclass
class ScenarioConfig:
    """Parsed run description.

    Keys mirror the scenario file: ``feeder`` (path), ``duration``,
    ``dt_pf``/``dt_ctrl``/``dt_round`` (s), ``clusters`` (bus lists),
    ``comm_edges`` and ``cluster_links`` (optional edge lists), ``delays``
    (``intra``/``inter``), ``meters`` (extra meter entries),
    ``der_profiles``/``load_profiles`` (``{"*" or bus: [[t, scale], ...]}``),
    ``penetration`` (rescales available DER power to this multiple of total
    load), ``q_control``/``p_control`` (gain dicts, optionally overridden per
    bus in ``agent_params``), ``forgetting`` (the max/min protocol's
    forgetting increment per round) and ``extrema_horizon`` (age in seconds
    after which it applies; default: the graph's latency diameter with one
    round of forwarding per hop, plus one round), ``inference`` (``reading``, ``eps_anchor``),
    ``power_factor`` (fixed DER power factor when control is off; absorbing),
    ``control_mode``, ``seed``, ``load_noise``, ``outputs`` and ``workers``.
    """

    feeder: str
    duration: float = 30.0
    dt_pf: float = 0.1
    dt_ctrl: float = 0.01
    dt_round: float = 0.01
    clusters: list = field(default_factory=list)
    comm_edges: list | None = None
    cluster_links: list | None = None
    delays: dict = field(default_factory=lambda: {"intra": INTRA_DELAY, "inter": INTER_DELAY})
    meters: list = field(default_factory=list)
    der_profiles: dict = field(default_factory=dict)
    load_profiles: dict = field(default_factory=dict)
    penetration: float | None = None
    q_control: dict = field(default_factory=dict)
    p_control: dict = field(default_factory=dict)
    agent_params: dict = field(default_factory=dict)
    forgetting: float = 0.01
    extrema_horizon: float | None = None
    inference: dict = field(default_factory=dict)
    power_factor: float = 1.0
    control_mode: str = "q_and_p"
    seed: int = 0
    load_noise: float = 0.0
    outputs: dict = field(default_factory=dict)
    workers: int = 1
    name: str | None = None
    base_dir: str | None = None

    def __post_init__(self):
        self.control_mode = MODE_ALIASES.get(self.control_mode, self.control_mode)
        self.validate()

    def validate(self):
        if self.control_mode not in CONTROL_MODES:
            raise ValidationError(f"control_mode must be one of {CONTROL_MODES}")
        if not self.duration > 0:
            raise ValidationError("duration must be positive")
        if not 0 < self.dt_ctrl <= self.dt_round <= self.dt_pf:
            raise ValidationError("need 0 < dt_ctrl <= dt_round <= dt_pf")
        for a, b in (("dt_pf", "dt_round"), ("dt_round", "dt_ctrl")):
            ratio = getattr(self, a) / getattr(self, b)
            if abs(ratio - round(ratio)) > 1e-9:
                raise ValidationError(f"{a} must be an integer multiple of {b}")
        if not 0 <= self.forgetting < 1:
            raise ValidationError("forgetting must lie in [0, 1)")
        if not 0 < self.power_factor <= 1:
            raise ValidationError("power_factor must lie in (0, 1]")
        for key in self.q_control:
            if key not in QControlParams.__dataclass_fields__:
                raise ValidationError(f"unknown q_control key {key!r}")
        for key in self.p_control:
            if key not in PControlParams.__dataclass_fields__:
                raise ValidationError(f"unknown p_control key {key!r}")

    @property
    def feeder_path(self) -> Path:
        return resolve(self.feeder, self.base_dir)

    def q_params(self, bus=None) -> QControlParams:
        kw = dict(self.q_control)
        kw.update(self.agent_params.get(str(bus), {}).get("q_control", {}))
        return QControlParams(**kw)

    def p_params(self, bus=None) -> PControlParams:
        kw = dict(self.p_control)
        kw.update(self.agent_params.get(str(bus), {}).get("p_control", {}))
        return PControlParams(**kw)

    @property
    def inference_reading(self) -> str:
        return self.inference.get("reading", "difference")

    @property
    def eps_anchor(self) -> float:
        return float(self.inference.get("eps_anchor", EPS_ANCHOR))

    def replace(self, **changes) -> "ScenarioConfig":
        new = copy.deepcopy(self)
        for k, v in changes.items():
            if not hasattr(new, k):
                raise AttributeError(k)
            setattr(new, k, v)
        new.__post_init__()
        return new

    @classmethod
    def from_dict(cls, doc, base_dir=None, path="<scenario>") -> "ScenarioConfig":
        _check_format(doc, path)
        known = set(cls.__dataclass_fields__) - {"base_dir"}
        unknown = set(doc) - known - {"format"}
        if unknown:
            raise ParseError(f"unknown scenario keys: {sorted(unknown)}", path=str(path))
        if "feeder" not in doc:
            raise ParseError("scenario needs a 'feeder' entry", path=str(path))
        kw = {k: v for k, v in doc.items() if k in known}
        return cls(base_dir=None if base_dir is None else str(base_dir), **kw)

    def load_feeder(self) -> Feeder:
        """Parse the feeder and apply the scenario's meters, profiles and penetration."""
        feeder = parse_feeder(self.feeder_path)
        net = feeder.network
        for k, m in enumerate(self.meters):
            rec = _meter(m, f"scenario meters[{k}]", net)
            feeder.meters = [old for old in feeder.meters if old.bus != rec.bus] + [rec]
        der_default = self.der_profiles.get("*")
        for d in feeder.ders:
            pts = self.der_profiles.get(str(d.bus), der_default)
            if pts is not None:
                d.profile = Profile(pts)
        load_default = self.load_profiles.get("*")
        for ld in feeder.loads:
            pts = self.load_profiles.get(str(ld.bus), load_default)
            if pts is not None:
                ld.profile = Profile(pts)
        if self.penetration is not None:
            set_penetration(feeder, self.penetration)
        return feeder


def set_penetration(feeder: Feeder, level: float):
    """Rescale every DER so total available power is ``level`` x total base load.

    Inverter ratings scale with the available power so ``s_cap / p_avail``
    is preserved.
    """
    total = sum(d.p_avail for d in feeder.ders)
    load = sum(ld.p_d for ld in feeder.loads)
    if total <= 0:
        raise ValidationError("feeder has no DER capacity to scale")
    k = level * load / total
    for d in feeder.ders:
        d.p_avail *= k
        d.s_cap *= k
        d.p_g = d.p_avail


def load_scenario(path) -> ScenarioConfig:
    path = resolve(path)
    return ScenarioConfig.from_dict(_load_json(path), base_dir=path.parent, path=path)


def dump_feeder(feeder: Feeder, name=None) -> dict:
    """Inverse of :func:`feeder_from_dict` (base values only)."""
    net = feeder.network
    return {
        "format": FORMAT_VERSION,
        "name": name or feeder.name,
        "v0": net.v0,
        "buses": net.n,
        "lines": [[ln.from_bus, ln.to_bus, ln.r, ln.x] for ln in net.lines],
        "loads": [{"bus": ld.bus, "p": ld.p_d, "q": ld.q_d} for ld in feeder.loads],
        "ders": [
            {"bus": d.bus, "s_cap": d.s_cap, "p_avail": d.p_avail, **({"name": d.name} if d.name else {})}
            for d in feeder.ders
        ],
        "meters": [
            {"bus": m.bus, "kind": m.kind, **({"period": m.period} if m.kind == "sampled" else {})}
            for m in feeder.meters
        ],
    }


def write_json(doc, path):
    with open(path, "w", newline="\n") as fh:
        json.dump(doc, fh, indent=1, sort_keys=False)
        fh.write("\n")
    return os.fspath(path)
