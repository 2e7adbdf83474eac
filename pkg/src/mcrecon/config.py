"""Run configuration: an INI file with one section per component.

    [run]       preset, seed, output_dir
    [scene]     duration, fps, static_extent, terrain_*, dynamic_object
    [rig]       width, height, cameras
    [noise]     NoiseSpec fields
    [tracker]   TrackerConfig fields
    [refine]    RefineConfig fields
    [ablation]  disable_st_graph, disable_spatial, disable_wb_init,
                skip_phase1, skip_phase2, joint_opt

Missing keys keep their defaults. Unknown sections or keys, malformed
values and violated invariants raise :class:`InvalidConfig` carrying the
dotted field name and, when it came from a file, the line number.
"""

import configparser
import hashlib
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import InvalidConfig
from .presets import PRESETS, default_intrinsics, make_rig, make_scene
from .refinement import RefineConfig
from .synthetic import CameraRigSpec, CameraSpec, NoiseSpec, SceneSpec, TerrainSpec
from .tracking import TrackerConfig


@dataclass(frozen=True)
class RunSection:
    preset: str = "overlap"
    seed: int = 0
    output_dir: str = "mcr_out"


@dataclass(frozen=True)
class SceneSection:
    duration: int = 40
    fps: float = 30.0
    static_extent: float = 3.0
    terrain_amplitude: float = 0.1
    terrain_frequency: float = 4.0
    terrain_seed: int = 3
    dynamic_object: bool = True


@dataclass(frozen=True)
class RigSection:
    width: int = 64
    height: int = 48
    # keep only the first ``cameras`` cameras of the preset; 0 keeps all
    cameras: int = 0


@dataclass(frozen=True)
class Ablation:
    disable_st_graph: bool = False
    disable_spatial: bool = False
    disable_wb_init: bool = False
    skip_phase1: bool = False
    skip_phase2: bool = False
    joint_opt: bool = False


SECTIONS = {
    "run": RunSection,
    "scene": SceneSection,
    "rig": RigSection,
    "noise": NoiseSpec,
    "tracker": TrackerConfig,
    "refine": RefineConfig,
    "ablation": Ablation,
}


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    scene: SceneSection = field(default_factory=SceneSection)
    rig: RigSection = field(default_factory=RigSection)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    ablation: Ablation = field(default_factory=Ablation)

    @property
    def seed(self):
        return self.run.seed

    @property
    def output_dir(self):
        return Path(self.run.output_dir)

    def scene_spec(self):
        base = make_scene(self.run.preset, self.scene.duration)
        terrain = TerrainSpec(
            amplitude=self.scene.terrain_amplitude,
            frequency=self.scene.terrain_frequency,
            seed=self.scene.terrain_seed,
        )
        return SceneSpec(
            terrain=terrain,
            static_extent=self.scene.static_extent,
            dynamic_object=base.dynamic_object if self.scene.dynamic_object else None,
            duration=self.scene.duration,
            fps=self.scene.fps,
        )

    def rig_spec(self):
        rig = make_rig(self.run.preset, self.rig.width, self.rig.height)
        K = default_intrinsics(self.rig.width, self.rig.height)
        cams = rig.cameras[: self.rig.cameras] if self.rig.cameras else rig.cameras
        return CameraRigSpec(tuple(CameraSpec(K, c.waypoints, c.targets) for c in cams), rig.overlap_mode)

    def tracker_config(self):
        """Tracker settings with the ablation flags folded in."""
        a = self.ablation
        return replace(
            self.tracker,
            use_spatial=self.tracker.use_spatial and not (a.disable_spatial or a.disable_st_graph),
            use_st=self.tracker.use_st and not a.disable_st_graph,
            wide_baseline_init=self.tracker.wide_baseline_init and not a.disable_wb_init,
        )

    def with_overrides(self, **dotted):
        """``cfg.with_overrides(**{"run.seed": 3})`` with values already typed."""
        cfg = self
        for key, value in dotted.items():
            section, name = key.split(".", 1)
            cfg = _replace_checked(cfg, section, name, value, None)
        return cfg

    def to_ini(self, include_output=True):
        out = []
        for section in SECTIONS:
            obj = getattr(self, section)
            out.append(f"[{section}]")
            for f in fields(obj):
                if not f.init or (section == "run" and f.name == "output_dir" and not include_output):
                    continue
                out.append(f"{f.name} = {_render(getattr(obj, f.name))}")
            out.append("")
        return "\n".join(out)

    def config_hash(self):
        """Digest of every setting except the output location."""
        return hashlib.sha256(self.to_ini(include_output=False).encode("utf-8")).hexdigest()[:16]


def _render(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_render(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(raw, default, key, line):
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"expected a boolean, got {text!r}")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(x) for x in text.split(",") if x.strip()) if text else ()
        return text
    except ValueError as exc:
        raise InvalidConfig(key, str(exc) if "expected" in str(exc) else f"cannot parse {text!r}", line) from None


def _replace_checked(cfg, section, name, value, line):
    if section not in SECTIONS:
        raise InvalidConfig(section, "unknown section", line)
    obj = getattr(cfg, section)
    if name not in {f.name for f in fields(obj) if f.init}:
        raise InvalidConfig(f"{section}.{name}", "unknown key", line)
    try:
        new = replace(obj, **{name: value})
    except (ValueError, TypeError) as exc:
        raise InvalidConfig(f"{section}.{name}", str(exc), line) from None
    return replace(cfg, **{section: new})


_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")
_KEY_RE = re.compile(r"^\s*([^=:#;\s\[][^=:]*?)\s*[=:]")


def _line_map(text):
    lines, section = {}, None
    for no, line in enumerate(text.splitlines(), 1):
        m = _SECTION_RE.match(line)
        if m:
            section = m.group(1).strip()
            lines.setdefault((section, None), no)
            continue
        m = _KEY_RE.match(line)
        if m and section is not None:
            lines.setdefault((section, m.group(1).strip().lower()), no)
    return lines


def parse_config(text, base=None):
    """Parse INI ``text`` over ``base`` (defaults when omitted) and validate."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",), comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.DuplicateOptionError as exc:
        raise InvalidConfig(f"{exc.section}.{exc.option}", "duplicate key", exc.lineno) from None
    except configparser.DuplicateSectionError as exc:
        raise InvalidConfig(exc.section, "duplicate section", exc.lineno) from None
    except configparser.MissingSectionHeaderError as exc:
        raise InvalidConfig("<file>", "key outside any section", exc.lineno) from None
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else None
        raise InvalidConfig("<file>", "malformed line", line) from None
    lines = _line_map(text)
    cfg = base or RunConfig()
    for section in parser.sections():
        if section not in SECTIONS:
            raise InvalidConfig(section, "unknown section", lines.get((section, None)))
        for name, raw in parser.items(section):
            line = lines.get((section, name))
            key = f"{section}.{name}"
            obj = getattr(cfg, section)
            defaults = {f.name: getattr(obj, f.name) for f in fields(obj) if f.init}
            if name not in defaults:
                raise InvalidConfig(key, "unknown key", line)
            cfg = _replace_checked(cfg, section, name, _coerce(raw, defaults[name], key, line), line)
    return validate(cfg, lines)


def validate(cfg, lines=None):
    lines = lines or {}

    def fail(section, name, message):
        raise InvalidConfig(f"{section}.{name}", message, lines.get((section, name)))

    if cfg.run.preset not in PRESETS:
        fail("run", "preset", f"unknown preset {cfg.run.preset!r}; choose from {', '.join(PRESETS)}")
    if cfg.run.seed < 0:
        fail("run", "seed", "must be a non-negative integer")
    if not cfg.run.output_dir:
        fail("run", "output_dir", "must not be empty")
    if not cfg.scene.fps > 0:
        fail("scene", "fps", f"must be positive, got {cfg.scene.fps!r}")
    if cfg.scene.duration < cfg.tracker.n_init:
        fail("scene", "duration", f"must be at least tracker.n_init = {cfg.tracker.n_init}")
    if not cfg.scene.static_extent > 0:
        fail("scene", "static_extent", "must be positive")
    if cfg.scene.terrain_amplitude < 0:
        fail("scene", "terrain_amplitude", "must be >= 0")
    for name in ("width", "height"):
        if getattr(cfg.rig, name) < 4:
            fail("rig", name, "must be at least 4 pixels")
    n_preset = len(make_rig(cfg.run.preset).cameras)
    if not 0 <= cfg.rig.cameras <= n_preset:
        fail("rig", "cameras", f"must lie in [0, {n_preset}] for preset {cfg.run.preset!r}")
    if cfg.tracker.max_edges is not None and cfg.tracker.max_edges < 1:
        fail("tracker", "max_edges", "must be positive")
    return cfg


def load_config(path=None, **overrides):
    """Read ``path`` (defaults when ``None``) and apply dotted ``overrides``."""
    cfg = RunConfig()
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        cfg = parse_config(text)
    if overrides:
        cfg = validate(cfg.with_overrides(**overrides))
    return cfg


def dump_config(cfg, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(cfg.to_ini(), encoding="utf-8")


__all__ = [
    "RunConfig",
    "RunSection",
    "SceneSection",
    "RigSection",
    "Ablation",
    "SECTIONS",
    "parse_config",
    "validate",
    "load_config",
    "dump_config",
]
