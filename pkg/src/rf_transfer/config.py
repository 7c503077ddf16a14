"""INI run configuration. Schema documented in docs/config.md."""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from .analytic import MixtureFlow
from .appearance import DEFAULT_EPS, DEFAULT_TAU
from .dit import ModelConfig, ModelWeights
from .errors import ConfigError
from .scenes import SceneSpec, gen_scene
from .solvers import METHODS, SolverSpec

BACKBONES = ("dit", "hybrid")
SECTIONS = ("run", "model", "solver", "fusion", "encoder", "scene.source", "scene.reference", "mixture")


def _floats(text: str, n: int, key: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(x) for x in text.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"{key}: expected {n} numbers, got {text!r}") from None
    if len(vals) != n:
        raise ConfigError(f"{key}: expected {n} numbers, got {len(vals)}")
    return vals


def _scene(sec: configparser.SectionProxy, size: int, name: str) -> tuple[SceneSpec, int]:
    known = {"generator", "color", "color2", "period", "center", "radius", "fill",
             "fill_color", "noise", "seed"}
    unknown = set(sec) - known
    if unknown:
        raise ConfigError(f"[{name}] unknown keys {sorted(unknown)}")
    kw = {"size": (size, size)}
    try:
        for key in ("generator", "fill"):
            if key in sec:
                kw[key] = sec[key].strip()
        for key in ("color", "color2", "fill_color"):
            if key in sec:
                kw[key] = _floats(sec[key], 3, f"{name}.{key}")
        if "center" in sec:
            kw["center"] = _floats(sec["center"], 2, f"{name}.center")
        if "period" in sec:
            kw["period"] = sec.getint("period")
        for key in ("radius", "noise"):
            if key in sec:
                kw[key] = sec.getfloat(key)
        seed = sec.getint("seed", fallback=0)
    except ValueError as exc:
        raise ConfigError(f"[{name}] {exc}") from None
    return SceneSpec(**kw), seed


@dataclass
class RunConfig:
    seed: int | None = None  # None: fall back to RF_TRANSFER_SEED, then 0
    model: ModelConfig = field(default_factory=ModelConfig)
    weights_seed: int = 0
    weights_path: str | None = None
    backbone: str = "dit"
    method: str = "midpoint_reuse"
    steps: int = 16
    k: int | None = None
    fusion_enabled: bool = True
    gate_queries: bool = True
    use_appearance: bool = True
    selected_layers: list[int] | None = None
    eps_floor: float = DEFAULT_EPS
    tau: float = DEFAULT_TAU
    parallel: bool = False
    source: SceneSpec = field(default_factory=lambda: SceneSpec("blob", color=(0.8, 0.2, 0.2)))
    source_seed: int = 0
    reference: SceneSpec = field(default_factory=lambda: SceneSpec(
        "blob", color=(0.2, 0.4, 0.9), fill="stripes", fill_color=(0.9, 0.9, 0.2)))
    reference_seed: int = 1
    mixture_components: list[str] = field(default_factory=lambda: ["stripes", "dots", "flat"])
    mixture_sigma: float = 0.1

    def solver(self) -> SolverSpec:
        return SolverSpec(self.method, self.steps)

    def load_weights(self) -> ModelWeights:
        if self.weights_path:
            w = ModelWeights.load(self.weights_path)
            if w.config != self.model:
                raise ConfigError("weights file config differs from [model] section")
            return w
        return ModelWeights.init(self.model, self.weights_seed)

    def prior(self):
        """Analytic mixture added to the network velocity for the hybrid backbone."""
        if self.backbone != "hybrid":
            return None
        hw = self.model.latent_hw
        means = [gen_scene(SceneSpec(g, (hw, hw), color=(0.9, 0.6, 0.2), color2=(0.1, 0.2, 0.5)))[0]
                 for g in self.mixture_components]
        return MixtureFlow(means, sigma=self.mixture_sigma)

    def scenes(self):
        return gen_scene(self.source, self.source_seed), gen_scene(self.reference, self.reference_seed)


def _bool(sec, key, default):
    try:
        return sec.getboolean(key, fallback=default)
    except ValueError:
        raise ConfigError(f"[{sec.name}] {key} must be a boolean") from None


def parse_config(text: str, origin: str = "<string>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=origin)
    except configparser.Error as exc:
        raise ConfigError(f"{origin}: {exc}".replace("\n", " ")) from None
    bad = [s for s in cp.sections() if s not in SECTIONS]
    if bad:
        raise ConfigError(f"{origin}: unknown sections {bad}")
    cfg = RunConfig()
    try:
        if cp.has_section("run"):
            s = cp["run"]
            cfg.seed = s.getint("seed", fallback=cfg.seed)
            cfg.parallel = _bool(s, "parallel", cfg.parallel)
        if cp.has_section("model"):
            s = dict(cp["model"])
            cfg.backbone = s.pop("backbone", cfg.backbone).strip()
            cfg.weights_seed = int(s.pop("weights_seed", cfg.weights_seed))
            cfg.weights_path = s.pop("weights", None)
            types = {f.name: f.type for f in fields(ModelConfig)}
            conv = {}
            for key, val in s.items():
                if key not in types:
                    raise ConfigError(f"[model] unknown key {key!r}")
                conv[key] = float(val) if types[key] in (float, "float") else int(val)
            cfg.model = ModelConfig(**conv)
        if cp.has_section("solver"):
            s = cp["solver"]
            cfg.method = s.get("method", cfg.method).strip()
            cfg.steps = s.getint("steps", fallback=cfg.steps)
            if "k" in s:
                cfg.k = s.getint("k")
        if cp.has_section("fusion"):
            s = cp["fusion"]
            cfg.fusion_enabled = _bool(s, "enabled", cfg.fusion_enabled)
            cfg.gate_queries = _bool(s, "gate_queries", cfg.gate_queries)
            cfg.use_appearance = _bool(s, "appearance", cfg.use_appearance)
            layers = s.get("layers", "default").strip()
            if layers != "default":
                cfg.selected_layers = [int(x) for x in layers.replace(",", " ").split()]
        if cp.has_section("encoder"):
            s = cp["encoder"]
            cfg.eps_floor = s.getfloat("eps_floor", fallback=cfg.eps_floor)
            cfg.tau = s.getfloat("tau", fallback=cfg.tau)
        if cp.has_section("mixture"):
            s = cp["mixture"]
            cfg.mixture_sigma = s.getfloat("sigma", fallback=cfg.mixture_sigma)
            if "components" in s:
                cfg.mixture_components = s["components"].replace(",", " ").split()
    except ValueError as exc:
        raise ConfigError(f"{origin}: {exc}") from None
    hw = cfg.model.latent_hw
    for name, attr in (("scene.source", "source"), ("scene.reference", "reference")):
        if cp.has_section(name):
            spec, seed = _scene(cp[name], hw, name)
            setattr(cfg, attr, spec)
            setattr(cfg, f"{attr}_seed", seed)
        else:
            setattr(cfg, attr, SceneSpec(**{**getattr(cfg, attr).__dict__, "size": (hw, hw)}))
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if cfg.backbone not in BACKBONES:
        raise ConfigError(f"backbone must be one of {BACKBONES}, got {cfg.backbone!r}")
    if cfg.method not in METHODS:
        raise ConfigError(f"solver method must be one of {METHODS}, got {cfg.method!r}")
    if cfg.steps < 1:
        raise ConfigError(f"solver steps must be >= 1, got {cfg.steps}")
    if not 0.0 <= cfg.eps_floor <= 1.0:
        raise ConfigError(f"eps_floor {cfg.eps_floor} outside [0, 1]")
    if not 0.0 < cfg.tau <= 1.0:
        raise ConfigError(f"tau {cfg.tau} outside (0, 1]")
    if cfg.mixture_sigma <= 0:
        raise ConfigError("mixture sigma must be > 0")


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    return parse_config(text, str(p))
