"""Sectioned ``key = value`` run configuration.

Every field has a default; a file only needs the keys it changes. Sections:
``scene``, ``prior``, ``sampling``, ``train``, ``loss``, ``field``, ``metrics``.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .dataset import SceneConfig
from .losses import GpcConfig, LossWeights
from .sampling import SamplingConfig
from .scenegen import PriorDepthConfig
from .trainer import FieldConfig, TrainConfig, TrainingError


class ConfigError(ValueError):
    pass


@dataclass
class MetricsConfig:
    # "se3" or "sim3" trajectory alignment for the headline ATE
    alignment: str = "se3"
    # held-out views rendered at "gt" poses or "neighbor" (optimised neighbour + true offset)
    holdout_poses: str = "gt"
    ate_threshold: float = 0.02
    rpe_delta: int = 1


@dataclass
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    prior: PriorDepthConfig = field(default_factory=lambda: PriorDepthConfig(
        s_true=1.2, k_true=0.05, noise_std=0.02, corruption_fraction=0.05))
    train: TrainConfig = field(default_factory=TrainConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)


_TRAIN_KEYS = ("epochs", "rays_per_batch", "lr_field", "lr_pose", "lr_undistort", "phase1",
               "phase2", "lr_final_frac", "seed", "checkpoint_every", "metrics_every")
_LOSS_KEYS = ("constraint", "use_reproj", "cloud_stride", "cloud_grad_undistort",
              "depth_norm", "opacity_threshold", "init_scale", "init_shift",
              "phase3_field_only")


def _parse(raw: str, default, name: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if default is None:
            return None if raw.lower() in ("", "none") else float(raw)
        if isinstance(default, (list, tuple)):
            return [float(x) for x in raw.split(",")]
        return raw
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {name}") from None


def _parse_scalar_or_list(raw: str, name: str):
    parts = [p for p in raw.split(",") if p.strip()]
    try:
        vals = [float(p) for p in parts]
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {name}") from None
    return vals[0] if len(vals) == 1 else vals


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, (list, tuple)):
        return ", ".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _apply(obj, items: dict, section: str, allowed=None):
    names = {f.name for f in fields(obj)}
    if allowed is not None:
        names &= set(allowed)
    # keys match case-insensitively (configparser lowercases them)
    by_lower = {n.lower(): n for n in names}
    upd = {}
    for given, raw in items.items():
        key = by_lower.get(given.lower())
        if key is None:
            raise ConfigError(f"unknown key {given!r} in section [{section}]")
        cur = getattr(obj, key)
        if section == "prior" and key in ("s_true", "k_true"):
            upd[key] = _parse_scalar_or_list(raw, f"{section}.{key}")
        else:
            upd[key] = _parse(raw, cur, f"{section}.{key}")
    try:
        return replace(obj, **upd)
    except (ValueError, TypeError, TrainingError) as e:
        raise ConfigError(f"[{section}] {e}") from None


def from_sections(sections: dict[str, dict[str, str]], base: RunConfig | None = None) -> RunConfig:
    cfg = RunConfig() if base is None else base
    known = {"scene", "prior", "sampling", "train", "loss", "field", "metrics"}
    for name in sections:
        if name not in known:
            raise ConfigError(f"unknown section [{name}]")
    scene = _apply(cfg.scene, sections.get("scene", {}), "scene")
    prior = _apply(cfg.prior, sections.get("prior", {}), "prior")
    metrics = _apply(cfg.metrics, sections.get("metrics", {}), "metrics")
    tr = cfg.train
    sampling = _apply(tr.sampling, sections.get("sampling", {}), "sampling")
    fld = _apply(tr.field, sections.get("field", {}), "field")
    loss_items = dict(sections.get("loss", {}))
    w_items = {k: loss_items.pop(k) for k in ("lambda1", "lambda2", "lambda3") if k in loss_items}
    g_items = {k: loss_items.pop(k) for k in ("sigma_pc", "bidirectional") if k in loss_items}
    weights = _apply(tr.weights, w_items, "loss")
    gpc = _apply(tr.gpc, g_items, "loss")
    tr = replace(tr, sampling=sampling, field=fld, weights=weights, gpc=gpc)
    tr = _apply(tr, loss_items, "loss", _LOSS_KEYS)
    tr = _apply(tr, sections.get("train", {}), "train", _TRAIN_KEYS)
    return RunConfig(scene, prior, tr, metrics)


def parse_overrides(pairs) -> dict[str, dict[str, str]]:
    """``["train.epochs=10", ...]`` into section dicts."""
    out: dict[str, dict[str, str]] = {}
    for p in pairs or ():
        if "=" not in p or "." not in p.split("=", 1)[0]:
            raise ConfigError(f"override {p!r} must look like section.key=value")
        k, v = p.split("=", 1)
        sec, key = k.split(".", 1)
        out.setdefault(sec.strip(), {})[key.strip()] = v
    return out


def load_config(path=None, overrides=None, base: RunConfig | None = None) -> RunConfig:
    sections: dict[str, dict[str, str]] = {}
    if path is not None:
        cp = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
        except configparser.Error as e:
            raise ConfigError(f"cannot parse config {path}: {e}") from None
        sections = {s: dict(cp[s]) for s in cp.sections()}
    for sec, items in (overrides or {}).items():
        sections.setdefault(sec, {}).update(items)
    return from_sections(sections, base)


def to_sections(cfg: RunConfig) -> dict[str, dict[str, str]]:
    tr = cfg.train
    d = {
        "scene": {f.name: _fmt(getattr(cfg.scene, f.name)) for f in fields(cfg.scene)},
        "prior": {f.name: _fmt(getattr(cfg.prior, f.name)) for f in fields(cfg.prior)},
        "sampling": {f.name: _fmt(getattr(tr.sampling, f.name)) for f in fields(tr.sampling)},
        "train": {k: _fmt(getattr(tr, k)) for k in _TRAIN_KEYS},
        "loss": {**{k: _fmt(getattr(tr.weights, k)) for k in ("lambda1", "lambda2", "lambda3")},
                 "sigma_pc": _fmt(tr.gpc.sigma_pc), "bidirectional": _fmt(tr.gpc.bidirectional),
                 **{k: _fmt(getattr(tr, k)) for k in _LOSS_KEYS}},
        "field": {f.name: _fmt(getattr(tr.field, f.name)) for f in fields(tr.field)},
        "metrics": {f.name: _fmt(getattr(cfg.metrics, f.name)) for f in fields(cfg.metrics)},
    }
    return d


def dumps(cfg: RunConfig) -> str:
    lines = []
    for sec, items in to_sections(cfg).items():
        lines.append(f"[{sec}]")
        lines.extend(f"{k} = {v}" for k, v in items.items())
        lines.append("")
    return "\n".join(lines)


def write_config(cfg: RunConfig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(dumps(cfg))


__all__ = ["ConfigError", "MetricsConfig", "RunConfig", "load_config", "write_config",
           "dumps", "parse_overrides", "from_sections", "GpcConfig", "LossWeights",
           "SamplingConfig", "FieldConfig"]
