"""Read a YAML scenario, apply CLI overrides, validate, and fingerprint it."""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional

import yaml
from pydantic import ValidationError

from app.exceptions import ScenarioError
from app.models.scenario import ScenarioConfig
from app.utils.hashing import config_hash

logger = logging.getLogger("volterrisk")


@dataclass(frozen=True)
class LoadedScenario:
    config: ScenarioConfig
    config_hash: str
    path: Optional[Path] = None

    @property
    def seed(self) -> int:
        return self.config.mc.seed


def _problems(exc: ValidationError) -> list:
    out = []
    for err in exc.errors():
        where = ".".join(str(part) for part in err.get("loc", ())) or "<root>"
        out.append(f"{where}: {err.get('msg', 'invalid value')}")
    return out


def parse_scenario(
    raw: object,
    command: Optional[str] = None,
    seed: Optional[int] = None,
    paths: Optional[int] = None,
    out: Optional[str] = None,
    sections: Optional[Dict[str, Dict[str, Any]]] = None,
) -> LoadedScenario:
    """Validate ``raw`` after applying overrides.

    ``sections`` merges keys into named sections, e.g. {"semimartingale": {"type": 2}}.
    """
    if not isinstance(raw, dict):
        raise ScenarioError(["scenario must be a mapping of sections"])
    data = dict(raw)
    for name, values in (sections or {}).items():
        merged = dict(data.get(name) or {})
        merged.update(values)
        data[name] = merged
    mc = dict(data.get("mc") or {})
    if seed is not None:
        mc["seed"] = seed
    if paths is not None:
        mc["n_paths"] = paths
    if mc:
        data["mc"] = mc
    if out is not None:
        outputs = dict(data.get("outputs") or {})
        outputs["dir"] = out
        data["outputs"] = outputs

    try:
        config = ScenarioConfig.model_validate(data)
    except ValidationError as e:
        raise ScenarioError(_problems(e)) from e
    if command is not None:
        config.require(command)
    return LoadedScenario(config=config, config_hash=config_hash(config.canonical()))


def load_scenario(path: str, command: Optional[str] = None, **overrides) -> LoadedScenario:
    p = Path(path)
    try:
        raw = yaml.safe_load(p.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ScenarioError([f"{p}: not valid YAML ({e})"]) from e
    loaded = parse_scenario(raw, command=command, **overrides)
    logger.info(f"Loaded scenario '{loaded.config.name}' from {p} (hash {loaded.config_hash[:12]})")
    return LoadedScenario(config=loaded.config, config_hash=loaded.config_hash, path=p)
