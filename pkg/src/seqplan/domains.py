"""Domain resolution for the command-line harness.

`builtin:` names are generated in code; bare names resolve to `.dpomdp`
files, searched in SEQPLAN_DOMAIN_DIR, the working directory, then the
package data directory. `file:` paths load directly.
"""
from __future__ import annotations

import os
from importlib import resources
from pathlib import Path

from .dpomdp import parse_dpomdp
from .model import DecPomdp, make_multi_gridsmall, make_multi_tiger

__all__ = ["resolve_domain", "list_domains", "DOMAIN_DIR_ENV"]

DOMAIN_DIR_ENV = "SEQPLAN_DOMAIN_DIR"

_BUILTIN = {
    "tiger": make_multi_tiger,
    "gridsmall": make_multi_gridsmall,
}


def _data_dir():
    return resources.files("seqplan") / "data"


def _search_dirs() -> list[Path]:
    dirs = []
    env = os.environ.get(DOMAIN_DIR_ENV)
    if env:
        dirs += [Path(p) for p in env.split(os.pathsep) if p]
    dirs.append(Path.cwd())
    return dirs


def list_domains() -> dict[str, list[str]]:
    """Available domain names grouped by origin."""
    out = {"builtin": [f"builtin:{k}" for k in sorted(_BUILTIN)], "files": []}
    seen = set()
    for d in _search_dirs():
        if d.is_dir():
            for f in sorted(d.glob("*.dpomdp")):
                if f.stem not in seen:
                    seen.add(f.stem)
                    out["files"].append(str(f))
    for f in sorted(_data_dir().iterdir()):
        if f.name.endswith(".dpomdp") and f.name[:-7] not in seen:
            out["files"].append(f"packaged:{f.name[:-7]}")
    return out


def resolve_domain(spec: str, agents: int | None = None) -> DecPomdp:
    """Load or generate the model named by `spec`."""
    if spec.startswith("builtin:"):
        name = spec.split(":", 1)[1]
        if name not in _BUILTIN:
            raise ValueError(f"unknown builtin domain {name!r}; "
                             f"have {sorted(_BUILTIN)}")
        if agents is None:
            raise ValueError(f"builtin domain {name!r} needs --agents")
        return _BUILTIN[name](agents)
    if spec.startswith("file:"):
        path = Path(spec.split(":", 1)[1])
        if not path.is_file():
            raise FileNotFoundError(f"no such model file: {path}")
        return parse_dpomdp(path.read_text(), name=path.stem)
    if agents is not None:
        raise ValueError("--agents only applies to builtin: domains")
    candidates = [spec, f"{spec}.dpomdp"]
    for d in _search_dirs():
        for c in candidates:
            p = d / c
            if p.is_file():
                return parse_dpomdp(p.read_text(), name=p.stem if p.stem else spec)
    data = _data_dir() / f"{spec}.dpomdp"
    if data.is_file():
        return parse_dpomdp(data.read_text(), name=spec)
    raise FileNotFoundError(
        f"domain {spec!r} not found (searched {DOMAIN_DIR_ENV}, cwd, packaged data)")
