"""Run manifests: what a command read, what it wrote, and how to redo it."""
from __future__ import annotations

import hashlib
import json
import os
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__

MANIFEST_NAME = "manifest.json"


class ManifestError(ValueError):
    pass


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write_text(path: str | Path, text: str) -> Path:
    """Write to a sibling temporary file and rename it into place."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    tmp.write_text(text)
    os.replace(tmp, path)
    return path


def _rel(path: Path, root: Path) -> str:
    try:
        return path.resolve().relative_to(root.resolve()).as_posix()
    except ValueError:
        return str(path.resolve())


@dataclass
class RunManifest:
    """Record of one command run.

    Paths of outputs are stored relative to the manifest's directory; inputs
    are stored relative to it when possible and absolute otherwise.
    """

    command: str
    argv: list[str]
    config: dict
    seeds: dict
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    timing: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)
    tool_version: str = __version__

    def to_dict(self) -> dict:
        return {
            "tool": "wigait",
            "tool_version": self.tool_version,
            "python": platform.python_version(),
            "command": self.command,
            "argv": self.argv,
            "config": self.config,
            "seeds": self.seeds,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": dict(sorted(self.outputs.items())),
            "timing": self.timing,
            "info": self.info,
        }

    def add_inputs(self, paths, root: Path) -> None:
        for p in paths:
            p = Path(p)
            self.inputs[_rel(p, root)] = sha256_file(p)

    def add_outputs(self, paths, root: Path) -> None:
        for p in paths:
            p = Path(p)
            self.outputs[_rel(p, root)] = sha256_file(p)

    def write(self, out_dir: str | Path, started: float | None = None) -> Path:
        out_dir = Path(out_dir)
        if started is not None:
            self.timing = {"started_unix": round(started, 3), "elapsed_s": round(time.time() - started, 3)}
        return atomic_write_text(out_dir / MANIFEST_NAME, json.dumps(self.to_dict(), indent=2) + "\n")


def read_manifest(path: str | Path, verify: bool = True) -> RunManifest:
    """Load a manifest; with ``verify`` every listed output is re-hashed.

    Raises ``ManifestError`` naming the first missing or altered file.
    """
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        doc = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise ManifestError(f"{path}: unreadable manifest ({exc})") from None
    for key in ("command", "argv", "config", "seeds", "outputs"):
        if key not in doc:
            raise ManifestError(f"{path}: missing field {key!r}")
    man = RunManifest(
        command=doc["command"], argv=list(doc["argv"]), config=doc["config"], seeds=doc["seeds"],
        inputs=dict(doc.get("inputs", {})), outputs=dict(doc["outputs"]), timing=doc.get("timing", {}),
        info=doc.get("info", {}), tool_version=doc.get("tool_version", ""),
    )
    if verify:
        root = path.parent
        for rel, digest in man.outputs.items():
            target = Path(rel) if Path(rel).is_absolute() else root / rel
            if not target.is_file():
                raise ManifestError(f"{path}: output {rel} is missing")
            if sha256_file(target) != digest:
                raise ManifestError(f"{path}: output {rel} does not match its recorded digest")
    return man
