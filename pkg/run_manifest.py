"""
Reproducibility records written beside every command's outputs.
"""
from __future__ import annotations

import hashlib
import json
import platform
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional, Union

import numpy as np
import psutil
import sklearn
import torch
from pydantic import BaseModel

from constants import RUN_MANIFEST_FILENAME
from error_responses import IoFailureError


def _plain(obj: Any) -> Any:
    if isinstance(obj, BaseModel):
        return obj.model_dump(mode="json")
    return obj


def canonical_json(obj: Any) -> str:
    """Sorted-key, whitespace-free JSON."""
    return json.dumps(_plain(obj), sort_keys=True, separators=(",", ":"), default=str)


def config_hash(obj: Any) -> str:
    """sha256 of the canonical JSON form."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def capture_environment() -> Dict[str, Any]:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "torch": torch.__version__,
        "scikit_learn": sklearn.__version__,
        "platform": platform.system(),
        "machine": platform.machine(),
        "cpu_count": psutil.cpu_count(logical=True),
        "torch_threads": torch.get_num_threads(),
    }


def _relative(path: Union[str, Path], root: Path) -> str:
    resolved = Path(path).resolve()
    try:
        return resolved.relative_to(root.resolve()).as_posix()
    except ValueError:
        return Path(path).as_posix()


def write_run_manifest(out_dir: Union[str, Path], command: str, config: Any,
                       seeds: Mapping[str, int], artifacts: Iterable[Union[str, Path]],
                       extra: Optional[Mapping[str, Any]] = None) -> Path:
    """
    Write ``run_manifest.json`` (config, its hash, seeds, artifact paths relative
    to ``out_dir`` and the software environment). No timestamps are recorded so
    identical reruns produce identical files.
    """
    out_dir = Path(out_dir)
    payload: Dict[str, Any] = {
        "command": command,
        "config": _plain(config),
        "config_hash": config_hash(config),
        "seeds": dict(sorted(seeds.items())),
        "artifacts": sorted({_relative(path, out_dir) for path in artifacts}),
        "environment": capture_environment(),
    }
    if extra:
        payload["extra"] = dict(extra)

    path = out_dir / RUN_MANIFEST_FILENAME
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailureError(f"Failed to write {path}: {exc}", details={"path": str(path)}) from exc
    return path
