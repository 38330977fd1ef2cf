"""Run manifests: resolved config, input digests and produced artifacts."""

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Union

from mpa_pretrain import __version__

PathLike = Union[str, Path]


def file_digest(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass
class RunManifest:
    """Everything needed to repeat a command; no timestamps, so reruns are byte-identical."""

    command: str
    config: Dict[str, Any]
    inputs: Dict[str, str] = field(default_factory=dict)
    artifacts: List[str] = field(default_factory=list)
    version: str = __version__

    @classmethod
    def create(
        cls,
        command: str,
        config: Dict[str, Any],
        inputs: Optional[Iterable[Optional[PathLike]]] = None,
        artifacts: Optional[Iterable[PathLike]] = None,
    ) -> "RunManifest":
        digests = {str(p): file_digest(p) for p in (inputs or []) if p is not None}
        return cls(command, config, digests, sorted(str(a) for a in (artifacts or [])))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def write(self, path: PathLike) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")
