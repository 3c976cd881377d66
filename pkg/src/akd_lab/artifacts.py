"""
JSON index of the artifacts an experiment has produced, kept at
``<output_dir>/artifacts.json``.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

from .errors import ArtifactError

logger = logging.getLogger(__name__)

INDEX_NAME = "artifacts.json"


@dataclass
class RoleEntry:
    """Checkpoints and run log of one trained model (``teacher/<i>`` or ``student``)."""

    role: str
    seed: int
    config_hash: str
    runlog: str
    checkpoints: Dict[str, str] = field(default_factory=dict)
    designated_epoch: Optional[int] = None

    def checkpoint(self, epoch: int) -> Optional[str]:
        return self.checkpoints.get(str(epoch))


def teacher_role(member: int) -> str:
    return f"teacher/{member}"


def teacher_dir(output_dir: Path, member: int) -> Path:
    return output_dir / "teachers" / f"member{member}"


def student_dir(output_dir: Path) -> Path:
    return output_dir / "student"


class ArtifactIndex:
    """Paths are stored relative to the output directory."""

    def __init__(self, output_dir: Path):
        self.output_dir = Path(output_dir)
        self.path = self.output_dir / INDEX_NAME
        self.data = self._load()

    def _load(self) -> Dict[str, Any]:
        if self.path.exists():
            try:
                with open(self.path, "r", encoding="utf-8") as f:
                    return json.load(f)
            except json.JSONDecodeError as e:
                raise ArtifactError(self.path, f"corrupt artifact index: {e}") from e
        return {"roles": {}}

    def save(self) -> None:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", encoding="utf-8") as f:
            json.dump(self.data, f, indent=2, sort_keys=True)
            f.write("\n")

    def record(self, entry: RoleEntry) -> None:
        self.data["roles"][entry.role] = asdict(entry)
        self.save()
        logger.debug(f"indexed {entry.role}: {len(entry.checkpoints)} checkpoint(s)")

    def get(self, role: str) -> Optional[RoleEntry]:
        data = self.data["roles"].get(role)
        return RoleEntry(**data) if data is not None else None

    def roles(self) -> List[str]:
        return sorted(self.data["roles"])

    def resolve(self, relative: str) -> Path:
        return self.output_dir / relative

    def relative(self, path: Path) -> str:
        return Path(path).relative_to(self.output_dir).as_posix()

    def checkpoint_path(self, role: str, epoch: int, fallback: Path) -> Path:
        """Indexed checkpoint for ``role`` at ``epoch``, else the conventional file name."""
        entry = self.get(role)
        if entry is not None and entry.checkpoint(epoch) is not None:
            return self.resolve(entry.checkpoint(epoch))
        return fallback

    def designated_epoch(self, role: str) -> Optional[int]:
        entry = self.get(role)
        return entry.designated_epoch if entry is not None else None
