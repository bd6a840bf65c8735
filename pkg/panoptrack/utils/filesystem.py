from dataclasses import dataclass
from logging import Logger
from pathlib import Path
from typing import Optional

from fs.base import FS
from fs.memoryfs import MemoryFS
from fs.osfs import OSFS
from fs.path import dirname, join
from slugify import SLUG_OK, slugify


@dataclass
class Workspace:
    """Inputs are read from ``source``; outputs are written to ``sink``."""

    source: FS
    sink: FS
    dry_run: bool = False

    def close(self) -> None:
        if self.sink is not self.source:
            self.sink.close()
        self.source.close()
        return None


def resolve(path: str) -> str:
    return Path(path).expanduser().resolve().as_posix()


def ensure_parent(fs: FS, path: str) -> None:
    parent = dirname(path)
    if parent and parent != "/":
        fs.makedirs(parent, recreate=True)
    return None


def get_workspace(dry_run: bool, logger: Logger, source: Optional[FS] = None) -> Workspace:
    source = source or OSFS("/")
    if dry_run:
        logger.info("beginning dry run (outputs are kept in memory)")
        return Workspace(source=source, sink=MemoryFS(), dry_run=True)
    return Workspace(source=source, sink=source)


def slug(*parts: object) -> str:
    return slugify(
        s="-".join(str(p) for p in parts if p is not None and str(p)),
        ok=SLUG_OK + ".",
        only_ascii=True,
    )


def default_output_dir(base: str, scenario: str, seed: int) -> str:
    return join(resolve(base), slug(scenario, "seed", seed))
