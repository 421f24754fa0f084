"""
Run output directory: CSV matrices and tables, JSONL sample log and manifest.
Each file has exactly one writer; the manifest lists every file with its digest.
"""

import hashlib
import json
import logging
import subprocess
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from . import __version__
from .models import RunConfig, SampleRecord


logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.txt"
LOG_NAME = "ddibp.log"


def version_string() -> str:
    """Package version, extended with `git describe` when run from a checkout."""
    try:
        described = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5,
        )
        if described.returncode == 0 and described.stdout.strip():
            return f"{__version__}+{described.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class SampleSink:
    """Appends one JSON line per SampleRecord to samples.jsonl."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self._handle = open(self.path, "w", encoding="utf-8")
        self.count = 0

    def __call__(self, record: SampleRecord) -> None:
        self._handle.write(record.model_dump_json(exclude_none=True) + "\n")
        self.count += 1

    def close(self) -> None:
        if not self._handle.closed:
            self._handle.close()

    def __enter__(self) -> "SampleSink":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class OutputWriter:
    """Owns one run's output directory."""

    def __init__(self, output_dir: Path, config: RunConfig):
        """
        Initialize writer.

        Args:
            output_dir: Directory for this run (created if missing)
            config: Run configuration recorded in the manifest
        """
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.config = config
        self.files: List[str] = []

    def path(self, name: str) -> Path:
        return self.output_dir / name

    def _claim(self, name: str) -> Path:
        if name in self.files:
            raise RuntimeError(f"Output file written twice: {name}")
        self.files.append(name)
        return self.path(name)

    def write_matrix(self, name: str, matrix: np.ndarray) -> Path:
        """Header-less CSV; infinities as `inf`, missing as `nan`."""
        path = self._claim(name)
        pd.DataFrame(np.atleast_2d(np.asarray(matrix))).to_csv(path, header=False, index=False, na_rep="nan")
        return path

    def write_table(self, name: str, frame: pd.DataFrame) -> Path:
        path = self._claim(name)
        frame.to_csv(path, index=False, na_rep="nan")
        return path

    def write_json(self, name: str, payload: Dict[str, Any]) -> Path:
        path = self._claim(name)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
        return path

    def write_text(self, name: str, text: str) -> Path:
        path = self._claim(name)
        path.write_text(text, encoding="utf-8")
        return path

    def register(self, name: str) -> Path:
        """Claim a file written by another component (e.g. samples.jsonl, run_config.txt)."""
        return self._claim(name)

    def sample_sink(self, name: str = "samples.jsonl") -> SampleSink:
        return SampleSink(self._claim(name))

    def write_manifest(self, extra: Optional[Dict[str, Any]] = None) -> Path:
        """
        Write manifest.txt: version, config hash, seed, then one `file<TAB>sha256` line per output.
        """
        lines = [
            f"version\t{version_string()}",
            f"config_hash\t{self.config.config_hash()}",
            f"seed\t{self.config.mcmc.seed}",
            f"subcommand\t{self.config.subcommand}",
        ]
        for key, value in sorted((extra or {}).items()):
            lines.append(f"{key}\t{value}")
        for name in self.files:
            lines.append(f"file\t{name}\t{file_digest(self.path(name))}")
        path = self.path(MANIFEST_NAME)
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        logger.info(f"Wrote {len(self.files)} outputs and manifest to {self.output_dir}")
        return path
