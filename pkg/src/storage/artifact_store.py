import hashlib
import os
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Tuple

from configs import get_runtime_settings
from src.exceptions import RunLockError
from src.logging.logger import get_logger
from src.storage.formats import read_json, write_json

logger = get_logger(__name__)


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def sha256_path(path: Path, file_hash: Callable[[Path], str] = sha256_file) -> str:
    """Hash of a file, or of every file below a directory (names and contents)"""
    path = Path(path)
    if path.is_file():
        return file_hash(path)
    digest = hashlib.sha256()
    for child in sorted(p for p in path.rglob("*") if p.is_file()):
        digest.update(child.relative_to(path).as_posix().encode("utf-8"))
        digest.update(file_hash(child).encode("ascii"))
    return digest.hexdigest()


class RunArtifactStore:
    """
    Run manifest over an output directory.

    Each stage record holds the sha256 of every input and output, timestamps and the
    hash of the config section it depends on. A stage is fresh when its outputs still hash to the recorded values
    and its current inputs hash to the recorded input hashes.
    """

    def __init__(self, output_dir: Path, config_hash: str):
        self.output_dir = Path(output_dir)
        self.config_hash = config_hash
        settings = get_runtime_settings()
        self.manifest_path = self.output_dir / settings.manifest_filename
        self.lock_path = self.output_dir / settings.lock_filename
        self._locked = False
        self._file_hashes: Dict[Tuple[str, int, int], str] = {}
        self.manifest = self._load()

    def __enter__(self) -> "RunArtifactStore":
        self.acquire()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.release()

    def acquire(self) -> None:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunLockError(f"{self.output_dir} is locked by another run (remove {self.lock_path} if stale)")
        with os.fdopen(fd, "w") as f:
            f.write(f"{os.getpid()}\n")
        self._locked = True

    def release(self) -> None:
        if self._locked:
            self.lock_path.unlink(missing_ok=True)
            self._locked = False

    def _load(self) -> Dict:
        if self.manifest_path.exists():
            manifest = read_json(self.manifest_path)
            if manifest.get("config_hash") != self.config_hash:
                logger.info("Config changed since the last run; recorded stages will be re-validated")
            return manifest
        return {"config_hash": self.config_hash, "stages": {}}

    def _key(self, path: Path) -> str:
        path = Path(path)
        try:
            return path.resolve().relative_to(self.output_dir.resolve()).as_posix()
        except ValueError:
            return str(path.resolve())

    def _resolve(self, key: str) -> Path:
        path = Path(key)
        return path if path.is_absolute() else self.output_dir / path

    def path(self, *parts: str) -> Path:
        return self.output_dir.joinpath(*parts)

    def _cached_hash(self, path: Path) -> str:
        # large raster stacks are hashed by several stages of one run
        stat = path.stat()
        key = (str(path.resolve()), stat.st_mtime_ns, stat.st_size)
        if key not in self._file_hashes:
            self._file_hashes[key] = sha256_file(path)
        return self._file_hashes[key]

    def digest(self, path: Path) -> str:
        return sha256_path(path, self._cached_hash)

    def hashes(self, paths: Iterable[Path]) -> Dict[str, str]:
        return {self._key(p): self.digest(p) for p in paths}

    def stage_record(self, stage: str) -> Optional[Dict]:
        return self.manifest["stages"].get(stage)

    def built_from(self, stage: str, output: Path, inputs: Iterable[Path]) -> bool:
        """`stage` recorded `output` as it is now, from `inputs` as they are now"""
        record = self.stage_record(stage)
        inputs = list(inputs)
        if record is None or any(not Path(p).exists() for p in [output, *inputs]):
            return False
        if record["outputs"].get(self._key(output)) != self.digest(output):
            return False
        return all(record["inputs"].get(self._key(p)) == self.digest(p) for p in inputs)

    def is_fresh(self, stage: str, inputs: Iterable[Path], config_hash: Optional[str] = None) -> bool:
        record = self.stage_record(stage)
        if record is None or record.get("config_hash") != (config_hash or self.config_hash):
            return False
        inputs = list(inputs)
        if any(not Path(p).exists() for p in inputs):
            return False
        if self.hashes(inputs) != record["inputs"]:
            return False
        for key, recorded in record["outputs"].items():
            path = self._resolve(key)
            if not path.exists() or self.digest(path) != recorded:
                return False
        return True

    def record(
        self,
        stage: str,
        inputs: Iterable[Path],
        outputs: Iterable[Path],
        started: datetime,
        config_hash: Optional[str] = None
    ) -> None:
        finished = datetime.now(timezone.utc)
        self.manifest["config_hash"] = self.config_hash
        self.manifest["stages"][stage] = {
            "config_hash": config_hash or self.config_hash,
            "inputs": self.hashes(inputs),
            "outputs": self.hashes(outputs),
            "started": started.isoformat(timespec="seconds"),
            "finished": finished.isoformat(timespec="seconds"),
        }
        write_json(self.manifest, self.manifest_path)

    def outputs(self, stage: str) -> List[Path]:
        record = self.stage_record(stage)
        return [self._resolve(key) for key in record["outputs"]] if record else []

    def declared_inputs(self) -> Dict[str, List[str]]:
        return {stage: sorted(record["inputs"]) for stage, record in self.manifest["stages"].items()}
