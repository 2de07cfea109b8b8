"""On-disk run store with write-then-rename commits.

Layout under ``<output_root>/<run_id>/``::

    config.txt                         run configuration snapshot
    LOCK                               present while a coordinator holds the run
    splits/split_<i>.json              the shared train/validation plans
    instances/<model>/split_<i>/       weights.pt, history.csv, logits.csv,
                                       instance.json (and failure.json on error)
    reports/                           emitted tables
    quarantine/                        temp files left behind by interrupted commits
    errors.json                        machine-readable summary of the last failure
"""

from __future__ import annotations

import errno
import hashlib
import json
import os
import re
import socket
import time
import uuid
from pathlib import Path

from .errors import StoreError, ValidationError

TMP_MARKER = ".tmp-"
INSTANCE_ARTIFACTS = ("weights.pt", "history.csv", "logits.csv", "instance.json")
_RUN_ID = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]{0,127}$")


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def check_run_id(run_id: str) -> str:
    if not _RUN_ID.match(run_id) or run_id in (".", ".."):
        raise ValidationError(f"run_id {run_id!r} is not filesystem-safe (letters, digits, '.', '_', '-')")
    return run_id


def atomic_commit(data: bytes, dest, root=None) -> Path:
    """Write ``data`` to ``dest`` so readers see either nothing or all of it.

    The bytes go to a temp file in the destination directory, are fsynced,
    then renamed over ``dest``. If ``dest`` already holds identical bytes
    nothing is written. A failed rename moves the temp file to the store's
    ``quarantine/`` directory when ``root`` is given.
    """
    dest = Path(dest)
    if root is not None:
        root_r = Path(root).resolve()
        if root_r not in dest.resolve().parents:
            raise StoreError(f"{dest} is outside the store root {root_r}")
    if dest.exists() and dest.is_file():
        if dest.stat().st_size == len(data) and sha256_file(dest) == sha256_bytes(data):
            return dest
    dest.parent.mkdir(parents=True, exist_ok=True)
    tmp = dest.with_name(f".{dest.name}{TMP_MARKER}{os.getpid()}-{uuid.uuid4().hex[:8]}")
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    try:
        os.replace(tmp, dest)
    except OSError as e:
        if root is not None and tmp.exists():
            _quarantine(Path(root), tmp)
        if e.errno == errno.EXDEV:
            raise StoreError(
                f"cannot rename {tmp} to {dest} across filesystems; keep temp files and the "
                "destination on one filesystem (place the output root on a single mount)"
            ) from e
        raise StoreError(f"commit of {dest} failed: {e}") from e
    return dest


def _quarantine(root: Path, tmp: Path) -> Path:
    qdir = root / "quarantine"
    qdir.mkdir(parents=True, exist_ok=True)
    rel = tmp.relative_to(root) if root in tmp.parents else Path(tmp.name)
    target = qdir / "__".join(rel.parts)
    os.replace(tmp, target)
    return target


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


class RunLock:
    """Exclusive ``LOCK`` file for a run root; stale locks of dead local processes are taken over."""

    def __init__(self, root):
        self.path = Path(root) / "LOCK"
        self.held = False

    def acquire(self) -> "RunLock":
        self.path.parent.mkdir(parents=True, exist_ok=True)
        meta = {"pid": os.getpid(), "host": socket.gethostname(), "started": time.time()}
        for _ in range(2):
            try:
                fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY, 0o644)
            except FileExistsError:
                try:
                    other = json.loads(self.path.read_text())
                except (OSError, ValueError):
                    other = {}
                if other.get("host") == meta["host"] and not _pid_alive(int(other.get("pid", -1))):
                    self.path.unlink(missing_ok=True)
                    continue
                raise StoreError(f"run is locked by {other or 'an unknown process'} ({self.path})") from None
            with os.fdopen(fd, "w") as f:
                json.dump(meta, f)
            self.held = True
            return self
        raise StoreError(f"could not acquire {self.path}")

    def release(self) -> None:
        if self.held:
            self.path.unlink(missing_ok=True)
            self.held = False

    def __enter__(self):
        return self.acquire()

    def __exit__(self, *exc):
        self.release()


class Store:
    def __init__(self, output_root, run_id: str):
        self.run_id = check_run_id(run_id)
        self.root = Path(output_root) / run_id
        self.root.mkdir(parents=True, exist_ok=True)
        self.quarantined = self.quarantine_stale_temps()

    # paths -----------------------------------------------------------------

    @property
    def config_path(self) -> Path:
        return self.root / "config.txt"

    @property
    def reports_dir(self) -> Path:
        return self.root / "reports"

    def split_path(self, split_index: int) -> Path:
        return self.root / "splits" / f"split_{split_index}.json"

    def instance_dir(self, model: str, split_index: int) -> Path:
        return self.root / "instances" / model / f"split_{split_index}"

    def artifact(self, model: str, split_index: int, kind: str) -> Path:
        return self.instance_dir(model, split_index) / kind

    # writes ------------------------------------------------------------------

    def commit(self, data: bytes | str, dest) -> Path:
        if isinstance(data, str):
            data = data.encode("utf-8")
        return atomic_commit(data, dest, root=self.root)

    def commit_json(self, obj, dest) -> Path:
        return self.commit(json.dumps(obj, indent=2, sort_keys=True) + "\n", dest)

    def quarantine_stale_temps(self) -> list[Path]:
        moved = []
        for p in self.root.rglob(f"*{TMP_MARKER}*"):
            if p.is_file() and "quarantine" not in p.relative_to(self.root).parts:
                moved.append(_quarantine(self.root, p))
        return moved

    # reads -------------------------------------------------------------------

    def read_json(self, path):
        with open(path, encoding="utf-8") as f:
            return json.load(f)

    def is_complete(self, model: str, split_index: int) -> bool:
        """All instance artifacts present and the weights match their recorded hash."""
        d = self.instance_dir(model, split_index)
        if not all((d / a).is_file() for a in INSTANCE_ARTIFACTS):
            return False
        try:
            meta = self.read_json(d / "instance.json")
        except (OSError, ValueError):
            return False
        return meta.get("weights_sha256") == sha256_file(d / "weights.pt")

    def has_trained_weights(self, model: str, split_index: int) -> bool:
        d = self.instance_dir(model, split_index)
        if not ((d / "instance.json").is_file() and (d / "weights.pt").is_file()):
            return False
        meta = self.read_json(d / "instance.json")
        return meta.get("weights_sha256") == sha256_file(d / "weights.pt")

    def completed_instances(self) -> list[tuple[str, int]]:
        out = []
        base = self.root / "instances"
        if not base.is_dir():
            return out
        for mdir in sorted(base.iterdir()):
            for sdir in sorted(mdir.glob("split_*")):
                i = int(sdir.name.split("_", 1)[1])
                if self.is_complete(mdir.name, i):
                    out.append((mdir.name, i))
        return out

    def logit_files(self, models=None) -> list[Path]:
        return [
            self.artifact(m, i, "logits.csv")
            for m, i in self.completed_instances()
            if models is None or m in models
        ]
