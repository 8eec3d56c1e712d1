"""
This script contains:
    A class to read and write the files of one artifact directory (tensors,
        key=value sidecars, text reports and PPM renders) and to keep its
        content-hash manifest.

To use the class:

    from hmpe.utils.artifacts import ArtifactStore

    store = ArtifactStore("runs/seed0")
    store.write_tensor("activations", activations)
    store.write_manifest()
    store.verify()
"""
import hashlib
from pathlib import Path
from typing import Dict, List, Mapping

import numpy as np
import pandas as pd

from hmpe import ARTIFACT_SUFFIX, logger, set_verbosity
from hmpe.utils.errors import FormatError, VerificationError
from hmpe.utils.numerics import ArrayLike, Tensor
from hmpe.utils.plotting import RasterImage, write_ppm
from hmpe.utils.tensor_io import PathLike, read_sidecar, read_tensor, write_sidecar, write_tensor

MANIFEST_NAME = "manifest.txt"


def sha256_file(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def report_to_text(report: pd.DataFrame) -> str:
    """Fixed-width rendering of a report, floats printed with 6 significant digits."""
    return report.to_string(index=False, float_format=lambda v: f"{v:.6g}") + "\n"


class ArtifactStore(object):
    """Reader/writer for one artifact directory.

    Parameters
    ----------
    root : str or Path
        Directory holding the artifacts. Created on first write if missing.
    verbose : bool, optional
        Set the logger level. If verbose, set logger level to INFO. Else, set logger level to ERROR.
        Defaults to None, which leaves the level untouched.
    """

    def __init__(self, root: PathLike, verbose=None):
        self.root = Path(root)
        if verbose is not None:
            set_verbosity(verbose)

    def __repr__(self) -> str:
        return f"ArtifactStore({str(self.root)!r})"

    def path(self, name: str) -> Path:
        return self.root / name

    def _tensor_path(self, name: str) -> Path:
        return self.path(name if name.endswith(ARTIFACT_SUFFIX) else name + ARTIFACT_SUFFIX)

    def write_tensor(self, name: str, tensor: ArrayLike) -> Path:
        path = write_tensor(self._tensor_path(name), tensor)
        logger.debug(f"wrote {path.name} {np.shape(tensor)}")
        return path

    def read_tensor(self, name: str) -> Tensor:
        path = self._tensor_path(name)
        if not path.exists():
            raise FormatError(f"artifact {path} not found")
        return read_tensor(path)

    def write_sidecar(self, name: str, values: Mapping[str, object]) -> Path:
        return write_sidecar(self.path(name), values)

    def read_sidecar(self, name: str) -> Dict[str, str]:
        return read_sidecar(self.path(name))

    def write_text(self, name: str, text: str) -> Path:
        path = self.path(name)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
        return path

    def write_report(self, name: str, report: pd.DataFrame) -> Path:
        return self.write_text(name, report_to_text(report))

    def write_image(self, name: str, image: RasterImage) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        return write_ppm(self.path(name), image)

    def files(self) -> List[str]:
        """Relative POSIX paths of every file below the root except the manifest, sorted."""
        if not self.root.exists():
            return []
        names = (p.relative_to(self.root).as_posix() for p in self.root.rglob("*") if p.is_file())
        return sorted(n for n in names if n != MANIFEST_NAME)

    def hashes(self) -> Dict[str, str]:
        return {name: sha256_file(self.path(name)) for name in self.files()}

    def write_manifest(self) -> Path:
        """Write `<sha256>  <relative path>` for every file, sorted by path."""
        lines = [f"{digest}  {name}" for name, digest in self.hashes().items()]
        path = self.write_text(MANIFEST_NAME, "\n".join(lines) + "\n")
        logger.info(f"manifest lists {len(lines)} files in {self.root}/")
        return path

    def read_manifest(self) -> Dict[str, str]:
        path = self.path(MANIFEST_NAME)
        if not path.exists():
            raise FormatError(f"no {MANIFEST_NAME} in {self.root}")
        declared = {}
        for line in path.read_text(encoding="utf-8").splitlines():
            digest, sep, name = line.partition("  ")
            if not sep or len(digest) != 64:
                raise FormatError(f"malformed manifest line: {line!r}")
            declared[name] = digest
        return declared

    def verify(self) -> None:
        """Recompute every hash and compare with the manifest.

        Raises:
            VerificationError: If a file is missing, unlisted or has changed.
        """
        declared = self.read_manifest()
        actual = self.hashes()
        problems = []
        for name in sorted(set(declared) | set(actual)):
            if name not in actual:
                problems.append(f"missing: {name}")
            elif name not in declared:
                problems.append(f"unlisted: {name}")
            elif declared[name] != actual[name]:
                problems.append(f"changed: {name}")
        if problems:
            raise VerificationError(f"manifest mismatch in {self.root}: " + "; ".join(problems))
        logger.info(f"manifest verified: {len(actual)} files")
