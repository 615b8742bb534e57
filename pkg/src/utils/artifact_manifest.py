"""
SHA-256 manifest of the files a command writes, for reproducibility checks
"""
import csv
import hashlib
import io
import json
import logging
import os
from pathlib import Path
from typing import Dict, Union

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


class ArtifactManifest:
    """Records size and content hash of every artifact in an output directory"""

    def __init__(self, out_dir: Union[str, Path]):
        """
        Initialize manifest

        Args:
            out_dir: Directory the command writes into
        """
        self.out_dir = Path(out_dir)
        self.manifest_file = self.out_dir / MANIFEST_NAME

    @staticmethod
    def _calculate_file_hash(file_path: Union[str, Path]) -> str:
        """
        Calculate SHA256 hash of file content

        Args:
            file_path: Path to file

        Returns:
            SHA256 hash as hex string
        """
        hash_obj = hashlib.sha256()
        with open(file_path, 'rb') as f:
            for chunk in iter(lambda: f.read(8192), b''):
                hash_obj.update(chunk)
        return hash_obj.hexdigest()

    @staticmethod
    def trace_hash_without_timing(file_path: Union[str, Path]) -> str:
        """
        SHA256 of a trace CSV with the wall_ms column blanked

        Args:
            file_path: Trace CSV path

        Returns:
            Hex digest that is stable across identical runs
        """
        with open(file_path, newline='', encoding='utf-8') as f:
            rows = list(csv.reader(f))
        if rows and "wall_ms" in rows[0]:
            col = rows[0].index("wall_ms")
            for row in rows[1:]:
                if len(row) > col:
                    row[col] = ""
        buffer = io.StringIO()
        csv.writer(buffer).writerows(rows)
        return hashlib.sha256(buffer.getvalue().encode('utf-8')).hexdigest()

    def generate_manifest(self) -> Dict[str, dict]:
        """
        Hash every file under the output directory except the manifest itself

        Returns:
            Dictionary keyed by path relative to the output directory
        """
        manifest = {}
        if not self.out_dir.exists():
            logger.warning(f"Output directory not found: {self.out_dir}")
            return manifest

        for root, dirs, files in os.walk(self.out_dir):
            dirs.sort()
            for name in sorted(files):
                path = Path(root) / name
                if path == self.manifest_file:
                    continue
                rel = path.relative_to(self.out_dir).as_posix()
                info = {
                    'size': path.stat().st_size,
                    'sha256': self._calculate_file_hash(path),
                }
                if name.endswith('.csv'):
                    info['sha256_without_timing'] = self.trace_hash_without_timing(path)
                manifest[rel] = info

        logger.info(f"Generated manifest for {len(manifest)} files in {self.out_dir}")
        return manifest

    def save_manifest(self, manifest: Dict[str, dict] = None) -> Path:
        """
        Write manifest.json

        Args:
            manifest: Manifest to save (generated when omitted)

        Returns:
            Path of the manifest file
        """
        manifest = manifest if manifest is not None else self.generate_manifest()
        self.out_dir.mkdir(parents=True, exist_ok=True)
        with open(self.manifest_file, 'w', encoding='utf-8') as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
        logger.info(f"Saved artifact manifest with {len(manifest)} files")
        return self.manifest_file

    def load_manifest(self) -> Dict[str, dict]:
        """
        Load manifest.json

        Returns:
            Manifest dictionary or empty dict if not found
        """
        if not self.manifest_file.exists():
            return {}
        with open(self.manifest_file, 'r', encoding='utf-8') as f:
            return json.load(f)


def create_artifact_manifest(out_dir: Union[str, Path]) -> ArtifactManifest:
    """Factory function to create an artifact manifest for an output directory"""
    return ArtifactManifest(out_dir)
