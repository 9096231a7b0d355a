"""Download helper for the public MovieLens rating archives."""

from __future__ import annotations

import io
import logging
import zipfile
from pathlib import Path

import requests

logger = logging.getLogger(__name__)

GROUPLENS_URL = "https://files.grouplens.org/datasets/movielens"

ARCHIVES: dict[str, tuple[str, str]] = {
    "tab_100k": ("ml-100k.zip", "ml-100k/u.data"),
    "coloncolon_1m": ("ml-1m.zip", "ml-1m/ratings.dat"),
}


class DownloadError(RuntimeError):
    """Raised when an archive cannot be fetched or lacks the ratings file."""


class MovieLensClient:
    """Fetch MovieLens archives from ``base_url`` and extract the ratings member."""

    def __init__(self, base_url: str = GROUPLENS_URL, *, timeout: float = 60.0) -> None:
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def download(self, archive: str) -> bytes:
        url = f"{self.base_url}/{archive}"
        logger.info("download_start url=%s", url)
        try:
            with requests.get(url, stream=True, timeout=self.timeout) as resp:
                resp.raise_for_status()
                buffer = io.BytesIO()
                for chunk in resp.iter_content(chunk_size=1 << 16):
                    buffer.write(chunk)
        except requests.RequestException as exc:
            logger.error("download_failed url=%s error=%s", url, exc)
            raise DownloadError(f"cannot download {url}: {exc}") from exc
        data = buffer.getvalue()
        logger.info("download_done url=%s bytes=%d", url, len(data))
        return data

    def fetch(self, fmt: str, dest_dir: Path) -> Path:
        """Return the ratings file for ``fmt`` under ``dest_dir``, downloading if absent."""
        if fmt not in ARCHIVES:
            raise DownloadError(f"unknown format {fmt!r}; expected one of {sorted(ARCHIVES)}")
        archive, member = ARCHIVES[fmt]
        target = Path(dest_dir) / Path(member).name
        if target.exists():
            logger.info("dataset_cached path=%s", target)
            return target
        data = self.download(archive)
        try:
            with zipfile.ZipFile(io.BytesIO(data)) as bundle:
                payload = bundle.read(member)
        except KeyError as exc:
            raise DownloadError(f"{archive} has no member {member}") from exc
        except zipfile.BadZipFile as exc:
            raise DownloadError(f"{archive} is not a zip archive") from exc
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(payload)
        logger.info("dataset_extracted path=%s bytes=%d", target, len(payload))
        return target


def fetch_movielens(fmt: str, dest_dir: Path | str, *, timeout: float = 60.0) -> Path:
    return MovieLensClient(timeout=timeout).fetch(fmt, Path(dest_dir))
