# ffpipe/fetch.py
"""Download MNIST and CIFAR-10 into the data directory."""
import logging
import tarfile
from pathlib import Path
from typing import Dict, List, Optional

import requests
from requests.adapters import HTTPAdapter
from requests.exceptions import RequestException

from .exceptions import DatasetError

logger = logging.getLogger(__name__)

MNIST_BASE_URL = "https://ossci-datasets.s3.amazonaws.com/mnist/"
MNIST_FILES: Dict[str, str] = {
    'train_images': "train-images-idx3-ubyte.gz",
    'train_labels': "train-labels-idx1-ubyte.gz",
    'test_images': "t10k-images-idx3-ubyte.gz",
    'test_labels': "t10k-labels-idx1-ubyte.gz",
}

CIFAR_URL = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz"
CIFAR_DIR = "cifar-10-batches-bin"
CIFAR_TRAIN_FILES: List[str] = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILES: List[str] = ["test_batch.bin"]


class DatasetFetcher:
    """Fetches dataset archives over HTTP."""

    def __init__(self, data_dir: Path, timeout: int = 60, max_retries: int = 3):
        """
        Args:
            data_dir: Destination directory
            timeout: Per-request timeout in seconds
            max_retries: Connection retries per request
        """
        self.data_dir = Path(data_dir)
        self.timeout = timeout
        self.session = self._init_session(max_retries)

    def _init_session(self, max_retries: int) -> requests.Session:
        session = requests.Session()
        adapter = HTTPAdapter(max_retries=max_retries)
        session.mount('https://', adapter)
        session.mount('http://', adapter)
        return session

    def download(self, url: str, dest: Path, overwrite: bool = False) -> Path:
        """
        Stream ``url`` to ``dest``.

        Raises:
            DatasetError: If the request fails
        """
        if dest.exists() and not overwrite:
            logger.info("Already present: %s", dest)
            return dest
        dest.parent.mkdir(parents=True, exist_ok=True)
        partial = dest.with_suffix(dest.suffix + '.part')
        try:
            with self.session.get(url, stream=True, timeout=self.timeout) as response:
                response.raise_for_status()
                with open(partial, 'wb') as f:
                    for chunk in response.iter_content(chunk_size=1 << 20):
                        f.write(chunk)
        except RequestException as e:
            partial.unlink(missing_ok=True)
            raise DatasetError(f"Download of {url} failed: {e}")
        partial.replace(dest)
        logger.info("Downloaded %s -> %s", url, dest)
        return dest

    def fetch_mnist(self, base_url: Optional[str] = None) -> Dict[str, Path]:
        """Download the four MNIST IDX files (kept gzipped; the loader reads .gz)."""
        base_url = base_url or MNIST_BASE_URL
        return {key: self.download(base_url + name, self.data_dir / name)
                for key, name in MNIST_FILES.items()}

    def fetch_cifar10(self, url: Optional[str] = None) -> Path:
        """Download and unpack the CIFAR-10 binary archive."""
        archive = self.download(url or CIFAR_URL, self.data_dir / "cifar-10-binary.tar.gz")
        target = self.data_dir / CIFAR_DIR
        if not target.exists():
            with tarfile.open(archive, 'r:gz') as tar:
                tar.extractall(self.data_dir, filter='data')
        return target


def mnist_paths(data_dir: Path) -> Dict[str, Path]:
    """Expected MNIST locations; unzipped copies are used when present."""
    paths = {}
    for key, name in MNIST_FILES.items():
        plain = Path(data_dir) / name[:-3]
        paths[key] = plain if plain.exists() else Path(data_dir) / name
    return paths


def cifar10_paths(data_dir: Path) -> Dict[str, List[Path]]:
    root = Path(data_dir) / CIFAR_DIR
    return {
        'train': [root / name for name in CIFAR_TRAIN_FILES],
        'test': [root / name for name in CIFAR_TEST_FILES],
    }
