import shutil
import sys
import logging
from pathlib import Path

ROOT_DIR = Path(__file__).parent.parent
sys.path.append(str(ROOT_DIR))

from crash_recon.core.config import load_settings
from crash_recon.crud.base import RESERVED_NAMES
from crash_recon.services.preprocess import preprocess_corpus
from crash_recon.services.synth import build_corpus

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

CORPUS_SUFFIXES = (".json", ".supervision.csv")


def clean_corpus(root: Path) -> bool:
    """Remove every case, truth sidecar, supervision CSV and manifest from a corpus directory"""
    if not root.is_dir():
        logger.info(f"{root} does not exist, nothing to clean")
        return True
    try:
        removed = 0
        for path in sorted(root.iterdir()):
            if path.is_file() and (path.name.endswith(CORPUS_SUFFIXES) or path.name in RESERVED_NAMES):
                path.unlink()
                removed += 1
        logger.info(f"removed {removed} files from {root}")
        if not any(root.iterdir()):
            shutil.rmtree(root)
        return True
    except OSError as e:
        logger.error(f"corpus cleanup failed: {e}")
        return False


def init_corpus(root: Path, config: str = None, preset: str = None) -> bool:
    """Generate the synthetic corpus and its supervision in one go"""
    try:
        settings = load_settings(config, preset)
        manifest = build_corpus(root, settings.synth, settings.seed, workers=settings.workers)
        preprocess_corpus(root, settings, settings.workers)
        logger.info(f"corpus ready at {root}: {manifest['n']} cases")
        return True
    except Exception as e:
        logger.error(f"corpus initialization failed: {e}")
        return False


def reset_corpus(root: Path, config: str = None, preset: str = None) -> bool:
    return clean_corpus(root) and init_corpus(root, config, preset)


if __name__ == "__main__":
    usage = "usage: corpus_init.py [reset|clean|init] [corpus_dir] [config.toml]"
    if len(sys.argv) < 2 or sys.argv[1] not in ("reset", "clean", "init"):
        print(usage)
        sys.exit(2)
    command = sys.argv[1]
    root = Path(sys.argv[2]) if len(sys.argv) > 2 else ROOT_DIR / "runs" / "corpus"
    config = sys.argv[3] if len(sys.argv) > 3 else None
    if command == "clean":
        ok = clean_corpus(root)
    elif command == "init":
        ok = init_corpus(root, config)
    else:
        ok = reset_corpus(root, config)
    sys.exit(0 if ok else 1)
