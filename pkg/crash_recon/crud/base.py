import logging
from pathlib import Path
from typing import Any, Dict, Generic, List, Optional, Type, TypeVar, Union

from pydantic import BaseModel

from crash_recon.core.io import atomic_write_text, read_json, write_json

logger = logging.getLogger(__name__)

SchemaType = TypeVar("SchemaType", bound=BaseModel)

# Files in a corpus directory that are never records of any repository
RESERVED_NAMES = {"manifest.json", "resolved_config.json"}


class JsonRepository(Generic[SchemaType]):
    """
    Base repository class providing generic file operations over one corpus directory.
    Every record is one JSON file named ``<id><suffix>``.
    """
    def __init__(self, schema: Type[SchemaType], suffix: str = ".json", id_field: str = "case_id"):
        """
        Initialize repository
        :param schema: pydantic model stored by this repository
        :param suffix: file name suffix of a record
        :param id_field: attribute holding the record id
        """
        self.schema = schema
        self.suffix = suffix
        self.id_field = id_field

    def path(self, root: Union[str, Path], id: str) -> Path:
        return Path(root) / f"{id}{self.suffix}"

    def encode(self, obj: SchemaType) -> str:
        return obj.model_dump_json(indent=2) + "\n"

    def decode(self, text: str) -> SchemaType:
        return self.schema.model_validate_json(text)

    def _matches(self, path: Path) -> bool:
        return path.name.endswith(self.suffix) and path.name not in RESERVED_NAMES

    def list_ids(self, root: Union[str, Path]) -> List[str]:
        """
        List record ids in sorted order
        :param root: corpus directory
        :return: ids of every record file
        """
        root = Path(root)
        if not root.is_dir():
            return []
        return sorted(p.name[: -len(self.suffix)] for p in root.iterdir() if p.is_file() and self._matches(p))

    def get(self, root: Union[str, Path], id: str) -> Optional[SchemaType]:
        """
        Get a single record by id
        :param root: corpus directory
        :param id: record id
        :return: parsed record, None if the file does not exist
        """
        path = self.path(root, id)
        if not path.exists():
            return None
        return self.decode(path.read_text(encoding="utf-8"))

    def get_multi(self, root: Union[str, Path], *, skip: int = 0, limit: Optional[int] = None) -> List[SchemaType]:
        """
        Get multiple records in id order, supports pagination
        :param root: corpus directory
        :param skip: number of records to skip
        :param limit: maximum number of records to return
        """
        ids = self.list_ids(root)[skip:]
        if limit is not None:
            ids = ids[:limit]
        return [self.get(root, id) for id in ids]

    def create(self, root: Union[str, Path], *, obj_in: SchemaType) -> Path:
        """
        Write a record atomically
        :param root: corpus directory
        :param obj_in: record to store
        :return: path of the written file
        """
        path = self.path(root, getattr(obj_in, self.id_field))
        atomic_write_text(path, self.encode(obj_in))
        logger.debug(f"wrote {path}")
        return path

    def update(self, root: Union[str, Path], *, id: str, obj_in: Dict[str, Any]) -> SchemaType:
        """
        Update fields of a stored record
        :param root: corpus directory
        :param id: record id
        :param obj_in: field values to replace
        :return: updated record
        """
        current = self.get(root, id)
        if current is None:
            raise FileNotFoundError(self.path(root, id))
        updated = current.model_copy(update=obj_in)
        self.create(root, obj_in=updated)
        return updated

    def remove(self, root: Union[str, Path], *, id: str) -> bool:
        """
        Delete a record
        :return: True when a file was removed
        """
        path = self.path(root, id)
        if path.exists():
            path.unlink()
            return True
        return False


def read_manifest(root: Union[str, Path]) -> Dict[str, Any]:
    path = Path(root) / "manifest.json"
    if not path.exists():
        return {}
    return read_json(path)


def write_manifest(root: Union[str, Path], manifest: Dict[str, Any]) -> Path:
    return write_json(Path(root) / "manifest.json", manifest)
