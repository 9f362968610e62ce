import json
from logging import getLogger
from pathlib import Path

import torch
import yaml
from box import Box

LOGGER = getLogger(__name__)

LOADERS = {".yaml": yaml.safe_load, ".yml": yaml.safe_load, ".json": json.load}


def load_file(path):
    """Settings tree from a YAML or JSON file."""
    path = Path(path)
    if not path.is_file():
        raise ValueError(f"Settings file '{path}' does not exist.")

    loader = LOADERS.get(path.suffix.lower())
    if loader is None:
        raise ValueError(f"Settings file '{path}' must be YAML or JSON, got '{path.suffix}'.")

    with path.open("rb") as f:
        content = loader(f)
    if not content:
        raise ValueError(f"Settings file '{path}' is empty.")
    LOGGER.debug(f"loaded settings from {path}")
    return content


def merge_dicts(dict_a, dict_b):
    """Overlay `dict_b` onto `dict_a` in place; nested mappings merge key by key."""
    if not (isinstance(dict_a, dict) and isinstance(dict_b, dict)):
        raise ValueError("merge_dicts needs two mappings.")

    for key, value in dict_b.items():
        current = dict_a.get(key)
        if isinstance(current, dict) and isinstance(value, dict):
            merge_dicts(current, value)
        else:
            dict_a[key] = value
    return Box(dict_a)


def torch_generator(seed: int, device: str = "cpu") -> torch.Generator:
    """Return a torch generator seeded with `seed`."""
    generator = torch.Generator(device=device)
    generator.manual_seed(int(seed))
    return generator


def dump_json(data, path: Path) -> None:
    """Write `data` as deterministic UTF-8 JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    LOGGER.debug(f"wrote {path}")
