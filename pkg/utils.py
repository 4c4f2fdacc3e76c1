#!/usr/bin/env python3

import json
import threading
from pathlib import Path
from typing import Union


def load_json(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def dump_json(obj, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, ensure_ascii=False, indent=4, separators=(",", ": "))


def dumps_json(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, indent=4, separators=(",", ": "))


def append_json_line(obj, path: Union[str, Path]) -> None:
    """Append one record to a JSON-lines file"""
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(obj, ensure_ascii=False, sort_keys=True) + "\n")


def lock_path(path: Union[str, Path]) -> str:
    """Lock file used by filelock for single-writer outputs"""
    return f"{path}.lock"


class Singleton(type):
    _instance_lock = threading.Lock()

    def __call__(cls, *args, **kwds):
        with Singleton._instance_lock:
            if not hasattr(cls, "_instance"):
                cls._instance = super().__call__(*args, **kwds)
        return cls._instance


class ConfigError(ValueError):
    """Invalid configuration or generator spec file"""


def check_keys(raw: dict, allowed, source) -> None:
    """Reject keys that are not fields of the target config"""
    unknown = sorted(set(raw) - set(allowed))
    if unknown:
        raise ConfigError(f"{source}: unknown field(s) {', '.join(unknown)}")
