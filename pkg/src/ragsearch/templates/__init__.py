"""Versioned prompt templates (``string.Template`` syntax, ``$name`` placeholders)."""

from __future__ import annotations

from functools import lru_cache
from importlib import resources
from string import Template

TEMPLATE_VERSION = "1"


@lru_cache(maxsize=None)
def load(name: str) -> Template:
    text = resources.files(__package__).joinpath(f"{name}.txt").read_text(encoding="utf-8")
    return Template(text)


def render(name: str, **fields) -> str:
    return load(name).substitute(**{k: str(v) for k, v in fields.items()})
