"""Deterministic ~5 MB English corpus built from text already on the machine.

Sources, in order: the interpreter's help topics, docstrings of the standard
library and of a fixed list of installed packages, then every other installed
package by name. Only prose-like paragraphs are kept (mostly letters and
spaces, few code symbols), and exact duplicates are dropped. Each paragraph
is one document.
"""

from __future__ import annotations

import ast
import hashlib
import importlib.util
import sys
import sysconfig
from pathlib import Path

PACKAGES = ["numpy", "scipy", "pandas", "sklearn", "statsmodels", "sympy", "networkx", "matplotlib",
            "transformers", "torch", "jax", "tensorflow", "skimage", "sqlalchemy", "pydantic", "requests"]
TARGET = 5_000_000
CACHE = Path(__file__).resolve().parent / ".cache" / "desk_corpus.bin"


def _prose(par: str) -> bool:
    if len(par) < 150:
        return False
    letters = sum(c.isalpha() or c == " " for c in par)
    symbols = sum(c in "{}[]()=<>_`|\\*#$@" for c in par)
    return letters / len(par) > 0.86 and symbols / len(par) < 0.01 and par.count(">>>") == 0


def _paragraphs(text: str):
    for block in text.split("\n\n"):
        par = " ".join(line.strip() for line in block.splitlines()).strip()
        if _prose(par):
            yield par


def _docstrings(path: Path):
    try:
        tree = ast.parse(path.read_text(encoding="utf-8"))
    except (SyntaxError, UnicodeDecodeError, ValueError):
        return
    for node in ast.walk(tree):
        if isinstance(node, (ast.Module, ast.ClassDef, ast.FunctionDef, ast.AsyncFunctionDef)):
            doc = ast.get_docstring(node)
            if doc:
                yield doc


def _source_roots():
    yield Path(sysconfig.get_paths()["stdlib"])
    done = set()
    for name in PACKAGES:
        spec = importlib.util.find_spec(name)
        if spec and spec.submodule_search_locations:
            done.add(name)
            yield Path(list(spec.submodule_search_locations)[0])
    # then every other installed package, in name order
    site = Path(sysconfig.get_paths()["purelib"])
    for path in sorted(site.iterdir()):
        if path.is_dir() and path.name not in done and path.name.isidentifier():
            yield path


def build(target: int = TARGET) -> bytes:
    seen: set[bytes] = set()
    docs: list[bytes] = []
    size = 0

    def add(par: str) -> bool:
        nonlocal size
        b = par.encode("utf-8")
        h = hashlib.sha1(b).digest()
        if h in seen:
            return False
        seen.add(h)
        docs.append(b)
        size += len(b) + 1
        return size >= target

    try:
        from pydoc_data.topics import topics
        for key in sorted(topics):
            for par in _paragraphs(topics[key]):
                if add(par):
                    return b"\n".join(docs)
    except ImportError:
        pass
    for root in _source_roots():
        for path in sorted(root.rglob("*.py")):
            if "test" in path.parts or "tests" in path.parts:
                continue
            for doc in _docstrings(path):
                for par in _paragraphs(doc):
                    if add(par):
                        return b"\n".join(docs)
    return b"\n".join(docs)


def load(target: int = TARGET) -> bytes:
    if CACHE.exists():
        data = CACHE.read_bytes()
        if len(data) >= target * 0.95:
            return data[:target]
    data = build(target)
    CACHE.parent.mkdir(parents=True, exist_ok=True)
    CACHE.write_bytes(data)
    return data


if __name__ == "__main__":
    data = load()
    print(f"{len(data)} bytes", file=sys.stderr)
    sys.stdout.buffer.write(data[:600] + b"\n")
