"""Assemble a plain-English byte corpus from text shipped with the Python runtime.

Sources, in a fixed order: the pydoc topic reference, then module/class/function
docstrings from every top-level stdlib module. Output is deterministic for a
given interpreter install.

    python scripts/build_corpus.py data/corpus.txt --min-bytes 1200000
"""

import argparse
import ast
import sys
import sysconfig
from pathlib import Path


def pydoc_topics() -> list[str]:
    from pydoc_data import topics

    return [topics.topics[k] for k in sorted(topics.topics)]


def stdlib_docstrings(root: Path) -> list[str]:
    out = []
    for path in sorted(root.glob("*.py")):
        try:
            tree = ast.parse(path.read_text(encoding="utf-8"))
        except (SyntaxError, UnicodeDecodeError):
            continue
        for node in ast.walk(tree):
            if isinstance(node, (ast.Module, ast.ClassDef, ast.FunctionDef, ast.AsyncFunctionDef)):
                doc = ast.get_docstring(node)
                if doc and len(doc) >= 80:
                    out.append(doc)
    return out


def clean(text: str) -> str:
    text = text.encode("ascii", errors="ignore").decode()
    lines = [ln.rstrip() for ln in text.splitlines()]
    return "\n".join(ln for ln in lines if ln.strip()) + "\n\n"


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out", type=Path)
    ap.add_argument("--min-bytes", type=int, default=1_200_000)
    args = ap.parse_args(argv)

    seen = set()
    pieces = []
    for doc in pydoc_topics() + stdlib_docstrings(Path(sysconfig.get_paths()["stdlib"])):
        doc = clean(doc)
        if doc not in seen:
            seen.add(doc)
            pieces.append(doc)
    data = "".join(pieces).encode("ascii")
    if len(data) < args.min_bytes:
        print(f"only {len(data)} bytes available, wanted {args.min_bytes}", file=sys.stderr)
        return 1
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_bytes(data)
    print(f"wrote {len(data)} bytes to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
