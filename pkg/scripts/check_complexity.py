#!/usr/bin/env python3
"""Fail when nsde functions grow too long or library modules print.

Library modules report through ``logging``; only the command-line modules
listed in CONSOLE_MODULES may write to stdout.
"""

from __future__ import annotations

import ast
import sys
from dataclasses import dataclass
from pathlib import Path

MAX_FUNCTION_LINES = 120
PROJECT_ROOT = Path(__file__).resolve().parents[1]
SOURCE_ROOT = PROJECT_ROOT / "src" / "nsde"
EXCLUDED_FUNCTIONS = {("cli_parsers.py", "build_parser")}
CONSOLE_MODULES = {
    "cli.py",
    "cli_dispatch.py",
    "commands.py",
    "console.py",
    "init.py",
    "oracle_check.py",
}


@dataclass(frozen=True)
class Finding:
    file: Path
    line: int
    message: str

    def render(self) -> str:
        return f"- {self.file.relative_to(PROJECT_ROOT)}:{self.line} {self.message}"


def _parse(path: Path) -> ast.Module:
    return ast.parse(path.read_text(encoding="utf-8"), filename=str(path))


def _long_functions(path: Path, tree: ast.Module) -> list[Finding]:
    findings = []
    for node in ast.walk(tree):
        if not isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef)):
            continue
        if (path.name, node.name) in EXCLUDED_FUNCTIONS:
            continue
        length = node.end_lineno - node.lineno + 1
        if length > MAX_FUNCTION_LINES:
            findings.append(Finding(path, node.lineno, f"{node.name} ({length} lines)"))
    return findings


def _prints(path: Path, tree: ast.Module) -> list[Finding]:
    if path.name in CONSOLE_MODULES:
        return []
    return [
        Finding(path, node.lineno, "print() in a library module; use logging")
        for node in ast.walk(tree)
        if isinstance(node, ast.Call)
        and isinstance(node.func, ast.Name)
        and node.func.id == "print"
    ]


def collect_findings(root: Path = SOURCE_ROOT) -> list[Finding]:
    findings: list[Finding] = []
    for path in sorted(root.rglob("*.py")):
        tree = _parse(path)
        findings += _long_functions(path, tree)
        findings += _prints(path, tree)
    return sorted(findings, key=lambda f: (str(f.file), f.line))


def main() -> int:
    if not SOURCE_ROOT.exists():
        print(f"Source root not found: {SOURCE_ROOT}", file=sys.stderr)
        return 2

    findings = collect_findings()
    if not findings:
        print(
            f"Complexity check passed: no functions over {MAX_FUNCTION_LINES} lines "
            f"and no library prints in {SOURCE_ROOT}."
        )
        return 0

    print(f"Complexity check failed: {len(findings)} finding(s):")
    for finding in findings:
        print(finding.render())
    return 1


if __name__ == "__main__":
    raise SystemExit(main())
