"""Prompt template engine and the labeled-example block format.

Templates are plain text files with ``{name}`` slots; ``{{`` and ``}}``
escape literal braces.  Substitution is single-pass: slot values are
emitted verbatim and never re-expanded, so content containing braces
cannot inject further slots.  There is no conditional or loop syntax on
purpose; composition happens in the stage modules.

The package bundles defaults for six prompt families under
``templates/<name>.txt``: ``cot`` (the bare moderation query), ``chain_of_analogy``
(analogy-augmented chain generation), ``virtual_analogy`` (self-generated
analogy elicitation), ``rule_induction``, ``reasoning_synthesis``, and
``rule_generalization`` (rule application on unseen content).  Operators
may override any of them by pointing the library at a directory with
files of the same names.
"""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass, field
from importlib.resources import files as package_files
from pathlib import Path
from typing import Mapping, Sequence

from .errors import TemplateError
from .schema import AnalogyExample, sha256_hex

BUNDLED_TEMPLATES = (
    "cot",
    "chain_of_analogy",
    "virtual_analogy",
    "rule_induction",
    "reasoning_synthesis",
    "rule_generalization",
)

_NAME_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")


class TemplateWarning(UserWarning):
    """Render context carried keys the template has no slots for."""


@dataclass(frozen=True)
class Template:
    """A parsed template: literal segments interleaved with named slots."""

    name: str
    body: str
    required_slots: frozenset[str]
    _segments: tuple[tuple[str, str], ...] = field(repr=False)

    def render(self, ctx: Mapping[str, object] | None = None, **values: object) -> str:
        """Substitute every slot exactly once; deterministic and pure.

        Context may come as a mapping, keyword arguments, or both (keywords
        win).  A slot without a value is an error; an extra key is only a
        warning.
        """
        merged: dict[str, object] = dict(ctx or {})
        merged.update(values)
        missing = sorted(self.required_slots - merged.keys())
        if missing:
            if len(missing) == 1:
                raise TemplateError(f"missing slot: {missing[0]}")
            raise TemplateError(f"missing slots: {', '.join(missing)}")
        extra = sorted(merged.keys() - self.required_slots)
        if extra:
            warnings.warn(
                f"template {self.name!r}: unused context keys: {', '.join(extra)}",
                TemplateWarning,
                stacklevel=2,
            )
        out: list[str] = []
        for kind, value in self._segments:
            out.append(str(merged[value]) if kind == "slot" else value)
        return "".join(out)

    def digest(self) -> str:
        return sha256_hex(self.body)


def parse_template(name: str, body: str) -> Template:
    """Parse a template body, rejecting stray or malformed braces."""
    segments: list[tuple[str, str]] = []
    slots: set[str] = set()
    literal: list[str] = []
    i, n = 0, len(body)
    while i < n:
        ch = body[i]
        if ch == "{":
            if body.startswith("{{", i):
                literal.append("{")
                i += 2
                continue
            m = _NAME_RE.match(body, i + 1)
            if m is not None and body[m.end() : m.end() + 1] == "}":
                if literal:
                    segments.append(("lit", "".join(literal)))
                    literal = []
                slot = m.group(0)
                segments.append(("slot", slot))
                slots.add(slot)
                i = m.end() + 1
                continue
            raise TemplateError(f"template {name!r}: malformed slot at char {i}")
        if ch == "}":
            if body.startswith("}}", i):
                literal.append("}")
                i += 2
                continue
            raise TemplateError(f"template {name!r}: stray '}}' at char {i}")
        literal.append(ch)
        i += 1
    if literal:
        segments.append(("lit", "".join(literal)))
    return Template(
        name=name,
        body=body,
        required_slots=frozenset(slots),
        _segments=tuple(segments),
    )


class TemplateLibrary:
    """Loads templates from the bundled package data plus an override dir.

    A file ``<override_dir>/<name>.txt`` shadows the bundled template of
    the same name.  Parsed templates are cached; the library is safe to
    share across threads after construction because templates are
    immutable and the cache is only ever extended.
    """

    def __init__(self, override_dir: Path | None = None):
        self.override_dir = Path(override_dir) if override_dir is not None else None
        if self.override_dir is not None and not self.override_dir.is_dir():
            raise TemplateError(f"template directory not found: {self.override_dir}")
        self._cache: dict[str, Template] = {}

    def _read(self, name: str) -> str:
        if self.override_dir is not None:
            candidate = self.override_dir / f"{name}.txt"
            if candidate.exists():
                return candidate.read_text(encoding="utf-8")
        resource = package_files("anamod").joinpath(f"templates/{name}.txt")
        try:
            return resource.read_text(encoding="utf-8")
        except (FileNotFoundError, OSError):
            raise TemplateError(f"unknown template {name!r}") from None

    def get(self, name: str) -> Template:
        if name not in self._cache:
            self._cache[name] = parse_template(name, self._read(name))
        return self._cache[name]

    def names(self) -> list[str]:
        found = set(BUNDLED_TEMPLATES)
        if self.override_dir is not None:
            found.update(p.stem for p in self.override_dir.glob("*.txt"))
        return sorted(found)

    def digests(self) -> dict[str, str]:
        """Digest per template, for run manifests."""
        return {name: self.get(name).digest() for name in self.names()}


_EXAMPLE_LINE_RE = re.compile(r"^Example (\d+): (.*)$")
_LABEL_LINE_RE = re.compile(r"^Label: (.*)$")


def render_analogy_block(examples: Sequence[AnalogyExample], include_labels: bool = True) -> str:
    """Serialize examples as a numbered two-line-per-entry block.

    Texts are whitespace-flattened so every entry occupies exactly one
    ``Example j:`` line (plus its ``Label:`` line when labels are on),
    which keeps the block parseable back into count and labels.
    """
    if not examples:
        raise TemplateError("analogy block requires at least one example")
    lines: list[str] = []
    for j, ex in enumerate(examples, start=1):
        flat = " ".join(ex.text.split())
        lines.append(f"Example {j}: {flat}")
        if include_labels:
            lines.append(f"Label: {ex.label}")
    return "\n".join(lines)


def parse_analogy_block(block: str, include_labels: bool = True) -> list[tuple[str, str | None]]:
    """Strict inverse of :func:`render_analogy_block`.

    Returns (text, label) pairs; numbering must run 1..n in order.
    """
    lines = block.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    pairs: list[tuple[str, str | None]] = []
    i = 0
    while i < len(lines):
        m = _EXAMPLE_LINE_RE.match(lines[i])
        if m is None:
            raise TemplateError(f"analogy block line {i + 1}: expected 'Example {len(pairs) + 1}: …'")
        if int(m.group(1)) != len(pairs) + 1:
            raise TemplateError(
                f"analogy block line {i + 1}: expected entry number {len(pairs) + 1}, got {m.group(1)}"
            )
        text = m.group(2)
        label: str | None = None
        i += 1
        if include_labels:
            if i >= len(lines) or (lm := _LABEL_LINE_RE.match(lines[i])) is None:
                raise TemplateError(f"analogy block line {i + 1}: expected 'Label: …'")
            label = lm.group(1)
            i += 1
        pairs.append((text, label))
    if not pairs:
        raise TemplateError("analogy block contains no entries")
    return pairs


def extract_labeled_examples(text: str) -> list[tuple[str, str]]:
    """Lenient scan for Example/Label pairs in free-form model output.

    Pairs each ``Example n:`` line with the first following ``Label:``
    line; surrounding prose and bad numbering are tolerated, unlabeled
    examples are dropped.  Returns [] when nothing parses.
    """
    pairs: list[tuple[str, str]] = []
    pending: str | None = None
    for line in text.split("\n"):
        line = line.strip()
        m = _EXAMPLE_LINE_RE.match(line)
        if m is not None:
            pending = m.group(2).strip()
            continue
        lm = _LABEL_LINE_RE.match(line)
        if lm is not None and pending is not None:
            label = lm.group(1).strip()
            if pending and label:
                pairs.append((pending, label))
            pending = None
    return pairs


def categories_line(categories: Sequence[str]) -> str:
    """Comma-joined category list as rendered into every prompt."""
    return ", ".join(categories)
