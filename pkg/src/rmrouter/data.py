"""Preference-pair records: schema, files, converters and a synthetic benchmark.

On disk a dataset is JSON Lines, UTF-8, one object per line with the keys
``prompt``, ``chosen``, ``rejected`` and ``domain``. Newlines and other
control characters inside text are written with JSON string escapes
(``\\n``), so one record never spans more than one physical line.
A ``<name>.manifest.json`` sidecar holds per-domain counts and shares.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .autodiff import make_rng

log = logging.getLogger(__name__)

SOURCES = ("dialogue-transcript", "dual-summary", "multi-ending", "preranked")


class DataError(ValueError):
    """Invalid dataset content; the message carries line numbers where known."""


class ConversionError(DataError):
    pass


@dataclass(frozen=True)
class RewardExample:
    prompt: str
    chosen: str
    rejected: str
    domain: str

    def validate(self, domains: Iterable[str] | None = None) -> None:
        if self.chosen == self.rejected:
            raise DataError("degenerate pair: chosen and rejected responses are identical")
        if domains is not None and self.domain not in set(domains):
            raise DataError(f"unknown domain label {self.domain!r}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False, sort_keys=True)


@dataclass
class DatasetManifest:
    split: str
    seed: int | None
    counts: dict[str, int]
    shares: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.shares:
            total = sum(self.counts.values())
            self.shares = {d: round(100.0 * c / total, 2) if total else 0.0 for d, c in self.counts.items()}

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def to_dict(self) -> dict:
        return {"split": self.split, "seed": self.seed, "counts": self.counts, "shares": self.shares, "total": self.total}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> DatasetManifest:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(d["split"], d.get("seed"), d["counts"], d["shares"])

    def table(self) -> str:
        rows = [("Dataset", "# of data", "% of data")]
        rows += [(d, f"{c:,}", f"{self.shares[d]:.2f}") for d, c in self.counts.items()]
        rows.append(("Total", f"{self.total:,}", "100"))
        widths = [max(len(r[i]) for r in rows) for i in range(3)]
        lines = ["  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths))) for r in rows]
        rule = "-" * len(lines[0])
        return "\n".join([rule, lines[0], rule, *lines[1:-1], rule, lines[-1], rule])


def make_manifest(examples: Sequence[RewardExample], domains: Sequence[str], split: str, seed: int | None = None) -> DatasetManifest:
    counts = {d: 0 for d in domains}
    for ex in examples:
        counts[ex.domain] += 1
    return DatasetManifest(split, seed, counts)


def manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".manifest.json")


def save_examples(path: str | Path, examples: Iterable[RewardExample]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(ex.to_json() + "\n")
    return path


def load_examples(path: str | Path, domains: Sequence[str] | None = None, split: str = "train") -> tuple[list[RewardExample], DatasetManifest]:
    """Parse a JSONL dataset; every bad line is reported with its line number.

    If ``domains`` is None the domain list is taken from the file in order
    of first appearance.

    Raises:
        DataError: on an empty file, malformed lines, unknown domains or
            degenerate pairs.
    """
    path = Path(path)
    examples: list[RewardExample] = []
    problems: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise DataError("expected a JSON object")
                missing = [k for k in ("prompt", "chosen", "rejected", "domain") if k not in obj]
                if missing:
                    raise DataError(f"missing field(s) {missing}")
                bad = [k for k in ("prompt", "chosen", "rejected", "domain") if not isinstance(obj[k], str)]
                if bad:
                    raise DataError(f"field(s) {bad} must be strings")
                ex = RewardExample(obj["prompt"], obj["chosen"], obj["rejected"], obj["domain"])
                ex.validate(domains)
            except json.JSONDecodeError as exc:
                problems.append(f"{path}:{lineno}: malformed line ({exc.msg})")
                continue
            except DataError as exc:
                problems.append(f"{path}:{lineno}: {exc}")
                continue
            examples.append(ex)
    if problems:
        raise DataError("invalid records:\n  " + "\n  ".join(problems))
    if not examples:
        raise DataError(f"{path}: dataset is empty")
    if domains is None:
        domains = list(dict.fromkeys(ex.domain for ex in examples))
    return examples, make_manifest(examples, domains, split)


def split_by_domain(examples: Iterable[RewardExample], domains: Sequence[str] | None = None) -> dict[str, list[RewardExample]]:
    out: dict[str, list[RewardExample]] = {d: [] for d in domains or ()}
    for ex in examples:
        out.setdefault(ex.domain, []).append(ex)
    return out


# ---------------------------------------------------------------------------
# structural converters
# ---------------------------------------------------------------------------

_REQUIRED = {
    "dialogue-transcript": ("chosen", "rejected"),
    "dual-summary": ("context", "summary_0", "summary_1", "label"),
    "multi-ending": ("context", "endings", "label"),
    "preranked": ("prompt",),
}


@dataclass
class RawRecord:
    fields: dict
    source: str

    def validate(self) -> None:
        if self.source not in SOURCES:
            raise ConversionError(f"unknown source tag {self.source!r}; expected one of {SOURCES}")
        missing = [k for k in _REQUIRED[self.source] if k not in self.fields]
        if self.source == "preranked" and "responses" not in self.fields and not {"chosen", "rejected"} <= self.fields.keys():
            missing.append("responses or chosen/rejected")
        if missing:
            raise ConversionError(f"{self.source} record missing field(s) {missing}")


def _records(records: Iterable[RawRecord | Mapping], source: str) -> list[RawRecord]:
    out = []
    for r in records:
        rec = r if isinstance(r, RawRecord) else RawRecord(dict(r), source)
        if rec.source != source:
            raise ConversionError(f"expected a {source} record, got {rec.source}")
        rec.validate()
        out.append(rec)
    return out


def _emit(ex: RewardExample, index: int) -> RewardExample:
    try:
        ex.validate()
    except DataError as exc:
        raise ConversionError(f"record {index}: {exc}") from None
    return ex


ROLES = ("Human", "Assistant")


def parse_transcript(text: str) -> list[tuple[str, str]]:
    """Split ``"\\n\\nHuman: ...\\n\\nAssistant: ..."`` into ``(role, text)`` turns."""
    turns: list[tuple[str, str]] = []
    for chunk in text.split("\n\n"):
        for role in ROLES:
            tag = f"{role}:"
            if chunk.startswith(tag):
                turns.append((role, chunk[len(tag) :].strip()))
                break
        else:
            if not turns:
                if chunk.strip():
                    raise ConversionError(f"transcript text outside any turn: {chunk[:40]!r}")
                continue
            role, prev = turns[-1]
            turns[-1] = (role, prev + "\n\n" + chunk)
    return turns


def _render_prompt(turns: Sequence[tuple[str, str]]) -> str:
    if len(turns) == 1:
        return turns[0][1]
    return "\n\n".join(f"{role}: {text}" for role, text in turns)


def convert_dialogue(records: Iterable[RawRecord | Mapping], domain: str = "dialogue") -> list[RewardExample]:
    """Split paired transcripts into prompt / chosen / rejected.

    Both transcripts must share every turn except the final assistant turn.
    The shared turns become the prompt: a lone human turn contributes its
    bare text, longer prefixes are kept as ``"Role: text"`` turns joined by
    blank lines.

    Raises:
        ConversionError: on divergence before the final assistant turn, or
            identical transcripts.
    """
    out = []
    for i, rec in enumerate(_records(records, "dialogue-transcript")):
        chosen = parse_transcript(rec.fields["chosen"])
        rejected = parse_transcript(rec.fields["rejected"])
        if chosen == rejected:
            raise ConversionError(f"record {i}: degenerate pair: transcripts are identical")
        if not chosen or not rejected or chosen[-1][0] != "Assistant" or rejected[-1][0] != "Assistant":
            raise ConversionError(f"record {i}: transcripts must end with an assistant turn")
        if chosen[:-1] != rejected[:-1]:
            raise ConversionError(f"record {i}: transcripts diverge before the final assistant turn")
        prefix = chosen[:-1]
        if not prefix:
            raise ConversionError(f"record {i}: no shared human turn to use as prompt")
        out.append(_emit(RewardExample(_render_prompt(prefix), chosen[-1][1], rejected[-1][1], domain), i))
    return out


def convert_dual_summary(records: Iterable[RawRecord | Mapping], domain: str = "summary") -> list[RewardExample]:
    """Context + two summaries + preferred index (0 or 1) -> one pair."""
    out = []
    for i, rec in enumerate(_records(records, "dual-summary")):
        f = rec.fields
        label = f["label"]
        if label not in (0, 1) or isinstance(label, bool):
            raise ConversionError(f"record {i}: label must be 0 or 1, got {label!r}")
        summaries = (f["summary_0"], f["summary_1"])
        out.append(_emit(RewardExample(f["context"], summaries[label], summaries[1 - label], domain), i))
    return out


def convert_multi_ending(records: Iterable[RawRecord | Mapping], seed: int, domain: str = "completion") -> list[RewardExample]:
    """Correct ending is chosen; rejected is a seeded uniform pick among the others."""
    out = []
    for i, rec in enumerate(_records(records, "multi-ending")):
        endings = list(rec.fields["endings"])
        label = rec.fields["label"]
        if len(endings) < 2:
            raise ConversionError(f"record {i}: need at least two endings, got {len(endings)}")
        if not isinstance(label, int) or not 0 <= label < len(endings):
            raise ConversionError(f"record {i}: correct index {label!r} out of range")
        wrong = [j for j in range(len(endings)) if j != label]
        pick = wrong[int(make_rng(seed, "multi-ending", i).integers(len(wrong)))]
        out.append(_emit(RewardExample(rec.fields["context"], endings[label], endings[pick], domain), i))
    return out


def convert_preranked(records: Iterable[RawRecord | Mapping], domain: str = "ranked") -> list[RewardExample]:
    """Pass through chosen/rejected records; expand rankings to adjacent pairs.

    ``responses`` is ordered best first; it yields ``(r0, r1), (r1, r2), ...``.
    """
    out = []
    for i, rec in enumerate(_records(records, "preranked")):
        f = rec.fields
        if "responses" in f:
            ranked = list(f["responses"])
            if len(ranked) < 2:
                raise ConversionError(f"record {i}: need at least two ranked responses")
            for better, worse in zip(ranked, ranked[1:]):
                out.append(_emit(RewardExample(f["prompt"], better, worse, domain), i))
        else:
            out.append(_emit(RewardExample(f["prompt"], f["chosen"], f["rejected"], domain), i))
    return out


def language_filter(records: Iterable[RawRecord | Mapping], keep: Sequence[str] = ("en",), key: str = "lang") -> list:
    """Drop records whose ``key`` tag is not in ``keep``; untagged records are kept."""
    out = []
    for r in records:
        fields = r.fields if isinstance(r, RawRecord) else r
        if fields.get(key, keep[0]) in keep:
            out.append(r)
    return out


CONVERTERS: dict[str, Callable[..., list[RewardExample]]] = {
    "dialogue-transcript": convert_dialogue,
    "dual-summary": convert_dual_summary,
    "multi-ending": convert_multi_ending,
    "preranked": convert_preranked,
}


def convert(source: str, records: Iterable[Mapping], domain: str, seed: int = 0) -> list[RewardExample]:
    if source not in CONVERTERS:
        raise ConversionError(f"unknown source tag {source!r}; expected one of {SOURCES}")
    if source == "multi-ending":
        return convert_multi_ending(records, seed, domain)
    return CONVERTERS[source](records, domain)


# ---------------------------------------------------------------------------
# synthetic multi-domain benchmark
# ---------------------------------------------------------------------------

PROMPT_WORDS = 24
FILLER_WORDS = 16
QUALITY_WORDS = 6


def domain_names(n: int) -> list[str]:
    return [f"d{i}" for i in range(n)]


@dataclass(frozen=True)
class DomainLexicon:
    prompt: tuple[str, ...]
    filler: tuple[str, ...]
    good: tuple[str, ...]
    bad: tuple[str, ...]


def lexicon(d: int, n_domains: int, mode: str) -> DomainLexicon:
    """Word pools for domain ``d``.

    ``disjoint``: every pool is private to the domain. ``overlapping``:
    prompts and filler draw half their pool from shared words, and a
    domain's bad words are the next domain's good words, so judging a
    response requires knowing the prompt's domain.
    """
    name = f"d{d}"
    prompt = tuple(f"{name}p{j}" for j in range(PROMPT_WORDS))
    filler = tuple(f"{name}r{j}" for j in range(FILLER_WORDS))
    good = tuple(f"{name}g{j}" for j in range(QUALITY_WORDS))
    if mode == "disjoint":
        bad = tuple(f"{name}b{j}" for j in range(QUALITY_WORDS))
    elif mode == "overlapping":
        half_p, half_f = PROMPT_WORDS // 2, FILLER_WORDS // 2
        prompt = prompt[:half_p] + tuple(f"sp{j}" for j in range(half_p))
        filler = filler[:half_f] + tuple(f"sr{j}" for j in range(half_f))
        nxt = f"d{(d + 1) % n_domains}" if n_domains > 1 else f"{name}x"
        bad = tuple(f"{nxt}g{j}" for j in range(QUALITY_WORDS))
    else:
        raise ValueError(f"unknown separability mode {mode!r}")
    return DomainLexicon(prompt, filler, good, bad)


def _synth_pair(rng: np.random.Generator, lex: DomainLexicon, domain: str) -> RewardExample:
    prompt = " ".join(rng.choice(lex.prompt, size=int(rng.integers(4, 9))))
    n_fill = int(rng.integers(2, 6))
    filler = list(rng.choice(lex.filler, size=n_fill))
    slots = sorted(rng.choice(n_fill + 2, size=2, replace=False))
    qi = rng.choice(QUALITY_WORDS, size=2, replace=False)

    def response(pool):
        words = list(filler)
        for s, q in zip(slots, qi):
            words.insert(int(s), pool[int(q)])
        return " ".join(words)

    return RewardExample(prompt, response(lex.good), response(lex.bad), domain)


def synth_domain(d: int, n_domains: int, count: int, mode: str, seed: int, split: str) -> list[RewardExample]:
    """Examples for one domain; independent of every other domain's draws."""
    lex = lexicon(d, n_domains, mode)
    rng = make_rng(seed, "synth", d, split)
    return [_synth_pair(rng, lex, f"d{d}") for _ in range(count)]


def synth_generate(
    n_domains: int,
    per_domain: int,
    mode: str = "disjoint",
    seed: int = 0,
    per_domain_test: int | None = None,
    out_dir: str | Path | None = None,
) -> tuple[list[RewardExample], list[RewardExample]]:
    """Synthetic train/test preference pairs over ``n_domains`` domains.

    When ``out_dir`` is given, writes ``train.jsonl``, ``test.jsonl`` and
    their manifests there.
    """
    if n_domains < 1 or per_domain < 1:
        raise ValueError("n_domains and per_domain must be positive")
    n_test = per_domain // 4 if per_domain_test is None else per_domain_test
    train, test = [], []
    for d in range(n_domains):
        train += synth_domain(d, n_domains, per_domain, mode, seed, "train")
        test += synth_domain(d, n_domains, n_test, mode, seed, "test")
    if out_dir is not None:
        out_dir = Path(out_dir)
        names = domain_names(n_domains)
        for split, rows in (("train", train), ("test", test)):
            path = save_examples(out_dir / f"{split}.jsonl", rows)
            make_manifest(rows, names, split, seed).save(manifest_path(path))
    return train, test
