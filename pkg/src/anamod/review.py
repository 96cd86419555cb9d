"""Double-blind pairwise rule review: sessions, verdicts, aggregation, HTTP.

Each session pits two rule sources against each other over a shared pair
list.  Every annotator gets an independent seeded shuffle of the pairs and
an independent left/right coin flip per pair, so neither position nor
order leaks which method produced a rule.  The client-facing payload is
exactly {pair_id, context, left, right}; the mapping back to methods lives
only in the server-side session file, and only the aggregation step reads
it.

Verdicts go to an append-only JSONL log, fsync'd before the submission is
acknowledged: a crash after the ack cannot lose a judgment, and replaying
the log alone reproduces every report.  Ties are rejected unless the
session explicitly allows them; tie verdicts never enter the preference
denominator.
"""

from __future__ import annotations

import json
import os
import random
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .errors import AlreadyJudgedError, ReviewError
from .schema import atomic_write_bytes, canonical_json, derive_seed, sha256_hex, utc_now_iso

CHOICES = ("left", "right", "tie")


@dataclass(frozen=True)
class PairInput:
    """One comparison: two rules for the same context, with provenance."""

    pair_id: str
    context: str
    method_a: str
    rule_a: str
    method_b: str
    rule_b: str

    def __post_init__(self):
        if not self.pair_id:
            raise ReviewError("pair_id must be non-empty")
        if self.method_a == self.method_b:
            raise ReviewError(f"pair {self.pair_id!r}: both rules claim method {self.method_a!r}")

    def to_dict(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "context": self.context,
            "method_a": self.method_a,
            "rule_a": self.rule_a,
            "method_b": self.method_b,
            "rule_b": self.rule_b,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PairInput":
        return cls(**{k: d[k] for k in ("pair_id", "context", "method_a", "rule_a", "method_b", "rule_b")})


@dataclass(frozen=True)
class Verdict:
    pair_id: str
    annotator_id: str
    choice: str
    submitted_at: str

    def to_dict(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "annotator_id": self.annotator_id,
            "choice": self.choice,
            "submitted_at": self.submitted_at,
        }


def pairs_from_exports(
    left_rows: Sequence[Mapping],
    right_rows: Sequence[Mapping],
    method_a: str,
    method_b: str,
) -> list[PairInput]:
    """Join two stage-2 review exports on instance id into pair inputs.

    Only instances present in both exports form pairs; pair ids are
    derived from the instance ids, so re-building from the same exports is
    stable.
    """
    by_id_b = {row["instance_id"]: row for row in right_rows}
    pairs: list[PairInput] = []
    for row in left_rows:
        other = by_id_b.get(row["instance_id"])
        if other is None:
            continue
        pairs.append(
            PairInput(
                pair_id=f"pair:{row['instance_id']}",
                context=row["context"],
                method_a=method_a,
                rule_a=row["rule_text"],
                method_b=method_b,
                rule_b=other["rule_text"],
            )
        )
    if not pairs:
        raise ReviewError("exports share no instance ids; nothing to review")
    return pairs


def load_export(path: Path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise ReviewError(f"review export not found: {path}")
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ReviewError(f"{path}:{lineno}: malformed export row: {exc.msg}") from exc
    return rows


class ReviewSession:
    """One session's state: assignments on disk, verdicts replayed from log.

    All mutation happens under one lock; the verdict log is single-writer
    and append-only.
    """

    def __init__(
        self,
        session_id: str,
        pairs: Sequence[PairInput],
        annotators: Sequence[str],
        seed: int,
        allow_ties: bool,
        session_dir: Path,
    ):
        self.session_id = session_id
        self.pairs = {p.pair_id: p for p in pairs}
        self.annotators = tuple(annotators)
        self.seed = seed
        self.allow_ties = allow_ties
        self.session_dir = Path(session_dir)
        self._lock = threading.Lock()

        # per-annotator independent order and left/right flips, both seeded
        self.order: dict[str, list[str]] = {}
        self.left_is_a: dict[str, dict[str, bool]] = {}
        pair_ids_sorted = sorted(self.pairs)
        for annotator in self.annotators:
            order = list(pair_ids_sorted)
            random.Random(derive_seed(seed, "order", annotator)).shuffle(order)
            self.order[annotator] = order
            flip_rng = random.Random(derive_seed(seed, "flips", annotator))
            self.left_is_a[annotator] = {pid: flip_rng.random() < 0.5 for pid in pair_ids_sorted}

        self.verdicts: dict[tuple[str, str], Verdict] = {}

    # -- construction / persistence -------------------------------------

    @classmethod
    def create(
        cls,
        pairs: Sequence[PairInput],
        annotators: Sequence[str],
        seed: int,
        store_dir: Path,
        allow_ties: bool = False,
    ) -> "ReviewSession":
        if not pairs:
            raise ReviewError("a session needs at least one pair")
        if not annotators:
            raise ReviewError("a session needs at least one annotator")
        seen = set()
        for a in annotators:
            if not a:
                raise ReviewError("annotator ids must be non-empty")
            if a in seen:
                raise ReviewError(f"duplicate annotator id {a!r}")
            seen.add(a)
        pair_ids = set()
        for p in pairs:
            if p.pair_id in pair_ids:
                raise ReviewError(f"duplicate pair id {p.pair_id!r}")
            pair_ids.add(p.pair_id)

        spec = {
            "pairs": [p.to_dict() for p in pairs],
            "annotators": list(annotators),
            "seed": seed,
            "allow_ties": allow_ties,
        }
        session_id = "sess-" + sha256_hex(canonical_json(spec))[:16]
        session_dir = Path(store_dir) / session_id
        session = cls(session_id, pairs, annotators, seed, allow_ties, session_dir)
        session_dir.mkdir(parents=True, exist_ok=True)
        atomic_write_bytes(
            session_dir / "session.json",
            (canonical_json({"session_id": session_id, **spec}) + "\n").encode("utf-8"),
        )
        session._replay_log()
        return session

    @classmethod
    def load(cls, session_dir: Path) -> "ReviewSession":
        session_dir = Path(session_dir)
        spec_path = session_dir / "session.json"
        if not spec_path.exists():
            raise ReviewError(f"no session at {session_dir}")
        spec = json.loads(spec_path.read_text(encoding="utf-8"))
        session = cls(
            session_id=spec["session_id"],
            pairs=[PairInput.from_dict(d) for d in spec["pairs"]],
            annotators=spec["annotators"],
            seed=spec["seed"],
            allow_ties=spec["allow_ties"],
            session_dir=session_dir,
        )
        session._replay_log()
        return session

    @property
    def _log_path(self) -> Path:
        return self.session_dir / "verdicts.log"

    def _replay_log(self) -> None:
        self.verdicts.clear()
        if not self._log_path.exists():
            return
        with open(self._log_path, "r", encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                row = json.loads(line)
                verdict = Verdict(
                    pair_id=row["pair_id"],
                    annotator_id=row["annotator_id"],
                    choice=row["choice"],
                    submitted_at=row["submitted_at"],
                )
                self.verdicts[(verdict.annotator_id, verdict.pair_id)] = verdict

    # -- protocol operations --------------------------------------------

    def _check_annotator(self, annotator_id: str) -> None:
        if annotator_id not in self.order:
            raise ReviewError(f"unknown annotator {annotator_id!r}")

    def blinded_pair(self, annotator_id: str, pair_id: str) -> dict:
        pair = self.pairs[pair_id]
        if self.left_is_a[annotator_id][pair_id]:
            left, right = pair.rule_a, pair.rule_b
        else:
            left, right = pair.rule_b, pair.rule_a
        return {"pair_id": pair_id, "context": pair.context, "left": left, "right": right}

    def next_pair(self, annotator_id: str) -> dict:
        """Next unjudged pair in this annotator's order, or the done marker."""
        with self._lock:
            self._check_annotator(annotator_id)
            judged = sum(1 for (a, _) in self.verdicts if a == annotator_id)
            total = len(self.pairs)
            for pair_id in self.order[annotator_id]:
                if (annotator_id, pair_id) not in self.verdicts:
                    return {
                        "done": False,
                        "judged": judged,
                        "total": total,
                        "pair": self.blinded_pair(annotator_id, pair_id),
                    }
            return {"done": True, "judged": judged, "total": total, "pair": None}

    def submit_verdict(self, annotator_id: str, pair_id: str, choice: str) -> dict:
        """Record one verdict durably; resubmission is rejected."""
        with self._lock:
            self._check_annotator(annotator_id)
            if pair_id not in self.pairs:
                raise ReviewError(f"unknown pair {pair_id!r}")
            if choice not in CHOICES:
                raise ReviewError(f"invalid choice {choice!r}; expected one of {CHOICES}")
            if choice == "tie" and not self.allow_ties:
                raise ReviewError("ties are disabled for this session")
            if (annotator_id, pair_id) in self.verdicts:
                raise AlreadyJudgedError(f"pair {pair_id!r} already judged by {annotator_id!r}")
            verdict = Verdict(
                pair_id=pair_id,
                annotator_id=annotator_id,
                choice=choice,
                submitted_at=utc_now_iso(),
            )
            # durable before acknowledged: a crash after this point keeps it
            with open(self._log_path, "a", encoding="utf-8") as fh:
                fh.write(canonical_json(verdict.to_dict()) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            self.verdicts[(annotator_id, pair_id)] = verdict
            judged = sum(1 for (a, _) in self.verdicts if a == annotator_id)
            return {"ok": True, "judged": judged, "total": len(self.pairs)}

    # -- aggregation -----------------------------------------------------

    def _method_of(self, verdict: Verdict) -> str | None:
        if verdict.choice == "tie":
            return None
        pair = self.pairs[verdict.pair_id]
        left_a = self.left_is_a[verdict.annotator_id][verdict.pair_id]
        chose_left = verdict.choice == "left"
        return pair.method_a if chose_left == left_a else pair.method_b

    def aggregate(self) -> dict:
        """Preference report: a pure function of the verdict log."""
        with self._lock:
            if not self.verdicts:
                raise ReviewError("no verdicts recorded yet")
            methods = sorted({m for p in self.pairs.values() for m in (p.method_a, p.method_b)})
            verdicts = list(self.verdicts.values())

            def tally(subset: Sequence[Verdict]) -> dict:
                counts = {m: 0 for m in methods}
                ties = 0
                for v in subset:
                    m = self._method_of(v)
                    if m is None:
                        ties += 1
                    else:
                        counts[m] += 1
                non_tie = sum(counts.values())
                percentages = {
                    m: (100.0 * c / non_tie if non_tie else 0.0) for m, c in counts.items()
                }
                return {
                    "counts": counts,
                    "ties": ties,
                    "non_tie": non_tie,
                    "percentages": percentages,
                }

            pooled = tally(verdicts)
            per_annotator = {
                a: tally([v for v in verdicts if v.annotator_id == a]) for a in self.annotators
            }

            # majority-per-pair view: each pair collapses to one vote
            majority_counts = {m: 0 for m in methods}
            split = 0
            decided_pairs = 0
            judged_pairs = sorted({v.pair_id for v in verdicts})
            for pair_id in judged_pairs:
                votes = {m: 0 for m in methods}
                for v in verdicts:
                    if v.pair_id != pair_id:
                        continue
                    m = self._method_of(v)
                    if m is not None:
                        votes[m] += 1
                ranked = sorted(votes.items(), key=lambda kv: (-kv[1], kv[0]))
                if ranked[0][1] == 0:
                    continue
                decided_pairs += 1
                if len(ranked) > 1 and ranked[0][1] == ranked[1][1]:
                    split += 1
                else:
                    majority_counts[ranked[0][0]] += 1

            # agreement over pairs with two or more non-tie judgments
            unanimous = 0
            multi = 0
            for pair_id in judged_pairs:
                chosen = [
                    m
                    for v in verdicts
                    if v.pair_id == pair_id and (m := self._method_of(v)) is not None
                ]
                if len(chosen) >= 2:
                    multi += 1
                    if len(set(chosen)) == 1:
                        unanimous += 1

            return {
                "session_id": self.session_id,
                "methods": methods,
                "verdict_count": len(verdicts),
                "pooled": pooled,
                "per_annotator": per_annotator,
                "majority_per_pair": {
                    "counts": majority_counts,
                    "split_pairs": split,
                    "decided_pairs": decided_pairs,
                    "percentages": {
                        m: (100.0 * c / decided_pairs if decided_pairs else 0.0)
                        for m, c in majority_counts.items()
                    },
                },
                "agreement": {
                    "pairs_with_multiple_judgments": multi,
                    "unanimous_pairs": unanimous,
                    "unanimous_fraction": (unanimous / multi) if multi else None,
                },
            }


class ReviewStore:
    """Loads and caches sessions under one storage directory."""

    def __init__(self, store_dir: Path):
        self.store_dir = Path(store_dir)
        self._cache: dict[str, ReviewSession] = {}
        self._lock = threading.Lock()

    def create(
        self,
        pairs: Sequence[PairInput],
        annotators: Sequence[str],
        seed: int,
        allow_ties: bool = False,
    ) -> ReviewSession:
        session = ReviewSession.create(pairs, annotators, seed, self.store_dir, allow_ties)
        with self._lock:
            self._cache[session.session_id] = session
        return session

    def get(self, session_id: str) -> ReviewSession:
        with self._lock:
            if session_id in self._cache:
                return self._cache[session_id]
        session_dir = self.store_dir / session_id
        session = ReviewSession.load(session_dir)
        with self._lock:
            return self._cache.setdefault(session_id, session)

    def list_sessions(self) -> list[str]:
        if not self.store_dir.exists():
            return []
        return sorted(p.name for p in self.store_dir.iterdir() if (p / "session.json").exists())


def create_app(store: ReviewStore, static_dir: Path | None = None):
    """FastAPI app exposing the annotation protocol plus the static UI."""
    from fastapi import FastAPI
    from fastapi.responses import JSONResponse

    app = FastAPI(title="rule review", docs_url=None, redoc_url=None)

    def error(status: int, message: str) -> JSONResponse:
        return JSONResponse(status_code=status, content={"error": message})

    @app.get("/session/{session_id}/next")
    def get_next(session_id: str, annotator: str = ""):
        try:
            session = store.get(session_id)
        except ReviewError:
            return error(404, "unknown session")
        try:
            return session.next_pair(annotator)
        except ReviewError as exc:
            return error(404, str(exc))

    @app.post("/session/{session_id}/verdict")
    def post_verdict(session_id: str, body: dict):
        try:
            session = store.get(session_id)
        except ReviewError:
            return error(404, "unknown session")
        if not isinstance(body, dict):
            return error(400, "body must be a JSON object")
        annotator = body.get("annotator", "")
        pair_id = body.get("pair_id", "")
        choice = body.get("choice", "")
        try:
            return session.submit_verdict(annotator, pair_id, choice)
        except AlreadyJudgedError:
            return error(409, "already judged")
        except ReviewError as exc:
            message = str(exc)
            status = 404 if "unknown" in message else 400
            return error(status, message)

    @app.get("/session/{session_id}/report")
    def get_report(session_id: str):
        try:
            session = store.get(session_id)
        except ReviewError:
            return error(404, "unknown session")
        try:
            return session.aggregate()
        except ReviewError as exc:
            return error(400, str(exc))

    @app.get("/sessions")
    def list_sessions():
        return {"sessions": store.list_sessions()}

    if static_dir is not None and Path(static_dir).is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=str(static_dir), html=True), name="ui")

    return app


def serve(store: ReviewStore, host: str, port: int, static_dir: Path | None = None) -> None:
    import uvicorn

    uvicorn.run(create_app(store, static_dir=static_dir), host=host, port=port, log_level="warning")
