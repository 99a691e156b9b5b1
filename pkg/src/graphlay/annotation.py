"""Human-judgment collection for generated summaries.

A session enumerates one task per generated-summary sentence for a seeded
sample of articles across the models under comparison.  Judges submit binary
readability/factuality verdicts; judgments go to an append-only JSONL log
that is fsynced before the submission is acknowledged, so results are always
a pure replay of the log.  Model identity is hidden behind stable anonymized
codes unless blinding is disabled.
"""
from __future__ import annotations

import json
import os
import random
import threading
import time
from dataclasses import asdict, dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Mapping, Sequence
from urllib.parse import parse_qs, urlparse

from .corpus import Article, sentence_texts
from .errors import AnnotationError, DuplicateJudgmentError, UnknownTaskError
from .metrics import cohens_kappa, mann_whitney_u

CRITERIA = ("readability", "factuality")


@dataclass(frozen=True)
class JudgmentTask:
    task_id: str
    model: str  # anonymized code when the session is blind
    article_id: str
    sentence_index: int
    sentence_text: str
    article_sections: tuple[tuple[str, str], ...]  # (title, text) pairs
    reference_lay_summary: str

    def payload(self) -> dict:
        return {
            "task_id": self.task_id,
            "model": self.model,
            "article_id": self.article_id,
            "sentence_index": self.sentence_index,
            "sentence_text": self.sentence_text,
            "article_sections": [{"title": t, "text": x} for t, x in self.article_sections],
            "reference_lay_summary": self.reference_lay_summary,
        }


@dataclass(frozen=True)
class Judgment:
    task_id: str
    judge_id: str
    readability: int
    factuality: int
    timestamp: float


@dataclass
class Session:
    session_id: str
    blind: bool
    sample_ids: list[str]
    model_codes: dict[str, str]  # real model name -> anonymized code
    base_model: str  # real model name
    tasks: list[JudgmentTask] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "blind": self.blind,
            "sample_ids": self.sample_ids,
            "model_codes": self.model_codes,
            "base_model": self.base_model,
            "tasks": [
                {
                    "task_id": t.task_id,
                    "model": t.model,
                    "article_id": t.article_id,
                    "sentence_index": t.sentence_index,
                    "sentence_text": t.sentence_text,
                    "article_sections": [list(s) for s in t.article_sections],
                    "reference_lay_summary": t.reference_lay_summary,
                }
                for t in self.tasks
            ],
        }

    @classmethod
    def from_json_dict(cls, d: Mapping) -> "Session":
        tasks = [
            JudgmentTask(
                task_id=t["task_id"],
                model=t["model"],
                article_id=t["article_id"],
                sentence_index=t["sentence_index"],
                sentence_text=t["sentence_text"],
                article_sections=tuple((s[0], s[1]) for s in t["article_sections"]),
                reference_lay_summary=t["reference_lay_summary"],
            )
            for t in d["tasks"]
        ]
        return cls(
            session_id=d["session_id"],
            blind=d["blind"],
            sample_ids=list(d["sample_ids"]),
            model_codes=dict(d["model_codes"]),
            base_model=d["base_model"],
            tasks=tasks,
        )


def _run_outputs(run_dir: Path) -> tuple[str, dict[str, str]]:
    config_path = run_dir / "config.json"
    name = run_dir.name
    if config_path.exists():
        name = json.loads(config_path.read_text(encoding="utf-8")).get("variant", name)
    outputs_path = run_dir / "outputs.jsonl"
    if not outputs_path.exists():
        raise AnnotationError(f"run directory {run_dir} has no outputs.jsonl")
    outputs = {}
    with outputs_path.open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                outputs[obj["id"]] = obj["summary"]
    return name, outputs


def create_session(
    run_dirs: Sequence[Path],
    corpus: Sequence[Article],
    session_dir: Path,
    sample_size: int = 5,
    seed: int = 0,
    blind: bool = True,
    base_run: str | Path | None = None,
) -> Session:
    """Build (or resume) a judgment session over the given runs.

    Articles are sampled with the given seed from the ids present in every
    run's outputs; each sentence of each sampled summary becomes a task.  If
    ``session_dir/session.json`` already exists the stored session is
    returned unchanged so a restart replays identically.
    """
    session_dir = Path(session_dir)
    session_path = session_dir / "session.json"
    if session_path.exists():
        return Session.from_json_dict(json.loads(session_path.read_text(encoding="utf-8")))
    if not run_dirs:
        raise AnnotationError("create_session requires at least one run directory")

    runs = [_run_outputs(Path(r)) for r in run_dirs]
    names = [name for name, _ in runs]
    if len(set(names)) != len(names):
        raise AnnotationError(f"duplicate model names among runs: {names}")
    base_model = names[0]
    if base_run is not None:
        base_model = _run_outputs(Path(base_run))[0]
        if base_model not in names:
            raise AnnotationError(f"base run {base_run} is not among the listed runs")

    by_id = {a.id: a for a in corpus}
    shared = set(by_id)
    for _, outputs in runs:
        shared &= set(outputs)
    if not shared:
        raise AnnotationError("no article ids shared by the corpus and every run")
    rng = random.Random(seed)
    sample_ids = sorted(rng.sample(sorted(shared), min(sample_size, len(shared))))

    codes = [f"M{i + 1}" for i in range(len(names))]
    shuffled = sorted(names)
    rng.shuffle(shuffled)
    model_codes = {name: codes[i] for i, name in enumerate(shuffled)}

    tasks: list[JudgmentTask] = []
    for name, outputs in sorted(runs, key=lambda r: model_codes[r[0]]):
        code = model_codes[name]
        visible = code if blind else name
        for art_id in sample_ids:
            article = by_id[art_id]
            sections = tuple(
                (s.title, s.text) for s in (article.abstract, *article.sections)
            )
            for i, sent in enumerate(sentence_texts(outputs[art_id])):
                tasks.append(
                    JudgmentTask(
                        task_id=f"{code}:{art_id}:{i}",
                        model=visible,
                        article_id=art_id,
                        sentence_index=i,
                        sentence_text=sent,
                        article_sections=sections,
                        reference_lay_summary=article.lay_summary or "",
                    )
                )

    session = Session(
        session_id=f"session-{seed}-{len(tasks)}",
        blind=blind,
        sample_ids=sample_ids,
        model_codes=model_codes,
        base_model=base_model,
        tasks=tasks,
    )
    session_dir.mkdir(parents=True, exist_ok=True)
    session_path.write_text(json.dumps(session.to_json_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return session


def resume_session(session_dir: Path) -> Session:
    session_path = Path(session_dir) / "session.json"
    if not session_path.exists():
        raise AnnotationError(f"no session.json under {session_dir}")
    return Session.from_json_dict(json.loads(session_path.read_text(encoding="utf-8")))


class AnnotationService:
    """Judgment collection over one session: durable log, replayable results."""

    def __init__(self, session: Session, session_dir: Path):
        self.session = session
        self.session_dir = Path(session_dir)
        self.session_dir.mkdir(parents=True, exist_ok=True)
        self.log_path = self.session_dir / "judgments.jsonl"
        self._lock = threading.Lock()
        self._by_task = {t.task_id: t for t in session.tasks}
        self._judgments: dict[tuple[str, str], Judgment] = {}
        if self.log_path.exists():
            with self.log_path.open(encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        obj = json.loads(line)
                        j = Judgment(**obj)
                        self._judgments[(j.task_id, j.judge_id)] = j

    # -- task flow ---------------------------------------------------------

    def judged_count(self, judge_id: str) -> int:
        return sum(1 for (_, judge) in self._judgments if judge == judge_id)

    def next_task(self, judge_id: str) -> JudgmentTask | None:
        """Lowest-indexed task this judge has not judged yet."""
        for task in self.session.tasks:
            if (task.task_id, judge_id) not in self._judgments:
                return task
        return None

    def submit(self, judgment: Mapping) -> Judgment:
        required = {"task_id", "judge_id", "readability", "factuality"}
        missing = required - set(judgment)
        if missing:
            raise AnnotationError(f"judgment missing fields: {sorted(missing)}")
        task_id = judgment["task_id"]
        judge_id = str(judgment["judge_id"])
        if not judge_id:
            raise AnnotationError("judge_id must be non-empty")
        if task_id not in self._by_task:
            raise UnknownTaskError(f"unknown task id {task_id!r}")
        for crit in CRITERIA:
            if judgment[crit] not in (0, 1, True, False):
                raise AnnotationError(f"{crit} must be binary")
        record = Judgment(
            task_id=task_id,
            judge_id=judge_id,
            readability=int(judgment["readability"]),
            factuality=int(judgment["factuality"]),
            timestamp=float(judgment.get("timestamp") or time.time()),
        )
        with self._lock:
            if (task_id, judge_id) in self._judgments:
                raise DuplicateJudgmentError(f"judge {judge_id!r} already judged task {task_id!r}")
            with self.log_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(asdict(record), sort_keys=True) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            self._judgments[(task_id, judge_id)] = record
        return record

    # -- results -----------------------------------------------------------

    def results(self) -> dict:
        """Per-model positive-classification percentages averaged across
        judges, pairwise judge agreement, and significance versus the base
        model on per-sentence scores."""
        code_to_model = {code: name for name, code in self.session.model_codes.items()}
        tasks_by_model: dict[str, list[JudgmentTask]] = {name: [] for name in self.session.model_codes}
        for task in self.session.tasks:
            real = task.model if not self.session.blind else code_to_model[task.model]
            tasks_by_model[real].append(task)

        judgments_by_task: dict[str, list[Judgment]] = {}
        judges: dict[str, int] = {}
        for (task_id, judge_id), j in self._judgments.items():
            judgments_by_task.setdefault(task_id, []).append(j)
            judges[judge_id] = judges.get(judge_id, 0) + 1

        def sentence_scores(model: str, criterion: str) -> list[float]:
            scores = []
            for task in tasks_by_model[model]:
                js = judgments_by_task.get(task.task_id)
                if js:
                    scores.append(sum(getattr(j, criterion) for j in js) / len(js))
            return scores

        base = self.session.base_model
        base_scores = {c: sentence_scores(base, c) for c in CRITERIA}

        models = {}
        for name in sorted(tasks_by_model):
            entry: dict = {
                "code": self.session.model_codes[name],
                "sentences": len(tasks_by_model[name]),
            }
            task_ids = {t.task_id for t in tasks_by_model[name]}
            for crit in CRITERIA:
                per_judge = []
                for judge_id in sorted(judges):
                    verdicts = [
                        getattr(j, crit)
                        for (task_id, jid), j in self._judgments.items()
                        if jid == judge_id and task_id in task_ids
                    ]
                    if verdicts:
                        per_judge.append(100.0 * sum(verdicts) / len(verdicts))
                entry[f"{crit}_pct"] = sum(per_judge) / len(per_judge) if per_judge else None
                scores = sentence_scores(name, crit)
                if name == base:
                    p = 1.0 if scores else None
                elif scores and base_scores[crit]:
                    _, p = mann_whitney_u(scores, base_scores[crit])
                else:
                    p = None
                entry[f"{crit}_p"] = p
                entry[f"{crit}_significant"] = bool(p is not None and p < 0.05)
            models[name] = entry

        kappa: dict[str, dict[str, float]] = {c: {} for c in CRITERIA}
        judge_ids = sorted(judges)
        for i, j1 in enumerate(judge_ids):
            for j2 in judge_ids[i + 1:]:
                shared = [
                    task.task_id
                    for task in self.session.tasks
                    if (task.task_id, j1) in self._judgments and (task.task_id, j2) in self._judgments
                ]
                if not shared:
                    continue
                for crit in CRITERIA:
                    r1 = [getattr(self._judgments[(t, j1)], crit) for t in shared]
                    r2 = [getattr(self._judgments[(t, j2)], crit) for t in shared]
                    kappa[crit][f"{j1}|{j2}"] = cohens_kappa(r1, r2)

        return {
            "session_id": self.session.session_id,
            "blind": self.session.blind,
            "base_model": base,
            "model_codes": dict(self.session.model_codes),
            "total_tasks": len(self.session.tasks),
            "total_judgments": len(self._judgments),
            "judges": judges,
            "models": models,
            "kappa": kappa,
        }


# ---------------------------------------------------------------------------
# HTTP layer


def _make_handler(service: AnnotationService, static_dir: Path | None):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):  # silence request logging
            pass

        def _send_json(self, status: int, obj) -> None:
            body = json.dumps(obj).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json; charset=utf-8")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _send_static(self, rel: str) -> None:
            if static_dir is None:
                self._send_json(404, {"error": "no static assets configured"})
                return
            rel = rel.lstrip("/") or "index.html"
            target = (static_dir / rel).resolve()
            if not str(target).startswith(str(static_dir.resolve())) or not target.is_file():
                self._send_json(404, {"error": f"not found: /{rel}"})
                return
            ctype = {
                ".html": "text/html; charset=utf-8",
                ".js": "text/javascript; charset=utf-8",
                ".css": "text/css; charset=utf-8",
                ".map": "application/json",
                ".svg": "image/svg+xml",
            }.get(target.suffix, "application/octet-stream")
            body = target.read_bytes()
            self.send_response(200)
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_GET(self) -> None:
            url = urlparse(self.path)
            if url.path == "/api/session":
                self._send_json(
                    200,
                    {
                        "session_id": service.session.session_id,
                        "blind": service.session.blind,
                        "total_tasks": len(service.session.tasks),
                        "models": sorted(service.session.model_codes.values()),
                        "sample_ids": service.session.sample_ids,
                    },
                )
                return
            if url.path == "/api/tasks/next":
                judge = parse_qs(url.query).get("judge", [""])[0]
                if not judge:
                    self._send_json(400, {"error": "judge query parameter is required"})
                    return
                task = service.next_task(judge)
                judged = service.judged_count(judge)
                total = len(service.session.tasks)
                if task is None:
                    self._send_json(200, {"done": True, "judged": judged, "total": total})
                    return
                payload = task.payload()
                payload.update({"done": False, "judged": judged, "total": total})
                self._send_json(200, payload)
                return
            if url.path == "/api/results":
                self._send_json(200, service.results())
                return
            if url.path.startswith("/api/"):
                self._send_json(404, {"error": f"unknown endpoint {url.path}"})
                return
            self._send_static(url.path)

        def do_POST(self) -> None:
            url = urlparse(self.path)
            if url.path != "/api/judgments":
                self._send_json(404, {"error": f"unknown endpoint {url.path}"})
                return
            try:
                length = int(self.headers.get("Content-Length", "0"))
                obj = json.loads(self.rfile.read(length).decode("utf-8"))
            except (ValueError, json.JSONDecodeError):
                self._send_json(400, {"error": "malformed JSON body"})
                return
            try:
                record = service.submit(obj)
            except DuplicateJudgmentError as e:
                self._send_json(409, {"error": str(e)})
                return
            except UnknownTaskError as e:
                self._send_json(404, {"error": str(e)})
                return
            except AnnotationError as e:
                self._send_json(400, {"error": str(e)})
                return
            self._send_json(
                201,
                {"ok": True, "task_id": record.task_id,
                 "judged": service.judged_count(record.judge_id),
                 "total": len(service.session.tasks)},
            )

    return Handler


def serve(
    service: AnnotationService,
    host: str = "127.0.0.1",
    port: int = 0,
    static_dir: str | Path | None = None,
) -> ThreadingHTTPServer:
    """Bind the HTTP server (port 0 picks a free port); caller runs
    ``serve_forever`` and ``server_close``."""
    handler = _make_handler(service, Path(static_dir) if static_dir else None)
    return ThreadingHTTPServer((host, port), handler)
