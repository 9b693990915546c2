"""Run reports rendered as markdown tables, CSV or JSON."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

FORMATS = ("markdown", "csv", "json")


@dataclass
class DetectionRow:
    dataset: str
    recall: float
    precision: float
    f_measure: float
    variant: str = ""


@dataclass
class CrossCell:
    train: str
    test: str
    accuracy: float


@dataclass
class RunReport:
    fold_accuracies: list[float] = field(default_factory=list)
    mean_accuracy: float | None = None
    dataset: str = ""
    detection: list[DetectionRow] = field(default_factory=list)
    cross_dataset: list[CrossCell] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    discarded: int = 0

    def __post_init__(self):
        self.fold_accuracies = [float(a) for a in self.fold_accuracies]
        self.detection = [d if isinstance(d, DetectionRow) else DetectionRow(**d) for d in self.detection]
        self.cross_dataset = [c if isinstance(c, CrossCell) else CrossCell(**c)
                              for c in self.cross_dataset]
        if self.fold_accuracies and self.mean_accuracy is None:
            self.mean_accuracy = sum(self.fold_accuracies) / len(self.fold_accuracies)

    @classmethod
    def from_folds(cls, accuracies: Sequence[float], **kwargs) -> "RunReport":
        return cls(fold_accuracies=list(accuracies), **kwargs)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        return cls(**json.loads(text))


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def render_markdown(report: RunReport) -> str:
    out = []
    title = f"Results: {report.dataset}" if report.dataset else "Results"
    out += [f"## {title}", ""]
    if report.fold_accuracies:
        out += ["| Fold | Accuracy (%) |", "|---|---|"]
        out += [f"| {i + 1} | {_fmt(a)} |" for i, a in enumerate(report.fold_accuracies)]
        out += [f"| Mean | {_fmt(report.mean_accuracy)} |", ""]
    if report.detection:
        out += ["| Dataset | Variant | Recall (%) | Precision (%) | F-Measure (%) |",
                "|---|---|---|---|---|"]
        out += [f"| {d.dataset} | {d.variant} | {_fmt(d.recall)} | {_fmt(d.precision)} | "
                f"{_fmt(d.f_measure)} |" for d in report.detection]
        out.append("")
    if report.cross_dataset:
        trains = list(dict.fromkeys(c.train for c in report.cross_dataset))
        tests = list(dict.fromkeys(c.test for c in report.cross_dataset))
        cells = {(c.train, c.test): c.accuracy for c in report.cross_dataset}
        out += ["| Train \\ Test | " + " | ".join(tests) + " |",
                "|---" * (len(tests) + 1) + "|"]
        for tr in trains:
            row = [_fmt(cells[(tr, te)]) if (tr, te) in cells else "-" for te in tests]
            out.append(f"| {tr} | " + " | ".join(row) + " |")
        out.append("")
    if report.seeds:
        out += ["| Seed | Value |", "|---|---|"]
        out += [f"| {k} | {v} |" for k, v in sorted(report.seeds.items())]
        out.append("")
    if report.config:
        out += ["| Setting | Value |", "|---|---|"]
        out += [f"| {k} | {v} |" for k, v in sorted(report.config.items())]
        out.append("")
    if report.discarded:
        out += [f"Samples discarded for class balance: {report.discarded}", ""]
    return "\n".join(out)


def render_csv(report: RunReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["section", "key", "value", "extra1", "extra2", "extra3"])
    w.writerow(["meta", "dataset", report.dataset])
    w.writerow(["meta", "discarded", report.discarded])
    for i, a in enumerate(report.fold_accuracies):
        w.writerow(["fold", i + 1, repr(a)])
    if report.mean_accuracy is not None:
        w.writerow(["fold", "mean", repr(report.mean_accuracy)])
    for d in report.detection:
        w.writerow(["detection", d.dataset, d.variant, repr(d.recall), repr(d.precision),
                    repr(d.f_measure)])
    for c in report.cross_dataset:
        w.writerow(["cross", c.train, c.test, repr(c.accuracy)])
    for k, v in sorted(report.seeds.items()):
        w.writerow(["seed", k, json.dumps(v)])
    for k, v in sorted(report.config.items()):
        w.writerow(["config", k, json.dumps(v)])
    return buf.getvalue()


def parse_csv(text: str) -> RunReport:
    rows = list(csv.reader(io.StringIO(text)))[1:]
    kw: dict = {"fold_accuracies": [], "detection": [], "cross_dataset": [], "seeds": {}, "config": {}}
    for row in rows:
        section = row[0]
        if section == "meta" and row[1] == "dataset":
            kw["dataset"] = row[2]
        elif section == "meta" and row[1] == "discarded":
            kw["discarded"] = int(row[2])
        elif section == "fold" and row[1] == "mean":
            kw["mean_accuracy"] = float(row[2])
        elif section == "fold":
            kw["fold_accuracies"].append(float(row[2]))
        elif section == "detection":
            kw["detection"].append(DetectionRow(row[1], float(row[3]), float(row[4]), float(row[5]),
                                                row[2]))
        elif section == "cross":
            kw["cross_dataset"].append(CrossCell(row[1], row[2], float(row[3])))
        elif section == "seed":
            kw["seeds"][row[1]] = json.loads(row[2])
        elif section == "config":
            kw["config"][row[1]] = json.loads(row[2])
    return RunReport(**kw)


def emit_report(report: RunReport, path, fmt: str = "markdown") -> Path:
    fmt = {"md": "markdown"}.get(fmt, fmt)
    if fmt not in FORMATS:
        raise ValueError(f"unknown report format {fmt!r}; choose from {FORMATS}")
    text = {"markdown": render_markdown, "csv": render_csv}.get(fmt, lambda r: r.to_json() + "\n")(report)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def detection_row(dataset: str, metrics: tuple[float, float, float], variant: str = "") -> DetectionRow:
    return DetectionRow(dataset, *metrics, variant=variant)


def cross_matrix(cells: Mapping[tuple[str, str], float]) -> list[CrossCell]:
    return [CrossCell(tr, te, acc) for (tr, te), acc in cells.items()]
