"""Experiment harness: run configs to report files, compare runs, and build
the cost-ordering bench table."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

from .config import ExperimentConfig
from .errors import ContractError
from .federation import RunResult, run_experiment
from .model import TransformerConfig, save_checkpoint
from .partition import CostModel, Method, build_plan, build_workload, simulate_cost

_METHOD_PLANS = (("fl-llm", Method.PLAINTEXT), ("method2", Method.METHOD2),
                 ("method1", Method.METHOD1), ("swmt", Method.SWMT))


def run(cfg: ExperimentConfig, dataset=None) -> RunResult:
    return run_experiment(cfg, dataset)


def write_run_outputs(result: RunResult, out_dir: str, trace: bool = False) -> dict:
    """report.json / audit.json / cost.json and the final adapter checkpoint
    (+ optional trace.jsonl) in out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    for name, payload in (("report", result.report), ("audit", result.audit.to_dict()),
                          ("cost", result.cost.to_dict())):
        path = os.path.join(out_dir, f"{name}.json")
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
        paths[name] = path
    adapters = result.model.snapshot_trainable()
    if adapters:
        path = os.path.join(out_dir, "adapters.bin")
        save_checkpoint(adapters, path)
        paths["adapters"] = path
    if trace:
        path = os.path.join(out_dir, "trace.jsonl")
        result.trace.to_jsonl(path)
        paths["trace"] = path
    return paths


# ---------------------------------------------------------------------------
# compare

COMPARE_COLUMNS = ("method", "tuning", "accuracy", "trainable_params",
                   "simulated_cost", "audit")


def _audit_cell(report: dict) -> str:
    if report["method"] in ("fl-llm", "plaintext"):
        return "n/a-plaintext"
    return "pass" if report["audit"]["passed"] else "FAIL"


@dataclass
class CompareTable:
    columns: tuple
    rows: list

    def to_csv(self) -> str:
        lines = [",".join(self.columns)]
        for row in self.rows:
            lines.append(",".join(str(v) for v in row))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        widths = [max(len(str(c)), *(len(str(r[i])) for r in self.rows))
                  for i, c in enumerate(self.columns)]
        def fmt(vals):
            return "  ".join(str(v).ljust(w) for v, w in zip(vals, widths))
        out = [fmt(self.columns), fmt("-" * w for w in widths)]
        out.extend(fmt(r) for r in self.rows)
        return "\n".join(out)


def compare(reports: list[dict]) -> CompareTable:
    """Aligned table over reports; every cell traces to a report field."""
    if not reports:
        raise ContractError("compare needs at least one report")
    dataset_ids = {r.get("dataset_id") for r in reports}
    if len(dataset_ids) != 1:
        raise ContractError(f"reports ran on different datasets: {sorted(dataset_ids)}")
    rows = []
    for r in reports:
        rows.append((r["method"], r["tuning"], round(float(r["final_accuracy"]), 4),
                     int(r["trainable_params"]), round(float(r["cost"]["total"]), 3),
                     _audit_cell(r)))
    return CompareTable(COMPARE_COLUMNS, rows)


# ---------------------------------------------------------------------------
# bench: simulated-cost table across the four schemes, no training


def bench(cfg: ExperimentConfig | None = None, cost_model: CostModel | None = None) -> dict:
    cfg = cfg or ExperimentConfig()
    mc: TransformerConfig = cfg.model_config()
    cm = cost_model or CostModel()
    entries = []
    for name, method in _METHOD_PLANS:
        split = cfg.split_layer if method is Method.METHOD2 else None
        plan = build_plan(mc, method, split)
        wl = build_workload(mc, cfg.seq_len, training=True, plan=plan)
        entries.append({"method": name, "cost": simulate_cost(plan, wl, cm).to_dict()})
    ordered = sorted(entries, key=lambda e: e["cost"]["total"])
    return {
        "entries": entries,
        "ordering": [e["method"] for e in ordered],
        "strictly_ordered": all(
            ordered[i]["cost"]["total"] < ordered[i + 1]["cost"]["total"]
            for i in range(len(ordered) - 1)),
        "weights": cm.to_dict(),
    }


def bench_table(result: dict) -> CompareTable:
    rows = [(e["method"], round(e["cost"]["total"], 3), round(e["cost"]["trusted_units"], 1),
             round(e["cost"]["untrusted_units"], 1), round(e["cost"]["crossings"], 1))
            for e in result["entries"]]
    return CompareTable(("method", "total_cost", "trusted_units", "untrusted_units",
                         "crossings"), rows)
