"""HTTP service wrapping the simulator: dataset generation, experiment runs,
comparisons, cost benches, audits, and the split-fine-tuning predict path."""

from __future__ import annotations

import dataclasses
import threading

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, create_model

from . import __version__
from .config import ExperimentConfig
from .data import SyntheticTask, gen_dataset
from .errors import ContractError, MaskReuse, ProtocolError, SecurityBreach
from .federation import RunResult, predict_with_server, run_experiment
from .harness import CompareTable, bench, bench_table, compare
from .partition import CostModel

# request/response schemas ----------------------------------------------------

RunParams = create_model(
    "RunParams",
    **{f.name: (type(f.default), f.default)
       for f in dataclasses.fields(ExperimentConfig)})


class DatasetRequest(BaseModel):
    n_classes: int = 3
    seq_len: int = 8
    vocab: int = 24
    separation: float = 0.95
    n_train: int = 90
    n_test: int = 60
    n_clients: int = 3
    seed: int = 0


class DatasetResponse(BaseModel):
    dataset_id: str
    seed: int
    task: dict
    train_tokens: list
    train_labels: list
    test_tokens: list
    test_labels: list
    shards: list


class RunResponse(BaseModel):
    run_id: str
    report: dict
    audit: dict
    cost: dict


class RunSummary(BaseModel):
    run_id: str
    method: str
    final_accuracy: float


class CompareRequest(BaseModel):
    reports: list[dict] = []
    run_ids: list[str] = []


class TableResponse(BaseModel):
    columns: list
    rows: list
    csv: str
    text: str


class BenchRequest(BaseModel):
    config: dict = {}
    cost_model: dict = {}


class BenchResponse(BaseModel):
    entries: list
    ordering: list
    strictly_ordered: bool
    weights: dict
    table: TableResponse


class PredictRequest(BaseModel):
    tokens: list[int]


class PredictResponse(BaseModel):
    logits: list[float]
    label: int


class AuditEvaluateRequest(BaseModel):
    audit: dict


class AuditEvaluateResponse(BaseModel):
    passed: bool
    violations: int
    pad_reuse_count: int
    status: str


class HealthResponse(BaseModel):
    status: str
    version: str


# run registry ------------------------------------------------------------------


class RunStore:
    def __init__(self):
        self._lock = threading.Lock()
        self._runs: dict[str, RunResult] = {}
        self._seq = 0

    def add(self, result: RunResult) -> str:
        with self._lock:
            self._seq += 1
            run_id = f"run-{self._seq:04d}-{result.report['method']}"
            self._runs[run_id] = result
            return run_id

    def get(self, run_id: str) -> RunResult:
        with self._lock:
            if run_id not in self._runs:
                raise KeyError(run_id)
            return self._runs[run_id]

    def list(self) -> list[tuple[str, RunResult]]:
        with self._lock:
            return list(self._runs.items())


app = FastAPI(title="fedslice", version=__version__)
store = RunStore()

_BAD_REQUEST = (ContractError, ProtocolError, MaskReuse, SecurityBreach,
                TypeError, ValueError)


def _table_response(table: CompareTable) -> TableResponse:
    return TableResponse(columns=list(table.columns), rows=[list(r) for r in table.rows],
                         csv=table.to_csv(), text=table.to_text())


@app.get("/health", response_model=HealthResponse)
def health():
    return HealthResponse(status="ok", version=__version__)


@app.post("/datasets", response_model=DatasetResponse)
def make_dataset(req: DatasetRequest):
    try:
        task = SyntheticTask(n_classes=req.n_classes, seq_len=req.seq_len, vocab=req.vocab,
                             separation=req.separation, n_train=req.n_train,
                             n_test=req.n_test, n_clients=req.n_clients)
        ds = gen_dataset(task, req.seed)
    except _BAD_REQUEST as exc:
        raise HTTPException(status_code=400, detail=str(exc))
    return DatasetResponse(
        dataset_id=ds.dataset_id, seed=ds.seed, task=dataclasses.asdict(ds.task),
        train_tokens=ds.train_tokens.tolist(), train_labels=ds.train_labels.tolist(),
        test_tokens=ds.test_tokens.tolist(), test_labels=ds.test_labels.tolist(),
        shards=[s.tolist() for s in ds.shards])


@app.post("/runs", response_model=RunResponse)
def submit_run(params: RunParams):
    try:
        cfg = ExperimentConfig(**params.model_dump())
        result = run_experiment(cfg)
    except _BAD_REQUEST as exc:
        raise HTTPException(status_code=400, detail=str(exc))
    run_id = store.add(result)
    return RunResponse(run_id=run_id, report=result.report,
                       audit=result.audit.to_dict(), cost=result.cost.to_dict())


@app.get("/runs")
def list_runs():
    return {"runs": [RunSummary(run_id=rid, method=res.report["method"],
                                final_accuracy=res.report["final_accuracy"]).model_dump()
                     for rid, res in store.list()]}


@app.get("/runs/{run_id}", response_model=RunResponse)
def get_run(run_id: str):
    try:
        result = store.get(run_id)
    except KeyError:
        raise HTTPException(status_code=404, detail=f"unknown run {run_id}")
    return RunResponse(run_id=run_id, report=result.report,
                       audit=result.audit.to_dict(), cost=result.cost.to_dict())


@app.post("/runs/{run_id}/predict", response_model=PredictResponse)
def predict(run_id: str, req: PredictRequest):
    try:
        result = store.get(run_id)
    except KeyError:
        raise HTTPException(status_code=404, detail=f"unknown run {run_id}")
    if result.server is None:
        raise HTTPException(status_code=400,
                            detail="predict is served only by method2 runs")
    try:
        logits = predict_with_server(result, np.asarray(req.tokens, dtype=np.int64))
    except _BAD_REQUEST as exc:
        raise HTTPException(status_code=400, detail=str(exc))
    return PredictResponse(logits=[float(v) for v in logits.reshape(-1)],
                           label=int(np.argmax(logits)))


@app.post("/compare", response_model=TableResponse)
def compare_runs(req: CompareRequest):
    reports = list(req.reports)
    try:
        for rid in req.run_ids:
            reports.append(store.get(rid).report)
    except KeyError as exc:
        raise HTTPException(status_code=404, detail=f"unknown run {exc}")
    try:
        table = compare(reports)
    except _BAD_REQUEST as exc:
        raise HTTPException(status_code=400, detail=str(exc))
    return _table_response(table)


@app.post("/bench", response_model=BenchResponse)
def bench_costs(req: BenchRequest):
    try:
        cfg = ExperimentConfig(**req.config) if req.config else ExperimentConfig()
        cm = CostModel(**req.cost_model) if req.cost_model else None
        result = bench(cfg, cm)
    except _BAD_REQUEST as exc:
        raise HTTPException(status_code=400, detail=str(exc))
    return BenchResponse(**result, table=_table_response(bench_table(result)))


@app.post("/audit/evaluate", response_model=AuditEvaluateResponse)
def evaluate_audit(req: AuditEvaluateRequest):
    audit = req.audit.get("audit", req.audit)  # accept a report or a bare audit
    try:
        passed = bool(audit["passed"])
        violations = len(audit.get("violations", []))
        reuse = int(audit.get("pad_reuse_count", 0))
    except (KeyError, TypeError) as exc:
        raise HTTPException(status_code=400, detail=f"not an audit report: {exc}")
    status = "pass" if passed else "FAIL"
    return AuditEvaluateResponse(passed=passed, violations=violations,
                                 pad_reuse_count=reuse, status=status)
