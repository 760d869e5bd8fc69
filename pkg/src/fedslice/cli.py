"""Command-line client for the fedslice service.

Every subcommand talks to the HTTP API: against `--server URL` when given,
otherwise against an in-process instance of the app, so local runs need no
daemon and stay reproducible from (config file, seed).
"""

from __future__ import annotations

import json
import os
import sys

import click
import numpy as np

from .config import ExperimentConfig, load_config
from .data import Dataset, SyntheticTask, save_dataset


class ServiceClient:
    def __init__(self, server: str | None):
        if server:
            import httpx
            self._http = httpx.Client(base_url=server, timeout=600.0)
        else:
            import warnings
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                from fastapi.testclient import TestClient

            from .service import app
            self._http = TestClient(app)

    def _check(self, resp) -> dict:
        if resp.status_code >= 400:
            try:
                detail = resp.json().get("detail", resp.text)
            except Exception:
                detail = resp.text
            raise click.ClickException(f"service error {resp.status_code}: {detail}")
        return resp.json()

    def post(self, path: str, payload: dict) -> dict:
        return self._check(self._http.post(path, json=payload))

    def get(self, path: str) -> dict:
        return self._check(self._http.get(path))


def _client(ctx) -> ServiceClient:
    return ServiceClient(ctx.obj.get("server"))


def _write_json(path: str, payload: dict) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def _config_payload(config, seed, method, tuning, precision, sets) -> dict:
    from .config import _coerce
    from .errors import ContractError
    overrides: dict = {}
    for item in sets:
        if "=" not in item:
            raise click.ClickException(f"--set expects key=value, got {item!r}")
        overrides[item.split("=", 1)[0]] = item.split("=", 1)[1]
    if seed is not None:
        overrides["seed"] = seed
    if method:
        overrides["method"] = method
    if tuning:
        overrides["tuning"] = tuning
    if precision:
        overrides["precision"] = precision
    try:
        typed = {k: _coerce(k, v) if isinstance(v, str) else v
                 for k, v in overrides.items()}
        cfg = load_config(config, typed) if config else ExperimentConfig(**typed)
    except ContractError as exc:
        raise click.ClickException(str(exc))
    return cfg.to_dict()


@click.group()
@click.option("--server", envvar="FEDSLICE_SERVER", default=None,
              help="Service URL; default runs the service in-process.")
@click.pass_context
def main(ctx, server):
    ctx.ensure_object(dict)
    ctx.obj["server"] = server


@main.command("gen-data")
@click.option("--seed", type=int, default=0)
@click.option("--n-classes", type=int, default=3)
@click.option("--seq-len", type=int, default=8)
@click.option("--vocab", type=int, default=24)
@click.option("--separation", type=float, default=0.95)
@click.option("--n-train", type=int, default=90)
@click.option("--n-test", type=int, default=60)
@click.option("--n-clients", type=int, default=3)
@click.option("--out", required=True, type=click.Path())
@click.pass_context
def gen_data(ctx, seed, n_classes, seq_len, vocab, separation, n_train, n_test,
             n_clients, out):
    """Generate a synthetic dataset and write it to OUT."""
    payload = {"seed": seed, "n_classes": n_classes, "seq_len": seq_len, "vocab": vocab,
               "separation": separation, "n_train": n_train, "n_test": n_test,
               "n_clients": n_clients}
    resp = _client(ctx).post("/datasets", payload)
    ds = Dataset(
        task=SyntheticTask(**resp["task"]), seed=resp["seed"],
        train_tokens=np.asarray(resp["train_tokens"], dtype=np.int64),
        train_labels=np.asarray(resp["train_labels"], dtype=np.int64),
        test_tokens=np.asarray(resp["test_tokens"], dtype=np.int64),
        test_labels=np.asarray(resp["test_labels"], dtype=np.int64),
        shards=[np.asarray(s, dtype=np.int64) for s in resp["shards"]])
    save_dataset(ds, out)
    click.echo(f"dataset {resp['dataset_id']} written to {out}")


@main.command("run")
@click.option("--config", type=click.Path(exists=True), default=None,
              help="Sectioned key/value config file; flags override it.")
@click.option("--seed", type=int, default=None)
@click.option("--method", type=click.Choice(["method1", "method2", "fl-llm", "swmt"]),
              default=None)
@click.option("--tuning", type=click.Choice(["lora", "ptuningv2"]), default=None)
@click.option("--precision", type=click.Choice(["exact", "simhalf"]), default=None)
@click.option("--set", "sets", multiple=True, help="Extra key=value override.")
@click.option("--out", required=True, type=click.Path())
@click.pass_context
def run_cmd(ctx, config, seed, method, tuning, precision, sets, out):
    """Run one experiment; writes report.json, audit.json, cost.json to OUT."""
    payload = _config_payload(config, seed, method, tuning, precision, sets)
    resp = _client(ctx).post("/runs", payload)
    os.makedirs(out, exist_ok=True)
    _write_json(os.path.join(out, "report.json"), resp["report"])
    _write_json(os.path.join(out, "audit.json"), resp["audit"])
    _write_json(os.path.join(out, "cost.json"), resp["cost"])
    rep = resp["report"]
    click.echo(f"{resp['run_id']}: method={rep['method']} "
               f"accuracy={rep['final_accuracy']:.4f} "
               f"params={rep['trainable_params']} audit="
               f"{'pass' if rep['audit']['passed'] else 'FAIL'}")
    click.echo(f"outputs in {out}")


@main.command("compare")
@click.argument("reports", nargs=-1, required=True,
                type=click.Path(exists=True, dir_okay=True))
@click.option("--out", type=click.Path(), default=None, help="Write table.csv here.")
@click.pass_context
def compare_cmd(ctx, reports, out):
    """Align runs into one table. REPORTS are report.json files or run dirs."""
    loaded = []
    for path in reports:
        if os.path.isdir(path):
            path = os.path.join(path, "report.json")
        with open(path) as fh:
            loaded.append(json.load(fh))
    resp = _client(ctx).post("/compare", {"reports": loaded})
    click.echo(resp["text"])
    if out:
        target = os.path.join(out, "table.csv") if os.path.isdir(out) or not \
            out.endswith(".csv") else out
        os.makedirs(os.path.dirname(target) or ".", exist_ok=True)
        with open(target, "w") as fh:
            fh.write(resp["csv"])
        click.echo(f"table written to {target}")


@main.command("audit")
@click.argument("path", type=click.Path(exists=True))
@click.pass_context
def audit_cmd(ctx, path):
    """Evaluate an audit.json (or report.json) and print the verdict."""
    if os.path.isdir(path):
        path = os.path.join(path, "audit.json")
    with open(path) as fh:
        payload = json.load(fh)
    resp = _client(ctx).post("/audit/evaluate", {"audit": payload})
    click.echo(f"audit: {resp['status']} (violations={resp['violations']}, "
               f"pad_reuse={resp['pad_reuse_count']})")
    if not resp["passed"]:
        sys.exit(1)


@main.command("bench")
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--set", "sets", multiple=True)
@click.option("--out", type=click.Path(), default=None)
@click.pass_context
def bench_cmd(ctx, config, sets, out):
    """Simulated-cost comparison of all four schemes on the default workload."""
    payload = _config_payload(config, None, None, None, None, sets)
    resp = _client(ctx).post("/bench", {"config": payload})
    click.echo(resp["table"]["text"])
    click.echo("ordering (cheapest first): " + " < ".join(resp["ordering"]))
    if out:
        os.makedirs(out, exist_ok=True)
        _write_json(os.path.join(out, "cost.json"),
                    {"entries": resp["entries"], "ordering": resp["ordering"],
                     "weights": resp["weights"]})
        with open(os.path.join(out, "table.csv"), "w") as fh:
            fh.write(resp["table"]["csv"])
        click.echo(f"outputs in {out}")


@main.command("serve")
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8470)
def serve_cmd(host, port):
    """Start the HTTP service."""
    import uvicorn

    from .service import app
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
