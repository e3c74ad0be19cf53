"""Command-line client for the REST service, plus the offline benchmark harness.

Exit codes: 0 success, 2 input error, 3 transport error, 4 not found,
5 server error.
"""

from __future__ import annotations

import json
import time
from pathlib import Path
from urllib.parse import urlparse

import click
import httpx
import numpy as np

EXIT_OK, EXIT_INPUT, EXIT_TRANSPORT, EXIT_NOT_FOUND, EXIT_SERVER = 0, 2, 3, 4, 5


class CliFailure(click.ClickException):
    def __init__(self, message: str, exit_code: int):
        super().__init__(message)
        self.exit_code = exit_code


class Client:
    def __init__(self, base_url: str, timeout: float = 30.0):
        parsed = urlparse(base_url)
        if parsed.scheme not in ("http", "https") or not parsed.netloc:
            raise CliFailure(f"malformed server URL {base_url!r}", EXIT_INPUT)
        self.base = base_url.rstrip("/")
        self.timeout = timeout

    def request(self, method: str, path: str, **kw) -> httpx.Response:
        try:
            resp = httpx.request(method, self.base + path, timeout=self.timeout, **kw)
        except httpx.TransportError as exc:
            raise CliFailure(f"cannot reach {self.base}: {exc}", EXIT_TRANSPORT) from exc
        if resp.status_code >= 400:
            if resp.status_code == 404:
                code = EXIT_NOT_FOUND
            elif resp.status_code >= 500:
                code = EXIT_SERVER
            else:
                code = EXIT_INPUT
            raise CliFailure(f"HTTP {resp.status_code}: {resp.text}", code)
        return resp

    def json(self, method: str, path: str, **kw):
        return self.request(method, path, **kw).json()

    def wait_job(self, job_id: str, timeout: float = 3600.0, poll: float = 0.2) -> dict:
        deadline = time.monotonic() + timeout
        while True:
            job = self.json("GET", f"/v1/jobs/{job_id}")
            if job["state"] in ("succeeded", "failed"):
                return job
            if time.monotonic() > deadline:
                raise CliFailure(f"job {job_id} still {job['state']} after {timeout}s", EXIT_TRANSPORT)
            time.sleep(poll)


def _read_json(path: str):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise CliFailure(f"cannot read {path}: {exc}", EXIT_INPUT) from exc
    except json.JSONDecodeError as exc:
        raise CliFailure(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}", EXIT_INPUT) from exc


def _read_text(path: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise CliFailure(f"cannot read {path}: {exc}", EXIT_INPUT) from exc


def _emit(obj, fmt: str) -> None:
    if fmt == "json" or not isinstance(obj, (dict, list)):
        click.echo(json.dumps(obj, indent=2, sort_keys=True) if not isinstance(obj, str) else obj)
    else:
        rows = obj if isinstance(obj, list) else [obj]
        for row in rows:
            click.echo(",".join(f"{k}={v}" for k, v in row.items()))


@click.group()
@click.option("--server", envvar="CLAAS_SERVER", default="http://127.0.0.1:8000", show_default=True)
@click.option("--out", type=click.Path(file_okay=False), default=".", show_default=True, help="Output directory.")
@click.option("--format", "fmt", type=click.Choice(["json", "csv"]), default="json", show_default=True)
@click.pass_context
def main(ctx: click.Context, server: str, out: str, fmt: str) -> None:
    """Continual-learning service client."""
    ctx.obj = {"server": server, "out": Path(out), "format": fmt}


def _client(ctx: click.Context) -> Client:
    return Client(ctx.obj["server"])


@main.command()
@click.argument("config", type=click.Path(dir_okay=False))
@click.pass_context
def init(ctx, config):
    """Create an experiment from an ExperimentConfig JSON file."""
    doc = _read_json(config)
    resp = _client(ctx).json("POST", "/v1/experiments", json=doc)
    click.echo(resp["experiment_id"])


@main.command()
@click.argument("experiment_id")
@click.option("--classes", help="Comma-separated class list of the experience.")
@click.option("--train", "train_path", type=click.Path(dir_okay=False), help="Headerless CSV of training rows.")
@click.option("--test", "test_path", type=click.Path(dir_okay=False), help="Headerless CSV of test rows.")
@click.option("--from-scenario", type=int, help="Push experience N of the configured scenario instead.")
@click.pass_context
def push(ctx, experiment_id, classes, train_path, test_path, from_scenario):
    """Push one experience to an experiment."""
    if from_scenario is not None:
        payload = {"from_scenario": from_scenario}
    else:
        if not (classes and train_path and test_path):
            raise CliFailure("give --classes, --train and --test, or --from-scenario", EXIT_INPUT)
        try:
            class_list = [int(c) for c in classes.split(",")]
        except ValueError as exc:
            raise CliFailure(f"bad --classes: {exc}", EXIT_INPUT) from exc
        payload = {"classes": class_list, "train_csv": _read_text(train_path), "test_csv": _read_text(test_path)}
    resp = _client(ctx).json("POST", f"/v1/experiments/{experiment_id}/experiences", json=payload)
    click.echo(resp["experience_index"])


@main.command()
@click.argument("experiment_id")
@click.option("--wait/--no-wait", default=False, help="Block until the job finishes.")
@click.pass_context
def train(ctx, experiment_id, wait):
    """Trigger a training job for pending experiences."""
    client = _client(ctx)
    job_id = client.json("POST", f"/v1/experiments/{experiment_id}/jobs")["job_id"]
    click.echo(job_id)
    if wait:
        job = client.wait_job(job_id)
        if job["state"] == "failed":
            raise CliFailure(f"job {job_id} failed: {job['error']}", EXIT_SERVER)


@main.command()
@click.argument("experiment_id", required=False)
@click.option("--job", "job_id", help="Show a job instead of an experiment.")
@click.pass_context
def status(ctx, experiment_id, job_id):
    """Show experiment or job status."""
    if job_id:
        _emit(_client(ctx).json("GET", f"/v1/jobs/{job_id}"), "json")
    elif experiment_id:
        _emit(_client(ctx).json("GET", f"/v1/experiments/{experiment_id}"), "json")
    else:
        _emit(_client(ctx).json("GET", "/v1/health"), "json")


@main.command()
@click.argument("experiment_id")
@click.pass_context
def metrics(ctx, experiment_id):
    """Print the aggregated metrics (per --format)."""
    fmt = ctx.obj["format"]
    resp = _client(ctx).request("GET", f"/v1/experiments/{experiment_id}/metrics", params={"format": fmt})
    click.echo(resp.text if fmt == "csv" else json.dumps(resp.json(), indent=2, sort_keys=True), nl=fmt != "csv")


@main.command()
@click.argument("experiment_id")
@click.argument("samples", type=click.Path(dir_okay=False))
@click.option("--labeled", is_flag=True, help="First CSV column is the label (needed by perf_decay).")
@click.pass_context
def observe(ctx, experiment_id, samples, labeled):
    """Send production samples (CSV, one row per sample) to the drift monitor."""
    try:
        rows = np.loadtxt(samples, delimiter=",", ndmin=2)
    except (OSError, ValueError) as exc:
        raise CliFailure(f"cannot parse {samples}: {exc}", EXIT_INPUT) from exc
    payload = {}
    if labeled:
        payload["labels"] = rows[:, 0].astype(int).tolist()
        rows = rows[:, 1:]
    payload["samples"] = rows.tolist()
    _emit(_client(ctx).json("POST", f"/v1/experiments/{experiment_id}/observe", json=payload), "json")


@main.command()
@click.argument("experiment_id")
@click.argument("what", type=click.Choice(["metrics", "weights"]))
@click.option("--version", "version", type=int, help="Model version (weights; default latest).")
@click.option("--run", type=int, default=0, show_default=True)
@click.pass_context
def export(ctx, experiment_id, what, version, run):
    """Download metrics or a CLBW weights blob into --out."""
    client = _client(ctx)
    out: Path = ctx.obj["out"]
    out.mkdir(parents=True, exist_ok=True)
    if what == "metrics":
        fmt = ctx.obj["format"]
        resp = client.request("GET", f"/v1/experiments/{experiment_id}/metrics", params={"format": fmt})
        path = out / f"{experiment_id}.metrics.{fmt}"
    else:
        if version is None:
            versions = client.json("GET", f"/v1/experiments/{experiment_id}/versions", params={"run": run})
            if not versions:
                raise CliFailure(f"experiment {experiment_id} has no versions", EXIT_NOT_FOUND)
            version = max(v["version"] for v in versions)
        resp = client.request(
            "GET", f"/v1/experiments/{experiment_id}/versions/{version}/weights", params={"run": run}
        )
        path = out / f"{experiment_id}.run{run}.v{version}.clbw"
    path.write_bytes(resp.content)
    click.echo(str(path))


@main.command()
@click.option("--preset", type=click.Choice(["blobs10"]), default="blobs10", show_default=True)
@click.option(
    "--strategy",
    "strategies",
    multiple=True,
    type=click.Choice(["naive", "cumulative", "replay"]),
    default=("cumulative", "replay"),
    show_default=True,
)
@click.option("--seeds", default="1,2,3", show_default=True, help="Comma-separated run seeds.")
@click.option("--memory-size", type=int, default=2000, show_default=True)
@click.option("--remote", is_flag=True, help="Run through the REST service at --server instead of in-process.")
@click.pass_context
def bench(ctx, preset, strategies, seeds, memory_size, remote):
    """Run a benchmark preset; write <out>/<strategy>/{time_memory,accuracy}.csv."""
    from .evaluation import aggregate
    from .harness import PRESETS, bench_tables, preset_config, run_stream

    try:
        seed_list = [int(s) for s in seeds.split(",") if s.strip()]
    except ValueError as exc:
        raise CliFailure(f"bad --seeds: {exc}", EXIT_INPUT) from exc
    if not seed_list:
        raise CliFailure("need at least one seed", EXIT_INPUT)
    p = PRESETS[preset]
    out: Path = ctx.obj["out"]
    for name in strategies:
        if remote:
            try:
                config = preset_config(p, name, seed_list, memory_size)
            except ValueError as exc:
                raise CliFailure(str(exc), EXIT_INPUT) from exc
            client = _client(ctx)
            exp_id = client.json("POST", "/v1/experiments", json=config)["experiment_id"]
            for i in range(p.n_experiences):
                client.json("POST", f"/v1/experiments/{exp_id}/experiences", json={"from_scenario": i})
            job = client.wait_job(client.json("POST", f"/v1/experiments/{exp_id}/jobs")["job_id"])
            if job["state"] != "succeeded":
                raise CliFailure(f"benchmark job failed: {job['error']}", EXIT_SERVER)
            doc = client.json("GET", f"/v1/experiments/{exp_id}/metrics", params={"format": "json"})
            mean, std, runs = doc["mean"], doc["std"], doc["runs"]
        else:
            scenario = p.scenario()
            cfg = p.strategy(name, memory_size=memory_size)
            records = [run_stream(p.model_spec(s), cfg, scenario)[1] for s in seed_list]
            agg = aggregate(records)
            mean, std, runs = agg.mean, agg.std, len(records)
        time_csv, acc_csv = bench_tables(mean, std, runs)
        target = out / name
        target.mkdir(parents=True, exist_ok=True)
        (target / "time_memory.csv").write_text(time_csv)
        (target / "accuracy.csv").write_text(acc_csv)
        click.echo(f"{name}: {target / 'time_memory.csv'} {target / 'accuracy.csv'} (averaged on {runs} runs)")


if __name__ == "__main__":
    main()
