"""Command-line entry points: scenario generation, dataset capture, model
training, evaluation against the baselines, serving and deterministic replay.

Exit codes: 0 success, 2 configuration error, 3 runtime error. Delimited
outputs (CSV/JSONL) are the primary artifacts; report figures are rendered
as PNG next to them.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import subprocess
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .graph import Scenario
from .predictor import GACRNNModel, TrainConfig, evaluate as evaluate_predictor, train as train_predictor_model
from .scheduler import (CentralitySource, DdqnConfig, DisposalEnv, EnvConfig,
                        SurrogateSource, dqn_policy, export_gantt,
                        greedy_action, run_metrics, run_policy,
                        slot_network_factory, train_ddqn, vi_c_constraints,
                        write_run_log)
from .service import load_policy, replay as replay_run, save_policy
from .sim import (CaptureResult, EmergencySim, ScenarioConfig, ConfigError,
                  capture_dataset, generate_scenario, random_events,
                  scale_events)

log = logging.getLogger("emdispatch")


def version_string() -> str:
    try:
        described = subprocess.run(["git", "describe", "--always", "--dirty"],
                                   capture_output=True, text=True, timeout=5,
                                   cwd=Path(__file__).parent)
        if described.returncode == 0:
            return f"{__version__}+{described.stdout.strip()}"
    except Exception:
        pass
    return __version__


def write_manifest(out_path: Path, command: str, config: dict,
                   seed, artifacts: list[str]) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "artifacts": artifacts,
        "version": version_string(),
    }
    path = Path(str(out_path) + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_json_config(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise click.UsageError(f"cannot read config {path}: {exc}")


@click.group()
@click.option("--log-level", envvar="DISPATCH_LOG_LEVEL", default="WARNING",
              show_default=True, help="logging level (env: DISPATCH_LOG_LEVEL)")
def main(log_level):
    logging.basicConfig(level=getattr(logging, log_level.upper(), logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


@main.command("gen-scenario")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="JSON overriding warehouse layout counts")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def gen_scenario(config_path, seed, out):
    """Emit a warehouse scenario JSON (150-station default layout)."""
    overrides = load_json_config(config_path)
    try:
        cfg = ScenarioConfig(**{**overrides, "seed": seed})
        scenario = generate_scenario(cfg)
    except (TypeError, ConfigError) as exc:
        raise click.UsageError(str(exc))
    scenario.save(out)
    write_manifest(Path(out), "gen-scenario", overrides, seed, [str(out)])
    click.echo(f"wrote {out} ({len(scenario.stations.nodes)} stations)")


@main.command("capture-dataset")
@click.option("--scenario", "scenario_path", required=True, type=click.Path(exists=True))
@click.option("--runs", type=int, default=4, show_default=True)
@click.option("--ticks", type=int, default=600, show_default=True)
@click.option("--events", "n_events", type=int, default=4, show_default=True)
@click.option("--fire/--no-fire", default=True, show_default=True)
@click.option("--window", type=int, default=20, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def capture_dataset_cmd(scenario_path, runs, ticks, n_events, fire, window, seed, out):
    """Simulate labeled runs and write the JSONL tick-record dataset."""
    scenario = Scenario.load(scenario_path)

    def make_sim(i):
        run_seed = seed + i
        events = random_events(scenario, run_seed, n_events, fire,
                               onset_window=max(1, ticks // 2))
        return EmergencySim(scenario, episode_ticks=ticks, seed=run_seed,
                            events=events)

    capture = capture_dataset(make_sim, runs, window)
    capture.save(out)
    write_manifest(Path(out), "capture-dataset",
                   {"scenario": str(scenario_path), "runs": runs, "ticks": ticks,
                    "events": n_events, "fire": fire, "window": window},
                   seed, [str(out)])
    click.echo(f"wrote {out} ({len(capture.records)} tick records, "
               f"{len(capture.windows())} windows)")


@main.command("train-predictor")
@click.option("--dataset", "dataset_path", required=True, type=click.Path(exists=True))
@click.option("--scenario", "scenario_path", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--ablation", is_flag=True, help="train the temporal-only variant")
@click.option("--stride", type=int, default=1, show_default=True)
@click.option("--out", required=True, type=click.Path())
def train_predictor_cmd(dataset_path, scenario_path, config_path, seed, ablation,
                        stride, out):
    """Fit the key-node prediction model on a captured dataset."""
    overrides = load_json_config(config_path)
    try:
        cfg = TrainConfig(**{**overrides, "seed": seed})
    except TypeError as exc:
        raise click.UsageError(str(exc))
    scenario = Scenario.load(scenario_path)
    adjacency = scenario.build().base.adjacency
    capture = CaptureResult.load(dataset_path, window=cfg.window)
    train_set, test_set = capture.split(0.8, stride=stride)
    if not train_set:
        raise click.UsageError("dataset yields no training windows")
    mode = "identity" if ablation else "attention"
    model, history = train_predictor_model(train_set, adjacency, cfg, graph_mode=mode)
    model.save(out)
    metrics = evaluate_predictor(model, test_set, adjacency) if test_set else {}
    metrics_path = Path(str(out) + ".metrics.json")
    metrics_path.write_text(json.dumps(metrics, indent=1))
    curve_csv = Path(str(out) + ".loss.csv")
    with open(curve_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss"])
        writer.writerows(enumerate(history))
    from . import report
    curve_png = Path(str(out) + ".loss.png")
    report.save_curve(history, curve_png, "training loss", "epoch", "cross-entropy")
    write_manifest(Path(out), "train-predictor",
                   {"dataset": str(dataset_path), "scenario": str(scenario_path),
                    "ablation": ablation, **overrides}, seed,
                   [str(out), str(metrics_path), str(curve_csv), str(curve_png)])
    click.echo(f"wrote {out}; test metrics: "
               + json.dumps({k: round(v, 4) for k, v in metrics.items()
                             if k != "confusion"}))


class _SeedCyclingFactory:
    def __init__(self, scenario, scale, ticks, seeds):
        self.scenario = scenario
        self.scale = scale
        self.ticks = ticks
        self.seeds = list(seeds)
        self.i = -1

    def __call__(self):
        self.i = (self.i + 1) % len(self.seeds)
        seed = self.seeds[self.i]
        return EmergencySim(self.scenario, episode_ticks=self.ticks, seed=seed,
                            events=scale_events(self.scale, self.scenario, seed))


@main.command("train-scheduler")
@click.option("--scenario", "scenario_path", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--scale", type=click.Choice(["1", "2", "3"]), default="1",
              show_default=True)
@click.option("--episodes", type=int, default=None,
              help="override the configured episode count")
@click.option("--ticks", type=int, default=600, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--resume", "resume_path", type=click.Path(exists=True), default=None)
@click.option("--out", required=True, type=click.Path())
def train_scheduler_cmd(scenario_path, config_path, scale, episodes, ticks, seed,
                        resume_path, out):
    """Train the constraint-masked Double DQN scheduler offline."""
    overrides = load_json_config(config_path)
    try:
        cfg = DdqnConfig(**{**overrides, "seed": seed})
    except TypeError as exc:
        raise click.UsageError(str(exc))
    if episodes is not None:
        cfg.episodes = episodes
    scenario = Scenario.load(scenario_path)
    factory = _SeedCyclingFactory(scenario, int(scale), ticks, range(24))
    env = DisposalEnv(factory, SurrogateSource(), vi_c_constraints())
    env.reset()

    resume_pair, resume_eps, done_eps = None, None, 0
    if resume_path:
        resume_pair = load_policy(resume_path)
        ckpt = json.loads(Path(resume_path + ".ckpt.json").read_text())
        resume_eps, done_eps = ckpt["epsilon"], ckpt["episode"]

    result = train_ddqn(env, cfg, net_factory=slot_network_factory(env),
                        resume_pair=resume_pair, resume_epsilon=resume_eps,
                        episodes_done=done_eps)
    finished = done_eps + len(result.episode_rewards)
    if finished < cfg.episodes:
        # interrupted: leave a resumable checkpoint and signal the caller
        ckpt_path = str(out) + ".ckpt"
        save_policy(result.pair, ckpt_path)
        Path(ckpt_path + ".ckpt.json").write_text(json.dumps(
            {"episode": finished, "epsilon": result.epsilon}))
        click.echo(f"interrupted after {finished} episodes; "
                   f"resume with --resume {ckpt_path}", err=True)
        sys.exit(3)
    save_policy(result.pair, out)
    curve = result.episode_rewards
    curve_csv = Path(str(out) + ".rewards.csv")
    with open(curve_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode", "reward"])
        writer.writerows(enumerate(curve))
    from . import report
    curve_png = Path(str(out) + ".rewards.png")
    report.save_curve(curve, curve_png, "episode reward", "episode", "sum of r",
                      smooth=25)
    write_manifest(Path(out), "train-scheduler",
                   {"scenario": str(scenario_path), "scale": int(scale),
                    "capacity": cfg.capacity, "batch_size": cfg.batch_size,
                    "episodes": cfg.episodes, "gamma": cfg.gamma,
                    "epsilon_start": cfg.epsilon_start,
                    "epsilon_floor": cfg.epsilon_floor,
                    "epsilon_decay": cfg.epsilon_decay, **overrides},
                   seed, [str(out), str(curve_csv), str(curve_png)])
    click.echo(f"wrote {out} after {cfg.episodes} episodes")


@main.command("evaluate")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True),
              help="trained scheduler policy (HEC-DDQN)")
@click.option("--cddqn-model", "cddqn_path", type=click.Path(exists=True),
              default=None, help="optional separately trained unconstrained policy")
@click.option("--scenario", "scenario_path", required=True, type=click.Path(exists=True))
@click.option("--scale", type=click.Choice(["1", "2", "3"]), default="1",
              show_default=True)
@click.option("--episodes", type=int, default=20, show_default=True)
@click.option("--ticks", type=int, default=600, show_default=True)
@click.option("--seed", type=int, default=100, show_default=True)
@click.option("--out", required=True, type=click.Path(),
              help="output directory for the CSV and figures")
def evaluate_cmd(model_path, cddqn_path, scenario_path, scale, episodes, ticks,
                 seed, out):
    """Run HEC-DDQN vs greedy vs the centrality-ranked C-DDQN baseline."""
    if episodes <= 0:
        raise click.UsageError("--episodes must be positive")
    scenario = Scenario.load(scenario_path)
    pair = load_policy(model_path)
    cpair = load_policy(cddqn_path) if cddqn_path else pair
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    scale_i = int(scale)

    def factory(s):
        return lambda: EmergencySim(scenario, episode_ticks=ticks, seed=s,
                                    events=scale_events(scale_i, scenario, s))

    algorithms = [
        ("greedy", SurrogateSource(), vi_c_constraints(), greedy_action),
        ("hec_ddqn", SurrogateSource(), vi_c_constraints(), dqn_policy(pair)),
        ("c_ddqn", CentralitySource(), [], dqn_policy(cpair)),
    ]
    rows = []
    gantt_saved = []
    for name, source, rules, policy in algorithms:
        rw, rf, rr = [], [], []
        last_env = None
        for ep in range(episodes):
            env = DisposalEnv(factory(seed + ep), source, rules)
            tick_log, _ = run_policy(env, policy)
            metrics = run_metrics(tick_log)
            rw.append(metrics["mean_r_work"])
            rf.append(metrics["rate_fail"])
            rr.append(metrics["mean_r"])
            last_env = env
        rows.append({"algorithm": name, "scale": scale_i,
                     "mean_R_work": float(np.mean(rw)),
                     "rate_fail": float(np.mean(rf)),
                     "mean_r": "" if name == "greedy" else float(np.mean(rr))})
        bars = export_gantt(last_env.tick_log, scenario.stations.areas)
        gantt_csv = out_dir / f"gantt_{name}.csv"
        with open(gantt_csv, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["station", "area", "label",
                                                    "kind", "start", "end"])
            writer.writeheader()
            writer.writerows(bars)
        from . import report
        report.save_gantt(bars, out_dir / f"gantt_{name}.png")
        write_run_log(last_env.tick_log, out_dir / f"run_{name}.jsonl")
        gantt_saved += [str(gantt_csv), str(out_dir / f"gantt_{name}.png")]

    table = out_dir / "metrics.csv"
    with open(table, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["algorithm", "scale",
                                                "mean_R_work", "rate_fail",
                                                "mean_r"])
        writer.writeheader()
        writer.writerows(rows)
    from . import report
    bars_png = out_dir / "metrics.png"
    report.save_metric_bars(rows, bars_png)
    write_manifest(table, "evaluate",
                   {"model": str(model_path), "scenario": str(scenario_path),
                    "scale": scale_i, "episodes": episodes,
                    "cddqn_model": cddqn_path}, seed,
                   [str(table), str(bars_png)] + gantt_saved)
    for row in rows:
        click.echo(json.dumps(row))


@main.command("serve")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="JSON: host, port")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8321, show_default=True)
def serve_cmd(config_path, host, port):
    """Start the collaboration service."""
    import uvicorn
    from .service import create_app
    overrides = load_json_config(config_path)
    host = overrides.get("host", host)
    port = int(overrides.get("port", port))
    click.echo(f"serving on http://{host}:{port}")
    try:
        uvicorn.run(create_app(), host=host, port=port, log_level="warning")
    except (OSError, SystemExit) as exc:
        if isinstance(exc, OSError):
            click.echo(f"cannot bind {host}:{port}: {exc}", err=True)
            sys.exit(3)
        raise


@main.command("replay")
@click.argument("run_file", type=click.Path(exists=True))
@click.option("--out", type=click.Path(), default=None,
              help="optional directory for the gantt export of the replay")
def replay_cmd(run_file, out):
    """Re-execute a persisted session and verify frame identity."""
    from .service import ServiceError
    try:
        session, frames, mismatches = replay_run(run_file)
    except ServiceError as exc:
        click.echo(str(exc), err=True)
        sys.exit(2 if exc.status in (400,) else 3)
    if out:
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        bars = session.gantt()
        with open(out_dir / "gantt.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["station", "area", "label",
                                                    "kind", "start", "end"])
            writer.writeheader()
            writer.writerows(bars)
        from . import report
        report.save_gantt(bars, out_dir / "gantt.png")
    if mismatches:
        click.echo("replay diverged: " + "; ".join(mismatches[:5]), err=True)
        sys.exit(3)
    click.echo(f"replayed {len(frames)} frames, all identical")


if __name__ == "__main__":
    main()
