"""Command line interface: `lexguide <command> --help` documents every flag.
"""

# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

# Copyright (c) 2021 scart97

__all__ = [
    "RunConfig",
    "RunManifest",
    "load_run_config",
    "write_manifest",
    "read_corpus",
    "main",
]

import functools
import json
import logging
import os
import sys
import warnings
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import click
from omegaconf import OmegaConf
from omegaconf.errors import OmegaConfBaseException

import lexguide
from lexguide.data import RolloutDataset, RolloutJob, run_rollouts
from lexguide.guidance import (
    build_guidance_tables,
    log_accept_probability,
    start_session,
)
from lexguide.hmm.distill import fit_baum_welch
from lexguide.hmm.model import Hmm, load_hmm, save_hmm
from lexguide.lexicon.dfa import build_keyphrase_dfa
from lexguide.lexicon.tokenizer import (
    KeyphraseConstraint,
    load_constraints,
    save_constraints,
    tokenize,
)
from lexguide.optimizer.trainer import (
    TrainConfig,
    distill_guidance_hmm,
    initial_policy,
    setup_training,
    train,
)
from lexguide.policy import load_policy
from lexguide.reports import analyze, comparison_rows, write_csv, write_trajectory_dump
from lexguide.rollout import sample_constraint
from lexguide.suites import SUITES, run_suite
from lexguide.toyworld import (
    ToyTask,
    ToyTaskConfig,
    default_constraints,
    evaluate_reward,
    generate_prompt,
)
from lexguide.utils import make_generator

logger = logging.getLogger(__name__)

SEED_ENV = "CTRLR_SEED"
COMPARE_RUNS = (
    ("unguided", "unguided", 0.2),
    ("reward_shaping", "reward_shaping", 0.2),
    ("ctrl_r_beta0", "ctrl_r", 0.0),
    ("ctrl_r_beta0.2", "ctrl_r", 0.2),
    ("ctrl_r_beta1", "ctrl_r", 1.0),
)
_SAMPLE_STREAM = 5


@dataclass
class RunConfig:
    """Everything a run is configured with.

    Attributes:
        train: Training and rollout settings.
        task: Toy task settings.
    """

    train: TrainConfig = field(default_factory=TrainConfig)
    task: ToyTaskConfig = field(default_factory=ToyTaskConfig)


@dataclass
class RunManifest:
    """Written as `manifest.json` in every output folder. Passing it back
    with `--config` reproduces the run.

    Attributes:
        command: Subcommand that produced the folder.
        config: Snapshot of the resolved run config.
        seed: Global seed actually used.
        artifacts: Written files, relative to the folder.
        code_version: Installed lexguide version.
        started: UTC timestamp of the start.
        finished: UTC timestamp of the end.
    """

    command: str
    config: Dict[str, Any]
    seed: int
    artifacts: List[str] = field(default_factory=list)
    code_version: str = lexguide.__version__
    started: str = ""
    finished: str = ""


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def load_run_config(
    path: Optional[str] = None,
    overrides: Optional[Dict[str, Any]] = None,
    task_path: Optional[str] = None,
) -> RunConfig:
    """Resolve the run config: defaults, then the json/yaml file, then the
    task spec file, then the command line overrides of the train section,
    then `CTRLR_SEED`. A run manifest is accepted as config file.

    Raises:
        click.ClickException: Unknown keys, wrong types or invalid values.
    """
    try:
        conf = OmegaConf.structured(RunConfig)
        if path is not None:
            loaded = OmegaConf.load(path)
            if "code_version" in loaded and "config" in loaded:
                loaded = loaded.config
            conf = OmegaConf.merge(conf, loaded)
        if task_path is not None:
            conf = OmegaConf.merge(conf, {"task": OmegaConf.load(task_path)})
        if overrides:
            cleaned = {k: v for k, v in overrides.items() if v is not None}
            conf = OmegaConf.merge(conf, {"train": cleaned})
        if os.environ.get(SEED_ENV):
            conf.train.seed = int(os.environ[SEED_ENV])
        return OmegaConf.to_object(conf)
    except (OmegaConfBaseException, ValueError) as err:
        raise click.ClickException(f"Invalid config: {err}") from err


def write_manifest(out_dir: Path, manifest: RunManifest):
    manifest.finished = _now()
    (out_dir / "manifest.json").write_text(json.dumps(asdict(manifest), indent=2))


def _new_manifest(command: str, config: RunConfig) -> RunManifest:
    return RunManifest(
        command=command, config=asdict(config), seed=config.train.seed, started=_now()
    )


def _task_and_constraints(
    config: RunConfig, constraints_path: Optional[str]
) -> Tuple[ToyTask, List[KeyphraseConstraint]]:
    task = ToyTask(config.task)
    if constraints_path is None:
        return task, default_constraints(task)
    return task, load_constraints(constraints_path, task.vocab)


def _hmm_for(config: RunConfig, task: ToyTask, path: Path, quiet: bool) -> Hmm:
    if path.exists():
        warnings.warn(f"Reusing the HMM checkpoint {path}, distillation skipped")
        return load_hmm(path)
    policy = initial_policy(config.train, task)
    hmm = distill_guidance_hmm(config.train, task, policy, quiet).hmm
    path.parent.mkdir(parents=True, exist_ok=True)
    save_hmm(hmm, path)
    return hmm


class _Group(click.Group):
    """Turn library errors into a one line diagnostic and exit status 1."""

    def invoke(self, ctx: click.Context):
        try:
            return super().invoke(ctx)
        except (ValueError, ArithmeticError, RuntimeError, OSError) as err:
            raise click.ClickException(f"{type(err).__name__}: {err}") from err


@click.group(cls=_Group)
@click.option("-v", "--verbose", count=True, help="Debug logging.")
@click.option("--quiet", is_flag=True, help="Hide progress bars.")
@click.version_option(lexguide.__version__, prog_name="lexguide")
@click.pass_context
def main(ctx: click.Context, verbose: int, quiet: bool):
    """Lexically guided rollouts for group relative policy optimization."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s: %(message)s",
        stream=sys.stderr,
    )
    ctx.obj = {"quiet": quiet}


@dataclass
class _ConfigFlags:
    config_path: Optional[str]
    task_path: Optional[str]
    overrides: Dict[str, Any]

    def load(self, **extra) -> RunConfig:
        return load_run_config(
            self.config_path, {**self.overrides, **extra}, self.task_path
        )


def _config_options(func):
    """Add the shared config flags, handed to the command as `flags`."""
    options = [
        click.option("--config", "config_path", type=click.Path(exists=True)),
        click.option(
            "--task", "task_path", type=click.Path(exists=True), help="Task spec file."
        ),
        click.option("--seed", type=int, help="Global seed."),
        click.option("--horizon", type=int, help="Maximum completion length."),
        click.option("--ctx-order", type=int, help="Context order of the policy."),
        click.option("--table-size", type=int, help="Rows of the policy table."),
    ]

    @functools.wraps(func)
    def wrapper(
        *args, config_path, task_path, seed, horizon, ctx_order, table_size, **kwargs
    ):
        flags = _ConfigFlags(
            config_path,
            task_path,
            {
                "seed": seed,
                "horizon": horizon,
                "ctx_order": ctx_order,
                "table_size": table_size,
            },
        )
        return func(*args, flags=flags, **kwargs)

    for option in reversed(options):
        wrapper = option(wrapper)
    return wrapper


def read_corpus(path: str, task: ToyTask) -> List[List[int]]:
    """Read a distillation corpus: one sequence of whitespace separated
    vocabulary pieces per line, blank lines skipped.

    Raises:
        UnknownToken: A piece is not in the task vocabulary.
    """
    corpus = []
    with open(path, "r", encoding="utf8") as f:
        for line in f:
            pieces = line.split()
            if pieces:
                corpus.append(tokenize(" ".join(pieces), task.vocab))
    return corpus


@main.command("distill-hmm")
@_config_options
@click.option(
    "--corpus",
    "corpus_path",
    type=click.Path(exists=True),
    help="Fit on this corpus instead of sampling one from the initial policy.",
)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--states", type=int, help="Latent states, overrides hmm_states.")
@click.pass_obj
def distill_hmm(obj, flags, corpus_path, out_path, states):
    """Fit the guidance HMM, on a corpus file or on continuations sampled
    from the initial policy.
    """
    config = flags.load(hmm_states=states)
    cfg = config.train
    task = ToyTask(config.task)
    if corpus_path:
        result = fit_baum_welch(
            read_corpus(corpus_path, task),
            cfg.hmm_states,
            task.vocab.size,
            seed=cfg.seed,
            max_iters=cfg.em_max_iters,
            tol=cfg.em_tol,
            quiet=obj["quiet"],
        )
    else:
        policy = initial_policy(cfg, task)
        result = distill_guidance_hmm(cfg, task, policy, obj["quiet"])
    for i, ll in enumerate(result.log_likelihoods):
        click.echo(f"iteration {i}\tlog-likelihood {ll:.8f}")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_hmm(result.hmm, out_path)
    click.echo(f"Saved {result.hmm.num_states} state HMM to {out_path}")


@main.command("build-dfa")
@_config_options
@click.option("--constraints", "constraints_path", type=click.Path(exists=True))
@click.option("--hmm", "hmm_path", type=click.Path(exists=True))
@click.option("--write", "write_path", type=click.Path(), help="Save the catalog.")
def build_dfa(flags, constraints_path, hmm_path, write_path):
    """Compile constraints and print their automaton sizes, plus their
    acceptance probability within the horizon under an HMM if given.
    """
    config = flags.load()
    task, constraints = _task_and_constraints(config, constraints_path)
    hmm = load_hmm(hmm_path) if hmm_path else None
    for constraint in constraints:
        dfa = build_keyphrase_dfa(constraint, task.vocab)
        line = f"{constraint.id}\tstates {dfa.state_count}"
        if hmm is not None:
            tables = build_guidance_tables(hmm, dfa, config.train.horizon)
            session = start_session(tables, [], log_floor=float("-inf"))
            line += f"\tlog P(accept) {log_accept_probability(session, tables):.6f}"
        click.echo(line)
    if write_path:
        save_constraints(write_path, constraints, task.vocab)


@main.command()
@_config_options
@click.option("--hmm", "hmm_path", type=click.Path(exists=True), required=True)
@click.option("--policy", "policy_path", type=click.Path(exists=True))
@click.option("--constraints", "constraints_path", type=click.Path(exists=True))
@click.option("--n", "num_trajectories", type=int, default=100, show_default=True)
@click.option("--unguided", is_flag=True, help="Sample from the policy alone.")
@click.option("--out", "out_path", type=click.Path(), required=True)
def sample(
    flags, hmm_path, policy_path, constraints_path, num_trajectories, unguided, out_path
):
    """Write a trajectory dump sampled on fresh prompts."""
    config = flags.load()
    cfg = config.train
    task, constraints = _task_and_constraints(config, constraints_path)
    hmm = load_hmm(hmm_path)
    if policy_path:
        policy = load_policy(policy_path)
    else:
        policy = initial_policy(cfg, task)
    tables = {
        c.id: build_guidance_tables(
            hmm, build_keyphrase_dfa(c, task.vocab), cfg.horizon
        )
        for c in constraints
    }
    generator = make_generator(cfg.seed, _SAMPLE_STREAM)
    jobs = []
    for slot in range(num_trajectories):
        prompt, prompt_id = generate_prompt(task, generator)
        jobs.append(
            RolloutJob(
                prompt_id=prompt_id,
                slot=slot,
                group=0,
                prompt=tuple(prompt),
                constraint_id=sample_constraint(list(tables), generator),
                stream=(_SAMPLE_STREAM,),
            )
        )
    dataset = RolloutDataset(
        jobs,
        policy,
        tables,
        cfg.horizon,
        cfg.seed,
        guided=not unguided,
        log_floor=cfg.log_infeasible_floor,
    )
    trajectories = run_rollouts(dataset, cfg.num_workers)
    for traj in trajectories:
        traj.reward = evaluate_reward(task, traj.prompt, traj.tokens)
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    write_trajectory_dump(out_path, trajectories)
    click.echo(f"Wrote {len(trajectories)} trajectories to {out_path}")


def _run_training(
    config: RunConfig,
    constraints_path: Optional[str],
    out_dir: Path,
    quiet: bool,
    hmm: Optional[Hmm] = None,
    command: str = "train",
) -> Dict[str, Any]:
    manifest = _new_manifest(command, config)
    out_dir.mkdir(parents=True, exist_ok=True)
    task, constraints = _task_and_constraints(config, constraints_path)
    if hmm is None:
        hmm = _hmm_for(config, task, out_dir / "hmm.pt", quiet)
    else:
        save_hmm(hmm, out_dir / "hmm.pt")
    save_constraints(out_dir / "constraints.json", constraints, task.vocab)

    state = setup_training(config.train, task, constraints, hmm=hmm, quiet=quiet)
    summary = train(state, config.train, out_dir, quiet=quiet)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))

    manifest.artifacts = sorted(
        p.name for p in out_dir.iterdir() if p.name != "manifest.json"
    )
    write_manifest(out_dir, manifest)
    return summary


@main.command("train")
@_config_options
@click.option("--constraints", "constraints_path", type=click.Path(exists=True))
@click.option("--baseline", type=click.Choice(["ctrl_r", "unguided", "reward_shaping"]))
@click.option("--beta", type=float, help="Power scaling of the importance weight.")
@click.option("--iterations", type=int)
@click.option("--num-workers", type=int)
@click.option("--out-dir", "--out", "out_dir", type=click.Path(), required=True)
@click.pass_obj
def train_command(
    obj, flags, constraints_path, baseline, beta, iterations, num_workers, out_dir
):
    """Distill the HMM unless the output folder has one, then train."""
    config = flags.load(
        baseline=baseline, beta=beta, iterations=iterations, num_workers=num_workers
    )
    summary = _run_training(config, constraints_path, Path(out_dir), obj["quiet"])
    click.echo(json.dumps(summary, indent=2))


@main.command("analyze")
@_config_options
@click.argument("source", type=click.Path(exists=True))
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--constraints", "constraints_path", type=click.Path(exists=True))
@click.option(
    "--pattern",
    "patterns",
    multiple=True,
    help="Extra usage pattern as NAME=PHRASE, for example loose=wait.",
)
def analyze_command(flags, source, out_dir, constraints_path, patterns):
    """Build reports from a trajectory dump or a training output folder."""
    config = flags.load()
    if constraints_path is None and (Path(source) / "constraints.json").exists():
        constraints_path = str(Path(source) / "constraints.json")
    task, constraints = _task_and_constraints(config, constraints_path)
    parsed = {}
    for spec in patterns:
        name, sep, phrase = spec.partition("=")
        if not sep:
            raise click.BadParameter(
                f"{spec!r} is not NAME=PHRASE", param_hint="--pattern"
            )
        parsed[name] = tokenize(phrase, task.vocab)
    for path in analyze(source, out_dir, constraints, parsed):
        click.echo(str(path))


@main.command("oracle-check")
@click.option(
    "--suite",
    type=click.Choice(sorted(SUITES) + ["all"]),
    default="all",
    show_default=True,
)
@click.option("--instances", type=int, help="Random instances per suite.")
@click.option("--seed", type=int, default=0, show_default=True)
def oracle_check(suite, instances, seed):
    """Cross-check the dynamic program and the sampler against enumeration."""
    names = sorted(SUITES) if suite == "all" else [suite]
    failed = []
    for name in names:
        result = run_suite(name, instances, seed)
        status = "ok" if result.passed else "FAILED"
        click.echo(
            f"{name}\tinstances {result.instances}\tmax error {result.max_error:.3e}"
            f"\ttolerance {result.tolerance:.0e}\t{status}"
        )
        if not result.passed:
            failed.append(name)
    if failed:
        raise click.ClickException(f"Tolerance violated by: {', '.join(failed)}")


@main.command()
@_config_options
@click.option("--constraints", "constraints_path", type=click.Path(exists=True))
@click.option("--seeds", "num_seeds", type=int, default=3, show_default=True)
@click.option("--iterations", type=int)
@click.option("--out-dir", "--out", "out_dir", type=click.Path(), required=True)
@click.pass_obj
def compare(obj, flags, constraints_path, num_seeds, iterations, out_dir):
    """Train the baselines and the power scaling sweep over several seeds
    and write the comparison table.
    """
    base = flags.load(iterations=iterations)
    out_dir = Path(out_dir)
    summaries = []
    for offset in range(num_seeds):
        run_seed = base.train.seed + offset
        hmm = None
        for name, baseline, beta in COMPARE_RUNS:
            config = flags.load(
                seed=run_seed, iterations=iterations, baseline=baseline, beta=beta
            )
            config.train.seed = run_seed
            run_dir = out_dir / f"{name}_seed{run_seed}"
            logger.info("Running %s with seed %d", name, run_seed)
            if hmm is None:
                hmm_path = out_dir / f"hmm_seed{run_seed}.pt"
                hmm = _hmm_for(config, ToyTask(config.task), hmm_path, obj["quiet"])
            summary = _run_training(
                config, constraints_path, run_dir, obj["quiet"], hmm, "compare"
            )
            summaries.append({"run": name, **summary})
    write_csv(out_dir / "comparison.csv", comparison_rows(summaries))
    click.echo(str(out_dir / "comparison.csv"))


if __name__ == "__main__":  # pragma: no cover
    main()
