"""Command-line frontend: ingest, run, check-witness, score, precond.

A single TOML config drives reproducible runs; all paths inside it are
resolved relative to the config file.  Exit codes: 0 success, 1 domain
failure (invalid witness, inequivalent precondition, failed scoring), 2
usage or configuration error.
"""

from __future__ import annotations

import json
import re
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import click

from . import corpus as corpus_mod
from . import evalcore, lasso, oracle, precond
from ._toml import load_toml_text
from .corpus import Category, CorpusManifest
from .cparse import INT, parse_program, Program, UnsupportedConstruct
from .evalcore import (
    ConfusionCounts, EvalConfig, EvalReport, ModelReport, PoolEntry,
    WitnessStatus, bootstrap_eval, classify_sample, score_by_length_bin,
    unknown_rates, witness_metrics,
)
from .lasso import (
    BoundedEvidence, CheckerConfig, Infeasible, LassoPath, ProvenInfinite,
    Unknown, ValidationStatus, ValidatorConfig, check_feasibility,
    extract_lasso, run_external_validator,
)
from .witness import (
    FormatError, Prediction, ProducerMeta, Verdict, emit_graphml,
    parse_prediction, validate_schema,
)


@dataclass
class RunConfig:
    corpus_root: Path | None
    manifest_path: Path | None
    categories: set[Category] | None
    exclusions: Path | None
    sidecar: Path | None
    models: list[oracle.ModelConfig]
    eval: EvalConfig
    checker: CheckerConfig
    validator: ValidatorConfig | None
    output_dir: Path
    prompt_kind: str  # "termination" | "precondition"


def _fail(message: str, code: int = 2):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def load_config(path: Path | str) -> RunConfig:
    path = Path(path)
    try:
        data = load_toml_text(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise click.ClickException(f"cannot read config: {exc}")
    base = path.parent

    def rel(value) -> Path:
        p = Path(value)
        return p if p.is_absolute() else base / p

    corpus_cfg = data.get("corpus", {})
    categories = None
    if "categories" in corpus_cfg:
        try:
            categories = {Category(c) for c in corpus_cfg["categories"]}
        except ValueError as exc:
            raise click.ClickException(f"bad category in config: {exc}")

    eval_cfg = data.get("eval", {})
    pool_size = int(eval_cfg.get("pool_size", 20))
    config_eval = EvalConfig(
        pool_size=pool_size,
        n_bootstrap=int(eval_cfg.get("n_bootstrap", 100)),
        tts_n=int(eval_cfg.get("tts_n", min(10, pool_size))),
        rng_seed=int(eval_cfg.get("seed", 0)),
    )

    checker_cfg = data.get("checker", {})
    domain = checker_cfg.get("domain", [-64, 64])
    config_checker = CheckerConfig(
        nondet_domain=(int(domain[0]), int(domain[1])),
        max_assignments=int(checker_cfg.get("max_assignments", 4096)),
        max_steps=int(checker_cfg.get("max_steps", 200_000)),
        bounded_cycle_target=int(checker_cfg.get("bounded_cycle_target", 1000)),
        stall_steps=int(checker_cfg.get("stall_steps", 2000)),
    )

    validator = None
    if "validator" in data:
        v = data["validator"]
        validator = ValidatorConfig(
            validator_root=rel(v["root"]),
            architecture=str(v.get("architecture", "32bit")),
            property_path=str(v.get("property", "../properties/termination.prp")),
            timeout=float(v.get("timeout", 60.0)),
        )

    models = []
    for m in data.get("models", []):
        config = oracle.ModelConfig(
            name=str(m["name"]),
            endpoint_url=str(m.get("endpoint_url", "")),
            api_key_env=str(m.get("api_key_env", "")),
            max_output_tokens=int(m.get("max_output_tokens", 16384)),
            request_timeout=float(m.get("timeout", 300.0)),
            replay=str(m.get("mode", "live")) == "replay",
        )
        if "preset" in m:
            config = oracle.apply_preset(config, str(m["preset"]))
        else:
            updates = {}
            if "top_p" in m:
                updates["top_p"] = float(m["top_p"])
            if "temperature" in m:
                updates["temperature"] = float(m["temperature"])
            if "reasoning_effort" in m:
                updates["reasoning_effort"] = str(m["reasoning_effort"])
            config = replace(config, **updates)
        if not config.replay and not config.endpoint_url:
            raise click.ClickException(
                f"model {config.name}: live mode needs endpoint_url")
        models.append(config)

    output_cfg = data.get("output", {})
    return RunConfig(
        corpus_root=rel(corpus_cfg["root"]) if "root" in corpus_cfg else None,
        manifest_path=rel(corpus_cfg["manifest"]) if "manifest" in corpus_cfg else None,
        categories=categories,
        exclusions=rel(corpus_cfg["exclusions"]) if "exclusions" in corpus_cfg else None,
        sidecar=rel(corpus_cfg["sidecar"]) if "sidecar" in corpus_cfg else None,
        models=models,
        eval=config_eval,
        checker=config_checker,
        validator=validator,
        output_dir=rel(output_cfg.get("dir", "out")),
        prompt_kind=str(data.get("run", {}).get("prompt", "termination")),
    )


def _load_manifest_for(config: RunConfig) -> CorpusManifest:
    if config.manifest_path is not None:
        return corpus_mod.manifest_from_json(config.manifest_path)
    if config.corpus_root is None:
        raise click.ClickException("config needs corpus.root or corpus.manifest")
    exclusions = (corpus_mod.load_exclusions(config.exclusions)
                  if config.exclusions else corpus_mod.load_exclusions())
    sidecar = (corpus_mod.SidecarTokenCounts.load(config.sidecar)
               if config.sidecar else None)
    load = corpus_mod.load_manifest(config.corpus_root, config.categories,
                                    exclusions=exclusions, sidecar=sidecar)
    for task_id, message in load.report.errors:
        click.echo(f"warning: {task_id}: {message}", err=True)
    return load.manifest


@click.group()
def main():
    """Evaluate termination-prediction oracles on C termination tasks."""


# ---------------------------------------------------------------------------
# ingest


@main.command()
@click.argument("root", type=click.Path(path_type=Path))
@click.option("-o", "--out", type=click.Path(path_type=Path),
              help="Write the manifest JSON here.")
@click.option("--category", "category_names", multiple=True,
              type=click.Choice([c.value for c in Category]))
@click.option("--exclusions", type=click.Path(path_type=Path, exists=True))
@click.option("--sidecar", type=click.Path(path_type=Path, exists=True),
              help="JSON file mapping task_id to exact token count.")
def ingest(root: Path, out: Path | None, category_names, exclusions, sidecar):
    """Ingest a benchmark tree into a manifest and print category counts."""
    categories = ({Category(c) for c in category_names}
                  if category_names else None)
    try:
        load = corpus_mod.load_manifest(
            root, categories,
            exclusions=corpus_mod.load_exclusions(exclusions) if exclusions
            else corpus_mod.load_exclusions(),
            sidecar=corpus_mod.SidecarTokenCounts.load(sidecar) if sidecar else None,
        )
    except corpus_mod.IngestError as exc:
        _fail(str(exc), 2)
    manifest, report = load.manifest, load.report
    for note in report.notes:
        click.echo(f"note: {note}", err=True)
    for task_id, message in report.errors:
        click.echo(f"warning: {task_id}: {message}", err=True)

    click.echo(f"{'category':<18} {'tasks':>6}")
    for category in Category:
        if category in manifest.category_counts:
            click.echo(f"{category.value:<18} {manifest.category_counts[category]:>6}")
    click.echo(f"{'total':<18} {len(manifest.tasks):>6}")
    click.echo(f"labels: T={manifest.label_counts['T']} "
               f"NT={manifest.label_counts['NT']}")
    if report.skipped_excluded:
        click.echo(f"excluded: {report.skipped_excluded}")
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(corpus_mod.manifest_to_json(manifest), encoding="utf-8")
        click.echo(f"manifest written to {out}")
    if report.errors:
        sys.exit(1)


# ---------------------------------------------------------------------------
# run


@main.command()
@click.option("-c", "--config", "config_path", required=True,
              type=click.Path(path_type=Path, exists=True))
@click.option("--run-id", default="default", show_default=True)
@click.option("--jobs", default=4, show_default=True)
def run(config_path: Path, run_id: str, jobs: int):
    """Query every configured model on every task (resumable, cached)."""
    config = load_config(config_path)
    if not config.models:
        _fail("no models configured", 2)
    manifest = _load_manifest_for(config)
    run_dir = config.output_dir / "runs" / run_id
    run_dir.mkdir(parents=True, exist_ok=True)

    build_prompt = (oracle.build_precondition_prompt
                    if config.prompt_kind == "precondition"
                    else oracle.build_termination_prompt)

    failures = 0
    for model in config.models:
        click.echo(f"model {model.name}: {len(manifest.tasks)} tasks "
                   f"x {config.eval.pool_size} generations")

        def work(task):
            try:
                oracle.generate(model, build_prompt(task),
                                config.eval.pool_size,
                                run_dir=run_dir, task_id=task.task_id)
                return None
            except oracle.AuthError:
                raise
            except Exception as exc:  # per-task failures do not stop the run
                return f"{task.task_id}: {exc}"

        try:
            with ThreadPoolExecutor(max_workers=max(jobs, 1)) as pool:
                for error in pool.map(work, manifest.tasks):
                    if error is not None:
                        failures += 1
                        click.echo(f"warning: {error}", err=True)
        except oracle.AuthError as exc:
            _fail(f"model {model.name}: {exc}", 1)
    click.echo(f"run cached under {run_dir}")
    if failures:
        click.echo(f"{failures} task(s) failed; rerun to fill gaps", err=True)
        sys.exit(1)


# ---------------------------------------------------------------------------
# check-witness


def _describe_feasibility(result) -> str:
    if isinstance(result, ProvenInfinite):
        env = {name: value for name, value in result.state.env}
        return (f"ProvenInfinite: state at line {result.state.location} repeats "
                f"with env {env} under assignment {result.assignment}")
    if isinstance(result, BoundedEvidence):
        return (f"BoundedEvidence: {result.cycles} cycles completed under "
                f"assignment {result.assignment}")
    if isinstance(result, Infeasible):
        return f"Infeasible: edge {result.edge_id} cannot be satisfied"
    return f"Unknown: {result.reason}"


@main.command("check-witness")
@click.argument("program_path", type=click.Path(path_type=Path, exists=True))
@click.argument("witness_path", type=click.Path(path_type=Path, exists=True))
@click.option("--emit", type=click.Path(path_type=Path),
              help="Write validated witness as GraphML here.")
@click.option("--clock", default="1970-01-01T00:00:00Z", show_default=True,
              help="Pinned creationtime for GraphML output.")
@click.option("--validate", "do_validate", is_flag=True,
              help="Also drive the external validator (needs -c config).")
@click.option("-c", "--config", "config_path",
              type=click.Path(path_type=Path, exists=True))
@click.option("--architecture", default="32bit",
              type=click.Choice(["32bit", "64bit"]))
def check_witness(program_path: Path, witness_path: Path, emit: Path | None,
                  clock: str, do_validate: bool, config_path: Path | None,
                  architecture: str):
    """Validate a witness JSON against a program and check feasibility."""
    raw = witness_path.read_text(encoding="utf-8")
    parsed = parse_prediction(raw)
    if isinstance(parsed, FormatError):
        click.echo(f"format error: {parsed.message}")
        sys.exit(1)
    if parsed.witness is None:
        click.echo(f"prediction carries no witness "
                   f"(verdict {parsed.verdict.value})")
        sys.exit(1)

    violations = validate_schema(parsed.witness)
    if violations:
        for v in violations:
            click.echo(f"schema violation: {v}")
        sys.exit(1)
    click.echo("schema: ok")

    source = program_path.read_text(encoding="utf-8")
    program = parse_program(source)
    checker_cfg = CheckerConfig()
    if config_path is not None:
        checker_cfg = load_config(config_path).checker

    lasso_path = extract_lasso(parsed.witness)
    if isinstance(lasso_path, lasso.NoLasso):
        click.echo(f"no lasso: {lasso_path.reason}")
        sys.exit(1)
    click.echo(f"lasso: stem {[e.id for e in lasso_path.stem]} "
               f"cycle {[e.id for e in lasso_path.cycle]}")

    result = check_feasibility(program, lasso_path, checker_cfg)
    click.echo(_describe_feasibility(result))

    exit_code = 0 if isinstance(result, (ProvenInfinite, BoundedEvidence)) else 1

    graphml_path = emit
    scratch = None
    if do_validate and graphml_path is None:
        scratch = tempfile.TemporaryDirectory(prefix="termeval-witness-")
        graphml_path = Path(scratch.name) / "witness.graphml"
    try:
        if graphml_path is not None:
            arch = (corpus_mod.Architecture.BITS64 if architecture == "64bit"
                    else corpus_mod.Architecture.BITS32)
            task = corpus_mod.TaskSpec(
                task_id=program_path.stem, source_path=program_path,
                numbered_source=corpus_mod.number_lines(source),
                category=Category.OTHER, expected_verdict="NT",
                architecture=arch,
                token_count=corpus_mod.heuristic_token_count(source))
            graphml_path.parent.mkdir(parents=True, exist_ok=True)
            graphml_path.write_text(
                emit_graphml(parsed.witness, task,
                             ProducerMeta(creationtime=clock)),
                encoding="utf-8")
            if emit is not None:
                click.echo(f"GraphML written to {emit}")

        if do_validate:
            if config_path is None:
                _fail("--validate needs -c config with a [validator] table", 2)
            vcfg = load_config(config_path).validator
            if vcfg is None:
                _fail("config has no [validator] table", 2)
            vresult = run_external_validator(program_path, graphml_path, vcfg)
            click.echo(f"external validator: {vresult.status.value}")
            if vresult.status is not ValidationStatus.VALIDATED:
                exit_code = 1
    finally:
        if scratch is not None:
            scratch.cleanup()
    sys.exit(exit_code)


# ---------------------------------------------------------------------------
# score


def witness_status_for(prediction: Prediction | FormatError,
                       program: Program | UnsupportedConstruct | None,
                       task, checker_cfg: CheckerConfig,
                       validator_cfg: ValidatorConfig | None) -> WitnessStatus:
    """Resolve one generation's witness status for scoring.

    The external validator, when configured, is authoritative; otherwise the
    internal checker accepts witnesses it can prove or bound.
    """
    if isinstance(prediction, FormatError):
        return WitnessStatus.ABSENT
    if prediction.verdict is not Verdict.NT or prediction.witness is None:
        return WitnessStatus.ABSENT
    if validate_schema(prediction.witness):
        return WitnessStatus.INVALID

    if validator_cfg is not None:
        graphml = emit_graphml(prediction.witness, task, ProducerMeta())
        with tempfile.TemporaryDirectory(prefix="termeval-validate-") as tmp:
            target = Path(tmp) / "witness.graphml"
            target.write_text(graphml, encoding="utf-8")
            result = run_external_validator(task.source_path, target,
                                            validator_cfg)
        return (WitnessStatus.VALID
                if result.status is ValidationStatus.VALIDATED
                else WitnessStatus.INVALID)

    if program is None or isinstance(program, UnsupportedConstruct):
        return WitnessStatus.INVALID
    lasso_path = extract_lasso(prediction.witness)
    if not isinstance(lasso_path, LassoPath):
        return WitnessStatus.INVALID
    result = check_feasibility(program, lasso_path, checker_cfg)
    if isinstance(result, (ProvenInfinite, BoundedEvidence)):
        return WitnessStatus.VALID
    return WitnessStatus.INVALID


def _task_pool(task, run_dir: Path, model_name: str,
               config: RunConfig) -> list[PoolEntry]:
    """Score-ready entries for one task's cached generations."""
    records = oracle.replay_records(run_dir, model_name, task.task_id)
    program: Program | UnsupportedConstruct | None = None
    status_cache: dict[object, WitnessStatus] = {}
    entries = []
    for record in records:
        parsed = record.parsed
        verdict = Verdict.UNK if isinstance(parsed, FormatError) else parsed.verdict
        status = WitnessStatus.ABSENT
        if verdict is Verdict.NT:
            if program is None:
                try:
                    program = parse_program(task.numbered_source)
                except Exception:
                    program = UnsupportedConstruct(1, "parse error")
            # identical witnesses across samples check identically
            key = parsed.witness
            if key not in status_cache:
                status_cache[key] = witness_status_for(
                    parsed, program, task, config.checker, config.validator)
            status = status_cache[key]
        entries.append(PoolEntry(verdict, status))
    return entries


def build_pools(manifest: CorpusManifest, run_dir: Path, model_name: str,
                config: RunConfig, jobs: int = 1,
                ) -> tuple[dict[str, list[PoolEntry]], ConfusionCounts,
                           list[tuple[str, evalcore.SampleOutcome]]]:
    """Per-task pools plus per-generation confusion counts and outcomes.

    Tasks are independent, so witness checking parallelizes; results are
    folded in manifest order to keep every downstream number deterministic.
    """
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            entry_lists = list(pool.map(
                lambda task: _task_pool(task, run_dir, model_name, config),
                manifest.tasks))
    else:
        entry_lists = [_task_pool(task, run_dir, model_name, config)
                       for task in manifest.tasks]

    pools: dict[str, list[PoolEntry]] = {}
    confusion = ConfusionCounts()
    generation_outcomes: list[tuple[str, evalcore.SampleOutcome]] = []
    for task, entries in zip(manifest.tasks, entry_lists):
        expected = Verdict.T if task.expected_verdict == "T" else Verdict.NT
        for entry in entries:
            outcome = classify_sample(expected, entry.verdict,
                                      entry.witness_status)
            confusion.add(expected, outcome)
            generation_outcomes.append((task.task_id, outcome))
        pools[task.task_id] = entries
    return pools, confusion, generation_outcomes


@main.command()
@click.argument("run_dir", type=click.Path(path_type=Path, exists=True))
@click.option("-c", "--config", "config_path", required=True,
              type=click.Path(path_type=Path, exists=True))
@click.option("-o", "--out", type=click.Path(path_type=Path),
              help="Report directory (default: alongside the run).")
@click.option("--jobs", default=1, show_default=True,
              help="Parallel witness checks across tasks.")
def score(run_dir: Path, config_path: Path, out: Path | None, jobs: int):
    """Score a cached run: bootstrap, consensus, F1, witness metrics, bins."""
    config = load_config(config_path)
    manifest = _load_manifest_for(config)
    if not manifest.tasks:
        _fail("manifest has no tasks", 1)
    out_dir = out if out is not None else run_dir / "report"
    out_dir.mkdir(parents=True, exist_ok=True)

    expected = {t.task_id: (Verdict.T if t.expected_verdict == "T" else Verdict.NT)
                for t in manifest.tasks}
    categories = {t.task_id: t.category.value for t in manifest.tasks}
    binning = (corpus_mod.assign_length_bins(manifest)
               if len(manifest.tasks) >= 3 else None)

    model_names = oracle.list_models(run_dir)
    if not model_names:
        _fail(f"no model directories under {run_dir}", 1)

    reports = []
    for model_name in model_names:
        pools, confusion, generation_outcomes = build_pools(
            manifest, run_dir, model_name, config, jobs=max(jobs, 1))
        incomplete = [t for t, pool in sorted(pools.items())
                      if len(pool) != config.eval.pool_size]
        if incomplete:
            _fail(f"model {model_name}: incomplete pools for "
                  f"{incomplete[:5]}{'...' if len(incomplete) > 5 else ''}", 1)
        single = bootstrap_eval(pools, expected, categories, config.eval, "single")
        tts = bootstrap_eval(pools, expected, categories, config.eval, "tts")
        rates = unknown_rates(pools, config.eval)
        bin_means = (score_by_length_bin(generation_outcomes, binning)
                     if binning is not None else {})
        reports.append(ModelReport(
            model=model_name,
            svcomp_single=single.scores,
            svcomp_tts=tts.scores,
            f1_t_single=single.f1_t,
            f1_nt_single=single.f1_nt,
            f1_t_tts=tts.f1_t,
            f1_nt_tts=tts.f1_nt,
            witness=witness_metrics(confusion),
            unk_rate=rates.unk_rate,
            tts_unk_rate=rates.tts_unk_rate,
            bin_means=bin_means,
            per_run_single=single.per_run_scores,
            per_run_tts=tts.per_run_scores,
        ))

    report = EvalReport(
        models=reports,
        config=config.eval,
        witness_check_mode=("external-validator" if config.validator
                            else "internal-checker"),
    )
    (out_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out_dir / "report.txt").write_text(report.to_text(), encoding="utf-8")
    (out_dir / "per_run_scores.csv").write_text(report.per_run_csv(),
                                                encoding="utf-8")
    click.echo(report.to_text())
    click.echo(f"reports written to {out_dir}")


# ---------------------------------------------------------------------------
# precond


_ANSWER_TAG_RE = re.compile(r"<answer>(.*?)</answer>", re.S)


def extract_precondition_answer(raw: str) -> str:
    """The formula is the tagged answer when present, else the last
    nonempty line."""
    m = None
    for m in _ANSWER_TAG_RE.finditer(raw):
        pass
    if m is not None:
        return m.group(1).strip()
    lines = [line.strip() for line in raw.splitlines() if line.strip()]
    return lines[-1] if lines else ""


@main.command("precond")
@click.argument("run_dir", type=click.Path(path_type=Path, exists=True))
@click.argument("annotations", type=click.Path(path_type=Path, exists=True))
@click.option("-c", "--config", "config_path", required=True,
              type=click.Path(path_type=Path, exists=True))
@click.option("--mode", default="brute", show_default=True,
              type=click.Choice(["brute", "smt", "both"]))
@click.option("-o", "--out", type=click.Path(path_type=Path))
def precond_cmd(run_dir: Path, annotations: Path, config_path: Path,
                mode: str, out: Path | None):
    """Pass@1 / Pass@3 of divergence-precondition predictions."""
    config = load_config(config_path)
    manifest = _load_manifest_for(config)
    truth_raw = json.loads(annotations.read_text(encoding="utf-8"))

    model_names = oracle.list_models(run_dir)
    if not model_names:
        _fail(f"no model directories under {run_dir}", 1)

    results = {}
    for model_name in model_names:
        per_task = {}
        pass1, pass3 = [], []
        for task_id, truth_text in sorted(truth_raw.items()):
            task = manifest.task(task_id)
            program = parse_program(task.numbered_source)
            if isinstance(program, Program):
                variables = {site.name: site.ctype
                             for site in program.nondet_vars}
            else:
                variables = {}
            try:
                truth = precond.parse_precondition(
                    truth_text, set(variables) if variables else None)
            except precond.PrecondParseError as exc:
                _fail(f"annotation for {task_id} does not parse: {exc}", 2)
            if not variables:
                variables = {name: INT for name in precond.variables_of(truth)}
            records = oracle.replay_records(run_dir, model_name, task_id)
            if not records:
                _fail(f"model {model_name}: no generations for {task_id}", 1)
            generations = [extract_precondition_answer(r.raw_text)
                           for r in records]
            p1 = precond.precondition_pass_at_k(generations, truth, variables,
                                                k=1, mode=mode)
            p3 = precond.precondition_pass_at_k(generations, truth, variables,
                                                k=min(3, len(generations)),
                                                mode=mode)
            per_task[task_id] = {"pass@1": p1, "pass@3": p3}
            pass1.append(p1)
            pass3.append(p3)
        results[model_name] = {
            "mean_pass@1": sum(pass1) / len(pass1) if pass1 else 0.0,
            "mean_pass@3": sum(pass3) / len(pass3) if pass3 else 0.0,
            "per_task": per_task,
        }
        click.echo(f"{model_name:<24} Pass@1 {results[model_name]['mean_pass@1']:.3f}"
                   f"  Pass@3 {results[model_name]['mean_pass@3']:.3f}")

    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(results, indent=2, sort_keys=True) + "\n",
                       encoding="utf-8")
        click.echo(f"report written to {out}")


if __name__ == "__main__":
    main()
