"""Operator entry points.

Commands: ingest, annotate, evaluate, develop, serve, export. Human-readable
summaries go to stderr; machine output goes to stdout (line-delimited JSON
with ``--format=jsonl``). Exit codes: 0 success, 1 operational failure,
2 usage error. Endpoint secrets are read only from the environment
(CODEBOOK_FORGE_API_KEY), never from flags.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from . import CodebookForgeError
from .codebook import Codebook, PromptTemplates, init_codebook, load_codebook, render_annotation_prompt
from .corpus import Corpus, LabelSet, Variable, concat_narrative, load_corpus
from .embeddings import DeterministicEmbedder, EmbedderConfig, build_embedder
from .engine import RunConfig, RunEngine, TERMINAL_STATUSES, simulated_provider
from .gateway import HttpChatModel, ModelEndpoint, Prediction, predict_many
from .metrics import (
    LabelPair,
    bonferroni_alpha,
    bootstrap_ci,
    confusion,
    disagreement_queue,
    macro_f1,
    match_indicators,
    paired_t_test,
    self_consistency,
)
from .runstore import RunStore, json_line
from .synth import SyntheticCorpusSpec, build_world


def _echo_err(message: str) -> None:
    click.echo(message, err=True)


def _load_variable(path: str) -> Variable:
    with open(path, encoding="utf-8") as fh:
        return Variable.from_json(json.load(fh))


def _load_labelset(path: str) -> LabelSet:
    with open(path, encoding="utf-8") as fh:
        return LabelSet.from_json(json.load(fh))


def _fail(message: str) -> None:
    raise click.ClickException(message)


@click.group()
def main() -> None:
    """LM-assisted annotation and codebook development."""


# --- ingest -------------------------------------------------------------------


@main.command()
@click.option("--corpus", "corpus_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--format", "out_format", default="text", type=click.Choice(["text", "jsonl"]))
def ingest(corpus_path: str, out_path: str, out_format: str) -> None:
    """Validate a corpus file and write its canonical form."""
    try:
        corpus, rejects = load_corpus(corpus_path)
    except CodebookForgeError as exc:
        _fail(str(exc))
    Path(out_path).write_text(corpus.to_jsonl(), encoding="utf-8")
    for reject in rejects:
        _echo_err(f"rejected line {reject.line_no}: {reject.reason}")
    _echo_err(f"ingested {len(corpus)} narratives, {len(rejects)} rejects -> {out_path}")
    if out_format == "jsonl":
        click.echo(json_line({"ingested": len(corpus), "rejects": len(rejects), "out": out_path}))


# --- shared model/corpus construction -------------------------------------------


def _resolve_world(stub_world: str | None, competent: bool):
    if stub_world is None:
        return None
    spec = SyntheticCorpusSpec.load(stub_world)
    return build_world(spec, competent=competent)


def _resolve_variable(world, variable_spec: str | None) -> Variable:
    if world is not None:
        spec = world.spec
        return Variable(
            name=spec.variable_name,
            kind="binary" if len(spec.classes) == 2 else "multiclass",
            response_options=spec.classes,
        )
    if not variable_spec:
        raise click.UsageError("--variable-spec is required without --stub-world")
    return _load_variable(variable_spec)


def _resolve_corpus(world, corpus_path: str | None) -> Corpus:
    if world is not None:
        return world.corpus
    if not corpus_path:
        raise click.UsageError("--corpus is required without --stub-world")
    corpus, rejects = load_corpus(corpus_path)
    if rejects:
        _echo_err(f"warning: {len(rejects)} rejected corpus lines ignored")
    return corpus


def _resolve_annotator(world, endpoint_url: str | None, model: str | None, temperature: float, max_tokens: int):
    if world is not None:
        return world.annotator
    if not endpoint_url or not model:
        raise click.UsageError("--endpoint-url and --model are required without --stub-world")
    endpoint = ModelEndpoint(
        base_url=endpoint_url, model_id=model, temperature=temperature, max_tokens=max_tokens
    )
    return HttpChatModel(endpoint)


# --- annotate -----------------------------------------------------------------


@main.command()
@click.option("--corpus", "corpus_path", type=click.Path(exists=True))
@click.option("--stub-world", type=click.Path(exists=True), help="Synthetic world spec for offline runs.")
@click.option("--variable-spec", type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--codebook", "codebook_path", type=click.Path(exists=True))
@click.option("--endpoint-url")
@click.option("--model")
@click.option("--temperatures", default="0.2", help="Comma-separated list; several values add a self-consistency check.")
@click.option("--max-tokens", default=1024)
@click.option("--seed", default=0)
@click.option("--format", "out_format", default="text", type=click.Choice(["text", "jsonl"]))
def annotate(
    corpus_path, stub_world, variable_spec, out_path, codebook_path,
    endpoint_url, model, temperatures, max_tokens, seed, out_format,
) -> None:
    """Predict a variable for every narrative; report agreement when labels exist."""
    try:
        world = _resolve_world(stub_world, competent=True)
        variable = _resolve_variable(world, variable_spec)
        corpus = _resolve_corpus(world, corpus_path)
        temps = [float(t) for t in temperatures.split(",") if t.strip()]
        if codebook_path:
            cb = load_codebook(codebook_path)
        else:
            cb = init_codebook(variable)
        ids = corpus.ids()
        runs: list[list[str]] = []
        records: list[dict] = []
        for temperature in temps:
            annotator = _resolve_annotator(world, endpoint_url, model, temperature, max_tokens)
            jobs = []
            for narrative_id in ids:
                system, user = render_annotation_prompt(cb, concat_narrative(corpus.get(narrative_id)))
                jobs.append((narrative_id, system, user))
            outcomes = predict_many(annotator, jobs, variable.response_options, parallelism=4)
            labels = []
            for narrative_id, outcome in zip(ids, outcomes):
                if isinstance(outcome, Prediction):
                    records.append(
                        {
                            "variable": variable.name,
                            "narrative_id": narrative_id,
                            "label": outcome.label,
                            "reason": outcome.reason,
                            "span": outcome.span,
                            "parse_path": outcome.parse_path,
                            "temperature": temperature,
                            "unresolved": False,
                        }
                    )
                    labels.append(outcome.label)
                else:
                    records.append(
                        {
                            "variable": variable.name,
                            "narrative_id": narrative_id,
                            "label": None,
                            "reason": outcome.error,
                            "span": "",
                            "parse_path": "none",
                            "temperature": temperature,
                            "unresolved": True,
                        }
                    )
                    labels.append("<unparseable>")
            runs.append(labels)
        with open(out_path, "w", encoding="utf-8") as fh:
            for record in records:
                fh.write(json_line(record) + "\n")

        report: dict = {"variable": variable.name, "n": len(ids), "temperatures": temps}
        if len(runs) > 1:
            report["self_consistency"] = self_consistency(runs)
        reference = corpus.reference_labels(variable.name)
        if reference.labels:
            pairs = [
                LabelPair(nid, label, reference.labels[nid])
                for nid, label in zip(ids, runs[0])
                if nid in reference.labels
            ]
            if pairs:
                ci = bootstrap_ci(match_indicators(pairs), seed=seed)
                report["agreement"] = ci.point
                report["ci"] = [ci.ci_low, ci.ci_high]
                report["seed"] = seed
        _echo_err(f"annotated {len(ids)} narratives x {len(temps)} temperature(s) -> {out_path}")
        if "agreement" in report:
            _echo_err(f"agreement vs reference labels: {report['agreement']:.3f}")
        if "self_consistency" in report:
            _echo_err(f"self-consistency across runs: {report['self_consistency']:.3f}")
        if out_format == "jsonl":
            click.echo(json_line(report))
    except CodebookForgeError as exc:
        _fail(str(exc))


# --- evaluate -----------------------------------------------------------------


def _read_predictions(path: str) -> dict[str, dict[str, str]]:
    """Predictions grouped per variable: {variable: {narrative_id: label}}."""
    grouped: dict[str, dict[str, str]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            record = json.loads(line)
            if record.get("label") is None:
                continue
            grouped.setdefault(record["variable"], {})[record["narrative_id"]] = record["label"]
    return grouped


def _pairs_for(predictions: dict[str, str], reference: LabelSet) -> list[LabelPair]:
    return [
        LabelPair(nid, label, reference.labels[nid])
        for nid, label in sorted(predictions.items())
        if nid in reference.labels
    ]


@main.command()
@click.option("--predictions", "predictions_path", required=True, type=click.Path(exists=True))
@click.option("--corpus", "corpus_path", required=True, type=click.Path(exists=True))
@click.option("--against", "against_path", type=click.Path(exists=True), help="Second predictions file for a paired t-test.")
@click.option("--variable-spec", type=click.Path(exists=True), help="Needed for multiclass macro-F1 class lists.")
@click.option("--positive-label", default="1.0")
@click.option("--bootstrap-iterations", default=10_000)
@click.option("--level", default=0.95)
@click.option("--comparisons", default=2, help="Comparison count for the Bonferroni threshold.")
@click.option("--seed", default=0)
@click.option("--format", "out_format", default="text", type=click.Choice(["text", "jsonl"]))
def evaluate(
    predictions_path, corpus_path, against_path, variable_spec, positive_label,
    bootstrap_iterations, level, comparisons, seed, out_format,
) -> None:
    """Per-variable agreement, confusion rates, and bootstrap CIs."""
    try:
        corpus, _ = load_corpus(corpus_path)
        grouped = _read_predictions(predictions_path)
        if not grouped:
            _fail("predictions file contains no labeled records")
        variable = _load_variable(variable_spec) if variable_spec else None
        agreements: dict[str, float] = {}
        for name in sorted(grouped):
            reference = corpus.reference_labels(name)
            pairs = _pairs_for(grouped[name], reference)
            if not pairs:
                _echo_err(f"warning: no reference labels for variable {name}; skipped")
                continue
            ci = bootstrap_ci(
                match_indicators(pairs), iterations=bootstrap_iterations, level=level, seed=seed
            )
            agreements[name] = ci.point
            row = {
                "variable": name,
                "agreement": ci.point,
                "ci": [ci.ci_low, ci.ci_high],
                "n": ci.n,
                "bootstrap_iterations": bootstrap_iterations,
                "level": level,
                "seed": seed,
            }
            if variable is not None and variable.kind == "multiclass":
                macro, by_class = macro_f1(pairs, variable.response_options)
                row["macro_f1"] = macro
                row["per_class_f1"] = by_class
            else:
                rates = confusion(pairs, positive_label)
                row.update({"tpr": rates.tpr, "fpr": rates.fpr, "fnr": rates.fnr})
            if out_format == "jsonl":
                click.echo(json_line(row))
            else:
                click.echo(json.dumps(row, sort_keys=True))
            _echo_err(
                f"{name}: agreement {ci.point:.3f} [{ci.ci_low:.3f}, {ci.ci_high:.3f}] n={ci.n}"
            )
        if against_path:
            other = _read_predictions(against_path)
            shared = sorted(set(agreements) & set(other))
            a_scores, b_scores = [], []
            for name in shared:
                reference = corpus.reference_labels(name)
                pairs_b = _pairs_for(other[name], reference)
                if not pairs_b:
                    continue
                a_scores.append(agreements[name])
                b_scores.append(
                    sum(1 for p in pairs_b if p.predicted == p.reference) / len(pairs_b)
                )
            if len(a_scores) >= 2:
                t, p = paired_t_test(a_scores, b_scores)
                threshold = bonferroni_alpha(0.05, comparisons)
                test_row = {
                    "paired_t": t,
                    "p_two_sided": p,
                    "variables": len(a_scores),
                    "bonferroni_threshold": threshold,
                    "significant": p < threshold,
                }
                if out_format == "jsonl":
                    click.echo(json_line(test_row))
                else:
                    click.echo(json.dumps(test_row, sort_keys=True))
                _echo_err(
                    f"paired t={t:.3f}, p={p:.4f}, Bonferroni threshold "
                    f"{threshold} over {comparisons} comparisons"
                )
            else:
                _echo_err("warning: fewer than 2 shared variables; paired test skipped")
    except CodebookForgeError as exc:
        _fail(str(exc))


# --- develop ------------------------------------------------------------------


@main.command()
@click.option("--mode", default="simulated", type=click.Choice(["simulated", "interactive"]))
@click.option("--corpus", "corpus_path", type=click.Path(exists=True))
@click.option("--stub-world", type=click.Path(exists=True))
@click.option("--variable-spec", type=click.Path(exists=True))
@click.option("--labels", "labels_path", type=click.Path(exists=True), help="Reference labels for simulated feedback.")
@click.option("--cot-cache", "cot_cache_path", type=click.Path(exists=True))
@click.option("--run-dir", required=True, type=click.Path())
@click.option("-b", "--budget", default=150)
@click.option("-n", "--batch-size", default=5)
@click.option("-k", "--min-guide", default=30)
@click.option("-m", "--target", default=0.9)
@click.option("-j", "--val-per-class", default=20)
@click.option("--sampling", default="random", type=click.Choice(["random", "coverage"]))
@click.option("--seed", default=0)
@click.option("--max-iterations", default=100)
@click.option("--keywords", default="", help="Comma-separated keyword upsampling phrase.")
@click.option("--upsample-size", type=int)
@click.option("--endpoint-url")
@click.option("--model")
@click.option("--embed-url")
@click.option("--embed-model", default="all-MiniLM-L6-v2")
@click.option("--resume", is_flag=True, help="Continue a previously interrupted run.")
@click.option("--no-finalize", is_flag=True, help="Skip corpus-wide annotation after stopping.")
@click.option("--host", default="127.0.0.1", help="Bind address for interactive mode.")
@click.option("--port", default=8760, help="Bind port for interactive mode.")
@click.option("--format", "out_format", default="text", type=click.Choice(["text", "jsonl"]))
def develop(
    mode, corpus_path, stub_world, variable_spec, labels_path, cot_cache_path,
    run_dir, budget, batch_size, min_guide, target, val_per_class, sampling,
    seed, max_iterations, keywords, upsample_size, endpoint_url, model,
    embed_url, embed_model, resume, no_finalize, host, port, out_format,
) -> None:
    """Run the codebook development loop to a terminal state."""
    try:
        world = _resolve_world(stub_world, competent=False)
        corpus = _resolve_corpus(world, corpus_path)
        if world is not None:
            annotator, synthesizer = world.annotator, world.synthesizer
            reference = world.truth
            cot_cache = world.cot_cache
        else:
            annotator = _resolve_annotator(world, endpoint_url, model, 0.2, 1024)
            synthesizer = annotator
            if not labels_path:
                raise click.UsageError(
                    "--labels is required: validation-split labels, and in "
                    "simulated mode the reference labels for feedback"
                )
            reference = _load_labelset(labels_path)
            cot_cache = {}
            if cot_cache_path:
                with open(cot_cache_path, encoding="utf-8") as fh:
                    cot_cache = json.load(fh)
        if embed_url:
            embedder = build_embedder(
                EmbedderConfig(endpoint_url=embed_url, model_name=embed_model, mode="remote")
            )
        else:
            embedder = DeterministicEmbedder()

        if resume:
            engine = RunEngine.resume(
                run_dir, corpus,
                annotator=annotator, synthesizer=synthesizer,
                templates=PromptTemplates(), embedder=embedder,
            )
        else:
            variable = _resolve_variable(world, variable_spec)
            config = RunConfig(
                variable=variable,
                b=budget, n=batch_size, k=min_guide, m=target, j=val_per_class,
                sampling=sampling, seed=seed, max_iterations=max_iterations,
                keywords=tuple(k.strip() for k in keywords.split(",") if k.strip()),
                upsample_size=upsample_size,
            )
            extra = {"mode": mode}
            if stub_world:
                extra["stub_world"] = world.spec.to_json()
            elif endpoint_url:
                extra["endpoint"] = {"base_url": endpoint_url, "model_id": model}
            engine = RunEngine.start(
                run_dir, run_id=Path(run_dir).name, config=config,
                corpus=corpus, val_labels=reference,
                annotator=annotator, synthesizer=synthesizer,
                templates=PromptTemplates(), embedder=embedder,
                extra_config=extra,
            )
        if mode == "interactive":
            # Human feedback arrives over HTTP: hand the run to the service.
            import uvicorn

            from .service import RunRegistry, RunSession, create_app

            registry = RunRegistry(Path(run_dir).parent)
            registry.sessions[engine.state.run_id] = RunSession(
                engine=engine, mode="human", world=world
            )
            _echo_err(
                f"serving run {engine.state.run_id} on http://{host}:{port} "
                f"(POST /runs/{engine.state.run_id}/start to begin)"
            )
            uvicorn.run(create_app(registry.root, registry), host=host, port=port, log_level="warning")
            return
        provider = simulated_provider(reference, cot_cache, pool_ids=engine.state.pool_ids)
        engine.run_to_completion(provider)
        if not no_finalize and not engine.state.finalized:
            engine.finalize()
        state = engine.state
        summary = {
            "run_id": state.run_id,
            "status": state.status,
            "stop_reason": state.stop_reason,
            "iterations": state.t,
            "guide_size": len(state.guide),
            "acc_val": state.last_acc_val,
            "codebook_version": state.codebook_version,
            "finalized": state.finalized,
        }
        _echo_err(
            f"run {state.run_id}: {state.status} after {state.t} iterations, "
            f"|guide|={len(state.guide)}, acc_val={state.last_acc_val}, "
            f"codebook v{state.codebook_version}"
        )
        if out_format == "jsonl":
            click.echo(json_line(summary))
    except CodebookForgeError as exc:
        _fail(str(exc))


# --- serve ---------------------------------------------------------------------


@main.command()
@click.option("--run-root", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--host", default="127.0.0.1")
@click.option("--port", default=8760)
def serve(run_root: str, host: str, port: int) -> None:
    """Host the feedback service over HTTP until interrupted."""
    import uvicorn

    from .service import create_app

    app = create_app(Path(run_root))
    try:
        uvicorn.run(app, host=host, port=port, log_level="warning")
    except OSError as exc:
        _fail(f"could not bind {host}:{port}: {exc}")
    except SystemExit as exc:
        # uvicorn exits with its own startup-failure code when the bind fails
        if exc.code not in (0, None):
            _fail(f"server failed to start on {host}:{port} (port in use?)")
        raise


# --- export --------------------------------------------------------------------


@main.command()
@click.option("--run-dir", type=click.Path(exists=True, file_okay=False))
@click.option("--timeline", is_flag=True, help="Export the per-iteration metrics table as CSV.")
@click.option("--predictions", "predictions_path", type=click.Path(exists=True))
@click.option("--corpus", "corpus_path", type=click.Path(exists=True))
@click.option("--variable", "variable_name")
@click.option("--disagreements", type=int)
@click.option("--agreements", type=int)
@click.option("--seed", default=0)
@click.option("--out", "out_path", type=click.Path())
def export(
    run_dir, timeline, predictions_path, corpus_path, variable_name,
    disagreements, agreements, seed, out_path,
) -> None:
    """Export disagreement queues or a run's convergence timeline."""
    try:
        if timeline:
            if not run_dir:
                raise click.UsageError("--timeline requires --run-dir")
            store = RunStore.open(run_dir)
            csv_text = store.metrics_timeline_csv()
            if out_path:
                Path(out_path).write_text(csv_text, encoding="utf-8")
                _echo_err(f"timeline -> {out_path}")
            else:
                click.echo(csv_text, nl=False)
            return
        if disagreements is None and agreements is None:
            raise click.UsageError("nothing to export: use --timeline or --disagreements/--agreements")
        if not predictions_path or not corpus_path or not variable_name:
            raise click.UsageError("queue export needs --predictions, --corpus and --variable")
        corpus, _ = load_corpus(corpus_path)
        grouped = _read_predictions(predictions_path)
        if variable_name not in grouped:
            _fail(f"no predictions for variable {variable_name!r}")
        reference = corpus.reference_labels(variable_name)
        pairs = _pairs_for(grouped[variable_name], reference)
        limit = max(disagreements or 0, agreements or 0)
        queues = disagreement_queue(pairs, limit, seed=seed)
        result = {
            "variable": variable_name,
            "disagree_ids": list(queues.disagree_ids)[: disagreements or 0],
            "agree_ids": list(queues.agree_ids)[: agreements or 0],
            "disagree_available": queues.disagree_available,
            "agree_available": queues.agree_available,
            "seed": seed,
        }
        if disagreements and queues.disagree_available < disagreements:
            _echo_err(
                f"warning: only {queues.disagree_available} disagreements available "
                f"(requested {disagreements})"
            )
        if agreements and queues.agree_available < agreements:
            _echo_err(
                f"warning: only {queues.agree_available} agreements available "
                f"(requested {agreements})"
            )
        text = json.dumps(result, indent=2, sort_keys=True)
        if out_path:
            Path(out_path).write_text(text + "\n", encoding="utf-8")
            _echo_err(f"queues -> {out_path}")
        else:
            click.echo(text)
    except CodebookForgeError as exc:
        _fail(str(exc))


if __name__ == "__main__":
    main()
