"""
Command-line entry point: simulate, estimate, mc, shock and check-ident.

Every command writes its tables plus run_metadata.json to the output
directory; failures write error.json and exit with status 2.
"""

import logging
import platform
from importlib import metadata
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np
import pandas as pd
import typer
from pydantic import ValidationError

from .config import load_config_file, resolve_output_dir, setup_logging, thresholds
from .data_utils import DataUtils
from .errors import ConfigurationError, InputValidationError, PeerNetError
from .models import (
    BootstrapConfig,
    CoefficientRow,
    DgpConfig,
    DgpVariant,
    DyadSpec,
    EstimateReport,
    ModelSpec,
    ModelVariant,
    RunConfig,
    SampleRestriction,
    ShockKind,
    ShockScenario,
    StructuralParams,
)

logger = logging.getLogger(__name__)

app = typer.Typer(help="Peer effects in school networks with isolated students.", no_args_is_help=True)

PACKAGES = ("numpy", "scipy", "pandas", "pydantic", "typer", "rich", "toml")


def _versions() -> Dict[str, Optional[str]]:
    versions = {"python": platform.python_version()}
    for name in PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = None
    return versions


def _section(ctx: typer.Context, name: str) -> Dict[str, Any]:
    return dict(ctx.obj["config"].get(name, {}))


def _run(ctx: typer.Context, command: str, options: Dict[str, Any], body: Callable[[Path], Dict[str, Any]]) -> None:
    """Run a command body, then write metadata on success or error.json on failure."""
    state = ctx.obj
    out_dir = state["out_dir"]
    try:
        try:
            RunConfig(
                command=command,
                nodes_csv=options.get("nodes"),
                edges_csv=options.get("edges"),
                config_path=state["config_path"],
                seed=state["seed"],
                threads=state["threads"],
                out_dir=str(out_dir),
            )
        except ValidationError as e:
            raise ConfigurationError(str(e), module="cli")
        outputs = body(out_dir)
    except PeerNetError as e:
        logger.error(f"[{e.module}] {e.detail}")
        DataUtils.write_json(out_dir / "error.json", e.to_dict())
        raise typer.Exit(code=2)
    except ValidationError as e:
        error = ConfigurationError(str(e), module="cli")
        logger.error(f"[cli] {error.detail}")
        DataUtils.write_json(out_dir / "error.json", error.to_dict())
        raise typer.Exit(code=2)

    DataUtils.write_json(out_dir / "run_metadata.json", {
        "command": command,
        "options": options,
        "seed": state["seed"],
        "threads": state["threads"],
        "config_path": state["config_path"],
        "config": state["config"],
        "versions": _versions(),
        "thresholds": thresholds(),
        "quantile_method": "inverted_cdf",
        "outputs": outputs,
        "warnings": list(state["collector"].messages),
    })
    logger.info(f"{command}: wrote {len(outputs)} outputs to {out_dir}")


@app.callback()
def main(
    ctx: typer.Context,
    seed: Optional[int] = typer.Option(None, "--seed", help="Master seed (64-bit unsigned)"),
    threads: Optional[int] = typer.Option(None, "--threads", help="Worker threads"),
    out: Optional[str] = typer.Option(None, "--out", help="Output directory (PEERNET_OUT otherwise)"),
    config: Optional[Path] = typer.Option(None, "--config", help="TOML run configuration"),
    verbose: bool = typer.Option(False, "--verbose", "-v"),
):
    collector = setup_logging(verbose)
    try:
        settings = load_config_file(config) if config is not None else {}
    except PeerNetError as e:
        logger.error(f"[{e.module}] {e.detail}")
        DataUtils.write_json(resolve_output_dir(out) / "error.json", e.to_dict())
        raise typer.Exit(code=2)
    run = settings.get("run", {})
    ctx.obj = {
        "seed": seed if seed is not None else int(run.get("seed", 0)),
        "seed_flag": seed is not None,
        "threads": threads if threads is not None else int(run.get("threads", 1)),
        "out_dir": resolve_output_dir(out or run.get("out")),
        "config": settings,
        "config_path": str(config) if config is not None else None,
        "collector": collector,
    }


def _dgp_config(ctx: typer.Context, **overrides) -> DgpConfig:
    section = _section(ctx, "dgp")
    params = _section(ctx, "params")
    if params:
        section["params"] = StructuralParams(**params)
    if ctx.obj["seed_flag"] or "master_seed" not in section:
        section["master_seed"] = ctx.obj["seed"]
    section.update({k: v for k, v in overrides.items() if v is not None})
    return DgpConfig(**section)


def _categorical(values: List[str]) -> Dict[str, str]:
    out = {}
    for item in values:
        if "=" not in item:
            raise InputValidationError(f"--categorical expects column=omitted, got {item!r}", module="cli")
        column, omitted = item.split("=", 1)
        out[column] = omitted
    return out


def _ingest(nodes: Path, edges: Path, categorical: List[str], need_outcome: bool = True):
    nets, data = DataUtils.ingest(nodes, edges, categorical=_categorical(categorical))
    if need_outcome and any(np.isnan(d.y).any() for d in data):
        raise InputValidationError(f"Node table {nodes} has no gpa column", module="cli")
    return nets, data


@app.command()
def simulate(
    ctx: typer.Context,
    variant: Optional[DgpVariant] = typer.Option(None, "--variant", help="DGP A, B or C"),
    schools: Optional[int] = typer.Option(None, "--schools", help="Number of schools"),
    school_size: Optional[int] = typer.Option(None, "--school-size", help="Students per school"),
):
    """Write a synthetic node/edge fixture drawn from a Monte Carlo DGP."""
    options = {"variant": variant, "schools": schools, "school_size": school_size}

    def body(out_dir: Path):
        from .dgp import generate_replication_data

        config = _dgp_config(ctx, variant=variant, n_schools=schools, school_size=school_size)
        nets, data, alphas = generate_replication_data(config, 0)
        nodes_path, edges_path = DataUtils.export(nets, data, out_dir)
        share = float(np.mean(np.concatenate([net.iso_mask for net in nets])))
        logger.info(f"Simulated {len(nets)} schools, {share:.1%} isolated")
        return {"nodes": str(nodes_path), "edges": str(edges_path), "isolated_share": share}

    _run(ctx, "simulate", options, body)


def _finite(value: Optional[float]) -> Optional[float]:
    return None if value is None or not np.isfinite(value) else float(value)


def _coefficient_rows(fit, bootstrap=None) -> List[CoefficientRow]:
    white = fit.standard_errors()
    qml = fit.standard_errors(fit.vcov_qml) if fit.vcov_qml is not None else {}
    boot = bootstrap.standard_errors() if bootstrap is not None else {}
    return [
        CoefficientRow(
            name=name,
            estimate=_finite(value),
            se_white=_finite(white[name]),
            se_qml=_finite(qml.get(name)),
            se_bootstrap=_finite(boot.get(name)),
        )
        for name, value in fit.named_estimates().items()
    ]


@app.command()
def estimate(
    ctx: typer.Context,
    nodes: Path = typer.Option(..., "--nodes", help="Node CSV"),
    edges: Path = typer.Option(..., "--edges", help="Edge CSV"),
    model: Optional[int] = typer.Option(None, "--model", min=1, max=4),
    instrument_power: Optional[int] = typer.Option(None, "--instrument-power", min=2),
    two_step: bool = typer.Option(False, "--two-step", help="Efficient two-step GMM"),
    endogenous: bool = typer.Option(False, "--endogenous", help="Add link-formation control bases"),
    bootstrap: Optional[int] = typer.Option(None, "--bootstrap", help="Bootstrap replicates B"),
    hausman_against: Optional[int] = typer.Option(None, "--hausman-against", min=1, max=4),
    hausman_lambda_only: bool = typer.Option(False, "--hausman-lambda-only"),
    categorical: List[str] = typer.Option([], "--categorical", help="column=omitted category"),
    exclude: Optional[SampleRestriction] = typer.Option(
        None, "--exclude", help="Drop isolated or non-nominating students before estimation"
    ),
):
    """Fit one specification and write estimates.json."""
    options = {
        "nodes": str(nodes), "edges": str(edges), "model": model, "instrument_power": instrument_power,
        "two_step": two_step, "endogenous": endogenous, "bootstrap": bootstrap,
        "hausman_against": hausman_against, "categorical": categorical,
        "exclude": exclude.value if exclude is not None else None,
    }

    def body(out_dir: Path):
        from .diagnostics import build_test_report
        from .gmm import fit as fit_gmm, restrict_sample
        from .netform import bootstrap_vcov, build_dyad_covariates, run_control_function
        from .varcomp import fit_varcomp, with_qml_vcov

        section = _section(ctx, "model")
        spec = ModelSpec(
            variant=ModelVariant(model if model is not None else section.get("variant", 4)),
            instrument_power=instrument_power if instrument_power is not None else section.get("instrument_power", 2),
            two_step=two_step or section.get("two_step", False),
        )
        restriction = exclude if exclude is not None else section.get("exclude")
        try:
            restriction = SampleRestriction(restriction) if restriction is not None else None
        except ValueError:
            choices = ", ".join(r.value for r in SampleRestriction)
            raise ConfigurationError(f"[model] exclude must be one of {choices}, got {restriction!r}", module="cli")
        nets, data = restrict_sample(*_ingest(nodes, edges, categorical), restriction)
        outputs = {}
        boot = None
        if endogenous:
            dyads = build_dyad_covariates(data, DyadSpec(**_section(ctx, "netform")))
            first, bases, result = run_control_function(spec, nets, data, dyads)
            outputs["first_stage"] = str(DataUtils.write_csv(out_dir / "first_stage.csv", first.to_frame()))
            outputs["bases"] = str(DataUtils.write_csv(
                out_dir / "bases.csv", pd.DataFrame(bases.bases, columns=bases.names)
            ))
            if bootstrap is not None:
                config = BootstrapConfig(**{**_section(ctx, "bootstrap"), "replicates": bootstrap})
                boot = bootstrap_vcov(spec, nets, data, dyads, config, threads=ctx.obj["threads"])
        else:
            result = fit_gmm(spec, nets, data)

        flags = list(result.flags)
        vc_report = None
        try:
            varcomp_section = _section(ctx, "varcomp")
            vc = fit_varcomp(result, nets, **varcomp_section)
            result = with_qml_vcov(result, vc, nets)
            vc_report = vc.to_report()
        except PeerNetError as e:
            logger.warning(f"Variance components unavailable: {e.detail}")
            flags.append("varcomp_failed")

        diagnostics = result.diagnostics
        against = hausman_against
        if against is None and spec.variant == ModelVariant.DUAL_FE and not endogenous:
            against = ModelVariant.SCHOOL_FE_ISOLATED_DUMMY
        if against is not None:
            try:
                restricted = fit_gmm(spec.model_copy(update={"variant": ModelVariant(against)}), nets, data)
                diagnostics = build_test_report(result, restricted, contrast="lambda" if hausman_lambda_only else "psi")
            except PeerNetError as e:
                logger.warning(f"Hausman test against Model {int(against)} unavailable: {e.detail}")
                flags.append("hausman_failed")

        extra_se = result.extra_standard_errors()
        report = EstimateReport(
            model=spec.variant.label,
            instrument_power=spec.instrument_power,
            n_obs=result.n_obs,
            n_schools=result.design.n_schools,
            coefficients=_coefficient_rows(result, boot),
            extra_coefficients=[
                CoefficientRow(name=name, estimate=_finite(value), se_white=_finite(extra_se[name]))
                for name, value in result.extra_estimates().items()
            ],
            fixed_effects=result.fe_hat,
            variance_components=vc_report,
            diagnostics=diagnostics,
            basis_test=result.basis_test,
            sample_restriction=restriction.value if restriction is not None else None,
            flags=flags + [f"dropped:{name}" for name in result.design.dropped],
        )
        outputs["estimates"] = str(DataUtils.write_json(out_dir / "estimates.json", report))
        if boot is not None:
            outputs["bootstrap"] = str(DataUtils.write_json(out_dir / "bootstrap.json", {
                "replicates": boot.n_success + boot.n_failed, "succeeded": boot.n_success,
                "psi_names": boot.psi_names, "vcov": boot.vcov, "intervals": boot.intervals,
            }))
        return outputs

    _run(ctx, "estimate", options, body)


@app.command()
def mc(
    ctx: typer.Context,
    variant: List[DgpVariant] = typer.Option([], "--variant", help="DGP variants (all if omitted)"),
    replications: Optional[int] = typer.Option(None, "--replications", help="Replications per variant"),
):
    """Monte Carlo replications; writes mc_raw.csv and mc_summary.csv."""
    options = {"variant": [v.value for v in variant], "replications": replications}

    def body(out_dir: Path):
        from .dgp import run_monte_carlo, summarize

        variants = variant or list(DgpVariant)
        records = []
        for v in variants:
            config = _dgp_config(ctx, variant=v, replications=replications)
            records.extend(run_monte_carlo(config, threads=ctx.obj["threads"]))
        summary = summarize(records)
        return {
            "raw": str(DataUtils.write_csv(out_dir / "mc_raw.csv", records)),
            "summary": str(DataUtils.write_csv(out_dir / "mc_summary.csv", summary)),
        }

    _run(ctx, "mc", options, body)


@app.command()
def shock(
    ctx: typer.Context,
    nodes: Path = typer.Option(..., "--nodes", help="Node CSV"),
    edges: Path = typer.Option(..., "--edges", help="Edge CSV"),
    kind: Optional[ShockKind] = typer.Option(None, "--kind"),
    magnitude: Optional[float] = typer.Option(None, "--magnitude"),
    lam: Optional[float] = typer.Option(None, "--lambda", help="Peer effect; estimated from the data when omitted"),
    model: int = typer.Option(4, "--model", min=1, max=4, help="Specification used to estimate lambda"),
    bin_width: Optional[float] = typer.Option(None, "--bin-width"),
    school: List[str] = typer.Option([], "--school", help="Target school (all if omitted)"),
    categorical: List[str] = typer.Option([], "--categorical", help="column=omitted category"),
):
    """Propagate a school-level shock; writes per-student, per-school and histogram CSVs."""
    options = {
        "nodes": str(nodes), "edges": str(edges), "kind": kind, "magnitude": magnitude, "lambda": lam,
        "model": model, "bin_width": bin_width, "school": school,
    }

    def body(out_dir: Path):
        from .counterfactual import DEFAULT_BIN_WIDTH, apply_shock, histogram_rows
        from .gmm import fit as fit_gmm

        section = _section(ctx, "shock")
        scenario = ShockScenario(
            kind=kind or section.get("kind", "pref"),
            magnitude=magnitude if magnitude is not None else section.get("magnitude", 1.0),
            target_schools=school or section.get("target_schools"),
            restricted_model=section.get("restricted_model", 2),
        )
        nets, data = _ingest(nodes, edges, categorical, need_outcome=lam is None)
        peer_effect = lam
        if peer_effect is None:
            peer_effect = fit_gmm(ModelSpec(variant=ModelVariant(model)), nets, data).lam
            logger.info(f"Estimated lambda = {peer_effect:.4f} with {ModelVariant(model).label}")
        result = apply_shock(scenario, peer_effect, nets)
        width = bin_width if bin_width is not None else section.get("bin_width", DEFAULT_BIN_WIDTH)
        return {
            "lambda": peer_effect,
            "label": result.label,
            "summary": result.summary(),
            "students": str(DataUtils.write_csv(out_dir / "shock_students.csv", result.to_frame())),
            "schools": str(DataUtils.write_csv(out_dir / "shock_schools.csv", result.school_summary())),
            "histogram": str(DataUtils.write_csv(out_dir / "shock_histogram.csv", histogram_rows(result, width))),
        }

    _run(ctx, "shock", options, body)


@app.command("check-ident")
def check_ident(
    ctx: typer.Context,
    nodes: Path = typer.Option(..., "--nodes", help="Node CSV"),
    edges: Path = typer.Option(..., "--edges", help="Edge CSV"),
):
    """Graph identification checks per school and pooled; writes ident.json."""
    options = {"nodes": str(nodes), "edges": str(edges)}

    def body(out_dir: Path):
        from .netgraph import check_distance3, check_linmaps_independence, check_variance_identification

        nets, _ = _ingest(nodes, edges, [], need_outcome=False)
        schools = []
        for net in nets:
            d3 = check_distance3(net)
            witness = [net.node_ids[i] for i in d3.witness] if d3.witness is not None else None
            schools.append({
                "school_id": net.school_id,
                "distance3": d3.passed,
                "witness": witness,
                "linmaps": check_linmaps_independence(net).to_dict(),
            })
        pooled = check_variance_identification(nets)
        report = {
            "schools": schools,
            "any_distance3": any(s["distance3"] for s in schools),
            "variance_identification": pooled.to_dict(),
        }
        return {
            "ident": str(DataUtils.write_json(out_dir / "ident.json", report)),
            "any_distance3": report["any_distance3"],
            "variance_identified": pooled.passed,
        }

    _run(ctx, "check-ident", options, body)
