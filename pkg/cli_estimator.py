#!/usr/bin/env python3
"""
Command Line Interface for spillover estimation on mismeasured networks
Usage examples:
  python cli_estimator.py ht --design design.csv --graph edges.csv --assign-prob 0.25
  python cli_estimator.py fit --design design.csv --graph edges.csv --family binomial --bootstrap 200
  python cli_estimator.py simulate --protocol protocol.json --threads 4
  python cli_estimator.py bias-oracle --true-graph true.csv --observed-graph observed.csv \
      --potential-outcomes potential.csv --assign-prob 0.5
"""

import argparse
import hashlib
import json
import logging
import sys
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional

import pandas as pd
from rich.panel import Panel
from rich.table import Table

# Add project root to path
sys.path.append(str(Path(__file__).parent))

from config import Config
from estimation.bootstrap import parametric_bootstrap
from estimation.em_engine import contrasts, fit
from estimation.exposure import fit_naive_family, ht_bias_oracle, ht_estimate, regression_estimate
from estimation.fit_diagnostics import FitDiagnostics
from estimation.mixture import ExperimentData
from models.data_models import (
    CONDITION_LABELS,
    ExperimentDesign,
    FitConfig,
    RunManifest,
    SimProtocol,
)
from models.errors import DesignFileError, FitRejectedError, SimulationFailedError, SpilloverError
from simulation.harness import run_protocol
from utils.console import console, setup_logging
from utils.file_processor import FileProcessor

logger = logging.getLogger(__name__)

CONTRAST_LABELS = {
    "gaussian": {"direct": "Direct", "network_intensive": "Network Intensive", "interaction": "Interaction"},
    "binomial": {"direct": "Intensive Session", "network_intensive": "Network Intensive", "interaction": "Interaction"},
}


def _config_hash(payload: dict) -> str:
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class SpilloverCLI:
    """Runs one subcommand and persists its results, node map and manifest"""

    def __init__(self, output_dir: str = Config.OUTPUT_DIR, threads: int = Config.THREADS, quiet: bool = False):
        self.file_processor = FileProcessor()
        self.output_dir = Path(output_dir)
        self.threads = threads
        self.quiet = quiet
        self.started_at = datetime.now()

    # Ingestion

    def load_experiment(self, design_path: str, graph_path: str, assign_prob: Optional[float]):
        """Design table and edge list as (design, graph, node ids); ids follow the design's row order.

        Without assign_prob the treated share stands in for it.
        """
        table = self.file_processor.read_design(design_path)
        node_ids = table["node"].tolist()
        node_index = {node: i for i, node in enumerate(node_ids)}
        node_group = table["group"].tolist() if "group" in table.columns else None
        graph = self.file_processor.read_edge_list(graph_path, node_index=node_index, node_group=node_group)
        if assign_prob is None:
            assign_prob = float(table["treatment"].mean())
            if not 0.0 < assign_prob < 1.0:
                raise DesignFileError(f"{Path(design_path).name}: every subject has the same treatment")
        design = ExperimentDesign(
            treatment=table["treatment"].tolist(),
            assign_prob=assign_prob,
            outcomes=table["outcome"].tolist(),
        )
        return design, graph, node_ids

    def write_node_map(self, node_ids: List[str]) -> Path:
        frame = pd.DataFrame({"node": node_ids, "index": range(len(node_ids))})
        return self.file_processor.write_table(frame, self.output_dir / "node_map.csv")

    def write_manifest(self, command: str, config: dict, inputs: List[str], seed: int) -> Path:
        manifest = RunManifest(
            command=command,
            config_hash=_config_hash(config),
            input_digests={str(path): self.file_processor.file_digest(path) for path in inputs},
            seed=seed,
            tool_version=Config.VERSION,
            started_at=self.started_at,
            finished_at=datetime.now(),
        )
        return self.file_processor.write_json(manifest.model_dump(mode="json"), self.output_dir / "manifest.json")

    # Subcommands

    def run_ht(self, design_path: str, graph_path: str, assign_prob: float, allow_empty: bool = False) -> dict:
        design, graph, node_ids = self.load_experiment(design_path, graph_path, assign_prob)
        result = ht_estimate(design, graph, strict=not allow_empty)
        included = set(result.included)
        payload = {
            "command": "ht",
            "assign_prob": assign_prob,
            "means": result.means,
            "contrasts": contrasts(result.means),
            "n_included": result.n_included,
            "excluded_nodes": [node_ids[i] for i in result.excluded],
            "empty_conditions": result.empty_conditions,
            "subjects": [
                {
                    "node": node_ids[i],
                    "treatment": int(design.treatment[i]),
                    "condition": result.conditions[i],
                    "probabilities": dict(zip(CONDITION_LABELS, result.probabilities[i])),
                    "included": i in included,
                }
                for i in range(design.n_nodes)
            ],
        }
        self.file_processor.write_json(payload, self.output_dir / "ht.json")
        self.write_node_map(node_ids)
        config = {"command": "ht", "assign_prob": assign_prob, "allow_empty": allow_empty}
        self.write_manifest("ht", config, [design_path, graph_path], seed=0)
        if not self.quiet:
            self.display_means("📊 Horvitz-Thompson Estimates", result.means, "gaussian")
            if result.excluded:
                console.print(f"[yellow]⚠️ {len(result.excluded)} subject(s) with observed in-degree 0 excluded[/yellow]")
        return payload

    def build_fit_config(self, config_path: Optional[str], overrides: dict) -> FitConfig:
        raw = {}
        if config_path:
            raw = self.file_processor.load_model(config_path, FitConfig).model_dump(exclude_unset=True)
        raw.update({key: value for key, value in overrides.items() if value is not None})
        return self.file_processor.validate_model(raw, FitConfig, Path(config_path).name if config_path else "flags")

    def run_fit(
        self,
        design_path: str,
        graph_path: str,
        assign_prob: Optional[float],
        config: FitConfig,
        config_path: Optional[str] = None,
        bootstrap_reps: int = 0,
        strict: bool = False,
        write_responsibilities: bool = False,
    ) -> dict:
        design, graph, node_ids = self.load_experiment(design_path, graph_path, assign_prob)
        data = ExperimentData(
            [(design, graph)],
            prior_config=config.prior,
            stratified=config.stratified,
            tail_mass=config.tail_mass,
        )
        if not self.quiet:
            with console.status("[green]Fitting the exposure mixture..."):
                result = fit(data, config)
        else:
            result = fit(data, config)
        if bootstrap_reps:
            if not self.quiet:
                with console.status(f"[green]Bootstrapping {bootstrap_reps} replicates..."):
                    summary = parametric_bootstrap(result, data, config, m_reps=bootstrap_reps, seed=config.seed)
            else:
                summary = parametric_bootstrap(result, data, config, m_reps=bootstrap_reps, seed=config.seed)
            result = result.model_copy(update={"bootstrap": summary})

        diagnostics = FitDiagnostics(config.pq_bounds)
        report = diagnostics.validate(result)
        if not self.quiet:
            diagnostics.print_report(report, console, source=design_path)
        if strict and not report.is_acceptable:
            raise FitRejectedError(f"fit graded {report.grade.value} by diagnostics (strict mode)")

        naive = fit_naive_family(design, graph, config.family, config.trials)
        baseline_means = regression_estimate(design, graph, naive, exclude_isolated=config.exclude_isolated)
        payload = {
            "command": "fit",
            "assign_prob": assign_prob,
            "result": result.model_dump(mode="json"),
            "contrast_labels": CONTRAST_LABELS[config.family],
            "no_mismeasurement": {
                "family": naive.model_dump(mode="json"),
                "mean_outcomes": baseline_means,
                "contrasts": contrasts(baseline_means),
            },
            "diagnostics": report.to_dict(),
        }
        if assign_prob is not None:
            ht = ht_estimate(design, graph, strict=False)
            payload["ht"] = {
                "means": ht.means,
                "contrasts": contrasts(ht.means),
                "n_included": ht.n_included,
                "empty_conditions": ht.empty_conditions,
            }
        self.file_processor.write_json(payload, self.output_dir / "fit.json")
        self.write_node_map(node_ids)
        if write_responsibilities:
            self.write_responsibilities(result.responsibilities, node_ids)
        inputs = [design_path, graph_path] + ([config_path] if config_path else [])
        manifest_config = {
            "command": "fit",
            "assign_prob": assign_prob,
            "bootstrap": bootstrap_reps,
            "strict": strict,
            "fit": config.model_dump(mode="json", exclude={"threads"}),
        }
        self.write_manifest("fit", manifest_config, inputs, seed=config.seed)
        if not self.quiet:
            self.display_fit(result, baseline_means, config.family)
        return payload

    def write_responsibilities(self, gamma, node_ids: List[str]) -> Path:
        """Per-subject posterior over the latent condition, degrees summed out"""
        marginal = gamma.sum(axis=2)
        frame = pd.DataFrame(marginal, columns=list(CONDITION_LABELS))
        frame.insert(0, "node", node_ids)
        return self.file_processor.write_table(frame, self.output_dir / "responsibilities.csv")

    def run_simulate(self, protocol_path: str, seed: Optional[int] = None, strict: bool = False) -> dict:
        protocol = self.file_processor.load_model(protocol_path, SimProtocol)
        if seed is not None:
            protocol = protocol.model_copy(update={"seed": seed})
        if not self.quiet:
            with console.status("[green]Running simulation grid..."):
                result = run_protocol(protocol, threads=self.threads)
        else:
            result = run_protocol(protocol, threads=self.threads)
        if strict and not result.failures.empty:
            first = result.failures.iloc[0]
            raise SimulationFailedError(
                f"{len(result.failures)} estimation failure(s) (strict mode); first: {first['method']} "
                f"at p={first['p']}, q={first['q']}: {first['error']}"
            )
        self.file_processor.write_table(result.grid, self.output_dir / "grid.csv")
        self.file_processor.write_table(result.records, self.output_dir / "records.csv")
        self.file_processor.write_table(result.failures, self.output_dir / "failures.csv")
        inputs = [protocol_path] + list(protocol.edge_lists or [])
        self.write_manifest("simulate", protocol.model_dump(mode="json"), inputs, seed=protocol.seed)
        if not self.quiet:
            self.display_grid(result.grid, len(result.failures))
        return {"rows": len(result.grid), "records": len(result.records), "failures": len(result.failures)}

    def run_bias_oracle(
        self,
        true_graph_path: str,
        observed_graph_path: str,
        potential_path: str,
        assign_prob: float,
        n_assignments: int,
        seed: int,
    ) -> dict:
        node_index = self.file_processor.read_node_index(potential_path)
        potential = self.file_processor.read_potential_outcomes(potential_path, node_index)
        true_graph = self.file_processor.read_edge_list(true_graph_path, node_index=node_index)
        observed_graph = self.file_processor.read_edge_list(observed_graph_path, node_index=node_index)
        result = ht_bias_oracle(true_graph, observed_graph, potential, assign_prob, n_assignments=n_assignments, seed=seed)
        payload = {"command": "bias-oracle", "assign_prob": assign_prob, **result.model_dump(mode="json")}
        self.file_processor.write_json(payload, self.output_dir / "bias_oracle.json")
        self.write_node_map(list(node_index))
        config = {"command": "bias-oracle", "assign_prob": assign_prob, "n_assignments": n_assignments}
        self.write_manifest("bias-oracle", config, [true_graph_path, observed_graph_path, potential_path], seed)
        if not self.quiet:
            self.display_oracle(result)
        return payload

    # Display

    def display_means(self, title: str, means: Dict[str, float], family: str):
        table = Table(title=title)
        table.add_column("Condition", style="cyan")
        table.add_column("Mean", style="magenta", justify="right")
        for label in CONDITION_LABELS:
            table.add_row(label, f"{means[label]:.4f}")
        for name, value in contrasts(means).items():
            table.add_row(CONTRAST_LABELS[family][name], f"{value:.4f}", style="green")
        console.print(table)

    def display_fit(self, result, baseline: Dict[str, float], family: str):
        emoji = "✅" if result.converged else "⚠️"
        table = Table(title=f"{emoji} EM Fit Summary")
        table.add_column("Quantity", style="cyan")
        table.add_column("Mismeasured model", style="magenta", justify="right")
        table.add_column("No mismeasurement", style="blue", justify="right")
        if result.bootstrap is not None:
            table.add_column("Bootstrap SE", style="yellow", justify="right")
        se = result.bootstrap.se if result.bootstrap is not None else {}

        def row(name: str, value: float, base: Optional[float], key: str):
            cells = [name, f"{value:.4f}", "" if base is None else f"{base:.4f}"]
            if result.bootstrap is not None:
                cells.append(f"{se[key]:.4f}" if key in se else "")
            table.add_row(*cells)

        for label in CONDITION_LABELS:
            row(label, result.mean_outcomes[label], baseline[label], f"mean:{label}")
        base_contrasts = contrasts(baseline)
        for name, value in result.contrasts.items():
            row(CONTRAST_LABELS[family][name], value, base_contrasts[name], f"contrast:{name}")
        row("p (missed edge)", result.mismeasure.p, None, "p")
        row("q (false edge)", result.mismeasure.q, None, "q")
        console.print(table)
        console.print(
            Panel(
                f"log-likelihood {result.loglik:.4f} after {result.n_iters} iterations (start {result.best_start})",
                title="🔁 EM",
                border_style="blue",
            )
        )

    def display_grid(self, grid: pd.DataFrame, n_failures: int):
        table = Table(title="📈 Simulation Summary (mean deviation across grid cells)")
        table.add_column("Method", style="cyan")
        table.add_column("Condition", style="cyan")
        table.add_column("Mean deviation", style="magenta", justify="right")
        if not grid.empty:
            mean_dev = grid[grid["stat"] == "mean_dev"]
            summary = mean_dev.groupby(["method", "condition"], sort=False)["value"].mean()
            for (method, condition), value in summary.items():
                table.add_row(method, condition, f"{value:.4f}")
        console.print(table)
        if n_failures:
            console.print(f"[yellow]⚠️ {n_failures} estimation failure(s) logged to failures.csv[/yellow]")

    def display_oracle(self, result):
        table = Table(title=f"🎯 HT Bias Oracle ({result.method}, {result.n_assignments} assignments)")
        table.add_column("Condition", style="cyan")
        table.add_column("Expected HT", style="magenta", justify="right")
        table.add_column("True mean", style="blue", justify="right")
        table.add_column("Bias", style="red", justify="right")
        for label in CONDITION_LABELS:
            table.add_row(
                label,
                f"{result.expected[label]:.4f}",
                f"{result.true_means[label]:.4f}",
                f"{result.bias[label]:.4f}",
            )
        console.print(table)


def _probability(text: str) -> float:
    value = float(text)
    if not 0.0 < value < 1.0:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1), got {text}")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="Seed for every random draw of the run")
    common.add_argument("--threads", type=_positive, default=Config.THREADS, help="Worker threads (SPILLOVER_THREADS)")
    common.add_argument("--output-dir", default=Config.OUTPUT_DIR, help="Directory for results and manifest")
    common.add_argument("--quiet", "-q", action="store_true", help="Minimal output")
    common.add_argument("--verbose", "-v", action="store_true", help="Log progress at INFO level")

    parser = argparse.ArgumentParser(
        description="Spillover effect estimation on mismeasured networks",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s ht --design design.csv --graph edges.csv --assign-prob 0.25
  %(prog)s fit --design design.csv --graph edges.csv --config fit.json --bootstrap 200
  %(prog)s simulate --protocol protocol.json --threads 4
  %(prog)s bias-oracle --true-graph true.csv --observed-graph observed.csv --potential-outcomes po.csv --assign-prob 0.5
        """,
    )
    commands = parser.add_subparsers(dest="command", required=True)

    ht = commands.add_parser("ht", parents=[common], help="Horvitz-Thompson estimates on the observed network")
    ht.add_argument("--design", required=True, help="CSV with node,treatment,outcome[,group]")
    ht.add_argument("--graph", required=True, help="Edge-list CSV with src,dst[,stratum]")
    ht.add_argument("--assign-prob", type=_probability, required=True, help="Bernoulli assignment probability")
    ht.add_argument("--allow-empty", action="store_true", help="Report 0 for conditions with no subjects")

    fit_cmd = commands.add_parser("fit", parents=[common], help="EM fit of the mismeasured-network mixture")
    fit_cmd.add_argument("--design", required=True, help="CSV with node,treatment,outcome[,group]")
    fit_cmd.add_argument("--graph", required=True, help="Edge-list CSV with src,dst[,stratum]")
    fit_cmd.add_argument("--assign-prob", type=_probability, help="Bernoulli assignment probability; adds an HT comparison")
    fit_cmd.add_argument("--config", help="FitConfig JSON file")
    fit_cmd.add_argument("--family", choices=["gaussian", "binomial"], help="Outcome family")
    fit_cmd.add_argument("--stratified", action="store_true", help="Separate (p, q) within and between groups")
    fit_cmd.add_argument("--bootstrap", type=int, default=0, metavar="M", help="Parametric bootstrap replicates")
    fit_cmd.add_argument("--responsibilities", action="store_true", help="Also write responsibilities.csv")
    fit_cmd.add_argument("--strict", action="store_true", help="Fail instead of writing a fit that fails diagnostics")

    sim = commands.add_parser("simulate", parents=[common], help="Run a simulation protocol over a (p, q) grid")
    sim.add_argument("--protocol", required=True, help="SimProtocol JSON file")
    sim.add_argument("--strict", action="store_true", help="Fail instead of writing a grid with estimation failures")

    oracle = commands.add_parser("bias-oracle", parents=[common], help="Exact or Monte Carlo expected HT bias")
    oracle.add_argument("--true-graph", required=True, help="Edge list of the true network")
    oracle.add_argument("--observed-graph", required=True, help="Edge list of the observed network")
    oracle.add_argument("--potential-outcomes", required=True, help="CSV with node,y00,y01,y10,y11")
    oracle.add_argument("--assign-prob", type=_probability, required=True, help="Bernoulli assignment probability")
    oracle.add_argument("--n-assignments", type=_positive, default=100_000, help="Monte Carlo draws above 12 nodes")
    return parser


def _error_payload(exc: Exception) -> dict:
    payload = {"error": type(exc).__name__, "message": str(exc)}
    for key in ("line", "subject"):
        value = getattr(exc, key, None)
        if value is not None:
            payload[key] = value
    return payload


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point; returns the process exit code"""
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.quiet:
        setup_logging("ERROR")
    elif args.verbose:
        setup_logging("INFO")
    else:
        setup_logging(Config.LOG_LEVEL)
    logger.info("running %s", args.command)

    cli = SpilloverCLI(output_dir=args.output_dir, threads=args.threads, quiet=args.quiet)
    try:
        if args.command == "ht":
            cli.run_ht(args.design, args.graph, args.assign_prob, allow_empty=args.allow_empty)
        elif args.command == "fit":
            overrides = {
                "family": args.family,
                "stratified": True if args.stratified else None,
                "seed": args.seed,
                "threads": args.threads,
            }
            config = cli.build_fit_config(args.config, overrides)
            cli.run_fit(
                args.design,
                args.graph,
                args.assign_prob,
                config,
                config_path=args.config,
                bootstrap_reps=args.bootstrap,
                strict=args.strict,
                write_responsibilities=args.responsibilities,
            )
        elif args.command == "simulate":
            cli.run_simulate(args.protocol, seed=args.seed, strict=args.strict)
        else:
            cli.run_bias_oracle(
                args.true_graph,
                args.observed_graph,
                args.potential_outcomes,
                args.assign_prob,
                args.n_assignments,
                seed=args.seed if args.seed is not None else 0,
            )
    except (SpilloverError, ValueError, OSError) as exc:
        sys.stderr.write(json.dumps(_error_payload(exc)) + "\n")
        return 1
    except KeyboardInterrupt:
        console.print("\n[yellow]👋 Interrupted by user[/yellow]")
        return 1
    except Exception as exc:
        logger.exception("unexpected error")
        sys.stderr.write(json.dumps(_error_payload(exc)) + "\n")
        return 1

    if not args.quiet:
        console.print(f"[green]💾 Results saved to: {args.output_dir}[/green]")
    return 0


if __name__ == "__main__":
    sys.exit(main())
