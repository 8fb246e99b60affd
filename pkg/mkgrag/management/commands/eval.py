import os

from django.core.management.base import BaseCommand, CommandError

from mkgrag.services.backends import BackendError
from mkgrag.services.evaluation import EvaluationError
from mkgrag.services.experiments import (
    ExperimentConfig,
    ExperimentError,
    load_config,
    run_experiment,
    run_sweep,
    save_report,
)
from mkgrag.services.fusion import FusionError
from mkgrag.services.index import VectorIndexError
from mkgrag.services.retrieval import MODES, RetrievalError


class Command(BaseCommand):
    help = "Runs an evaluation dataset through the engine and writes a metrics report"

    def add_arguments(self, parser):
        parser.add_argument("--config", type=str, default=None, help="Experiment config JSON")
        parser.add_argument("--dataset", type=str, required=True, help="Dataset JSON lines file")
        parser.add_argument("--report", type=str, required=True, help="Report destination")
        parser.add_argument("--sweep-k-g", type=int, nargs="+", default=None)
        parser.add_argument("--sweep-hops", type=int, nargs="+", default=None)
        parser.add_argument("--sweep-modes", choices=MODES, nargs="+", default=None)

    def handle(self, *args, **options):
        sweep = options["sweep_k_g"] or options["sweep_hops"] or options["sweep_modes"]
        try:
            cfg = load_config(options["config"]) if options["config"] else ExperimentConfig.from_settings()
            if sweep:
                reports = run_sweep(
                    cfg,
                    options["dataset"],
                    k_g=options["sweep_k_g"],
                    hops=options["sweep_hops"],
                    modes=options["sweep_modes"],
                )
            else:
                reports = [run_experiment(cfg, options["dataset"])]
        except (
            BackendError,
            EvaluationError,
            ExperimentError,
            FusionError,
            RetrievalError,
            VectorIndexError,
        ) as error:
            raise CommandError(str(error)) from error

        if len(reports) == 1:
            save_report(reports[0], options["report"])
            paths = [options["report"]]
        else:
            base, extension = os.path.splitext(options["report"])
            paths = []
            for report in reports:
                point = report["config"]
                path = f"{base}.{point['mode']}.l{point['hops']}.kg{point['k_g']}{extension or '.json'}"
                save_report(report, path)
                paths.append(path)

        for report, path in zip(reports, paths):
            metrics = report["metrics"]
            self.stdout.write(
                f"{path}: accuracy {metrics['accuracy_exact']:.3f} "
                f"(contains {metrics['accuracy_contains']:.3f}), R@1 {metrics['recall@1']:.3f}"
            )
        self.stdout.write(self.style.SUCCESS(f"Wrote {len(reports)} report(s)"))
