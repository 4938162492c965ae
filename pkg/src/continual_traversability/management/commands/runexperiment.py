from ...experiment import run_experiment
from ...protocol import STRATEGIES
from ..base import ExperimentCommand, command_errors


class Command(ExperimentCommand):
    """Run one experiment."""

    help = "Stream a scenario or recorded session through memory and learner."

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--strategy', choices=STRATEGIES, help="Replay strategy.")
        parser.add_argument(
            '--lambda',
            dest='threshold',
            type=float,
            help="Memory divergence threshold.",
        )

    def overrides(self, options):
        overrides = super().overrides(options)
        overrides['strategy'] = options.get('strategy')
        overrides['memory.threshold'] = options.get('threshold')
        return overrides

    def handle(self, *args, **options):
        """Command handle."""
        config = self.load_config(options)
        out_dir = self.output(config, options)
        with command_errors():
            result = run_experiment(config, out_dir)

        aggregate = result.summary['aggregate']
        self.say(
            options,
            "{} run finished: {} clusters, {} nodes stored; aggregate AUROC {} IoU {}; "
            "artifacts in {}".format(
                result.strategy,
                result.memory.cluster_count,
                len(result.memory),
                _short(aggregate['auroc']),
                _short(aggregate['iou']),
                out_dir,
            ),
        )


def _short(value):
    try:
        return '{:.4f}'.format(value)
    except (TypeError, ValueError):
        return 'undefined'
