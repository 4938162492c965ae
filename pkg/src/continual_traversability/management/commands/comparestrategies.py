from ...experiment import compare_strategies
from ...protocol import STRATEGIES
from ...reports import AGGREGATE_SCENE, format_value
from ..base import ExperimentCommand, comma_list, command_errors


class Command(ExperimentCommand):
    """Compare replay strategies."""

    help = "Run several replay strategies on the same stream and tabulate them."

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument(
            '--strategies',
            help="Comma separated strategies ({}); overrides the config.".format(
                ', '.join(STRATEGIES)
            ),
        )
        parser.add_argument(
            '--lambda',
            dest='threshold',
            type=float,
            help="Memory divergence threshold.",
        )

    def overrides(self, options):
        overrides = super().overrides(options)
        if options.get('strategies'):
            overrides['strategies'] = comma_list(options['strategies'])
        overrides['memory.threshold'] = options.get('threshold')
        return overrides

    def handle(self, *args, **options):
        """Command handle."""
        config = self.load_config(options)
        out_dir = self.output(config, options)
        with command_errors():
            result = compare_strategies(config, out_dir)

        for row in result.rows:
            if row['scene'] != AGGREGATE_SCENE:
                continue
            self.say(
                options,
                "{:<18} auroc {:>10} iou {:>10} recall {:>10}".format(
                    row['strategy'],
                    format_value(row['auroc']),
                    format_value(row['iou']),
                    format_value(row['recall']),
                ),
            )
