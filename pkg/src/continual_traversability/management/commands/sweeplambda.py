from ...experiment import sweep_lambda
from ..base import ExperimentCommand, comma_list, command_errors


class Command(ExperimentCommand):
    """Sweep the memory divergence threshold."""

    help = "Report the memory cluster count for a list of divergence thresholds."

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--lambdas', help="Comma separated thresholds.")
        parser.add_argument(
            '--train',
            action='store_true',
            help="Also train and evaluate per threshold.",
        )

    def overrides(self, options):
        overrides = super().overrides(options)
        if options.get('lambdas'):
            overrides['sweep.lambdas'] = comma_list(options['lambdas'], float)
        if options.get('train'):
            overrides['sweep.train'] = True
        return overrides

    def handle(self, *args, **options):
        """Command handle."""
        config = self.load_config(options)
        out_dir = self.output(config, options)
        with command_errors():
            result = sweep_lambda(config, out_dir)

        for row in result.rows:
            self.say(
                options,
                "lambda {:<8g} clusters {:<4} stored {}".format(
                    row['lambda'], row['clusters'], row['stored_nodes']
                ),
            )
