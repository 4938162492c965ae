import logging

from django.core.management.base import BaseCommand

from ...memory import load_snapshot_summary
from ..base import command_errors


class Command(BaseCommand):
    """Summarize a memory snapshot."""

    help = "Print the clusters of a memory snapshot."

    def add_arguments(self, parser):
        parser.add_argument('snapshot', help="Memory snapshot (JSON).")
        parser.add_argument(
            '--quiet',
            action='store_true',
            help="Only log warnings; the summary is still printed.",
        )

    def handle(self, *args, **options):
        """Command handle."""
        if options['quiet']:
            logging.getLogger('continual_traversability').setLevel(logging.WARNING)
        with command_errors():
            summary = load_snapshot_summary(options['snapshot'])

        parameters = ', '.join(
            '{}={}'.format(key, value)
            for key, value in sorted(summary['parameters'].items())
        )
        self.stdout.write(
            "strategy {} ({}): {} nodes stored of {} inserted, {} clusters".format(
                summary['strategy'],
                parameters,
                summary['stored'],
                summary['total_inserted'],
                len(summary['clusters']),
            )
        )
        for cluster in summary['clusters']:
            scenes = ', '.join(
                '{}: {}'.format(scene, count) for scene, count in sorted(
                    cluster['scenes'].items(), key=lambda item: str(item[0])
                )
            )
            self.stdout.write(
                "  cluster {:>3}  nodes {:>3}  scenes {{{}}}  frames {}..{}".format(
                    cluster['id'],
                    cluster['size'],
                    scenes,
                    min(cluster['frames']) if cluster['frames'] else '-',
                    max(cluster['frames']) if cluster['frames'] else '-',
                )
            )
