import logging

from django.core.management.base import BaseCommand

from ...experiment import annotate_recorded_session
from ...protocol import SEGMENTER_ORACLE, SEGMENTER_RECORDED
from ..base import command_errors


class Command(BaseCommand):
    """Annotate a recorded session."""

    help = (
        "Project odometry footprints into a recorded session and write a copy "
        "with the resulting prompts and masks."
    )

    def add_arguments(self, parser):
        parser.add_argument('session', help="Recorded session to annotate.")
        parser.add_argument('--out', required=True, help="Annotated session path.")
        parser.add_argument('--odometry', help="Plain-text odometry file.")
        parser.add_argument('--calibration', help="Calibration JSON document.")
        parser.add_argument(
            '--segmenter',
            choices=[SEGMENTER_ORACLE, SEGMENTER_RECORDED],
            default=SEGMENTER_ORACLE,
        )
        parser.add_argument('--frame-period', type=float, default=0.1)
        parser.add_argument('--d-max', type=float, help="Footprint distance limit (m).")
        parser.add_argument('--z-min', type=float, help="Minimum camera depth (m).")
        parser.add_argument(
            '--symmetric',
            action='store_true',
            help="Also use footprints recorded before the frame.",
        )
        parser.add_argument('--quiet', action='store_true')

    def handle(self, *args, **options):
        """Command handle."""
        if options['quiet']:
            options['verbosity'] = 0
            logging.getLogger('continual_traversability').setLevel(logging.WARNING)
        with command_errors():
            totals = annotate_recorded_session(
                options['session'],
                options['out'],
                odometry=options['odometry'],
                calibration=options['calibration'],
                segmenter=options['segmenter'],
                frame_period=options['frame_period'],
                d_max=options['d_max'],
                z_min=options['z_min'],
                future_only=False if options['symmetric'] else None,
            )
        if options['verbosity'] > 0:
            self.stdout.write(
                "{} frames annotated: {} prompts, {} footprints dropped, "
                "{} failed segmentations".format(
                    totals.frames,
                    totals.prompts,
                    totals.dropped_prompts,
                    totals.failed_segmentations,
                )
            )
