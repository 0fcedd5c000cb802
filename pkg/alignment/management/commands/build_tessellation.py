"""
Build the 600-cell cover of S3 and write the S3TESS01 cache.

Usage:
    python manage.py build_tessellation
    python manage.py build_tessellation --output /tmp/s3tess.bin
"""
import time

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from alignment.exceptions import AlignmentError
from alignment.services.tess_s3 import generate_600cell


class Command(BaseCommand):
    help = 'Build the 600-cell tessellation of S3 and cache it to disk'

    def add_arguments(self, parser):
        parser.add_argument(
            '--output',
            type=str,
            default=None,
            help='Cache path (default: settings.TESSELLATION_CACHE)',
        )

    def handle(self, *args, **options):
        output = options['output'] or settings.TESSELLATION_CACHE
        started = time.perf_counter()
        try:
            tessellation = generate_600cell()
            tessellation.save(output)
        except AlignmentError as e:
            raise CommandError(str(e), returncode=e.exit_code)
        elapsed = time.perf_counter() - started

        self.stdout.write(
            f"{len(tessellation.vertices)} vertices, {len(tessellation.cells)} cells, "
            f"{len(tessellation.hemisphere_cells)} upper-hemisphere cells"
        )
        self.stdout.write(self.style.SUCCESS(f"✅ Tessellation written to {output} in {elapsed:.2f} s"))
