"""
Seed test data: write the synthetic floor/wall/ramp surface, optionally with a
rigidly moved copy for end-to-end alignment runs.

Usage:
    python manage.py seed_synthetic_cloud --output var/source.ply
    python manage.py seed_synthetic_cloud --output var/source.ply --transformed-output var/target.ply \
        --rotation-deg 60 --translation 0.2,-0.1,0.3 --seed 3

The transformed copy is target = R0 source + t0, so aligning target onto
source recovers q = R0^-1 and t = -R0^-1 t0.
"""
import numpy as np
from django.core.management.base import BaseCommand, CommandError
from rest_framework.exceptions import ValidationError

from alignment.exceptions import AlignmentError
from alignment.serializers import CommaSeparatedFloatsField
from alignment.services.cloud_io import write_cloud
from alignment.services.synthetic import rigid_copy, rotation_about_random_axis, three_patch_surface


class Command(BaseCommand):
    help = 'Write a synthetic nonsymmetric three-patch surface (and a transformed copy)'

    def add_arguments(self, parser):
        parser.add_argument('--output', required=True, help='Path of the surface (.ply, .xyz, .txt)')
        parser.add_argument('--points', type=int, default=2000, help='Number of points (default: 2000)')
        parser.add_argument('--noise', type=float, default=0.0, help='Noise along the surface normal (default: 0)')
        parser.add_argument('--rotation-deg', type=float, default=45.0, help='Rotation angle of the copy (default: 45)')
        parser.add_argument('--translation', default='0,0,0', help='x,y,z translation of the copy (default: 0,0,0)')
        parser.add_argument('--seed', type=int, default=0, help='Random seed (default: 0)')
        parser.add_argument('--transformed-output', default=None, help='Path of the rigidly transformed copy')

    def handle(self, *args, **options):
        if options['points'] < 10:
            raise CommandError("--points must be at least 10", returncode=2)
        field = CommaSeparatedFloatsField(length=3)
        try:
            translation = np.array(field.to_internal_value(options['translation']))
        except ValidationError as e:
            raise CommandError(f"--translation: {e.detail[0]}", returncode=2)

        rng = np.random.default_rng(options['seed'])
        surface = three_patch_surface(rng, count=options['points'], noise=options['noise'])
        try:
            write_cloud(options['output'], surface.points, surface.normals)
            self.stdout.write(self.style.SUCCESS(f"✅ Wrote {len(surface)} points to {options['output']}"))

            if options['transformed_output']:
                rotation = rotation_about_random_axis(rng, options['rotation_deg'])
                moved = rigid_copy(surface, rotation, translation)
                write_cloud(options['transformed_output'], moved.points, moved.normals)
                self.stdout.write(f"  R0 (i,j,k,r): {rotation.as_list()}")
                self.stdout.write(f"  t0: {translation.tolist()}")
                self.stdout.write(self.style.SUCCESS(f"✅ Wrote transformed copy to {options['transformed_output']}"))
        except AlignmentError as e:
            raise CommandError(str(e), returncode=e.exit_code)
