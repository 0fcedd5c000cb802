"""
Unit tests for the align command option validation.
"""

import pytest
from rest_framework.exceptions import ValidationError

from alignment.serializers import AlignOptionsSerializer, CommaSeparatedFloatsField


def _options(**extra):
    return {'source': 'a.ply', 'target': 'b.ply', 'out': 'result.json', **extra}


class TestCommaSeparatedFloatsField:
    """Test "1,2,3" parsing."""

    def test_parses_numbers(self):
        assert CommaSeparatedFloatsField().run_validation('45, 65,80') == (45.0, 65.0, 80.0)

    def test_enforces_length(self):
        with pytest.raises(ValidationError) as excinfo:
            CommaSeparatedFloatsField(length=3).run_validation('1,2')
        assert 'Expected 3' in str(excinfo.value.detail[0])

    @pytest.mark.parametrize('text', ['1,a', 'nan,1', ' , '])
    def test_rejects_bad_values(self, text):
        with pytest.raises(ValidationError):
            CommaSeparatedFloatsField().run_validation(text)


class TestAlignOptionsSerializer:
    """Test validation and mapping onto AlignmentConfig overrides."""

    def test_minimal_options(self):
        serializer = AlignOptionsSerializer(data=_options())
        assert serializer.is_valid(), serializer.errors
        overrides = serializer.config_overrides()

        assert overrides['rot_depth'] is None
        assert overrides['mw_enabled'] is False
        assert overrides['union_box'] is False
        assert overrides['rot_extrema'] is None

    def test_full_options(self):
        serializer = AlignOptionsSerializer(data=_options(
            lambda_deg='30,60', lambda_x=0.2, rot_tol_deg=2.0, trans_depth=8, mw=True,
            knn=12, threads=2, viewpoint='0,0,5', rot_extrema='cone', paper_box=True,
        ))
        assert serializer.is_valid(), serializer.errors
        overrides = serializer.config_overrides()

        assert overrides['lambda_deg_list'] == (30.0, 60.0)
        assert overrides['rot_tol_deg'] == 2.0
        assert overrides['trans_depth'] == 8
        assert overrides['mw_enabled'] is True
        assert overrides['knn_k'] == 12
        assert overrides['viewpoint'] == (0.0, 0.0, 5.0)
        assert overrides['rot_extrema'] == 'cone'
        assert overrides['union_box'] is True

    @pytest.mark.parametrize('field, value', [
        ('lambda_deg', '45,180'),
        ('lambda_deg', '0'),
        ('lambda_x', -1.0),
        ('rot_tol_deg', 0.0),
        ('rot_tol_deg', 200.0),
        ('trans_tol', 0.0),
        ('rot_depth', -1),
        ('knn', 2),
        ('threads', 0),
        ('viewpoint', '1,2'),
        ('rot_extrema', 'simplex'),
    ])
    def test_invalid_values(self, field, value):
        serializer = AlignOptionsSerializer(data=_options(**{field: value}))
        assert not serializer.is_valid()
        assert field in serializer.errors

    def test_paths_are_required(self):
        serializer = AlignOptionsSerializer(data={'source': 'a.ply'})
        assert not serializer.is_valid()
        assert set(serializer.errors) == {'target', 'out'}
