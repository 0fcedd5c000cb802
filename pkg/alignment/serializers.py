import math

from rest_framework import serializers


def _finite_or_none(value):
    """JSON has no infinities; unbounded values are written as null."""
    if value is None:
        return None
    value = float(value)
    return value if math.isfinite(value) else None


def _float_list(values):
    return [float(v) for v in values]


class CandidateDiagnosticsSerializer(serializers.Serializer):
    """One rotation hypothesis with the outcome of its translational search"""
    index = serializers.IntegerField(read_only=True)
    q_ijkr = serializers.ListField(child=serializers.FloatField(), read_only=True)
    origin = serializers.CharField(read_only=True)
    lambda_deg = serializers.FloatField(read_only=True)
    rot_lower = serializers.FloatField(read_only=True)
    rot_upper = serializers.FloatField(read_only=True)
    rot_log_scale = serializers.FloatField(read_only=True)
    t = serializers.ListField(child=serializers.FloatField(), read_only=True)
    trans_lower = serializers.FloatField(read_only=True)
    trans_upper = serializers.FloatField(read_only=True)
    trans_log_lower = serializers.SerializerMethodField()
    trans_depth = serializers.IntegerField(read_only=True)
    trans_iterations = serializers.IntegerField(read_only=True)
    root_box = serializers.SerializerMethodField()

    def get_trans_log_lower(self, obj):
        return _finite_or_none(obj.trans_log_lower)

    def get_root_box(self, obj):
        if obj.root_box is None:
            return None
        return {'lo': _float_list(obj.root_box['lo']), 'hi': _float_list(obj.root_box['hi'])}


class AlignmentResultSerializer(serializers.Serializer):
    """
    JSON document written by the align command.

    The transform maps the target cloud onto the source cloud:
    source ~ q o target + t, q in (i, j, k, r) order.
    """
    q_ijkr = serializers.SerializerMethodField()
    t = serializers.SerializerMethodField()
    rot_lower = serializers.FloatField(read_only=True)
    rot_upper = serializers.FloatField(read_only=True)
    trans_lower = serializers.FloatField(read_only=True)
    trans_upper = serializers.FloatField(read_only=True)
    depths = serializers.SerializerMethodField()
    lambda_x = serializers.FloatField(read_only=True)
    root_box = serializers.SerializerMethodField()
    rmse = serializers.FloatField(read_only=True)
    selected_index = serializers.IntegerField(read_only=True)
    candidates = CandidateDiagnosticsSerializer(many=True, read_only=True)
    timings_ms = serializers.DictField(child=serializers.FloatField(), read_only=True)

    def get_q_ijkr(self, obj):
        return _float_list(obj.q_ijkr)

    def get_t(self, obj):
        return _float_list(obj.translation)

    def get_depths(self, obj):
        return {'rot': int(obj.rot_depth), 'trans': int(obj.trans_depth)}

    def get_root_box(self, obj):
        return {'lo': _float_list(obj.root_box['lo']), 'hi': _float_list(obj.root_box['hi'])}


class CommaSeparatedFloatsField(serializers.CharField):
    """"45,65,80" -> (45.0, 65.0, 80.0); an optional fixed length is enforced."""

    default_error_messages = {
        'invalid_number': 'Expected comma-separated numbers, got "{value}".',
        'wrong_length': 'Expected {length} comma-separated numbers, got {count}.',
        'empty': 'Expected at least one number.',
    }

    def __init__(self, *, length=None, **kwargs):
        self.length = length
        super().__init__(**kwargs)

    def to_internal_value(self, data):
        text = super().to_internal_value(data)
        parts = [part.strip() for part in text.split(',') if part.strip()]
        if not parts:
            self.fail('empty')
        try:
            values = tuple(float(part) for part in parts)
        except ValueError:
            self.fail('invalid_number', value=text)
        if not all(math.isfinite(v) for v in values):
            self.fail('invalid_number', value=text)
        if self.length is not None and len(values) != self.length:
            self.fail('wrong_length', length=self.length, count=len(values))
        return values


class AlignOptionsSerializer(serializers.Serializer):
    """Validates the options of the align command before any cloud is read"""
    source = serializers.CharField()
    target = serializers.CharField()
    out = serializers.CharField()
    trace = serializers.CharField(required=False, allow_null=True)
    lambda_deg = CommaSeparatedFloatsField(required=False, allow_null=True)
    lambda_x = serializers.FloatField(required=False, allow_null=True)
    rot_depth = serializers.IntegerField(required=False, allow_null=True, min_value=0)
    rot_tol_deg = serializers.FloatField(required=False, allow_null=True)
    trans_depth = serializers.IntegerField(required=False, allow_null=True, min_value=0)
    trans_tol = serializers.FloatField(required=False, allow_null=True)
    mw = serializers.BooleanField(required=False, default=False)
    paper_box = serializers.BooleanField(required=False, default=False)
    knn = serializers.IntegerField(required=False, allow_null=True, min_value=3)
    threads = serializers.IntegerField(required=False, allow_null=True, min_value=1)
    seed = serializers.IntegerField(required=False, allow_null=True, min_value=0)
    max_points = serializers.IntegerField(required=False, allow_null=True, min_value=1)
    viewpoint = CommaSeparatedFloatsField(required=False, allow_null=True, length=3)
    rot_extrema = serializers.ChoiceField(choices=['radius', 'cone'], required=False, allow_null=True)

    def validate_lambda_deg(self, value):
        if value is not None and not all(0.0 < v < 180.0 for v in value):
            raise serializers.ValidationError("Each lambda must lie strictly between 0 and 180 degrees.")
        return value

    def validate_lambda_x(self, value):
        if value is not None and not value > 0:
            raise serializers.ValidationError("lambda_x must be positive.")
        return value

    def validate_rot_tol_deg(self, value):
        if value is not None and not 0.0 < value < 180.0:
            raise serializers.ValidationError("Rotational tolerance must lie strictly between 0 and 180 degrees.")
        return value

    def validate_trans_tol(self, value):
        if value is not None and not value > 0:
            raise serializers.ValidationError("Translational tolerance must be positive.")
        return value

    def config_overrides(self):
        """Keyword overrides for AlignmentConfig.from_settings (None leaves the setting in place)."""
        data = self.validated_data
        return {
            'lambda_deg_list': data.get('lambda_deg'),
            'lambda_x': data.get('lambda_x'),
            'rot_depth': data.get('rot_depth'),
            'rot_tol_deg': data.get('rot_tol_deg'),
            'trans_depth': data.get('trans_depth'),
            'trans_tol': data.get('trans_tol'),
            'mw_enabled': data.get('mw'),
            'union_box': data.get('paper_box'),
            'knn_k': data.get('knn'),
            'threads': data.get('threads'),
            'viewpoint': data.get('viewpoint'),
            'rot_extrema': data.get('rot_extrema'),
        }
