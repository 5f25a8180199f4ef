import numpy as np
from rest_framework import serializers

from .mpc import COST_KINDS, METHODS, TERMINAL_KINDS
from .sim import DISTURBANCE_MODES

DEFAULT_METHODS = ['fir-sltmpc', 'fir-sltmpc-offline', 'rpi-tube', 'ct-mpc']
DEFAULT_THETA_SWEEP = [0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07, 0.08, 0.09, 0.10]


def _is_weight(matrix, definite):
    if not np.allclose(matrix, matrix.T):
        return False
    smallest = np.linalg.eigvalsh(matrix).min()
    return smallest > 1e-12 if definite else smallest >= -1e-9


def flatten_errors(errors, prefix=''):
    """Nested serializer errors as (dotted.field.path, message) pairs"""
    flat = []
    if isinstance(errors, dict):
        for key, value in errors.items():
            if key == 'non_field_errors':
                path = prefix
            else:
                path = f"{prefix}.{key}" if prefix else str(key)
            flat.extend(flatten_errors(value, path))
    elif isinstance(errors, list) and errors and not isinstance(errors[0], (dict, list)):
        flat.append((prefix, ' '.join(str(message) for message in errors)))
    elif isinstance(errors, list):
        for index, value in enumerate(errors):
            if value:
                flat.extend(flatten_errors(value, f"{prefix}.{index}" if prefix else str(index)))
    else:
        flat.append((prefix, str(errors)))
    return flat


class StrictSerializer(serializers.Serializer):
    """Serializer that rejects keys it does not declare"""

    def to_internal_value(self, data):
        if isinstance(data, dict):
            unknown = sorted(set(data) - set(self.fields))
            if unknown:
                raise serializers.ValidationError({key: ['Unknown field.'] for key in unknown})
        return super().to_internal_value(data)


class MatrixField(serializers.ListField):
    """Row-major matrix given as a list of equally long rows"""

    def __init__(self, **kwargs):
        super().__init__(child=serializers.ListField(child=serializers.FloatField(), min_length=1),
                         min_length=1, **kwargs)

    def to_internal_value(self, data):
        rows = super().to_internal_value(data)
        if len({len(row) for row in rows}) != 1:
            raise serializers.ValidationError("All rows must have the same length.")
        return rows


class PolytopeSerializer(StrictSerializer):
    """Either {"box": [[lo, hi], ...]} or {"H": [[...]], "h": [...]}"""
    box = serializers.ListField(child=serializers.ListField(child=serializers.FloatField(),
                                                            min_length=2, max_length=2),
                                min_length=1, required=False)
    H = MatrixField(required=False)
    h = serializers.ListField(child=serializers.FloatField(), min_length=1, required=False)

    def validate_box(self, value):
        for lower, upper in value:
            if lower > upper:
                raise serializers.ValidationError(f"Interval [{lower}, {upper}] is empty.")
        return value

    def validate(self, attrs):
        has_box = 'box' in attrs
        has_halfspaces = 'H' in attrs or 'h' in attrs
        if has_box == has_halfspaces:
            raise serializers.ValidationError("Give either 'box' or both 'H' and 'h'.")
        if has_halfspaces:
            if 'H' not in attrs:
                raise serializers.ValidationError({'H': ['This field is required.']})
            if 'h' not in attrs:
                raise serializers.ValidationError({'h': ['This field is required.']})
            if len(attrs['H']) != len(attrs['h']):
                raise serializers.ValidationError({'h': [f"Expected {len(attrs['H'])} entries, one per row of H."]})
        return attrs

    @staticmethod
    def dimension(attrs):
        return len(attrs['box']) if 'box' in attrs else len(attrs['H'][0])


class DisturbanceSerializer(PolytopeSerializer):
    theta_axes = serializers.ListField(child=serializers.IntegerField(min_value=0), required=False,
                                       default=lambda: [0])

    def validate(self, attrs):
        attrs = super().validate(attrs)
        if attrs['theta_axes'] and 'box' not in attrs:
            raise serializers.ValidationError({'theta_axes': ['theta can only scale a box-shaped W.']})
        return attrs


class SystemSerializer(StrictSerializer):
    A = MatrixField()
    B = MatrixField()
    X = PolytopeSerializer()
    U = PolytopeSerializer()
    W = DisturbanceSerializer()

    def validate(self, attrs):
        n = len(attrs['A'])
        if len(attrs['A'][0]) != n:
            raise serializers.ValidationError({'A': ['A must be square.']})
        if len(attrs['B']) != n:
            raise serializers.ValidationError({'B': [f"B must have {n} rows."]})
        m = len(attrs['B'][0])
        for name, expected in (('X', n), ('U', m), ('W', n)):
            if PolytopeSerializer.dimension(attrs[name]) != expected:
                raise serializers.ValidationError({name: [f"Expected dimension {expected}."]})
        for axis in attrs['W']['theta_axes']:
            if axis >= n:
                raise serializers.ValidationError({'W': {'theta_axes': [f"Axis {axis} is out of range."]}})
        return attrs


class SimulationSerializer(StrictSerializer):
    T = serializers.IntegerField(min_value=1, default=30)
    n_runs = serializers.IntegerField(min_value=1, default=200)
    seed = serializers.IntegerField(min_value=0, default=0)
    disturbance_mode = serializers.ChoiceField(choices=DISTURBANCE_MODES, default='uniform')


class RoaSerializer(StrictSerializer):
    resolution = serializers.IntegerField(min_value=10, default=50)
    theta_sweep = serializers.ListField(child=serializers.FloatField(min_value=0.0), min_length=1,
                                        default=lambda: list(DEFAULT_THETA_SWEEP))


class VerifySerializer(StrictSerializer):
    n_steps = serializers.IntegerField(min_value=1, default=50)
    n_samples = serializers.IntegerField(min_value=0, default=500)
    n_walks = serializers.IntegerField(min_value=0, default=1000)


class ExperimentSerializer(StrictSerializer):
    system = SystemSerializer()
    N = serializers.IntegerField(min_value=1, default=10)
    theta = serializers.FloatField(min_value=0.0, default=0.04)
    x0 = serializers.ListField(child=serializers.FloatField(), required=False)
    method = serializers.ChoiceField(choices=METHODS, default='fir-sltmpc')
    methods = serializers.ListField(child=serializers.ChoiceField(choices=METHODS), min_length=1,
                                    default=lambda: list(DEFAULT_METHODS))
    terminal_kind = serializers.ChoiceField(choices=TERMINAL_KINDS, default='scaled-pi')
    N_mpc = serializers.IntegerField(min_value=1, required=False, allow_null=True, default=None)
    tube_cost = serializers.ChoiceField(choices=COST_KINDS, default='min-tightening')
    rho_x = serializers.FloatField(min_value=0.0, default=1.0)
    rho_u = serializers.FloatField(min_value=0.0, default=1.0)
    Q = MatrixField(required=False)
    R = MatrixField(required=False)
    simulation = SimulationSerializer()
    roa = RoaSerializer()
    verify = VerifySerializer()

    def to_internal_value(self, data):
        if isinstance(data, dict):
            data = {'simulation': {}, 'roa': {}, 'verify': {}, **data}
        return super().to_internal_value(data)

    def validate_methods(self, value):
        if len(set(value)) != len(value):
            raise serializers.ValidationError("Methods must not repeat.")
        return value

    def validate(self, attrs):
        n = len(attrs['system']['A'])
        m = len(attrs['system']['B'][0])
        if 'x0' in attrs and len(attrs['x0']) != n:
            raise serializers.ValidationError({'x0': [f"Expected {n} entries."]})
        for name, size in (('Q', n), ('R', m)):
            if name in attrs and (len(attrs[name]) != size or len(attrs[name][0]) != size):
                raise serializers.ValidationError({name: [f"Expected a {size}x{size} matrix."]})
            if name in attrs and not _is_weight(np.asarray(attrs[name]), definite=name == 'R'):
                kind = 'definite' if name == 'R' else 'semidefinite'
                raise serializers.ValidationError({name: [f"Must be symmetric positive {kind}."]})
        if attrs['rho_x'] == 0 and attrs['rho_u'] == 0:
            raise serializers.ValidationError({'rho_u': ['rho_x and rho_u cannot both be zero.']})
        return attrs
