# File: matching/forms.py
# VALIDATION OF THE STUDY CONFIGURATION, ONE FORM PER JSON SECTION

from django import forms
from django.conf import settings

from .exceptions import ConfigError
from .inference import InferenceMode, WeightRule
from .models import (
    BalanceConstraint, ConstraintKind, CovariateKind, CovariateSchema, Level,
    MissingPolicy, Objective, Role,
)


class StrictForm(forms.Form):
    """
    Form over one JSON object. Keys the form does not declare are errors;
    absent keys take the field's initial value.
    """

    def __init__(self, data, section):
        self.section = section
        if not isinstance(data, dict):
            raise ConfigError(f'{section}: expected a JSON object, got {type(data).__name__}')
        unknown = sorted(set(data) - set(self.base_fields))
        if unknown:
            raise ConfigError(f'{section}: unknown key "{unknown[0]}"')
        merged = {name: field.initial for name, field in self.base_fields.items() if field.initial is not None}
        merged.update(data)
        super().__init__(data=merged)

    def validated(self):
        """cleaned_data, or ConfigError naming the first offending field."""
        if not self.is_valid():
            field, messages = next(iter(self.errors.items()))
            where = self.section if field == '__all__' else f'{self.section}.{field}'
            raise ConfigError(f'{where}: {messages[0]}')
        return self.cleaned_data


def _name_list(value, where):
    if value is None:
        return None
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise forms.ValidationError(f'{where} must be a list of covariate names')
    return tuple(value)


def _number_list(value, where, minimum=None, strict=False):
    if not isinstance(value, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
        raise forms.ValidationError(f'{where} must be a list of numbers')
    for v in value:
        if minimum is not None and (v < minimum or (strict and v == minimum)):
            bound = '>' if strict else '>='
            raise forms.ValidationError(f'{where} entries must be {bound} {minimum:g}')
    return tuple(float(v) for v in value)


# ═══════════════════════════════════════════════════════════════
# SCHEMA AND BALANCE
# ═══════════════════════════════════════════════════════════════

class CovariateForm(StrictForm):
    name = forms.CharField(max_length=200)
    kind = forms.ChoiceField(choices=CovariateKind.choices)
    level = forms.ChoiceField(choices=Level.choices)
    role = forms.ChoiceField(choices=Role.choices, initial=Role.BALANCE)
    missing_policy = forms.ChoiceField(choices=MissingPolicy.choices, initial=MissingPolicy.ERROR)
    categories = forms.JSONField(required=False)

    def clean_categories(self):
        categories = self.cleaned_data.get('categories')
        if categories in (None, ''):
            return ()
        if not isinstance(categories, list):
            raise forms.ValidationError('categories must be a list')
        return tuple(str(c) for c in categories)

    def to_schema(self):
        data = self.validated()
        return CovariateSchema(
            name=data['name'],
            kind=data['kind'],
            level=data['level'],
            role=data['role'],
            missing_policy=data['missing_policy'],
            categories=data['categories'],
        )


class ConstraintForm(StrictForm):
    kind = forms.ChoiceField(choices=ConstraintKind.choices)
    covariate = forms.CharField(max_length=200)
    level = forms.ChoiceField(choices=Level.choices, required=False)
    tolerance = forms.FloatField(initial=0.1, min_value=0)
    slack = forms.IntegerField(initial=0, min_value=0)
    max_gap = forms.FloatField(initial=0.1)
    grid_size = forms.IntegerField(initial=10, min_value=1)
    weight_by_cluster_size = forms.BooleanField(required=False, initial=False)

    def __init__(self, data, section, level):
        self.default_level = level
        super().__init__(data, section)

    def clean_level(self):
        level = self.cleaned_data.get('level') or self.default_level
        if level != self.default_level:
            raise forms.ValidationError(f'a {level}-level constraint cannot sit in the {self.default_level} list')
        return level

    def to_constraint(self):
        data = self.validated()
        return BalanceConstraint(**data)


# ═══════════════════════════════════════════════════════════════
# DISTANCE, MATCHER, INFERENCE, SIMULATION
# ═══════════════════════════════════════════════════════════════

class DistanceForm(StrictForm):
    covariates = forms.JSONField(required=False)
    propensity_covariates = forms.JSONField(required=False)
    cluster_covariates = forms.JSONField(required=False)
    # null switches the propensity caliper off
    caliper = forms.FloatField(required=False, initial=0.2, min_value=0)

    def clean_covariates(self):
        return _name_list(self.cleaned_data.get('covariates'), 'covariates')

    def clean_propensity_covariates(self):
        return _name_list(self.cleaned_data.get('propensity_covariates'), 'propensity_covariates')

    def clean_cluster_covariates(self):
        return _name_list(self.cleaned_data.get('cluster_covariates'), 'cluster_covariates')

    def __init__(self, data, section):
        if isinstance(data, dict) and 'caliper' in data and data['caliper'] is None:
            data = {k: v for k, v in data.items() if k != 'caliper'}
            self.caliper_off = True
        else:
            self.caliper_off = False
        super().__init__(data, section)

    def validated(self):
        data = super().validated()
        if self.caliper_off:
            data['caliper'] = None
        return data


class MatcherForm(StrictForm):
    objective = forms.ChoiceField(choices=Objective.choices, initial=Objective.MAX_CARDINALITY)
    approximate = forms.BooleanField(required=False, initial=False)
    time_limit = forms.FloatField(required=False, min_value=0)
    cluster_time_limit = forms.FloatField(required=False, min_value=0)
    gap_tolerance = forms.FloatField(initial=0.0, min_value=0)
    workers = forms.IntegerField(required=False, min_value=1)

    def __init__(self, data, section):
        # "lambda" is a Python keyword, so the field is declared here
        self.base_fields = dict(self.base_fields)
        self.base_fields['lambda'] = forms.FloatField(initial=0.0, min_value=0)
        super().__init__(data, section)

    def validated(self):
        data = super().validated()
        if data.get('time_limit') is None:
            data['time_limit'] = settings.MULTIMATCH_TIME_LIMIT
        if data.get('workers') is None:
            data['workers'] = settings.MULTIMATCH_WORKERS
        return data


class InferenceForm(StrictForm):
    weight_rule = forms.ChoiceField(choices=WeightRule.choices, initial=WeightRule.CONSTANT)
    alpha = forms.FloatField(initial=0.05)
    deltas = forms.JSONField(required=False, initial=[])
    gammas = forms.JSONField(required=False, initial=[1.0, 1.25, 1.5, 2.0, 2.5, 3.0])
    mode = forms.ChoiceField(choices=InferenceMode.choices, initial=InferenceMode.NORMAL)
    covariates = forms.JSONField(required=False)

    def clean_alpha(self):
        alpha = self.cleaned_data['alpha']
        if not 0 < alpha < 1:
            raise forms.ValidationError('alpha must lie in (0, 1)')
        return alpha

    def clean_deltas(self):
        return _number_list(self.cleaned_data.get('deltas') or [], 'deltas', minimum=0, strict=True)

    def clean_gammas(self):
        gammas = self.cleaned_data.get('gammas')
        if gammas in (None, []):
            raise forms.ValidationError('gammas must list at least one value')
        return tuple(sorted(_number_list(gammas, 'gammas', minimum=1)))

    def clean_covariates(self):
        return _name_list(self.cleaned_data.get('covariates'), 'covariates')


class SimulationForm(StrictForm):
    clusters_per_arm = forms.IntegerField(initial=10, min_value=1)
    units_per_cluster = forms.IntegerField(initial=20, min_value=1)
    covariate_dims = forms.IntegerField(initial=2, min_value=1)
    icc = forms.FloatField(initial=0.2, min_value=0)
    true_effect = forms.FloatField(initial=0.0)
    n_strata = forms.IntegerField(initial=1, min_value=1)

    def clean_icc(self):
        icc = self.cleaned_data['icc']
        if icc >= 1:
            raise forms.ValidationError('icc must be below 1')
        return icc


# ═══════════════════════════════════════════════════════════════
# TOP LEVEL
# ═══════════════════════════════════════════════════════════════

class StudyConfigForm(StrictForm):
    units_file = forms.CharField(required=False)
    clusters_file = forms.CharField(required=False)
    output_dir = forms.CharField(initial='out')
    seed = forms.IntegerField(initial=0)
    imbalance_threshold = forms.FloatField(initial=0.1, min_value=0)
    schema = forms.JSONField(required=False, initial=[])
    balance = forms.JSONField(required=False, initial={})
    distance = forms.JSONField(required=False, initial={})
    matcher = forms.JSONField(required=False, initial={})
    inference = forms.JSONField(required=False, initial={})
    simulation = forms.JSONField(required=False, initial={})

    def clean_schema(self):
        schema = self.cleaned_data.get('schema')
        if schema in (None, ''):
            return []
        if not isinstance(schema, list):
            raise forms.ValidationError('schema must be a list of covariate objects')
        return schema

    def clean_balance(self):
        balance = self.cleaned_data.get('balance') or {}
        if not isinstance(balance, dict):
            raise forms.ValidationError('balance must be an object with "unit" and "cluster" lists')
        unknown = sorted(set(balance) - {Level.UNIT.value, Level.CLUSTER.value})
        if unknown:
            raise forms.ValidationError(f'unknown key "{unknown[0]}"')
        for level in (Level.UNIT, Level.CLUSTER):
            if not isinstance(balance.get(level.value, []), list):
                raise forms.ValidationError(f'"{level.value}" must be a list of constraints')
        return balance
