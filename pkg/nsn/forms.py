"""
Forms validating the sections of a run configuration.

A run configuration is one JSON document; each section is bound to its form,
unknown keys are rejected and every failure is reported as
``section.field: message``.
"""
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from django import forms
from django.core.exceptions import ValidationError

from .training import AblationMode
from .validators import (
    validate_existing_file,
    validate_momentum,
    validate_non_negative,
    validate_positive,
    validate_rank_list,
    validate_seed,
)

MODE_CHOICES = [(mode.value, mode.name) for mode in AblationMode]


class IntegerListField(forms.Field):
    """A JSON array of integers; an absent value cleans to an empty list."""

    def __init__(self, *, allow_empty=True, **kwargs):
        self.allow_empty = allow_empty
        kwargs.setdefault('required', False)
        super().__init__(**kwargs)

    def to_python(self, value):
        if value is None:
            return []
        if not isinstance(value, (list, tuple)):
            raise ValidationError(f'Expected a list of integers, got {value!r}.')
        if any(isinstance(v, bool) or not isinstance(v, int) for v in value):
            raise ValidationError(f'Expected a list of integers, got {list(value)}.')
        return list(value)

    def validate(self, value):
        if not value and not self.allow_empty:
            raise ValidationError('Must not be empty.')


class StrictIntegerField(forms.IntegerField):
    """IntegerField that refuses floats and booleans coming from JSON."""

    def to_python(self, value):
        if isinstance(value, bool) or isinstance(value, float):
            raise ValidationError(f'Expected an integer, got {value!r}.')
        return super().to_python(value)


class StrictBooleanField(forms.Field):
    def __init__(self, **kwargs):
        kwargs.setdefault('required', False)
        super().__init__(**kwargs)

    def to_python(self, value):
        if value is None:
            return None
        if not isinstance(value, bool):
            raise ValidationError(f'Expected true or false, got {value!r}.')
        return value


class SectionForm(forms.Form):
    """
    Base for config sections. ``defaults`` fill absent keys before binding;
    ``validate`` returns cleaned data or raises one ValidationError listing
    every bad field.
    """

    section = ''
    defaults = {}

    @classmethod
    def validate(cls, data):
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ValidationError([f'{cls.section}: expected an object, got {type(data).__name__}'])
        unknown = sorted(set(data) - set(cls.base_fields))
        if unknown:
            raise ValidationError([f'{cls.section}.{key}: unknown key' for key in unknown])
        form = cls(data={**cls.defaults, **data})
        if not form.is_valid():
            messages = []
            for name, errors in form.errors.items():
                prefix = cls.section if name == '__all__' else f'{cls.section}.{name}'
                messages.extend(f'{prefix}: {error}' for error in errors)
            raise ValidationError(messages)
        return form.cleaned_data


class DatasetSourceForm(SectionForm):
    """Either synthetic clusters or a pair of dataset files."""

    section = 'dataset'
    defaults = {
        'kind': 'synthetic',
        'num_classes': 10,
        'dim': 64,
        'train_per_class': 500,
        'test_per_class': 100,
        'separation': 3.0,
        'format': 'csv',
    }

    kind = forms.ChoiceField(choices=[('synthetic', 'synthetic'), ('file', 'file')])
    num_classes = StrictIntegerField(required=False, validators=[validate_positive])
    dim = StrictIntegerField(required=False, validators=[validate_positive])
    train_per_class = StrictIntegerField(required=False, validators=[validate_positive])
    test_per_class = StrictIntegerField(required=False, validators=[validate_positive])
    separation = forms.FloatField(required=False, validators=[validate_non_negative])
    train_path = forms.CharField(required=False, validators=[validate_existing_file])
    test_path = forms.CharField(required=False, validators=[validate_existing_file])
    format = forms.ChoiceField(choices=[('csv', 'csv'), ('rawf32', 'rawf32')])

    def clean(self):
        cleaned = super().clean()
        if cleaned.get('kind') == 'file' and not cleaned.get('train_path'):
            self.add_error('train_path', 'Required when kind is "file".')
        if cleaned.get('kind') == 'synthetic':
            for name in ('num_classes', 'dim', 'train_per_class', 'test_per_class', 'separation'):
                if cleaned.get(name) is None and name not in self.errors:
                    self.add_error(name, 'Required when kind is "synthetic".')
            classes, dim = cleaned.get('num_classes'), cleaned.get('dim')
            if classes and dim and classes > dim:
                self.add_error('num_classes', f'{classes} orthonormal class centers do not fit in {dim} dimensions.')
        return cleaned


class ModelTopologyForm(SectionForm):
    section = 'model'
    defaults = {
        'hidden_dims': [128],
        'max_rank': 32,
        'layer_kind': 'nsn',
        'activation': 'relu',
    }

    hidden_dims = IntegerListField(validators=[validate_rank_list])
    max_rank = StrictIntegerField(validators=[validate_positive])
    layer_kind = forms.ChoiceField(choices=[('nsn', 'nsn'), ('dense', 'dense')])
    activation = forms.ChoiceField(choices=[('relu', 'relu'), ('gelu', 'gelu'), ('identity', 'identity')])
    init_checkpoint = forms.CharField(required=False, validators=[validate_existing_file])


class TrainingForm(SectionForm):
    section = 'training'
    defaults = {
        'epochs': 30,
        'batch_size': 64,
        'learning_rate': 0.05,
        'momentum': 0.9,
        'mode': AblationMode.TWO_CE.value,
        'use_uncertainty': True,
        'rank_pool': [1, 2, 4, 8, 16],
        'interpolated_eval_ranks': [],
        'reg_weight': 1.0,
        'curriculum': True,
    }

    epochs = StrictIntegerField(validators=[validate_non_negative])
    batch_size = StrictIntegerField(validators=[validate_positive])
    learning_rate = forms.FloatField(validators=[validate_positive])
    momentum = forms.FloatField(validators=[validate_momentum])
    mode = forms.ChoiceField(choices=MODE_CHOICES)
    use_uncertainty = StrictBooleanField()
    anchor_rank = StrictIntegerField(required=False, validators=[validate_positive])
    rank_pool = IntegerListField(validators=[validate_rank_list])
    eval_ranks = IntegerListField(validators=[validate_rank_list])
    interpolated_eval_ranks = IntegerListField(validators=[validate_rank_list])
    reg_weight = forms.FloatField(validators=[validate_non_negative])
    curriculum = StrictBooleanField()
    schedule = forms.JSONField(required=False)

    def clean_schedule(self):
        schedule = self.cleaned_data.get('schedule')
        if schedule is None:
            return None
        if not isinstance(schedule, dict) or not schedule:
            raise ValidationError('Expected a non-empty object mapping epoch to horizon.')
        try:
            items = sorted((int(epoch), int(horizon)) for epoch, horizon in schedule.items())
        except (TypeError, ValueError):
            raise ValidationError('Epochs and horizons must be integers.') from None
        horizons = [h for _, h in items]
        if horizons != sorted(horizons) or horizons[0] < 1:
            raise ValidationError(f'Horizons must be positive and non-decreasing, got {horizons}.')
        return items

    def clean(self):
        cleaned = super().clean()
        anchor = cleaned.get('anchor_rank')
        if anchor is not None:
            above = [r for r in cleaned.get('rank_pool') or [] if r >= anchor]
            if above:
                self.add_error('rank_pool', f'Variant ranks {above} must lie below anchor_rank {anchor}.')
            clash = set(cleaned.get('interpolated_eval_ranks') or []) & (set(cleaned.get('rank_pool') or []) | {anchor})
            if clash:
                self.add_error('interpolated_eval_ranks', f'Ranks {sorted(clash)} are also trained ranks.')
        if cleaned.get('mode') and AblationMode(cleaned['mode']).uses_variant and not cleaned.get('rank_pool'):
            self.add_error('rank_pool', f'Mode {cleaned["mode"]} needs a non-empty rank pool.')
        return cleaned


class BaselineForm(SectionForm):
    section = 'baseline'
    defaults = {'ranks': [1, 2, 4, 8, 16, 32]}

    ranks = IntegerListField(allow_empty=False, validators=[validate_rank_list])
    epochs = StrictIntegerField(required=False, validators=[validate_non_negative])


class AblationForm(SectionForm):
    section = 'ablation'
    defaults = {'modes': [mode.value for mode in AblationMode], 'seeds': [0]}

    modes = forms.JSONField()
    seeds = IntegerListField(allow_empty=False)

    def clean_modes(self):
        modes = self.cleaned_data['modes']
        valid = {mode.value for mode in AblationMode}
        if not isinstance(modes, list) or not modes:
            raise ValidationError('Expected a non-empty list of modes.')
        bad = [m for m in modes if m not in valid]
        if bad:
            raise ValidationError(f'Unknown modes {bad}; expected any of {sorted(valid)}.')
        return list(dict.fromkeys(modes))

    def clean_seeds(self):
        seeds = self.cleaned_data['seeds']
        for seed in seeds:
            validate_seed(seed)
        return seeds


class SurgeryForm(SectionForm):
    section = 'surgery'

    layers = IntegerListField()
    max_rank = forms.JSONField(required=False)

    def clean_layers(self):
        layers = self.cleaned_data['layers']
        if any(i < 0 for i in layers):
            raise ValidationError(f'Layer indices must be non-negative, got {layers}.')
        return layers

    def clean_max_rank(self):
        value = self.cleaned_data.get('max_rank')
        if value is None:
            return None
        if isinstance(value, dict):
            try:
                value = {int(k): (None if v is None else int(v)) for k, v in value.items()}
            except (TypeError, ValueError):
                raise ValidationError('Expected layer index keys and integer ranks.') from None
            ranks = [v for v in value.values() if v is not None]
        elif isinstance(value, int) and not isinstance(value, bool):
            ranks = [value]
        else:
            raise ValidationError(f'Expected an integer or an object of integers, got {value!r}.')
        validate_rank_list(ranks)
        return value


class AnalysisForm(SectionForm):
    section = 'analysis'
    defaults = {
        'ranks': [1, 2, 4, 8, 16],
        'lemma_samples': 10000,
        'bound_pairs': 500,
        'lipschitz': 2 ** 0.5,
        'probe': False,
    }

    ranks = IntegerListField(allow_empty=False, validators=[validate_rank_list])
    layers = IntegerListField()
    lemma_samples = StrictIntegerField(validators=[validate_positive])
    bound_pairs = StrictIntegerField(validators=[validate_positive])
    r1 = StrictIntegerField(required=False, validators=[validate_positive])
    r_int = StrictIntegerField(required=False, validators=[validate_positive])
    lipschitz = forms.FloatField(validators=[validate_non_negative])
    probe = StrictBooleanField()
    reference = forms.CharField(required=False, validators=[validate_existing_file])
    depth_groups = forms.JSONField(required=False)

    def clean_depth_groups(self):
        groups = self.cleaned_data.get('depth_groups')
        if groups is None:
            return None
        try:
            groups = [(int(start), int(stop)) for start, stop in groups]
        except (TypeError, ValueError):
            raise ValidationError('Expected a list of [start, stop] pairs.') from None
        if any(not 0 <= start < stop for start, stop in groups):
            raise ValidationError(f'Each group needs 0 <= start < stop, got {groups}.')
        return groups

    def clean(self):
        cleaned = super().clean()
        r1, r_int = cleaned.get('r1'), cleaned.get('r_int')
        if r1 is not None and r_int is not None and r1 > r_int:
            self.add_error('r_int', f'Must be at least r1 ({r1}), got {r_int}.')
        return cleaned


SECTION_FORMS = {
    form.section: form
    for form in (DatasetSourceForm, ModelTopologyForm, TrainingForm, BaselineForm, AblationForm, SurgeryForm, AnalysisForm)
}
PATH_KEYS = {
    'dataset': ('train_path', 'test_path'),
    'model': ('init_checkpoint',),
    'analysis': ('reference',),
}


@dataclass
class RunConfig:
    """A validated run configuration; ``document`` is the raw JSON it came from."""

    seed: int = 0
    output_dir: Optional[str] = None
    dataset: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    baseline: dict = field(default_factory=dict)
    ablation: dict = field(default_factory=dict)
    surgery: dict = field(default_factory=dict)
    analysis: dict = field(default_factory=dict)
    document: dict = field(default_factory=dict)


def _resolve_paths(document: dict, base: Path) -> dict:
    document = json.loads(json.dumps(document))
    for section, keys in PATH_KEYS.items():
        values = document.get(section)
        if not isinstance(values, dict):
            continue
        for key in keys:
            if isinstance(values.get(key), str) and values[key] and not Path(values[key]).is_absolute():
                values[key] = str(base / values[key])
    return document


def validate_run_config(document, base_dir=None, seed=None) -> RunConfig:
    """Validate every section; ``seed`` overrides the document's seed."""
    if not isinstance(document, dict):
        raise ValidationError(['config: expected a JSON object'])
    known = set(SECTION_FORMS) | {'seed', 'output_dir'}
    unknown = sorted(set(document) - known)
    messages = [f'{key}: unknown section' for key in unknown]
    if base_dir is not None:
        document = _resolve_paths(document, Path(base_dir))
    if seed is not None:
        document = {**document, 'seed': seed}

    config = RunConfig(document=document)
    config.seed = document.get('seed', 0)
    try:
        validate_seed(config.seed)
    except ValidationError as exc:
        messages.extend(f'seed: {m}' for m in exc.messages)
    output_dir = document.get('output_dir')
    if output_dir is not None and not isinstance(output_dir, str):
        messages.append(f'output_dir: expected a path string, got {output_dir!r}')
    config.output_dir = output_dir

    for name, form in SECTION_FORMS.items():
        try:
            setattr(config, name, form.validate(document.get(name)))
        except ValidationError as exc:
            messages.extend(exc.messages)
    if messages:
        raise ValidationError(messages)
    return config


def load_run_config(path, seed=None) -> RunConfig:
    path = Path(path)
    try:
        document = json.loads(path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as exc:
        raise ValidationError([f'config: {path} is not valid JSON ({exc.msg} at line {exc.lineno})']) from None
    return validate_run_config(document, base_dir=path.parent, seed=seed)
