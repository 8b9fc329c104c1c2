# File: matching/config.py
# STUDY CONFIGURATION: ONE JSON DOCUMENT PER STUDY

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

from .data import expand_schema, load_dataset
from .distance import DistanceConfig
from .exceptions import ConfigError
from .forms import (
    ConstraintForm, CovariateForm, DistanceForm, InferenceForm, MatcherForm,
    SimulationForm, StudyConfigForm,
)
from .inference import InferenceOptions
from .matcher import MatcherOptions
from .models import BalanceSpec, Level
from .simulation import SimulationParams

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StudyConfig:
    base_dir: Path
    units_file: Path | None
    clusters_file: Path | None
    output_dir: Path
    seed: int = 0
    schema: tuple = ()
    spec: BalanceSpec = field(default_factory=BalanceSpec)
    distance: DistanceConfig = field(default_factory=DistanceConfig)
    matcher: MatcherOptions = field(default_factory=MatcherOptions)
    inference: InferenceOptions = field(default_factory=InferenceOptions)
    simulation: SimulationParams = field(default_factory=SimulationParams)
    imbalance_threshold: float = 0.1

    def load_dataset(self):
        if self.units_file is None or self.clusters_file is None:
            raise ConfigError('units_file and clusters_file are required for this command')
        if not self.schema:
            raise ConfigError('schema: at least one covariate must be declared')
        return load_dataset(self.units_file, self.clusters_file, self.schema)

    def with_overrides(self, out=None, approximate=None, seed=None):
        """Apply the --out, --approximate and --seed command-line flags."""
        config = self
        if out is not None:
            config = replace(config, output_dir=Path(out))
        if approximate:
            config = replace(config, matcher=replace(config.matcher, approximate=True))
        if seed is not None:
            config = replace(config, seed=seed, simulation=replace(config.simulation, seed=seed))
        return config


def _resolve(base_dir, value):
    if not value:
        return None
    path = Path(value)
    return path if path.is_absolute() else base_dir / path


def _constraints(entries, level):
    return tuple(
        ConstraintForm(entry, f'balance.{level}[{k}]', level).to_constraint()
        for k, entry in enumerate(entries)
    )


def parse_study_config(document, base_dir='.'):
    """Validate a decoded JSON document into a StudyConfig."""
    base_dir = Path(base_dir)
    top = StudyConfigForm(document, 'config').validated()

    schema = tuple(CovariateForm(entry, f'schema[{k}]').to_schema() for k, entry in enumerate(top['schema']))
    schema = expand_schema(schema)

    balance = top['balance']
    spec = BalanceSpec(
        unit_constraints=_constraints(balance.get(Level.UNIT.value, []), Level.UNIT),
        cluster_constraints=_constraints(balance.get(Level.CLUSTER.value, []), Level.CLUSTER),
    )

    distance = DistanceForm(top['distance'], 'distance').validated()
    matcher = MatcherForm(top['matcher'], 'matcher').validated()
    inference = InferenceForm(top['inference'], 'inference').validated()
    simulation = SimulationForm(top['simulation'], 'simulation').validated()

    return StudyConfig(
        base_dir=base_dir,
        units_file=_resolve(base_dir, top['units_file']),
        clusters_file=_resolve(base_dir, top['clusters_file']),
        output_dir=_resolve(base_dir, top['output_dir']),
        seed=top['seed'],
        schema=schema,
        spec=spec,
        distance=DistanceConfig(**distance),
        matcher=MatcherOptions(
            objective=matcher['objective'],
            cluster_weight=matcher['lambda'],
            approximate=matcher['approximate'],
            time_limit=matcher['time_limit'],
            cluster_time_limit=matcher['cluster_time_limit'],
            gap_tolerance=matcher['gap_tolerance'],
            workers=matcher['workers'],
        ),
        inference=InferenceOptions(
            weight_rule=inference['weight_rule'],
            alpha=inference['alpha'],
            deltas=inference['deltas'],
            gammas=inference['gammas'],
            mode=inference['mode'],
            covariates=inference['covariates'],
        ),
        simulation=SimulationParams(seed=top['seed'], **simulation),
        imbalance_threshold=top['imbalance_threshold'],
    )


def load_study_config(path):
    path = Path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except OSError as exc:
        raise ConfigError(f'Cannot read config {path}: {exc.strerror}') from exc
    try:
        document = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f'{path.name}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}') from exc
    config = parse_study_config(document, path.resolve().parent)
    logger.debug('Loaded study config %s', path)
    return config
