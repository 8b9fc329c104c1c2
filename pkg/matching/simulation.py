# File: matching/simulation.py
# SYNTHETIC CLUSTERED STUDIES

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.special import expit

from .exceptions import ConfigError

logger = logging.getLogger(__name__)

# Strength of cluster-level selection into treatment
SELECTION = 0.5
GROUPS = ('a', 'b', 'c')


@dataclass(frozen=True)
class SimulationParams:
    clusters_per_arm: int = 10
    units_per_cluster: int = 20
    covariate_dims: int = 2
    icc: float = 0.2
    true_effect: float = 0.0
    n_strata: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.clusters_per_arm < 1 or self.units_per_cluster < 1 or self.covariate_dims < 1:
            raise ConfigError('Simulation sizes must be positive')
        if not 0 <= self.icc < 1:
            raise ConfigError('icc must lie in [0, 1)')
        if self.n_strata < 1:
            raise ConfigError('n_strata must be at least 1')


def _assign_treatment(rng, cluster_covariates, clusters_per_arm):
    """
    Exactly clusters_per_arm treated clusters drawn without replacement with
    odds exp(SELECTION * mean covariate) (Gumbel top-k).
    """
    logits = SELECTION * cluster_covariates.mean(axis=1) * np.sqrt(cluster_covariates.shape[1])
    keys = logits + rng.gumbel(size=logits.size)
    treated = np.zeros(logits.size, dtype=int)
    treated[np.argsort(-keys, kind='stable')[:clusters_per_arm]] = 1
    return treated


def simulate(params):
    """
    Draw a two-level study. Returns (units, clusters) data frames in the
    CSV layout ``load_dataset`` reads.
    """
    rng = np.random.default_rng(params.seed)
    k = 2 * params.clusters_per_arm
    n = params.units_per_cluster
    p = params.covariate_dims

    cluster_x = rng.normal(size=(k, p))
    treated = _assign_treatment(rng, cluster_x, params.clusters_per_arm)
    logger.debug('Treatment propensities: %s', np.round(expit(SELECTION * cluster_x.mean(axis=1)), 3))

    cluster_ids = [f'C{j + 1:03d}' for j in range(k)]
    strata = [f'S{(j % params.n_strata) + 1}' for j in range(k)]
    clusters = pd.DataFrame({'cluster_id': cluster_ids, 'treated': treated})
    if params.n_strata > 1:
        clusters['stratum'] = strata
    for d in range(p):
        clusters[f'c{d + 1}'] = cluster_x[:, d]

    unit_noise = rng.normal(size=(k, n, p))
    unit_x = 0.5 * cluster_x[:, None, :] + unit_noise
    groups = rng.choice(len(GROUPS), size=(k, n))

    between = 0.6 * cluster_x.mean(axis=1) * np.sqrt(p) + 0.8 * rng.normal(size=k)
    within = 0.6 * unit_noise.sum(axis=2) / np.sqrt(p) + 0.8 * rng.normal(size=(k, n))
    y = (params.true_effect * treated[:, None]
         + np.sqrt(params.icc) * between[:, None]
         + np.sqrt(1 - params.icc) * within)

    records = {
        'unit_id': [f'{cluster_ids[j]}-{i + 1:03d}' for j in range(k) for i in range(n)],
        'cluster_id': [cluster_ids[j] for j in range(k) for _ in range(n)],
    }
    for d in range(p):
        records[f'x{d + 1}'] = unit_x[:, :, d].ravel()
    records['group'] = [GROUPS[g] for g in groups.ravel()]
    records['y'] = y.ravel()
    units = pd.DataFrame(records)
    logger.info('Simulated %d clusters (%d treated) with %d units each', k, int(treated.sum()), n)
    return units, clusters


def study_template(params, units_file='units.csv', clusters_file='clusters.csv'):
    """A study configuration that reads the simulated files."""
    schema = [{'name': f'x{d + 1}', 'kind': 'continuous', 'level': 'unit'} for d in range(params.covariate_dims)]
    schema.append({'name': 'group', 'kind': 'nominal', 'level': 'unit', 'categories': list(GROUPS)})
    schema += [{'name': f'c{d + 1}', 'kind': 'continuous', 'level': 'cluster'} for d in range(params.covariate_dims)]
    schema.append({'name': 'y', 'kind': 'continuous', 'level': 'unit', 'role': 'outcome'})
    cluster_constraints = [
        {'kind': 'mean', 'covariate': f'c{d + 1}', 'level': 'cluster', 'tolerance': 0.2}
        for d in range(params.covariate_dims)
    ]
    if params.n_strata > 1:
        cluster_constraints.append({'kind': 'exact', 'covariate': 'stratum', 'level': 'cluster'})
    return {
        'units_file': units_file,
        'clusters_file': clusters_file,
        'output_dir': 'out',
        'seed': params.seed,
        'schema': schema,
        'balance': {
            'unit': [{'kind': 'mean', 'covariate': f'x{d + 1}', 'level': 'unit', 'tolerance': 0.1}
                     for d in range(params.covariate_dims)],
            'cluster': cluster_constraints,
        },
    }


def _dump(payload, path):
    with open(path, 'w', encoding='utf-8') as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write('\n')


def write_simulation(params, out_dir):
    """
    units.csv and clusters.csv, the parameters in simulation.json and a
    study config reading both files in study.json.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    units, clusters = simulate(params)
    units.to_csv(out_dir / 'units.csv', index=False, float_format='%.6f', lineterminator='\n')
    clusters.to_csv(out_dir / 'clusters.csv', index=False, float_format='%.6f', lineterminator='\n')
    _dump(asdict(params), out_dir / 'simulation.json')
    _dump(study_template(params), out_dir / 'study.json')
    return units, clusters
