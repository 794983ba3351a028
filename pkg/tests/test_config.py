import os

import pytest

from app.main import build_parser, parse_overrides
from app.models.proximal import ProxBackend
from app.services.experiment_config import load_experiment_config, merge_values
from app.utils.errors import ConfigError, ParameterError


def write_config(tmp_path, text):
    path = tmp_path / 'experiment.cfg'
    path.write_text(text)
    return str(path)


def test_defaults():
    cfg = load_experiment_config()
    assert cfg.experiment == 'sample'
    assert cfg.target.id == 'quadratic'
    assert cfg.sampler.method == 'brwp_successive'
    assert cfg.sampler.T == pytest.approx(cfg.sampler.h)
    assert cfg.sampler.init_variance == 2.0
    assert cfg.grid is None
    assert cfg.T_list == [0.2, 0.1, 0.05, 0.025]
    assert cfg.threshold == pytest.approx(1e-3)
    assert cfg.delta == pytest.approx(0.1)
    assert cfg.record_wallclock is False
    assert cfg.sampler.diagnostics_source == 'auto'


def test_precedence_preset_file_overrides(tmp_path):
    path = write_config(tmp_path, "# sweep settings\nexperiment.preset = sweep_quadratic\nsampler.n_steps = 10\n")
    assert load_experiment_config(path).sampler.n_steps == 10
    cfg = load_experiment_config(path, {'sampler.n_steps': '5'})
    assert cfg.sampler.n_steps == 5
    assert cfg.experiment == 'stepsize_sweep'
    assert cfg.h_list == pytest.approx([1 / 6, 1 / 3, 0.6, 1.0])
    assert cfg.sampler.method == 'brwp_kde'
    assert cfg.threshold == pytest.approx(0.01)


def test_preset_from_overrides():
    cfg = load_experiment_config(None, {'experiment.preset': 'decay_quadratic'})
    assert cfg.sampler.n_particles == 2000
    assert cfg.record_wallclock is False
    assert cfg.to_manifest()['experiment.preset'] == 'decay_quadratic'


def test_particle_preset_forces_particle_backend():
    cfg = load_experiment_config(None, {'experiment.preset': 'mixture_particle_d10'})
    assert cfg.target.dim == 10
    assert cfg.sampler.backend is ProxBackend.PARTICLE
    assert cfg.backend is ProxBackend.PARTICLE


def test_std_scale_reads_value_as_deviation():
    cfg = load_experiment_config(None, {'init.scale': 'std', 'init.variance': '2'})
    assert cfg.sampler.init_std == pytest.approx(2.0)


def test_explicit_grid():
    cfg = load_experiment_config(None, {'grid.lo': '-8', 'grid.hi': '8', 'grid.n': '801'})
    assert cfg.grid.shape == (801,)
    assert cfg.resolve_grid(cfg.target.build()) is cfg.grid
    with pytest.raises(ConfigError):
        load_experiment_config(None, {'grid.lo': '-8'})


@pytest.mark.parametrize('overrides', [
    {'sampler.bogus': '1'},
    {'experiment.preset': 'nope'},
    {'sampler.h': 'fast'},
    {'target.id': 'banana'},
    {'prox.backend': 'spectral'},
    {'sampler.method': 'ula', 'prox.backend': 'particle'},
    {'sampler.h': '-1'},
    {'run.wallclock': 'maybe'},
    {'run.diag_every': '0'},
    {'check.delta': '0'},
])
def test_invalid_values_are_config_errors(overrides):
    with pytest.raises(ConfigError):
        load_experiment_config(None, overrides)


def test_unknown_keys_in_file(tmp_path):
    path = write_config(tmp_path, "sampler.h = 0.02\nsampler.stepsize = 0.1\n")
    with pytest.raises(ConfigError, match='sampler.stepsize'):
        load_experiment_config(path)
    with pytest.raises(ConfigError):
        load_experiment_config(str(tmp_path / 'missing.cfg'))


def test_merge_values_keeps_raw_strings(tmp_path):
    path = write_config(tmp_path, "sampler.h = 0.02\n")
    values = merge_values(path, {'run.seed': 3})
    assert values['sampler.h'] == '0.02'
    assert values['run.seed'] == '3'


def test_parse_overrides():
    assert parse_overrides(['--sampler.h', '0.02', '--run.seed=3']) == {'sampler.h': '0.02', 'run.seed': '3'}
    with pytest.raises(ParameterError):
        parse_overrides(['--sampler.stepsize', '1'])
    with pytest.raises(ParameterError):
        parse_overrides(['--sampler.h'])
    with pytest.raises(ParameterError):
        parse_overrides(['stray'])


def test_parser_accepts_dotted_overrides():
    args, extra = build_parser().parse_known_args(['sample', '--seed', '4', '--sampler.h', '0.1'])
    assert args.command == 'sample'
    assert args.seed == '4'
    assert extra == ['--sampler.h', '0.1']


CONFIG_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'configs')


@pytest.mark.parametrize('name', sorted(os.listdir(CONFIG_DIR)))
def test_example_configs_load(name):
    cfg = load_experiment_config(os.path.join(CONFIG_DIR, name))
    assert cfg.to_manifest()['experiment.preset']
