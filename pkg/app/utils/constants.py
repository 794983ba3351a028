# Run CSV schema (column order is part of the file format)
RUN_COLUMNS = ['iter', 'kl', 'fisher', 'm0', 'tv', 'w2', 'kl_bound', 'wallclock_ms']

# Command names as typed on the command line
COMMANDS = {
    'prox-evolve': 'prox_evolve',
    'sample': 'sample',
    'order-check': 'order_check',
    'denominator-check': 'denominator_check',
    'decay-check': 'decay_check',
    'stepsize-sweep': 'stepsize_sweep',
}

METHODS = ('brwp_kde', 'brwp_successive', 'brwp_particle', 'ula', 'explicit_flow')
BACKENDS = ('quadrature', 'laplace_denominator', 'particle')
TARGET_IDS = ('quadratic', 'gaussian_mixture', 'l1_l12', 'gauss_laplace', 'tabulated')
DIAGNOSTIC_SOURCES = ('auto', 'particles', 'density')

# Process exit codes
EXIT_OK = 0
EXIT_ASSERTION_FAILED = 1
EXIT_CONFIG_ERROR = 2
EXIT_NUMERICAL_ABORT = 3

# Default tensor grids: (lo, hi) per target, points per axis by dimension
DEFAULT_GRID_RANGE = {
    'quadratic': (-12.0, 12.0),
    'gaussian_mixture': (-12.0, 12.0),
    'gauss_laplace': (-12.0, 12.0),
    'tabulated': (-12.0, 12.0),
    'l1_l12': (-25.0, 25.0),
}
DEFAULT_GRID_POINTS = {1: 2401, 2: 161, 3: 61}
MAX_GRID_DIM = 3

# Every configuration key with its default (raw strings, parsed in config.py)
CONFIG_DEFAULTS = {
    'experiment.name': 'sample',
    'experiment.preset': '',
    'target.id': 'quadratic',
    'target.dim': '1',
    'target.alpha': '1.0',
    'target.a': '2.0',
    'target.a_along': 'e1',
    'target.sigma': '1.0',
    'target.b': '0.25',
    'target.beta': '1.0',
    'target.path': '',
    'grid.lo': '',
    'grid.hi': '',
    'grid.n': '',
    'prox.backend': 'quadrature',
    'prox.T': '0.05',
    'prox.iterations': '50',
    'prox.save_every': '1',
    'prox.T_list': '0.2,0.1,0.05,0.025',
    'prox.y_list': '-2,0,2',
    'sampler.method': 'brwp_successive',
    'sampler.h': '0.05',
    'sampler.s': '1.0',
    'sampler.T': '',
    'sampler.n_particles': '500',
    'sampler.n_steps': '50',
    'sampler.kde_bandwidth': 'auto',
    'sampler.h_list': '',
    'init.law': 'gaussian',
    'init.mean': '0.0',
    'init.variance': '2.0',
    'init.scale': 'variance',
    'run.seed': '0',
    'run.threads': '',
    'run.diag_every': '1',
    'run.wallclock': 'false',
    'run.progress': 'false',
    'check.threshold': '1e-3',
    'check.delta': '0.1',
    'check.terminal_kl': '5e-3',
    'check.min_slope': '1.7',
    'diagnostics.source': 'auto',
    'output.dir': '',
    'output.plot': 'true',
}

# Named experiment presets (overlay the defaults, overlaid by files and flags)
PRESETS = {
    'mixture_evolve': {
        'experiment.name': 'prox_evolve',
        'target.id': 'gaussian_mixture',
        'prox.T': '0.01',
        'prox.iterations': '400',
        'prox.save_every': '20',
    },
    'mixture_evolve_coarse': {
        'experiment.name': 'prox_evolve',
        'target.id': 'gaussian_mixture',
        'prox.T': '0.1',
        'prox.iterations': '15',
    },
    'l1_l12_evolve': {
        'experiment.name': 'prox_evolve',
        'target.id': 'l1_l12',
        'prox.T': '0.05',
        'prox.iterations': '50',
        'prox.save_every': '5',
    },
    'mixture_sample': {
        'experiment.name': 'sample',
        'target.id': 'gaussian_mixture',
        'sampler.method': 'brwp_successive',
        'sampler.h': '0.02',
        'sampler.n_particles': '500',
        'sampler.n_steps': '50',
    },
    'mixture_particle_d10': {
        'experiment.name': 'sample',
        'target.id': 'gaussian_mixture',
        'target.dim': '10',
        'prox.backend': 'particle',
        'sampler.method': 'brwp_particle',
        'sampler.h': '0.02',
        'sampler.n_particles': '500',
        'sampler.n_steps': '50',
    },
    'gauss_laplace_sample': {
        'experiment.name': 'sample',
        'target.id': 'gauss_laplace',
        'sampler.method': 'brwp_successive',
        'sampler.h': '0.02',
        'sampler.n_particles': '500',
        'sampler.n_steps': '20',
    },
    'order_quadratic': {
        'experiment.name': 'order_check',
        'target.id': 'quadratic',
        'init.variance': '4.0',
    },
    'denominator_quadratic': {
        'experiment.name': 'denominator_check',
        'target.id': 'quadratic',
    },
    'decay_quadratic': {
        'experiment.name': 'decay_check',
        'target.id': 'quadratic',
        'sampler.method': 'brwp_kde',
        'sampler.h': '0.05',
        'sampler.n_particles': '2000',
        'sampler.n_steps': '200',
        'run.wallclock': 'false',
    },
    'sweep_quadratic': {
        'experiment.name': 'stepsize_sweep',
        'target.id': 'quadratic',
        'sampler.method': 'brwp_kde',
        'sampler.n_particles': '2000',
        'sampler.h_list': '0.16666666666666666,0.3333333333333333,0.6,1.0',
        'sampler.n_steps': '100',
        # h = 1/3 settles at variance 1 - h^2, a KL floor of 3.4e-3
        'check.threshold': '0.01',
    },
}

# Plot palette
COLORS = {
    'primary': '#6366f1',
    'secondary': '#8b5cf6',
    'success': '#22c55e',
    'danger': '#ef4444',
    'warning': '#f59e0b',
    'info': '#3b82f6',
    'muted': '#64748b',
    'dark': '#1e293b',
}

METHOD_COLORS = {
    'brwp_kde': COLORS['primary'],
    'brwp_successive': COLORS['secondary'],
    'brwp_particle': COLORS['info'],
    'ula': COLORS['warning'],
    'explicit_flow': COLORS['muted'],
}
