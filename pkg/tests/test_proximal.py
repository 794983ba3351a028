import logging

import numpy as np
import pytest

from app.models.density import (Grid, ParticleEnsemble, fisher_information, gaussian_density, interpolate_field,
                                kl_divergence, target_density)
from app.models.potential import (make_constant, make_gauss_laplace_mixture, make_gaussian_mixture,
                                  make_l1_l12_mixture, make_quadratic, mixture_center)
from app.models.proximal import (ProxBackend, ProxOperator, ProxParams, denominator_exact,
                                 denominator_laplace, first_order_expansion, gaussian_prox_denominator,
                                 gaussian_prox_variance, prox_gradient, prox_iterate, prox_particle_score,
                                 prox_score, prox_step)
from app.utils.errors import IsolatedParticleError, ParameterError, StepsizeError, TruncationError
from app.utils.helpers import loglog_slope


def test_heat_kernel_reduction(grid):
    rho0 = gaussian_density(grid, 0.0, 1.0)
    rhoT = prox_step(rho0, make_constant(0.0), ProxParams(T=0.5, beta=2.0))
    expected = gaussian_density(grid, 0.0, 1.5)
    assert np.max(np.abs(rhoT.values - expected.values)) <= 1e-4


def test_gaussian_chain_matches_closed_form(grid, quadratic):
    rho0 = gaussian_density(grid, 0.0, 2.0)
    rhoT = prox_step(rho0, quadratic, ProxParams(T=0.1))
    assert rhoT.variance() == pytest.approx(gaussian_prox_variance(2.0, 1.0, 1.0, 0.1), rel=1e-6)


def test_kernel_formula_conserves_mass(grid, quadratic):
    rho0 = gaussian_density(grid, 1.0, 2.0)
    operator = ProxOperator(grid, quadratic, ProxParams(T=0.05))
    raw = operator.half_boltzmann * operator.apply_kernel(rho0.values / operator.denominator)
    assert grid.integrate(raw) == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize('potential, lo, hi', [
    (make_quadratic(1.0, 1), -12.0, 12.0),
    (make_gaussian_mixture(np.array([2.0])), -12.0, 12.0),
    (make_l1_l12_mixture(1), -25.0, 25.0),
    (make_gauss_laplace_mixture(1), -12.0, 12.0),
])
def test_catalog_steps_stay_positive_and_normalized(potential, lo, hi):
    grid = Grid.uniform(lo, hi, 2401)
    rhoT = prox_step(gaussian_density(grid, 0.0, 2.0), potential, ProxParams(T=0.05))
    assert np.all(rhoT.values >= 0.0)
    assert rhoT.mass() == pytest.approx(1.0)


def test_target_is_nearly_fixed(grid, quadratic):
    rho_star = target_density(grid, quadratic)
    rhoT = prox_step(rho_star, quadratic, ProxParams(T=0.02))
    assert kl_divergence(rhoT, quadratic) < 1e-6


def test_laplace_backend_on_grid(grid, quadratic):
    rho0 = gaussian_density(grid, 0.0, 2.0)
    exact = prox_step(rho0, quadratic, ProxParams(T=0.05))
    approx = prox_step(rho0, quadratic, ProxParams(T=0.05), ProxBackend.LAPLACE)
    assert np.max(np.abs(exact.values - approx.values)) < 1e-3


def test_denominator_values_at_origin(quadratic):
    p = ProxParams(T=0.1)
    assert float(denominator_exact(0.0, quadratic, p)) == pytest.approx(0.953462, abs=1e-6)
    assert float(denominator_laplace(0.0, quadratic, p)) == pytest.approx(0.952381, abs=1e-6)


def test_denominator_matches_gaussian_oracle(quadratic):
    y = np.array([-2.0, 0.0, 2.0])
    exact = denominator_exact(y, quadratic, ProxParams(T=0.2))
    assert exact.shape == (3,)
    assert exact == pytest.approx(gaussian_prox_denominator(y, 1.0, 1.0, 0.2), rel=1e-8)


def test_laplace_error_is_second_order(quadratic):
    Ts = [0.2, 0.1, 0.05, 0.025]
    for y in (-2.0, 0.0, 2.0):
        errors = [abs(float(denominator_exact(y, quadratic, ProxParams(T)))
                      - float(denominator_laplace(y, quadratic, ProxParams(T)))) for T in Ts]
        assert loglog_slope(Ts, errors) >= 1.7


def test_laplace_stepsize_guard(mixture, caplog):
    with pytest.raises(StepsizeError):
        denominator_laplace(0.0, mixture, ProxParams(T=1.0))
    with caplog.at_level(logging.WARNING):
        denominator_laplace(0.0, mixture, ProxParams(T=0.4))
    assert 'Laplace denominator may be inaccurate' in caplog.text


def test_denominator_truncation(quadratic):
    with pytest.raises(TruncationError):
        denominator_exact(0.0, quadratic, ProxParams(T=0.1, z_grid=Grid.uniform(-1.0, 1.0, 201)))


def test_backend_validation(grid, quadratic):
    rho0 = gaussian_density(grid, 0.0, 2.0)
    with pytest.raises(ParameterError):
        prox_step(rho0, quadratic, ProxParams(T=0.1), 'particle')
    with pytest.raises(ParameterError):
        prox_step(rho0, quadratic, ProxParams(T=0.1), 'spectral')
    with pytest.raises(ParameterError):
        ProxParams(T=0.0)


def test_prox_score_of_gaussian_chain(grid, quadratic):
    rho0 = gaussian_density(grid, 0.0, 2.0)
    p = ProxParams(T=0.1)
    score = prox_score(rho0, quadratic, p)
    x = grid.points[0]
    inner = np.abs(x) < 5.0
    expected = -x / gaussian_prox_variance(2.0, 1.0, 1.0, 0.1)
    assert score[inner, 0] == pytest.approx(expected[inner], abs=1e-6)

    rhoT = prox_step(rho0, quadratic, p)
    gradient = prox_gradient(rho0, rhoT, quadratic, p)
    assert gradient.shape == (2401, 1)
    assert gradient[inner, 0] == pytest.approx(np.gradient(rhoT.values, x)[inner], abs=1e-4)


def test_prox_iterate_follows_variance_recursion(grid, quadratic):
    rho0 = gaussian_density(grid, 0.0, 2.0)
    iterates = list(prox_iterate(rho0, quadratic, ProxParams(T=0.05), 200))
    assert len(iterates) == 200
    variance = 2.0
    for _ in range(200):
        variance = gaussian_prox_variance(variance, 1.0, 1.0, 0.05)
    assert iterates[-1].variance() == pytest.approx(variance, rel=1e-5)
    # fixed point sits at 1 + T / 2 to first order
    assert variance == pytest.approx(1.025, abs=2e-3)


def test_pure_prox_kl_decay(grid, quadratic):
    rho0 = gaussian_density(grid, 0.0, 2.0)
    kl0 = kl_divergence(rho0, quadratic)
    T = 0.01
    reference = target_density(grid, quadratic)
    for k, rho in enumerate(prox_iterate(rho0, quadratic, ProxParams(T), 200), start=1):
        kl = kl_divergence(rho, quadratic, reference=reference)
        assert kl <= kl0 * np.exp(-2.0 * k * T) + 0.05 * kl0


def test_prox_kl_drop_tracks_fisher(grid, quadratic):
    T = 0.01
    reference = target_density(grid, quadratic)
    operator = ProxOperator(grid, quadratic, ProxParams(T))
    rho = gaussian_density(grid, 0.0, 2.0)
    for _ in range(10):
        kl = kl_divergence(rho, quadratic, reference=reference)
        fisher = fisher_information(rho, quadratic, reference=reference)
        rho = operator.step(rho)
        drop = (kl - kl_divergence(rho, quadratic, reference=reference)) / T
        assert drop == pytest.approx(fisher, rel=0.2)


def test_mixture_chain_settles_on_both_modes(grid, mixture):
    *_, rho = prox_iterate(gaussian_density(grid, 0.0, 2.0), mixture, ProxParams(T=0.05), 50)
    x = grid.points[0]
    right = x > 0
    assert x[right][np.argmax(rho.values[right])] == pytest.approx(2.0, abs=0.15)
    assert x[~right][np.argmax(rho.values[~right])] == pytest.approx(-2.0, abs=0.15)
    assert rho.values[np.argmin(np.abs(x))] < 0.5 * rho.values.max()


def test_particle_score_matches_grid_score(grid, rng):
    V = make_constant(0.0)
    p = ProxParams(T=0.5, beta=2.0)
    ensemble = ParticleEnsemble(np.sqrt(1.5) * rng.standard_normal(2000))
    particle = prox_particle_score(ensemble, V, p)[:, 0]
    field = prox_score(gaussian_density(grid, 0.0, 1.5), V, p)
    on_grid = interpolate_field(grid, field, ensemble.points)[:, 0]
    assert np.mean(np.abs(particle - on_grid)) <= 0.1


def test_particle_score_self_dominates_in_ten_dimensions(rng):
    V = make_quadratic(1.0, 10)
    ensemble = ParticleEnsemble(rng.standard_normal((500, 10)))
    score = prox_particle_score(ensemble, V, ProxParams(T=0.02))
    assert score == pytest.approx(-0.5 * ensemble.points, abs=1e-6)


def test_particle_score_is_permutation_equivariant(rng):
    V = make_gaussian_mixture(mixture_center(2))
    points = rng.standard_normal((60, 2))
    perm = rng.permutation(60)
    p = ProxParams(T=0.2)
    score = prox_particle_score(ParticleEnsemble(points), V, p)
    permuted = prox_particle_score(ParticleEnsemble(points[perm]), V, p)
    assert permuted == pytest.approx(score[perm], abs=1e-12)


def test_particle_score_errors(quadratic):
    ensemble = ParticleEnsemble(np.array([0.0, 1.0]))
    with pytest.raises(IsolatedParticleError):
        prox_particle_score(ensemble, quadratic, ProxParams(T=0.05), query=np.array([[50.0]]))
    with pytest.raises(ParameterError):
        prox_particle_score(ParticleEnsemble(np.array([0.0])), quadratic, ProxParams(T=0.05))


def test_first_order_expansion_bracket(grid, quadratic):
    rho0 = gaussian_density(grid, 0.0, 4.0)
    assert first_order_expansion(rho0, quadratic, 1.0, 0.0).values == pytest.approx(rho0.values)

    T = 0.01
    x = grid.points[0]
    inner = np.abs(x) < 10.0
    expansion = first_order_expansion(rho0, quadratic, 1.0, T)
    predicted = rho0.values * (1.0 + T * (0.75 - 3.0 * x ** 2 / 16.0))
    assert np.max(np.abs(expansion.values - predicted)[inner]) < 1e-6


def test_first_order_expansion_is_second_order_accurate(grid, quadratic):
    rho0 = gaussian_density(grid, 0.0, 4.0)
    Ts = [0.2, 0.1, 0.05, 0.025]
    errors = [np.max(np.abs(prox_step(rho0, quadratic, ProxParams(T)).values
                            - first_order_expansion(rho0, quadratic, 1.0, T).values)) for T in Ts]
    assert 1.7 <= loglog_slope(Ts, errors) <= 2.3


def test_gaussian_prox_variance_validation():
    assert gaussian_prox_variance(1.0, 0.0, 2.0, 0.5) == pytest.approx(1.5)
    with pytest.raises(ParameterError):
        gaussian_prox_variance(-1.0, 1.0, 1.0, 0.1)
