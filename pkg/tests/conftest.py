import pytest

from coneflow.fibration_model import (FibrationModel, SingularFiber,
                                      assemble_density, build_background,
                                      product_model)
from coneflow.elliptic_periods import ConstantTau, LocalLogTau
from coneflow.ke_solver import KEProblem
from coneflow.torus_field import make_grid


@pytest.fixture(scope="session")
def grid64():
    return make_grid(64)


@pytest.fixture(scope="session")
def grid128():
    return make_grid(128)


@pytest.fixture(scope="session")
def grid256():
    return make_grid(256)


@pytest.fixture(scope="session")
def product():
    return product_model()


@pytest.fixture(scope="session")
def product_bg64(product, grid64):
    return build_background(product, grid64)


@pytest.fixture(scope="session")
def product_density64(product, product_bg64, grid64):
    return assemble_density(product, product_bg64, grid64)


@pytest.fixture(scope="session")
def product_problem64(product, product_bg64, product_density64):
    return KEProblem(bg=product_bg64, density=product_density64,
                     beta=product.beta, delta=product.delta, epsilon=0.1)


@pytest.fixture(scope="session")
def product_bg128(product, grid128):
    return build_background(product, grid128)


@pytest.fixture(scope="session")
def product_problem128(product, product_bg128, grid128):
    density = assemble_density(product, product_bg128, grid128)
    return KEProblem(bg=product_bg128, density=density,
                     beta=product.beta, delta=product.delta, epsilon=0.05)


def m2_model():
    return FibrationModel(beta=0.5, delta=0.1, cone_point=(0.5, 0.5),
                          fibers=(SingularFiber((0.25, 0.25), 2),),
                          tau_model=ConstantTau(1j))


def i1_model():
    return FibrationModel(beta=0.5, delta=0.1, cone_point=(0.5, 0.5),
                          fibers=(SingularFiber((0.25, 0.25), 1, 1),),
                          tau_model=LocalLogTau(baseline=1.0, cap_radius=0.25))


@pytest.fixture(scope="session")
def m2():
    return m2_model()


@pytest.fixture(scope="session")
def i1():
    return i1_model()
