"""Lattice boson dynamics in disordered potentials.

Subpackages cover the finite-box geometry, disorder generation, one-body
Anderson propagation, the discrete Hartree flow, quadratic (Bogoliubov)
fluctuation dynamics, an exact small-N Fock oracle, light-cone front
fitting, and a config-driven experiment harness.
"""

__version__ = "0.1.0"

from .lattice import LatticeBox, Region, build_box, ball_region
from .disorder import (
    Potential,
    sample_random_potential,
    quasiperiodic_potential,
    diophantine_score,
)
from .onebody import (
    OneBodyHamiltonian,
    WaveFunction,
    SudlProfile,
    assemble_hamiltonian,
    propagate,
    propagator_kernel,
    sudl_profile,
)
from .hartree import (
    HartreeTrajectory,
    C2Report,
    hartree_evolve,
    hartree_energy,
    c2_scan,
    mu_t,
)
from .bogoliubov import (
    BdgGenerator,
    QuasiFreeState,
    bdg_generator,
    evolve_fluctuations,
    local_fluctuation_number,
)
from .exactfock import (
    FockBasis,
    FockState,
    build_fock_hamiltonian,
    evolve_fock,
    product_state,
    one_rdm,
    fluctuation_numbers,
    fluctuation_moment,
    meanfield_error,
)
from .lightcone import (
    FrontSeries,
    VelocityFit,
    front_arrival,
    velocity_fit,
    epsilon_scan,
)
