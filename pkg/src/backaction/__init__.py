"""Measurement back-action on ultracold bosons in optical lattices."""

from .basis import (
    ModePartition,
    OccupationBasis,
    QuantumState,
    build_capped_basis,
    build_fixed_n_basis,
    build_support_basis,
    expand_to_sites,
    fidelity,
    reduce_to_modes,
)
from .entanglement import (
    Bipartition,
    asymptotic_entropy,
    entanglement_entropy,
    genuine_multipartite_check,
    moments_via_swap,
    reduced_density,
    renyi_entropy,
)
from .lightmatter import (
    MeasurementSet,
    ScatterOperator,
    alpha_of,
    mode_eigenvalue,
    mode_operator,
    reconstruct_occupations,
    travelling_wave_operator,
)
from .states import (
    StateRecipe,
    cat_superposition,
    gutzwiller_sf,
    merge_modes,
    multimode_pdc,
    pdc_state,
    sf_product,
    two_sf_entangled,
)
from .trajectory import (
    BhHamiltonian,
    DetectionScheme,
    TrajectoryRecord,
    conditional_update,
    run_ensemble,
    run_trajectory,
    zeno_check,
)

__version__ = "0.1.0"
