"""Structure-preserving compressible MHD on periodic Cartesian hex meshes.

Subpackage layout:

- mesh:         periodic box meshes, entity numbering, facet records
- spaces:       tensor-product conforming spaces (H1 / H(curl) / H(div) / L2)
                and the strong derivative operators between them
- assembly:     quadrature, mass matrices, cell/facet linear functionals
- sparse:       CSR wrapper and preconditioned conjugate gradients
- mhd:          semi-discrete MHD right-hand sides, stabilized electric
                fields, energy and helicity rate audits
- timeint:      SSPRK3 stepping and the run driver
- diagnostics:  energies, helicity, divergence reports, error norms
- vortex:       steady magnetic vortex scenario (profiles and initial state)
- simcli:       config parsing, CSV/VTK output, command line entry point
"""

__version__ = "0.1.0"
