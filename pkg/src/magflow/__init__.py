"""
Periodic orbits of exact magnetic flows on surfaces.

Modules: ``geometry`` (metrics, magnetic forms, potentials), ``dynamics``
(orbits, monodromy), ``loops`` (discrete free-period loop space), ``index``
(Morse and Bott indices), ``symplectic`` (linear symplectic algebra),
``search`` (minimizers, mountain passes, sweeps) and ``cli``.
"""

__version__ = "0.1.0"
