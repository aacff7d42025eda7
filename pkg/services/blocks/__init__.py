# services.blocks package initializer
# Computational blocks; import the submodules directly
__all__ = [
    "numerics",
    "potentials",
    "kernels",
    "bridge",
    "diffusion",
    "quantum_example",
    "artifacts",
    "experiment_orchestrator",
    "config",
    "logger",
    "errors",
]
