# services package initializer
# Expose subpackages
__all__ = ["blocks"]
