"""Build script for the optional compiled column-op kernel.

The package works without the extension (a numpy fallback is selected at
import time); building it just makes program execution faster.
"""

import sys

from setuptools import setup

try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "pimolap._kernels",
                ["src/pimolap/_kernels.pyx"],
                include_dirs=[numpy.get_include()],
            )
        ],
        language_level=3,
    )
except Exception as exc:  # pragma: no cover - degraded build path
    print(f"pimolap: building without compiled kernels ({exc})", file=sys.stderr)
    ext_modules = []

setup(ext_modules=ext_modules)
