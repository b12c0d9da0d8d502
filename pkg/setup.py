"""Build script for the optional compiled MPM kernels.

The package works without the extension (a vectorized numpy fallback is
selected at import time); building it just makes ground-truth data
generation much faster.  Build in place with:

    python setup.py build_ext --inplace
"""

import os

from setuptools import Extension, setup

try:
    if not os.path.exists("src/vdgns/_mpm_kernels.pyx"):
        raise ImportError
    from Cython.Build import cythonize
    import numpy

    extensions = cythonize(
        [
            Extension(
                "vdgns._mpm_kernels",
                ["src/vdgns/_mpm_kernels.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
