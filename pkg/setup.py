"""Build script: compiles the optional Cython kernel extension.

The package works without the extension (a pure-NumPy fallback is selected
at import time), so any build failure here is non-fatal: install with plain
`pip install -e . --no-build-isolation` and the compiled core is used when
Cython and a C compiler are available.
"""

from setuptools import setup

ext_modules = []
try:
    from Cython.Build import cythonize
    import numpy as np

    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "cimx.kernels._cython_backend",
                ["src/cimx/kernels/_cython_backend.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
        },
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
